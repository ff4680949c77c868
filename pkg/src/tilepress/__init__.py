"""tilepress: event-driven whole-slide-image to DICOM conversion, locally.

The pipeline mirrors a cloud deployment on one machine: an object store
emits creation events to a pub/sub topic, a push subscription drives an
autoscaled conversion service, and converted instances land in a
validating DICOM store. A benchmark harness compares serial, parallel,
and event-driven conversion of the same batch.
"""

__version__ = "0.1.0"
