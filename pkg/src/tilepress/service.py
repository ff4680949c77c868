"""The push-subscriber conversion web application.

A push envelope names a stored slide; the handler fetches it, decodes the
pyramid (rebuilding it when the input is base-only), encodes one DICOM
instance per level, stages them, and commits the slide atomically. Only
after the commit does the handler return 200 — ack-after-work is what
makes broker redelivery safe. Any failure returns 500 with a
machine-readable error body so the broker retries; an unparseable
envelope returns 400 and rides the bounded retry into the dead-letter
topic rather than being silently swallowed.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import __version__, dicom, wsi
from .clock import WallClock
from .pubsub import MalformedEnvelope, parse_push_body

log = logging.getLogger("tilepress.service")

DEFAULT_REQUEST_TIMEOUT = 600.0  # hard per-conversion budget, seconds

RECEIVED = "RECEIVED"
FETCHING = "FETCHING"
CONVERTING = "CONVERTING"
STORING = "STORING"
DONE = "DONE"
FAILED = "FAILED"


class ConversionTimeout(Exception):
    pass


@dataclass
class ConversionJob:
    message_id: str
    bucket: str
    key: str
    received_at: float
    state: str = RECEIVED
    attempt: int = 1
    error: Optional[str] = None


def validate_ack_deadline(ack_deadline: float, request_timeout: float) -> None:
    """Wiring-time check: the broker must outwait the slowest conversion."""
    if ack_deadline <= request_timeout:
        raise ValueError(
            f"subscription ack_deadline ({ack_deadline}s) must exceed the "
            f"conversion request timeout ({request_timeout}s)"
        )


def slide_id_for_key(key: str) -> str:
    return key[: -len(".spyr")] if key.endswith(".spyr") else key


@dataclass
class ConversionPipeline:
    """Fetch-decode-encode-commit core, shared by every workflow.

    ``work_cost`` switches simulated-work mode on: the configured sleep is
    charged on the pipeline's clock before the real conversion runs (which
    then contributes zero simulated time).
    """

    object_store: object
    dicom_store: object
    uid_root: str = dicom.DEFAULT_UID_ROOT
    tile_size: int = 256  # fallback only; the slide's own header wins
    work_cost: Optional[float] = None
    clock: object = field(default_factory=WallClock)
    on_committed: Optional[Callable[[str, float], None]] = None

    def __post_init__(self):
        self._seq = 0
        self._seq_lock = threading.Lock()

    def _next_token(self, slide_id: str) -> str:
        with self._seq_lock:
            self._seq += 1
            return f"{slide_id}.{self._seq}"

    def convert_object(self, bucket: str, key: str) -> int:
        """Convert one stored slide; returns the number of instances committed."""
        if self.work_cost is not None:
            self.clock.sleep(self.work_cost)
        data, _ = self.object_store.get_object(bucket, key)
        slide_id = slide_id_for_key(key)
        pyramid = wsi.read_spyr(data, slide_id=slide_id)
        if len(pyramid.levels) == 1 and max(pyramid.width, pyramid.height) > pyramid.tile_size:
            pyramid = wsi.build_pyramid(pyramid.levels[0], pyramid.tile_size, slide_id=slide_id)
        token = self._next_token(slide_id)
        try:
            for index, level in enumerate(pyramid.levels):
                uids = dicom.make_uids(slide_id, index, self.uid_root)
                encoded = dicom.encode_instance(level, uids, index, pyramid.tile_size)
                self.dicom_store.store_instance(encoded, token)
            count = self.dicom_store.commit(token)
        except Exception:
            abort = getattr(self.dicom_store, "abort_staging", None)
            if abort is not None:
                abort(token)
            raise
        if self.on_committed is not None:
            self.on_committed(slide_id, self.clock.now())
        return count


class ConversionService:
    """Envelope handling, job tracking, and health around a pipeline."""

    def __init__(self, pipeline: ConversionPipeline, request_timeout: float = DEFAULT_REQUEST_TIMEOUT):
        self.pipeline = pipeline
        self.request_timeout = request_timeout
        self.jobs: list[ConversionJob] = []
        self._jobs_lock = threading.Lock()
        self._attempts: dict[str, int] = {}
        self._shutting_down = False

    # handler signature matches pubsub callable endpoints
    def handle_push(self, body: bytes) -> tuple[int, bytes]:
        clock = self.pipeline.clock
        try:
            message, _sub = parse_push_body(body)
            bucket = message.attributes["bucketId"]
            key = message.attributes["objectId"]
        except (MalformedEnvelope, KeyError) as e:
            log.warning("malformed push envelope: %s", e)
            return 400, _error_body("MalformedEnvelope", str(e))

        with self._jobs_lock:
            attempt = self._attempts.get(message.message_id, 0) + 1
            self._attempts[message.message_id] = attempt
            job = ConversionJob(
                message_id=message.message_id,
                bucket=bucket,
                key=key,
                received_at=clock.now(),
                attempt=attempt,
            )
            self.jobs.append(job)

        started = clock.now()
        try:
            job.state = FETCHING
            job.state = CONVERTING
            count = self.pipeline.convert_object(bucket, key)
            job.state = STORING
            elapsed = clock.now() - started
            if elapsed > self.request_timeout:
                raise ConversionTimeout(
                    f"conversion took {elapsed:.1f}s, budget {self.request_timeout:.1f}s"
                )
            job.state = DONE
            return 200, json.dumps(
                {"status": "ok", "slideId": slide_id_for_key(key), "instances": count}
            ).encode("utf-8")
        except Exception as e:
            job.state = FAILED
            job.error = f"{type(e).__name__}: {e}"
            log.error("conversion failed bucket=%s key=%s: %s", bucket, key, job.error)
            return 500, _error_body(type(e).__name__, str(e))

    def healthz(self) -> tuple[int, bytes]:
        if self._shutting_down:
            return 503, _error_body("ShuttingDown", "draining")
        return 200, json.dumps({"status": "ok", "version": __version__}).encode("utf-8")

    def begin_shutdown(self) -> None:
        self._shutting_down = True


def _error_body(code: str, detail: str) -> bytes:
    return json.dumps({"error": code, "detail": detail}).encode("utf-8")


class ConversionHttpServer:
    """HTTP front for a ConversionService: POST /push, GET /healthz."""

    def __init__(self, service: ConversionService, host: str = "127.0.0.1", port: int = 0):
        import http.server

        svc = service

        class Handler(http.server.BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, status: int, body: bytes) -> None:
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                if self.path.split("?")[0] != "/push":
                    self._reply(404, _error_body("NotFound", self.path))
                    return
                length = int(self.headers.get("Content-Length", "0"))
                status, body = svc.handle_push(self.rfile.read(length))
                self._reply(status, body)

            def do_GET(self):
                if self.path.split("?")[0] != "/healthz":
                    self._reply(404, _error_body("NotFound", self.path))
                    return
                status, body = svc.healthz()
                self._reply(status, body)

        self.service = service
        self._server = http.server.ThreadingHTTPServer((host, port), Handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ConversionHttpServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self.service.begin_shutdown()
        self._server.shutdown()
        self._server.server_close()
