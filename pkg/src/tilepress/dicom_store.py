"""Destination store for converted instances.

Ingest validates every byte stream with the strict decoder, staging is
per-token, and a slide becomes queryable only when its series marker file
appears — one atomic commit per slide. Layout:

    <root>/<study_uid>/<series_uid>/<sop_uid>.dcm
    <root>/<study_uid>/<series_uid>/.committed      (JSON entry index)
    <root>/.staging/<token>/...                     (pre-commit area)

Re-committing identical content is a no-op success, which is what makes
at-least-once redelivery safe upstream. The same SOP UID with different
bytes is a hard error: it signals a UID-derivation bug, never a retry.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import dicom
from .clock import WallClock
from .util import fnv1a64, parse_rfc3339, rfc3339_ms

log = logging.getLogger("tilepress.dicom_store")

MARKER = ".committed"


class DicomStoreError(Exception):
    pass


class ValidationFailed(DicomStoreError):
    def __init__(self, cause: Exception):
        self.cause = cause
        super().__init__(f"{type(cause).__name__}: {cause}")


class DuplicateSop(DicomStoreError):
    pass


class EmptyToken(DicomStoreError):
    pass


class ConflictingSop(DicomStoreError):
    pass


@dataclass(frozen=True)
class StoreEntry:
    study_uid: str
    series_uid: str
    sop_uid: str
    path: str
    ingested_at: float
    byte_size: int


class DicomStore:
    """Validating, atomically-committing instance store."""

    def __init__(self, root: str | Path, clock=None):
        self.root = Path(root)
        self.clock = clock or WallClock()
        self._lock = threading.Lock()
        self._staging: dict[str, list[dict]] = {}
        (self.root / ".staging").mkdir(parents=True, exist_ok=True)

    # -- ingest -----------------------------------------------------------------

    def store_instance(self, data: bytes, staging_token: str) -> str:
        """Validate and stage one instance; not queryable until commit."""
        try:
            inst = dicom.decode_instance(data)
        except dicom.DicomError as e:
            raise ValidationFailed(e) from e
        with self._lock:
            staged = self._staging.setdefault(staging_token, [])
            if any(s["sop"] == inst.sop_instance_uid for s in staged):
                raise DuplicateSop(f"{inst.sop_instance_uid} already staged under {staging_token}")
            stage_dir = self.root / ".staging" / staging_token
            stage_dir.mkdir(parents=True, exist_ok=True)
            path = stage_dir / f"{inst.sop_instance_uid}.dcm"
            path.write_bytes(data)
            staged.append(
                {
                    "sop": inst.sop_instance_uid,
                    "series": inst.series_instance_uid,
                    "study": inst.study_instance_uid,
                    "digest": fnv1a64(data),
                    "size": len(data),
                }
            )
        return inst.sop_instance_uid

    def commit(self, staging_token: str) -> int:
        """Publish everything staged under the token, atomically per series.

        Returns the number of instances now visible for the token's content
        (including instances that were already committed identically).
        """
        with self._lock:
            staged = self._staging.pop(staging_token, None)
            if not staged:
                raise EmptyToken(staging_token)
            stage_dir = self.root / ".staging" / staging_token
            by_series: dict[tuple[str, str], list[dict]] = {}
            for item in staged:
                by_series.setdefault((item["study"], item["series"]), []).append(item)

            count = 0
            for (study, series), items in by_series.items():
                series_dir = self.root / study / series
                marker = series_dir / MARKER
                existing = self._read_marker(marker)
                if existing is not None:
                    for item in items:
                        prior = existing.get(item["sop"])
                        if prior is None:
                            raise ConflictingSop(
                                f"series {series} already committed without {item['sop']}"
                            )
                        if prior["digest"] != item["digest"]:
                            raise ConflictingSop(
                                f"{item['sop']}: committed digest {prior['digest']}, "
                                f"staged digest {item['digest']}"
                            )
                    count += len(items)
                    log.info("re-commit no-op token=%s series=%s", staging_token, series)
                    continue
                series_dir.mkdir(parents=True, exist_ok=True)
                for item in items:
                    src = stage_dir / f"{item['sop']}.dcm"
                    dst = series_dir / f"{item['sop']}.dcm"
                    os.replace(src, dst)
                index = {
                    "committed_at": rfc3339_ms(self.clock.now()),
                    "entries": [
                        {"sop": i["sop"], "digest": i["digest"], "size": i["size"]}
                        for i in items
                    ],
                }
                tmp = series_dir / (MARKER + ".tmp")
                tmp.write_text(json.dumps(index), "utf-8")
                os.replace(tmp, marker)  # the commit point
                count += len(items)
                log.info("commit token=%s series=%s instances=%d", staging_token, series, len(items))
            self._cleanup_staging(stage_dir)
            return count

    def _cleanup_staging(self, stage_dir: Path) -> None:
        if stage_dir.exists():
            for p in stage_dir.iterdir():
                p.unlink()
            stage_dir.rmdir()

    @staticmethod
    def _read_marker(marker: Path) -> Optional[dict]:
        if not marker.exists():
            return None
        index = json.loads(marker.read_text("utf-8"))
        return {e["sop"]: e for e in index["entries"]}

    # -- queries ------------------------------------------------------------------

    def query_series(self, study_uid: str) -> list[StoreEntry]:
        """All committed entries of a study, grouped by series, sorted by SOP."""
        study_dir = self.root / study_uid
        if not study_dir.is_dir():
            return []
        entries = []
        for series_dir in sorted(p for p in study_dir.iterdir() if p.is_dir()):
            marker = series_dir / MARKER
            if not marker.exists():
                continue  # uncommitted slides stay invisible
            index = json.loads(marker.read_text("utf-8"))
            ingested = parse_rfc3339(index["committed_at"])
            for e in sorted(index["entries"], key=lambda x: x["sop"]):
                entries.append(
                    StoreEntry(
                        study_uid=study_uid,
                        series_uid=series_dir.name,
                        sop_uid=e["sop"],
                        path=str(series_dir / f"{e['sop']}.dcm"),
                        ingested_at=ingested,
                        byte_size=e["size"],
                    )
                )
        return entries

    def list_studies(self) -> list[str]:
        return sorted(
            p.name for p in self.root.iterdir() if p.is_dir() and p.name != ".staging"
        )

    def instance_count(self) -> int:
        return sum(len(self.query_series(s)) for s in self.list_studies())

    def read_instance(self, entry: StoreEntry) -> bytes:
        return Path(entry.path).read_bytes()


# -- HTTP facade -----------------------------------------------------------------


def _split_query(path: str) -> tuple[str, dict]:
    from urllib.parse import parse_qs, urlparse

    parsed = urlparse(path)
    return parsed.path, {k: v[0] for k, v in parse_qs(parsed.query).items()}


class DicomStoreHttpServer:
    """Facade exposing a store over HTTP for multi-process deployments.

    POST /instances?token=T   stage body bytes under token T
    POST /commit?token=T      commit token T
    POST /instances           stage and commit a single instance
    GET  /studies/{study_uid} entry list as JSON
    """

    def __init__(self, store: DicomStore, host: str = "127.0.0.1", port: int = 0):
        import http.server

        facade = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, status: int, payload: dict) -> None:
                body = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                route, params = _split_query(self.path)
                length = int(self.headers.get("Content-Length", "0"))
                body = self.rfile.read(length)
                try:
                    if route == "/instances":
                        token = params.get("token")
                        if token:
                            sop = facade.store.store_instance(body, token)
                            self._reply(200, {"sopInstanceUid": sop, "token": token})
                        else:
                            token = f"single-{facade._seq()}"
                            sop = facade.store.store_instance(body, token)
                            facade.store.commit(token)
                            self._reply(200, {"sopInstanceUid": sop, "committed": True})
                    elif route == "/commit":
                        count = facade.store.commit(params.get("token", ""))
                        self._reply(200, {"committed": count})
                    else:
                        self._reply(404, {"error": "NotFound", "detail": route})
                except ValidationFailed as e:
                    self._reply(400, {"error": "ValidationFailed", "detail": str(e)})
                except (DuplicateSop, ConflictingSop) as e:
                    self._reply(409, {"error": type(e).__name__, "detail": str(e)})
                except EmptyToken as e:
                    self._reply(400, {"error": "EmptyToken", "detail": str(e)})

            def do_GET(self):
                route, _ = _split_query(self.path)
                if route.startswith("/studies/"):
                    study = route[len("/studies/") :]
                    entries = facade.store.query_series(study)
                    self._reply(
                        200,
                        {
                            "entries": [
                                {
                                    "studyUid": e.study_uid,
                                    "seriesUid": e.series_uid,
                                    "sopUid": e.sop_uid,
                                    "path": e.path,
                                    "ingestedAt": rfc3339_ms(e.ingested_at),
                                    "byteSize": e.byte_size,
                                }
                                for e in entries
                            ]
                        },
                    )
                else:
                    self._reply(404, {"error": "NotFound", "detail": route})

        self.store = store
        self._counter = 0
        self._counter_lock = threading.Lock()
        self._server = http.server.ThreadingHTTPServer((host, port), Handler)
        self._thread: Optional[threading.Thread] = None

    def _seq(self) -> int:
        with self._counter_lock:
            self._counter += 1
            return self._counter

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "DicomStoreHttpServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class DicomStoreClient:
    """Store-shaped client for the HTTP facade; drop-in for DicomStore."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _post(self, path: str, body: bytes) -> dict:
        import urllib.error
        import urllib.request

        req = urllib.request.Request(
            self.base_url + path,
            data=body,
            headers={"Content-Type": "application/dicom"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as e:
            payload = json.loads(e.read().decode("utf-8"))
            kind = payload.get("error", "")
            detail = payload.get("detail", "")
            for cls in (ValidationFailed, DuplicateSop, ConflictingSop, EmptyToken):
                if cls.__name__ == kind:
                    if cls is ValidationFailed:
                        raise ValidationFailed(DicomStoreError(detail)) from None
                    raise cls(detail) from None
            raise DicomStoreError(f"{kind}: {detail}") from None

    def store_instance(self, data: bytes, staging_token: str) -> str:
        from urllib.parse import quote

        result = self._post(f"/instances?token={quote(staging_token)}", data)
        return result["sopInstanceUid"]

    def commit(self, staging_token: str) -> int:
        from urllib.parse import quote

        result = self._post(f"/commit?token={quote(staging_token)}", b"")
        return result["committed"]

    def query_series(self, study_uid: str) -> list[StoreEntry]:
        import urllib.request

        with urllib.request.urlopen(
            f"{self.base_url}/studies/{study_uid}", timeout=self.timeout
        ) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        return [
            StoreEntry(
                study_uid=e["studyUid"],
                series_uid=e["seriesUid"],
                sop_uid=e["sopUid"],
                path=e["path"],
                ingested_at=parse_rfc3339(e["ingestedAt"]),
                byte_size=e["byteSize"],
            )
            for e in payload["entries"]
        ]
