"""Virtual-sensor HTTP service: inlet velocity in, centre-plane fields out.

Endpoints: ``POST /predict``, ``GET /health``, ``GET /metadata``. The
checkpoint header is validated before the socket opens; the weights load in
a background thread and ``/health`` answers 503 until they are in place.
"""
from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import PARAM_ORDER
from .deeponet import checkpoint_load, predict, read_header
from .errors import HotlegError, InvalidArgumentError

log = logging.getLogger(__name__)

MAX_BODY = 1 << 16
SPACES = ("scaled", "physical")


@dataclass
class ServeConfig:
    checkpoint: str
    host: str = "127.0.0.1"
    port: int = 8080
    max_concurrent: int = 4
    space: str = "physical"

    def __post_init__(self):
        if not 0 <= int(self.port) <= 65535:
            raise InvalidArgumentError(f"invalid port {self.port}")
        if self.max_concurrent < 1:
            raise InvalidArgumentError("max_concurrent must be >= 1")
        if self.space not in SPACES:
            raise InvalidArgumentError(f"space must be one of {SPACES}")


def prediction_payload(model, v_in, space="physical"):
    """Response document for one inlet velocity. Used by the server and by
    the CLI ``infer`` command so both produce identical numbers."""
    t0 = time.perf_counter()
    out = predict(model, v_in, space)
    elapsed = time.perf_counter() - t0
    values = out.values[0]
    doc = {"v_in": float(v_in), "n_points": int(values.shape[1]),
           "parameter_order": list(PARAM_ORDER), "space": space,
           "model_sha256": model.provenance.get("blob_sha256")}
    for i, name in enumerate(PARAM_ORDER):
        doc[name] = values[i].tolist()
    doc["inference_time"] = elapsed
    return doc


class RequestError(Exception):
    def __init__(self, status, reason, message):
        super().__init__(message)
        self.status, self.reason = status, reason


def parse_predict(body, default_space):
    try:
        req = json.loads(body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise RequestError(400, "malformed-json", str(exc)) from None
    if not isinstance(req, dict):
        raise RequestError(400, "malformed-body", "request body must be a JSON object")
    unknown = set(req) - {"v_in", "space"}
    if unknown:
        raise RequestError(400, "unknown-field", f"unknown fields {sorted(unknown)}")
    v = req.get("v_in")
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise RequestError(400, "invalid-v_in", "v_in must be a number")
    if not math.isfinite(v):
        raise RequestError(422, "non-finite-v_in", "v_in must be finite")
    space = req.get("space", default_space)
    if space not in SPACES:
        raise RequestError(400, "invalid-space", f"space must be one of {list(SPACES)}")
    return float(v), space


class VirtualSensorServer:
    def __init__(self, config, loader=checkpoint_load):
        self.config = config
        self.header = read_header(config.checkpoint)   # fail fast on a bad checkpoint
        self.model = None
        self.load_error = None
        self.started = time.monotonic()
        self._loader = loader
        self._slots = threading.BoundedSemaphore(config.max_concurrent)
        self._lock = threading.Lock()
        self.counters = {"requests": 0, "rejected": 0, "errors": 0}
        self.httpd = ThreadingHTTPServer((config.host, int(config.port)), _handler_for(self))
        self.httpd.daemon_threads = True

    @property
    def address(self):
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def count(self, key):
        with self._lock:
            self.counters[key] += 1

    def load(self):
        try:
            model = self._loader(self.config.checkpoint)
            model.params.flags.writeable = False
            self.model = model
            log.info("model loaded: %d nodes", model.n_points)
        except Exception as exc:        # surfaced through /health
            self.load_error = exc
            log.error("checkpoint load failed: %s", exc)

    def start(self, background_load=True):
        """Serve in a daemon thread; returns immediately."""
        if background_load:
            threading.Thread(target=self.load, daemon=True).start()
        else:
            self.load()
        threading.Thread(target=self.httpd.serve_forever, daemon=True).start()
        return self

    def serve_forever(self):
        threading.Thread(target=self.load, daemon=True).start()
        self.httpd.serve_forever()

    def shutdown(self):
        self.httpd.shutdown()
        self.httpd.server_close()

    # --- endpoint bodies: (status, document) --------------------------------

    def health(self):
        doc = {"uptime": time.monotonic() - self.started, "model_sha256": self.header.get("blob_sha256"),
               "n_points": self.header["config"]["n_points"]}
        if self.load_error is not None:
            return 500, {"status": "failed", "reason": str(self.load_error), **doc}
        if self.model is None:
            return 503, {"status": "loading", **doc}
        return 200, {"status": "ok", **doc, **self.counters}

    def metadata(self):
        if self.model is None:
            return 503, {"status": "loading"}
        m = self.model
        return 200, {"config": m.config.to_dict(), "parameter_order": list(PARAM_ORDER),
                     "coords": np.asarray(m.coords).tolist(), "scaler": m.scaler.to_dict(),
                     "model_sha256": m.provenance.get("blob_sha256"), "default_space": self.config.space}

    def predict(self, body):
        if self.model is None:
            return 503, {"error": "loading", "message": "model not loaded yet"}
        if not self._slots.acquire(blocking=False):
            self.count("rejected")
            return 503, {"error": "overloaded", "message": "too many concurrent requests"}
        try:
            self.count("requests")
            v, space = parse_predict(body, self.config.space)
            return 200, prediction_payload(self.model, v, space)
        except RequestError as exc:
            self.count("errors")
            return exc.status, {"error": exc.reason, "message": str(exc)}
        except HotlegError as exc:
            self.count("errors")
            return 422, {"error": exc.kind, "message": str(exc)}
        finally:
            self._slots.release()


def _handler_for(server):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, status, doc):
            body = json.dumps(doc).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            if status == 503:
                self.send_header("Retry-After", "1")
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/health":
                self._send(*server.health())
            elif self.path == "/metadata":
                self._send(*server.metadata())
            else:
                self._send(404, {"error": "not-found", "message": self.path})

        def do_POST(self):
            if self.path != "/predict":
                self._send(404, {"error": "not-found", "message": self.path})
                return
            try:
                length = int(self.headers.get("Content-Length", ""))
            except ValueError:
                self._send(400, {"error": "missing-length", "message": "Content-Length required"})
                return
            if length < 0 or length > MAX_BODY:
                self._send(400, {"error": "body-size", "message": f"body must be <= {MAX_BODY} bytes"})
                return
            self._send(*server.predict(self.rfile.read(length)))

    return Handler

