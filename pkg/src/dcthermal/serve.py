"""HTTP prediction endpoint over loaded per-host models.

POST /predict with a JSON body

    {"host_id": "h03", "features": {"CPU": 42.0, "R": 524288.0, ...}}

returns

    {"host_id": "h03", "prediction": 71.8, "guard_flag": false,
     "guard": "ok", "model_version": "3f2a9c01d6e4"}

All 13 feature names are required. Unknown hosts get 404; malformed bodies
get 400 with the offending field named. GET /health lists the hosts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .modelio import load_model
from .sched import HostModels
from .telemetry import FEATURE_NAMES

logger = logging.getLogger(__name__)


class BadRequest(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(message)


def load_model_dir(model_dir, margin: float = 10.0, guard: bool = True) -> tuple[HostModels, dict[str, str]]:
    """Load ``<host>.model.json`` (and ``<host>.fan.json`` when present)."""
    model_dir = Path(model_dir)
    preds, fans, versions = {}, {}, {}
    for p in sorted(model_dir.glob("*.model.json")):
        host = p.name[: -len(".model.json")]
        preds[host] = load_model(p)
        versions[host] = hashlib.sha256(p.read_bytes()).hexdigest()[:12]
        fan = model_dir / f"{host}.fan.json"
        if fan.exists():
            fans[host] = load_model(fan)
    if not preds:
        raise FileNotFoundError(f"no *.model.json files in {model_dir}")
    return HostModels.build(preds, fans, margin, guard), versions


def parse_request(body: bytes) -> tuple[str, np.ndarray]:
    try:
        req = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise BadRequest("body", "request body is not valid JSON") from None
    if not isinstance(req, dict):
        raise BadRequest("body", "request body must be a JSON object")
    host = req.get("host_id")
    if not isinstance(host, str) or not host:
        raise BadRequest("host_id", "host_id must be a nonempty string")
    feats = req.get("features")
    if not isinstance(feats, dict):
        raise BadRequest("features", "features must be an object of name -> number")
    extra = sorted(set(feats) - set(FEATURE_NAMES))
    if extra:
        raise BadRequest(extra[0], f"unknown feature {extra[0]!r}")
    x = np.empty(len(FEATURE_NAMES))
    for i, name in enumerate(FEATURE_NAMES):
        if name not in feats:
            raise BadRequest(name, f"missing feature {name!r}")
        v = feats[name]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise BadRequest(name, f"feature {name!r} must be a finite number")
        x[i] = float(v)
    return host, x


def predict_response(models: HostModels, versions: dict[str, str], body: bytes) -> tuple[int, dict]:
    """(HTTP status, JSON body) for one request. Pure: no shared mutable state."""
    try:
        host, x = parse_request(body)
    except BadRequest as exc:
        return HTTPStatus.BAD_REQUEST, {"error": str(exc), "field": exc.field}
    if host not in models.predictors:
        return HTTPStatus.NOT_FOUND, {"error": f"unknown host {host!r}", "field": "host_id"}
    pred = models.predict(host, x)
    return HTTPStatus.OK, {"host_id": host, "prediction": pred.value, "guard_flag": pred.flagged,
                           "guard": pred.flag, "model_version": versions.get(host, "")}


def make_handler(models: HostModels, versions: dict[str, str]):
    class Handler(BaseHTTPRequestHandler):
        def _send(self, status: int, payload: dict) -> None:
            data = (json.dumps(payload, sort_keys=True) + "\n").encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_POST(self):  # noqa: N802
            if self.path.rstrip("/") != "/predict":
                self._send(HTTPStatus.NOT_FOUND, {"error": f"no route {self.path}"})
                return
            n = int(self.headers.get("Content-Length") or 0)
            status, payload = predict_response(models, versions, self.rfile.read(n))
            self._send(status, payload)

        def do_GET(self):  # noqa: N802
            if self.path.rstrip("/") == "/health":
                self._send(HTTPStatus.OK, {"hosts": sorted(models.predictors), "features": list(FEATURE_NAMES)})
            else:
                self._send(HTTPStatus.NOT_FOUND, {"error": f"no route {self.path}"})

        def log_message(self, fmt, *args):
            logger.debug("%s " + fmt, self.address_string(), *args)

    return Handler


def make_server(models: HostModels, versions: dict[str, str], host: str = "127.0.0.1", port: int = 8080):
    return ThreadingHTTPServer((host, port), make_handler(models, versions))
