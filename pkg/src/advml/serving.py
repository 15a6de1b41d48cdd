"""Guarded prediction endpoint and a red-team extraction client.

Every request passes three gates in order: token check, per-identity rate
limit, then inference. A rejected token never consumes rate-limit quota.
"""

from __future__ import annotations

import hmac
import json
import logging
import threading
import time
import urllib.error
import urllib.request
from collections import defaultdict, deque
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

import numpy as np

from .nn import MlpModel, TrainConfig, predict_logits, softmax

log = logging.getLogger(__name__)


class GuardError(Exception):
    status = 500
    code = "error"


class Unauthorized(GuardError):
    status = 401
    code = "unauthorized"


class RateLimited(GuardError):
    status = 429
    code = "rate_limited"


class BadInput(GuardError):
    status = 400
    code = "bad_input"


class RateLimiter:
    """Sliding-window limiter: at most ``max_requests`` per ``time_window``
    seconds for each identity."""

    def __init__(self, max_requests: int = 5, time_window: float = 60.0):
        if max_requests < 1 or time_window <= 0:
            raise ValueError("max_requests must be >= 1 and time_window > 0")
        self.max_requests = max_requests
        self.time_window = time_window
        self._requests: dict[str, deque] = defaultdict(deque)
        self._lock = threading.Lock()

    def check(self, identity: str, now: float) -> bool:
        with self._lock:
            q = self._requests[identity]
            while q and now - q[0] >= self.time_window:
                q.popleft()
            if len(q) < self.max_requests:
                q.append(now)
                return True
            return False

    def retry_after(self, identity: str, now: float) -> float:
        with self._lock:
            q = self._requests.get(identity)
            if not q or len(q) < self.max_requests:
                return 0.0
            return max(0.0, q[0] + self.time_window - now)


def rate_limiter_check(limiter: RateLimiter, identity: str, now: float) -> bool:
    return limiter.check(identity, now)


@dataclass
class ServeConfig:
    token: str = "change-me"
    top_k: int | None = None
    noise_factor: float = 0.05
    limiter: RateLimiter | None = field(default_factory=RateLimiter)
    host: str = "127.0.0.1"
    port: int = 8000
    seed: int = 0

    def __post_init__(self):
        if self.noise_factor < 0:
            raise ValueError("noise_factor must be non-negative")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1")


def noisy_probabilities(probs: np.ndarray, noise_factor: float, rng: np.random.Generator) -> np.ndarray:
    """Add Gaussian noise to probabilities and push the result back through softmax.

    With no noise the probabilities are returned unchanged; the softmax step is
    only applied when noise is added.
    """
    if noise_factor == 0:
        return probs
    return softmax(probs + rng.standard_normal(probs.shape) * noise_factor)


def guarded_predict(model: MlpModel, features, cfg: ServeConfig, token: str, identity: str,
                    now: float, rng: np.random.Generator) -> dict:
    if not hmac.compare_digest(str(token).encode(), cfg.token.encode()):
        raise Unauthorized("unauthorized request, inference aborted")
    try:
        x = np.asarray(features, dtype=float)
    except (TypeError, ValueError) as exc:
        raise BadInput(str(exc)) from exc
    if x.ndim != 1 or x.size != model.n_inputs or not np.all(np.isfinite(x)):
        raise BadInput(f"expected {model.n_inputs} finite features")
    if cfg.limiter is not None and not cfg.limiter.check(identity, now):
        raise RateLimited("too many requests")
    probs = softmax(predict_logits(model, x[None, :]))
    probs = noisy_probabilities(probs, cfg.noise_factor, rng)[0]
    order = sorted(range(probs.size), key=lambda c: (-probs[c], c))
    if cfg.top_k is not None:
        order = order[: cfg.top_k]
    return {"top": [{"class": int(c), "prob": float(probs[c])} for c in order]}


# ---------------------------------------------------------------- HTTP


class _Handler(BaseHTTPRequestHandler):
    server: "PredictServer"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route through logging, not stderr
        log.debug("%s - " + fmt, self.address_string(), *args)

    def _send(self, status: int, body: bytes, ctype: str = "application/json", headers=None):
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status: int, doc: dict, headers=None):
        self._send(status, json.dumps(doc).encode("utf-8"), headers=headers)

    def do_GET(self):
        if self.path == "/healthz":
            self._send(200, b"ok", "text/plain; charset=utf-8")
        else:
            self._json(404, {"error": "not_found"})

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if self.path != "/predict":
            self._json(404, {"error": "not_found"})
            return
        srv = self.server
        identity = self.client_address[0]
        try:
            try:
                doc = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise BadInput("malformed json") from exc
            if not isinstance(doc, dict) or not isinstance(doc.get("features"), list):
                raise BadInput("expected {'token': str, 'features': [numbers]}")
            now = srv.clock()
            with srv.rng_lock:
                resp = guarded_predict(srv.model, doc["features"], srv.cfg, doc.get("token", ""),
                                       identity, now, srv.rng)
        except RateLimited:
            wait = srv.cfg.limiter.retry_after(identity, srv.clock()) if srv.cfg.limiter else 0
            self._json(429, {"error": "rate_limited"}, {"Retry-After": f"{wait:.3f}"})
            return
        except GuardError as exc:
            self._json(exc.status, {"error": exc.code})
            return
        self._json(200, resp)


class PredictServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, model: MlpModel, cfg: ServeConfig, clock: Callable[[], float] = time.monotonic):
        super().__init__((cfg.host, cfg.port), _Handler)
        self.model = model
        self.cfg = cfg
        self.clock = clock
        self.rng = np.random.default_rng(cfg.seed)
        self.rng_lock = threading.Lock()

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def serve(model: MlpModel, cfg: ServeConfig) -> None:
    with PredictServer(model, cfg) as srv:
        log.info("serving on %s", srv.url)
        srv.serve_forever()


# ---------------------------------------------------------------- client


class RemoteOracle:
    """Query oracle backed by the HTTP endpoint, one request per row.

    ``on_limit`` decides what happens on a 429: ``"wait"`` sleeps for the
    server's Retry-After and retries, ``"abort"`` raises :class:`RateLimited`.
    Network failures are retried three times before giving up.
    """

    retries = 3

    def __init__(self, url: str, token: str, n_classes: int, on_limit: str = "abort",
                 timeout: float = 10.0, sleep: Callable[[float], None] = time.sleep):
        self.url = url.rstrip("/")
        self.token = token
        self.n_classes = n_classes
        self.on_limit = on_limit
        self.timeout = timeout
        self.sleep = sleep
        self.calls = 0
        self.rate_limited = 0

    def _post(self, features) -> tuple[int, dict, dict]:
        body = json.dumps({"token": self.token, "features": [float(v) for v in features]}).encode()
        req = urllib.request.Request(self.url + "/predict", data=body,
                                     headers={"Content-Type": "application/json"})
        last = None
        for attempt in range(self.retries + 1):
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return resp.status, json.loads(resp.read()), dict(resp.headers)
            except urllib.error.HTTPError as exc:
                return exc.code, json.loads(exc.read() or b"{}"), dict(exc.headers)
            except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
                last = exc
                log.warning("request failed (attempt %d): %s", attempt + 1, exc)
        raise ConnectionError(f"endpoint unreachable after {self.retries} retries: {last}")

    def query_row(self, features) -> np.ndarray:
        while True:
            self.calls += 1
            status, doc, headers = self._post(features)
            if status == 200:
                probs = np.zeros(self.n_classes)
                for item in doc["top"]:
                    probs[item["class"]] = item["prob"]
                return probs
            if status == 429:
                self.rate_limited += 1
                if self.on_limit == "wait":
                    self.sleep(float(headers.get("Retry-After", 1.0)) + 1e-3)
                    continue
                raise RateLimited("endpoint rate limit hit")
            if status == 401:
                raise Unauthorized("endpoint rejected the token")
            raise BadInput(f"endpoint answered {status}: {doc}")

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.vstack([self.query_row(x) for x in X])


def fetch_health(url: str, timeout: float = 5.0) -> str:
    with urllib.request.urlopen(url.rstrip("/") + "/healthz", timeout=timeout) as resp:
        return resp.read().decode()


@dataclass
class ExtractionReport:
    queries: int
    answered: int
    rate_limited: int
    elapsed: float
    agreement: float | None
    aborted: bool
    surrogate: MlpModel | None = None


def extraction_client(url: str, token: str, probes: np.ndarray, surrogate_arch, cfg: TrainConfig,
                      rng: np.random.Generator, n_classes: int, holdout: np.ndarray | None = None,
                      reference=None, on_limit: str = "abort") -> ExtractionReport:
    """Label ``probes`` through the endpoint, fit a surrogate, and report fidelity.

    Agreement is measured on ``holdout`` against ``reference`` (a local oracle
    or model) when given, otherwise against fresh endpoint queries.
    """
    from .theft import agreement_rate, train_surrogate

    oracle = RemoteOracle(url, token, n_classes, on_limit=on_limit)
    start = time.monotonic()
    labels = []
    aborted = False
    for x in np.atleast_2d(probes):
        try:
            labels.append(int(np.argmax(oracle.query_row(x))))
        except RateLimited:
            aborted = True
            break
    elapsed = time.monotonic() - start
    answered = len(labels)
    surrogate = None
    agreement = None
    if answered:
        surrogate = train_surrogate(surrogate_arch, probes[:answered], np.array(labels), cfg, rng)
        if holdout is not None:
            ref = reference if reference is not None else oracle
            try:
                agreement = agreement_rate(surrogate, ref, holdout)
            except RateLimited:
                agreement = None
    return ExtractionReport(oracle.calls, answered, oracle.rate_limited, elapsed, agreement,
                            aborted, surrogate)
