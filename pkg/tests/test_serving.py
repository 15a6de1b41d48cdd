import json
import time
import urllib.error
import urllib.request

import numpy as np
import pytest

from advml import benchmarks, nn, serving
from advml.rng import make_rng


@pytest.fixture
def model():
    return nn.mlp_init([3, 6, 4], "relu", make_rng(0))


def _cfg(**kw):
    base = dict(token="s3cret", noise_factor=0.0, limiter=serving.RateLimiter(5, 60), port=0)
    base.update(kw)
    return serving.ServeConfig(**base)


def test_limiter_window_rules():
    lim = serving.RateLimiter(2, 60)
    assert lim.check("a", 0.0) and lim.check("a", 0.0)
    assert not lim.check("a", 0.0)
    assert lim.check("b", 0.0)
    assert lim.check("a", 60.0 + 1e-9)
    lim5 = serving.RateLimiter(5, 60)
    assert [serving.rate_limiter_check(lim5, "x", float(t)) for t in range(6)] == [True] * 5 + [False]
    with pytest.raises(ValueError):
        serving.RateLimiter(0, 60)


def test_guarded_predict_topk_and_noise(model):
    x = [0.1, 0.2, 0.3]
    probs = nn.predict_proba(model, np.array([x]))[0]
    out = serving.guarded_predict(model, x, _cfg(top_k=1), "s3cret", "id", 0.0, make_rng(0))
    assert out["top"] == [{"class": int(np.argmax(probs)), "prob": float(probs.max())}]
    noisy = serving.guarded_predict(model, x, _cfg(noise_factor=0.05), "s3cret", "id2", 0.0, make_rng(0))
    assert sum(i["prob"] for i in noisy["top"]) == pytest.approx(1.0, abs=1e-9)
    ps = [i["prob"] for i in noisy["top"]]
    assert ps == sorted(ps, reverse=True)


def test_gate_order_token_before_quota(model):
    cfg = _cfg(limiter=serving.RateLimiter(1, 60))
    with pytest.raises(serving.Unauthorized):
        serving.guarded_predict(model, [0, 0, 0], cfg, "wrong", "id", 0.0, make_rng(0))
    serving.guarded_predict(model, [0, 0, 0], cfg, "s3cret", "id", 0.0, make_rng(0))
    with pytest.raises(serving.RateLimited):
        serving.guarded_predict(model, [0, 0, 0], cfg, "s3cret", "id", 0.0, make_rng(0))
    with pytest.raises(serving.BadInput):
        serving.guarded_predict(model, [0, 0], cfg, "s3cret", "other", 0.0, make_rng(0))


def test_serve_config_validation():
    with pytest.raises(ValueError):
        serving.ServeConfig(noise_factor=-1)


@pytest.fixture
def server(model):
    srv = serving.PredictServer(model, _cfg())
    srv.start_background()
    yield srv
    srv.shutdown()
    srv.server_close()


def _post(url, body: bytes):
    req = urllib.request.Request(url + "/predict", data=body, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=5) as r:
            return r.status, json.loads(r.read()), r.headers
    except urllib.error.HTTPError as e:
        return e.code, json.loads(e.read()), e.headers


def test_http_protocol(server):
    assert serving.fetch_health(server.url) == "ok"
    good = json.dumps({"token": "s3cret", "features": [0.1, 0.2, 0.3]}).encode()
    bad = json.dumps({"token": "nope", "features": [0.1, 0.2, 0.3]}).encode()
    assert _post(server.url, bad)[:2] == (401, {"error": "unauthorized"})
    assert _post(server.url, b"{not json")[:2] == (400, {"error": "bad_input"})
    assert _post(server.url, json.dumps({"token": "s3cret", "features": [1]}).encode())[0] == 400
    statuses = [_post(server.url, good)[0] for _ in range(6)]
    assert statuses == [200] * 5 + [429]
    status, body, headers = _post(server.url, good)
    assert status == 429 and body == {"error": "rate_limited"} and float(headers["Retry-After"]) > 0


def test_remote_oracle_abort_and_unauthorized(server):
    with pytest.raises(serving.Unauthorized):
        serving.RemoteOracle(server.url, "nope", 4).query_row([0, 0, 0])
    oracle = serving.RemoteOracle(server.url, "s3cret", 4)
    X = np.zeros((5, 3))
    assert oracle(X).shape == (5, 4)
    with pytest.raises(serving.RateLimited):
        oracle.query_row([0, 0, 0])
    assert oracle.rate_limited == 1


def test_unreachable_endpoint_retries_then_fails():
    oracle = serving.RemoteOracle("http://127.0.0.1:9", "t", 2, timeout=0.5)
    with pytest.raises(ConnectionError, match="3 retries"):
        oracle.query_row([0.0])


def test_wait_mode_elapsed_floor(model):
    window = 0.3
    srv = serving.PredictServer(model, _cfg(limiter=serving.RateLimiter(5, window)))
    srv.start_background()
    try:
        probes = make_rng(0).random((12, 3))
        start = time.monotonic()
        rep = serving.extraction_client(srv.url, "s3cret", probes, [8, 4], nn.TrainConfig(epochs=2),
                                        make_rng(1), 4, on_limit="wait")
        elapsed = time.monotonic() - start
    finally:
        srv.shutdown()
        srv.server_close()
    assert rep.answered == 12 and not rep.aborted and rep.rate_limited > 0
    assert elapsed >= (12 / 5 - 1) * window


def test_extraction_client_abort_mode(server):
    rep = serving.extraction_client(server.url, "s3cret", make_rng(0).random((8, 3)), [8, 4],
                                    nn.TrainConfig(epochs=2), make_rng(1), 4)
    assert rep.aborted and rep.answered == 5 and rep.rate_limited == 1


def test_http_extraction_matches_in_process_benchmark():
    target, probes, holdout = benchmarks.extraction_target(0)
    cfg = serving.ServeConfig(token="t", noise_factor=0.0, limiter=None, port=0)
    srv = serving.PredictServer(target, cfg)
    srv.start_background()
    try:
        rep = serving.extraction_client(srv.url, "t", probes, [16, 2], benchmarks._cfg(0, epochs=50),
                                        make_rng(0, "surrogate"), 2, holdout, reference=target)
    finally:
        srv.shutdown()
        srv.server_close()
    assert rep.queries == 2000 and rep.rate_limited == 0
    local = benchmarks.extraction(0, noise_factors=(0.0,))["agreement@noise=0.0"]
    assert abs(rep.agreement - local) <= 0.02
