"""Declarative scenario runner behind the ``advml`` CLI.

A scenario config is a key-value tree (JSON or YAML):

.. code-block:: yaml

    scenario: attack
    seed: 7
    data: {generator: grid, n_per_class: 200, k_classes: 4, amplitude: 0.3}
    test_fraction: 0.25
    model: {hidden: [32], activation: relu}
    train: {epochs: 30, batch_size: 32, lr: 0.01, optimizer: adam}
    params: {method: pgd, eps: 0.1, alpha: 0.01, iters: 40}
    outputs: {metrics: out.csv, manifest: run.json, model: model.json}

``data`` may instead name a file (``path``, optionally ``test_path`` and
``expected_digest``); ``model`` may name a checkpoint (``path``). All
randomness flows from ``seed`` through labeled child streams.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import benchmarks, data, defense, evasion, fed, poison, rep, serving, theft
from .io import MetricsLog, RunManifest, load_checkpoint, run_id_for, save_checkpoint
from .nn import MlpModel, TrainConfig, accuracy, evaluate, mlp_init, train
from .rng import child_seed, make_rng

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    pass


def load_config(path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        cfg = yaml.safe_load(text)
    else:
        cfg = json.loads(text)
    if not isinstance(cfg, dict):
        raise ScenarioError(f"{path}: config must be a mapping")
    return cfg


# ---------------------------------------------------------------- shared builders


class Context:
    def __init__(self, cfg: dict, metrics: MetricsLog, manifest: RunManifest):
        self.cfg = cfg
        self.seed = int(cfg.get("seed", 0))
        self.params = cfg.get("params", {}) or {}
        self.outputs = cfg.get("outputs", {}) or {}
        self.metrics = metrics
        self.manifest = manifest

    def rng(self, label: str) -> np.random.Generator:
        return make_rng(self.seed, label)

    def train_config(self, **override) -> TrainConfig:
        t = {"epochs": 30, "batch_size": 32, "lr": 0.01, "optimizer": "adam"}
        t.update(self.cfg.get("train", {}) or {})
        t.update(override)
        t.setdefault("seed", child_seed(self.seed, "train"))
        return TrainConfig(**t)

    def datasets(self) -> tuple[data.Dataset, data.Dataset]:
        dcfg = dict(self.cfg.get("data") or {"generator": "grid"})
        if "path" in dcfg:
            full = data.load_dataset(dcfg["path"])
        else:
            full = generate(dcfg, self.rng("data"))
        if dcfg.get("expected_digest"):
            data.verify_dataset(full, dcfg["expected_digest"])
        self.manifest.dataset_digest = data.dataset_sha256(full)
        if dcfg.get("test_path"):
            return full, data.load_dataset(dcfg["test_path"])
        return data.train_test_split(full, float(self.cfg.get("test_fraction", 0.25)), self.rng("split"))

    def new_model(self, d: int, k: int, label: str = "init") -> MlpModel:
        m = self.cfg.get("model") or {}
        hidden = list(m.get("hidden", [32]))
        return mlp_init([d, *hidden, k], m.get("activation", "relu"), self.rng(label))

    def model(self, tr: data.Dataset, **train_override) -> MlpModel:
        m = self.cfg.get("model") or {}
        if "path" in m:
            return load_checkpoint(m["path"])
        model = self.new_model(tr.d, tr.num_classes)
        train(model, tr, self.train_config(**train_override))
        return model

    def save_model(self, model: MlpModel, key: str = "model") -> None:
        if self.outputs.get(key):
            save_checkpoint(model, self.outputs[key])
            self.manifest.artifacts[key] = str(self.outputs[key])

    def save_data(self, ds: data.Dataset, key: str = "data") -> None:
        if self.outputs.get(key):
            data.save_dataset(ds, self.outputs[key])
            self.manifest.artifacts[key] = str(self.outputs[key])

    def add(self, metric, value, split="test", step=0):
        self.metrics.add(metric, value, split, step)

    def add_all(self, values: dict, split="test"):
        for k, v in values.items():
            if isinstance(v, fed.FedHistory):
                for step, (a, l) in enumerate(zip(v.accuracy, v.loss), 1):
                    self.add(f"{k}_accuracy", a, split, step)
                    self.add(f"{k}_loss", l, split, step)
            elif v is not None:
                self.add(k, v, split)


def generate(dcfg: dict, rng: np.random.Generator) -> data.Dataset:
    dcfg = dict(dcfg)
    kind = dcfg.pop("generator", "grid")
    dcfg.pop("expected_digest", None)
    if kind == "grid":
        g = {"n_per_class": 200, "k_classes": 4}
        g.update(dcfg)
        return data.gen_grid_classes(rng=rng, **g)
    if kind == "two_gaussians":
        g = {"n_per_class": 100}
        g.update(dcfg)
        return data.gen_two_gaussians(rng=rng, **g)
    if kind == "shifted_vectors":
        g = {"n_per_class": 100, "dim": 10}
        g.update(dcfg)
        return data.gen_shifted_vectors(rng=rng, **g)
    raise ScenarioError(f"unknown generator {kind!r}")


# ---------------------------------------------------------------- scenarios


def sc_train(ctx: Context) -> None:
    tr, te = ctx.datasets()
    if (ctx.cfg.get("model") or {}).get("path"):
        model = load_checkpoint(ctx.cfg["model"]["path"])
    else:
        model = ctx.new_model(tr.d, tr.num_classes)
        tc = ctx.train_config()
        hook = None
        dp = ctx.params.get("dp")
        if dp:
            hook = defense.dp_hook(defense.DpConfig(dp.get("clip", 1.0), dp.get("noise", 0.1)), ctx.rng("dp"))
        report = train(model, tr, tc, grad_hook=hook)
        for epoch, loss in enumerate(report.epoch_losses, 1):
            ctx.add("loss", loss, "train", epoch)
    for split, ds in (("train", tr), ("test", te)):
        m = evaluate(model, ds)
        ctx.add("accuracy", m.accuracy, split)
        ctx.add("loss", m.mean_loss, split)
    ctx.save_model(model)


def sc_attack(ctx: Context) -> None:
    tr, te = ctx.datasets()
    model = ctx.model(tr)
    p = ctx.params
    method = p.get("method", "fgsm")
    eps = float(p.get("eps", 0.1))
    X, y = te.features, te.labels
    if method == "fgsm":
        X_adv = evasion.fgsm(model, X, y, eps)
    elif method == "pgd":
        cfg = evasion.EvasionConfig(eps, float(p.get("alpha", 0.01)), int(p.get("iters", 40)),
                                    random_start=bool(p.get("random_start", False)))
        X_adv = evasion.pgd(model, X, y, cfg, ctx.rng("pgd-start"))
    else:
        raise ScenarioError(f"unknown attack method {method!r}")
    ctx.add("clean_accuracy", accuracy(model, X, y))
    ctx.add("adversarial_accuracy", accuracy(model, X_adv, y))
    ctx.add("linf_perturbation", float(np.max(np.abs(X_adv - X))) if X.size else 0.0)
    nf, thr = float(p.get("detect_noise", 0.2)), float(p.get("detect_threshold", 0.1))
    ctx.add("detect_rate_clean", float(np.mean(evasion.detect_by_noise_divergence(model, X, ctx.rng("detect"), nf, thr))))
    ctx.add("detect_rate_adversarial", float(np.mean(evasion.detect_by_noise_divergence(model, X_adv, ctx.rng("detect"), nf, thr))))
    ctx.save_data(data.Dataset(X_adv, y, te.num_classes, te.grid), "adversarial")
    ctx.save_model(model)


def sc_poison(ctx: Context) -> None:
    tr, te = ctx.datasets()
    p = ctx.params
    method = p.get("method", "flip")
    rng = ctx.rng("poison")
    trigger = poison.Trigger(int(p.get("trigger_size", 3)), float(p.get("trigger_value", 1.0)))
    target = int(p.get("target", 0))
    if method == "flip":
        rule = p.get("rule", "binary_swap" if tr.num_classes == 2 else [0, 1])
        bad = poison.flip_labels(tr, float(p.get("fraction", 0.1)), rng,
                                 rule if rule == "binary_swap" else tuple(rule))
    elif method == "noiseflip":
        bad = poison.noise_flip_inject(tr, int(p.get("count", 10)), rng, float(p.get("noise_scale", 0.5)))
    elif method == "backdoor":
        bad = poison.backdoor_poison(tr, rng, float(p.get("fraction", 0.1)), target, trigger)
    else:
        raise ScenarioError(f"unknown poisoning method {method!r}")
    ctx.add("poisoned_rows", int(bad.poisoned_mask().sum()), "train")
    ctx.save_data(bad)
    if p.get("evaluate", True):
        clean = ctx.new_model(tr.d, tr.num_classes)
        train(clean, tr, ctx.train_config())
        dirty = ctx.new_model(tr.d, tr.num_classes)
        train(dirty, bad, ctx.train_config())
        ctx.add("clean_model_accuracy", accuracy(clean, te.features, te.labels))
        ctx.add("poisoned_model_accuracy", accuracy(dirty, te.features, te.labels))
        if method == "backdoor":
            ctx.add("attack_success_rate", poison.attack_success_rate(dirty, te, target, trigger))
            kept, report = poison.filter_triggered(bad, trigger.value)
            ctx.add("filter_precision", report.precision, "train")
            ctx.add("filter_recall", report.recall, "train")
            ctx.add("filter_removed", report.removed.size, "train")
            if kept.n:
                fixed = ctx.new_model(tr.d, tr.num_classes)
                train(fixed, kept, ctx.train_config())
                ctx.add("filtered_attack_success_rate", poison.attack_success_rate(fixed, te, target, trigger))
            else:
                log.warning("trigger filter removed every row; use data with clip_high < trigger value")
        ctx.save_model(dirty)


def sc_defend(ctx: Context) -> None:
    tr, te = ctx.datasets()
    p = ctx.params
    method = p.get("method", "advtrain")
    X, y = te.features, te.labels
    if method == "advtrain":
        eps = float(p.get("eps", 0.1))
        std = ctx.model(tr)
        adv = ctx.new_model(tr.d, tr.num_classes)
        report = defense.adversarial_train(adv, tr, eps, ctx.train_config())
        for epoch, loss in enumerate(report.epoch_losses, 1):
            ctx.add("adversarial_loss", loss, "train", epoch)
        for name, m in (("standard", std), ("adversarial", adv)):
            ctx.add(f"{name}_clean_accuracy", accuracy(m, X, y))
            ctx.add(f"{name}_robust_accuracy", accuracy(m, evasion.fgsm(m, X, y, eps), y))
        ctx.save_model(adv)
    elif method == "sanitize":
        mode = p.get("mode", "std_k")
        kept, report = defense.sanitize_outliers(tr, mode, float(p.get("k", 3.0)), float(p.get("threshold", 1.5)))
        ctx.add("removed_rows", report.count, "train")
        if report.precision is not None:
            ctx.add("precision", report.precision, "train")
            ctx.add("recall", report.recall, "train")
        ctx.save_data(kept)
    elif method == "dp":
        dp = defense.DpConfig(float(p.get("clip", 1.0)), float(p.get("noise", 0.1)))
        model = ctx.new_model(tr.d, tr.num_classes)
        train(model, tr, ctx.train_config(), grad_hook=defense.dp_hook(dp, ctx.rng("dp")))
        ctx.add("accuracy", accuracy(model, X, y))
        ctx.save_model(model)
    elif method == "blur":
        if te.grid is None:
            raise ScenarioError("blur needs grid data")
        model = ctx.model(tr)
        k, sigma = int(p.get("kernel_size", 5)), float(p.get("sigma", 1.0))
        eps = float(p.get("eps", 0.1))
        X_adv = evasion.fgsm(model, X, y, eps)
        ctx.add("adversarial_accuracy", accuracy(model, X_adv, y))
        ctx.add("blurred_adversarial_accuracy", accuracy(model, defense.gaussian_blur(X_adv, te.grid, k, sigma), y))
        ctx.add("blurred_clean_accuracy", accuracy(model, defense.gaussian_blur(X, te.grid, k, sigma), y))
    elif method in ("audit", "relabel"):
        tc = ctx.train_config()
        audit_data = tr
        if p.get("flip_fraction"):
            audit_data = poison.flip_labels(tr, float(p["flip_fraction"]), ctx.rng("flip"),
                                            "binary_swap" if tr.num_classes == 2 else (0, 1))
        hidden = list((ctx.cfg.get("model") or {}).get("hidden", [16]))
        factory = lambda s: mlp_init([tr.d, *hidden, tr.num_classes], "relu", np.random.default_rng(s))  # noqa: E731
        report = defense.crossval_label_audit(audit_data, factory, tc, ctx.rng("audit"),
                                              int(p.get("folds", 5)), int(p.get("flag_threshold", 3)),
                                              int(p.get("repeats", 3)))
        ctx.add("suspects", report.count, "train")
        if report.precision is not None:
            ctx.add("precision", report.precision, "train")
            ctx.add("recall", report.recall, "train")
        if method == "relabel":
            keep = np.setdiff1d(np.arange(audit_data.n), report.suspects)
            labeler = ctx.new_model(tr.d, tr.num_classes, "labeler")
            train(labeler, audit_data.subset(keep), tc)
            fixed = defense.pseudo_label_relabel(labeler, audit_data, report.suspects)
            model = ctx.new_model(tr.d, tr.num_classes)
            train(model, fixed, tc)
            ctx.add("relabeled_accuracy", accuracy(model, X, y))
            ctx.save_data(fixed)
    elif method == "consensus":
        a = ctx.new_model(tr.d, tr.num_classes, "consensus-a")
        b = ctx.new_model(tr.d, tr.num_classes, "consensus-b")
        train(a, tr, ctx.train_config(seed=child_seed(ctx.seed, "a")))
        train(b, tr, ctx.train_config(seed=child_seed(ctx.seed, "b")))
        kept, report = defense.consensus_disagreement_filter(tr, a, b)
        ctx.add("removed_rows", report.count, "train")
        ctx.save_data(kept)
    else:
        raise ScenarioError(f"unknown defense method {method!r}")


def sc_steal(ctx: Context) -> None:
    p = ctx.params
    n = int(p.get("probes", 2000))
    arch = [int(v) for v in p.get("surrogate_arch", [16])]
    tc = ctx.train_config(epochs=int(p.get("epochs", 50)))
    if p.get("target_url"):
        d = int(p["input_dim"])
        k = int(p["num_classes"])
        lo, hi = p.get("probe_range", [-3.0, 3.0])
        probes = ctx.rng("probes").uniform(lo, hi, (n, d))
        holdout = ctx.rng("holdout").uniform(lo, hi, (int(p.get("holdout", 200)), d))
        rep_ = serving.extraction_client(p["target_url"], p.get("token", ""), probes, [*arch, k], tc,
                                         ctx.rng("surrogate"), k, holdout, on_limit=p.get("on_limit", "abort"))
        ctx.add("queries", rep_.queries)
        ctx.add("answered", rep_.answered)
        ctx.add("rate_limited", rep_.rate_limited)
        if rep_.agreement is not None:
            ctx.add("agreement", rep_.agreement)
        if rep_.surrogate is not None:
            ctx.save_model(rep_.surrogate)
        return
    tr, te = ctx.datasets()
    target = ctx.model(tr)
    lo, hi = p.get("probe_range", [float(tr.features.min()), float(tr.features.max())])
    probes = ctx.rng("probes").uniform(lo, hi, (n, tr.d))
    oracle = theft.ModelOracle(target)
    labels = theft.query_argmax_labels(oracle, probes)
    sur = theft.train_surrogate([*arch, tr.num_classes], probes, labels, tc, ctx.rng("surrogate"))
    ctx.add("queries", oracle.calls)
    ctx.add("agreement", theft.agreement_rate(sur, target, te.features))
    clamp = (0.0, 1.0) if tr.grid is not None else None
    ctx.add("transfer_rate", theft.transfer_attack_rate(sur, target, te.features, te.labels,
                                                        float(p.get("eps", 0.1)), clamp))
    ctx.save_model(sur)


def sc_privacy(ctx: Context) -> None:
    p = ctx.params
    method = p.get("method", "membership")
    tr, te = ctx.datasets()
    model = ctx.model(tr)
    if method == "invert":
        cfg = theft.InversionConfig(int(p.get("steps", 1000)), float(p.get("lr", 0.1)))
        res = theft.invert_class_input(model, int(p.get("target_class", 0)), cfg)
        ctx.add("final_target_prob", res.final_prob)
        if tr.grid is not None and ctx.outputs.get("image"):
            data.write_pgm(res.x.reshape(tr.grid), ctx.outputs["image"])
            ctx.manifest.artifacts["image"] = ctx.outputs["image"]
    elif method == "membership":
        k = min(tr.n, te.n)
        res = theft.membership_advantage(theft.membership_scores(model, tr.features[:k], tr.labels[:k]),
                                         theft.membership_scores(model, te.features[:k], te.labels[:k]))
        ctx.add("advantage", res.advantage)
        ctx.add("threshold", res.best_threshold)
    else:
        raise ScenarioError(f"unknown privacy method {method!r}")


def sc_federate(ctx: Context) -> None:
    tr, te = ctx.datasets()
    p = ctx.params
    dp = None
    if p.get("dp_clip") is not None or p.get("dp_noise") is not None:
        dp = defense.DpConfig(float(p.get("dp_clip", 1.0)), float(p.get("dp_noise", 0.1)))
    t = ctx.train_config()
    cfg = fed.FedConfig(num_clients=int(p.get("clients", 4)), rounds=int(p.get("rounds", 10)),
                        local_epochs=int(p.get("local_epochs", 1)), lr=t.lr, batch_size=t.batch_size,
                        optimizer=t.optimizer, poisoned_clients=tuple(p.get("poisoned", ())), dp=dp,
                        partition=p.get("partition", "iid"), seed=child_seed(ctx.seed, "federate"))
    model, hist = fed.run_federated(cfg, tr, ctx.new_model(tr.d, tr.num_classes), te)
    ctx.add_all({"global": hist})
    ctx.save_model(model)


def sc_rep(ctx: Context) -> None:
    tr, te = ctx.datasets()
    p = ctx.params
    method = p.get("method", "distill")
    tc = ctx.train_config()
    if method == "distill":
        teacher = ctx.model(tr)
        student = mlp_init([tr.d, *p.get("student_hidden", [8]), tr.num_classes], "relu", ctx.rng("student"))
        losses = rep.distill_train(teacher, student, tr.features, tc, float(p.get("temperature", 3.0)))
        for epoch, loss in enumerate(losses, 1):
            ctx.add("distillation_loss", loss, "train", epoch)
        ctx.add("agreement", theft.agreement_rate(student, teacher, te.features))
        ctx.save_model(student)
    elif method == "contrastive":
        enc = mlp_init([tr.d, *p.get("hidden", [16]), int(p.get("embedding_dim", 2))], "relu", ctx.rng("encoder"))
        rep.contrastive_train(enc, tr, tc, float(p.get("margin", 1.0)))
        intra, inter = rep.embedding_distances(enc, te)
        ctx.add("intra_class_distance", intra)
        ctx.add("inter_class_distance", inter)
        ctx.save_model(enc)
    elif method == "rotation":
        res = rep.rotation_pretext_train(p.get("hidden", [32]), tr, tc, ctx.rng("rotation"))
        ctx.add("rotation_accuracy", res.accuracy)
        ctx.save_model(res.model)
    elif method == "autoencoder":
        cls = int(p.get("train_class", 0))
        ae = rep.autoencoder_init(tr.d, int(p.get("hidden", 32)), int(p.get("bottleneck", 8)), ctx.rng("autoencoder"))
        rep.autoencoder_train(ae, tr.features[tr.labels == cls], tc)
        thr = float(p.get("threshold", 0.02))
        normal = te.features[te.labels == cls]
        other = te.features[te.labels != cls]
        ctx.add("normal_score", float(rep.reconstruction_scores(ae, normal).mean()))
        ctx.add("anomalous_score", float(rep.reconstruction_scores(ae, other).mean()))
        ctx.add("normal_flag_rate", float(rep.flag_reconstruction(ae, normal, thr).mean()))
        ctx.add("anomalous_flag_rate", float(rep.flag_reconstruction(ae, other, thr).mean()))
        ctx.save_model(ae)
    else:
        raise ScenarioError(f"unknown representation method {method!r}")


def sc_serve_audit(ctx: Context) -> None:
    """Exercise the endpoint's gates against an in-process server."""
    tr, _ = ctx.datasets()
    model = ctx.model(tr)
    p = ctx.params
    limiter = serving.RateLimiter(int(p.get("max_requests", 5)), float(p.get("time_window", 60)))
    cfg = serving.ServeConfig(token=p.get("token", "audit-token"), top_k=p.get("top_k"),
                              noise_factor=float(p.get("noise_factor", 0.05)), limiter=limiter,
                              port=0, seed=child_seed(ctx.seed, "serve"))
    srv = serving.PredictServer(model, cfg)
    srv.start_background()
    try:
        ctx.add("healthz_ok", serving.fetch_health(srv.url) == "ok")
        x = tr.features[0]
        bad = serving.RemoteOracle(srv.url, "wrong-" + cfg.token, tr.num_classes)
        try:
            bad.query_row(x)
            ctx.add("wrong_token_status", 200)
        except serving.Unauthorized:
            ctx.add("wrong_token_status", 401)
        good = serving.RemoteOracle(srv.url, cfg.token, tr.num_classes)
        ok = limited = 0
        for _ in range(int(p.get("requests", limiter.max_requests + 1))):
            try:
                good.query_row(x)
                ok += 1
            except serving.RateLimited:
                limited += 1
        ctx.add("accepted", ok)
        ctx.add("rate_limited", limited)
    finally:
        srv.shutdown()
        srv.server_close()


def sc_benchmark(ctx: Context) -> None:
    name = ctx.params.get("name", "attack_effectiveness")
    fn = getattr(benchmarks, name, None)
    if fn is None or name.startswith("_") or not callable(fn):
        raise ScenarioError(f"unknown benchmark {name!r}")
    ctx.add_all(fn(ctx.seed))


SCENARIOS: dict[str, Callable[[Context], None]] = {
    "train": sc_train,
    "attack": sc_attack,
    "poison": sc_poison,
    "defend": sc_defend,
    "steal": sc_steal,
    "privacy": sc_privacy,
    "federate": sc_federate,
    "rep": sc_rep,
    "serve-audit": sc_serve_audit,
    "benchmark": sc_benchmark,
}


def run_scenario(cfg: dict | str | Path) -> tuple[int, MetricsLog]:
    """Run one scenario; returns ``(exit_status, metrics)``.

    Metrics and manifest are written when ``outputs`` names them. An integrity
    failure aborts before any training and writes no model artifact.
    """
    if not isinstance(cfg, dict):
        cfg = load_config(cfg)
    name = cfg.get("scenario")
    if name not in SCENARIOS:
        raise ScenarioError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    seed = int(cfg.get("seed", 0))
    snapshot = {k: v for k, v in cfg.items() if k != "outputs"}
    metrics = MetricsLog(run_id_for(name, seed, snapshot), name, seed)
    manifest = RunManifest(metrics.run_id, name, seed, snapshot)
    ctx = Context(cfg, metrics, manifest)
    status = 0
    try:
        SCENARIOS[name](ctx)
        manifest.status = "ok"
    except data.IntegrityError as exc:
        log.error("%s", exc)
        manifest.status = f"aborted: {exc}"
        status = 2
    manifest.finished = time.time()
    if ctx.outputs.get("metrics"):
        metrics.write(ctx.outputs["metrics"])
        manifest.artifacts["metrics"] = str(ctx.outputs["metrics"])
    if ctx.outputs.get("manifest"):
        manifest.write(ctx.outputs["manifest"])
    return status, metrics
