"""Seeded desk-scale experiments.

Each function builds its data and models from one seed and returns a flat
dict of metrics. Scenarios, the CLI and the regression tests all go through
these, so a number printed by ``advml`` is the number the tests check.
"""

from __future__ import annotations

import numpy as np

from . import data, defense, evasion, fed, poison, rep, serving, theft
from .nn import TrainConfig, accuracy, mlp_init, train
from .rng import make_rng

# grid contrast low enough that an epsilon of 0.1 can cross decision boundaries
ATTACK_GRID = dict(n_per_class=200, k_classes=4, height=8, width=8, noise_std=0.15, amplitude=0.3)


def _cfg(seed: int, **kw) -> TrainConfig:
    base = dict(epochs=30, batch_size=32, lr=0.01, optimizer="adam", seed=seed)
    base.update(kw)
    return TrainConfig(**base)


def attack_grid(seed: int = 0, grid: dict | None = None):
    ds = data.gen_grid_classes(rng=make_rng(seed, "data"), **(grid or ATTACK_GRID))
    return data.train_test_split(ds, 0.25, make_rng(seed, "split"))


def train_grid_model(tr: data.Dataset, seed: int, hidden=(32,), epochs: int = 30):
    model = mlp_init([tr.d, *hidden, tr.num_classes], "relu", make_rng(seed, "init"))
    train(model, tr, _cfg(seed, epochs=epochs))
    return model


def attack_effectiveness(seed: int = 0, eps: float = 0.1, alpha: float = 0.01, iters: int = 40,
                         eps_grid=(0.0, 0.05, 0.1, 0.2)) -> dict:
    tr, te = attack_grid(seed)
    model = train_grid_model(tr, seed)
    X, y = te.features, te.labels
    out = {
        "clean_accuracy": accuracy(model, X, y),
        "fgsm_accuracy": accuracy(model, evasion.fgsm(model, X, y, eps), y),
        "pgd_accuracy": accuracy(model, evasion.pgd(model, X, y, evasion.EvasionConfig(eps, alpha, iters)), y),
    }
    for e in eps_grid:
        out[f"fgsm_error@{e}"] = evasion.misclassification_rate(model, evasion.fgsm(model, X, y, e), y)
    X_pgd = evasion.pgd(model, X, y, evasion.EvasionConfig(eps, alpha, iters))
    out["detect_rate_clean"] = float(np.mean(evasion.detect_by_noise_divergence(model, X, make_rng(seed, "detect"))))
    out["detect_rate_pgd"] = float(np.mean(evasion.detect_by_noise_divergence(model, X_pgd, make_rng(seed, "detect"))))
    return out


def adversarial_training_benefit(seed: int = 0, eps: float = 0.1) -> dict:
    tr, te = attack_grid(seed)
    X, y = te.features, te.labels
    std = train_grid_model(tr, seed)
    adv = mlp_init([tr.d, 32, tr.num_classes], "relu", make_rng(seed, "init"))
    defense.adversarial_train(adv, tr, eps, _cfg(seed))
    return {
        "standard_clean_accuracy": accuracy(std, X, y),
        "standard_robust_accuracy": accuracy(std, evasion.fgsm(std, X, y, eps), y),
        "adversarial_clean_accuracy": accuracy(adv, X, y),
        "adversarial_robust_accuracy": accuracy(adv, evasion.fgsm(adv, X, y, eps), y),
        "adversarial_pgd_accuracy": accuracy(adv, evasion.pgd(adv, X, y, evasion.EvasionConfig(eps)), y),
    }


def backdoor_pipeline(seed: int = 0, fraction: float = 0.1, target: int = 0,
                      trigger: poison.Trigger = poison.Trigger(3, 1.0)) -> dict:
    # clean pixels kept below the trigger value so the max-pixel filter can work
    ds = data.gen_grid_classes(200, 4, make_rng(seed, "data"), clip_high=0.99)
    tr, te = data.train_test_split(ds, 0.25, make_rng(seed, "split"))
    base = train_grid_model(tr, seed)
    poisoned = poison.backdoor_poison(tr, make_rng(seed, "poison"), fraction, target, trigger)
    bd = train_grid_model(poisoned, seed)
    filtered, report = poison.filter_triggered(poisoned, trigger.value)
    retrained = train_grid_model(filtered, seed)
    hidden_ref = defense.activation_anomaly_threshold(bd, tr)
    trig_test = poison.stamp_trigger(te.features, te.grid, trigger)
    return {
        "baseline_clean_accuracy": accuracy(base, te.features, te.labels),
        "backdoor_clean_accuracy": accuracy(bd, te.features, te.labels),
        "backdoor_asr": poison.attack_success_rate(bd, te, target, trigger),
        "baseline_asr": poison.attack_success_rate(base, te, target, trigger),
        "filter_precision": report.precision,
        "filter_recall": report.recall,
        "filter_removed": int(report.removed.size),
        "retrained_asr": poison.attack_success_rate(retrained, te, target, trigger),
        "retrained_clean_accuracy": accuracy(retrained, te.features, te.labels),
        "activation_flag_rate_clean": float(np.mean(defense.flag_activation_anomalies(bd, te.features, hidden_ref))),
        "activation_flag_rate_triggered": float(np.mean(defense.flag_activation_anomalies(bd, trig_test, hidden_ref))),
    }


FLIP_DATA = dict(center_offset=1.0, std=0.5)


def label_flip_defense(seed: int = 0, fraction: float = 0.1) -> dict:
    """Memorizing net on flipped two-Gaussians, then audit, relabel, retrain."""
    tr = data.gen_two_gaussians(50, make_rng(seed, "train"), **FLIP_DATA)
    te = data.gen_two_gaussians(500, make_rng(seed, "test"), **FLIP_DATA)
    cfg = _cfg(seed, epochs=1000, batch_size=16)

    def big():
        return mlp_init([2, 128, 128, 2], "relu", make_rng(seed, "init"))

    clean = big()
    train(clean, tr, cfg)
    flipped = poison.flip_labels(tr, fraction, make_rng(seed, "flip"))
    dirty = big()
    train(dirty, flipped, cfg)

    small_cfg = _cfg(seed, epochs=100, batch_size=16)
    audit = defense.crossval_label_audit(
        flipped, lambda s: mlp_init([2, 16, 2], "relu", np.random.default_rng(s)), small_cfg,
        make_rng(seed, "audit"), folds=5, flag_threshold=3, repeats=3)
    keep = np.setdiff1d(np.arange(flipped.n), audit.suspects)
    labeler = mlp_init([2, 16, 2], "relu", make_rng(seed, "labeler"))
    train(labeler, flipped.subset(keep), small_cfg)
    relabeled = defense.pseudo_label_relabel(labeler, flipped, audit.suspects)
    repaired = big()
    train(repaired, relabeled, cfg)

    a_clean = accuracy(clean, te.features, te.labels)
    a_dirty = accuracy(dirty, te.features, te.labels)
    a_fixed = accuracy(repaired, te.features, te.labels)
    gap = a_clean - a_dirty
    return {
        "clean_accuracy": a_clean,
        "flipped_accuracy": a_dirty,
        "repaired_accuracy": a_fixed,
        "degradation": gap,
        "recovered_fraction": (a_fixed - a_dirty) / gap if gap > 0 else float("nan"),
        "audit_suspects": audit.count,
        "audit_precision": audit.precision,
        "audit_recall": audit.recall,
        "flipped_rows": int(flipped.poisoned_mask().sum()),
    }


def _serve_oracle(model, noise_factor: float, seed: int):
    cfg = serving.ServeConfig(token="bench", noise_factor=noise_factor, limiter=None)
    rng = make_rng(seed, "serve-noise")

    def fn(X):
        rows = []
        for x in X:
            probs = np.zeros(model.n_outputs)
            for item in serving.guarded_predict(model, x, cfg, "bench", "bench", 0.0, rng)["top"]:
                probs[item["class"]] = item["prob"]
            rows.append(probs)
        return np.vstack(rows)

    return theft.FunctionOracle(fn)


def extraction_target(seed: int = 0):
    tr = data.gen_two_gaussians(200, make_rng(seed, "train"))
    target = mlp_init([2, 16, 2], "relu", make_rng(seed, "target"))
    train(target, tr, _cfg(seed, epochs=50, batch_size=16))
    probes = make_rng(seed, "probe").uniform(-3, 3, (2000, 2))
    holdout = make_rng(seed, "holdout").uniform(-3, 3, (1000, 2))
    return target, probes, holdout


def extraction(seed: int = 0, n_probes: int = 2000, noise_factors=(0.0, 0.5), eps: float = 0.1) -> dict:
    target, probes, holdout = extraction_target(seed)
    probes = probes[:n_probes]
    out: dict = {}
    surrogate = None
    for nf in noise_factors:
        oracle = _serve_oracle(target, nf, seed)
        labels = theft.query_argmax_labels(oracle, probes)
        s = theft.train_surrogate([16, 2], probes, labels, _cfg(seed, epochs=50),
                                  make_rng(seed, "surrogate"))
        out[f"agreement@noise={nf}"] = theft.agreement_rate(s, target, holdout)
        out[f"queries@noise={nf}"] = oracle.calls
        if surrogate is None:
            surrogate = s
    te = data.gen_two_gaussians(500, make_rng(seed, "test"))
    out["transfer_rate"] = theft.transfer_attack_rate(surrogate, target, te.features, te.labels, eps, None)
    out["direct_fgsm_rate"] = theft.transfer_attack_rate(target, target, te.features, te.labels, eps, None)
    return out


MEMBERSHIP_SHIFT = 0.3


def membership(seed: int = 0) -> dict:
    """Overfit tiny model versus a small, briefly trained model on ample data."""

    def gen(n, label):
        return data.gen_shifted_vectors(n, 10, make_rng(seed, label), shift=MEMBERSHIP_SHIFT)

    out = {}
    for name, n, epochs, hidden in (("overfit", 10, 500, 64), ("regularized", 500, 20, 8)):
        members, nonmembers = gen(n, f"{name}-members"), gen(n, f"{name}-nonmembers")
        model = mlp_init([10, hidden, 2], "relu", make_rng(seed, f"{name}-init"))
        train(model, members, _cfg(seed, epochs=epochs, batch_size=8))
        res = theft.membership_advantage(theft.membership_scores(model, members.features, members.labels),
                                         theft.membership_scores(model, nonmembers.features, nonmembers.labels))
        out[f"{name}_advantage"] = res.advantage
        out[f"{name}_threshold"] = res.best_threshold
        out[f"{name}_member_accuracy"] = accuracy(model, members.features, members.labels)
    return out


def inversion(seed: int = 0, target_class: int = 0, steps: int = 1000, lr: float = 0.1) -> dict:
    ds = data.gen_grid_classes(200, 4, make_rng(seed, "data"))
    tr, _ = data.train_test_split(ds, 0.25, make_rng(seed, "split"))
    model = train_grid_model(tr, seed)
    res = theft.invert_class_input(model, target_class, theft.InversionConfig(steps=steps, lr=lr))
    template = data.grid_templates(4, 8, 8)[target_class]
    cos = float(res.x @ template / (np.linalg.norm(res.x) * np.linalg.norm(template) + 1e-300))
    return {"final_target_prob": res.final_prob, "template_cosine": cos}


def federated(seed: int = 0, rounds: int = 10, clients: int = 4, poisoned=(0,),
              dp: defense.DpConfig | None = None) -> dict:
    ds = data.gen_grid_classes(200, 4, make_rng(seed, "data"))
    tr, te = data.train_test_split(ds, 0.25, make_rng(seed, "split"))
    init = mlp_init([64, 32, 4], "relu", make_rng(seed, "init"))
    out = {}
    for name, pc in (("clean", ()), ("poisoned", tuple(poisoned))):
        cfg = fed.FedConfig(num_clients=clients, rounds=rounds, poisoned_clients=pc, dp=dp, seed=seed)
        _, hist = fed.run_federated(cfg, tr, init, te)
        out[f"{name}_final_accuracy"] = hist.accuracy[-1]
        out[f"{name}_history"] = hist
    return out


def representation(seed: int = 0) -> dict:
    ds = data.gen_grid_classes(200, 4, make_rng(seed, "data"))
    tr, te = data.train_test_split(ds, 0.25, make_rng(seed, "split"))
    out = {}

    teacher = train_grid_model(tr, seed, hidden=(64,))
    student = mlp_init([64, 8, 4], "relu", make_rng(seed, "student"))
    losses = rep.distill_train(teacher, student, tr.features, _cfg(seed))
    out["distill_final_loss"] = losses[-1]
    out["distill_agreement"] = theft.agreement_rate(student, teacher, te.features)

    g = data.gen_two_gaussians(100, make_rng(seed, "contrastive"))
    enc = mlp_init([2, 16, 2], "relu", make_rng(seed, "encoder"))
    rep.contrastive_train(enc, g, _cfg(seed, epochs=20, batch_size=64))
    out["contrastive_intra"], out["contrastive_inter"] = rep.embedding_distances(enc, g)

    mv = data.gen_shifted_vectors(100, 10, make_rng(seed, "malware"), shift=1.0)
    enc = mlp_init([10, 16, 4], "relu", make_rng(seed, "malware-encoder"))
    rep.contrastive_train(enc, mv, _cfg(seed, epochs=20, batch_size=64))
    out["malware_intra"], out["malware_inter"] = rep.embedding_distances(enc, mv)

    out["rotation_accuracy"] = rep.rotation_pretext_train([32], ds, _cfg(seed), make_rng(seed, "rotation")).accuracy

    cls0 = tr.subset(np.flatnonzero(tr.labels == 0))
    ae = rep.autoencoder_init(64, 32, 8, make_rng(seed, "autoencoder"))
    rep.autoencoder_train(ae, cls0.features, _cfg(seed, epochs=100, batch_size=16))
    held0 = te.features[te.labels == 0]
    out["ae_clean_score"] = float(rep.reconstruction_scores(ae, held0).mean())
    out["ae_triggered_score"] = float(rep.reconstruction_scores(ae, poison.stamp_trigger(held0, te.grid)).mean())
    out["ae_other_class_score"] = float(rep.reconstruction_scores(ae, te.features[te.labels != 0]).mean())
    out["ae_clean_flag_rate"] = float(np.mean(rep.flag_reconstruction(ae, held0)))
    return out
