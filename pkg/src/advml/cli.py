"""``advml`` command line: each subcommand maps flags onto a scenario config."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import data, scenarios, serving
from .io import load_checkpoint
from .rng import make_rng

log = logging.getLogger("advml")


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()] if text else []


def _data_section(args) -> dict:
    if getattr(args, "data", None):
        sec = {"path": args.data}
        if getattr(args, "test_data", None):
            sec["test_path"] = args.test_data
        if getattr(args, "expected_digest", None):
            sec["expected_digest"] = args.expected_digest
        return sec
    return {"generator": getattr(args, "generator", "grid") or "grid"}


def _model_section(args) -> dict:
    if getattr(args, "model", None):
        return {"path": args.model}
    sec = {}
    if getattr(args, "hidden", None):
        sec["hidden"] = _ints(args.hidden)
    return sec


def _train_section(args) -> dict:
    sec = {}
    for key in ("epochs", "batch_size", "lr", "optimizer"):
        v = getattr(args, key, None)
        if v is not None:
            sec[key] = v
    return sec


def _base(args, scenario: str, params: dict, out_key: str = "model") -> dict:
    outputs = {"metrics": args.metrics, "manifest": args.manifest}
    if getattr(args, "out", None):
        outputs[out_key] = args.out
    return {
        "scenario": scenario,
        "seed": args.seed,
        "data": _data_section(args),
        "model": _model_section(args),
        "train": _train_section(args),
        "params": {k: v for k, v in params.items() if v is not None},
        "outputs": outputs,
    }


def _add_common(p: argparse.ArgumentParser, model=True, out=True):
    p.add_argument("--data", help="advml-data-v1 dataset file (default: generated grid data)")
    p.add_argument("--test-data", help="held-out dataset file (default: split from --data)")
    p.add_argument("--expected-digest", help="abort unless the dataset hashes to this value")
    p.add_argument("--generator", choices=["grid", "two_gaussians", "shifted_vectors"])
    if model:
        p.add_argument("--model", help="advml-mlp-v1 checkpoint to use instead of training")
    p.add_argument("--hidden", help="hidden layer widths, comma separated")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    if out:
        p.add_argument("--out", help="output artifact path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="advml", description="Seeded adversarial ML lab")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--metrics", help="write long-form metrics CSV here")
    ap.add_argument("--manifest", help="write the run manifest JSON here")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("kind", choices=["grid", "two_gaussians", "shifted_vectors"])
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--height", type=int, default=8)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--noise-std", type=float, default=0.15)
    p.add_argument("--amplitude", type=float, default=0.8)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--shift", type=float, default=1.0)
    p.add_argument("--center-offset", type=float, default=1.0)
    p.add_argument("--std", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--pgm-dir", help="also dump images as PGM files")

    p = sub.add_parser("train", help="train a classifier")
    _add_common(p, model=False)
    p.add_argument("--dp-clip", type=float)
    p.add_argument("--dp-noise", type=float)

    p = sub.add_parser("attack", help="evasion attack on a model")
    _add_common(p)
    p.add_argument("--method", choices=["fgsm", "pgd"], default="fgsm")
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--iters", type=int, default=40)
    p.add_argument("--random-start", action="store_true")

    p = sub.add_parser("poison", help="poison a training set")
    _add_common(p, model=False)
    p.add_argument("--method", choices=["flip", "noiseflip", "backdoor"], default="flip")
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--trigger-size", type=int, default=3)
    p.add_argument("--trigger-value", type=float, default=1.0)
    p.add_argument("--no-eval", action="store_true", help="only write the poisoned dataset")

    p = sub.add_parser("defend", help="run a defense")
    _add_common(p)
    p.add_argument("--method", default="advtrain",
                   choices=["advtrain", "sanitize", "dp", "blur", "audit", "consensus", "relabel"])
    p.add_argument("--eps", type=float)
    p.add_argument("--mode", choices=["std_k", "centroid"])
    p.add_argument("--k", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--kernel-size", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--flip-fraction", type=float)

    p = sub.add_parser("steal", help="black-box model extraction")
    _add_common(p, model=False)
    tgt = p.add_mutually_exclusive_group()
    tgt.add_argument("--target-url")
    tgt.add_argument("--target-model")
    p.add_argument("--token", default="")
    p.add_argument("--input-dim", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--probes", type=int, default=2000)
    p.add_argument("--surrogate-arch", default="16")
    p.add_argument("--on-limit", choices=["abort", "wait"], default="abort")

    p = sub.add_parser("privacy", help="inversion or membership inference")
    p.add_argument("method", choices=["invert", "membership"])
    _add_common(p, out=False)
    p.add_argument("--target-class", type=int, default=0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--image", help="write the inverted input as PGM")

    p = sub.add_parser("federate", help="federated averaging simulation")
    _add_common(p, model=False)
    p.add_argument("--clients", type=int, default=4)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--local-epochs", type=int, default=1)
    p.add_argument("--poisoned", default="")
    p.add_argument("--partition", choices=["iid", "by_class"], default="iid")
    p.add_argument("--dp-clip", type=float)
    p.add_argument("--dp-noise", type=float)

    p = sub.add_parser("rep", help="representation learning")
    p.add_argument("method", choices=["distill", "contrastive", "rotation", "autoencoder"])
    _add_common(p)
    p.add_argument("--temperature", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("serve", help="serve a checkpoint over HTTP")
    p.add_argument("--model", required=True)
    p.add_argument("--token", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--top-k", type=int)
    p.add_argument("--noise-factor", type=float, default=0.05)
    p.add_argument("--max-requests", type=int, default=5)
    p.add_argument("--time-window", type=float, default=60.0)
    p.add_argument("--no-limit", action="store_true")

    p = sub.add_parser("audit-hash", help="print or verify a dataset digest")
    p.add_argument("path")
    p.add_argument("--expect")

    p = sub.add_parser("run", help="run a scenario config file (JSON or YAML)")
    p.add_argument("config")
    return ap


def _config_for(args) -> dict:
    cmd = args.command
    if cmd == "train":
        dp = {"clip": args.dp_clip or 1.0, "noise": 0.1 if args.dp_noise is None else args.dp_noise} \
            if (args.dp_clip or args.dp_noise is not None) else None
        return _base(args, "train", {"dp": dp})
    if cmd == "attack":
        return _base(args, "attack", {"method": args.method, "eps": args.eps, "alpha": args.alpha,
                                      "iters": args.iters, "random_start": args.random_start},
                     "adversarial")
    if cmd == "poison":
        return _base(args, "poison", {"method": args.method, "fraction": args.fraction,
                                      "count": args.count, "target": args.target,
                                      "trigger_size": args.trigger_size,
                                      "trigger_value": args.trigger_value,
                                      "evaluate": not args.no_eval}, "data")
    if cmd == "defend":
        out_key = "data" if args.method in ("sanitize", "consensus", "relabel") else "model"
        return _base(args, "defend", {"method": args.method, "eps": args.eps, "mode": args.mode,
                                      "k": args.k, "threshold": args.threshold, "clip": args.clip,
                                      "noise": args.noise, "kernel_size": args.kernel_size,
                                      "sigma": args.sigma, "folds": args.folds,
                                      "flip_fraction": args.flip_fraction}, out_key)
    if cmd == "steal":
        cfg = _base(args, "steal", {"target_url": args.target_url, "token": args.token,
                                    "input_dim": args.input_dim, "num_classes": args.num_classes,
                                    "probes": args.probes,
                                    "surrogate_arch": _ints(args.surrogate_arch),
                                    "on_limit": args.on_limit, "epochs": args.epochs})
        if args.target_model:
            cfg["model"] = {"path": args.target_model}
        return cfg
    if cmd == "privacy":
        cfg = _base(args, "privacy", {"method": args.method, "target_class": args.target_class,
                                      "steps": args.steps})
        if args.image:
            cfg["outputs"]["image"] = args.image
        return cfg
    if cmd == "federate":
        return _base(args, "federate", {"clients": args.clients, "rounds": args.rounds,
                                        "local_epochs": args.local_epochs,
                                        "poisoned": _ints(args.poisoned),
                                        "partition": args.partition, "dp_clip": args.dp_clip,
                                        "dp_noise": args.dp_noise})
    if cmd == "rep":
        return _base(args, "rep", {"method": args.method, "temperature": args.temperature,
                                   "margin": args.margin, "threshold": args.threshold})
    raise AssertionError(cmd)


def _gen_data(args) -> int:
    rng = make_rng(args.seed, "data")
    if args.kind == "grid":
        ds = data.gen_grid_classes(args.n_per_class, args.classes, rng, args.height, args.width,
                                   args.noise_std, args.amplitude)
    elif args.kind == "two_gaussians":
        ds = data.gen_two_gaussians(args.n_per_class, rng, args.center_offset, args.std)
    else:
        ds = data.gen_shifted_vectors(args.n_per_class, args.dim, rng, args.shift)
    data.save_dataset(ds, args.out)
    if args.pgm_dir:
        data.dump_pgms(ds, args.pgm_dir)
    print(data.dataset_sha256(ds))
    return 0


def _serve(args) -> int:
    limiter = None if args.no_limit else serving.RateLimiter(args.max_requests, args.time_window)
    cfg = serving.ServeConfig(token=args.token, top_k=args.top_k, noise_factor=args.noise_factor,
                              limiter=limiter, host=args.host, port=args.port, seed=args.seed)
    serving.serve(load_checkpoint(args.model), cfg)
    return 0


def _audit_hash(args) -> int:
    ds = data.load_dataset(args.path)
    digest = data.dataset_sha256(ds)
    print(digest)
    if args.expect and args.expect != digest:
        print("data integrity compromised", file=sys.stderr)
        return 2
    return 0


def _print_metrics(metrics) -> None:
    for row in metrics.rows:
        _, _, _, step, split, metric, value = row
        suffix = f"[{step}]" if step else ""
        print(f"{split:6s} {metric}{suffix} = {value}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            return _gen_data(args)
        if args.command == "serve":
            return _serve(args)
        if args.command == "audit-hash":
            return _audit_hash(args)
        if args.command == "run":
            cfg = scenarios.load_config(args.config)
            cfg.setdefault("outputs", {})
            for key in ("metrics", "manifest"):
                if getattr(args, key):
                    cfg["outputs"][key] = getattr(args, key)
        else:
            cfg = _config_for(args)
        status, metrics = scenarios.run_scenario(cfg)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"advml: error: {exc}", file=sys.stderr)
        return 1
    if status:
        print(f"advml: {metrics.scenario} aborted", file=sys.stderr)
    elif not args.metrics:
        _print_metrics(metrics)
    return status


if __name__ == "__main__":
    sys.exit(main())
