"""Checkpoints, metrics CSV and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Activation, MlpModel

MODEL_FORMAT = "advml-mlp-v1"
CSV_HEADER = ("run_id", "scenario", "seed", "step", "split", "metric", "value")


class CheckpointError(ValueError):
    pass


def model_to_json(model: MlpModel) -> dict:
    doc = {
        "format": MODEL_FORMAT,
        "activation": model.activation.value,
        "layers": [
            {"rows": W.shape[0], "cols": W.shape[1],
             "w": [float(v) for v in W.reshape(-1)],
             "b": [float(v) for v in b.reshape(-1)]}
            for W, b in zip(model.weights, model.biases)
        ],
    }
    if model.output_activation is not Activation.IDENTITY:
        doc["output_activation"] = model.output_activation.value
    return doc


def model_from_json(doc: dict) -> MlpModel:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise CheckpointError(f"not an {MODEL_FORMAT} checkpoint")
    try:
        weights, biases = [], []
        for layer in doc["layers"]:
            r, c = int(layer["rows"]), int(layer["cols"])
            w = np.asarray(layer["w"], dtype=float)
            b = np.asarray(layer["b"], dtype=float)
            if w.size != r * c or b.size != r:
                raise CheckpointError(f"layer size mismatch: {w.size} weights for {r}x{c}")
            weights.append(w.reshape(r, c))
            biases.append(b.reshape(1, r))
        return MlpModel(weights, biases, Activation(doc["activation"]),
                        Activation(doc.get("output_activation", "identity")))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc


def checkpoint_bytes(model: MlpModel) -> bytes:
    return json.dumps(model_to_json(model)).encode("utf-8")


def save_checkpoint(model: MlpModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> MlpModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    return model_from_json(doc)


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class MetricsLog:
    """Long-form metric rows, one metric per row."""

    run_id: str
    scenario: str
    seed: int
    rows: list[tuple] = field(default_factory=list)

    def add(self, metric: str, value, split: str = "test", step: int = 0) -> None:
        self.rows.append((self.run_id, self.scenario, self.seed, step, split, metric,
                          format_value(value)))

    def get(self, metric: str, split: str | None = None) -> float:
        for row in reversed(self.rows):
            if row[5] == metric and (split is None or row[4] == split):
                return float(row[6])
        raise KeyError(metric)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.rows)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_id_for(scenario: str, seed: int, config: dict) -> str:
    blob = json.dumps({"scenario": scenario, "seed": seed, "config": config}, sort_keys=True,
                      default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class RunManifest:
    run_id: str
    scenario: str
    seed: int
    config: dict
    dataset_digest: str | None = None
    started: float = field(default_factory=time.time)
    finished: float | None = None
    artifacts: dict = field(default_factory=dict)
    status: str = "running"

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True, default=str))
