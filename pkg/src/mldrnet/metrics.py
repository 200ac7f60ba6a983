"""Confusion matrices, accuracy, per-class true positive rate and run reports."""

from __future__ import annotations

import csv
import json
import math

import numpy as np

from .data import crops
from .layers import softmax

UNDEFINED = float("nan")


class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    def __init__(self, n: int, counts=None):
        self.n = n
        self.counts = np.zeros((n, n), dtype=np.int64) if counts is None else np.array(counts, dtype=np.int64)
        if self.counts.shape != (n, n) or (self.counts < 0).any():
            raise ValueError(f"confusion counts must be a non-negative {n}x{n} matrix")

    def add(self, true, pred):
        np.add.at(self.counts, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.n, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else UNDEFINED

    def tolist(self):
        return self.counts.tolist()

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix(n={self.n}, total={self.total})"


def tpr_per_class(cm: ConfusionMatrix) -> list:
    """Per-class recall; classes without support are NaN (undefined)."""
    support = cm.counts.sum(axis=1)
    return [float(cm.counts[i, i] / support[i]) if support[i] else UNDEFINED for i in range(cm.n)]


def mean_defined(values) -> float:
    defined = [v for v in values if not math.isnan(v)]
    return sum(defined) / len(defined) if defined else UNDEFINED


def predict_proba(model, images, use_crops=False, batch_size=64) -> np.ndarray:
    """Fused class probabilities; five-crop probabilities are averaged when ``use_crops``."""
    size = model.config.input_size
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        if batch.shape[-1] < size:
            raise ValueError(f"images of size {batch.shape[-1]} are smaller than model input {size}")
        if use_crops:
            views = crops(batch, size)
            probs = sum(softmax(model.forward(v)[1]) for v in views) / len(views)
        else:
            probs = softmax(model.forward(crops(batch, size)[0])[1])
        out.append(probs)
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def evaluate(model, dataset, use_crops=False, batch_size=64):
    """Return (accuracy, ConfusionMatrix); argmax ties go to the lowest class index."""
    n = model.config.n_classes
    if dataset.n_classes != n:
        raise ValueError(f"model has {n} classes, dataset has {dataset.n_classes}")
    cm = ConfusionMatrix(n)
    if len(dataset):
        probs = predict_proba(model, dataset.images(), use_crops, batch_size)
        cm.add(dataset.labels(), probs.argmax(axis=1))
    return cm.accuracy(), cm


# ------------------------------------------------------------------ reports

CSV_COLUMNS = ["record", "config_hash", "seed", "epoch", "train_loss", "train_acc", "val_loss",
               "val_acc", "true", "pred", "count", "value"]


def _num(text):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


def report(results: dict, path, fmt="csv"):
    """Write a run report.

    ``results`` holds config_hash, seed, epochs (list of per-epoch dicts with
    epoch/train_loss/train_acc/val_loss/val_acc), confusion (n x n counts) and,
    optionally, accuracy and tpr.  Floats are written with ``repr`` so reading the
    file back reproduces them exactly.
    """
    head = {"config_hash": results["config_hash"], "seed": results["seed"]}
    rows = []
    for ep in results.get("epochs", []):
        rows.append({"record": "epoch", **head, **ep})
    for i, row in enumerate(results.get("confusion", [])):
        for j, c in enumerate(row):
            rows.append({"record": "confusion", **head, "true": i, "pred": j, "count": int(c)})
    if results.get("accuracy") is not None:
        rows.append({"record": "accuracy", **head, "value": results["accuracy"]})
    for i, v in enumerate(results.get("tpr", [])):
        rows.append({"record": "tpr", **head, "true": i, "value": v})

    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, restval="", lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    elif fmt == "jsonl":
        with open(path, "w") as fh:
            for row in rows:
                fh.write(json.dumps({k: row[k] for k in CSV_COLUMNS if k in row}) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report(path, fmt="csv") -> dict:
    if fmt == "csv":
        with open(path, newline="") as fh:
            rows = [{k: (v if k in ("record", "config_hash") else _num(v)) for k, v in r.items()}
                    for r in csv.DictReader(fh)]
    elif fmt == "jsonl":
        with open(path) as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    results = {"epochs": [], "confusion": [], "tpr": []}
    cells = {}
    for r in rows:
        results["config_hash"], results["seed"] = r["config_hash"], r["seed"]
        kind = r["record"]
        if kind == "epoch":
            results["epochs"].append({k: r[k] for k in ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")
                                      if r.get(k) is not None})
        elif kind == "confusion":
            cells[(r["true"], r["pred"])] = r["count"]
        elif kind == "accuracy":
            results["accuracy"] = r["value"]
        elif kind == "tpr":
            results["tpr"].append(float(r["value"]))
    if cells:
        n = max(i for i, _ in cells) + 1
        results["confusion"] = [[cells[(i, j)] for j in range(n)] for i in range(n)]
    return results
