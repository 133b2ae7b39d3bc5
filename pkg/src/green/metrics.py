"""Ordinal grading metrics computed from a truth-by-prediction confusion matrix."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # counts[i, j] = #(truth i, predicted j)

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ContractError(f"confusion matrix must be square, got shape {c.shape}")
        if (c < 0).any():
            raise ContractError("confusion counts must be nonnegative")
        c = c.astype(np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds: Sequence[int], labels: Sequence[int], n: int) -> ConfusionMatrix:
    preds, labels = np.asarray(preds, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ContractError(f"preds {preds.shape} and labels {labels.shape} must be equal-length 1-D")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ContractError(f"{name} index outside [0, {n})")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def _nonempty(cm: ConfusionMatrix):
    if cm.total == 0:
        raise ContractError("metric undefined on an empty confusion matrix")


def quadratic_weighted_kappa(cm: ConfusionMatrix, weights: str = "quadratic") -> float:
    """Cohen's kappa with ``(i-j)^2`` (or ``|i-j|`` for ``weights='linear'``) penalties."""
    _nonempty(cm)
    n = cm.n
    i, j = np.indices((n, n))
    if weights == "quadratic":
        w = (i - j) ** 2 / (n - 1) ** 2
    elif weights == "linear":
        w = np.abs(i - j) / (n - 1)
    else:
        raise ContractError(f"unknown kappa weighting {weights!r}")
    O = cm.counts / cm.total
    E = np.outer(O.sum(axis=1), O.sum(axis=0))
    num, den = float((w * O).sum()), float((w * E).sum())
    if den == 0.0:
        # zero expected disagreement forces zero observed disagreement
        assert num == 0.0
        return 1.0
    return 1.0 - num / den


def accuracy(cm: ConfusionMatrix, average: str = "micro") -> float:
    _nonempty(cm)
    if average == "micro":
        return float(np.trace(cm.counts) / cm.total)
    if average == "macro":
        support = cm.counts.sum(axis=1)
        present = support > 0
        return float(np.mean(np.diag(cm.counts)[present] / support[present]))
    raise ContractError(f"unknown accuracy average {average!r}")


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    tp = np.diag(cm.counts).astype(np.float64)
    pred_tot = cm.counts.sum(axis=0)
    true_tot = cm.counts.sum(axis=1)
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def weighted_f1(cm: ConfusionMatrix, average: str = "weighted") -> float:
    _nonempty(cm)
    f1 = per_class_f1(cm)
    if average == "weighted":
        support = cm.counts.sum(axis=1)
        return float((support / cm.total) @ f1)
    if average == "macro":
        return float(f1.mean())
    raise ContractError(f"unknown f1 average {average!r}")


METRICS = {
    "kappa": quadratic_weighted_kappa,
    "accuracy": accuracy,
    "f1": weighted_f1,
}


def evaluate(cm: ConfusionMatrix) -> dict:
    return {name: fn(cm) for name, fn in METRICS.items()}


# reporting ---------------------------------------------------------------------

def summarize(per_fold: Sequence[Mapping[str, float]]) -> dict:
    """metric -> (values, mean, std) over folds; std is the population std."""
    out = {}
    for name in per_fold[0]:
        vals = np.array([f[name] for f in per_fold], dtype=np.float64)
        out[name] = (vals.tolist(), float(vals.mean()), float(vals.std()))
    return out


def report_rows(sections: Mapping[str, Sequence[Mapping[str, float]]]) -> list:
    """Flatten ``{label_source: [fold metrics...]}`` into CSV-ready rows."""
    rows = []
    for source, per_fold in sections.items():
        for metric, (vals, mean, std) in summarize(per_fold).items():
            rows.append({"metric": metric, "labels": source, "folds": vals, "mean": mean, "std": std})
    return rows


def report_csv(rows: Sequence[dict]) -> str:
    n_folds = max(len(r["folds"]) for r in rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "labels"] + [f"fold_{k}" for k in range(n_folds)] + ["mean", "std"])
    for r in rows:
        writer.writerow([r["metric"], r["labels"]] + [repr(v) for v in r["folds"]]
                        + [repr(r["mean"]), repr(r["std"])])
    return buf.getvalue()


def report_table(rows: Sequence[dict]) -> str:
    n_folds = max(len(r["folds"]) for r in rows)
    head = f"{'metric':<10}{'labels':<10}" + "".join(f"{'fold ' + str(k):>9}" for k in range(n_folds))
    lines = [head + f"{'mean ± std':>18}", "-" * (len(head) + 18)]
    for r in rows:
        cells = "".join(f"{v:>9.4f}" for v in r["folds"])
        lines.append(f"{r['metric']:<10}{r['labels']:<10}{cells}{r['mean']:>10.4f} ± {r['std']:.4f}")
    return "\n".join(lines) + "\n"
