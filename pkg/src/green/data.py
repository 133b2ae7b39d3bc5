"""Ordinal datasets with adjacent-grade annotator noise.

Class means sit on a line: ``mu_y = y * separation * u`` for one unit
direction ``u`` in feature space, with unit-variance isotropic noise around
them. Each observed grade equals the true grade with probability
``1 - noise_p`` and otherwise moves to a uniformly chosen neighbouring grade,
so corruption never jumps more than one step.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import binfmt
from .errors import ContractError, ParameterError, ParseError, RangeError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # b x f (vector) or b x 1 x h x w (image)
    observed_labels: np.ndarray
    n: int
    true_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        obs = np.asarray(self.observed_labels, dtype=np.int64)
        if feats.ndim not in (2, 4):
            raise ContractError(f"features must be b x f or b x 1 x h x w, got {feats.shape}")
        if obs.shape != (feats.shape[0],):
            raise ContractError(f"{feats.shape[0]} samples but {obs.shape} observed labels")
        if self.n < 2:
            raise ContractError(f"need at least two classes, got n={self.n}")
        true = None
        if self.true_labels is not None:
            true = np.asarray(self.true_labels, dtype=np.int64)
            if true.shape != obs.shape:
                raise ContractError(f"true labels {true.shape} do not match observed {obs.shape}")
        for arr in (obs, true):
            if arr is not None and arr.size and (arr.min() < 0 or arr.max() >= self.n):
                raise ContractError(f"labels must lie in [0, {self.n})")
            if arr is not None:
                arr.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "observed_labels", obs)
        object.__setattr__(self, "true_labels", true)

    @property
    def kind(self) -> str:
        return "vector" if self.features.ndim == 2 else "image"

    @property
    def in_dim(self) -> int:
        """Width of a vector sample, or the channel count of an image."""
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]

    @property
    def eval_labels(self) -> np.ndarray:
        return self.true_labels if self.true_labels is not None else self.observed_labels

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        true = None if self.true_labels is None else self.true_labels[idx]
        return Dataset(self.features[idx], self.observed_labels[idx], self.n, true)


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 5
    feature_dim: int = 16
    samples_per_class: int = 400
    separation: float = 6.0
    noise_p: float = 0.3
    seed: int = 0
    image_size: int = 0  # > 0 reshapes each sample to a 1 x s x s grid (feature_dim ignored)

    def __post_init__(self):
        if self.n_classes < 2:
            raise ParameterError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.feature_dim < 1 or self.samples_per_class < 1:
            raise ParameterError("feature_dim and samples_per_class must be positive")
        if not self.separation > 0:
            raise ParameterError(f"separation must be positive, got {self.separation}")
        if not 0.0 <= self.noise_p <= 1.0:
            raise ParameterError(f"noise_p must lie in [0, 1], got {self.noise_p}")
        if self.image_size < 0:
            raise ParameterError(f"image_size must be >= 0, got {self.image_size}")


def adjacent_noise(labels: np.ndarray, n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Move each label to a random neighbouring grade with probability ``p``."""
    labels = np.asarray(labels, dtype=np.int64)
    flip = rng.random(labels.shape) < p
    step = np.where(rng.random(labels.shape) < 0.5, -1, 1)
    step = np.where(labels == 0, 1, np.where(labels == n - 1, -1, step))
    return np.where(flip, labels + step, labels)


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_classes
    f = cfg.image_size ** 2 if cfg.image_size else cfg.feature_dim
    direction = rng.standard_normal(f)
    direction /= np.linalg.norm(direction)
    true = rng.permutation(np.repeat(np.arange(n), cfg.samples_per_class))
    feats = (true[:, None] * cfg.separation) * direction[None, :] + rng.standard_normal((len(true), f))
    observed = adjacent_noise(true, n, cfg.noise_p, rng)
    if cfg.image_size:
        feats = feats.reshape(len(true), 1, cfg.image_size, cfg.image_size)
    return Dataset(feats, observed, n, true)


def summary(ds: Dataset) -> dict:
    out = {
        "samples": len(ds),
        "n_classes": ds.n,
        "kind": ds.kind,
        "observed_histogram": np.bincount(ds.observed_labels, minlength=ds.n).tolist(),
    }
    if ds.true_labels is not None:
        out["true_histogram"] = np.bincount(ds.true_labels, minlength=ds.n).tolist()
        out["flip_rate"] = float(np.mean(ds.observed_labels != ds.true_labels)) if len(ds) else 0.0
    return out


def batch_iter(size: int, batch_size: int, shuffle_seed: Optional[int] = None) -> Iterator[np.ndarray]:
    """Yield index arrays covering ``range(size)`` once; the last one may be short."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(size) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(size)
    for start in range(0, size, batch_size):
        yield order[start:start + batch_size]


# persistence -----------------------------------------------------------------

_CSV_MAGIC = "green-dataset"


def save_csv(ds: Dataset, path):
    if ds.kind != "vector":
        raise ContractError("CSV holds vector datasets only; use the binary format for images")
    has_true = ds.true_labels is not None
    lines = [f"{_CSV_MAGIC},f={ds.in_dim},n={ds.n}"]
    for i in range(len(ds)):
        row = [format(v, ".17g") for v in ds.features[i]] + [str(int(ds.observed_labels[i]))]
        if has_true:
            row.append(str(int(ds.true_labels[i])))
        lines.append(",".join(row))
    binfmt.atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def load_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("missing header", line=1)
    header = rows[0]
    try:
        if header[0] != _CSV_MAGIC:
            raise ValueError
        fields = dict(item.split("=", 1) for item in header[1:])
        f, n = int(fields["f"]), int(fields["n"])
    except (ValueError, KeyError, IndexError):
        raise ParseError(f"header must read '{_CSV_MAGIC},f=<int>,n=<int>', got {','.join(header)!r}",
                         line=1) from None
    feats, obs, true = [], [], []
    width = None
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) not in (f + 1, f + 2) or (width is not None and len(row) != width):
            raise ParseError(f"expected {f + 1} or {f + 2} fields consistently, got {len(row)}", line=lineno)
        width = len(row)
        try:
            feats.append([float(v) for v in row[:f]])
            labels = [int(v) for v in row[f:]]
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", line=lineno) from None
        if any(not 0 <= y < n for y in labels):
            raise RangeError(f"label outside [0, {n})", line=lineno)
        obs.append(labels[0])
        if len(labels) == 2:
            true.append(labels[1])
    features = np.array(feats, dtype=np.float64).reshape(len(feats), f)
    return Dataset(features, np.array(obs, dtype=np.int64), n,
                   np.array(true, dtype=np.int64) if width == f + 2 else None)


def save_binary(ds: Dataset, path):
    arrays = {"features": ds.features, "observed_labels": ds.observed_labels}
    if ds.true_labels is not None:
        arrays["true_labels"] = ds.true_labels
    binfmt.write(path, "dataset", {"n": ds.n, "kind": ds.kind}, arrays)


def load_binary(path) -> Dataset:
    meta, arrays = binfmt.read(path, "dataset")
    try:
        return Dataset(arrays["features"], arrays["observed_labels"], int(meta["n"]),
                       arrays.get("true_labels"))
    except KeyError as exc:
        raise ParseError(f"dataset file lacks {exc.args[0]!r}") from None
    except ContractError as exc:
        raise RangeError(str(exc)) from None


def save_dataset(ds: Dataset, path):
    (save_csv if Path(path).suffix == ".csv" else save_binary)(ds, path)


def load_dataset(path) -> Dataset:
    return (load_csv if Path(path).suffix == ".csv" else load_binary)(path)
