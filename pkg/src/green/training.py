"""SGD training, k-fold cross-validation and checkpoint persistence."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import binfmt
from . import tensor as T
from .backbone import MLPExtractor, Model, TinyConvExtractor, forward, run
from .data import Dataset, batch_iter
from .errors import ContractError, FormatError, NumericalError, ParameterError, ShapeError
from .head import ClassDependencyHead, freeze_prior
from .metrics import confusion, evaluate
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class TrainConfig:
    """Training protocol. Defaults are the full-scale protocol; see :meth:`desk`."""

    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 60
    folds: int = 5
    seed: int = 0
    mode: str = "green"
    sigma_init: float = 1.0
    hidden: int = 8
    feature_dim: int = 16
    aux_loss_weight: float = 0.0
    extractor: str = "mlp"
    conv_channels: int = 8
    lr_decay_every: int = 0  # epochs between step decays; 0 keeps lr constant
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ParameterError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.folds < 2:
            raise ParameterError(f"folds must be >= 2, got {self.folds}")
        if self.mode not in ("baseline", "green"):
            raise ParameterError(f"mode must be 'baseline' or 'green', got {self.mode!r}")
        if self.extractor not in ("mlp", "tinyconv"):
            raise ParameterError(f"extractor must be 'mlp' or 'tinyconv', got {self.extractor!r}")
        if not self.sigma_init > 0:
            raise ParameterError(f"sigma_init must be positive, got {self.sigma_init}")
        if self.hidden < 1 or self.feature_dim < 1 or self.conv_channels < 1:
            raise ParameterError("hidden, feature_dim and conv_channels must be >= 1")
        if self.aux_loss_weight < 0 or self.lr_decay_every < 0 or not self.lr_decay_factor > 0:
            raise ParameterError("aux_loss_weight, lr_decay_every must be >= 0 and lr_decay_factor > 0")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Scaled-down protocol for synthetic runs: 40 epochs of batch 32."""
        return cls(**{"epochs": 40, "batch_size": 32, **overrides})

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def lr_at(self, epoch: int) -> float:
        if not self.lr_decay_every:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


def build_model(config: TrainConfig, dataset: Dataset) -> Model:
    return Model.build(config.extractor, dataset.in_dim, n_classes=dataset.n,
                       feature_dim=config.feature_dim, hidden=config.hidden,
                       sigma=config.sigma_init, mode=config.mode, seed=config.seed,
                       conv_channels=config.conv_channels)


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    """Plain SGD: ``p - lr * g`` for every named tensor."""
    if not lr >= 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    if params.keys() != grads.keys():
        raise ContractError(f"parameter/gradient names differ: {sorted(params)} vs {sorted(grads)}")
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        out[name] = Tensor(p.data - lr * g, requires_grad=True)
    return out


def loss_on_batch(model: Model, x, y, config: TrainConfig, tape: Optional[Tape] = None) -> Tensor:
    out = run(model, x, tape=tape)
    loss = T.nll_from_logits(out.logits, y, tape=tape)
    if config.aux_loss_weight:
        aux = T.nll_from_logits(out.S, y, tape=tape)
        loss = T.add(loss, T.scale(aux, config.aux_loss_weight, tape=tape), tape=tape)
    return loss


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


@dataclass
class FitResult:
    model: Model
    log: list = field(default_factory=list)  # dicts: epoch, mean_loss[, val_<metric>...]


def fit(model: Model, dataset: Dataset, config: TrainConfig,
        val: Optional[Dataset] = None,
        on_epoch: Optional[Callable[[dict], None]] = None) -> FitResult:
    """Train on observed labels; green heads are frozen once training ends."""
    if len(dataset) == 0:
        raise ContractError("cannot fit on an empty dataset")
    if dataset.n != model.n_classes:
        raise ContractError(f"dataset has {dataset.n} classes, model predicts {model.n_classes}")
    log = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        loss_sum = 0.0
        for b, idx in enumerate(batch_iter(len(dataset), config.batch_size, epoch_seed(config.seed, epoch))):
            tape = Tape()
            params = model.trainable_parameters()
            try:
                loss = loss_on_batch(model, dataset.features[idx], dataset.observed_labels[idx], config, tape)
            except NumericalError as exc:
                raise NumericalError(f"non-finite value at epoch {epoch}, batch {b}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"loss is {value} at epoch {epoch}, batch {b}")
            grads = tape.backward(loss)
            model = model.with_parameters(sgd_step(params, {k: grads[v] for k, v in params.items()}, lr))
            loss_sum += value * len(idx)
        row = {"epoch": epoch, "mean_loss": loss_sum / len(dataset)}
        if val is not None and len(val):
            row.update({f"val_{k}": v for k, v in score(model, val)["true" if val.true_labels is not None
                                                                   else "observed"].items()})
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    if model.mode == "green" and not model.head.frozen:
        model = dataclasses.replace(model, head=freeze_prior(model.head))
    return FitResult(model, log)


def predict(model: Model, features: np.ndarray, chunk: int = 1024) -> np.ndarray:
    preds = [np.argmax(forward(model, features[i:i + chunk]).data, axis=1)
             for i in range(0, len(features), chunk)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def score(model: Model, dataset: Dataset) -> dict:
    """Metrics against observed labels, and against true labels when known."""
    if dataset.n != model.n_classes:
        raise ContractError(f"dataset has {dataset.n} classes, model predicts {model.n_classes}")
    preds = predict(model, dataset.features)
    out = {"observed": evaluate(confusion(preds, dataset.observed_labels, dataset.n))}
    if dataset.true_labels is not None:
        out["true"] = evaluate(confusion(preds, dataset.true_labels, dataset.n))
    return out


def kfold_split(size: int, folds: int, seed: int = 0) -> list:
    """Seeded partition of ``range(size)`` into ``folds`` near-equal validation sets."""
    if folds < 2:
        raise ParameterError(f"folds must be >= 2, got {folds}")
    if folds > size:
        raise ParameterError(f"cannot split {size} samples into {folds} folds")
    perm = np.random.default_rng(seed).permutation(size)
    out = []
    for val in np.array_split(perm, folds):
        mask = np.ones(size, dtype=bool)
        mask[val] = False
        out.append((np.flatnonzero(mask), np.sort(val)))
    return out


@dataclass
class FoldResult:
    fold: int
    model: Model
    log: list
    train_idx: np.ndarray
    val_idx: np.ndarray
    metrics: dict  # label source -> metric -> value, on the validation fold


def cross_validate(dataset: Dataset, config: TrainConfig, val_metrics_per_epoch: bool = False,
                   on_fold: Optional[Callable[[FoldResult], None]] = None) -> list:
    results = []
    for k, (tr, va) in enumerate(kfold_split(len(dataset), config.folds, config.seed)):
        train_set, val_set = dataset.subset(tr), dataset.subset(va)
        res = fit(build_model(config, dataset), train_set, config,
                  val=val_set if val_metrics_per_epoch else None)
        fold = FoldResult(k, res.model, res.log, tr, va, score(res.model, val_set))
        if on_fold is not None:
            on_fold(fold)
        results.append(fold)
    return results


# checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: Model
    config: dict
    log: list


def encode_checkpoint(model: Model, config: Optional[TrainConfig] = None, log=None) -> bytes:
    meta = {
        "arch.extractor": model.extractor.kind,
        "arch.mode": model.mode,
        "arch.n_classes": model.n_classes,
        "arch.feature_dim": model.feature_dim,
        "arch.in_dim": model.extractor.in_dim,
        "head.present": model.head is not None,
        "head.frozen": bool(model.head is not None and model.head.frozen),
    }
    if config is not None:
        meta.update({f"config.{k}": v for k, v in dataclasses.asdict(config).items()})
    meta["log"] = list(log or [])
    arrays = {name: t.data for name, t in model.named_parameters().items()}
    if model.head is not None and model.head.frozen:
        arrays["head.cached_prior"] = model.head.cached_prior.data
    return binfmt.encode("checkpoint", meta, arrays)


def save_checkpoint(model: Model, path, config: Optional[TrainConfig] = None, log=None):
    binfmt.atomic_write(path, encode_checkpoint(model, config, log))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    meta, arrays = binfmt.decode(blob, "checkpoint")

    def tensor(name):
        if name not in arrays:
            raise FormatError(f"checkpoint lacks tensor {name!r}")
        return Tensor(arrays[name], requires_grad=True)

    try:
        kind = meta["arch.extractor"]
        if kind == "mlp":
            extractor = MLPExtractor(tensor("extractor.weight"), tensor("extractor.bias"))
        elif kind == "tinyconv":
            extractor = TinyConvExtractor(tensor("extractor.kernel1"), tensor("extractor.kernel2"))
        else:
            raise FormatError(f"unknown extractor kind {kind!r}")
        head = None
        if meta["head.present"]:
            frozen = bool(meta["head.frozen"])
            cached = Tensor(arrays["head.cached_prior"]) if frozen and "head.cached_prior" in arrays else None
            if frozen and cached is None:
                raise FormatError("frozen head without a cached prior")
            head = ClassDependencyHead(tensor("head.A"), tensor("head.W1"), tensor("head.W2"),
                                       cached_prior=cached, frozen=frozen)
        model = Model(extractor, tensor("fc.weight"), tensor("fc.bias"), head=head, mode=meta["arch.mode"])
    except KeyError as exc:
        raise FormatError(f"checkpoint lacks meta key {exc.args[0]!r}") from None
    except (ShapeError, ParameterError) as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}") from None
    config = {k.split(".", 1)[1]: v for k, v in meta.items() if k.startswith("config.")}
    return Checkpoint(model, config, meta.get("log", []))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def load_checkpoint(path) -> Model:
    return read_checkpoint(path).model
