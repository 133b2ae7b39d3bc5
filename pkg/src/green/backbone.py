"""Feature extractor -> global average pooling -> FC scores, optionally re-ranked.

Two toy extractors stand in for a real CNN backbone:

* ``mlp``: one linear layer plus ReLU, emitted as ``b x d x 1 x 1`` maps so
  the pooling step is a pass-through and the pipeline stays uniform.
* ``tinyconv``: two unpadded 3x3 convolutions (``conv_channels`` then ``d``
  maps) with a ReLU in between; pooling makes the output width independent
  of the input resolution. Without padding a constant image yields constant
  maps, so its pooled features do not depend on the image size either.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError
from .head import ClassDependencyHead, gcn_forward, glorot_uniform, rerank
from .tensor import Tape, Tensor

ArrayLike = Union[np.ndarray, Tensor]


def _input(batch: ArrayLike) -> Tensor:
    return batch if isinstance(batch, Tensor) else Tensor(batch)


@dataclass(frozen=True)
class MLPExtractor:
    weight: Tensor  # f x d
    bias: Tensor  # d

    kind = "mlp"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def initialize(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "MLPExtractor":
        return cls(weight=Tensor(glorot_uniform(rng, in_dim, out_dim), requires_grad=True),
                   bias=Tensor(np.zeros(out_dim), requires_grad=True))

    def parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor, tape: Optional[Tape] = None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"mlp extractor expects b x {self.in_dim} input, got {x.shape}")
        hidden = T.relu(T.add(T.matmul(x, self.weight, tape=tape), self.bias, tape=tape), tape=tape)
        return T.reshape(hidden, (x.shape[0], self.out_dim, 1, 1), tape=tape)


@dataclass(frozen=True)
class TinyConvExtractor:
    kernel1: Tensor  # c x 1 x 3 x 3
    kernel2: Tensor  # d x c x 3 x 3

    kind = "tinyconv"
    padding = 0

    @property
    def in_dim(self) -> int:
        return self.kernel1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.kernel2.shape[0]

    @classmethod
    def initialize(cls, out_dim: int, rng: np.random.Generator,
                   channels: int = 8, in_channels: int = 1) -> "TinyConvExtractor":
        def kernel(cout, cin):
            fan_in, fan_out = cin * 9, cout * 9
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return Tensor(rng.uniform(-limit, limit, size=(cout, cin, 3, 3)), requires_grad=True)

        return cls(kernel1=kernel(channels, in_channels), kernel2=kernel(out_dim, channels))

    def parameters(self) -> dict:
        return {"kernel1": self.kernel1, "kernel2": self.kernel2}

    def __call__(self, x: Tensor, tape: Optional[Tape] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_dim:
            raise ShapeError(f"tinyconv extractor expects b x {self.in_dim} x h x w input, got {x.shape}")
        hidden = T.relu(T.conv2d(x, self.kernel1, stride=1, padding=self.padding, tape=tape), tape=tape)
        return T.conv2d(hidden, self.kernel2, stride=1, padding=self.padding, tape=tape)


Extractor = Union[MLPExtractor, TinyConvExtractor]
EXTRACTORS = {"mlp": MLPExtractor, "tinyconv": TinyConvExtractor}


@dataclass(frozen=True)
class Model:
    extractor: Extractor
    fc_weight: Tensor  # d x n
    fc_bias: Tensor  # n
    head: Optional[ClassDependencyHead] = None
    mode: str = "baseline"

    def __post_init__(self):
        if self.mode not in ("baseline", "green"):
            raise ParameterError(f"mode must be 'baseline' or 'green', got {self.mode!r}")
        d, n = self.fc_weight.shape
        if d != self.extractor.out_dim or self.fc_bias.shape != (n,):
            raise ShapeError(f"classifier {self.fc_weight.shape}/{self.fc_bias.shape} "
                             f"does not fit extractor width {self.extractor.out_dim}")
        if self.mode == "green":
            if self.head is None:
                raise ParameterError("green mode needs a class-dependency head")
            if (self.head.n, self.head.d) != (n, d):
                raise ShapeError(f"head is n={self.head.n}, d={self.head.d}; model is n={n}, d={d}")

    @property
    def n_classes(self) -> int:
        return self.fc_weight.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.fc_weight.shape[0]

    @classmethod
    def build(cls, extractor: str, in_dim: int, n_classes: int = 5, feature_dim: int = 16,
              hidden: int = 8, sigma: float = 1.0, mode: str = "baseline", seed: int = 0,
              conv_channels: int = 8) -> "Model":
        """Seeded construction.

        Backbone and head draw from separate child streams, so a baseline and
        a green model built with the same seed share backbone weights exactly.
        """
        backbone_ss, head_ss = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(backbone_ss)
        if extractor == "mlp":
            ext = MLPExtractor.initialize(in_dim, feature_dim, rng)
        elif extractor == "tinyconv":
            ext = TinyConvExtractor.initialize(feature_dim, rng, channels=conv_channels, in_channels=in_dim)
        else:
            raise ParameterError(f"unknown extractor kind {extractor!r}")
        fc_weight = Tensor(glorot_uniform(rng, feature_dim, n_classes), requires_grad=True)
        fc_bias = Tensor(np.zeros(n_classes), requires_grad=True)
        head = None
        if mode == "green":
            head = ClassDependencyHead.initialize(n_classes, hidden, feature_dim, sigma=sigma,
                                                  rng=np.random.default_rng(head_ss))
        return cls(extractor=ext, fc_weight=fc_weight, fc_bias=fc_bias, head=head, mode=mode)

    def named_parameters(self) -> dict:
        """Every stored tensor, keyed by dotted name."""
        out = {f"extractor.{k}": v for k, v in self.extractor.parameters().items()}
        out["fc.weight"] = self.fc_weight
        out["fc.bias"] = self.fc_bias
        if self.head is not None:
            out.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return out

    def trainable_parameters(self) -> dict:
        params = self.named_parameters()
        if self.head is not None and self.head.frozen:
            params = {k: v for k, v in params.items() if not k.startswith("head.")}
        return params

    def with_parameters(self, updates: dict) -> "Model":
        """New model with the named tensors swapped in (shapes must match)."""
        current = self.named_parameters()
        groups: dict = {"extractor": {}, "fc": {}, "head": {}}
        for name, value in updates.items():
            if name not in current:
                raise ParameterError(f"unknown parameter {name!r}")
            if current[name].shape != value.shape:
                raise ShapeError(f"{name}: expected shape {current[name].shape}, got {value.shape}")
            group, key = name.split(".", 1)
            groups[group][key] = value
        model = self
        if groups["extractor"]:
            model = dataclasses.replace(model, extractor=dataclasses.replace(model.extractor, **groups["extractor"]))
        if groups["fc"]:
            fc = {f"fc_{k}": v for k, v in groups["fc"].items()}
            model = dataclasses.replace(model, **fc)
        if groups["head"]:
            model = dataclasses.replace(model, head=model.head.replace(**groups["head"]))
        return model


def extract_and_pool(model: Model, batch: ArrayLike, tape: Optional[Tape] = None) -> Tensor:
    maps = model.extractor(_input(batch), tape=tape)
    return T.global_avg_pool(maps, tape=tape)


def classify(G: Tensor, model: Model, tape: Optional[Tape] = None) -> Tensor:
    if G.ndim != 2 or G.shape[1] != model.feature_dim:
        raise ShapeError(f"classifier expects b x {model.feature_dim} features, got {G.shape}")
    return T.add(T.matmul(G, model.fc_weight, tape=tape), model.fc_bias, tape=tape)


class Pass(NamedTuple):
    G: Tensor
    S: Tensor
    logits: Tensor
    P: Tensor
    R: Optional[Tensor] = None


def run(model: Model, batch: ArrayLike, tape: Optional[Tape] = None) -> Pass:
    """One forward pass exposing every intermediate the loss needs."""
    G = extract_and_pool(model, batch, tape=tape)
    S = classify(G, model, tape=tape)
    if model.mode == "baseline":
        return Pass(G, S, S, T.softmax_rows(S, tape=tape))
    out = rerank(G, gcn_forward(model.head, tape=tape), S, tape=tape)
    return Pass(G, S, out.logits, out.P, out.R)


def forward(model: Model, batch: ArrayLike, tape: Optional[Tape] = None) -> Tensor:
    """Class probabilities, ``b x n``."""
    return run(model, batch, tape=tape).P
