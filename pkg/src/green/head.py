"""Class-dependency head: learnable adjacency, two-layer GCN prior, residual re-ranking.

The GCN takes the identity as node features, so its first layer
``A @ X @ W1`` collapses to ``A @ W1``; the identity is never built.
The prior ``C = A @ relu(A @ W1) @ W2`` holds one d-dimensional
representation per class. For pooled features ``G`` and FC scores ``S``,

    R = sigmoid(G @ C.T)
    logits = R * S + S
    P = softmax(logits)
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError, StateError
from .tensor import Tape, Tensor


def init_adjacency(n: int, sigma: float = 1.0) -> Tensor:
    """Gaussian band with unit peak on the diagonal: ``exp(-(i-j)^2 / (2 sigma^2))``."""
    if n < 2:
        raise ParameterError(f"adjacency needs at least 2 classes, got {n}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    idx = np.arange(n)
    dist = idx[:, None] - idx[None, :]
    return Tensor(np.exp(-(dist.astype(np.float64) ** 2) / (2.0 * sigma ** 2)))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass(frozen=True)
class ClassDependencyHead:
    A: Tensor
    W1: Tensor
    W2: Tensor
    cached_prior: Optional[Tensor] = None
    frozen: bool = False

    def __post_init__(self):
        n = self.A.shape[0] if self.A.ndim == 2 else -1
        if self.A.ndim != 2 or self.A.shape != (n, n) or n < 2:
            raise ShapeError(f"adjacency must be square with n >= 2, got {self.A.shape}")
        if self.W1.ndim != 2 or self.W1.shape[0] != n:
            raise ShapeError(f"W1 must be {n} x h, got {self.W1.shape}")
        if self.W2.ndim != 2 or self.W2.shape[0] != self.W1.shape[1]:
            raise ShapeError(f"W2 must be {self.W1.shape[1]} x d, got {self.W2.shape}")
        if self.cached_prior is not None and self.cached_prior.shape != (n, self.d):
            raise ShapeError(f"cached prior must be {n} x {self.d}, got {self.cached_prior.shape}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def h(self) -> int:
        return self.W1.shape[1]

    @property
    def d(self) -> int:
        return self.W2.shape[1]

    @classmethod
    def initialize(cls, n: int, h: int, d: int, sigma: float = 1.0,
                   rng: Optional[np.random.Generator] = None) -> "ClassDependencyHead":
        if h < 1 or d < 1:
            raise ParameterError(f"hidden and feature widths must be >= 1, got h={h}, d={d}")
        rng = rng if rng is not None else np.random.default_rng(0)
        A = init_adjacency(n, sigma)
        W1 = glorot_uniform(rng, n, h)
        W2 = glorot_uniform(rng, h, d)
        return cls(A=Tensor(A.data, requires_grad=True),
                   W1=Tensor(W1, requires_grad=True),
                   W2=Tensor(W2, requires_grad=True))

    def parameters(self) -> dict:
        return {"A": self.A, "W1": self.W1, "W2": self.W2}

    def replace(self, **changes) -> "ClassDependencyHead":
        return dataclasses.replace(self, **changes)


def gcn_forward(head: ClassDependencyHead, tape: Optional[Tape] = None,
                materialize_identity: bool = False) -> Tensor:
    """Class-dependency prior of shape n x d.

    A frozen head returns its cached prior and records nothing on ``tape``.
    ``materialize_identity`` multiplies by an explicit identity node-feature
    matrix; it exists to check the elided form and is otherwise useless.
    """
    if head.frozen:
        if head.cached_prior is None:
            raise StateError("frozen head has no cached prior")
        return head.cached_prior
    first = head.A
    if materialize_identity:
        first = T.matmul(first, Tensor(np.eye(head.n)), tape=tape)
    c1 = T.matmul(first, head.W1, tape=tape)
    hidden = T.relu(c1, tape=tape)
    return T.matmul(T.matmul(head.A, hidden, tape=tape), head.W2, tape=tape)


@dataclass(frozen=True)
class RerankOutput:
    R: Tensor
    logits: Tensor
    P: Tensor


def rerank(G: Tensor, C: Tensor, S: Tensor, tape: Optional[Tape] = None) -> RerankOutput:
    """Fuse pooled features with the prior and re-rank the FC scores."""
    if G.ndim != 2 or C.ndim != 2 or S.ndim != 2:
        raise ShapeError(f"rerank expects 2-D G, C, S; got {G.shape}, {C.shape}, {S.shape}")
    if G.shape[1] != C.shape[1]:
        raise ShapeError(f"rerank: feature width of G {G.shape} does not match prior {C.shape}")
    if S.shape != (G.shape[0], C.shape[0]):
        raise ShapeError(f"rerank: scores {S.shape} must be {G.shape[0]} x {C.shape[0]}")
    R = T.sigmoid(T.matmul(G, T.transpose(C, tape=tape), tape=tape), tape=tape)
    logits = T.add(T.hadamard(R, S, tape=tape), S, tape=tape)
    return RerankOutput(R=R, logits=logits, P=T.softmax_rows(logits, tape=tape))


def freeze_prior(head: ClassDependencyHead) -> ClassDependencyHead:
    """Return a copy whose prior is computed once and served from cache."""
    if head.frozen:
        raise StateError("head is already frozen")
    prior = gcn_forward(head)
    return head.replace(cached_prior=Tensor(prior.data), frozen=True)
