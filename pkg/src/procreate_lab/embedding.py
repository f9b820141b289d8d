"""Deterministic similarity embedding ``f`` and cosine similarity ``s``."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from procreate_lab import autodiff as ad
from procreate_lab.errors import DegenerateSimilarityWarning, ParameterError

KINDS = ("identity", "random_linear", "random_linear_tanh", "random_fourier")


@dataclass(frozen=True)
class Embedder:
    """Fixed feature map fully determined by ``(kind, seed, in_dim, out_dim, bandwidth)``.

    Linear kinds draw projections from a seeded standard normal scaled by
    ``1/sqrt(in_dim)``. ``random_fourier`` maps ``x -> sqrt(2/E) cos(W x + b)`` with
    ``W ~ N(0, 1/bandwidth^2)`` and ``b ~ U[0, 2 pi)``, so the cosine similarity of two
    embeddings approximates the RBF kernel ``exp(-|x - y|^2 / (2 bandwidth^2))``.
    """

    kind: str
    in_dim: int
    out_dim: Optional[int] = None
    seed: int = 0
    bandwidth: float = 1.0
    projection: Optional[np.ndarray] = field(default=None, init=False, repr=False, compare=False)
    offset: Optional[np.ndarray] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown embedder kind {self.kind!r}; expected one of {KINDS}")
        if self.in_dim < 1:
            raise ParameterError("in_dim must be >= 1")
        out_dim = self.in_dim if self.out_dim is None else int(self.out_dim)
        if self.kind == "identity" and out_dim != self.in_dim:
            raise ParameterError("identity embedder needs out_dim == in_dim")
        if out_dim < 1:
            raise ParameterError("out_dim must be >= 1")
        object.__setattr__(self, "out_dim", out_dim)
        if not self.bandwidth > 0:
            raise ParameterError("bandwidth must be positive")
        if self.kind == "identity":
            return
        rng = np.random.default_rng(self.seed)
        if self.kind == "random_fourier":
            P = rng.standard_normal((out_dim, self.in_dim)) / self.bandwidth
            b = rng.uniform(0.0, 2.0 * np.pi, out_dim)
            b.flags.writeable = False
            object.__setattr__(self, "offset", b)
        else:
            P = rng.standard_normal((out_dim, self.in_dim)) / np.sqrt(self.in_dim)
        P.flags.writeable = False
        object.__setattr__(self, "projection", P)

    def __call__(self, x):
        return embed(self, x)

    def trace(self, node):
        """Embed a tape value (``Var`` or array) with the differentiable primitives."""
        if self.kind == "identity":
            return node
        if self.kind == "random_fourier":
            phase = ad.affine(node, self.projection, self.offset)
            return ad.scale(ad.elementwise_cos(phase), np.sqrt(2.0 / self.out_dim))
        out = ad.matvec(self.projection, node)
        return ad.tanh(out) if self.kind == "random_linear_tanh" else out

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seed": self.seed, "in_dim": self.in_dim, "out_dim": self.out_dim}
        if self.kind == "random_fourier":
            d["bandwidth"] = self.bandwidth
        return d

    @property
    def spec_id(self) -> str:
        return f"{self.kind}:{self.seed}:{self.in_dim}:{self.out_dim}:{self.bandwidth!r}"


def embed(e: Embedder, x) -> np.ndarray:
    """Embed one point ``(D,)`` or a stack ``(N, D)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != e.in_dim:
        raise ParameterError(f"expected dimension {e.in_dim}, got {x.shape[-1]}")
    if e.kind == "identity":
        return x.copy()
    # elementwise product + last-axis sum: per-row results do not depend on batch shape
    y = np.sum(x[..., None, :] * e.projection, axis=-1)
    if e.kind == "random_fourier":
        return np.sqrt(2.0 / e.out_dim) * np.cos(y + e.offset)
    return np.tanh(y) if e.kind == "random_linear_tanh" else y


def cosine_similarity(a, b) -> float:
    """``a.b / (|a||b|)``; returns 0 and warns when either vector is (near) zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom < ad.COSINE_FLOOR:
        warnings.warn("cosine similarity of a zero vector", DegenerateSimilarityWarning, stacklevel=2)
        return 0.0
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def cosine_matrix(A, B=None) -> np.ndarray:
    """Pairwise cosine similarities between rows of ``A`` and ``B`` (default ``A``)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = A if B is None else np.atleast_2d(np.asarray(B, dtype=np.float64))
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    denom = np.outer(na, nb)
    bad = denom < ad.COSINE_FLOOR
    if np.any(bad):
        warnings.warn("cosine similarity of a zero vector", DegenerateSimilarityWarning, stacklevel=2)
    out = np.where(bad, 0.0, (A @ B.T) / np.where(bad, 1.0, denom))
    return np.clip(out, -1.0, 1.0)


def embedder_from_dict(spec: dict, in_dim: int) -> Embedder:
    return Embedder(kind=spec.get("kind", "identity"), in_dim=int(spec.get("in_dim", in_dim)),
                    out_dim=spec.get("out_dim"), seed=int(spec.get("seed", 0)),
                    bandwidth=float(spec.get("bandwidth", 1.0)))
