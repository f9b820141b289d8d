"""Diversity, fidelity and replication metrics on embedded point sets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from procreate_lab.embedding import cosine_matrix
from procreate_lab.errors import ParameterError

EIG_FLOOR = 1e-10
DEFAULT_THRESHOLDS = (0.4, 0.5, 0.6)


def _as_set(a, name: str, min_points: int) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.shape[0] < min_points:
        raise ParameterError(f"{name} needs at least {min_points} points, got {a.shape[0]}")
    return a


def _sqrt_psd(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh((S + S.T) / 2.0)
    return (V * np.sqrt(np.maximum(w, EIG_FLOOR))) @ V.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """Frechet distance between two Gaussians given their moments.

    The cross term uses ``Tr((S1 S2)^{1/2}) = Tr((S1^{1/2} S2 S1^{1/2})^{1/2})`` so only
    symmetric eigendecompositions are needed; eigenvalues are floored at 1e-10.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(float), np.atleast_1d(mu2).astype(float)
    sigma1, sigma2 = np.atleast_2d(sigma1).astype(float), np.atleast_2d(sigma2).astype(float)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise ParameterError("moment shapes differ")
    r1 = _sqrt_psd(sigma1)
    m = r1 @ sigma2 @ r1
    w = np.linalg.eigvalsh((m + m.T) / 2.0)
    tr_cross = float(np.sum(np.sqrt(np.maximum(w, 0.0))))
    diff = mu1 - mu2
    d = float(diff @ diff) + float(np.trace(sigma1) + np.trace(sigma2)) - 2.0 * tr_cross
    # identical inputs can land a few ulps below zero
    return max(d, 0.0)


def fid(generated, real) -> float:
    g = _as_set(generated, "generated", 2)
    r = _as_set(real, "real", 2)
    if g.shape[1] != r.shape[1]:
        raise ParameterError("embedding dimensions differ")
    return frechet_distance(g.mean(0), np.cov(g, rowvar=False), r.mean(0), np.cov(r, rowvar=False))


def polynomial_kernel(X, Y, degree: int = 3) -> np.ndarray:
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    return (X @ Y.T / X.shape[1] + 1.0) ** degree


def kid(generated, real, degree: int = 3) -> float:
    """Unbiased squared MMD with the polynomial kernel ``(x.y/E + 1)^degree``."""
    g = _as_set(generated, "generated", 2)
    r = _as_set(real, "real", 2)
    if g.shape[1] != r.shape[1]:
        raise ParameterError("embedding dimensions differ")
    m, n = g.shape[0], r.shape[0]
    kgg = polynomial_kernel(g, g, degree)
    krr = polynomial_kernel(r, r, degree)
    kgr = polynomial_kernel(g, r, degree)
    term_g = (kgg.sum() - np.trace(kgg)) / (m * (m - 1))
    term_r = (krr.sum() - np.trace(krr)) / (n * (n - 1))
    return float(term_g + term_r - 2.0 * kgr.mean())


def knn_radii(points: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbour within the same set."""
    d = cdist(points, points)
    # column 0 of the sorted rows is the self-distance
    return np.sort(d, axis=1)[:, k]


def manifold_coverage(queries: np.ndarray, support: np.ndarray, k: int) -> float:
    """Fraction of ``queries`` inside the union of k-NN balls around ``support`` points."""
    radii = knn_radii(support, k)
    d = cdist(queries, support)
    return float(np.mean(np.any(d <= radii[None, :], axis=1)))


def precision_recall(generated, real, k: int = 5) -> tuple[float, float]:
    g = _as_set(generated, "generated", k + 1)
    r = _as_set(real, "real", k + 1)
    if k < 1:
        raise ParameterError("k must be >= 1")
    return manifold_coverage(g, r, k), manifold_coverage(r, g, k)


def mss(samples) -> float:
    """Mean cosine similarity over unordered pairs ``i < j``."""
    s = _as_set(samples, "samples", 2)
    K = cosine_matrix(s)
    iu = np.triu_indices(s.shape[0], k=1)
    return float(np.mean(K[iu]))


def vendi(samples) -> float:
    """Exponentiated von Neumann entropy of the cosine kernel ``K / n``."""
    s = _as_set(samples, "samples", 1)
    if np.any(np.linalg.norm(s, axis=1) == 0):
        raise ParameterError("vendi needs nonzero embeddings")
    K = cosine_matrix(s)
    np.fill_diagonal(K, 1.0)
    lam = np.maximum(np.linalg.eigvalsh(K / s.shape[0]), 0.0)
    lam = lam[lam > 0]
    return float(np.exp(-np.sum(lam * np.log(lam))))


def top1_similarity(generated, refs) -> np.ndarray:
    g = _as_set(generated, "generated", 1)
    r = _as_set(refs, "refs", 1)
    return cosine_matrix(g, r).max(axis=1)


def top1_fractions(generated, refs, thresholds: Iterable[float] = DEFAULT_THRESHOLDS) -> dict:
    """Fraction of samples whose Top-1 similarity to ``refs`` is strictly above each threshold."""
    top = top1_similarity(generated, refs)
    return {float(th): float(np.mean(top > th)) for th in thresholds}


@dataclass
class MetricsReport:
    fid: Optional[float]
    kid: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    mss: Optional[float]
    vendi: Optional[float]
    top1_fractions: dict
    errors: dict = field(default_factory=dict)

    FIELDS = ("fid", "kid", "precision", "recall", "mss", "vendi")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["top1_fractions"] = {threshold_key(k): v for k, v in sorted(self.top1_fractions.items())}
        if not d["errors"]:
            del d["errors"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            **{f: d.get(f) for f in cls.FIELDS},
            top1_fractions={float(k): v for k, v in d.get("top1_fractions", {}).items()},
            errors=dict(d.get("errors", {})),
        )

    def flat(self) -> dict:
        """Scalar view with one ``top1@<threshold>`` entry per threshold."""
        out = {f: getattr(self, f) for f in self.FIELDS}
        for th, v in sorted(self.top1_fractions.items()):
            out[f"top1@{threshold_key(th)}"] = v
        return out


def threshold_key(th: float) -> str:
    return repr(float(th))


def evaluate(
    generated_emb,
    real_emb,
    refs_emb=None,
    k: int = 5,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    similarity_emb=None,
) -> MetricsReport:
    """Compute every metric; failures become ``None`` values with an entry in ``errors``.

    FID, KID and precision/recall compare ``generated_emb`` with ``real_emb``. MSS,
    Vendi and Top-1 use ``similarity_emb`` when given (``refs_emb`` must then live
    in that same space), otherwise ``generated_emb``.
    """
    values, errors = {}, {}
    sim_emb = generated_emb if similarity_emb is None else similarity_emb

    def attempt(name, fn):
        try:
            v = fn()
        except (ParameterError, np.linalg.LinAlgError) as exc:
            errors[name] = str(exc)
            return None
        if isinstance(v, float) and not math.isfinite(v):
            errors[name] = "non-finite result"
            return None
        return v

    values["fid"] = attempt("fid", lambda: fid(generated_emb, real_emb))
    values["kid"] = attempt("kid", lambda: kid(generated_emb, real_emb))
    pr = attempt("precision_recall", lambda: precision_recall(generated_emb, real_emb, k))
    values["precision"], values["recall"] = pr if pr is not None else (None, None)
    values["mss"] = attempt("mss", lambda: mss(sim_emb))
    values["vendi"] = attempt("vendi", lambda: vendi(sim_emb))
    top = {}
    if refs_emb is not None and len(refs_emb):
        top = attempt("top1_fractions", lambda: top1_fractions(sim_emb, refs_emb, thresholds)) or {}
    return MetricsReport(top1_fractions=top, errors=errors, **values)
