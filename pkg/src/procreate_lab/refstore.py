"""Append-only reference set with cached embeddings and immutable snapshots."""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from procreate_lab.embedding import Embedder, cosine_matrix, embed
from procreate_lab.errors import ParameterError, QueryError

ORIGINS = ("original", "generated")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ReferenceSnapshot:
    """Read-only view of a store at one moment. ``indices`` map rows to store positions."""

    points: np.ndarray
    embeddings: np.ndarray
    origins: tuple
    indices: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]


class ReferenceStore:
    def __init__(self, embedder: Embedder, points: Optional[Iterable] = None, origin: str = "original"):
        self.embedder = embedder
        self._lock = threading.Lock()
        self._points = np.empty((0, embedder.in_dim))
        self._embeddings = np.empty((0, embedder.out_dim))
        self._origins: list[str] = []
        if points is not None:
            self.add_batch(points, origin)

    @property
    def embedder_id(self) -> str:
        return self.embedder.spec_id

    def __len__(self) -> int:
        return len(self._origins)

    @property
    def origins(self) -> tuple:
        return tuple(self._origins)

    def add_batch(self, points, origin: str = "original") -> int:
        """Append points (with freshly computed embeddings); returns the new size."""
        if origin not in ORIGINS:
            raise ParameterError(f"origin must be one of {ORIGINS}")
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.size == 0:
            return len(self)
        if pts.ndim != 2 or pts.shape[1] != self.embedder.in_dim:
            raise ParameterError(f"points must have dimension {self.embedder.in_dim}, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ParameterError("reference points must be finite")
        emb = embed(self.embedder, pts)
        with self._lock:
            # rebinding (not in-place growth) keeps earlier snapshots valid
            self._points = np.concatenate([self._points, pts])
            self._embeddings = np.concatenate([self._embeddings, emb])
            self._origins.extend([origin] * pts.shape[0])
            return len(self._origins)

    def snapshot(self) -> ReferenceSnapshot:
        with self._lock:
            n = len(self._origins)
            return ReferenceSnapshot(_frozen(self._points), _frozen(self._embeddings),
                                     tuple(self._origins), np.arange(n))

    def to_csv(self, path) -> None:
        snap = self.snapshot()
        write_points_csv(path, snap.points, extra={"origin": list(snap.origins)})

    @classmethod
    def from_csv(cls, path, embedder: Embedder) -> "ReferenceStore":
        pts, extra = read_points_csv(path)
        store = cls(embedder)
        origins = extra.get("origin") or ["original"] * len(pts)
        for p, o in zip(pts, origins):
            store.add_batch(p[None, :], o)
        return store


def nearest_reference(snapshot: ReferenceSnapshot, query_embedding) -> tuple[int, float]:
    """Row index of the most cosine-similar reference (lowest index on ties) and its similarity."""
    if len(snapshot) == 0:
        raise QueryError("nearest_reference on an empty snapshot")
    sims = cosine_matrix(np.asarray(query_embedding)[None, :], snapshot.embeddings)[0]
    i = int(np.argmax(sims))
    return i, float(sims[i])


def prefilter_topk(snapshot: ReferenceSnapshot, query_embedding, k: int) -> ReferenceSnapshot:
    """Sub-snapshot of the ``k`` most similar items, kept in original order."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    if k >= len(snapshot):
        return snapshot
    sims = cosine_matrix(np.asarray(query_embedding)[None, :], snapshot.embeddings)[0]
    keep = np.sort(np.argsort(-sims, kind="stable")[:k])
    return ReferenceSnapshot(_frozen(snapshot.points[keep]), _frozen(snapshot.embeddings[keep]),
                             tuple(snapshot.origins[i] for i in keep), snapshot.indices[keep])


# -- CSV ----------------------------------------------------------------------

def format_float(v: float) -> str:
    """Shortest decimal that round-trips."""
    return repr(float(v))


def write_points_csv(path, points, extra: Optional[dict] = None) -> None:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    extra = extra or {}
    header = [f"x{i}" for i in range(points.shape[1])] + list(extra)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r, row in enumerate(points):
            w.writerow([format_float(v) for v in row] + [str(extra[c][r]) for c in extra])


def read_points_csv(path) -> tuple[np.ndarray, dict]:
    """Read ``x0..x{D-1}`` columns plus any extra string columns."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParameterError(f"{path}: empty CSV (header row required)") from None
        xcols = [i for i, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
        if not xcols or [header[i] for i in xcols] != [f"x{j}" for j in range(len(xcols))]:
            raise ParameterError(f"{path}: header must start with columns x0..x{{D-1}}")
        other = [i for i in range(len(header)) if i not in xcols]
        rows, extra = [], {header[i]: [] for i in other}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParameterError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                rows.append([float(row[i]) for i in xcols])
            except ValueError as exc:
                raise ParameterError(f"{path}:{lineno}: {exc}") from None
            for i in other:
                extra[header[i]].append(row[i])
    pts = np.array(rows, dtype=np.float64).reshape(-1, len(xcols))
    return pts, extra
