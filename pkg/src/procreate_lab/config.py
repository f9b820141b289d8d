"""Run configuration: parsing, validation, seed fan-out and canonical JSON output."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

from procreate_lab.diffusion import GaussianMixture, NoiseSchedule, make_linear_schedule, ring_mixture
from procreate_lab.embedding import KINDS, Embedder
from procreate_lab.errors import ConfigurationError, ParameterError
from procreate_lab.guidance import ClassifierGuidanceConfig, GuidanceConfig
from procreate_lab.refstore import read_points_csv

REFERENCE_SOURCES = ("mixture", "means", "inline", "csv")
SAMPLERS = ("ddim", "ddpm")


@dataclass(frozen=True)
class MetricsSpec:
    k: int = 5
    thresholds: tuple = (0.4, 0.5, 0.6)
    sample_count: int = 40
    real_count: int = 500


@dataclass(frozen=True)
class ReferenceSpec:
    source: str = "mixture"
    count: int = 10
    points: Optional[tuple] = None
    path: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    seed: int
    mixture: GaussianMixture
    schedule: NoiseSchedule
    sampler: str
    steps: int
    embedder: Embedder
    metrics_embedder: Embedder
    guidance: GuidanceConfig
    classifier_guidance: Optional[ClassifierGuidanceConfig]
    metrics: MetricsSpec
    references: ReferenceSpec
    out_dir: str
    base_dir: str = field(default=".", compare=False)
    mixture_raw: dict = field(default_factory=dict, compare=False)

    @property
    def dim(self) -> int:
        return self.mixture.dim

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=_int(seed, "seed", 0))

    def with_guidance(self, **changes) -> "RunConfig":
        try:
            return replace(self, guidance=replace(self.guidance, **changes))
        except ParameterError as exc:
            raise ConfigurationError("guidance", str(exc)) from None

    def seeds(self) -> dict:
        """Independent integer seeds for each random consumer, all derived from ``seed``."""
        names = ("references", "heldout", "sampler")
        kids = np.random.SeedSequence(self.seed).spawn(len(names))
        return {n: int(s.generate_state(1)[0]) for n, s in zip(names, kids)}

    def to_dict(self) -> dict:
        g = self.guidance
        refs: dict[str, Any] = {"source": self.references.source}
        if self.references.source == "mixture":
            refs["count"] = self.references.count
        elif self.references.source == "inline":
            refs["points"] = [list(p) for p in self.references.points]
        elif self.references.source == "csv":
            refs["path"] = self.references.path
        out = {
            "seed": self.seed,
            "mixture": self.mixture_raw or self.mixture.to_dict(),
            "schedule": self.schedule.to_dict(),
            "sampler": {"kind": self.sampler, "steps": self.steps},
            "embedder": self.embedder.to_dict(),
            "metrics_embedder": self.metrics_embedder.to_dict(),
            "guidance": {"gamma": g.gamma, "n_step": g.n_step, "clip_norm": g.clip_norm,
                         "dynamic_growth": g.dynamic_growth, "batch_size": g.batch_size},
            "classifier_guidance": None if self.classifier_guidance is None else {
                "target_component": self.classifier_guidance.target_component,
                "scale": self.classifier_guidance.scale},
            "metrics": {"k": self.metrics.k, "thresholds": list(self.metrics.thresholds),
                        "sample_count": self.metrics.sample_count, "real_count": self.metrics.real_count},
            "references": refs,
            "out_dir": self.out_dir,
        }
        return out


# -- canonical JSON -------------------------------------------------------------

def format_json_float(v: float) -> str:
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {v!r} cannot be written as JSON")
    s = f"{v:.17g}"
    return s if any(c in s for c in ".en") else s + ".0"


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with every float written to 17 significant digits."""
    pad, inner = " " * (indent * _level), " " * (indent * (_level + 1))
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_json_float(float(obj))
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(inner + dumps(v, indent, _level + 1) for v in seq) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n")


# -- parsing --------------------------------------------------------------------

def _section(d: dict, name: str, allowed: set) -> dict:
    sec = d.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigurationError(name, "must be an object")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigurationError(f"{name}.{sorted(unknown)[0]}", "unknown key")
    return sec


def _int(v, fieldname: str, lo: Optional[int] = None) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ConfigurationError(fieldname, f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigurationError(fieldname, f"must be >= {lo}")
    return int(v)


def _float(v, fieldname: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigurationError(fieldname, f"expected a finite number, got {v!r}")
    return float(v)


def _mixture(spec: dict) -> GaussianMixture:
    try:
        if "ring" in spec:
            ring = spec["ring"]
            return ring_mixture(_int(ring.get("K"), "mixture.ring.K", 1), _float(ring.get("std"), "mixture.ring.std"),
                                _float(ring.get("spacing", 1.0), "mixture.ring.spacing"))
        means = np.asarray(spec["means"], dtype=float)
        K = means.shape[0] if means.ndim == 2 else 0
        weights = spec.get("weights", [1.0 / max(K, 1)] * K)
        return GaussianMixture(weights, means, spec.get("stds", 0.0))
    except KeyError as exc:
        raise ConfigurationError(f"mixture.{exc.args[0]}", "missing") from None
    except (ParameterError, ValueError, TypeError) as exc:
        raise ConfigurationError("mixture", str(exc)) from None


def _embedder(spec: dict, name: str, dim: int) -> Embedder:
    kind = spec.get("kind", "identity")
    if kind not in KINDS:
        raise ConfigurationError(f"{name}.kind", f"must be one of {KINDS}")
    if "in_dim" in spec and spec["in_dim"] != dim:
        raise ConfigurationError(f"{name}.in_dim", f"does not match the mixture dimension {dim}")
    try:
        return Embedder(kind, dim, None if spec.get("out_dim") is None else _int(spec["out_dim"], f"{name}.out_dim", 1),
                        seed=_int(spec.get("seed", 0), f"{name}.seed", 0),
                        bandwidth=_float(spec.get("bandwidth", 1.0), f"{name}.bandwidth"))
    except ParameterError as exc:
        raise ConfigurationError(name, str(exc)) from None


def parse_config(d: dict, base_dir=".") -> RunConfig:
    """Validate a decoded JSON document and build a :class:`RunConfig`.

    Relative reference CSV paths resolve against ``base_dir`` (the config file's folder).
    """
    if not isinstance(d, dict):
        raise ConfigurationError("<root>", "config must be a JSON object")
    top = {"seed", "mixture", "schedule", "sampler", "embedder", "metrics_embedder", "guidance",
           "classifier_guidance", "metrics", "references", "out_dir"}
    unknown = set(d) - top
    if unknown:
        raise ConfigurationError(sorted(unknown)[0], "unknown key")
    seed = _int(d.get("seed", 0), "seed", 0)
    if "mixture" not in d:
        raise ConfigurationError("mixture", "missing")
    mix_raw = _section(d, "mixture", {"ring", "weights", "means", "stds"})
    mixture = _mixture(mix_raw)
    D = mixture.dim

    sch = _section(d, "schedule", {"T", "beta_start", "beta_end"})
    try:
        schedule = make_linear_schedule(_int(sch.get("T", 1000), "schedule.T", 1),
                                        _float(sch.get("beta_start", 1e-4), "schedule.beta_start"),
                                        _float(sch.get("beta_end", 0.02), "schedule.beta_end"))
    except ParameterError as exc:
        raise ConfigurationError("schedule", str(exc)) from None

    smp = _section(d, "sampler", {"kind", "steps"})
    kind = smp.get("kind", "ddim")
    if kind not in SAMPLERS:
        raise ConfigurationError("sampler.kind", f"must be one of {SAMPLERS}")
    steps = _int(smp.get("steps", 50), "sampler.steps", 1)
    if steps > schedule.total_steps:
        raise ConfigurationError("sampler.steps", f"exceeds schedule.T = {schedule.total_steps}")

    emb_fields = {"kind", "in_dim", "out_dim", "seed", "bandwidth"}
    embedder = _embedder(_section(d, "embedder", emb_fields), "embedder", D)
    if d.get("metrics_embedder") is None:
        metrics_embedder = embedder
    else:
        metrics_embedder = _embedder(_section(d, "metrics_embedder", emb_fields), "metrics_embedder", D)

    gd = _section(d, "guidance", {"gamma", "n_step", "clip_norm", "dynamic_growth", "batch_size"})
    try:
        guidance = GuidanceConfig(
            gamma=_float(gd.get("gamma", 0.0), "guidance.gamma"),
            n_step=_int(gd.get("n_step", 5), "guidance.n_step", 0),
            clip_norm=None if gd.get("clip_norm") is None else _float(gd["clip_norm"], "guidance.clip_norm"),
            dynamic_growth=bool(gd.get("dynamic_growth", True)),
            batch_size=_int(gd.get("batch_size", 1), "guidance.batch_size", 1),
        )
    except ParameterError as exc:
        raise ConfigurationError("guidance", str(exc)) from None

    classifier = None
    if d.get("classifier_guidance") is not None:
        cg = _section(d, "classifier_guidance", {"target_component", "scale"})
        target = _int(cg.get("target_component", 0), "classifier_guidance.target_component", 0)
        if target >= mixture.n_components:
            raise ConfigurationError("classifier_guidance.target_component",
                                     f"mixture has {mixture.n_components} components")
        scale = _float(cg.get("scale", 1.0), "classifier_guidance.scale")
        if scale < 0:
            raise ConfigurationError("classifier_guidance.scale", "must be >= 0")
        classifier = ClassifierGuidanceConfig(target, scale)

    ms = _section(d, "metrics", {"k", "thresholds", "sample_count", "real_count"})
    metrics = MetricsSpec(
        k=_int(ms.get("k", 5), "metrics.k", 1),
        thresholds=tuple(_float(v, "metrics.thresholds") for v in ms.get("thresholds", (0.4, 0.5, 0.6))),
        sample_count=_int(ms.get("sample_count", 40), "metrics.sample_count", 2),
        real_count=_int(ms.get("real_count", 500), "metrics.real_count", 2),
    )
    if any(not -1.0 <= th <= 1.0 for th in metrics.thresholds):
        raise ConfigurationError("metrics.thresholds", "thresholds must lie in [-1, 1]")
    if metrics.k + 1 > min(metrics.sample_count, metrics.real_count):
        raise ConfigurationError("metrics.k", "k-NN radii need more than k samples in each set")

    rf = _section(d, "references", {"source", "count", "points", "path"})
    source = rf.get("source", "mixture")
    if source not in REFERENCE_SOURCES:
        raise ConfigurationError("references.source", f"must be one of {REFERENCE_SOURCES}")
    refs = ReferenceSpec(source=source)
    if source == "mixture":
        refs = replace(refs, count=_int(rf.get("count", 10), "references.count", 0))
    elif source == "inline":
        pts = rf.get("points")
        try:
            arr = np.asarray(pts, dtype=float)
        except (TypeError, ValueError):
            raise ConfigurationError("references.points", "must be a list of numeric rows") from None
        if arr.ndim != 2 or arr.shape[1] != D or not np.all(np.isfinite(arr)):
            raise ConfigurationError("references.points", f"need finite rows of dimension {D}")
        refs = replace(refs, points=tuple(tuple(float(v) for v in row) for row in arr))
    elif source == "csv":
        if not isinstance(rf.get("path"), str):
            raise ConfigurationError("references.path", "missing CSV path")
        refs = replace(refs, path=rf["path"])

    out_dir = d.get("out_dir", "run")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigurationError("out_dir", "must be a non-empty string")

    cfg = RunConfig(seed, mixture, schedule, kind, steps, embedder, metrics_embedder, guidance, classifier,
                    metrics, refs, out_dir, base_dir=str(base_dir), mixture_raw=dict(mix_raw))
    if source == "csv":
        load_reference_points(cfg)
    return cfg


def load_config(path) -> RunConfig:
    """Read and validate a config file. I/O problems raise ``OSError``."""
    path = Path(path)
    text = path.read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError("<root>", f"invalid JSON: {exc}") from None
    return parse_config(d, base_dir=path.parent)


def load_reference_points(cfg: RunConfig) -> np.ndarray:
    """Reference points for ``inline`` and ``csv`` sources (other sources are drawn at run time)."""
    if cfg.references.source == "inline":
        return np.asarray(cfg.references.points, dtype=np.float64).reshape(-1, cfg.dim)
    if cfg.references.source != "csv":
        raise ParameterError("reference points for this source are drawn at run time")
    path = Path(cfg.references.path)
    if not path.is_absolute():
        path = Path(cfg.base_dir) / path
    try:
        pts, _ = read_points_csv(path)
    except (OSError, ParameterError) as exc:
        raise ConfigurationError("references.path", f"unreadable reference CSV: {exc}") from None
    if pts.shape[1] != cfg.dim:
        raise ConfigurationError("references.path", f"CSV has dimension {pts.shape[1]}, mixture has {cfg.dim}")
    return pts
