"""Experiment runner: paired baseline vs guided runs, ablations and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from procreate_lab import plotting
from procreate_lab.config import RunConfig, load_reference_points, write_json
from procreate_lab.embedding import embed
from procreate_lab.errors import ConfigurationError, ParameterError
from procreate_lab.guidance import GuidanceConfig, classifier_hook, sample_batch_procreate
from procreate_lab.metrics import MetricsReport, evaluate
from procreate_lab.refstore import ReferenceStore, format_float, write_points_csv

log = logging.getLogger(__name__)

ABLATION_AXES = ("n_step", "sampler", "gamma")


class ReportError(OSError):
    """A run directory is missing or has a corrupt ``metrics.json``."""


@dataclass
class RunData:
    references: np.ndarray
    heldout: np.ndarray
    sampler_seed: int


@dataclass
class ExperimentResult:
    baseline: MetricsReport
    guided: MetricsReport
    baseline_samples: np.ndarray
    guided_samples: np.ndarray
    store: ReferenceStore
    data: RunData
    out_dir: Optional[Path]


def prepare(cfg: RunConfig) -> RunData:
    """Draw (or load) references and held-out data from the config's seed fan-out."""
    seeds = cfg.seeds()
    src = cfg.references.source
    if src == "mixture":
        refs = cfg.mixture.sample(cfg.references.count, np.random.default_rng(seeds["references"]))
    elif src == "means":
        refs = cfg.mixture.means.copy()
    else:
        refs = load_reference_points(cfg)
    heldout = cfg.mixture.sample(cfg.metrics.real_count, np.random.default_rng(seeds["heldout"]))
    return RunData(refs.reshape(-1, cfg.dim), heldout, seeds["sampler"])


def generate(cfg: RunConfig, data: RunData, guidance: GuidanceConfig) -> tuple[np.ndarray, ReferenceStore]:
    """One arm of the experiment; returns samples and the (possibly grown) reference store."""
    store = ReferenceStore(cfg.embedder, data.references)
    base_hook = None
    if cfg.classifier_guidance is not None:
        base_hook = classifier_hook(cfg.classifier_guidance, cfg.schedule, cfg.mixture)
    try:
        out = sample_batch_procreate(cfg.metrics.sample_count, store, guidance, cfg.embedder, cfg.schedule,
                                     cfg.mixture, sampler=cfg.sampler, steps=cfg.steps,
                                     rng_seed=data.sampler_seed, base_hook=base_hook)
    except ParameterError as exc:
        raise ConfigurationError("guidance", str(exc)) from None
    return np.stack(out), store


def score(cfg: RunConfig, data: RunData, samples: np.ndarray) -> MetricsReport:
    """Distribution metrics in the metrics space; diversity and Top-1 in the guidance space."""
    refs_emb = embed(cfg.embedder, data.references) if len(data.references) else None
    return evaluate(
        embed(cfg.metrics_embedder, samples),
        embed(cfg.metrics_embedder, data.heldout),
        refs_emb,
        k=cfg.metrics.k,
        thresholds=cfg.metrics.thresholds,
        similarity_emb=embed(cfg.embedder, samples),
    )


def baseline_guidance(cfg: RunConfig) -> GuidanceConfig:
    return replace(cfg.guidance, gamma=0.0, dynamic_growth=False)


def run_experiment(cfg: RunConfig, out_dir=None, write: bool = True, plot: bool = True) -> ExperimentResult:
    """Paired baseline and guided runs sharing every seed, with artifacts written to ``out_dir``."""
    data = prepare(cfg)
    log.info("baseline: %d samples", cfg.metrics.sample_count)
    base, _ = generate(cfg, data, baseline_guidance(cfg))
    log.info("guided: gamma=%g n_step=%d", cfg.guidance.gamma, cfg.guidance.n_step)
    guided, store = generate(cfg, data, cfg.guidance)
    result = ExperimentResult(score(cfg, data, base), score(cfg, data, guided), base, guided, store, data, None)
    if write:
        out = Path(out_dir if out_dir is not None else cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        n = len(base)
        write_points_csv(out / "samples.csv", np.vstack([base, guided]),
                         {"method": ["baseline"] * n + ["guided"] * n})
        store.to_csv(out / "refs.csv")
        write_points_csv(out / "heldout.csv", data.heldout)
        write_json(out / "metrics.json", {"baseline": result.baseline.to_dict(), "guided": result.guided.to_dict()})
        write_json(out / "config.json", cfg.to_dict())
        if plot and cfg.dim == 2:
            plotting.scatter_plot(out / "scatter.svg", data.references, base, guided, cfg.mixture.means)
        result.out_dir = out
    return result


# -- ablation -------------------------------------------------------------------

def default_axis_values(cfg: RunConfig, axis: str) -> list:
    if axis == "n_step":
        return [0, 1, 3, 5]
    if axis == "sampler":
        return ["ddim", "ddpm"]
    if axis == "gamma":
        g = cfg.guidance.gamma
        return [0.0, 0.5 * g, g, 2.0 * g] if g > 0 else [0.0]
    raise ConfigurationError("axis", f"must be one of {ABLATION_AXES}")


def parse_axis_values(axis: str, text: str) -> list:
    items = [s.strip() for s in text.split(",") if s.strip()]
    try:
        if axis == "n_step":
            return [int(s) for s in items]
        if axis == "gamma":
            return [float(s) for s in items]
    except ValueError:
        raise ConfigurationError("values", f"bad value list for axis {axis}: {text!r}") from None
    return items


def axis_config(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "n_step":
        if isinstance(value, bool) or int(value) != value or value < 0:
            raise ConfigurationError("values", f"n_step must be a nonnegative integer, got {value!r}")
        return cfg.with_guidance(n_step=int(value))
    if axis == "gamma":
        if not float(value) >= 0:
            raise ConfigurationError("values", f"gamma must be >= 0, got {value!r}")
        return cfg.with_guidance(gamma=float(value))
    if axis == "sampler":
        if value not in ("ddim", "ddpm"):
            raise ConfigurationError("values", f"sampler must be ddim or ddpm, got {value!r}")
        return replace(cfg, sampler=value)
    raise ConfigurationError("axis", f"must be one of {ABLATION_AXES}")


def run_ablation(cfg: RunConfig, axis: str, values: Optional[Sequence] = None, out_dir=None,
                 write: bool = True, plot: bool = True) -> list[dict]:
    """Guided metrics for each axis value, everything else fixed and seeds shared."""
    if axis not in ABLATION_AXES:
        raise ConfigurationError("axis", f"must be one of {ABLATION_AXES}")
    values = default_axis_values(cfg, axis) if values is None else list(values)
    if not values:
        raise ConfigurationError("values", "no axis values given")
    configs = [axis_config(cfg, axis, v) for v in values]
    data = prepare(cfg)
    rows = []
    for v, c in zip(values, configs):
        log.info("ablation %s=%s", axis, v)
        samples, _ = generate(c, data, c.guidance)
        rows.append({axis: v, **score(c, data, samples).flat()})
    if write:
        out = Path(out_dir if out_dir is not None else cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(rows_to_csv(rows))
        if plot:
            plotting.ablation_plot(out / f"ablation_{axis}.svg", axis, rows)
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format_float(v)
    return str(v)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(rows[0])
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(r.get(h)) for h in header])
    return buf.getvalue()


# -- report ---------------------------------------------------------------------

def load_metrics(run_dir) -> tuple[MetricsReport, MetricsReport]:
    path = Path(run_dir) / "metrics.json"
    try:
        d = json.loads(path.read_text())
        return MetricsReport.from_dict(d["baseline"]), MetricsReport.from_dict(d["guided"])
    except FileNotFoundError:
        raise ReportError(f"{path}: not found") from None
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise ReportError(f"{path}: corrupt metrics file ({exc})") from None


def report_rows(baseline: MetricsReport, guided: MetricsReport) -> list[tuple]:
    """``(metric, baseline, guided, guided - baseline)`` in a fixed order."""
    b, g = baseline.flat(), guided.flat()
    rows = []
    for name in list(dict.fromkeys([*b, *g])):
        bv, gv = b.get(name), g.get(name)
        rows.append((name, bv, gv, None if bv is None or gv is None else gv - bv))
    return rows


def emit_report(run_dir, plot: bool = True) -> str:
    """Comma-delimited baseline vs guided table; also renders ``report.svg`` into the run directory."""
    baseline, guided = load_metrics(run_dir)
    rows = report_rows(baseline, guided)
    text = rows_to_csv([{"metric": r[0], "baseline": r[1], "guided": r[2], "delta": r[3]} for r in rows])
    if plot:
        plotting.report_plot(Path(run_dir) / "report.svg", rows)
    return text
