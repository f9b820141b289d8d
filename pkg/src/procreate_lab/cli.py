"""Command-line entry point: ``sample``, ``ablate``, ``report`` and ``metrics``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from procreate_lab import runner
from procreate_lab.config import dumps, load_config
from procreate_lab.embedding import embed
from procreate_lab.errors import ConfigurationError, ParameterError
from procreate_lab.metrics import DEFAULT_THRESHOLDS, evaluate
from procreate_lab.refstore import read_points_csv

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_sample(args) -> str:
    cfg = _load(args)
    res = runner.run_experiment(cfg, out_dir=args.out)
    return runner.emit_report(res.out_dir)


def cmd_ablate(args) -> str:
    cfg = _load(args)
    values = None if args.values is None else runner.parse_axis_values(args.axis, args.values)
    rows = runner.run_ablation(cfg, args.axis, values, out_dir=args.out)
    return runner.rows_to_csv(rows)


def cmd_report(args) -> str:
    return runner.emit_report(args.run_dir)


def cmd_metrics(args) -> str:
    try:
        gen, extra = read_points_csv(args.generated)
        real, _ = read_points_csv(args.real)
        refs = None
        if args.refs:
            refs, ref_extra = read_points_csv(args.refs)
            if "origin" in ref_extra:
                # grown references are generated samples, not part of the original set
                refs = refs[np.array(ref_extra["origin"]) == "original"]
    except ParameterError as exc:
        raise OSError(str(exc)) from None
    if gen.shape[1] != real.shape[1] or (refs is not None and refs.shape[1] != gen.shape[1]):
        raise ConfigurationError("generated", "point dimensions differ between files")
    features = similarity = None
    thresholds = DEFAULT_THRESHOLDS
    k = args.k
    if args.config:
        cfg = load_config(args.config)
        if cfg.dim != gen.shape[1]:
            raise ConfigurationError("mixture", "config dimension differs from the point files")
        features, similarity, thresholds = cfg.metrics_embedder, cfg.embedder, cfg.metrics.thresholds
        k = cfg.metrics.k if args.k is None else args.k

    def score(points):
        if features is None:
            return evaluate(points, real, refs, k=k or 5, thresholds=thresholds)
        return evaluate(embed(features, points), embed(features, real),
                        None if refs is None or not len(refs) else embed(similarity, refs),
                        k=k, thresholds=thresholds, similarity_emb=embed(similarity, points))

    groups = {"all": np.arange(len(gen))}
    if "method" in extra:
        labels = np.array(extra["method"])
        groups = {m: np.flatnonzero(labels == m) for m in dict.fromkeys(extra["method"])}
    out = {name: score(gen[idx]).to_dict() for name, idx in groups.items()}
    return dumps(out) + "\n"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="suppress the table on standard output")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")

    runopts = argparse.ArgumentParser(add_help=False)
    runopts.add_argument("config", help="run configuration (JSON)")
    runopts.add_argument("--seed", type=int, help="override the config seed")
    runopts.add_argument("--out", help="output directory (default: the config's out_dir)")

    p = argparse.ArgumentParser(prog="procreate-lab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("sample", parents=[common, runopts], help="paired baseline and guided run")
    s.set_defaults(func=cmd_sample)
    a = sub.add_parser("ablate", parents=[common, runopts], help="sweep one setting")
    a.add_argument("--axis", required=True, choices=runner.ABLATION_AXES)
    a.add_argument("--values", help="comma-separated axis values (default depends on the axis)")
    a.set_defaults(func=cmd_ablate)
    r = sub.add_parser("report", parents=[common], help="baseline vs guided table for a run directory")
    r.add_argument("run_dir")
    r.set_defaults(func=cmd_report)
    m = sub.add_parser("metrics", parents=[common], help="metrics of generated points against real points")
    m.add_argument("generated")
    m.add_argument("real")
    m.add_argument("--refs", help="reference points for Top-1 fractions")
    m.add_argument("--k", type=int, help="neighbours for precision/recall (default 5, or the config's)")
    m.add_argument("--config", help="use this run config's embedders, thresholds and k")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = args.func(args)
    except (ConfigurationError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
