import json
from pathlib import Path

import numpy as np
import pytest

from procreate_lab import cli, runner
from procreate_lab.config import dumps, format_json_float, load_config, parse_config
from procreate_lab.errors import ConfigurationError
from procreate_lab.refstore import read_points_csv

DEFAULT = Path(__file__).resolve().parents[1] / "configs" / "default.json"


def small_config(tmp_path, **overrides):
    d = json.loads(DEFAULT.read_text())
    d["metrics"]["sample_count"] = 8
    d["metrics"]["real_count"] = 60
    d["sampler"]["steps"] = 10
    d["out_dir"] = str(tmp_path / "run")
    for key, value in overrides.items():
        section, _, name = key.partition("__")
        if name:
            d[section][name] = value
        else:
            d[section] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(d))
    return path


# -- config ---------------------------------------------------------------------

def test_default_config_parses():
    cfg = load_config(DEFAULT)
    assert cfg.mixture.n_components == 8 and cfg.dim == 2
    assert cfg.metrics.sample_count == 40 and cfg.steps == 50 and cfg.guidance.n_step == 5
    assert cfg.metrics.thresholds == (0.4, 0.5, 0.6)
    assert cfg.guidance.gamma > 0


def test_seed_fan_out_is_deterministic_and_distinct():
    cfg = load_config(DEFAULT)
    s = cfg.seeds()
    assert s == cfg.seeds()
    assert len(set(s.values())) == 3
    assert cfg.with_seed(1).seeds() != s


def test_config_round_trips_through_canonical_json(tmp_path):
    cfg = load_config(DEFAULT)
    text = dumps(cfg.to_dict())
    again = parse_config(json.loads(text))
    assert dumps(again.to_dict()) == text
    assert again.mixture.means.tobytes() == cfg.mixture.means.tobytes()


@pytest.mark.parametrize("v", [0.1, 1e-4, 1 / 3, 2.0, 123456.789, -7.5e-300])
def test_seventeen_digit_floats_round_trip(v):
    s = format_json_float(v)
    assert float(s) == v and json.loads(s) == v


@pytest.mark.parametrize("mutate,fieldname", [
    (lambda d: d["references"].update(source="inline", points=[[1.0, 2.0, 3.0]]), "references.points"),
    (lambda d: d["metrics"].update(k=40), "metrics.k"),
    (lambda d: d["sampler"].update(kind="euler"), "sampler.kind"),
    (lambda d: d["embedder"].update(in_dim=3), "embedder.in_dim"),
    (lambda d: d.update(colour="red"), "colour"),
    (lambda d: d["references"].update(source="csv", path="missing.csv"), "references.path"),
    (lambda d: d.update(classifier_guidance={"target_component": 8, "scale": 1.0}),
     "classifier_guidance.target_component"),
])
def test_config_errors_name_the_field(tmp_path, mutate, fieldname):
    d = json.loads(DEFAULT.read_text())
    mutate(d)
    with pytest.raises(ConfigurationError) as info:
        parse_config(d, base_dir=tmp_path)
    assert info.value.field == fieldname


def test_metrics_embedder_defaults_to_guidance_embedder():
    d = json.loads(DEFAULT.read_text())
    del d["metrics_embedder"]
    cfg = parse_config(d)
    assert cfg.metrics_embedder == cfg.embedder
    assert parse_config(json.loads(dumps(cfg.to_dict()))).metrics_embedder == cfg.embedder


def test_csv_references_resolve_relative_to_config(tmp_path):
    (tmp_path / "r.csv").write_text("x0,x1\n0.5,0.25\n-1.0,0.0\n")
    path = small_config(tmp_path, references={"source": "csv", "path": "r.csv"})
    data = runner.prepare(load_config(path))
    np.testing.assert_array_equal(data.references, [[0.5, 0.25], [-1.0, 0.0]])


# -- experiment -----------------------------------------------------------------

def test_gamma_zero_sections_identical(tmp_path):
    cfg = load_config(small_config(tmp_path, guidance__gamma=0.0))
    res = runner.run_experiment(cfg, plot=False)
    assert res.baseline_samples.tobytes() == res.guided_samples.tobytes()
    d = json.loads((res.out_dir / "metrics.json").read_text())
    assert d["baseline"] == d["guided"]


def test_rerun_is_byte_identical(tmp_path):
    path = small_config(tmp_path)
    cfg = load_config(path)
    runner.run_experiment(cfg, out_dir=tmp_path / "a", plot=False)
    runner.run_experiment(load_config(path), out_dir=tmp_path / "b", plot=False)
    for name in ("samples.csv", "metrics.json", "refs.csv", "heldout.csv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_artifacts_layout(tmp_path):
    cfg = load_config(small_config(tmp_path))
    res = runner.run_experiment(cfg)
    out = res.out_dir
    assert (out / "scatter.svg").stat().st_size > 0
    pts, extra = read_points_csv(out / "samples.csv")
    assert pts.shape == (16, 2) and extra["method"] == ["baseline"] * 8 + ["guided"] * 8
    refs, origin = read_points_csv(out / "refs.csv")
    assert origin["origin"] == ["original"] * 10 + ["generated"] * 8
    np.testing.assert_array_equal(refs[10:], pts[8:])
    # the written config reproduces the run
    again = runner.run_experiment(load_config(out / "config.json"), out_dir=tmp_path / "again", plot=False)
    assert (tmp_path / "again" / "samples.csv").read_bytes() == (out / "samples.csv").read_bytes()


def test_classifier_guidance_applies_to_both_arms(tmp_path):
    path = small_config(tmp_path, guidance__gamma=0.0, classifier_guidance={"target_component": 2, "scale": 4.0})
    res = runner.run_experiment(load_config(path), write=False)
    assert res.baseline_samples.tobytes() == res.guided_samples.tobytes()
    target = load_config(path).mixture.means[2]
    assert np.mean(np.linalg.norm(res.guided_samples - target, axis=1) < 0.6) >= 0.75


# -- ablation ---------------------------------------------------------------------

def test_ablation_baseline_rows_match_experiment(tmp_path):
    cfg = load_config(small_config(tmp_path))
    res = runner.run_experiment(cfg, write=False)
    base = res.baseline.flat()
    rows = runner.run_ablation(cfg, "n_step", [0, 3], out_dir=tmp_path / "abl", plot=False)
    assert {k: v for k, v in rows[0].items() if k != "n_step"} == base
    three = runner.run_experiment(cfg.with_guidance(n_step=3), write=False).guided.flat()
    assert {k: v for k, v in rows[1].items() if k != "n_step"} == three
    grows = runner.run_ablation(cfg, "gamma", [0.0, cfg.guidance.gamma], write=False)
    assert {k: v for k, v in grows[0].items() if k != "gamma"} == base
    assert {k: v for k, v in grows[1].items() if k != "gamma"} == res.guided.flat()
    text = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert text[0].startswith("n_step,fid,kid,precision,recall,mss,vendi,top1@0.4")
    assert len(text) == 3


def test_ablation_rejects_bad_values(tmp_path):
    cfg = load_config(small_config(tmp_path))
    with pytest.raises(ConfigurationError):
        runner.run_ablation(cfg, "n_step", [-1], write=False)
    with pytest.raises(ConfigurationError):
        runner.run_ablation(cfg, "sampler", ["euler"], write=False)
    with pytest.raises(ConfigurationError):
        runner.run_ablation(cfg, "width", [1], write=False)


# -- report and CLI -----------------------------------------------------------------

def test_report_deltas_recomputed_from_json(tmp_path):
    cfg = load_config(small_config(tmp_path))
    out = runner.run_experiment(cfg, plot=False).out_dir
    d = json.loads((out / "metrics.json").read_text())
    lines = runner.emit_report(out, plot=False).splitlines()
    assert lines[0] == "metric,baseline,guided,delta"
    names = [ln.split(",")[0] for ln in lines[1:]]
    assert names == ["fid", "kid", "precision", "recall", "mss", "vendi", "top1@0.4", "top1@0.5", "top1@0.6"]
    for ln in lines[1:]:
        name, b, g, delta = ln.split(",")
        if name.startswith("top1@"):
            bv, gv = d["baseline"]["top1_fractions"][name[5:]], d["guided"]["top1_fractions"][name[5:]]
        else:
            bv, gv = d["baseline"][name], d["guided"][name]
        assert float(b) == bv and float(g) == gv and float(delta) == gv - bv


def test_cli_exit_codes(tmp_path, capsys):
    path = small_config(tmp_path)
    assert cli.main(["sample", str(path), "--quiet"]) == 0
    assert capsys.readouterr().out == ""
    run_dir = tmp_path / "run"
    assert cli.main(["report", str(run_dir)]) == 0
    assert capsys.readouterr().out.startswith("metric,baseline,guided,delta")
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["report", str(empty)]) == 3
    assert "metrics.json" in capsys.readouterr().err
    (empty / "metrics.json").write_text("{not json")
    assert cli.main(["report", str(empty)]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mixture": {"ring": {"K": 8, "std": 0.1}}, "sampler": {"kind": "euler"}}))
    assert cli.main(["sample", str(bad)]) == 2
    assert "sampler.kind" in capsys.readouterr().err
    assert cli.main(["sample", str(tmp_path / "nope.json")]) == 3
    assert cli.main(["metrics", str(run_dir / "samples.csv"), str(run_dir / "heldout.csv")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out) == {"baseline", "guided"}


def test_cli_seed_and_out_overrides(tmp_path):
    path = small_config(tmp_path)
    assert cli.main(["sample", str(path), "--seed", "3", "--out", str(tmp_path / "s3"), "--quiet"]) == 0
    assert json.loads((tmp_path / "s3" / "config.json").read_text())["seed"] == 3
    assert cli.main(["ablate", str(path), "--axis", "sampler", "--out", str(tmp_path / "ab"), "--quiet"]) == 0
    lines = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == ["ddim", "ddpm"]
    assert (tmp_path / "ab" / "ablation_sampler.svg").exists()


def test_metrics_command_reproduces_run_metrics(tmp_path, capsys):
    path = small_config(tmp_path)
    assert cli.main(["sample", str(path), "--quiet"]) == 0
    run = tmp_path / "run"
    args = ["metrics", str(run / "samples.csv"), str(run / "heldout.csv"),
            "--refs", str(run / "refs.csv"), "--config", str(run / "config.json")]
    assert cli.main(args) == 0
    assert json.loads(capsys.readouterr().out) == json.loads((run / "metrics.json").read_text())
