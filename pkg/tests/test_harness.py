import json

import numpy as np
import pytest

from mvhomog.harness.cli import main
from mvhomog.harness.config import ConfigError, ExperimentConfig
from mvhomog.harness.experiments import (cmd_averaging, cmd_check, cmd_converge,
                                         cmd_fluctuation, cmd_moments, loglog_slope,
                                         parallel_map)
from mvhomog.harness.report import RunReport, Series, write_report


def small(family="linear-ou", **kw):
    d = {"model": {"family": family}, "N": 64, "T": 0.2, "seeds": [0, 1, 2],
         "epsilons": [0.2, 0.1, 0.05]}
    d.update(kw)
    return ExperimentConfig.from_dict(d)


@pytest.mark.parametrize("patch,match", [
    ({"epsilons": [0.1, 0.2]}, "decreasing"),
    ({"epsilons": [1.5]}, r"\(0, 1\]"),
    ({"seeds": [1, 1]}, "distinct"),
    ({"functionals": ["cube"]}, "functionals"),
    ({"observable": "nope"}, "observable"),
    ({"colour": "red"}, "unknown config"),
    ({"probes": {"z": []}}, "probe"),
])
def test_config_validation(patch, match):
    d = {"model": {"family": "linear-ou"}}
    d.update(patch)
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_dict(d)


def test_config_roundtrip_and_digest():
    cfg = small(p=4)
    back = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert back.to_json() == cfg.to_json()
    assert back.digest() == cfg.digest()
    assert small(p=2).digest() != cfg.digest()


def test_load_reports_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        ExperimentConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="valid JSON"):
        ExperimentConfig.load(bad)


def test_loglog_slope_recovers_power():
    eps = np.array([0.2, 0.1, 0.05, 0.025])
    rng = np.random.default_rng(0)
    vals = 3.0 * eps[:, None] ** 1.5 * np.exp(0.01 * rng.standard_normal((4, 8)))
    fit = loglog_slope(eps, vals)
    assert fit["slope"] == pytest.approx(1.5, abs=0.02)
    assert fit["ci"][0] < 1.5 < fit["ci"][1]


def test_parallel_map_keeps_order():
    assert parallel_map(lambda v: v * v, range(10), threads=4) == [v * v for v in range(10)]


def test_write_report_layout(tmp_path):
    rep = RunReport("demo")
    rep.add_row(0.1, "stat", 1.5, 0.1)
    rep.add_verdict("ok", True, 1.0, 2.0)
    rep.details["arr"] = np.arange(3)
    rep.series["s"] = Series("t", "epsilon", "y", [0.1, 0.2], {"a": [1.0, 2.0]}, {"a": [0.1, 0.1]})
    written = write_report(rep, tmp_path / "out")
    names = sorted(p.relative_to(tmp_path / "out").as_posix() for p in written)
    assert names == ["figures/s.png", "plotdata/s.csv", "results.csv", "summary.json"]
    lines = (tmp_path / "out" / "results.csv").read_text().splitlines()
    assert lines == ["experiment,epsilon,statistic,value,se", "demo,0.1,stat,1.5,0.1"]
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["passed"] and summary["details"]["arr"] == [0, 1, 2]
    assert (tmp_path / "out" / "plotdata" / "s.csv").read_text().splitlines()[0] == "epsilon,a,a_se"


def test_write_report_without_figures(tmp_path):
    rep = RunReport("demo")
    rep.series["s"] = Series("t", "x", "y", [1.0], {"a": [1.0]})
    write_report(rep, tmp_path, figures=False)
    assert not (tmp_path / "figures").exists()


def test_check_uncentred_probe_skips_corrector():
    rep = cmd_check(small(model={"family": "linear-ou", "params": {"k_shift": 1.0}},
                          probes={"x": [[0.0]]}, budget=500))
    names = [v.name for v in rep.verdicts]
    assert any(n.startswith("centering") for n in names)
    assert not any(n.startswith("poisson_residual") for n in names)
    assert not rep.passed and rep.details["skipped"]


def test_converge_zero_response_model():
    # limit and particle system share a law here, so this is a 2-SE test on noise
    rep = cmd_converge(small("zero-k", N=400, T=0.5, seeds=list(range(6))))
    assert rep.passed, [v.to_dict() for v in rep.verdicts]
    assert {r[2] for r in rep.rows} == {"weak_error_id", "weak_error_square", "w2_terminal"}


def test_fluctuation_degenerate_for_zero_response():
    rep = cmd_fluctuation(small("zero-k"))
    (v,) = rep.verdicts
    assert v.degenerate and v.passed


def test_fluctuation_rejects_odd_order():
    with pytest.raises(ConfigError):
        cmd_fluctuation(small(), p=3)


def test_fluctuation_needs_three_epsilons():
    with pytest.raises(ConfigError):
        cmd_fluctuation(small(epsilons=[0.2, 0.1]))


def test_moments_reports_sup_and_increments():
    rep = cmd_moments(small(epsilons=[0.2, 0.1], delta0=0.005))
    stats = {r[2] for r in rep.rows}
    assert {"sup_E_abs_Y_p2", "sup_E_abs_X_p2"} <= stats
    assert any(s.startswith("increment_p2_h=") for s in stats)


def test_averaging_requires_fixed_fast_law():
    with pytest.raises(ConfigError, match="averaging"):
        cmd_averaging(small(model={"family": "linear-ou", "params": {"a": 1.0}}))


def test_averaging_constant_observable_is_degenerate():
    rep = cmd_averaging(small(observable="constant", invariant_samples=256))
    (v,) = rep.verdicts
    assert v.degenerate and v.passed


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"family": "zero-k"}, "N": 400, "T": 0.5,
                               "seeds": list(range(6)), "epsilons": [0.2, 0.1]}))
    out = tmp_path / "run"
    assert main(["converge", "--config", str(cfg), "--out", str(out), "--no-figures"]) == 0
    printed = capsys.readouterr().out
    assert "[PASS] weak_error_id_zero" in printed
    assert (out / "results.csv").exists() and not (out / "figures").exists()

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"family": "nope"}}))
    assert main(["converge", "--config", str(bad), "--out", str(out)]) == 1
    assert "error:" in capsys.readouterr().err

    shifted = tmp_path / "shift.json"
    shifted.write_text(json.dumps({"model": {"family": "linear-ou", "params": {"k_shift": 1.0}},
                                   "probes": {"x": [[0.0]]}, "budget": 500}))
    assert main(["check", "--config", str(shifted), "--out", str(tmp_path / "c")]) == 2


def test_cli_seed_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"family": "zero-k"}, "N": 16, "T": 0.1,
                               "epsilons": [0.2, 0.1]}))
    main(["converge", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seeds", "4,5",
          "--no-figures"])
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["provenance"]["seeds"] == [4, 5]
