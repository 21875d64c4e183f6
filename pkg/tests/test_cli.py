import json

import numpy as np
import pytest
from click.testing import CliRunner

from nsamp.cli import main
from nsamp.config import ConfigError, ExperimentConfig, load_config
from nsamp.model import load_instance
from nsamp.state_evolution import FixedPoint

SMALL = ["--mc-samples", "4000", "--seed", "3"]


def run(args):
    return CliRunner().invoke(main, args)


def test_config_defaults_and_digest():
    a = ExperimentConfig()
    assert a.K == 3 and a.alpha == 2.0 and a.lambda0_grid == (1.0, 0.3, 0.1)
    b = ExperimentConfig(output_path="x.csv")
    assert a.digest() == b.digest()
    assert ExperimentConfig(seed=1).digest() != a.digest()
    assert a.header().startswith("nsamp 0.1.0 config_sha256=")


def test_config_rejects_unknown_and_invalid(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"K": 3, "colour": 1}))
    with pytest.raises(ConfigError, match="colour"):
        load_config(p)
    with pytest.raises(ConfigError, match="alpha"):
        load_config(None, {"alpha": -1.0})
    with pytest.raises(ConfigError, match="d must be >= K"):
        load_config(None, {"d": 2, "K": 3})
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(p)


def test_config_file_with_override(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"K": 2, "seed": 4}))
    cfg = load_config(p, {"seed": 9, "d": None})
    assert cfg.K == 2 and cfg.seed == 9 and cfg.d == 4000


def test_fixed_point_json(tmp_path):
    out = tmp_path / "fp.json"
    r = run(["fixed-point", *SMALL, "--output", str(out)])
    assert r.exit_code == 0, r.output
    doc = json.loads(out.read_text())
    assert doc["_meta"]["version"] == "0.1.0"
    fp = FixedPoint.from_dict(doc)
    assert fp.converged and fp.K == 3
    r2 = run(["rho-at", "--fixed-point", str(out)])
    assert r2.exit_code == 0
    assert json.loads(r2.output)["rho_at"] == pytest.approx(fp.rho_at, rel=1e-12)


def test_exit_codes():
    assert run(["fixed-point", "--lambda0", "0", "--mc-samples", "500"]).exit_code == 2
    assert run(["fixed-point", "--alpha", "-1"]).exit_code == 1
    assert run(["fixed-point", "--no-such-flag"]).exit_code == 1
    assert run(["fixed-point", "--problem", "hinge"]).exit_code == 1
    assert run(["fixed-point", "--max-iter-typo", "3"]).exit_code == 1
    assert run(["solve", "--lambda0", "0", "--d", "20"]).exit_code == 2
    assert run(["verify", "--only", "nope"]).exit_code == 1


def test_non_convergence_writes_partial(tmp_path):
    cfgp = tmp_path / "c.json"
    cfgp.write_text(json.dumps({"max_iter": 2, "mc_samples": 500}))
    out = tmp_path / "fp.json"
    r = run(["fixed-point", "--config", str(cfgp), "--output", str(out)])
    assert r.exit_code == 2
    doc = json.loads(out.read_text())
    assert doc["converged"] is False and doc["iterations"] == 2


def test_amp_and_dice_csv(tmp_path):
    for cmd in ("amp", "dice"):
        out = tmp_path / f"{cmd}.csv"
        r = run([cmd, "--d", "200", "--t-max", "3", *SMALL, "--output", str(out)])
        assert r.exit_code == 0, r.output
        lines = out.read_text().split("\n")
        assert lines[0].startswith("# nsamp 0.1.0 config_sha256=")
        assert lines[1].startswith("t,omega_step_dist,gamma_step_dist,ratio,grad_norm,B_11")
        assert len([ln for ln in lines[2:] if ln]) == 3
    summ = json.loads((tmp_path / "dice.csv.summary.json").read_text())
    assert summ["engine"] == "dice" and summ["d"] == 200


def test_se_rate_and_fig1():
    r = run(["se-rate", *SMALL, "--t-max", "4"])
    assert r.exit_code == 0
    lines = r.output.strip().split("\n")
    assert lines[1] == "t,delta_norm,ratio,rho_at_ref" and len(lines) == 6
    r = run(["fig1", *SMALL, "--d", "150", "--t-max", "2", "--lambda0-grid", "1,0.5"])
    assert r.exit_code == 0
    rows = [ln.split(",") for ln in r.output.strip().split("\n")[2:]]
    assert [row[0] for row in rows] == ["1", "1", "0.5", "0.5"]
    assert run(["fig1", "--lambda0-grid", "1,abc"]).exit_code == 1


def test_solve_and_dump(tmp_path):
    out, dump = tmp_path / "s.json", tmp_path / "w.bin"
    r = run(["solve", "--d", "60", "--seed", "2", "--output", str(out), "--dump", str(dump)])
    assert r.exit_code == 0, r.output
    doc = json.loads(out.read_text())
    assert doc["grad_norm"] <= 1e-8 and doc["risk_per_d"] > 0
    w, X, y = load_instance(dump)
    assert w.shape == (60, 3) and X is None


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert run(["amp", "--d", "150", "--t-max", "3", *SMALL, "--output", str(p)]).exit_code == 0
    assert a.read_bytes() == b.read_bytes()


def test_verify_list_and_single_check():
    r = run(["verify", "--list"])
    assert r.exit_code == 0 and len(r.output.split()) == 12
    r = run(["verify", "--only", "scalar-oracle"])
    assert r.exit_code == 0 and "PASS" in r.output
    r = run(["verify", "--only", "scalar-oracle", "--tol-scale", "0"])
    assert r.exit_code == 3 and "FAIL" in r.output


def test_fixed_point_json_values_finite(tmp_path):
    out = tmp_path / "fp.json"
    run(["fixed-point", *SMALL, "--K", "2", "--output", str(out)])
    doc = json.loads(out.read_text())
    assert np.all(np.isfinite(doc["Cstar"])) and len(doc["Cstar"]) == 2
