import json
from pathlib import Path
import shutil

import pytest

from qhoreduce.cli import build_parser, main

CONFIG = """seed = 7
[basis]
W_max = 15
[schedule]
eps0 = 1e-4
m_max = 3
enforce_smallness = false
[frequency]
omega = 1.2360679774997898
[screen]
K = 6
grid = 201
measure_K = 5
[verify]
conjugacy_T = 20.0
sobolev_T = 50.0
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG)
    return path


def load(path):
    data = json.loads(path.read_text())
    data.pop("config")
    return data


def test_parser_has_all_stages():
    parser = build_parser()
    for stage in ("assemble", "screen", "reduce", "verify", "certify", "report"):
        args = parser.parse_args([stage, "--threads", "1"])
        assert args.stage == stage
    assert parser.parse_args(["screen", "--grid", "11"]).grid == 11
    with pytest.raises(SystemExit):
        parser.parse_args(["reduce", "--grid", "11"])


def test_stages_write_outputs(cfg, tmp_path, capsys):
    out = tmp_path / "out"
    base = ["--config", str(cfg), "--out", str(out), "--threads", "1"]
    assert main(["assemble", *base]) == 0
    assert load(out / "assemble.json")["size"] == 8
    assert main(["screen", *base, "--grid", "51"]) == 0
    assert len((out / "screen.csv").read_text().splitlines()) == 52
    assert main(["reduce", *base]) == 0
    red = load(out / "reduce.json")
    assert red["converged"] and red["seed"] == 7
    assert sorted(p.name for p in (out / "checkpoints").iterdir())[0] == "step_01.json"
    assert main(["verify", *base]) == 0
    ver = load(out / "verify.json")
    assert ver["conjugacy_error"] <= ver["tolerance"]
    assert (out / "trajectory.csv").exists()
    assert main(["report", *base]) == 0
    assert "reduce.converged" in capsys.readouterr().out


def test_certify_is_deterministic_and_resumable(cfg, tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out in (a, b):
        assert main(["certify", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("certify.json", "reduce.json", "verify.json", "summary.json"):
        assert (a / name).read_text() == (b / name).read_text()
    assert (a / "quasi_energies.csv").read_text() == (b / "quasi_energies.csv").read_text()
    c.mkdir()
    shutil.copy(a / "Q.json", c / "Q.json")
    ck = a / "checkpoints" / "step_01.json"
    assert main(["reduce", "--config", str(cfg), "--out", str(c), "--resume", str(ck)]) == 0
    assert load(c / "reduce.json")["W_beta"] == pytest.approx(load(a / "reduce.json")["W_beta"], rel=1e-12)


def test_seed_override(cfg, tmp_path):
    out = tmp_path / "s"
    assert main(["verify", "--config", str(cfg), "--out", str(out), "--seed", "11"]) == 0
    assert load(out / "verify.json")["seed"] == 11


def test_error_exit_codes(tmp_path, capsys):
    assert main(["assemble", "--config", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[schedule]\neps0 = 2.0\n")
    assert main(["reduce", "--config", str(bad)]) == 2
    assert "schedule.eps0" in capsys.readouterr().err
    assert main(["report", "--out", str(tmp_path / "empty")]) == 1
    assert main(["assemble", "--out", str(tmp_path / "x"), "--seed", str(2 ** 64)]) == 2


def test_zero_eps_reduce_is_trivial(tmp_path):
    cfg = tmp_path / "zero.toml"
    cfg.write_text(CONFIG.replace("eps0 = 1e-4", "eps0 = 0.0"))
    out = tmp_path / "z"
    assert main(["reduce", "--config", str(cfg), "--out", str(out)]) == 0
    red = load(out / "reduce.json")
    assert red["converged"] and red["steps"] == 0
    assert red["W_beta"] == 0.0 and red["M_minus_id_l2_0"] == 0.0


def test_screen_grid_row_count(cfg, tmp_path):
    out = tmp_path / "g"
    assert main(["screen", "--config", str(cfg), "--out", str(out), "--grid", "10000"]) == 0
    assert len((out / "screen.csv").read_text().splitlines()) == 10001


# scalars of `certify` on configs/reference.toml, seed 0
GOLDEN = {
    ("assemble", "strip_norm"): 13.312748779111136,
    ("assemble", "key_decay_sup"): 4.313691870258322,
    ("reduce", "scale"): 7.5115967152410125e-06,
    ("certify", "M_minus_id_l2_0"): 3.47554515100084e-06,
    ("certify", "M_minus_id_l2_1"): 3.4886117182762105e-06,
    ("certify", "measure_fraction"): 0.0824,
    ("screen", "pass_fraction"): 0.8778,
}


@pytest.mark.slow
def test_reference_pipeline_golden(tmp_path):
    ref = Path(__file__).resolve().parents[1] / "configs" / "reference.toml"
    out = tmp_path / "ref"
    assert main(["certify", "--config", str(ref), "--out", str(out), "--threads", "1"]) == 0
    for (stage, key), value in GOLDEN.items():
        assert load(out / f"{stage}.json")[key] == pytest.approx(value, rel=1e-9), (stage, key)
    cert = load(out / "certify.json")
    assert cert["W_beta"] == pytest.approx(7.2068149303616136e-12, rel=1e-6)
    assert cert["converged"]
    assert cert["bounds"]["W_beta_le_2eps0"] and cert["bounds"]["M_minus_id_le_eps0_5_12"]
    assert cert["conjugacy_error"] < 1e-10
    assert cert["sobolev_ratio_1"] == pytest.approx([0.9999589546790288, 1.0000244096810293], rel=1e-9)
    assert load(out / "reduce.json")["steps"] == 2
    qe = (out / "quasi_energies.csv").read_text().splitlines()
    assert len(qe) == 106 and float(qe[1]) == pytest.approx(1 - 2 * (5 ** 0.5 - 1), abs=1e-8)
