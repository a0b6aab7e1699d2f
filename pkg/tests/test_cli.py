import copy
import json
import subprocess
import sys

import pytest

from mfsmp import io
from mfsmp.cli import main

SMALL = {
    "model": {"name": "mean_field_lq"},
    "grid": {"T": 1.0, "N_t": 8},
    "N_p": 300,
    "seed": 4,
    "policy": {"features": ["1", "Y"], "theta0": [0.1, -0.2]},
    "optimizer": {"max_iters": 3},
    "export": {"particles": 20},
}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def csv_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))}


def test_malformed_config_names_key(tmp_path, capsys):
    assert main(["simulate", "--config", str(write(tmp_path, dict(SMALL, N_p=-3)))]) == 2
    assert "N_p" in capsys.readouterr().err
    assert main(["simulate", "--config", str(write(tmp_path, dict(SMALL, foo=1)))]) == 2
    assert "foo: unknown key" in capsys.readouterr().err
    bad = copy.deepcopy(SMALL)
    bad["policy"]["theta0"] = [1.0]
    assert main(["simulate", "--config", str(write(tmp_path, bad))]) == 2
    assert "policy.theta0" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2


def test_resolve_does_not_mutate():
    raw = copy.deepcopy(SMALL)
    io.resolve_config(raw)
    assert raw == SMALL


def test_simulate_manifest_round_trip(tmp_path):
    cfg_path = write(tmp_path, SMALL)
    before = cfg_path.read_bytes()
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", str(cfg_path), "--out", str(a)]) == 0
    assert cfg_path.read_bytes() == before
    man = json.loads((a / "manifest.json").read_text())
    assert man["subcommand"] == "simulate" and man["config"]["N_p"] == 300
    assert main(["simulate", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    ca, cb = csv_bytes(a), csv_bytes(b)
    assert set(ca) == {"forward.csv", "backward.csv", "cost.csv"}
    assert ca == cb


def test_optimize_round_trip_and_policy_reload(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["optimize", "--config", str(write(tmp_path, SMALL)), "--out", str(a)]) == 0
    assert main(["optimize", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    ha, ra = io.read_csv(a / "trace.csv")
    hb, rb = io.read_csv(b / "trace.csv")
    assert ha == hb and ha[-1] == "seconds"
    assert [r[:-1] for r in ra] == [r[:-1] for r in rb]  # wall-clock column excluded
    assert (a / "policy.json").read_bytes() == (b / "policy.json").read_bytes()
    cfg = copy.deepcopy(SMALL)
    cfg["policy"] = {"file": str(a / "policy.json")}
    c = tmp_path / "c"
    assert main(["simulate", "--config", str(write(tmp_path, cfg)), "--out", str(c)]) == 0


def test_gradient_check_table(tmp_path):
    cfg = dict(SMALL, model={"name": "lq"}, N_p=2000)
    assert main(["gradient-check", "--config", str(write(tmp_path, cfg)),
                 "--out", str(tmp_path)]) == 0
    header, rows = io.read_csv(tmp_path / "gradient_check.csv")
    assert header == ["param", "smp", "fd", "abs_error", "max_relative_error"]
    assert len(rows) == 2 and float(rows[0][4]) <= 5e-2
    for name in ("adjoint.csv", "picard.csv", "gradient.csv"):
        assert (tmp_path / name).exists()


def test_output_dir_precedence(tmp_path, monkeypatch):
    cfg = dict(SMALL, output_dir=str(tmp_path / "from_cfg"))
    path = write(tmp_path, cfg)
    monkeypatch.setenv(io.OUTPUT_ENV, str(tmp_path / "from_env"))
    assert main(["simulate", "--config", str(path)]) == 0
    assert (tmp_path / "from_env" / "manifest.json").exists()
    assert not (tmp_path / "from_cfg").exists()
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "cost.csv").exists()


def test_benchmark_requires_lq(tmp_path, capsys):
    assert main(["benchmark-lq", "--config", str(write(tmp_path, SMALL)),
                 "--out", str(tmp_path)]) == 2
    assert "model.name" in capsys.readouterr().err


def test_verify_subprocess_exit_zero(tmp_path):
    cfg = write(tmp_path, {"verify": {"scope": ["model", "verify"]}})
    proc = subprocess.run([sys.executable, "-m", "mfsmp", "verify", "--config", str(cfg),
                           "--out", str(tmp_path / "v")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "0 failed" in proc.stdout
    assert (tmp_path / "v" / "margins.csv").exists()


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as info:
        main(["nope", "--config", "x.json"])
    assert info.value.code == 2
