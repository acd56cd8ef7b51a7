import csv
import json

import pytest

from homlab.cli import main


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


TINY = {"name": "tiny", "alpha": 2.0, "epsilons": [0.5, 0.25], "hole": {"kind": "ball", "rho": 0.5},
        "grid": {"rule": "cells_per_radius", "k": 2}, "law": {"kind": "newtonian", "eta0": 1.0}, "lambda": 3.5,
        "forcing": {"kind": "single-mode", "amplitude": [1.0, 1.0]}, "m0": "ball", "tol": 1e-9}


def test_darcy_subcommand(tmp_path):
    cfg = write(tmp_path / "d.json", {"hole": {"kind": "ball", "rho": 1.0}, "N": 8})
    assert main(["--config", cfg, "--out", str(tmp_path / "o"), "darcy"]) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["pass"] == {"band_limited": True, "residual": True}
    assert (tmp_path / "o" / "darcy.u.bin").stat().st_size == 3 * 8 ** 3 * 8


def test_sweep_and_report(tmp_path, capsys):
    cfg = write(tmp_path / "s.json", TINY)
    out = tmp_path / "o"
    code = main(["--config", cfg, "--out", str(out), "sweep"])
    man = json.loads((out / "manifest.json").read_text())
    assert code == (0 if man["all_passed"] else 1)
    rows = list(csv.DictReader((out / "results.csv").open()))
    assert {r["metric"] for r in rows} >= {"velocity_error", "pressure_error", "velocity_slope"}
    assert (out / "plots" / "tiny.svg").exists()
    before = (out / "results.csv").read_bytes()
    capsys.readouterr()
    assert main(["--out", str(out), "report"]) == code
    assert (out / "results.csv").read_bytes() == before
    assert "report:velocity_rate" in capsys.readouterr().out


def test_solve_with_checkpoints(tmp_path):
    cfg = write(tmp_path / "s.json", dict(TINY, epsilon=0.5))
    out = tmp_path / "o"
    assert main(["--config", cfg, "--out", str(out), "solve", "--checkpoint-every", "1"]) == 0
    assert (out / "solution.u.bin").exists() and (out / "mask.bin").exists()
    assert (out / "checkpoint_0001.json").exists()


def test_probe_korn(tmp_path):
    cfg = write(tmp_path / "p.json", {"alpha": 1.5, "epsilons": [0.25], "hole": {"kind": "ball", "rho": 0.25},
                                      "cells_per_radius": 2, "n_samples": 10})
    out = tmp_path / "o"
    assert main(["--config", cfg, "--out", str(out), "--seed", "3", "probe", "--kind", "korn"]) == 0
    header = (out / "probes.csv").read_text().splitlines()[0]
    assert header == "probe,epsilon,alpha,value,predicted_exponent,slope,pass"


def test_input_errors_exit_2(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "missing.json"), "--out", str(tmp_path), "sweep"]) == 2
    bad = write(tmp_path / "b.json", dict(TINY, epsilons=[0.25, 0.5]))
    assert main(["--config", bad, "--out", str(tmp_path), "sweep"]) == 2
    assert "error" in capsys.readouterr().err


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for sub in ("perm", "corrector", "solve", "darcy", "probe", "sweep", "report"):
        assert sub in text
