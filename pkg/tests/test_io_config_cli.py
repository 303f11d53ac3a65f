import csv
import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from lrns import io
from lrns.cli import EXIT_CHECKS, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from lrns.config import ConfigError, load, parse
from lrns.verify import CHECKS


# -- binary format ----------------------------------------------------------


@given(arrays(np.float64, st.tuples(st.integers(0, 5), st.integers(0, 5)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_matrix_round_trip(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("m") / "a.bin"
    io.write_matrix(path, a)
    raw = path.read_bytes()
    assert struct.unpack_from("<QQ", raw) == a.shape
    assert len(raw) == 16 + 8 * a.size
    assert np.array_equal(io.read_matrix(path), a)


def test_matrix_errors(tmp_path):
    with pytest.raises(ValueError):
        io.write_matrix(tmp_path / "a.bin", np.zeros(3))
    with pytest.raises(ValueError):
        io.write_matrix(tmp_path / "a.bin", np.array([[np.nan]]))
    (tmp_path / "short.bin").write_bytes(b"\x01\x00")
    with pytest.raises(ValueError, match="truncated"):
        io.read_matrix(tmp_path / "short.bin")
    (tmp_path / "size.bin").write_bytes(struct.pack("<QQ", 2, 2) + b"\x00" * 24)
    with pytest.raises(ValueError, match="expected 4"):
        io.read_matrix(tmp_path / "size.bin")
    (tmp_path / "inf.bin").write_bytes(struct.pack("<QQ", 1, 1) + struct.pack("<d", np.inf))
    with pytest.raises(ValueError, match="non-finite"):
        io.read_matrix(tmp_path / "inf.bin")


def test_collection_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    members = [rng.standard_normal((4, 4)) for _ in range(3)]
    mean = np.eye(4)
    path = io.write_collection(tmp_path / "c", members, mean)
    assert json.loads(path.read_text())["members"] == [f"member_{m:05d}.bin" for m in range(3)]
    back, mean_back = io.read_collection(tmp_path / "c")
    assert all(np.array_equal(a, b) for a, b in zip(back, members)) and np.array_equal(mean_back, mean)
    (tmp_path / "c" / "collection.json").write_text('{"members": []}')
    with pytest.raises(ValueError, match="nonempty"):
        io.read_collection(tmp_path / "c")


def test_fmt():
    assert io.fmt(3) == "3" and io.fmt(True) == "true" and io.fmt(np.int64(7)) == "7"
    x = 0.1 + 0.2
    assert float(io.fmt(x)) == x


# -- config -----------------------------------------------------------------


def test_config_path_errors():
    with pytest.raises(ConfigError, match=r"diffusion\.sigma"):
        parse({"pipeline": "solve-diffusion", "diffusion": {"sigma": "a"}})
    with pytest.raises(ConfigError, match=r"diffusion"):
        parse({"pipeline": "solve-diffusion", "diffusion": {"bogus": 1}})
    with pytest.raises(ConfigError, match=r"pipeline"):
        parse({"pipeline": "nope"})
    with pytest.raises(ConfigError, match=r"scan\.taus\[1\]"):
        parse({"pipeline": "scan-tau", "scan": {"taus": [1.0, "x"]}})
    with pytest.raises(ConfigError, match=r"control: "):
        parse({"pipeline": "solve-control", "control": {"beta": 0.0}})
    with pytest.raises(ConfigError, match="compress"):
        parse({"pipeline": "compress"})


def test_config_load_malformed(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"pipeline": "verify",\n  oops}')
    with pytest.raises(ConfigError, match="line 2"):
        load(p)


def test_seed_precedence_and_digest():
    cfg = parse({"pipeline": "solve-diffusion", "diffusion": {"seed": 5}})
    assert cfg.effective_seed("diffusion") == 5 and cfg.diffusion().seed == 5
    cfg.seed = 9
    assert cfg.diffusion().seed == 9
    a = parse({"pipeline": "verify", "output": "a", "threads": 2})
    b = parse({"pipeline": "verify", "output": "b"})
    assert a.digest() == b.digest()
    assert a.digest() != parse({"pipeline": "verify", "seed": 1}).digest()


# -- CLI --------------------------------------------------------------------

SMALL = {"n": 4, "samples": 8, "steps": 3, "t_end": 0.03, "sigma": 0.2}


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_cli_config_errors(tmp_path, capsys):
    assert main(["solve-diffusion", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    bad = _write(tmp_path, {"pipeline": "solve-diffusion", "diffusion": {"sigma": "a"}})
    assert main(["solve-diffusion", "--config", bad]) == EXIT_CONFIG
    assert "diffusion.sigma" in capsys.readouterr().err
    ok = _write(tmp_path, {"pipeline": "scan-tau"}, "ok.json")
    assert main(["solve-diffusion", "--config", ok]) == EXIT_CONFIG
    assert main(["scan-tau", "--config", ok, "--tau", "1.5"]) == EXIT_CONFIG
    assert main(["scan-tau", "--config", ok, "--threads", "0"]) == EXIT_CONFIG


def test_cli_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = _write(tmp_path, {"pipeline": "verify", "output": str(blocker / "sub")})
    assert main(["verify", "--config", cfg]) == EXIT_CONFIG


def test_cli_verify_pass_and_injected_failure(tmp_path, capsys):
    out = tmp_path / "v"
    assert main(["verify", "--out", str(out)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert sum(line.startswith("PASS ") for line in lines) == len(CHECKS)
    assert not any(line.startswith("FAIL") for line in lines)
    cfg = _write(tmp_path, {"pipeline": "verify", "output": str(out),
                            "verify": {"tolerances": {"mass_quadrature": 0.0}, "only": ["mass_quadrature", "wolfe"]}})
    assert main(["verify", "--config", cfg]) == EXIT_CHECKS
    text = capsys.readouterr().out
    assert "FAIL mass_quadrature" in text and "failed: mass_quadrature" in text
    rows = _read_csv(out / "verify.csv")
    assert [r["passed"] for r in rows] == ["false", "true"]
    unknown = _write(tmp_path, {"pipeline": "verify", "verify": {"tolerances": {"nope": 1.0}}}, "u.json")
    assert main(["verify", "--config", unknown, "--out", str(out)]) == EXIT_CONFIG


def test_cli_scan_tau_two_rows(tmp_path):
    cfg = _write(tmp_path, {"pipeline": "scan-tau", "output": str(tmp_path / "o"),
                            "diffusion": SMALL, "scan": {"taus": [1.0, 0.5]}})
    assert main(["scan-tau", "--config", cfg]) == EXIT_OK
    rows = _read_csv(tmp_path / "o" / "scan_tau.csv")
    assert [int(r["k"]) for r in rows] == [25, 13]
    assert list(rows[0]) == ["tau", "k", "k_effective", "error", "mse", "rho_max"]
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["exit_status"] == 0 and len(manifest["config_sha256"]) == 64
    assert manifest["seeds"]["master"] == 0
    # --tau overrides the list with a single row
    assert main(["scan-tau", "--config", cfg, "--tau", "0.5", "--seed", "3"]) == EXIT_OK
    assert [int(r["k"]) for r in _read_csv(tmp_path / "o" / "scan_tau.csv")] == [13]
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seeds"]["master"] == 3


def test_cli_solve_diffusion_outputs(tmp_path):
    cfg = _write(tmp_path, {"pipeline": "solve-diffusion", "output": str(tmp_path / "o"), "compare_reference": True,
                            "diffusion": {**SMALL, "tau": 1.0, "terms": 30}})
    assert main(["solve-diffusion", "--config", cfg]) == EXIT_OK
    out = tmp_path / "o"
    for name in ("solve_report.json", "kl_spectrum.csv", "trajectory.csv", "reference_trajectory.csv",
                 "summary.json", "manifest.json"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["error"] <= 1e-8
    rows = _read_csv(out / "trajectory.csv")
    assert len(rows) == 4 * 25 and list(rows[0]) == ["t", "x", "y", "value"]


def test_cli_guard_failure_exit_code(tmp_path, capsys):
    # non-elliptic draws (kept under "warn") with a large time step push rho past 1
    doc = {"pipeline": "solve-diffusion", "output": str(tmp_path / "o"),
           "diffusion": {"n": 4, "samples": 30, "steps": 1, "t_end": 1e3, "sigma": 1.0, "mean_permeability": 1.0,
                         "ellipticity": "warn", "tau": 1.0}}
    with pytest.warns(RuntimeWarning):
        rc = main(["solve-diffusion", "--config", _write(tmp_path, doc)])
    assert rc == EXIT_NUMERIC
    assert "Neumann series diverges" in capsys.readouterr().err
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["exit_status"] == EXIT_NUMERIC and "diverges" in manifest["error"]


@pytest.mark.parametrize("pipeline,files", [
    ("solve-diffusion", ["trajectory.csv"]),
    ("solve-control", ["trace.csv", "controls.csv", "state_mean.csv"]),
])
def test_cli_thread_determinism(tmp_path, pipeline, files):
    section = ({"diffusion": {**SMALL, "samples": 40}} if pipeline == "solve-diffusion" else
               {"control": {"n": 5, "samples": 40, "steps": 4, "t_end": 0.4, "max_iter": 5}})
    outputs = {}
    for t in (1, 2, 8):
        cfg = _write(tmp_path, {"pipeline": pipeline, "output": str(tmp_path / f"t{t}"), **section})
        assert main([pipeline, "--config", cfg, "--threads", str(t)]) == EXIT_OK
        outputs[t] = [(tmp_path / f"t{t}" / f).read_bytes() for f in files]
    assert outputs[1] == outputs[2] == outputs[8]


def test_cli_compress(tmp_path):
    rng = np.random.default_rng(1)
    basis = rng.standard_normal((6, 2))
    members = [basis @ rng.standard_normal((2, 6)) for _ in range(5)]
    io.write_collection(tmp_path / "coll", members)
    cfg = _write(tmp_path, {"pipeline": "compress", "output": str(tmp_path / "o"),
                            "compress": {"collection": "coll", "tau": 0.5, "write_factors": True}})
    assert main(["compress", "--config", cfg]) == EXIT_OK
    report = json.loads((tmp_path / "o" / "compression_report.json").read_text())
    assert report["members"] == 5 and report["relative_rmsre"] <= 1e-10
    basis_out = io.read_matrix(tmp_path / "o" / "basis.bin")
    assert basis_out.shape == (6, 3)
    factors, _ = io.read_collection(tmp_path / "o" / "factors")
    for b, v in zip(members, factors):
        assert np.allclose(basis_out @ v.T, b, atol=1e-10)
    spectrum = _read_csv(tmp_path / "o" / "gram_spectrum.csv")
    assert len(spectrum) == 6 and float(spectrum[-1]["cumulative_share"]) == pytest.approx(1.0)
    missing = _write(tmp_path, {"pipeline": "compress", "compress": {"collection": "none"}}, "m.json")
    assert main(["compress", "--config", missing, "--out", str(tmp_path / "o2")]) == EXIT_CONFIG
