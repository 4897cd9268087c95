import csv
import io
import json
import subprocess
import sys

import pytest

from flowforge.cli import build_parser, run
from flowforge.multiindex import PreMultiIndex

SUBCOMMANDS = ["params", "enumerate", "flow", "counterterms", "cumulants", "kernels-verify", "simulate", "coeffs"]


def _run(capsys, *argv):
    code = run(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_params_examples(capsys):
    code, out, _ = _run(capsys, "params", "--alpha", "1/2", "--n", "1")
    assert code == 0 and out == "Gamma=8\ndelta=3/4\nkappa0=1/24\n"
    code, out, _ = _run(capsys, "params", "--alpha", "1", "--n", "2", "--format", "json")
    doc = json.loads(out)
    assert (doc["Gamma"], doc["delta"], doc["kappa0"]) == (4, "3/2", "3/20")


def test_params_flags_window(capsys):
    code, out, _ = _run(capsys, "params", "--alpha", "1/5")
    assert code == 0 and "Gamma=20" in out and "warning" in out


def test_enumerate_byte_stable(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path in (a, b):
        assert run(["enumerate", "--alpha", "1", "--n", "1", "--k", "2", "--format", "json", "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    items = [PreMultiIndex.from_json(o) for o in json.loads(a.read_text())]
    assert max(x.order for x in items) == 2 and len(set(items)) == len(items)
    code, out, _ = _run(capsys, "enumerate", "--alpha", "1", "--k", "1", "--format", "csv")
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["a_json", "order", "size", "scaling"]
    assert len(rows) - 1 == sum(1 for x in items if x.order <= 1)


def test_flow_json(capsys):
    code, out, _ = _run(capsys, "flow", "--alpha", "1/2", "--max-order", "2")
    doc = json.loads(out)
    assert code == 0 and doc["max_order"] == 2
    node = next(x for x in doc["nodes"] if x["a"]["h"] == [1, 1] and not any(x["a"][k] for k in "bcdefg"))
    assert len(node["terms"]) == 1


def test_counterterms_csv(capsys):
    code, out, _ = _run(capsys, "counterterms", "--alpha", "1/2")
    rows = list(csv.reader(io.StringIO(out)))
    assert code == 0
    assert rows[0] == ["a_json", "l_json", "order", "scaling_num", "scaling_den", "ell", "signature"]
    assert all(int(r[3]) <= 0 for r in rows[1:])


def test_cumulants_fifth_exits_zero(capsys):
    code, out, err = _run(capsys, "cumulants", "--alpha", "1/5", "--n", "1")
    doc = json.loads(out)
    assert code == 0 and doc["paper_consistent"] is False and doc["violations"]
    code, out, _ = _run(capsys, "cumulants", "--alpha", "1/2", "--pmax", "2", "--order-cap", "2")
    assert json.loads(out)["paper_consistent"] is True


@pytest.mark.parametrize("argv,code", [
    (["params", "--alpha", "0"], 1),
    (["params", "--alpha", "3/2"], 1),
    (["params", "--alpha", "x/2"], 1),
    (["params"], 1),
    (["bogus"], 1),
    (["flow", "--alpha", "1/8"], 2),
    (["enumerate", "--alpha", "1", "--k", "6", "--cap", "10"], 2),
    (["coeffs", "--alpha", "1/2", "--grid", "64", "--eps", "1/64", "--no-plots"], 3),
])
def test_exit_codes(argv, code, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    got, _, err = _run(capsys, *argv)
    assert got == code and err.startswith("error:")


def test_domain_message_names_precondition(capsys):
    _, _, err = _run(capsys, "params", "--alpha", "3/2")
    assert "alpha must lie in (0, 1]" in err


def test_help_documents_units(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert sorted(sub.choices) == sorted(SUBCOMMANDS)
    for name in SUBCOMMANDS:
        with pytest.raises(SystemExit) as exc:
            run([name, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        assert '"p/q"' in text and "or decimals" in text and "integers" in text


def test_kernels_verify_csv(capsys, tmp_path):
    code, out, _ = _run(capsys, "kernels-verify", "--alpha", "1/2", "--n", "1", "--grid", "128",
                        "--mus", "1/4,1/8,1/16")
    header = out.splitlines()[0].split(",")
    assert code == 0 and header[:5] == ["estimate_id", "mu", "measured", "predicted_exponent", "fitted_exponent"]
    assert run(["kernels-verify", "--alpha", "1/2", "--grid", "128", "--mus", "1/4,1/8,1/16",
                "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "estimates.csv").read_text() == out
    assert (tmp_path / "plots" / "estimates.svg").read_text().lstrip().startswith("<?xml")


SMALL = """# smoke run
alpha = 1/2
n = 1
grid = 64
T = 0.01
eps_ladder = 1/4, 1/8
seed = 3
h = cos
g = const[1/4]
counterterm_mode = leading
mc_samples = 2
"""


def test_simulate_outputs_reproducible(tmp_path, monkeypatch):
    monkeypatch.setenv("FLOWFORGE_THREADS", "1")
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["simulate", "--config", str(cfg), "--out-dir", str(out)]) == 0
        outs.append(out)
    files = sorted(p.relative_to(outs[0]).as_posix() for p in outs[0].rglob("*") if p.is_file())
    assert files == ["plots/convergence.svg", "report.json", "tables/constants.csv",
                     "tables/pairs.csv", "tables/per_eps.csv"]
    for f in files:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    doc = json.loads((outs[0] / "report.json").read_text())
    assert doc["config"]["seed"] == 3 and doc["config"]["mc_samples"] == 2
    assert len(doc["pairs"]["on"]) == 1 and not list(tmp_path.rglob(".*.tmp"))


@pytest.mark.parametrize("text,code", [
    ("alpha = 1/2\ngrid = 64\nT = 0.01\n", 1),  # missing ladder
    (SMALL + "colour = red\n", 1),
    (SMALL.replace("grid = 64", "grid = 48"), 1),
    (SMALL.replace("1/4, 1/8", "1/8, 1/4"), 1),
    (SMALL.replace("mc_samples = 2", "mc_samples = two"), 1),
    (SMALL.replace("1/4, 1/8", "1/4, 1/64"), 3),
])
def test_simulate_bad_config(tmp_path, text, code, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(text)
    got, _, err = _run(capsys, "simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "o"))
    assert got == code and "error:" in err
    assert not (tmp_path / "o" / "report.json").exists()


def test_coeffs(tmp_path):
    assert run(["coeffs", "--alpha", "1/2", "--grid", "256", "--eps", "1/8,1/16,1/32",
                "--out-dir", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "coeffs.json").read_text())
    assert abs(doc["C1_slope"] - doc["predicted_slope"]) < 0.02
    rows = (tmp_path / "constants.csv").read_text().splitlines()
    assert rows[0] == "eps,C1,C2" and len(rows) == 4 and "np." not in rows[1]
    assert (tmp_path / "plots" / "constants.svg").exists()


def test_console_script_entry():
    res = subprocess.run([sys.executable, "-m", "flowforge.cli", "params", "--alpha", "3/4"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and res.stdout.startswith("Gamma=5\n")
