import csv
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from collapse_lab import io, ufm
from collapse_lab.certify import construct_global_solution, rho_oracle
from collapse_lab.cli import main
from collapse_lab.ufm import Hyper, UfmState

from conftest import REFERENCE

SMALL = {"hyper": {"K": 3, "d": 5, "n": 2, "lambda_w": 0.01, "lambda_h": 0.01, "lambda_b": 0.01},
         "loss": {"kind": "CE"},
         "train": {"lr": 1.0, "max_iters": 3000, "log_every": 250, "seed": 3}}


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_train_writes_outputs_and_summary(tmp_path, capsys):
    cfg = write(tmp_path / "run.json", SMALL)
    code, out, _ = run(capsys, "train", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == 0
    summary = json.loads(out)
    assert {"f", "nc1", "nc2", "nc3", "nc4", "verdict"} <= set(summary)
    assert summary["verdict"] == "GlobalMin"
    assert (tmp_path / "o" / "trace.csv").read_text().startswith("iter,f,g,grad_norm,")
    state, dims = io.load_checkpoint(tmp_path / "o" / "checkpoint.json")
    assert dims == (3, 5, 2)


def test_train_output_block_and_determinism(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    doc = dict(SMALL, output={"trace_path": "a/trace.csv", "checkpoint_path": "a/ck.json"})
    cfg = write(tmp_path / "run.json", doc)
    assert run(capsys, "train", "--config", cfg)[0] == 0
    first = (tmp_path / "a" / "trace.csv").read_bytes()
    ck1 = (tmp_path / "a" / "ck.json").read_bytes()
    assert run(capsys, "train", "--config", cfg)[0] == 0
    assert (tmp_path / "a" / "trace.csv").read_bytes() == first
    assert (tmp_path / "a" / "ck.json").read_bytes() == ck1
    assert run(capsys, "train", "--config", cfg, "--seed", "11", "--out", "b")[0] == 0
    assert (tmp_path / "b" / "trace.csv").read_bytes() != first


@pytest.mark.parametrize("content,needle", [
    ('{"hyper": {', "invalid JSON"),
    ('{"hyper": {"K": 3}, "typo": 1}', "unknown key"),
    ('{"hyper": {"K": 3, "d": 3, "n": [1, 2, 1], "lambda_w": 1, "lambda_h": 1}}', "unbalanced"),
])
def test_train_config_errors(tmp_path, capsys, content, needle):
    p = tmp_path / "bad.json"
    p.write_text(content)
    code, _, err = run(capsys, "train", "--config", str(p))
    assert code == 2 and needle in err


def test_train_missing_config_file(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--config", str(tmp_path / "none.json"))
    assert code == 2 and "none.json" in err


def test_train_divergence_exit_code(tmp_path, capsys):
    doc = json.loads(json.dumps(SMALL))
    doc["train"].update(lr=1e7, momentum=0.0)
    code, _, err = run(capsys, "train", "--config", write(tmp_path / "r.json", doc))
    assert code == 3 and "iteration" in err


# certify ---------------------------------------------------------------------------

FLAGS = ["--lambda-w", "5e-3", "--lambda-h", "5e-3", "--lambda-b", "0.01"]


def checkpoint(tmp_path, name, state, hp):
    p = tmp_path / name
    io.save_checkpoint(p, state, hp)
    return str(p)


def test_certify_exit_contract(tmp_path, capsys):
    hp = Hyper(K=4, d=6, n=10, lambda_w=5e-3, lambda_h=5e-3, lambda_b=0.01)
    opt = checkpoint(tmp_path, "opt.json", construct_global_solution(hp, rho_oracle(hp).rho), hp)
    origin = checkpoint(tmp_path, "origin.json", UfmState.zeros(hp), hp)
    rand = checkpoint(tmp_path, "rand.json", ufm.random_state(hp, 0), hp)

    code, out, _ = run(capsys, "certify", "--checkpoint", opt, *FLAGS)
    doc = json.loads(out)
    assert code == 0 and doc["verdict"] == "GlobalMin"
    assert {"grad_norm", "spectral_gap", "kkt_u_residual", "kkt_v_residual", "b_residual", "nc"} <= set(doc)

    code, out, _ = run(capsys, "certify", "--checkpoint", origin, *FLAGS)
    doc = json.loads(out)
    assert code != 0 and doc["verdict"] == "StrictSaddle"
    assert doc["negative_curvature"]["measured"] == pytest.approx(doc["negative_curvature"]["predicted"], rel=1e-6)

    code, out, _ = run(capsys, "certify", "--checkpoint", rand, *FLAGS)
    assert code != 0 and json.loads(out)["verdict"] == "NotCritical"


def test_certify_fl_region_annotation(tmp_path, capsys):
    hp = Hyper(K=3, d=4, n=2, lambda_w=5e-3, lambda_h=5e-3, loss=ufm.LossSpec("FL"))
    ck = checkpoint(tmp_path, "fl.json", construct_global_solution(hp, rho_oracle(hp).rho), hp)
    code, out, _ = run(capsys, "certify", "--checkpoint", ck, "--lambda-w", "5e-3", "--lambda-h", "5e-3",
                       "--loss", "FL")
    assert code == 0 and json.loads(out)["fl_region_ok"] is True


def test_certify_config_dimension_mismatch(tmp_path, capsys):
    hp = Hyper(K=4, d=6, n=10, lambda_w=5e-3, lambda_h=5e-3)
    ck = checkpoint(tmp_path, "o.json", UfmState.zeros(hp), hp)
    cfg = write(tmp_path / "c.json", {"hyper": {"K": 3, "d": 6, "n": 10, "lambda_w": 1, "lambda_h": 1}})
    code, _, err = run(capsys, "certify", "--checkpoint", ck, "--config", cfg)
    assert code == 2 and "K=3" in err


def test_certify_missing_lambdas(tmp_path, capsys):
    hp = Hyper(K=2, d=2, n=1, lambda_w=1, lambda_h=1)
    ck = checkpoint(tmp_path, "o.json", UfmState.zeros(hp), hp)
    code, _, err = run(capsys, "certify", "--checkpoint", ck)
    assert code == 2 and "lambda" in err


# oracle / metrics / lemma / grad-check ------------------------------------------------


def test_oracle(capsys, tmp_path):
    code, out, _ = run(capsys, "oracle", "--K", "4", "--d", "16", "--n", "10", "--lambda-w", "0.01",
                       "--lambda-h", "1e-5", "--lambda-b", "0.01", "--out", str(tmp_path / "o.json"))
    doc = json.loads(out)
    assert code == 0 and set(doc) == {"rho_star", "f_star", "margin"}
    assert doc["f_star"] == pytest.approx(0.02371876133018424, rel=1e-10)
    assert json.loads((tmp_path / "o.json").read_text()) == doc


def test_oracle_mse_unsupported(capsys):
    code, _, err = run(capsys, "oracle", "--K", "3", "--d", "3", "--n", "1", "--lambda-w", "1",
                       "--lambda-h", "1", "--loss", "MSE")
    assert code == 1 and "MSE" in err


def test_metrics_collapsed_dump(tmp_path, capsys):
    hp = Hyper(K=3, d=5, n=4, lambda_w=0.01, lambda_h=0.01)
    s = construct_global_solution(hp, 2.0)
    labels = np.tile(np.arange(3), 4)
    perm = np.random.default_rng(0).permutation(12)
    io.write_features(tmp_path / "f.csv", s.H.T[perm], labels[perm])
    ck = checkpoint(tmp_path, "c.json", s, hp)
    code, out, _ = run(capsys, "metrics", str(tmp_path / "f.csv"), ck)
    doc = json.loads(out)
    assert code == 0
    assert doc["nc1"] == pytest.approx(0, abs=1e-20) and doc["nc2"] == pytest.approx(0, abs=1e-12)


def test_metrics_external_dump_and_errors(tmp_path, capsys, rng):
    X = rng.normal(size=(8, 3))
    io.write_features(tmp_path / "f.csv", X, [0, 1] * 4)
    write(tmp_path / "w.json", {"W": rng.normal(size=(2, 3)).tolist(), "b": [0.1, -0.1]})
    code, out, _ = run(capsys, "metrics", str(tmp_path / "f.csv"), str(tmp_path / "w.json"))
    assert code == 0 and all(np.isfinite(v) for v in json.loads(out).values())
    write(tmp_path / "w4.json", {"W": rng.normal(size=(2, 4)).tolist()})
    code, _, err = run(capsys, "metrics", str(tmp_path / "f.csv"), str(tmp_path / "w4.json"))
    assert code == 2 and "classifier" in err
    io.write_features(tmp_path / "u.csv", X[:7], [0, 1, 0, 1, 0, 1, 0])
    code, _, err = run(capsys, "metrics", str(tmp_path / "u.csv"), str(tmp_path / "w.json"))
    assert code == 2 and "unbalanced" in err


def test_lemma_command(capsys):
    code, out, _ = run(capsys, "lemma", "nuclear")
    doc = json.loads(out)
    assert code == 0 and doc["passed"] is True and "worst_residual" in doc
    with pytest.raises(SystemExit):
        main(["lemma", "bogus"])


def test_lemma_failure_exit(capsys, monkeypatch):
    from collapse_lab import lemmas
    monkeypatch.setitem(lemmas.SUITES, "nuclear",
                        lambda seed=0: lemmas.SuiteResult("nuclear", False, 1, 1.0, 0.0, {}))
    assert run(capsys, "lemma", "nuclear")[0] == 1


def test_grad_check_command(capsys, monkeypatch):
    code, out, _ = run(capsys, "grad-check")
    doc = json.loads(out)
    assert code == 0 and doc["max_rel_err"] <= 1e-6
    assert set(doc["per_loss"]) == {"CE", "FL", "LS", "MSE"} and doc["states_per_loss"] == 10
    import collapse_lab.cli as cli
    monkeypatch.setattr(cli, "grad_check", lambda *a, **k: 1.0)
    assert run(capsys, "grad-check")[0] == 1


# sweep ------------------------------------------------------------------------------


def sweep_doc():
    base = json.loads(json.dumps(SMALL))
    base["train"]["max_iters"] = 400
    return {"base": base, "grid": {"loss.kind": ["CE", "LS"], "hyper.lambda_w": [0.01, 0.02],
                                   "train.seed": [1]}}


def test_sweep_parallel_matches_serial(tmp_path, capsys):
    cfg = write(tmp_path / "s.json", sweep_doc())
    assert run(capsys, "sweep", "--config", cfg, "--out", str(tmp_path / "p"), "--jobs", "2")[0] == 0
    assert run(capsys, "sweep", "--config", cfg, "--out", str(tmp_path / "q"), "--jobs", "1")[0] in (0, 1)
    for name in ["aggregate.csv"] + [f"cell_{i:04d}.csv" for i in range(4)]:
        assert (tmp_path / "p" / name).read_bytes() == (tmp_path / "q" / name).read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "p" / "aggregate.csv")))
    assert [r["cell_id"] for r in rows] == ["0", "1", "2", "3"]
    assert [r["loss.kind"] for r in rows] == ["CE", "CE", "LS", "LS"]
    assert {"final_f", "gap_to_oracle", "nc1", "nc2", "nc3", "nc4"} <= set(rows[0])
    for r in rows:
        assert float(r["final_f"]) - float(r["f_star"]) == pytest.approx(float(r["gap_to_oracle"]))


def test_sweep_rejects_bad_cell_before_running(tmp_path, capsys):
    doc = sweep_doc()
    doc["grid"]["loss.kind"] = ["CE", "nope"]
    code, _, err = run(capsys, "sweep", "--config", write(tmp_path / "s.json", doc), "--out", str(tmp_path / "x"))
    assert code == 2 and "cell 2" in err
    assert not (tmp_path / "x" / "aggregate.csv").exists()


def test_sweep_records_diverged_cells(tmp_path, capsys):
    doc = sweep_doc()
    doc["grid"] = {"train.lr": [1.0, 1e7], "train.momentum": [0.0]}
    code, out, _ = run(capsys, "sweep", "--config", write(tmp_path / "s.json", doc), "--out", str(tmp_path / "d"),
                       "--jobs", "1")
    assert code == 1 and json.loads(out)["failed"] >= 1
    rows = list(csv.DictReader(open(tmp_path / "d" / "aggregate.csv")))
    assert rows[1]["status"] == "diverged"


# plumbing ---------------------------------------------------------------------------


def test_bad_flags(capsys):
    assert main(["lemma", "dpr1", "--seed", "-1"]) == 2
    assert main(["sweep", "--config", "x", "--jobs", "0"]) == 2


def test_log_env(monkeypatch, capsys, caplog):
    monkeypatch.setenv("COLLAPSE_LAB_LOG", "loud")
    assert run(capsys, "lemma", "nuclear")[0] == 0
    assert "COLLAPSE_LAB_LOG" in caplog.text


def test_log_env_debug_subprocess(tmp_path):
    cfg = write(tmp_path / "r.json", dict(SMALL, train={"max_iters": 5, "log_every": 1}))
    proc = subprocess.run([sys.executable, "-m", "collapse_lab.cli", "train", "--config", cfg, "--out",
                           str(tmp_path)], capture_output=True, text=True,
                          env={**__import__("os").environ, "COLLAPSE_LAB_LOG": "debug"})
    assert proc.returncode == 0 and "DEBUG" in proc.stderr


@pytest.mark.skipif(shutil.which("collapse-lab") is None, reason="console script not installed")
def test_console_script_reference_config(tmp_path):
    doc = {"hyper": dict(REFERENCE), "loss": {"kind": "CE"}, "train": {"seed": 0, "log_every": 5000}}
    cfg = write(tmp_path / "reference.json", doc)
    proc = subprocess.run(["collapse-lab", "train", "--config", cfg, "--out", str(tmp_path / "o")],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    summary = json.loads(proc.stdout)
    assert summary["verdict"] == "GlobalMin" and summary["nc1"] <= 1e-5


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "collapse_lab.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "certify", "oracle", "metrics", "lemma", "sweep", "grad-check"):
        assert cmd in proc.stdout
