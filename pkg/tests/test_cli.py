import csv
import json
import subprocess
import sys

import pytest

from s2p2.cli import bench_lengths, main, parse_kv_file, split_config
from s2p2.events import ParseError, ValidationError, load_jsonl


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("simulate", "--process", "hawkes", "--n", 6, "--T", 10, "--seed", 1, "--out", root / "data") == 0
    (root / "cfg.txt").write_text("hidden = 4\nstate = 4\nlayers = 1\nepochs = 2  # short\nbatch_size = 3\nseed = 5\n")
    data = root / "data" / "data.jsonl"
    assert run("train", "--config", root / "cfg.txt", "--train", data, "--valid", data, "--out", root / "run") == 0
    return root


def test_simulate_outputs_and_determinism(tmp_path):
    args = ["simulate", "--process", "hawkes", "--k", 1, "--nu", 0.5, "--alpha", 0.5, "--beta", 1.0, "--n", 3, "--T", 20, "--seed", 1]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    a, b = (tmp_path / d / "data.jsonl" for d in "ab")
    assert a.read_bytes() == b.read_bytes()
    assert len(load_jsonl(a)) == 3
    rows = list(csv.DictReader((tmp_path / "a" / "oracle.csv").open()))
    assert [int(r["sequence_index"]) for r in rows] == [0, 1, 2]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["subcommand"] == "simulate" and manifest["seeds"]["base"] == 1
    assert manifest["config"]["params"]["nu"] == [0.5]
    assert "version" in manifest and manifest["wall_seconds"] >= 0


@pytest.mark.parametrize("process", ["self-correcting", "square-wave", "long-range", "random-hawkes-k3"])
def test_simulate_every_process(tmp_path, process):
    assert run("simulate", "--process", process, "--n", 2, "--seed", 3, "--out", tmp_path) == 0
    ds = load_jsonl(tmp_path / "data.jsonl")
    oracle = list(csv.DictReader((tmp_path / "oracle.csv").open()))
    assert len(ds) == 2 and len(oracle) == 2


def test_simulate_zero_sequences(tmp_path):
    assert run("simulate", "--process", "hawkes", "--n", 0, "--out", tmp_path) == 0
    lines = (tmp_path / "data.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["num_marks"] == 1


def test_simulate_params_file(tmp_path):
    (tmp_path / "p.txt").write_text("nu = 0.2\n# comment\nalpha = 0.1\n")
    assert run("simulate", "--process", "hawkes", "--params", tmp_path / "p.txt", "--n", 1, "--out", tmp_path / "o") == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["params"]["nu"] == [0.2]


def test_invalid_inputs_exit_2(tmp_path, capsys):
    assert run("simulate", "--process", "hawkes", "--a", 1.0, "--n", 1, "--out", tmp_path) == 2
    assert run("simulate", "--process", "hawkes", "--n", -1, "--out", tmp_path) == 2
    assert run("train", "--train", tmp_path / "missing.jsonl", "--out", tmp_path) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_process_is_rejected():
    with pytest.raises(SystemExit) as err:
        run("simulate", "--process", "poisson", "--n", 1, "--out", "x")
    assert err.value.code == 2


def test_train_outputs(trained):
    run_dir = trained / "run"
    assert (run_dir / "best.ckpt.json").exists()
    log = list(csv.DictReader((run_dir / "train_log.csv").open()))
    assert len(log) == 2
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["config"]["model"]["hidden"] == 4 and manifest["config"]["train"]["epochs"] == 2
    assert manifest["seeds"] == {"model": 5, "train": 5}


def test_train_nan_exits_3(tmp_path, trained):
    (tmp_path / "cfg.txt").write_text("hidden = 2\nstate = 2\nlayers = 1\nepochs = 3\nbatch_size = 2\nlr = 1e300\n")
    data = trained / "data" / "data.jsonl"
    code = run("train", "--config", tmp_path / "cfg.txt", "--train", data, "--valid", data, "--out", tmp_path / "r")
    assert code == 3
    assert (tmp_path / "r" / "manifest.json").exists()


def test_eval_with_oracle(trained):
    out = trained / "eval"
    code = run(
        "eval", "--checkpoint", trained / "run" / "best.ckpt.json", "--data", trained / "data" / "data.jsonl",
        "--oracle", trained / "data" / "oracle.csv", "--mc-points", 5, "--out", out,
    )
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert abs(report["per_event_total_ll"] - report["time_ll"] - report["mark_ll"]) < 1e-9
    assert report["likelihood_ratio_vs_oracle"] > 0 and "pce_definition" in report
    assert (out / "pce_curve.csv").exists() and (out / "ece_curve.csv").exists()


def test_eval_mark_mismatch_exits_2(tmp_path, trained):
    run("simulate", "--process", "long-range", "--n", 1, "--out", tmp_path)
    code = run("eval", "--checkpoint", trained / "run" / "best.ckpt.json", "--data", tmp_path / "data.jsonl", "--out", tmp_path / "e")
    assert code == 2


def test_trace(trained):
    ckpt = trained / "run" / "best.ckpt.json"
    assert run("trace", "--checkpoint", ckpt, "--empty", "--t-end", 5, "--grid-points", 11, "--out", trained / "t1") == 0
    rows = list(csv.DictReader((trained / "t1" / "trace.csv").open()))
    assert len(rows) == 11 and float(rows[-1]["t"]) == 5.0
    assert all(float(r["lambda_0"]) > 0 for r in rows)
    assert run("trace", "--checkpoint", ckpt, "--data", trained / "data" / "data.jsonl", "--index", 2, "--out", trained / "t2") == 0
    assert len(list(csv.DictReader((trained / "t2" / "trace.csv").open()))) == 1000
    assert run("trace", "--checkpoint", ckpt, "--data", trained / "data" / "data.jsonl", "--index", 99, "--out", trained / "t3") == 2
    assert run("trace", "--checkpoint", ckpt, "--empty", "--out", trained / "t4") == 2


def test_bench(tmp_path):
    assert run("--threads", 1, "bench", "--lengths", "8,64", "--repeats", 1, "--hidden", 2, "--state", 2, "--out", tmp_path) == 0
    rows = list(csv.DictReader((tmp_path / "bench.csv").open()))
    assert [int(r["length"]) for r in rows] == [8, 64]
    assert all(float(r["max_scan_error"]) < 1e-10 for r in rows)
    # one combine per step (N events plus the tail) and per state channel
    assert all(int(r["ops_sequential"]) == (int(r["length"]) + 1) * 2 for r in rows)


def test_bench_lengths():
    assert bench_lengths("8..64") == [8, 16, 32, 64]
    assert bench_lengths("3,5") == [3, 5]
    with pytest.raises(ValidationError):
        bench_lengths("64..8")


def test_config_routing(tmp_path):
    model_cfg, train_cfg = split_config({"hidden": "4", "lr": "0.5", "seed": "9", "input_dependent": "false"}, 2)
    assert model_cfg.hidden == 4 and model_cfg.seed == 9 and not model_cfg.input_dependent
    assert train_cfg.lr == 0.5 and train_cfg.seed == 9
    model_cfg, _ = split_config({"timescale_range": "0.01, 1"}, 2)
    assert model_cfg.timescale_range == (0.01, 1.0)
    with pytest.raises(ValidationError):
        split_config({"bogus": "1"}, 2)
    with pytest.raises(ValidationError):
        split_config({"num_marks": "3"}, 2)
    (tmp_path / "bad.txt").write_text("hidden 4\n")
    with pytest.raises(ParseError):
        parse_kv_file(tmp_path / "bad.txt")


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "s2p2", "simulate", "--process", "square-wave", "--n", "1", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "data.jsonl").exists()
