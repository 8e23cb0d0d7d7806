"""Command-line entry point: ``s2p2 {simulate,train,eval,trace,bench}``.

Every run writes its outputs plus a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .events import EventSequence, ParseError, ValidationError, load_jsonl, save_jsonl
from .evaluate import evaluate
from .model import S2P2Config, S2P2Model, intensity_trace
from .simulate import make_process, simulate_dataset
from .train import NumericalError, TrainConfig, train

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
PROCESSES = ("hawkes", "self-correcting", "square-wave", "long-range", "random-hawkes-k3")
PROCESS_FLAGS = {
    "hawkes": ("k", "nu", "alpha", "beta"),
    "self-correcting": ("a", "b"),
    "square-wave": ("low", "high", "period", "duty", "tail_rate", "t_tail"),
    "long-range": ("distractor_rate", "trigger_rate", "delay_mean", "delay_var"),
    "random-hawkes-k3": ("param_seed",),
}


# --- helpers ---------------------------------------------------------------------------


def _build_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_manifest(out: Path, args, started: float, inputs=(), outputs=(), seeds=None, config=None) -> None:
    echo = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "subcommand": args.command,
        "argv": sys.argv[1:],
        "arguments": echo,
        "config": config,
        "seeds": seeds or {},
        "version": _build_version(),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_seconds": time.perf_counter() - started,
    }
    _write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, default=str) + "\n")


def parse_kv_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple) or like is None:  # None: optional tuple such as timescale_range
        if value.lower() == "none":
            return None
        return tuple(float(v) for v in value.split(","))
    return value


def split_config(raw: dict, num_marks: int):
    """Route flat keys to the model and training configs (``seed`` feeds both)."""
    model_defaults = dataclasses.asdict(S2P2Config(num_marks=num_marks))
    train_defaults = dataclasses.asdict(TrainConfig())
    model_kw, train_kw = {}, {}
    for key, value in raw.items():
        if key == "num_marks":
            raise ValidationError("num_marks comes from the data, not the config")
        known = False
        if key in model_defaults:
            model_kw[key] = _coerce(value, model_defaults[key])
            known = True
        if key in train_defaults:
            train_kw[key] = _coerce(value, train_defaults[key])
            known = True
        if not known:
            raise ValidationError(f"unknown config key {key!r}")
    return S2P2Config(num_marks=num_marks, **model_kw), TrainConfig(**train_kw)


def apply_threads(n) -> int:
    import numba

    if n is None:
        env = os.environ.get("S2P2_THREADS")
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise ValidationError("--threads must be positive")
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return numba.get_num_threads()


# --- subcommands -------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    raw = parse_kv_file(args.params) if args.params else {}
    for flag in {f for flags in PROCESS_FLAGS.values() for f in flags}:
        value = getattr(args, flag, None)
        if value is not None:
            raw[flag] = value
    extra = set(raw) - set(PROCESS_FLAGS[args.process])
    if extra:
        raise ValidationError(f"parameters {sorted(extra)} do not apply to {args.process}")
    kwargs = {}
    for key, value in raw.items():
        if key in ("k", "param_seed"):
            kwargs[key] = int(value)
        elif key == "nu" and isinstance(value, str) and "," in value:
            kwargs[key] = [float(v) for v in value.split(",")]
        else:
            kwargs[key] = float(value)
    if args.n < 0:
        raise ValidationError("--n must be nonnegative")
    proc = make_process(args.process, **kwargs)
    dataset, oracle = simulate_dataset(proc, args.n, args.T, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_path, oracle_path = out / "data.jsonl", out / "oracle.csv"
    save_jsonl(dataset, data_path)
    rows = "".join(f"{j},{float(v)!r}\n" for j, v in enumerate(oracle))
    _write_atomic(oracle_path, "sequence_index,loglik\n" + rows)
    params = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in vars(proc.params).items()}
    write_manifest(
        out, args, started, outputs=[data_path, oracle_path],
        seeds={"base": args.seed, "per_sequence": "(seed, index)"},
        config={"process": args.process, "params": params, "T": args.T if args.T is not None else proc.default_T},
    )
    print(f"wrote {len(dataset)} sequences ({dataset.num_events} events) to {data_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.perf_counter()
    train_set = load_jsonl(args.train)
    valid_set = load_jsonl(args.valid, train_set.num_marks) if args.valid else None
    raw = parse_kv_file(args.config) if args.config else {}
    model_cfg, train_cfg = split_config(raw, train_set.num_marks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(row):
        print(
            f"epoch {row['epoch']:3d}  train {row['train_nll']:.4f}  valid {row['valid_nll']:.4f}  "
            f"lr {row['lr']:.2e}  {row['seconds']:.1f}s",
            flush=True,
        )

    model = S2P2Model.init(model_cfg)
    try:
        model, report = train(model, train_set, valid_set, train_cfg, out_dir=out, log=log)
    finally:
        write_manifest(
            out, args, started, inputs=[p for p in (args.train, args.valid, args.config) if p],
            outputs=[out / "best.ckpt.json", out / "train_log.csv"],
            seeds={"model": model_cfg.seed, "train": train_cfg.seed},
            config={"model": dataclasses.asdict(model_cfg), "train": dataclasses.asdict(train_cfg), "raw": raw},
        )
    print(f"best valid NLL {report.best_valid_nll:.4f} at epoch {report.best_epoch}; checkpoint {report.best_checkpoint}")
    return EXIT_OK


def read_oracle_csv(path) -> np.ndarray:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    if rows and ("sequence_index" not in rows[0] or "loglik" not in rows[0]):
        raise ParseError(f"{path}: expected columns sequence_index, loglik")
    rows.sort(key=lambda r: int(r["sequence_index"]))
    return np.array([float(r["loglik"]) for r in rows])


def cmd_eval(args) -> int:
    started = time.perf_counter()
    model = S2P2Model.load(args.checkpoint)
    data = load_jsonl(args.data, model.num_marks)
    if data.num_marks != model.num_marks:
        raise ValidationError(f"data has K={data.num_marks}, checkpoint has K={model.num_marks}")
    oracle = read_oracle_csv(args.oracle) if args.oracle else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(
        model, data, mc_points=args.mc_points, oracle_ll=oracle, horizon=args.horizon,
        bins=args.bins, top_n=args.top_n, seed=args.seed, curves_dir=out,
    )
    report.write(out / "report.json")
    write_manifest(
        out, args, started, inputs=[p for p in (args.checkpoint, args.data, args.oracle) if p],
        outputs=[out / "report.json", out / "pce_curve.csv", out / "ece_curve.csv"], seeds={"mc": args.seed},
    )
    print(report.to_json())
    return EXIT_OK


def cmd_trace(args) -> int:
    started = time.perf_counter()
    model = S2P2Model.load(args.checkpoint)
    if args.empty:
        if args.t_end is None:
            raise ValidationError("--empty needs --t-end")
        seq = EventSequence([], [], args.t_end, args.t_start or 0.0)
    else:
        if not args.data:
            raise ValidationError("give --data with --index, or --empty")
        data = load_jsonl(args.data, model.num_marks)
        if not 0 <= args.index < len(data):
            raise ValidationError(f"--index {args.index} out of range for {len(data)} sequences")
        seq = data[args.index]
    lo = seq.t_start if args.t_start is None else args.t_start
    hi = seq.t_end if args.t_end is None else args.t_end
    if not seq.t_start <= lo < hi <= seq.t_end:
        raise ValidationError(f"window [{lo}, {hi}] must lie inside [{seq.t_start}, {seq.t_end}]")
    grid = np.linspace(lo, hi, args.grid_points)
    lam = intensity_trace(model, seq, grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "trace.csv"
    header = ["t"] + [f"lambda_{k}" for k in range(model.num_marks)] + ["lambda_total"]
    lines = [",".join(header)]
    for i, t in enumerate(grid):
        vals = [repr(float(t))] + [repr(float(v)) for v in lam[:, i]] + [repr(float(lam[:, i].sum()))]
        lines.append(",".join(vals))
    _write_atomic(path, "\n".join(lines) + "\n")
    write_manifest(out, args, started, inputs=[p for p in (args.checkpoint, args.data) if p], outputs=[path])
    print(f"wrote {len(grid)} grid points to {path}")
    return EXIT_OK


def bench_lengths(spec: str):
    """``"8..524288"`` (powers of two) or a comma list."""
    if ".." in spec:
        lo, hi = (int(s) for s in spec.split(".."))
        if lo < 1 or hi < lo:
            raise ValidationError(f"bad length range {spec!r}")
        out, n = [], lo
        while n <= hi:
            out.append(n)
            n *= 2
        return out
    return [int(s) for s in spec.split(",")]


def cmd_bench(args) -> int:
    from . import bench

    started = time.perf_counter()
    threads = apply_threads(args.threads)
    lengths = bench_lengths(args.lengths)
    cfg = S2P2Config(num_marks=args.marks, hidden=args.hidden, state=args.state, layers=args.layers, seed=args.seed)
    model = S2P2Model.init(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for n in lengths:
        row = bench.bench_length(model, n, args.mode, args.repeats, args.seed, args.mc_points)
        row["threads"] = threads
        rows.append(row)
        print(
            f"N={n:7d} {args.mode}: {row['median_seconds']:.4g}s  scan seq {row['scan_sequential_seconds']:.4g}s  "
            f"par {row['scan_parallel_seconds']:.4g}s  ops seq {row['ops_sequential']} par {row['ops_parallel']}",
            flush=True,
        )
    path = out / "bench.csv"
    fields = list(rows[0]) if rows else ["length"]
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    tmp.replace(path)
    write_manifest(out, args, started, outputs=[path], seeds={"base": args.seed}, config=dataclasses.asdict(cfg))
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="s2p2", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $S2P2_THREADS or all)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="draw sequences from a ground-truth process")
    s.add_argument("--process", required=True, choices=PROCESSES)
    s.add_argument("--params", help="key = value file of process parameters")
    s.add_argument("--n", type=int, required=True, help="number of sequences")
    s.add_argument("--T", type=float, default=None, help="window end (process default if omitted)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--k", type=int)
    s.add_argument("--nu", type=str)
    for name in ("alpha", "beta", "a", "b", "low", "high", "period", "duty", "tail_rate", "t_tail",
                 "distractor_rate", "trigger_rate", "delay_mean", "delay_var"):
        s.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)
    s.add_argument("--param-seed", dest="param_seed", type=int)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="fit a model by maximum likelihood")
    t.add_argument("--config", help="key = value file (model and training settings)")
    t.add_argument("--train", required=True)
    t.add_argument("--valid")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mc-points", type=int, default=100)
    e.add_argument("--oracle", help="CSV of per-sequence oracle log-likelihoods")
    e.add_argument("--horizon", type=float, default=None)
    e.add_argument("--bins", type=int, default=20)
    e.add_argument("--top-n", type=int, default=3)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("trace", help="intensities on an equidistant grid")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data")
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--empty", action="store_true", help="condition on an empty history")
    r.add_argument("--grid-points", type=int, default=1000)
    r.add_argument("--t-start", type=float, default=None)
    r.add_argument("--t-end", type=float, default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_trace)

    b = sub.add_parser("bench", help="wall time against sequence length")
    b.add_argument("--lengths", default="8..262144")
    b.add_argument("--mode", choices=("condition", "loglik"), default="condition")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--hidden", type=int, default=8)
    b.add_argument("--state", type=int, default=8)
    b.add_argument("--layers", type=int, default=1)
    b.add_argument("--marks", type=int, default=2)
    b.add_argument("--mc-points", type=int, default=2)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command != "bench":
            apply_threads(args.threads)
        return args.func(args)
    except (ValidationError, ParseError, ValueError, FileNotFoundError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
