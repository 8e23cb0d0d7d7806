"""Shared plumbing for the experiment runners: argument parsing and JSON output."""

import argparse
import json
from pathlib import Path

import numpy as np


def parser(description, **defaults):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs")
    for name, value in defaults.items():
        p.add_argument(f"--{name.replace('_', '-')}", type=type(value), default=value)
    return p


def save(result: dict, out: str, name: str) -> Path:
    """Write the JSON-friendly part of ``result`` to ``out/name.json`` and echo it."""
    keep = {}
    for k, v in result.items():
        if isinstance(v, np.ndarray):
            keep[k] = v.tolist()
        elif isinstance(v, (int, float, str, dict, list)) or v is None:
            keep[k] = v
    path = Path(out) / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(keep, indent=2) + "\n")
    for k in ("likelihood_ratio_pct", "model_per_event_ll", "oracle_per_event_ll", "min_intensity", "max_intensity", "seconds"):
        if k in keep:
            print(f"{k}: {keep[k]}")
    print(f"wrote {path}")
    return path


def log_epoch(row):
    print(f"epoch {row['epoch']:3d}  train {row['train_nll']:.5f}  valid {row['valid_nll']:.5f}  "
          f"lr {row['lr']:.2e}  {row['seconds']:.1f}s", flush=True)
