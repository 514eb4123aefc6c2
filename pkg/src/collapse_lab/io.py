"""File formats: checkpoint JSON, trace CSV and feature-dump CSV."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DimensionError
from .ufm import TRACE_COLUMNS, Hyper, UfmState


def state_to_dict(state: UfmState, K: int, d: int, n: int) -> dict:
    return {"K": K, "d": d, "n": n, "W": state.W.tolist(), "H": state.H.tolist(), "b": state.b.tolist()}


def save_checkpoint(path, state: UfmState, hyper: Hyper):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(state_to_dict(state, hyper.K, hyper.d, hyper.n), fh)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns ``(state, (K, d, n))``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    missing = {"K", "d", "n", "W", "H", "b"} - set(doc)
    if missing:
        raise ConfigError(f"{path}: checkpoint lacks {sorted(missing)}")
    K, d, n = int(doc["K"]), int(doc["d"]), int(doc["n"])
    try:
        state = UfmState(np.array(doc["W"], dtype=np.float64), np.array(doc["H"], dtype=np.float64),
                         np.array(doc["b"], dtype=np.float64))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if state.W.shape != (K, d) or state.H.shape != (d, n * K) or state.b.shape != (K,):
        raise DimensionError(f"{path}: arrays do not match K={K}, d={d}, n={n}")
    return state, (K, d, n)


def write_trace(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in r.items()} for r in reader]


def write_features(path, X, labels):
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{j}" for j in range(X.shape[1])])
        for lab, row in zip(labels, X):
            writer.writerow([int(lab)] + [repr(float(v)) for v in row])


def read_features(path):
    """Read a ``label,f0,f1,...`` dump; returns ``(X, labels)`` with X of shape N x d."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty feature file") from None
        if not header or header[0].strip() != "label" or any(
                h.strip() != f"f{j}" for j, h in enumerate(header[1:])):
            raise ConfigError(f"{path}: header must be 'label,f0,f1,...'")
        labels, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ConfigError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                labels.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    if not np.all(np.isfinite(X)):
        raise ConfigError(f"{path}: non-finite feature values")
    return X, np.array(labels)
