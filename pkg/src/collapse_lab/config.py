"""Run and sweep configuration documents (JSON)."""

from __future__ import annotations

import copy
import itertools
import json
from dataclasses import dataclass

from .exceptions import ConfigError
from .losses import LossSpec
from .ufm import Hyper, TrainConfig

_SECTIONS = {
    "hyper": {"K", "d", "n", "lambda_w", "lambda_h", "lambda_b"},
    "loss": {"kind", "gamma", "alpha", "kappa", "beta"},
    "train": {"init_sigma", "lr", "momentum", "max_iters", "log_every", "seed",
              "freeze_w_as_etf", "grad_tol", "etf_row_norm"},
    "output": {"trace_path", "checkpoint_path"},
}


@dataclass
class RunConfig:
    train: TrainConfig
    trace_path: str | None = None
    checkpoint_path: str | None = None

    @property
    def hyper(self) -> Hyper:
        return self.train.hyper


def _check_keys(doc, allowed, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _samples_per_class(n, K):
    if isinstance(n, list):
        if len(n) != K:
            raise ConfigError(f"hyper.n lists {len(n)} class sizes for K={K}")
        if len(set(n)) != 1:
            raise ConfigError(f"unbalanced classes {n}: only balanced data is supported")
        n = n[0]
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise ConfigError("hyper.n must be a positive integer")
    return n


def parse_hyper(doc: dict, loss_doc: dict | None = None) -> Hyper:
    _check_keys(doc, _SECTIONS["hyper"], "hyper")
    loss_doc = loss_doc or {}
    _check_keys(loss_doc, _SECTIONS["loss"], "loss")
    missing = {"K", "d", "n", "lambda_w", "lambda_h"} - set(doc)
    if missing:
        raise ConfigError(f"hyper is missing {sorted(missing)}")
    try:
        K = int(doc["K"])
        return Hyper(K=K, d=int(doc["d"]), n=_samples_per_class(doc["n"], K),
                     lambda_w=float(doc["lambda_w"]), lambda_h=float(doc["lambda_h"]),
                     lambda_b=float(doc.get("lambda_b", 0.0)), loss=LossSpec(**loss_doc))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def parse_run_config(doc: dict) -> RunConfig:
    _check_keys(doc, set(_SECTIONS), "config")
    if "hyper" not in doc:
        raise ConfigError("config needs a 'hyper' block")
    hyper = parse_hyper(doc["hyper"], doc.get("loss"))
    train = doc.get("train", {})
    _check_keys(train, _SECTIONS["train"], "train")
    out = doc.get("output", {})
    _check_keys(out, _SECTIONS["output"], "output")
    try:
        tc = TrainConfig(hyper=hyper, **train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not isinstance(tc.seed, int) or tc.seed < 0 or tc.seed >= 2**64:
        raise ConfigError("train.seed must be an unsigned 64-bit integer")
    return RunConfig(tc, out.get("trace_path"), out.get("checkpoint_path"))


def load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc


def load_run_config(path) -> RunConfig:
    return parse_run_config(load_json(path))


# sweeps ---------------------------------------------------------------------


def set_dotted(doc: dict, key: str, value):
    section, _, name = key.partition(".")
    if section not in _SECTIONS or name not in _SECTIONS[section]:
        raise ConfigError(f"sweep key {key!r} is not a known 'section.field'")
    doc.setdefault(section, {})[name] = value


def expand_sweep(doc: dict):
    """Yield ``(cell_id, assignment, run_doc)`` over the cartesian product, in declaration order."""
    _check_keys(doc, {"base", "grid", "output"}, "sweep")
    base = doc.get("base", {})
    grid = doc.get("grid", {})
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("sweep needs a non-empty 'grid' object")
    keys = list(grid)
    for key in keys:
        if not isinstance(grid[key], list) or not grid[key]:
            raise ConfigError(f"grid entry {key!r} must be a non-empty list")
    for cell_id, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        run = copy.deepcopy(base)
        assignment = dict(zip(keys, values))
        for k, v in assignment.items():
            set_dotted(run, k, v)
        yield cell_id, assignment, run
