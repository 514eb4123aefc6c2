"""``collapse-lab`` command-line harness.

Exit status: 0 on success, 1 when a check fails (certificate, lemma suite,
gradient check, sweep cell), 2 for configuration and I/O problems, 3 when
the numerics break down (divergence and friends).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import certify, config as cfg, geometry, io, lemmas
from .exceptions import CollapseLabError, ConfigError, DimensionError, NumericalFailure
from .losses import KINDS
from .ufm import Hyper, grad_check, random_state, train

log = logging.getLogger("collapse_lab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
GRAD_CHECK_TOL = 1e-6
GRAD_CHECK_STATES = 10
GRAD_CHECK_DEFAULT = {"K": 4, "d": 6, "n": 3, "lambda_w": 1e-2, "lambda_h": 1e-3, "lambda_b": 1e-2}


def _setup_logging():
    name = os.environ.get("COLLAPSE_LAB_LOG", "error").strip().lower()
    level = LOG_LEVELS.get(name)
    logging.basicConfig(level=level or logging.ERROR, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if level is None:
        log.warning("COLLAPSE_LAB_LOG=%r is not one of %s; using 'error'", name, sorted(LOG_LEVELS))


def _clean(obj):
    """Make a value strict-JSON friendly (NaN/inf become null)."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _emit(doc, out=None):
    text = json.dumps(_clean(doc), sort_keys=False)
    print(text)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")


# hyperparameters from flags and/or config -----------------------------------

_HYPER_FLAGS = ("K", "d", "n", "lambda_w", "lambda_h", "lambda_b")
_LOSS_FLAGS = ("gamma", "alpha", "kappa", "beta")


def _hyper_from_args(args, dims=None, defaults=None) -> Hyper:
    hyper_doc, loss_doc = dict(defaults or {}), {}
    if args.config:
        doc = cfg.load_json(args.config)
        if not isinstance(doc, dict) or not isinstance(doc.get("hyper", {}), dict):
            raise ConfigError(f"{args.config}: expected a JSON object with a 'hyper' object")
        hyper_doc.update(doc.get("hyper", {}))
        loss_doc = dict(doc.get("loss", {}))
    for name in _HYPER_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            hyper_doc[name] = v
    if args.loss is not None:
        loss_doc["kind"] = args.loss
    for name in _LOSS_FLAGS:
        v = getattr(args, name)
        if v is not None:
            loss_doc[name] = v
    if dims is not None:
        for key, val in zip(("K", "d", "n"), dims):
            if key in hyper_doc and int(hyper_doc[key]) != val:
                raise DimensionError(f"{key}={hyper_doc[key]} disagrees with checkpoint value {val}")
            hyper_doc[key] = val
    return cfg.parse_hyper(hyper_doc, loss_doc)


def _add_hyper_flags(p, dims=True):
    g = p.add_argument_group("hyperparameters (override --config)")
    if dims:
        g.add_argument("--K", type=int)
        g.add_argument("--d", type=int)
        g.add_argument("--n", type=int)
    g.add_argument("--lambda-w", dest="lambda_w", type=float)
    g.add_argument("--lambda-h", dest="lambda_h", type=float)
    g.add_argument("--lambda-b", dest="lambda_b", type=float)
    g.add_argument("--loss", choices=KINDS)
    for name in _LOSS_FLAGS:
        g.add_argument(f"--{name}", type=float)


# commands --------------------------------------------------------------------


def cmd_train(args) -> int:
    if not args.config:
        raise ConfigError("train needs --config")
    run = cfg.load_run_config(args.config)
    tc = run.train if args.seed is None else replace(run.train, seed=args.seed)
    trace_path, ckpt_path = run.trace_path, run.checkpoint_path
    if args.out:
        trace_path = str(Path(args.out) / "trace.csv")
        ckpt_path = str(Path(args.out) / "checkpoint.json")
    trace_path = trace_path or "trace.csv"
    ckpt_path = ckpt_path or "checkpoint.json"

    res = train(tc)
    io.write_trace(trace_path, res.trace)
    io.save_checkpoint(ckpt_path, res.state, tc.hyper)
    cert = certify.global_certificate(res.state, tc.hyper)
    last = res.trace[-1]
    _emit({"f": last.f, "nc1": last.nc1, "nc2": last.nc2, "nc3": last.nc3, "nc4": last.nc4,
           "verdict": cert.verdict, "spectral_gap": cert.spectral_gap,
           "grad_norm": last.grad_norm, "iterations": res.iterations,
           "converged": res.converged, "trace": trace_path, "checkpoint": ckpt_path})
    return EXIT_OK


def cmd_certify(args) -> int:
    if not args.checkpoint:
        raise ConfigError("certify needs --checkpoint")
    state, dims = io.load_checkpoint(args.checkpoint)
    hyper = _hyper_from_args(args, dims)
    cls = certify.classify_critical_point(state, hyper)
    doc = cls.certificate.to_dict()
    if cls.direction is not None:
        doc["negative_curvature"] = {"predicted": cls.direction.predicted,
                                     "measured": cls.direction.measured}
    _emit(doc, args.out)
    return EXIT_OK if cls.verdict == certify.GLOBAL_MIN else EXIT_FAIL


def cmd_oracle(args) -> int:
    sol = certify.rho_oracle(_hyper_from_args(args))
    _emit({"rho_star": sol.rho, "f_star": sol.f_star, "margin": sol.margin}, args.out)
    return EXIT_OK


def _load_classifier(path):
    doc = cfg.load_json(path)
    if not isinstance(doc, dict) or "W" not in doc:
        raise ConfigError(f"{path}: classifier JSON needs a 'W' array")
    try:
        W = np.array(doc["W"], dtype=np.float64)
        b = np.array(doc.get("b", np.zeros(W.shape[0])), dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise DimensionError(f"{path}: W must be K x d and b of length K")
    return W, b


def cmd_metrics(args) -> int:
    X, labels = io.read_features(args.features)
    W, b = _load_classifier(args.classifier)
    try:
        H, n, K = geometry.stats_from_labels(X, labels)
    except ValueError as exc:
        raise ConfigError(f"{args.features}: {exc}") from exc
    if W.shape != (K, H.shape[0]):
        raise DimensionError(f"classifier is {W.shape[0]}x{W.shape[1]} but the dump has "
                             f"K={K} classes of dimension {H.shape[0]}")
    _emit(geometry.nc_metrics(W, H, b, n, K), args.out)
    return EXIT_OK


def cmd_lemma(args) -> int:
    res = lemmas.run_suite(args.which, seed=0 if args.seed is None else args.seed)
    _emit(res.to_dict(), args.out)
    return EXIT_OK if res.passed else EXIT_FAIL


def cmd_grad_check(args) -> int:
    base = _hyper_from_args(args, defaults=GRAD_CHECK_DEFAULT)
    seed0 = 0 if args.seed is None else args.seed
    per_loss = {}
    for kind in KINDS:
        hp = replace(base, loss=replace(base.loss, kind=kind))
        per_loss[kind] = max(grad_check(random_state(hp, seed0 + i), hp, seed=seed0 + i)
                             for i in range(GRAD_CHECK_STATES))
    worst = max(per_loss.values())
    _emit({"max_rel_err": worst, "tolerance": GRAD_CHECK_TOL, "states_per_loss": GRAD_CHECK_STATES,
           "per_loss": per_loss}, args.out)
    return EXIT_OK if worst <= GRAD_CHECK_TOL else EXIT_FAIL


# sweeps ----------------------------------------------------------------------

AGGREGATE_COLUMNS = ["cell_id", "status", "final_f", "f_star", "gap_to_oracle",
                     "nc1", "nc2", "nc3", "nc4"]


def _run_cell(job):
    """Worker body; everything it needs travels in ``job`` so cells are isolated."""
    cell_id, run_doc, seed, trace_path = job
    try:
        run = cfg.parse_run_config(run_doc)
        tc = run.train if seed is None else replace(run.train, seed=seed)
        res = train(tc)
    except NumericalFailure as exc:
        return cell_id, "diverged", None, str(exc)
    io.write_trace(trace_path, res.trace)
    last = res.trace[-1]
    try:
        f_star = certify.rho_oracle(tc.hyper).f_star
    except CollapseLabError:
        f_star = float("nan")
    status = "ok" if res.converged else "not_converged"
    return cell_id, status, [last.f, f_star, last.f - f_star, last.nc1, last.nc2, last.nc3,
                             last.nc4], None


def _cell_value(v):
    return v if isinstance(v, str) else json.dumps(v)


def cmd_sweep(args) -> int:
    if not args.config:
        raise ConfigError("sweep needs --config")
    doc = cfg.load_json(args.config)
    cells = list(cfg.expand_sweep(doc))
    out_dir = Path(args.out or doc.get("output", {}).get("dir", "sweep_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    # validate every cell before spending any compute
    for cell_id, _, run_doc in cells:
        try:
            cfg.parse_run_config(run_doc)
        except ConfigError as exc:
            raise ConfigError(f"sweep cell {cell_id}: {exc}") from exc
    jobs = [(cid, run_doc, args.seed, str(out_dir / f"cell_{cid:04d}.csv"))
            for cid, _, run_doc in cells]
    n_jobs = args.jobs or os.cpu_count() or 1
    if n_jobs == 1 or len(jobs) == 1:
        results = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(n_jobs, len(jobs))) as pool:
            results = list(pool.map(_run_cell, jobs))  # map keeps declaration order

    keys = list(cells[0][1]) if cells else []
    agg_path = out_dir / "aggregate.csv"
    failures = 0
    with open(agg_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS[:2] + keys + AGGREGATE_COLUMNS[2:])
        for (cid, status, vals, err), (_, assignment, _) in zip(results, cells):
            if status != "ok":
                failures += 1
                log.error("cell %d: %s %s", cid, status, err or "")
            vals = vals or [float("nan")] * 7
            w.writerow([cid, status] + [_cell_value(assignment[k]) for k in keys]
                       + [repr(float(v)) for v in vals])
    _emit({"cells": len(cells), "failed": failures, "aggregate": str(agg_path)})
    return EXIT_OK if failures == 0 else EXIT_FAIL


# entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--out", metavar="PATH")
    common.add_argument("--seed", type=int, metavar="U64")

    parser = argparse.ArgumentParser(prog="collapse-lab",
                                     description="Neural-collapse experiments on the unconstrained feature model.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train from a run config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", parents=[common], help="certify a checkpoint")
    p.add_argument("--checkpoint", metavar="PATH")
    _add_hyper_flags(p, dims=False)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("oracle", parents=[common], help="optimal point of the ETF family")
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("metrics", parents=[common], help="NC1-NC4 of a feature dump")
    p.add_argument("features", metavar="FEATURES_CSV")
    p.add_argument("classifier", metavar="CLASSIFIER_JSON")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("lemma", parents=[common], help="run a randomized property suite")
    p.add_argument("which", choices=sorted(lemmas.SUITES))
    p.set_defaults(func=cmd_lemma)

    p = sub.add_parser("sweep", parents=[common], help="grid of training runs")
    p.add_argument("--jobs", type=int, metavar="N", help="parallel cells (default: CPU count)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "jobs", None) is not None and args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, DimensionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CollapseLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
