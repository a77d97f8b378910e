"""Command-line interface.

One binary, subcommand style; all randomness sits behind a single
--seed.  Exit codes: 0 success, 1 usage error, 2 numerical failure;
diagnostics go to stderr, results to stdout or --out files.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .applications import ci_test, estimate_mi
from .archive import load_model, save_model
from .data import load_csv, write_csv
from .errors import NumericalError, TrainingDiverged
from .ht import (CdfAt, ConditionDensityAt, DensityAt, Marginalize,
                 QuerySpec, _KIND_DENSITY, _KIND_ONE, _contract_rescaled,
                 evaluate, leaf_log_factors, log_density_batch)
from .sampling import sample, sample_autoregressive
from .training import TrainConfig, adaptive_coupling, fit, init_model


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _int_list(text):
    if not text:
        return []
    try:
        return [int(tok) for tok in text.split(",")]
    except ValueError:
        raise _UsageError("expected comma-separated integers, got %r" % text)


def _parse_query(text, d):
    tags = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok == "m":
            tags.append(Marginalize())
            continue
        if ":" not in tok:
            raise _UsageError("bad query tag %r" % tok)
        kind, _, value = tok.partition(":")
        try:
            x = float(value)
        except ValueError:
            raise _UsageError("bad value in query tag %r" % tok)
        if kind == "c":
            tags.append(CdfAt(x))
        elif kind == "d":
            tags.append(DensityAt(x))
        elif kind == "given":
            tags.append(ConditionDensityAt(x))
        else:
            raise _UsageError("unknown query tag kind %r" % kind)
    if len(tags) != d:
        raise _UsageError("query has %d tags but the model has %d variables"
                          % (len(tags), d))
    return QuerySpec(tuple(tags))


def _build_parser():
    parser = _Parser(prog="margdens", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="train a model on a CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--d-auto", action="store_true", default=True,
                   help="infer the dimension from the CSV header (default)")
    p.add_argument("--d", type=int, default=None,
                   help="assert the expected data dimension")
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--l", type=int, default=2)
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--pool", type=int, default=2)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=500)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--couple", choices=["on", "off"], default="on")
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--missing-token", default=None)
    p.add_argument("--out", required=True, help="model archive path")

    p = sub.add_parser("sample", help="draw rows from a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["hierarchical", "autoregressive"],
                   default="hierarchical")
    p.add_argument("--inv-tol", type=float, default=1e-9)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")

    p = sub.add_parser("eval", help="evaluate a query or emit a density grid")
    p.add_argument("--model", required=True)
    p.add_argument("--query", default=None,
                   help="per-variable tags c:<x>|d:<x>|m|given:<x>, comma-joined")
    p.add_argument("--grid", default=None,
                   help="var1,var2,min,max,steps; writes a marginal density grid")
    p.add_argument("--out", default=None)

    p = sub.add_parser("mi", help="mutual information between variable subsets")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--y", required=True, help="comma-separated indices")
    p.add_argument("--z", required=True, help="comma-separated indices")
    p.add_argument("--missing-token", default=None)

    p = sub.add_parser("citest", help="conditional independence test")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--i", type=int, required=True)
    p.add_argument("--j", type=int, required=True)
    p.add_argument("--cond", default="", help="comma-separated indices")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--missing-token", default=None)

    p = sub.add_parser("score", help="per-row negative log-likelihood")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--missing-token", default=None)
    p.add_argument("--out", default=None)
    return parser


def _cmd_fit(args):
    dataset = load_csv(args.data, args.missing_token)
    if args.d is not None and dataset.d != args.d:
        raise _UsageError("dataset has %d columns, expected %d"
                          % (dataset.d, args.d))
    if args.couple == "on" and dataset.d > 1:
        coupling_rows = dataset.complete_rows()[:10000]
        leaf_order = adaptive_coupling(coupling_rows)
    else:
        leaf_order = None
    model = init_model(dataset.d, args.m, args.l, args.r, args.pool,
                       seed=args.seed, leaf_order=leaf_order)
    config = TrainConfig(learning_rate=args.lr, batch_size=args.batch,
                         epochs=args.epochs, seed=args.seed,
                         validation_fraction=args.val_frac,
                         clip_norm=args.clip_norm)
    model, trace = fit(model, dataset, config)
    print("epoch,train_nll,val_nll")
    for row in trace:
        print("%d,%.17g,%.17g" % (row.epoch, row.train_nll, row.val_nll))
    save_model(model, args.out)
    return 0


def _write_rows(path, array, header):
    if path is None:
        print(",".join(header))
        for row in np.atleast_2d(array):
            print(",".join("%.17g" % v for v in row))
    else:
        write_csv(path, array, header)


def _cmd_sample(args):
    model = load_model(args.model)
    rng = np.random.default_rng(args.seed)
    if args.mode == "hierarchical":
        rows = sample(model, args.n, rng, args.inv_tol)
    else:
        rows = sample_autoregressive(model, args.n, rng, args.inv_tol)
    _write_rows(args.out, rows, ["x%d" % (j + 1) for j in range(model.d)])
    return 0


def _cmd_eval(args):
    model = load_model(args.model)
    if (args.query is None) == (args.grid is None):
        raise _UsageError("eval needs exactly one of --query or --grid")
    if args.query is not None:
        result = evaluate(model, _parse_query(args.query, model.d))
        print("%.17g" % result)
        return 0

    parts = args.grid.split(",")
    if len(parts) != 5:
        raise _UsageError("--grid expects var1,var2,min,max,steps")
    v1, v2 = int(parts[0]), int(parts[1])
    lo, hi, steps = float(parts[2]), float(parts[3]), int(parts[4])
    if v1 == v2 or not (0 <= v1 < model.d and 0 <= v2 < model.d):
        raise _UsageError("grid variables must be distinct and in range")
    if steps < 2 or hi <= lo:
        raise _UsageError("grid needs steps >= 2 and max > min")
    axis = np.linspace(lo, hi, steps)
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    points = np.zeros((steps * steps, model.d))
    points[:, v1] = g1.ravel()
    points[:, v2] = g2.ravel()
    kinds = np.full(model.d, _KIND_ONE)
    kinds[[v1, v2]] = _KIND_DENSITY
    density = np.exp(_contract_rescaled(
        model.ht, leaf_log_factors(model, points, kinds)))
    _write_rows(args.out,
                np.column_stack([g1.ravel(), g2.ravel(), density]),
                ["x1", "x2", "density"])
    return 0


def _complete_rows(args):
    dataset = load_csv(args.data, args.missing_token)
    rows = dataset.complete_rows()
    dropped = dataset.n - rows.shape[0]
    if dropped:
        print("dropped %d incomplete rows" % dropped, file=sys.stderr)
    return rows


def _cmd_mi(args):
    model = load_model(args.model)
    rows = _complete_rows(args)
    value = estimate_mi(model, rows, _int_list(args.y), _int_list(args.z))
    print("%.17g" % value)
    return 0


def _cmd_citest(args):
    model = load_model(args.model)
    rows = _complete_rows(args)
    result = ci_test(model, rows, args.i, args.j, _int_list(args.cond),
                     args.alpha)
    print("tau,p_value,reject")
    print("%.17g,%.17g,%d" % (result.statistic, result.p_value, result.reject))
    return 0


def _cmd_score(args):
    model = load_model(args.model)
    dataset = load_csv(args.data, args.missing_token)
    scores = -log_density_batch(model, dataset.values, dataset.mask)
    _write_rows(args.out, scores, ["neg_log_likelihood"])
    return 0


_COMMANDS = {
    "fit": _cmd_fit,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "mi": _cmd_mi,
    "citest": _cmd_citest,
    "score": _cmd_score,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (_UsageError, ValueError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        for row in exc.trace:
            print("%d,%.17g,%.17g" % (row.epoch, row.train_nll, row.val_nll),
                  file=sys.stderr)
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except NumericalError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
