"""Command-line interface: generate, fit, eval, project and sweep.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or input
error. Every option can also be given in a ``--config`` file of
``key = value`` lines, where keys are option names with dashes or
underscores; options on the command line win.
"""
import argparse
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .errors import (CyclicInput, DimensionMismatch, InfeasibleSpec, NonFinite, ParseError)
from .metrics import (PosteriorSummary, aggregate, evaluate, write_json, write_rows_csv)
from .projection import PathSchedule, SparsityBudget, project
from .synth import (GraphSpec, NoiseSpec, load_external, make_network, read_edge_list,
                    read_matrix_csv, sample_graph, save_dataset, simulate_linear,
                    simulate_nonlinear, write_matrix_csv)
from .variational import (Checkpoint, MeanFieldGaussian, TrainConfig, config_hash,
                          load_checkpoint, posterior_summary, save_checkpoint, select_lambda)

USAGE_ERRORS = (ParseError, InfeasibleSpec, DimensionMismatch, CyclicInput, FileNotFoundError,
                IsADirectoryError, ValueError)


class UsageError(Exception):
    pass


def _parse_lambda(tok):
    tok = tok.strip().lower()
    if tok in ("inf", "infinity", "none"):
        return math.inf
    v = float(tok)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"lambda must be non-negative, got {tok}")
    return v


def _parse_grid(text):
    text = text.strip().lower()
    if text == "auto":
        return None
    return [_parse_lambda(t) for t in text.split(",") if t.strip()]


def _int_list(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_schedule(p):
    g = p.add_argument_group("projection solver")
    g.add_argument("--mu-initial", type=float, default=1.0)
    g.add_argument("--decay", type=float, default=0.5)
    g.add_argument("--stages", type=int, default=10)
    g.add_argument("--inner-max-iters", type=int, default=5000)
    g.add_argument("--inner-tol", type=float, default=1e-6)
    g.add_argument("--inner-step", type=float, default=None)
    g.add_argument("--inner-method", choices=("newton", "gradient"), default="newton")
    g.add_argument("--threshold", type=float, default=0.1, help="hard threshold")
    g.add_argument("--refine", type=_bool, default=True,
                   help="refit the kept support exactly (default true)")


def _add_train(p):
    g = p.add_argument_group("training")
    g.add_argument("--mode", choices=("linear", "nonlinear"), default="linear")
    g.add_argument("--hidden", type=int, default=10, help="hidden width (nonlinear)")
    g.add_argument("--lr", type=float, default=0.1)
    g.add_argument("--samples", type=int, default=100, help="samples per iteration")
    g.add_argument("--max-iters", type=int, default=2000)
    g.add_argument("--patience", type=int, default=100)
    g.add_argument("--noise-variance", type=float, default=1.0)
    g.add_argument("--lambda-grid", type=_parse_grid, default=None,
                   help="'auto' or comma-separated radii ('inf' allowed)")
    g.add_argument("--grid-size", type=int, default=10)
    g.add_argument("--val-fraction", type=float, default=0.1)


def _add_graph(p):
    g = p.add_argument_group("data generation")
    g.add_argument("--p", type=int, default=10)
    g.add_argument("--s", type=int, default=20)
    g.add_argument("--graph", choices=("erdos_renyi", "scale_free"), default="erdos_renyi")
    g.add_argument("--exponent", type=float, default=2.0)
    g.add_argument("--noise", choices=("gaussian", "exponential", "gumbel",
                                       "heteroscedastic_gaussian"), default="gaussian")
    g.add_argument("--noise-scale", type=float, default=1.0)


def build_parser():
    parser = argparse.ArgumentParser(prog="dagproj", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a dataset")
    _add_graph(g)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--mode", choices=("linear", "nonlinear"), default="linear")
    g.add_argument("--hidden", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")

    f = sub.add_parser("fit", help="fit a posterior, choosing lambda on held-out rows")
    f.add_argument("--data", required=True)
    _add_train(f)
    _add_schedule(f)
    f.add_argument("--eval-samples", type=int, default=100)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="sample DAGs from a checkpoint and score them")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--truth", default=None, help="edge list file")
    e.add_argument("--count", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    _add_schedule(e)
    e.add_argument("--out", required=True)

    pr = sub.add_parser("project", help="project one matrix")
    pr.add_argument("--matrix", required=True)
    pr.add_argument("--lambda", dest="lam", type=_parse_lambda, default=math.inf)
    _add_schedule(pr)
    pr.add_argument("--out", required=True, help="output CSV; a .json summary is written next to it")

    sw = sub.add_parser("sweep", help="generate, fit and evaluate over seeds and sample sizes")
    _add_graph(sw)
    _add_train(sw)
    _add_schedule(sw)
    sw.add_argument("--ns", type=_int_list, default=[50, 200, 1000])
    sw.add_argument("--seeds", type=int, default=10, help="number of seeds")
    sw.add_argument("--seed", type=int, default=0, help="first seed")
    sw.add_argument("--count", type=int, default=100, help="posterior samples for metrics")
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--out", required=True)

    for sp in sub.choices.values():
        sp.add_argument("--config", default=None, help="key = value file mirroring the options")
    return parser


def read_config_file(path):
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}: expected key = value", lineno)
            k, v = (t.strip() for t in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv):
    parser = build_parser()
    path = _config_path(argv)
    command = next((t for t in argv if t in parser._subparsers._group_actions[0].choices), None)
    if path and command:
        sub = parser._subparsers._group_actions[0].choices[command]
        actions = {a.dest: a for a in sub._actions}
        conf = read_config_file(path)
        unknown = sorted(k for k in conf if k not in actions or k in ("config", "help"))
        if unknown:
            sub.error(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for k, v in conf.items():
            a = actions[k]
            try:
                defaults[k] = a.type(v) if a.type else v
            except (ValueError, argparse.ArgumentTypeError) as exc:
                sub.error(f"config key {k}: {exc}")
            if a.choices and defaults[k] not in a.choices:
                sub.error(f"config key {k}: {v!r} not in {list(a.choices)}")
            # a value from the file satisfies a required option
            a.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _schedule(args):
    return PathSchedule(args.mu_initial, args.decay, args.stages, args.inner_max_iters,
                        args.inner_tol, args.inner_step, args.inner_method)


def _resolved(args, drop=("out", "config", "command", "workers")):
    d = {k: v for k, v in vars(args).items() if k not in drop}
    for k, v in d.items():
        if isinstance(v, float) and math.isinf(v):
            d[k] = "inf"
        elif isinstance(v, list):
            d[k] = ["inf" if isinstance(x, float) and math.isinf(x) else x for x in v]
    return d


def _meta(args):
    return {"version": __version__, "command": args.command,
            "config_hash": config_hash(_resolved(args)), "seed": getattr(args, "seed", None)}


def _tag(meta):
    return " ".join(f"{k}={meta[k]}" for k in ("version", "command", "config_hash", "seed"))


def _train_config(args, budget=math.inf, seed=None):
    return TrainConfig(learning_rate=args.lr, samples_per_iter=args.samples,
                       max_iters=args.max_iters, elbo_patience=args.patience,
                       budget=SparsityBudget(budget), seed=args.seed if seed is None else seed,
                       noise_variance=args.noise_variance, hard_threshold=args.threshold,
                       refine=args.refine, schedule=_schedule(args))


# ---- commands ----------------------------------------------------------------

def _make_dataset(args, n, seed):
    W = sample_graph(GraphSpec(args.p, args.s, args.graph, args.exponent, seed))
    noise = NoiseSpec(args.noise, args.noise_scale)
    if args.mode == "nonlinear":
        net = make_network(W, args.hidden, seed + 1)
        return simulate_nonlinear(net, n, noise, seed + 2)
    return simulate_linear(W, n, noise, seed + 2)


def cmd_generate(args):
    ds = _make_dataset(args, args.n, args.seed)
    meta = _meta(args)
    meta["graph"] = {"p": args.p, "s": args.s, "family": args.graph, "exponent": args.exponent}
    save_dataset(ds, args.out, meta)
    return 0


def _fit_and_select(X, names, args, log=print):
    from .nonlinear import (fit_nonlinear, nonlinear_score, parameter_count)

    config = _train_config(args)
    grid = args.lambda_grid
    p = X.shape[1]
    if args.mode == "nonlinear":
        D = parameter_count(p, args.hidden)
        prior = MeanFieldGaussian.isotropic(D)

        def fit_fn(train, prior_, cfg):
            return fit_nonlinear(train, prior_, cfg, args.hidden)

        def score_fn(q, val, cfg, seed):
            return nonlinear_score(q, val, cfg, seed, args.eval_samples, args.hidden)
        arch = {"p": p, "hidden": args.hidden, "layers": [p, args.hidden, 1], "activation": "relu"}
    else:
        prior = MeanFieldGaussian.standard_prior(p)
        fit_fn = score_fn = None
        arch = {"p": p}
    sel = select_lambda(X, prior, config, grid, args.grid_size, args.val_fraction,
                        args.eval_samples, fit_fn, score_fn,
                        log=lambda lam, s: log(f"lambda={lam:g} score={s:.6g}"))
    return sel, prior, config, arch


def cmd_fit(args):
    ds = load_external(args.data)
    if args.mode == "nonlinear" and args.hidden < 1:
        raise UsageError("--hidden must be positive")
    sel, prior, config, arch = _fit_and_select(ds.X, ds.names, args,
                                               log=lambda m: print(m, file=sys.stderr))
    meta = _meta(args)
    os.makedirs(args.out, exist_ok=True)
    ckpt = Checkpoint(sel.posterior, SparsityBudget(sel.best_lambda), args.seed,
                      meta["config_hash"], ds.p, args.mode, arch, prior, ds.names,
                      _resolved(args))
    save_checkpoint(os.path.join(args.out, "checkpoint.json"), ckpt)
    rows = [{"lambda": r["lambda"], "score": r["score"], "iterations": r["iterations"],
             "selected": r["lambda"] == sel.best_lambda} for r in sel.scores]
    write_rows_csv(os.path.join(args.out, "lambda_scores.csv"), rows, _tag(meta))
    return 0


def _summary_from_checkpoint(ckpt, count, seed, schedule, threshold):
    if ckpt.mode == "nonlinear":
        from .nonlinear import nonlinear_posterior_summary

        return nonlinear_posterior_summary(ckpt.posterior, ckpt.p,
                                           ckpt.architecture["hidden"], ckpt.budget, count, seed,
                                           schedule, threshold)
    return posterior_summary(ckpt.posterior, ckpt.budget, count, seed, ckpt.p, schedule,
                             threshold)


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    summary = _summary_from_checkpoint(ckpt, args.count, args.seed, _schedule(args),
                                       args.threshold)
    names = ckpt.node_names or [f"X{j + 1}" for j in range(ckpt.p)]
    meta = _meta(args)
    os.makedirs(args.out, exist_ok=True)
    report = {"meta": meta, "count": args.count, "lambda": ckpt.budget.lam
              if ckpt.budget.bounded else "inf",
              "mean_edges": float(summary.samples.sum(axis=(1, 2)).mean())}
    if args.truth:
        truth = read_edge_list(args.truth, names)
        report.update(evaluate(summary, truth))
    else:
        report["diagnostic"] = "no truth given; brier, shd, f1 and auroc skipped"
        print(report["diagnostic"], file=sys.stderr)
    write_json(os.path.join(args.out, "metrics.json"), report)
    row = {k: v for k, v in report.items() if k != "meta"}
    write_rows_csv(os.path.join(args.out, "metrics.csv"), [row], _tag(meta))
    write_matrix_csv(os.path.join(args.out, "edge_probs.csv"), summary.edge_probs, names,
                     _tag(meta))
    return 0


def cmd_project(args):
    W, header = read_matrix_csv(args.matrix)
    if W.shape[0] != W.shape[1]:
        raise DimensionMismatch(f"{args.matrix}: matrix must be square, got {W.shape}")
    W = W.copy()
    np.fill_diagonal(W, 0.0)
    res = project(W, SparsityBudget(args.lam), _schedule(args), args.threshold, True,
                  args.refine)
    meta = _meta(args)
    write_matrix_csv(args.out, res.projected, header, _tag(meta))
    base = os.path.splitext(args.out)[0]
    write_json(base + ".json", {
        "meta": meta, "objective": res.objective, "active_set_size": len(res.active_set),
        "binding": res.binding, "iterations": res.iterations,
        "l1_norm": float(np.abs(res.projected).sum())})
    return 0


def _sweep_task(job):
    args, n, seed = job
    ds = _make_dataset(args, n, seed)
    truth = ds.truth_adjacency()
    if args.lambda_grid is not None and len(args.lambda_grid) == 1:
        lam = args.lambda_grid[0]
        config = _train_config(args, lam, seed)
        if args.mode == "nonlinear":
            from .nonlinear import fit_nonlinear, nonlinear_posterior_summary

            q = fit_nonlinear(ds.X, None, config, args.hidden)
            summary = nonlinear_posterior_summary(q, ds.p, args.hidden, lam, args.count,
                                                  seed + 3, config.schedule, args.threshold)
        else:
            from .variational import fit

            q = fit(ds.X, None, config)
            summary = posterior_summary(q, lam, args.count, seed + 3, ds.p, config.schedule,
                                        args.threshold)
    else:
        a = argparse.Namespace(**vars(args))
        a.seed = seed
        a.eval_samples = args.count
        sel, _, config, _ = _fit_and_select(ds.X, ds.names, a, log=lambda m: None)
        lam = sel.best_lambda
        ckpt = Checkpoint(sel.posterior, SparsityBudget(lam), seed, "", ds.p, args.mode,
                          {"p": ds.p, "hidden": args.hidden}, None)
        summary = _summary_from_checkpoint(ckpt, args.count, seed + 3, config.schedule,
                                           args.threshold)
    row = {"n": n, "seed": seed, "lambda": "inf" if math.isinf(lam) else lam}
    row.update(evaluate(summary, truth))
    return row


def cmd_sweep(args):
    jobs = [(args, n, args.seed + i) for n in args.ns for i in range(args.seeds)]
    if args.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(args.workers) as ex:
            rows = list(ex.map(_sweep_task, jobs))
    else:
        rows = [_sweep_task(j) for j in jobs]
    rows.sort(key=lambda r: (r["n"], r["seed"]))
    meta = _meta(args)
    os.makedirs(args.out, exist_ok=True)
    keys = ["brier", "expected_shd", "expected_f1", "auroc"]
    summary = aggregate(rows, ["n"], keys)
    write_rows_csv(os.path.join(args.out, "results.csv"), rows, _tag(meta))
    write_rows_csv(os.path.join(args.out, "summary.csv"), summary, _tag(meta))
    write_json(os.path.join(args.out, "summary.json"), {"meta": meta, "summary": summary})
    return 0


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "eval": cmd_eval,
            "project": cmd_project, "sweep": cmd_sweep}


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except NonFinite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
