"""Command-line entry point: ``cdcm <subcommand> [options]``.

Exit codes: 0 success, 1 user error (bad flags, missing or malformed
files), 2 numerical or convergence failure.  Outputs that could be
computed are still written on exit 2.
"""

import argparse
import csv
import json
import logging
import math
from pathlib import Path
import sys
import time

import numpy as np

from . import __version__
from . import io as cio
from .errors import (CDCMError, DegenerateCovarianceError, DegenerateDrawsError,
                     DegenerateSignalError, DesignViolationError,
                     NonInjectiveObservationError, NotRealLogIdentifiableError,
                     SamplerInitError, TrajectoryDegenerateError)

log = logging.getLogger("cdcm")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2
FORMAT_VERSION = 1

_NUMERIC_ERRORS = (NotRealLogIdentifiableError, DesignViolationError, TrajectoryDegenerateError,
                   NonInjectiveObservationError, DegenerateSignalError, DegenerateDrawsError,
                   DegenerateCovarianceError, SamplerInitError, np.linalg.LinAlgError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers

def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out, args):
    from scipy import __version__ as sp_version
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
           if k not in ("func", "config")}
    cfg.update({"format_version": FORMAT_VERSION, "cdcm_version": __version__,
                "numpy_version": np.__version__, "scipy_version": sp_version})
    cio.write_json(Path(out) / "config-snapshot.json", cfg)


def _seed(args):
    if args.seed is None:
        if args.strict:
            raise UsageError(f"--seed is required for '{args.command}' in strict mode")
        return 0
    return int(args.seed)


def _load_design(args):
    return cio.read_design(args.design, getattr(args, "design_json", None))


def _sampler_config(args, **defaults):
    from .inference import SamplerConfig
    kw = dict(defaults)
    for name in ("warmup", "target_accept", "max_treedepth", "ess_alpha", "ess_eps",
                 "max_iterations", "chains", "num_samples", "init_refine"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    kw["seed"] = _seed(args)
    return SamplerConfig(**kw)


def _add_sampler_flags(p, chains, warmup):
    p.add_argument("--chains", type=int, default=chains)
    p.add_argument("--warmup", type=int, default=warmup)
    p.add_argument("--num-samples", type=int, default=None,
                   help="fixed post-warm-up draws per chain (default: stop on multivariate ESS)")
    p.add_argument("--target-accept", type=float, default=0.9)
    p.add_argument("--max-treedepth", type=int, default=10)
    p.add_argument("--ess-alpha", type=float, default=0.05)
    p.add_argument("--ess-eps", type=float, default=0.05)
    p.add_argument("--max-iterations", type=int, default=100000)
    p.add_argument("--seed", type=int, default=None)


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args):
    from .plotting import plot_simulation
    from .simulate import (SimulationSpec, benchmark_design, chain_models, simulate)
    if args.preset:
        h, truth = chain_models(1 if args.preset == "simple" else 3)
    else:
        if not (args.hypothesis and args.truth):
            raise UsageError("simulate needs --hypothesis and --truth (or --preset)")
        h = cio.read_hypothesis(args.hypothesis)
        truth = cio.read_params(args.truth, h)
    design = _load_design(args) if args.design else benchmark_design()
    spec = SimulationSpec(truth, h, design, args.snr, _seed(args), not args.no_clamp)
    b = simulate(spec)
    out = _out_dir(args)
    roi = [f"roi{i + 1}" for i in range(h.d)]
    cio.write_csv(out / "Y.csv", b.Y, roi)
    cio.write_csv(out / "z_true.csv", b.z, roi)
    cio.write_csv(out / "mu_true.csv", b.mu, roi)
    cio.write_json(out / "spec.json", {**spec.to_dict(), "noise_sd": b.noise_sd,
                                       "clamp_factor": b.clamp_factor})
    cio.write_json(out / "hypothesis.json", h.to_dict())
    cio.write_json(out / "truth.json", truth.to_dict())
    cio.write_design(out / "design.csv", design)
    plot_simulation(b.z, b.Y, b.mu, design.r, out / "simulation.png", design.U)
    _snapshot(out, args)
    return EXIT_OK


def cmd_check_design(args):
    from .identify import check_design
    design = _load_design(args)
    rep = check_design(design, args.d)
    text = json.dumps(cio._clean(rep.to_dict()), indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = _out_dir(args)
        cio.write_json(out / "audit.json", rep.to_dict())
        _snapshot(out, args)
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def _posterior_prediction(post, draws, max_draws=400):
    step = max(1, draws.shape[0] // max_draws)
    preds = np.array([post.predicted_bold(x) for x in draws[::step]])
    return preds.mean(axis=0), np.percentile(preds, 2.5, axis=0), np.percentile(preds, 97.5, axis=0)


def cmd_fit(args):
    from .inference import CDCMPosterior, block_bootstrap_mse, nuts_sample, summarize
    from .plotting import plot_bold_fit, plot_traces
    Y, roi = cio.read_bold_csv(args.data)
    h = cio.read_hypothesis(args.hypothesis)
    design = _load_design(args)
    post = CDCMPosterior(h, design, Y)
    cfg = _sampler_config(args)
    pd = nuts_sample(post, cfg)
    s = summarize(pd)
    out = _out_dir(args)
    cio.write_draws(out / "draws.csv", pd)
    pred, lo, hi = _posterior_prediction(post, pd.draws)
    t = design.r * np.arange(1, design.n + 1)
    cio.write_csv(out / "predicted.csv", np.column_stack([t, pred]), ["time"] + roi)
    boot = {}
    for i, name in enumerate(roi):
        bm = block_bootstrap_mse(Y[:, i], pred[:, i], args.bootstrap_block, args.bootstrap_reps,
                                 cfg.seed)
        boot[name] = {"mse": bm.mse, "se": bm.se, "ci_95": list(bm.ci_95)}
    summary = s.to_dict()
    summary["fit_mse_block_bootstrap"] = boot
    summary["roi_names"] = roi
    summary["hypothesis"] = h.to_dict()
    cio.write_json(out / "summary.json", summary)
    plot_bold_fit(Y, pred, design.r, out / "predicted.png", roi, lo, hi)
    plot_traces(pd.names, pd.draws, pd.chain, out / "traces.png")
    _snapshot(out, args)
    if cfg.num_samples is None and not pd.converged:
        log.error("sampler stopped at max_iterations without reaching the ESS threshold")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_recover(args):
    from .identify import identify, identify_from_bold
    from .model import hrf_kernel
    design = _load_design(args)
    if args.trajectory:
        _, z = cio.read_csv(args.trajectory)
        res = identify(z, design)
    elif args.bold:
        _, mu = cio.read_csv(args.bold)
        res = identify_from_bold(mu, design, hrf_kernel(design.r, design.n))
    else:
        raise UsageError("recover needs --trajectory or --bold")
    text = json.dumps(cio._clean(res.to_dict()), indent=2, sort_keys=True)
    if args.out:
        out = _out_dir(args)
        cio.write_json(out / "recovered.json", res.to_dict())
        _snapshot(out, args)
    else:
        print(text)
    return EXIT_OK


def _load_subjects(root):
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory: {root}")
    found = {}
    for path in sorted(root.iterdir()):
        if path.is_dir() and (path / "summary.json").exists():
            found[path.name] = path / "summary.json"
        elif path.suffix == ".json" and path.is_file():
            found[path.stem.removesuffix("_summary").removesuffix(".summary")] = path
    subjects = {}
    for sid, path in found.items():
        obj = cio.read_json(path)
        if "theta_hat" in obj and "S" in obj:
            subjects[sid] = obj
    if len(subjects) < 2:
        raise UsageError(f"{root}: need at least two subject summaries, found {len(subjects)}")
    return subjects


def _read_covariates(path, id_col):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or id_col not in rows[0]:
        raise cio.ParseError(f"{path}: expected a '{id_col}' column")
    cols = [c for c in rows[0] if c != id_col]
    return {r[id_col]: r for r in rows}, cols


def cmd_group(args):
    from .group import SubjectRecord, encode_covariates, group_fit, group_summary
    from .plotting import plot_forest
    subjects = _load_subjects(args.subjects)
    ids = sorted(subjects)
    names = subjects[ids[0]]["theta_hat"]["names"]
    for sid in ids:
        if subjects[sid]["theta_hat"]["names"] != names:
            raise UsageError(f"subject {sid} has a different parameter layout")
    if args.covariates:
        table, cols = _read_covariates(args.covariates, args.id_column)
        missing = [s for s in ids if s not in table]
        if missing:
            raise UsageError(f"covariates missing for subjects {missing}")
        raw = {c: [table[s][c] for s in ids] for c in cols}
        X, cov_names = encode_covariates(raw, args.categorical or ())
    else:
        X, cov_names = np.zeros((len(ids), 0)), []
    records = [SubjectRecord(subjects[s]["theta_hat"]["values"], subjects[s]["S"], X[k])
               for k, s in enumerate(ids)]
    cfg = _sampler_config(args, num_samples=5000)
    pd, post = group_fit(records, cfg, names, cov_names)
    out = _out_dir(args)
    summ = group_summary(pd, post)
    summ["subjects"] = ids
    cio.write_json(out / "group_summary.json", summ)
    cio.write_draws(out / "group_draws.csv", pd)
    a = summ["alpha"]
    rows = np.array([[a[n]["mean"], a[n]["hpd_lo"], a[n]["hpd_hi"]] for n in names])
    cio.write_csv(out / "group_alpha.csv", np.column_stack([np.arange(1, len(names) + 1), rows]),
                  ["index", "mean", "hpd_lo", "hpd_hi"])
    Path(out / "group_alpha_labels.txt").write_text("\n".join(names) + "\n", encoding="utf-8")
    if cov_names:
        th = summ["Theta"]
        keys = list(th)
        trow = np.array([[th[k]["mean"], th[k]["hpd_lo"], th[k]["hpd_hi"]] for k in keys])
        cio.write_csv(out / "group_theta.csv", np.column_stack([np.arange(1, len(keys) + 1), trow]),
                      ["index", "mean", "hpd_lo", "hpd_hi"])
    plot_forest(names, rows[:, 0], rows[:, 1], rows[:, 2], out / "group_alpha.png",
                "group intercepts (95% HPD)")
    _snapshot(out, args)
    return EXIT_OK


def cmd_summarize(args):
    from .inference import PosteriorDraws, summarize
    names, draws, chain, lp = cio.read_draws(args.draws)
    pd = PosteriorDraws(names, draws, chain, np.array([math.nan]), 0, 0, 0, lp=lp)
    s = summarize(pd, args.prob)
    rows = s.table(natural=args.natural)
    print(f"{'parameter':<18}{'mean':>12}{'sd':>12}{'hpd_lo':>12}{'hpd_hi':>12}")
    for n, m, sd, lo, hi in rows:
        print(f"{n:<18}{m:>12.5g}{sd:>12.5g}{lo:>12.5g}{hi:>12.5g}")
    if args.out:
        out = _out_dir(args)
        d = s.to_dict()
        d.pop("diagnostics", None)
        cio.write_json(out / "summary.json", d)
        _snapshot(out, args)
    return EXIT_OK


def cmd_bench(args):
    from .inference import CDCMPosterior
    from .model import mean_bold, neural_trajectory
    from .plotting import plot_bench
    from .simulate import benchmark_design, chain_models, rk_trajectory
    h, p = chain_models(1 if args.model == "simple" else 3)
    design = benchmark_design()
    z_rk = rk_trajectory(p, h, design)
    z_an = neural_trajectory(p, h, design)
    post = CDCMPosterior(h, design, mean_bold(p, h, design))
    x = p.to_vector()
    post.logp_and_grad(x)

    def timed(fn):
        fn()
        t0 = time.perf_counter()
        for _ in range(args.reps):
            fn()
        return (time.perf_counter() - t0) / args.reps

    t_an = timed(lambda: neural_trajectory(p, h, design))
    t_rk = timed(lambda: rk_trajectory(p, h, design))
    t_ll = timed(lambda: post.logp_and_grad(x))
    res = {"model": args.model, "d": h.d, "n": design.n, "reps": args.reps,
           "oracle": "Dormand-Prince RK45 (scipy solve_ivp), rtol = atol = 1e-9, segment-wise",
           "max_abs_error": float(np.max(np.abs(z_an - z_rk))),
           "seconds_analytic_trajectory": t_an, "seconds_rk_trajectory": t_rk,
           "seconds_logp_and_grad": t_ll, "speedup": t_rk / t_an}
    print(json.dumps(res, indent=2, sort_keys=True))
    if args.out:
        out = _out_dir(args)
        cio.write_json(out / "bench.json", res)
        plot_bench(["analytic", "RK45"], [t_an, t_rk], out / "bench.png")
        _snapshot(out, args)
    return EXIT_OK if res["speedup"] > 1 else EXIT_NUMERIC


# ---------------------------------------------------------------- parser

def build_parser():
    ap = _Parser(prog="cdcm", description="Canonical dynamic causal modelling toolkit")
    ap.add_argument("--version", action="version", version=f"cdcm {__version__}")
    ap.add_argument("--config", help="JSON file of option defaults (flags take precedence)")
    ap.add_argument("--log-level", default="INFO")
    ap.add_argument("--strict", action="store_true", help="require --seed for stochastic commands")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate BOLD data")
    p.add_argument("--hypothesis")
    p.add_argument("--truth")
    p.add_argument("--preset", choices=["simple", "complex"])
    p.add_argument("--design", help="stimulus CSV (sidecar JSON next to it); default benchmark design")
    p.add_argument("--design-json")
    p.add_argument("--snr", type=float, default=1.68)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-clamp", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check-design", help="audit a design for A1/A2")
    p.add_argument("--design", required=True)
    p.add_argument("--design-json")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_check_design)

    p = sub.add_parser("fit", help="NUTS fit of one subject")
    p.add_argument("--data", required=True)
    p.add_argument("--hypothesis", required=True)
    p.add_argument("--design", required=True)
    p.add_argument("--design-json")
    _add_sampler_flags(p, chains=1, warmup=5000)
    p.add_argument("--no-init-refine", dest="init_refine", action="store_false", default=None,
                   help="start from the best raw prior draw instead of the best local mode")
    p.add_argument("--bootstrap-block", type=int, default=10)
    p.add_argument("--bootstrap-reps", type=int, default=10000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("recover", help="constructive recovery from a noiseless trajectory")
    p.add_argument("--trajectory")
    p.add_argument("--bold", help="noise-free BOLD means without baseline")
    p.add_argument("--design", required=True)
    p.add_argument("--design-json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("group", help="group-level synthesis of subject summaries")
    p.add_argument("--subjects", required=True)
    p.add_argument("--covariates")
    p.add_argument("--id-column", default="subject")
    p.add_argument("--categorical", nargs="*")
    _add_sampler_flags(p, chains=5, warmup=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("summarize", help="summaries from a draws.csv file")
    p.add_argument("--draws", required=True)
    p.add_argument("--prob", type=float, default=0.95)
    p.add_argument("--natural", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("bench", help="analytic trajectory against the RK oracle")
    p.add_argument("--model", choices=["simple", "complex"], default="simple")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return ap


def _apply_config(ap, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    cfg = cio.read_json(known.config)
    if not isinstance(cfg, dict):
        raise UsageError(f"{known.config}: config must be a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    for action in ap._subparsers._group_actions:
        for sp in action.choices.values():
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in cfg.items() if k in dests})
    ap.set_defaults(**{k: v for k, v in cfg.items() if k in {"strict", "log_level"}})


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        _apply_config(ap, argv)
        args = ap.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    except (FileNotFoundError, CDCMError) as exc:
        print(f"cdcm: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        ap.print_usage(sys.stderr)
        return EXIT_USER
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cdcm: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except _NUMERIC_ERRORS as exc:
        print(f"cdcm: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, PermissionError, CDCMError) as exc:
        print(f"cdcm: error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())

