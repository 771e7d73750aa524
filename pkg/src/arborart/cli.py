"""Command-line entry point ``arborart``.

Study subcommands read an optional flat ``key = value`` config file, then
apply ``--set key=value`` pairs, then the dedicated flags, so every config
key can be overridden from the command line.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import __version__
from .akd import akd
from .bart import MCMCConfig, ModelSpec, fit, log_density
from .experiments import (
    ExperimentConfig,
    apply_overrides,
    generate_data,
    load_config,
    read_csv,
    run_approx_study,
    run_contraction_study,
    run_simstudy,
    summarize_simstudy,
    write_csv,
)
from .funcs import PowerPiece, kernel_integrals, kernel_square_integral, load_spec, packing_kernel, sim_spec, smooth_spec
from .geometry import Box
from .priors import PriorConfig, check_dirichlet_lemma_grid, sample_eta, sample_tree
from .splitnet import from_points, regular_grid

# flag name -> config key
_FLAG_KEYS = {
    "scenario": "scenario",
    "truth": "truth",
    "n": "n",
    "p": "p",
    "sigma0": "sigma0",
    "replicates": "replicates",
    "seed": "seed",
    "grid": "grid",
    "n_test": "n_test",
    "lam": "lam",
    "workers": "workers",
    "output": "output",
    "trees": "prior.T",
    "iters": "mcmc.iterations",
    "burnin": "mcmc.burnin",
}


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(float(v)) for v in text.split(",") if v.strip()]


def _experiment_args(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="flat key = value file")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    sp.add_argument("--scenario", choices=("regression", "classification", "density"))
    sp.add_argument("--truth", help="sim, additive or a saved spec file")
    sp.add_argument("--n", type=int)
    sp.add_argument("--p", type=int)
    sp.add_argument("--sigma0", type=float)
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--grid", type=int, help="split-net points per axis")
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--trees", type=int)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--burnin", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--output", "-o")
    sp.add_argument("--deterministic", action="store_true", help="omit the timestamp from CSV headers")


def _build_config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    items = {}
    for pair in args.set:
        if "=" not in pair:
            raise SystemExit(f"--set expects KEY=VALUE, got {pair!r}")
        k, v = pair.split("=", 1)
        items[k.strip()] = v.strip()
    for flag, key in _FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            items[key] = str(val)
    if getattr(args, "deterministic", False):
        items["deterministic"] = "true"
    return apply_overrides(cfg, items)


def _meta(cfg: ExperimentConfig) -> dict:
    return {
        "scenario": cfg.scenario,
        "truth": cfg.truth,
        "n": cfg.n,
        "p": cfg.p,
        "sigma0": cfg.sigma0,
        "replicates": cfg.replicates,
        "seed": cfg.seed,
        "trees": cfg.prior.T,
        "iterations": cfg.mcmc.iterations,
        "burnin": cfg.mcmc.burnin,
        "version": __version__,
    }


# subcommands -----------------------------------------------------------------


def cmd_datagen(args) -> int:
    cfg = _build_config(args)
    data = generate_data(cfg, cfg.truth, rng=cfg.seed, noise=args.noise)
    rows = []
    for i in range(data.X.shape[0]):
        row = {f"x{j}": data.X[i, j] for j in range(cfg.p)}
        if data.y is not None:
            row["y"] = data.y[i]
        row["f"] = data.f[i]
        rows.append(row)
    meta = _meta(cfg)
    if args.noise is not None:
        meta["noise"] = args.noise
    write_csv(cfg.output, rows, "datagen", cfg.deterministic, meta)
    return 0


def cmd_simstudy(args) -> int:
    base = ExperimentConfig()
    if args.full:
        base = base.replace(replicates=100)
    cfg = _build_config(args, base)
    t0 = time.perf_counter()
    rows = run_simstudy(cfg)
    write_csv(cfg.output, rows, "simstudy", cfg.deterministic, _meta(cfg))
    means = summarize_simstudy(rows)
    summary = ", ".join(f"{k} {v:.5f}" for k, v in means.items())
    print(f"mean RMSPE: {summary} ({time.perf_counter() - t0:.1f} s)", file=sys.stderr)
    return 0


def cmd_contraction(args) -> int:
    cfg = _build_config(args, ExperimentConfig(replicates=1, mcmc=MCMCConfig(iterations=1000, burnin=500, update_eta=False)))
    out = run_contraction_study(cfg, n_list=_ints(args.n_list))
    meta = _meta(cfg)
    meta.update(slope=out["slope"], spearman=out["spearman"])
    write_csv(cfg.output, out["table"], "contraction", cfg.deterministic, meta)
    print(f"slope {out['slope']:.4f}, spearman {out['spearman']:.3f}", file=sys.stderr)
    return 0


def cmd_rate(args) -> int:
    if args.spec:
        spec = load_spec(args.spec)
    elif args.truth == "sim":
        spec = sim_spec(args.p, args.lam)
    else:
        alpha = _floats(args.alpha)
        coef = _floats(args.coef) if args.coef else [1.0] * len(alpha)
        if len(coef) != len(alpha):
            raise SystemExit("--coef and --alpha need the same length")
        spec = smooth_spec(PowerPiece(tuple(coef), tuple(alpha)), alpha, lam=args.lam)
    net = regular_grid(spec.p, args.grid)
    if (args.n_list is None) == (args.L is None):
        raise SystemExit("give exactly one of --n-list and --L")
    rows = run_approx_study(
        spec,
        net,
        n_list=_floats(args.n_list) if args.n_list else None,
        L_list=_ints(args.L) if args.L else None,
        emp_points=args.emp_points,
        resolution=args.resolution,
        seed=args.seed,
    )
    meta = {"p": spec.p, "d": spec.d, "R": spec.R, "abar": spec.abar, "lam": spec.lam, "grid": args.grid}
    write_csv(args.output, rows, "approx_rate", args.deterministic, meta)
    return 0


def cmd_priorsim(args) -> int:
    cfg = PriorConfig(T=args.T, nu=args.nu, zeta=args.zeta, xi=args.xi)
    rng = np.random.default_rng(args.seed)
    net = regular_grid(args.p, args.grid)
    sizes = np.empty(args.trials * cfg.T, dtype=np.int64)
    top = np.empty((args.trials, min(3, args.p)))
    for t in range(args.trials):
        eta = sample_eta(args.p, cfg, rng)
        srt = np.sort(eta)[::-1]
        top[t] = np.cumsum(srt)[: top.shape[1]]
        for k in range(cfg.T):
            sizes[t * cfg.T + k] = sample_tree(eta, cfg, net, rng).n_leaves
    rows = []
    vals, counts = np.unique(sizes, return_counts=True)
    for v, c in zip(vals, counts):
        rows.append({"section": "tree_size", "label": f"leaves={v}", "value": c / sizes.size})
    rows.append({"section": "tree_size", "label": "mean", "value": sizes.mean()})
    for s in range(top.shape[1]):
        rows.append({"section": "eta_sparsity", "label": f"top{s + 1}_mass", "value": top[:, s].mean()})
    if args.p >= 2 and args.lemma_trials > 0:
        s_values = [s for s in _ints(args.s) if s <= args.p]
        rep = check_dirichlet_lemma_grid(args.p, s_values, _floats(args.eps), cfg, args.lemma_trials, rng)
        for (s, e), r in rep.items():
            for key in ("P1", "P1_se", "P2", "P2_se", "C1", "C2"):
                rows.append({"section": "lemma", "label": f"s={s};eps={e};{key}", "value": r[key]})
    meta = {"p": args.p, "zeta": args.zeta, "xi": args.xi, "nu": args.nu, "T": args.T, "trials": args.trials, "seed": args.seed}
    write_csv(args.output, rows, "priorsim", args.deterministic, meta)
    return 0


def cmd_kernelcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows, ok = [], True
    for d in _ints(args.d):
        i1, i2 = kernel_integrals(d, args.n_per_axis)
        target = kernel_square_integral(d)
        x = rng.uniform(-1, 1, (args.pairs, d))
        y = rng.uniform(-1, 1, (args.pairs, d))
        gap = np.abs(packing_kernel(x) - packing_kernel(y)) - np.abs(x - y).sum(axis=1)
        viol = int(np.count_nonzero(gap > 1e-12))
        passed = abs(i1) <= 1e-6 and abs(i2 - target) <= 1e-4 and viol == 0
        ok &= passed
        rows.append(
            {"d": d, "int_K": i1, "int_K2": i2, "int_K2_target": target, "lipschitz_violations": viol, "pass": passed}
        )
    write_csv(args.output, rows, "kernelcheck", args.deterministic, {"n_per_axis": args.n_per_axis, "pairs": args.pairs})
    return 0 if ok else 1


def cmd_akd(args) -> int:
    alpha = _floats(args.alpha)
    p, m = args.grid
    S = _ints(args.S) if args.S else list(range(len(alpha)))
    res = akd(Box.unit(p), regular_grid(p, m), alpha, args.L, S)
    rows = []
    for node, lo, hi in zip(res.partition.leaf_nodes, res.leaf_lo, res.leaf_hi):
        row = {"leaf": node}
        row.update({f"lo{j}": lo[j] for j in range(p)})
        row.update({f"hi{j}": hi[j] for j in range(p)})
        rows.append(row)
    meta = {
        "alpha": ",".join(map(str, alpha)),
        "L": args.L,
        "counters": ",".join(map(str, res.counters)),
        "sequence": ",".join(map(str, res.sequence)),
        "complete": res.complete,
    }
    write_csv(args.output, rows, "akd", args.deterministic, meta)
    return 0


def _read_table(path) -> tuple[np.ndarray, np.ndarray | None]:
    _, body = read_csv(path)
    if not body:
        raise SystemExit(f"{path}: no rows")
    xcols = sorted((c for c in body[0] if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    if not xcols:
        raise SystemExit(f"{path}: no x0, x1, ... columns")
    X = np.array([[float(r[c]) for c in xcols] for r in body])
    y = np.array([float(r["y"]) for r in body]) if "y" in body[0] else None
    return X, y


def cmd_fit(args) -> int:
    X, y = _read_table(args.data)
    p = X.shape[1]
    if args.model != "density" and y is None:
        raise SystemExit("regression and classification need a y column")
    if args.net[0] == "design":
        net = from_points(X)
    elif args.net[0] == "grid" and len(args.net) == 2:
        net = regular_grid(p, int(args.net[1]))
    else:
        raise SystemExit("--net takes 'design' or 'grid M'")
    x_pred = _read_table(args.pred)[0] if args.pred else X
    model = ModelSpec(args.model, height_bound=args.height_bound, center=args.center)
    prior = PriorConfig(T=args.trees, nu=args.nu)
    mcmc = MCMCConfig(
        iterations=args.iters,
        burnin=args.burnin if args.burnin is not None else args.iters // 2,
        thin=args.thin,
        seed=args.seed,
        update_eta=not args.fixed_eta,
        store_ensembles=args.model == "density",
    )
    t0 = time.perf_counter()
    post = fit(X, None if args.model == "density" else y, model, net, prior, mcmc, x_pred=x_pred)
    elapsed = time.perf_counter() - t0

    draws = []
    for k in range(post.n_draws):
        row = {"draw": k, "sigma2": post.sigma2[k], "mean_leaves": post.n_leaves[k].mean()}
        row.update({f"eta{j}": post.eta[k, j] for j in range(p)})
        draws.append(row)
    if args.model == "density":
        logd = np.array([log_density(e, x_pred, None if args.net[0] == "design" else net) for e in post.ensembles])
        dens = np.exp(logd)
        mean, lo, hi = dens.mean(axis=0), *np.quantile(dens, [0.05, 0.95], axis=0)
    else:
        mean, lo, hi = post.pred_summary(0.9)
    preds = []
    for i in range(x_pred.shape[0]):
        row = {f"x{j}": x_pred[i, j] for j in range(p)}
        row.update(mean=mean[i], lo90=lo[i], hi90=hi[i])
        preds.append(row)
    meta = {"model": args.model, "trees": args.trees, "iterations": args.iters, "seed": args.seed}
    prefix = args.output
    write_csv(f"{prefix}draws.csv", draws, "fit_draws", args.deterministic, meta)
    write_csv(f"{prefix}predictions.csv", preds, "fit_predictions", args.deterministic, meta)
    report = post.report() + f"\nrun time: {elapsed:.1f} s\n"
    if args.deterministic:
        report = post.report() + "\n"
    with open(f"{prefix}report.txt", "w") as fh:
        fh.write(report)
    print(report, end="", file=sys.stderr)
    return 0


# parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="arborart", description="Tree partitions, split-nets and Bayesian forests.")
    ap.add_argument("--version", action="version", version=f"arborart {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("datagen", help="simulate a data set")
    _experiment_args(sp)
    sp.add_argument("--noise", type=float, help="noise sd overriding sigma0; 0 gives noiseless responses")
    sp.set_defaults(func=cmd_datagen)

    sp = sub.add_parser("simstudy", help="forest vs single tree vs constant, out of sample")
    _experiment_args(sp)
    sp.add_argument("--full", action="store_true", help="100 replicates instead of 20")
    sp.set_defaults(func=cmd_simstudy)

    sp = sub.add_parser("contraction", help="posterior error against sample size")
    _experiment_args(sp)
    sp.add_argument("--n-list", default="250,500,1000,2000")
    sp.set_defaults(func=cmd_contraction)

    for name in ("rate", "approx-rate"):
        sp = sub.add_parser(name, help="approximation error against depth or sample size")
        sp.add_argument("--truth", choices=("power", "sim"), default="power")
        sp.add_argument("--spec", help="saved piecewise spec (overrides --truth)")
        sp.add_argument("--alpha", default="0.25,0.5", help="power truth: exponents = smoothness")
        sp.add_argument("--coef", help="power truth: coefficients (default all 1)")
        sp.add_argument("--p", type=int, default=2, help="sim truth: dimension")
        sp.add_argument("--lam", type=float, default=1.0)
        sp.add_argument("--grid", type=int, default=512)
        sp.add_argument("--L", help="comma-separated depths")
        sp.add_argument("--n-list", help="comma-separated sample sizes")
        sp.add_argument("--emp-points", type=int, default=2000)
        sp.add_argument("--resolution", type=int, default=256)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--output", "-o")
        sp.add_argument("--deterministic", action="store_true")
        sp.set_defaults(func=cmd_rate)

    sp = sub.add_parser("priorsim", help="draws from the tree and splitting-proportion priors")
    sp.add_argument("--p", type=int, default=10)
    sp.add_argument("--zeta", type=float, default=1.0)
    sp.add_argument("--xi", type=float, default=2.0)
    sp.add_argument("--nu", type=float, default=0.25)
    sp.add_argument("--T", type=int, default=1)
    sp.add_argument("--trials", type=int, default=10_000)
    sp.add_argument("--grid", type=int, default=100)
    sp.add_argument("--lemma-trials", type=int, default=100_000)
    sp.add_argument("--s", default="1,2")
    sp.add_argument("--eps", default="0.25,0.5")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output", "-o")
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_priorsim)

    sp = sub.add_parser("kernelcheck", help="integrals and Lipschitz bound of the packing kernel")
    sp.add_argument("--d", default="1,2,3")
    sp.add_argument("--n-per-axis", type=int, default=256)
    sp.add_argument("--pairs", type=int, default=100_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output", "-o")
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_kernelcheck)

    sp = sub.add_parser("akd", help="anisotropic k-d tree on a regular grid")
    sp.add_argument("--alpha", required=True)
    sp.add_argument("--L", type=int, required=True)
    sp.add_argument("--grid", nargs=2, type=int, default=(2, 512), metavar=("P", "M"))
    sp.add_argument("--S", help="coordinates to cut (default 0..len(alpha)-1)")
    sp.add_argument("--output", "-o")
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_akd)

    sp = sub.add_parser("fit", help="run the forest sampler on a CSV data set")
    sp.add_argument("--model", choices=("reg-fixed", "reg-random", "classify", "density"), default="reg-fixed")
    sp.add_argument("--data", required=True, help="CSV with x0, x1, ... and y columns")
    sp.add_argument("--pred", help="CSV with x columns to predict at (default: the data)")
    sp.add_argument("--net", nargs="+", default=["grid", "100"], help="'design' or 'grid M'")
    sp.add_argument("--trees", type=int, default=50)
    sp.add_argument("--nu", type=float, default=0.25)
    sp.add_argument("--iters", type=int, default=1000)
    sp.add_argument("--burnin", type=int)
    sp.add_argument("--thin", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--height-bound", type=float)
    sp.add_argument("--center", action="store_true", help="regression: fit around the response mean")
    sp.add_argument("--fixed-eta", action="store_true", help="keep splitting proportions uniform")
    sp.add_argument("--output", "-o", default="fit_", help="prefix of the output files")
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_fit)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except (ValueError, KeyError, OSError) as exc:
        print(f"arborart {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
