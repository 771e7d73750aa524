"""Data generation, simulation studies and CSV reporting.

Every study derives one independent seed stream per replicate from the master
seed with :class:`numpy.random.SeedSequence`, runs replicates in a process
pool capped by the ``ARBORART_THREADS`` environment variable and merges the
results by replicate index, so the output depends only on the configuration.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import spearmanr

from .approx import build_approximator, choose_L0, eps_bar, measure_error, rate_eps, rate_slope
from .bart import MCMCConfig, ModelSpec, fit
from .funcs import PiecewiseAnisoSpec, PowerPiece, load_spec, sim_function, smooth_spec
from .priors import PriorConfig
from .splitnet import SplitNet, regular_grid

SCHEMA_VERSION = 1
SCENARIOS = ("regression", "classification", "density")


# configuration -----------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Settings shared by the studies.

    Parameters
    ----------
    scenario : str
        ``"regression"``, ``"classification"`` or ``"density"``.
    truth : str
        ``"sim"`` for the simulation function, ``"additive"`` for the built-in
        additive truth, or a path to a saved piecewise spec.
    sigma0 : float
        Noise standard deviation for regression.
    grid : int
        Split-net resolution: ``regular_grid(p, grid)``.
    n_test : int
        Fresh out-of-sample points per replicate.
    workers : int or None
        Process count; ``None`` means the CPU count, capped by
        ``ARBORART_THREADS``.
    """

    scenario: str = "regression"
    truth: str = "sim"
    n: int = 1000
    p: int = 2
    sigma0: float = 0.05
    replicates: int = 20
    seed: int = 0
    grid: int = 100
    n_test: int = 500
    lam: float = 2.0
    output: str | None = None
    deterministic: bool = False
    workers: int | None = None
    prior: PriorConfig = field(default_factory=lambda: PriorConfig(T=200))
    mcmc: MCMCConfig = field(default_factory=lambda: MCMCConfig(iterations=500, burnin=250, update_eta=False))

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.n < 1 or self.p < 1 or self.n_test < 1 or self.grid < 1:
            raise ValueError("n, p, n_test and grid must be positive")

    @property
    def model(self) -> ModelSpec:
        kind = {"regression": "reg-fixed", "classification": "classify", "density": "density"}[self.scenario]
        return ModelSpec(kind, center=self.scenario == "regression")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return low in ("true", "1", "yes")
    if isinstance(like, int) and not isinstance(like, bool):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(float(v) for v in value.split(","))
    if value.strip().lower() == "none":
        return None
    return value.strip()


_NUMERIC_OPTIONAL = {"workers": int, "sigma2_init": float, "height_var": float, "seed": int, "output": str}


def apply_overrides(config: ExperimentConfig, items: dict[str, str]) -> ExperimentConfig:
    """Return ``config`` with string-valued ``key=value`` overrides applied.

    Keys are top-level field names or ``prior.<field>`` / ``mcmc.<field>``.
    """
    top, prior, mcmc = {}, {}, {}
    for key, raw in items.items():
        key = key.strip().replace("-", "_")
        if "." in key:
            group, name = key.split(".", 1)
            target = {"prior": (config.prior, prior), "mcmc": (config.mcmc, mcmc)}.get(group)
            if target is None:
                raise KeyError(f"unknown config group {group!r}")
            obj, out = target
        else:
            name, obj, out = key, config, top
        names = {f.name for f in dataclasses.fields(obj)}
        if name not in names or name in ("prior", "mcmc"):
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(obj, name)
        if current is None:
            text = str(raw).strip()
            out[name] = None if text.lower() == "none" else _NUMERIC_OPTIONAL.get(name, str)(text)
        else:
            out[name] = _coerce(str(raw), current)
    new_prior = dataclasses.replace(config.prior, **prior) if prior else config.prior
    new_mcmc = dataclasses.replace(config.mcmc, **mcmc) if mcmc else config.mcmc
    return dataclasses.replace(config, prior=new_prior, mcmc=new_mcmc, **top)


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path) as fh:
        items = parse_config_text(fh.read())
    return apply_overrides(base or ExperimentConfig(), items)


# truths and data -----------------------------------------------------------------


def additive_truth(p: int, n_terms: int | None = None) -> list[PiecewiseAnisoSpec]:
    """Sum of one-dimensional Hölder components on distinct coordinates.

    Component ``t`` is ``|x_t - 1/2|^a_t`` scaled to unit coefficient, with
    exponents cycling through 1, 1/2, 3/4.
    """
    n_terms = min(p, 3) if n_terms is None else n_terms
    if not 1 <= n_terms <= p:
        raise ValueError("need 1 <= n_terms <= p")
    exps = (1.0, 0.5, 0.75)
    out = []
    for t in range(n_terms):
        a = exps[t % len(exps)]
        out.append(smooth_spec(PowerPiece((1.0,), (a,), (0.5,)), [a], lam=1.0, p=p, S0=(t,)))
    return out


def resolve_truth(truth, p: int) -> Callable:
    """Turn a truth description into a callable on ``(n, p)`` arrays.

    Accepts a callable, a :class:`PiecewiseAnisoSpec`, a list of those (summed),
    or one of the strings ``"sim"``, ``"additive"`` or a spec file path.
    """
    if isinstance(truth, str):
        if truth == "sim":
            return lambda x: sim_function(x, p)
        if truth == "additive":
            return resolve_truth(additive_truth(p), p)
        spec = load_spec(truth)
        if spec.p != p:
            raise ValueError(f"spec has p={spec.p}, config has p={p}")
        return spec
    if isinstance(truth, (list, tuple)):
        parts = [resolve_truth(t, p) for t in truth]
        if not parts:
            raise ValueError("empty additive truth")
        return lambda x: np.sum([f(x) for f in parts], axis=0)
    if callable(truth):
        return truth
    raise TypeError(f"cannot use {type(truth).__name__} as a truth")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray | None
    f: np.ndarray
    scenario: str


def sample_density(f0: Callable, p: int, n: int, rng, resolution: int | None = None) -> np.ndarray:
    """Draw ``n`` points from the density proportional to ``exp(f0)``.

    The density is tabulated at the midpoints of a regular grid; a cell is
    drawn by inverting the cumulative cell masses and the point is uniform
    inside the cell.
    """
    if resolution is None:
        resolution = max(2, int(round(2_000_000 ** (1 / p))) if p > 1 else 4096)
        resolution = min(resolution, 4096)
    axis = (np.arange(resolution) + 0.5) / resolution
    mesh = np.meshgrid(*([axis] * p), indexing="ij")
    mids = np.stack([m.ravel() for m in mesh], axis=1)
    logw = np.asarray(f0(mids), dtype=float)
    w = np.exp(logw - logw.max())
    cdf = np.cumsum(w)
    cells = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    cells = np.minimum(cells, mids.shape[0] - 1)
    return mids[cells] + (rng.random((n, p)) - 0.5) / resolution


def generate_data(config: ExperimentConfig, truth, rng=None, n: int | None = None, noise: float | None = None) -> Dataset:
    """Uniform design plus responses under the configured scenario.

    ``noise`` overrides ``config.sigma0`` (``0`` gives noiseless responses).
    For densities ``X`` is the sample and ``f`` holds ``f0`` at the sample.
    """
    rng = np.random.default_rng(rng)
    n = config.n if n is None else n
    f0 = resolve_truth(truth, config.p)
    if config.scenario == "density":
        X = sample_density(f0, config.p, n, rng)
        return Dataset(X, None, np.asarray(f0(X), dtype=float), "density")
    X = rng.random((n, config.p))
    f = np.asarray(f0(X), dtype=float)
    if config.scenario == "regression":
        sd = config.sigma0 if noise is None else noise
        if sd < 0:
            raise ValueError("noise must be nonnegative")
        y = f + sd * rng.standard_normal(n)
    else:
        y = (rng.random(n) < expit(f)).astype(float)
    return Dataset(X, y, f, config.scenario)


# parallel execution -----------------------------------------------------------------


def worker_count(requested: int | None, tasks: int) -> int:
    cap = os.environ.get("ARBORART_THREADS")
    n = requested if requested is not None else (os.cpu_count() or 1)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, min(n, tasks))


def _map(fn, args: list, workers: int) -> list:
    if workers == 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, args))


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# simulation study -----------------------------------------------------------------

ARMS = ("bart", "single_tree", "constant")


def _fit_arm(cfg: ExperimentConfig, T: int, data: Dataset, X_test: np.ndarray, seed: int) -> np.ndarray:
    prior = dataclasses.replace(cfg.prior, T=T)
    mcmc = dataclasses.replace(cfg.mcmc, seed=seed, store_ensembles=False)
    post = fit(data.X, data.y, cfg.model, regular_grid(cfg.p, cfg.grid), prior, mcmc, x_pred=X_test)
    mean = post.pred_summary()[0]
    return expit(mean) if cfg.scenario == "classification" else mean


def _simstudy_replicate(args) -> list[dict]:
    cfg, truth, rep, ss = args
    s_data, s_test, s_bart, s_tree = ss.spawn(4)
    data = generate_data(cfg, truth, np.random.default_rng(s_data))
    test = generate_data(cfg, truth, np.random.default_rng(s_test), n=cfg.n_test)
    f_test = expit(test.f) if cfg.scenario == "classification" else test.f
    preds = {
        "bart": _fit_arm(cfg, cfg.prior.T, data, test.X, _seed_int(s_bart)),
        "single_tree": _fit_arm(cfg, 1, data, test.X, _seed_int(s_tree)),
        "constant": np.full(cfg.n_test, data.y.mean()),
    }
    rows = []
    for arm in ARMS:
        pred = preds[arm]
        rows.append(
            {
                "replicate": rep,
                "arm": arm,
                "rmspe": float(np.sqrt(np.mean((test.y - pred) ** 2))),
                "rmse_truth": float(np.sqrt(np.mean((f_test - pred) ** 2))),
            }
        )
    return rows


def run_simstudy(config: ExperimentConfig, truth=None) -> list[dict]:
    """Out-of-sample comparison of the forest, a single tree and the sample mean.

    Each replicate draws a training set of size ``n`` and ``n_test`` fresh
    points. ``rmspe`` compares predictions with the fresh noisy responses,
    ``rmse_truth`` with the noiseless truth. Rows are ordered by replicate,
    then arm. ``truth`` defaults to ``config.truth``.
    """
    if config.scenario == "density":
        raise ValueError("the simulation study needs responses")
    truth = config.truth if truth is None else truth
    seqs = np.random.SeedSequence(config.seed).spawn(config.replicates)
    tasks = [(config, truth, r, s) for r, s in enumerate(seqs)]
    out = _map(_simstudy_replicate, tasks, worker_count(config.workers, len(tasks)))
    return [row for rows in out for row in rows]


def summarize_simstudy(rows: Sequence[dict], key: str = "rmspe") -> dict[str, float]:
    """Mean of ``key`` per arm."""
    out = {}
    for arm in dict.fromkeys(r["arm"] for r in rows):
        out[arm] = float(np.mean([r[key] for r in rows if r["arm"] == arm]))
    return out


# contraction study -----------------------------------------------------------------


def _contraction_replicate(args) -> dict:
    cfg, truth, n, rep, ss = args
    s_data, s_fit = ss.spawn(2)
    data = generate_data(cfg, truth, np.random.default_rng(s_data), n=n)
    mcmc = dataclasses.replace(cfg.mcmc, seed=_seed_int(s_fit), store_ensembles=False)
    post = fit(data.X, data.y, cfg.model, regular_grid(cfg.p, cfg.grid), cfg.prior, mcmc)
    err = float(np.sqrt(np.mean((post.fit_mean - data.f) ** 2)))
    s2 = float(post.sigma2.mean())
    return {"n": n, "replicate": rep, "emp_l2_err": err, "sigma2_mean": s2}


def run_contraction_study(config: ExperimentConfig, truth=None, n_list: Sequence[int] = (250, 500, 1000, 2000)) -> dict:
    """Posterior error against sample size for regression.

    For every ``n`` and replicate the chain is fitted to fresh data; the error
    is the empirical L2 distance between the posterior mean fit and the truth
    at the design points. Returns ``{"rows", "table", "slope", "spearman"}``
    where ``table`` averages over replicates and carries the rate column
    ``rate_eps(n, p, p, lam, 2^p, 1)`` of the simulation function.
    """
    if config.scenario != "regression":
        raise ValueError("the contraction study is for regression")
    truth = config.truth if truth is None else truth
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be increasing")
    root = np.random.SeedSequence(config.seed)
    tasks = []
    for n, ss_n in zip(n_list, root.spawn(len(n_list))):
        for r, ss in enumerate(ss_n.spawn(config.replicates)):
            tasks.append((config, truth, n, r, ss))
    rows = _map(_contraction_replicate, tasks, worker_count(config.workers, len(tasks)))
    s02 = config.sigma0**2
    table = []
    for n in n_list:
        sub = [r for r in rows if r["n"] == n]
        err = float(np.mean([r["emp_l2_err"] for r in sub]))
        s2 = float(np.mean([r["sigma2_mean"] for r in sub]))
        rate = rate_eps(n, config.p, config.p, config.lam, 2**config.p, 1.0) if config.p >= 2 else math.nan
        table.append({"n": n, "emp_l2_err": err, "sigma2_mean": s2, "sigma2_abs_dev": abs(s2 - s02), "rate_eps": rate})
    errs = [t["emp_l2_err"] for t in table]
    slope = rate_slope(n_list, errs) if len(n_list) >= 3 else float("nan")
    rho = float(spearmanr(n_list, errs)[0]) if len(n_list) >= 2 else float("nan")
    return {"rows": rows, "table": table, "slope": slope, "spearman": rho}


# approximation decay -----------------------------------------------------------------


def run_approx_study(
    spec: PiecewiseAnisoSpec,
    net: SplitNet,
    n_list: Sequence[float] | None = None,
    L_list: Sequence[int] | None = None,
    emp_points: int = 2000,
    resolution: int = 256,
    seed: int = 0,
) -> list[dict]:
    """Errors of the constructive tree approximator as the depth grows.

    Depths come from ``L_list`` or from ``choose_L0`` at each ``n`` in
    ``n_list``. ``eps_bar`` and ``n`` are NaN for rows given by depth.
    """
    if (n_list is None) == (L_list is None):
        raise ValueError("give exactly one of n_list and L_list")
    if n_list is not None:
        plan = [(float(n), choose_L0(n, spec.d, spec.lam, spec.R, spec.abar)) for n in n_list]
    else:
        plan = [(math.nan, int(L)) for L in L_list]
    pts = np.random.default_rng(seed).random((emp_points, spec.p))
    rows = []
    for n, L in plan:
        approx = build_approximator(spec, net, L0=L)
        rows.append(
            {
                "n": n,
                "L0": L,
                "n_leaves": approx.n_leaves,
                "sup_err": approx.sup_error_leafwise(spec),
                "L2_err": measure_error(spec, approx, "L2", resolution=resolution, p=spec.p, rng=seed),
                "emp_err": measure_error(spec, approx, "empirical", points=pts),
                "eps_bar": math.nan if math.isnan(n) else eps_bar(n, spec.d, spec.lam, spec.R, spec.abar),
            }
        )
    return rows


# CSV -----------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def format_csv(rows: Sequence[dict], kind: str, deterministic: bool = False, meta: dict | None = None) -> str:
    """CSV text with ``#`` header lines declaring the schema.

    The header records ``schema = arborart.<kind>/<version>``, any ``meta``
    pairs and, unless ``deterministic``, a UTC creation timestamp.
    """
    buf = io.StringIO()
    buf.write(f"# schema = arborart.{kind}/{SCHEMA_VERSION}\n")
    for k, v in (meta or {}).items():
        buf.write(f"# {k} = {_fmt(v)}\n")
    if not deterministic:
        stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        buf.write(f"# created = {stamp}\n")
    if rows:
        cols = list(rows[0].keys())
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()


def write_csv(path, rows, kind: str, deterministic: bool = False, meta: dict | None = None) -> str:
    text = format_csv(rows, kind, deterministic, meta)
    if path is None or path == "-":
        print(text, end="")
    else:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def read_csv(path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Header pairs and data rows (as strings) of a file written by :func:`write_csv`."""
    meta, body = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                k, _, v = line[1:].partition("=")
                meta[k.strip()] = v.strip()
            else:
                body.append(line)
    return meta, list(csv.DictReader(body))
