"""True-environment evaluation and the 10th-percentile robustness metric.

The robust score of a training run pools the evaluation returns of every
policy produced in the final 10% of iterations, across all seeds, and
reports the 10th percentile of that pool. Its uncertainty is taken as 1.7
times the standard error of the pooled mean: for normal data the sampling
spread of a 10th percentile is about that much wider than the mean's. The
pooled values are treated as independent draws even though consecutive
iterations of one run are correlated; no correction is made for that.

Percentiles use the nearest-rank rule (sort ascending, take index
``ceil(q * n) - 1``) so every number is reproducible bit for bit.
"""
from __future__ import annotations

import csv
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import envsuite
from .dynmodel import EnsembleConfig, compute_norm_stats, train_ensemble
from .errors import ContractError
from .policyopt import MooseConfig, train_policy
from .seeding import derive_rng
from .supportvae import VaeConfig, train_vae

log = logging.getLogger(__name__)

STDERR_FACTOR = 1.7
ALGORITHMS = ("moose", "ablation", "bc")
CURVE_HEADER = ("seed", "iteration", "true_return")
SUMMARY_HEADER = ("tier", "epsilon", "algorithm", "percentile10", "stderr", "n_pooled")
_CURVE_NAME = re.compile(r"^(?P<tier>[a-z]+)_eps(?P<eps>[0-9.]+)_(?P<algo>[a-z]+)\.csv$")


@dataclass
class PerfMatrix:
    """True returns indexed by (seed, evaluated iteration)."""

    values: np.ndarray
    seeds: list
    iterations: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractError("performance matrix must be 2-D (seeds x iterations)")
        if self.values.shape != (len(self.seeds), len(self.iterations)):
            raise ContractError(f"matrix shape {self.values.shape} does not match "
                                f"{len(self.seeds)} seeds x {len(self.iterations)} iterations")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("performance matrix has non-finite entries")

    @property
    def n_seeds(self):
        return self.values.shape[0]

    @property
    def n_iterations(self):
        return self.values.shape[1]

    @classmethod
    def from_rows(cls, rows):
        """Build from ``(seed, iteration, value)`` rows; every seed must cover the same iterations."""
        by_seed = {}
        for seed, it, value in rows:
            by_seed.setdefault(int(seed), {})[int(it)] = float(value)
        if not by_seed:
            return cls(np.zeros((0, 0)), [], [])
        seeds = sorted(by_seed)
        iterations = sorted(by_seed[seeds[0]])
        for s in seeds:
            if sorted(by_seed[s]) != iterations:
                raise ContractError(f"seed {s} covers different iterations than seed {seeds[0]}")
        return cls(np.array([[by_seed[s][i] for i in iterations] for s in seeds]), seeds, iterations)

    def rows(self):
        for i, seed in enumerate(self.seeds):
            for j, it in enumerate(self.iterations):
                yield seed, it, float(self.values[i, j])


@dataclass
class RobustSummary:
    percentile10: float
    stderr: float
    n_pooled: int


def _act_fn(policy):
    if callable(policy) and not hasattr(policy, "act"):
        return policy
    if isinstance(policy, envsuite.BehaviorPolicy):
        return lambda s: envsuite.behavior_action(policy, s)
    return policy.act


def evaluate_policy(env, policy, n_traj=10, traj_len=100, seed=0, starts=None):
    """Mean undiscounted true return over ``n_traj`` seeded episodes.

    ``policy`` may be a :class:`DeterministicPolicy`, a behavior policy, or a
    plain callable mapping a state batch to an action batch. ``starts``
    overrides the seeded start states.
    """
    if n_traj < 1:
        raise ContractError("need at least one evaluation trajectory")
    if starts is None:
        starts = envsuite.reset(env, derive_rng(seed, "eval-starts"), n_traj)
    elif len(starts) != n_traj:
        raise ContractError(f"expected {n_traj} start states, got {len(starts)}")
    returns = envsuite.rollout_return(env, _act_fn(policy), starts, traj_len, derive_rng(seed, "eval-noise"))
    return float(returns.mean())


def nearest_rank(values, q):
    """The ``q`` quantile of ``values`` by nearest rank."""
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if values.size == 0:
        raise ContractError("cannot take a percentile of an empty pool")
    return float(values[max(math.ceil(q * values.size) - 1, 0)])


def robust_percentile(perf, tail_fraction=0.10, q=0.10):
    if perf.n_seeds == 0 or perf.n_iterations == 0:
        raise ContractError("empty performance pool")
    if perf.n_iterations < 10:
        raise ContractError(f"need at least 10 evaluated iterations, got {perf.n_iterations}")
    tail = math.ceil(tail_fraction * perf.n_iterations)
    pool = perf.values[:, -tail:].ravel()
    n = pool.size
    sem = pool.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
    return RobustSummary(nearest_rank(pool, q), STDERR_FACTOR * float(sem), int(n))


# -- Monte Carlo checks ---------------------------------------------------------------

def mc_percentile_factor(n, reps, rng, q=0.10, chunk=2000):
    """Spread of the sample ``q`` quantile relative to the spread of the sample mean.

    Each of ``reps`` replicates draws ``n`` standard normals. Replicates are
    generated in chunks so memory stays bounded.
    """
    if n < 100 or reps < 10_000:
        raise ContractError("need n >= 100 and reps >= 10^4")
    k = max(math.ceil(q * n) - 1, 0)
    quant = np.empty(reps)
    means = np.empty(reps)
    for lo in range(0, reps, chunk):
        x = rng.standard_normal((min(chunk, reps - lo), n))
        quant[lo:lo + len(x)] = np.partition(x, k, axis=1)[:, k]
        means[lo:lo + len(x)] = x.mean(axis=1)
    return float(quant.std() / means.std())


def asymptotic_percentile_factor(q=0.10):
    """``sqrt(q (1 - q)) / phi(z_q)``: the large-sample limit of :func:`mc_percentile_factor`."""
    from statistics import NormalDist
    nd = NormalDist()
    return math.sqrt(q * (1 - q)) / nd.pdf(nd.inv_cdf(q))


def mc_gaussian_square(reps, s, rng):
    """Monte Carlo mean of X^2 for X ~ N(0, s^2)."""
    if reps < 100_000:
        raise ContractError("need reps >= 10^5")
    x = rng.normal(0.0, s, size=reps)
    return float(np.mean(x * x))


# -- experiment grid ------------------------------------------------------------------

@dataclass
class GridSettings:
    """Everything a grid cell needs besides (tier, epsilon, seed)."""

    env: str = "pointmass"
    n_steps: int = 20000
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    moose: MooseConfig = field(default_factory=MooseConfig)
    clone: envsuite.CloneConfig = field(default_factory=envsuite.CloneConfig)
    eval_traj: int = 10
    eval_len: int = 100
    eval_interval: int = 1


@dataclass
class GridResult:
    perf: dict  # (tier, eps, algo) -> PerfMatrix
    summary: dict  # (tier, eps, algo) -> RobustSummary
    failed: list  # (tier, eps, algo, seed, message)
    dataset_returns: dict  # (tier, eps, seed) -> mean episode return


def curve_name(tier, eps, algo):
    return f"{tier}_eps{eps:g}_{algo}.csv"


def parse_curve_name(name):
    m = _CURVE_NAME.match(name)
    if m is None:
        return None
    return m["tier"], float(m["eps"]), m["algo"]


def _tracker(env, settings, seed):
    curve = []

    def record(it, policy):
        if it >= 1 and it % settings.eval_interval == 0:
            curve.append((it, evaluate_policy(env, policy, settings.eval_traj, settings.eval_len, seed)))
    return curve, record


def run_unit(tier, eps, seed, algorithms, settings):
    """Train every requested algorithm on one (tier, epsilon, seed) dataset.

    Returns ``(dataset mean episode return, {algo: curve or error message})``.
    """
    env = envsuite.make_env(settings.env)
    data = envsuite.generate_dataset(env, envsuite.behavior_policy(env, tier), eps, settings.n_steps, seed)
    out = {}
    ens = vae = None
    for algo in algorithms:
        curve, record = _tracker(env, settings, seed)
        try:
            if algo == "bc":
                envsuite.clone_behavior(data, replace(settings.clone, seed=seed), callback=record)
            else:
                if ens is None:
                    stats = compute_norm_stats(data)
                    ens = train_ensemble(data, replace(settings.ensemble, seed=seed), stats)
                    vae = train_vae(data, stats, replace(settings.vae, seed=seed))
                cfg = replace(settings.moose, seed=seed, lam=1.0 if algo == "ablation" else settings.moose.lam)
                train_policy(data, ens, vae, cfg, callback=record)
            out[algo] = curve
        except Exception as exc:  # a failed cell is recorded, the grid carries on
            log.warning("cell %s eps=%g %s seed=%d failed: %s", tier, eps, algo, seed, exc)
            out[algo] = f"{type(exc).__name__}: {exc}"
    return data.mean_episode_return(), out


def run_experiment_grid(tiers, epsilons, algorithms, seeds, settings=None, out_dir=None, jobs=1):
    """Run every (tier, epsilon, algorithm) cell over ``seeds``.

    With ``out_dir`` set, writes one curve CSV per cell under ``curves/``,
    ``summary.csv``, and ``failed.csv`` when any cell failed.
    """
    settings = settings or GridSettings()
    seeds = sorted(int(s) for s in seeds)
    if len(seeds) < 1:
        raise ContractError("need at least one seed")
    for algo in algorithms:
        if algo not in ALGORITHMS:
            raise ContractError(f"unknown algorithm {algo!r}; choose from {ALGORITHMS}")
    units = [(t, float(e), s) for t in tiers for e in epsilons for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_unit, t, e, s, list(algorithms), settings) for t, e, s in units]
            results = [f.result() for f in futures]
    else:
        results = [run_unit(t, e, s, list(algorithms), settings) for t, e, s in units]

    result = GridResult({}, {}, [], {})
    for (t, e, s), (ds_ret, _) in zip(units, results):
        result.dataset_returns[(t, e, s)] = ds_ret
    for t in tiers:
        for e in map(float, epsilons):
            for algo in algorithms:
                rows, errors = [], []
                for (ut, ue, us), (_, curves) in zip(units, results):
                    if (ut, ue) != (t, e):
                        continue
                    c = curves[algo]
                    if isinstance(c, str):
                        errors.append((t, e, algo, us, c))
                    else:
                        rows.extend((us, it, v) for it, v in c)
                if errors:
                    result.failed.extend(errors)
                    continue
                perf = PerfMatrix.from_rows(rows)
                result.perf[(t, e, algo)] = perf
                try:
                    result.summary[(t, e, algo)] = robust_percentile(perf)
                except ContractError as exc:
                    log.warning("cell %s eps=%g %s has no summary: %s", t, e, algo, exc)
    if out_dir is not None:
        write_grid(result, out_dir)
    return result


# -- files -----------------------------------------------------------------------------

def _fmt(x):
    return format(float(x), ".17g")


def write_curve_csv(path, rows, append=False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with open(path, "a" if not new else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(CURVE_HEADER)
        for seed, it, v in rows:
            w.writerow((int(seed), int(it), _fmt(v)))


def read_curve_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CURVE_HEADER:
            raise ContractError(f"{path}: expected header {','.join(CURVE_HEADER)}")
        return [(int(r[0]), int(r[1]), float(r[2])) for r in reader if r]


def write_summary_csv(path, summary):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for (tier, eps, algo) in sorted(summary):
            rs = summary[(tier, eps, algo)]
            w.writerow((tier, format(eps, "g"), algo, _fmt(rs.percentile10), _fmt(rs.stderr), rs.n_pooled))


def read_summary_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return {(r["tier"], float(r["epsilon"]), r["algorithm"]):
                RobustSummary(float(r["percentile10"]), float(r["stderr"]), int(r["n_pooled"]))
                for r in reader}


def write_grid(result, out_dir):
    out = Path(out_dir)
    for (t, e, algo), perf in sorted(result.perf.items()):
        write_curve_csv(out / "curves" / curve_name(t, e, algo), perf.rows())
    write_summary_csv(out / "summary.csv", result.summary)
    with open(out / "dataset_returns.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("tier", "epsilon", "seed", "mean_episode_return"))
        for (t, e, s), v in sorted(result.dataset_returns.items()):
            w.writerow((t, format(e, "g"), s, _fmt(v)))
    if result.failed:
        with open(out / "failed.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("tier", "epsilon", "algorithm", "seed", "error"))
            for t, e, algo, s, msg in sorted(result.failed):
                w.writerow((t, format(e, "g"), algo, s, msg))
