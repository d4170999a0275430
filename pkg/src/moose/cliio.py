"""Command-line interface and run configuration.

Settings live in one flat ``key = value`` file; any key can be overridden
by the flag of the same name (underscores become dashes). Relative output
paths resolve under ``$MOOSE_OUTPUT_ROOT`` when it is set, otherwise under
the working directory. Inputs are never redirected.

Exit codes: 0 success, 1 runtime failure, 2 usage or contract error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dynmodel, envsuite, evalrobust, supportvae
from .dynmodel import DynamicsEnsemble
from .errors import ContractError, DivergenceError
from .policy import DeterministicPolicy
from .policyopt import MooseConfig, imagined_vs_true_gap, train_policy
from .seeding import derive_rng
from .supportvae import SupportVAE

log = logging.getLogger("moose")

OUTPUT_ROOT_ENV = "MOOSE_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
DIAGNOSTICS_HEADER = ("step", "E[R]", "E[P]", "loss")


class UsageError(Exception):
    pass


def _opt(default, kind, doc):
    return field(default=default, metadata={"kind": kind, "doc": doc})


@dataclass
class RunConfig:
    # data
    env: str = _opt("pointmass", "str", "environment: pointmass or noisy-pointmass")
    tier: str = _opt("mediocre", "str", "behavior tier: bad, mediocre or optimized")
    epsilon: float = _opt(0.4, "float", "probability of a uniform random action during data generation")
    steps: int = _opt(20000, "int", "transitions to generate (multiple of the episode length)")
    seed: int = _opt(0, "int", "top-level seed for a single run")
    dataset: str = _opt("", "str", "dataset file to train on")
    out: str = _opt("", "str", "output file (gen-data) or directory (train, grid, report)")
    # dynamics ensemble
    members: int = _opt(4, "int", "ensemble size K")
    mode: str = _opt("delta", "str", "dynamics parameterization: delta or direct")
    reward_head: bool = _opt(False, "bool", "train a reward output on every member")
    model_hidden: tuple = _opt((64, 64), "ints", "hidden widths of each member")
    model_epochs: int = _opt(50, "int", "ensemble training epochs")
    model_batch: int = _opt(500, "int", "ensemble minibatch size")
    model_lr: float = _opt(1e-4, "float", "ensemble Adam learning rate")
    # support VAE
    vae_hidden: int = _opt(128, "int", "VAE hidden width")
    vae_epochs: int = _opt(50, "int", "VAE training epochs")
    vae_batch: int = _opt(500, "int", "VAE minibatch size")
    vae_lr: float = _opt(1e-4, "float", "VAE Adam learning rate")
    # policy search
    lam: float = _opt(0.01, "float", "weight of the return against the support penalty (flag --lambda)")
    eta: float = _opt(0.5, "float", "weight of the worst member in the return estimate")
    gamma: float = _opt(0.97, "float", "discount factor")
    horizon: int = _opt(50, "int", "imagined rollout length")
    n_starts: int = _opt(100, "int", "start states per policy update")
    optimizer: str = _opt("sgd", "str", "policy optimizer: sgd or adam")
    policy_lr: float = _opt(1e-4, "float", "policy learning rate")
    policy_steps: int = _opt(1000, "int", "policy updates")
    policy_hidden: tuple = _opt((64, 64), "ints", "policy hidden widths")
    episode_starts_only: bool = _opt(False, "bool", "sample start states only from episode starts")
    learned_reward: bool = _opt(False, "bool", "use the ensemble's reward head instead of the known reward")
    # behavior cloning
    clone_epochs: int = _opt(50, "int", "behavior-cloning epochs")
    clone_lr: float = _opt(1e-3, "float", "behavior-cloning Adam learning rate")
    # evaluation and grid
    eval_traj: int = _opt(10, "int", "evaluation episodes per policy")
    eval_len: int = _opt(100, "int", "evaluation episode length")
    eval_interval: int = _opt(1, "int", "evaluate every this many iterations")
    tiers: tuple = _opt(("mediocre",), "strs", "grid behavior tiers")
    epsilons: tuple = _opt((0.2, 0.4), "floats", "grid exploration rates")
    algorithms: tuple = _opt(("moose", "ablation", "bc"), "strs", "grid algorithms: moose, ablation, bc")
    seeds: tuple = _opt((0, 1, 2, 3, 4), "ints", "grid seeds")
    jobs: int = _opt(1, "int", "grid worker processes")

    def validate(self):
        if self.env not in envsuite.ENVS:
            raise ContractError(f"unknown env {self.env!r}; choose from {sorted(envsuite.ENVS)}")
        for t in (self.tier, *self.tiers):
            if t not in envsuite.TIERS:
                raise ContractError(f"unknown tier {t!r}; choose from {envsuite.TIERS}")
        for e in (self.epsilon, *self.epsilons):
            if not 0.0 <= e <= 1.0:
                raise ContractError(f"epsilon must lie in [0, 1], got {e}")
        if self.mode not in ("delta", "direct"):
            raise ContractError(f"unknown model mode {self.mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        for a in self.algorithms:
            if a not in evalrobust.ALGORITHMS:
                raise ContractError(f"unknown algorithm {a!r}")
        if self.eval_interval < 1 or self.jobs < 1 or self.eval_traj < 1:
            raise ContractError("eval_interval, eval_traj and jobs must be positive")
        self.moose_config()  # range checks on lambda, eta, gamma, horizon
        return self

    # -- component configs --
    def ensemble_config(self, seed=None):
        return dynmodel.EnsembleConfig(members=self.members, mode=self.mode, reward_head=self.reward_head,
                                       hidden=self.model_hidden, epochs=self.model_epochs,
                                       batch_size=self.model_batch, lr=self.model_lr,
                                       seed=self.seed if seed is None else seed)

    def vae_config(self, seed=None):
        return supportvae.VaeConfig(hidden=self.vae_hidden, epochs=self.vae_epochs, batch_size=self.vae_batch,
                                    lr=self.vae_lr, seed=self.seed if seed is None else seed)

    def moose_config(self, seed=None):
        return MooseConfig(lam=self.lam, eta=self.eta, gamma=self.gamma, horizon=self.horizon,
                           n_starts=self.n_starts, optimizer=self.optimizer, lr=self.policy_lr,
                           steps=self.policy_steps, hidden=self.policy_hidden,
                           episode_starts_only=self.episode_starts_only, learned_reward=self.learned_reward,
                           seed=self.seed if seed is None else seed)

    def clone_config(self, seed=None):
        return envsuite.CloneConfig(epochs=self.clone_epochs, lr=self.clone_lr, hidden=self.policy_hidden,
                                    seed=self.seed if seed is None else seed)

    def grid_settings(self):
        return evalrobust.GridSettings(env=self.env, n_steps=self.steps, ensemble=self.ensemble_config(),
                                       vae=self.vae_config(), moose=self.moose_config(),
                                       clone=self.clone_config(), eval_traj=self.eval_traj,
                                       eval_len=self.eval_len, eval_interval=self.eval_interval)

    # -- text form --
    def to_text(self):
        lines = []
        for f in fields(self):
            lines.append(f"# {f.metadata['doc']}")
            lines.append(f"{f.name} = {format_value(f.metadata['kind'], getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, base=None):
        return base_update(base or cls(), parse_pairs(text))


_KINDS = {f.name: f.metadata["kind"] for f in fields(RunConfig)}


def parse_value(kind, raw):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        items = [x.strip() for x in raw.split(",") if x.strip()]
        conv = {"ints": int, "floats": float, "strs": str}[kind]
        return tuple(conv(x) for x in items)
    except ValueError:
        raise ContractError(f"cannot read {raw!r} as {kind}") from None


def format_value(kind, value):
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind in ("ints", "floats", "strs"):
        return ",".join(repr(float(v)) if kind == "floats" else str(v) for v in value)
    return str(value)


def parse_pairs(text):
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"config line {n}: expected key = value")
        key, raw = (x.strip() for x in line.split("=", 1))
        if key not in _KINDS:
            raise ContractError(f"config line {n}: unknown key {key!r}")
        pairs[key] = parse_value(_KINDS[key], raw)
    return pairs


def base_update(cfg, pairs):
    unknown = set(pairs) - set(_KINDS)
    if unknown:
        raise ContractError(f"unknown config keys: {sorted(unknown)}")
    return replace(cfg, **pairs)


def load_config(path):
    return RunConfig.from_text(Path(path).read_text())


# -- paths and small writers ----------------------------------------------------------

def output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or os.getcwd())


def resolve_output(path):
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


def write_diagnostics(path, rows, lam, eta):
    flag = " unpenalized" if lam == 1.0 else ""
    with open(path, "w", newline="") as fh:
        fh.write(f"# moose diagnostics lambda={lam!r} eta={eta!r}{flag}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAGNOSTICS_HEADER)
        for step, er, ep, loss in rows:
            w.writerow((step, format(er, ".17g"), format(ep, ".17g"), format(loss, ".17g")))


def read_diagnostics(path):
    with open(path) as fh:
        comment = fh.readline().rstrip("\n")
        rows = [r for r in csv.reader(fh) if r]
    return comment, rows


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(cfg):
    if not cfg.out:
        raise UsageError("gen-data needs --out")
    env = envsuite.make_env(cfg.env)
    data = envsuite.generate_dataset(env, envsuite.behavior_policy(env, cfg.tier), cfg.epsilon, cfg.steps, cfg.seed)
    out = resolve_output(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save(out)
    lo, hi = data.state_ranges()
    print(f"wrote {len(data)} transitions ({data.n_episodes} episodes) to {out}")
    print(f"mean reward {data.r.mean():.6f}  mean episode return {data.mean_episode_return():.4f}")
    for i in range(env.state_dim):
        print(f"state[{i}] range [{lo[i]:.4f}, {hi[i]:.4f}]")
    return EXIT_OK


def _load_dataset(cfg):
    if not cfg.dataset:
        raise UsageError("--dataset is required")
    path = Path(cfg.dataset)
    if not path.exists():
        raise UsageError(f"dataset {path} not found")
    return envsuite.Dataset.load(path)


def cmd_train(cfg, algorithm="moose", ensemble_path=None, vae_path=None):
    if not cfg.out:
        raise UsageError("train needs --out")
    data = _load_dataset(cfg)
    out = resolve_output(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    if algorithm == "bc":
        policy = envsuite.clone_behavior(data, cfg.clone_config())
        policy.save(out / "policy.ckpt", {"algorithm": "bc"})
        print(f"wrote behavior-clone policy to {out / 'policy.ckpt'}")
        return EXIT_OK

    stats = dynmodel.compute_norm_stats(data)
    if ensemble_path:
        ens = DynamicsEnsemble.load(ensemble_path)
        dynmodel.check_stats(ens, stats)
    else:
        ens = dynmodel.train_ensemble(data, cfg.ensemble_config(), stats)
        log.info("ensemble held-out MSE per member: %s", np.array2string(np.asarray(ens.holdout_mse), precision=6))
    if vae_path:
        vae = SupportVAE.load(vae_path)
        supportvae.check_stats(vae, stats)
    else:
        vae = supportvae.train_vae(data, stats, cfg.vae_config())
    ens.save(out / "ensemble.ckpt")
    vae.save(out / "vae.ckpt")

    mc = cfg.moose_config()
    diag_path = out / "diagnostics.csv"
    try:
        policy, diagnostics = train_policy(data, ens, vae, mc)
    except DivergenceError as exc:
        write_diagnostics(diag_path, getattr(exc, "diagnostics", []), mc.lam, mc.eta)
        print(f"error: {exc}; diagnostics so far in {diag_path}", file=sys.stderr)
        return EXIT_RUNTIME
    write_diagnostics(diag_path, diagnostics, mc.lam, mc.eta)
    policy.save(out / "policy.ckpt", {"algorithm": "ablation" if mc.lam == 1.0 else "moose"})
    print(f"held-out model MSE per member: {', '.join(f'{m:.2e}' for m in ens.holdout_mse)}")
    if diagnostics:
        step, er, ep, loss = diagnostics[-1]
        print(f"final step {step}: E[R]={er:.4f} E[P]={ep:.4f} loss={loss:.4f}")
    print(f"wrote checkpoints and {diag_path.name} to {out}")
    return EXIT_OK


def cmd_eval(cfg, policy_path, iteration=0, curve=None, gap=False, ensemble_path=None):
    path = Path(policy_path)
    if not path.exists():
        raise UsageError(f"policy checkpoint {path} not found")
    policy = DeterministicPolicy.load(path)
    env = envsuite.make_env(cfg.env)
    ret = evalrobust.evaluate_policy(env, policy, cfg.eval_traj, cfg.eval_len, cfg.seed)
    print(f"true return {ret:.6f} over {cfg.eval_traj} episodes of {cfg.eval_len} steps")
    if curve:
        evalrobust.write_curve_csv(resolve_output(curve), [(cfg.seed, iteration, ret)], append=True)
    if gap:
        if not ensemble_path:
            raise UsageError("--gap needs --ensemble")
        ens = DynamicsEnsemble.load(ensemble_path)
        imagined, true = imagined_vs_true_gap(policy, ens, env, cfg.horizon, cfg.eval_traj, cfg.seed)
        print(f"imagined {imagined:.6f} true {true:.6f} gap {imagined - true:.6f}")
    return EXIT_OK


def collect_curves(directory):
    """Read every curve CSV under ``directory``; inconsistent files are skipped with a warning."""
    directory = Path(directory)
    perf = {}
    if not directory.is_dir():
        return perf
    files = sorted(set(directory.glob("*.csv")) | set(directory.glob("curves/*.csv")))
    for f in files:
        key = evalrobust.parse_curve_name(f.name)
        if key is None:
            continue
        try:
            perf[key] = evalrobust.PerfMatrix.from_rows(evalrobust.read_curve_csv(f))
        except (ContractError, ValueError, IndexError) as exc:
            log.warning("skipping %s: %s", f, exc)
    return perf


def summarize(perf):
    summary = {}
    for key, pm in sorted(perf.items()):
        try:
            summary[key] = evalrobust.robust_percentile(pm)
        except ContractError as exc:
            log.warning("no summary for %s: %s", key, exc)
    return summary


def curve_bands(perf):
    """Per cell: (iterations, mean over seeds, std over seeds)."""
    return {key: (np.asarray(pm.iterations), pm.values.mean(axis=0), pm.values.std(axis=0))
            for key, pm in sorted(perf.items()) if pm.n_seeds}


def plot_curves(perf, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "moose"
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (tier, eps, algo), (x, mean, std) in curve_bands(perf).items():
        line, = ax.plot(x, mean, label=f"{algo} ({tier}, eps={eps:g})", linewidth=1.2)
        ax.fill_between(x, mean - std, mean + std, color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("true return")
    ax.set_title("mean and one standard deviation over seeds")
    if perf:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_report(curves_dir, out_dir, chart=True):
    perf = collect_curves(curves_dir)
    if not perf:
        log.warning("no curve files found in %s", curves_dir)
    summary = summarize(perf)
    out = resolve_output(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    evalrobust.write_summary_csv(out / "summary.csv", summary)
    if chart:
        plot_curves(perf, out / "curves.svg")
    for (tier, eps, algo), rs in sorted(summary.items()):
        print(f"{tier:>9} eps={eps:<4g} {algo:>8}: p10 {rs.percentile10:.3f} +- {rs.stderr:.3f} (n={rs.n_pooled})")
    return EXIT_OK


def cmd_grid(cfg):
    if not cfg.out:
        raise UsageError("grid needs --out")
    out = resolve_output(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    result = evalrobust.run_experiment_grid(cfg.tiers, cfg.epsilons, cfg.algorithms, cfg.seeds,
                                            cfg.grid_settings(), out, jobs=cfg.jobs)
    plot_curves(result.perf, out / "curves.svg")
    for (tier, eps, algo), rs in sorted(result.summary.items()):
        print(f"{tier:>9} eps={eps:<4g} {algo:>8}: p10 {rs.percentile10:.3f} +- {rs.stderr:.3f} (n={rs.n_pooled})")
    for tier, eps, algo, seed, msg in result.failed:
        print(f"FAILED {tier} eps={eps:g} {algo} seed={seed}: {msg}", file=sys.stderr)
    return EXIT_RUNTIME if result.failed else EXIT_OK


def run_verify(seed=0):
    """Monte Carlo checks of the percentile factor and the Gaussian square identity."""
    checks = []
    factor = evalrobust.mc_percentile_factor(1000, 100_000, derive_rng(seed, "verify-factor"))
    checks.append(("percentile factor", factor, 1.6 <= factor <= 1.8, "[1.6, 1.8]"))
    for s in (1.0, 2.0):
        m = evalrobust.mc_gaussian_square(1_000_000, s, derive_rng(seed, "verify-square", int(s)))
        checks.append((f"E[X^2] at s={s:g}", m, abs(m - s * s) <= 0.01 * s * s, f"{s * s:g} +- 1%"))
    return checks


def cmd_verify(seed):
    checks = run_verify(seed)
    for name, value, ok, target in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {value:.5f} (target {target})")
    return EXIT_OK if all(ok for *_, ok, _ in checks) else EXIT_RUNTIME


# -- argument parsing ------------------------------------------------------------------

_FLAG_ALIASES = {"lam": "--lambda"}


def _add_config_flags(parser, names):
    parser.add_argument("--config", help="flat key = value settings file; flags override it")
    for f in fields(RunConfig):
        if f.name not in names:
            continue
        flag = _FLAG_ALIASES.get(f.name, "--" + f.name.replace("_", "-"))
        parser.add_argument(flag, dest=f.name, default=None, metavar=f.metadata["kind"].upper(),
                            help=f"{f.metadata['doc']} (default {format_value(f.metadata['kind'], f.default)})")


_DATA_KEYS = {"env", "tier", "epsilon", "steps", "seed", "out"}
_TRAIN_KEYS = {f.name for f in fields(RunConfig)} - {"tiers", "epsilons", "algorithms", "seeds", "jobs",
                                                      "tier", "epsilon", "steps", "eval_interval"}
_EVAL_KEYS = {"env", "seed", "eval_traj", "eval_len", "horizon"}
_GRID_KEYS = {f.name for f in fields(RunConfig)} - {"tier", "epsilon", "dataset", "seed"}


def build_parser():
    p = argparse.ArgumentParser(prog="moose", description="Model-based offline policy search with ensembles.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a dataset with a behavior policy")
    _add_config_flags(g, _DATA_KEYS)

    t = sub.add_parser("train", help="train ensemble, VAE and policy on a dataset")
    _add_config_flags(t, _TRAIN_KEYS)
    t.add_argument("--algorithm", choices=("moose", "bc"), default="moose")
    t.add_argument("--ensemble", help="reuse this ensemble checkpoint instead of training one")
    t.add_argument("--vae", help="reuse this VAE checkpoint instead of training one")

    e = sub.add_parser("eval", help="evaluate a policy checkpoint in the true environment")
    _add_config_flags(e, _EVAL_KEYS)
    e.add_argument("--policy", required=True, help="policy checkpoint")
    e.add_argument("--iteration", type=int, default=0, help="iteration number for the curve row")
    e.add_argument("--curve", help="curve CSV to append a row to")
    e.add_argument("--gap", action="store_true", help="also report the imagined-vs-true return gap over --horizon steps")
    e.add_argument("--ensemble", help="ensemble checkpoint for --gap")

    r = sub.add_parser("report", help="summarize curve CSVs and draw the training-curve chart")
    r.add_argument("--curves", required=True, help="directory holding curve CSVs")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--no-chart", action="store_true")

    gr = sub.add_parser("grid", help="run the experiment grid")
    _add_config_flags(gr, _GRID_KEYS)

    v = sub.add_parser("verify", help="run the Monte Carlo checks")
    v.add_argument("--seed", type=int, default=0)
    return p


def config_from_args(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    pairs = {}
    for name, kind in _KINDS.items():
        raw = getattr(args, name, None)
        if raw is not None:
            pairs[name] = parse_value(kind, raw)
    return base_update(cfg, pairs).validate()


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.curves, args.out, chart=not args.no_chart)
        if args.command == "verify":
            return cmd_verify(args.seed)
        cfg = config_from_args(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.algorithm, args.ensemble, args.vae)
        if args.command == "eval":
            return cmd_eval(cfg, args.policy, args.iteration, args.curve, args.gap, args.ensemble)
        if args.command == "grid":
            return cmd_grid(cfg)
    except (UsageError, ContractError, FileNotFoundError) as exc:
        print(f"moose: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, RuntimeError, OSError) as exc:
        print(f"moose: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
