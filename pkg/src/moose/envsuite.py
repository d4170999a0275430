"""Desk-scale point-mass environments, behavior policies and batch generation.

PointMass2D: state ``(x, y, vx, vy)`` in ``[-1, 1]^4``, action in ``(-1, 1)^2``::

    v' = clip(0.9 v + 0.1 a + noise * xi, -1, 1),   xi ~ N(0, I)
    p' = clip(p + 0.05 v', -1, 1)
    r  = -||p' - goal||

Dataset text format (one header line, then one transition per line)::

    # moose-dataset 1 {"columns": [...], "env": {...}, "generation": {...}}
    episode,t,s_0..s_3,a_0,a_1,r,s_next_0..s_next_3

``episode`` and ``t`` are integers; every float is written with 17
significant digits so the file round-trips exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import Optimizer, Tensor, ops
from .errors import ContractError, FormatError
from .policy import DeterministicPolicy
from .seeding import derive_rng

TIERS = ("bad", "mediocre", "optimized")
EPSILON_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
START_BOX = 0.2
ACTION_CAP = 0.999


@dataclass(frozen=True)
class EnvSpec:
    name: str = "PointMass2D"
    state_dim: int = 4
    action_dim: int = 2
    noise: float = 0.0
    goal: tuple = (0.8, 0.8)
    episode_length: int = 100

    def __post_init__(self):
        if self.noise < 0:
            raise ContractError("noise level must be non-negative")


ENVS = {
    "pointmass": EnvSpec(),
    "noisy-pointmass": EnvSpec(name="NoisyPointMass", noise=0.05),
}


def make_env(name):
    try:
        return ENVS[name]
    except KeyError:
        raise ContractError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


def env_key(env):
    for key, spec in ENVS.items():
        if spec == env:
            return key
    return env.name


def reset(env, rng, n=None):
    """Start states drawn uniformly from ``[-0.2, 0.2]^4``."""
    size = env.state_dim if n is None else (n, env.state_dim)
    return rng.uniform(-START_BOX, START_BOX, size=size)


def step(env, s, a, rng=None, noise_draw=None):
    """Advance one step; works on single states or batches ``(..., 4)``.

    ``noise_draw`` may supply the standard-normal velocity noise explicitly,
    otherwise it is drawn from ``rng`` when the environment is noisy.
    """
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if np.any(np.abs(a) > 1.0) or not np.all(np.isfinite(a)):
        raise ContractError("actions must lie in (-1, 1)")
    if np.any(np.abs(s) > 1.0):
        raise ContractError("state outside the box [-1, 1]^4")
    p, v = s[..., :2], s[..., 2:]
    v_next = 0.9 * v + 0.1 * a
    if env.noise > 0:
        if noise_draw is None:
            noise_draw = rng.standard_normal(v.shape)
        v_next = v_next + env.noise * noise_draw
    v_next = np.clip(v_next, -1.0, 1.0)
    p_next = np.clip(p + 0.05 * v_next, -1.0, 1.0)
    s_next = np.concatenate([p_next, v_next], axis=-1)
    return s_next, reward(env, s, a, s_next)


def reward(env, s, a, s_next):
    return -np.linalg.norm(np.asarray(s_next)[..., :2] - np.asarray(env.goal), axis=-1)


def reward_tensor(env, s, a, s_next):
    """Differentiable reward on tensors of shape (..., 4)."""
    d = ops.sub(s_next[..., :2], np.asarray(env.goal, dtype=np.float64))
    return ops.neg(ops.norm(d, axis=-1))


def reward_gradient(env, s, a, s_next):
    """Analytic ``(dr/ds, dr/da, dr/ds_next)``; only positions in s_next matter."""
    s_next = np.asarray(s_next, dtype=np.float64)
    d = s_next[..., :2] - np.asarray(env.goal)
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    g_next = np.zeros_like(s_next)
    g_next[..., :2] = np.where(n > 0, -d / np.where(n > 0, n, 1.0), 0.0)
    return np.zeros_like(np.asarray(s, dtype=np.float64)), np.zeros_like(np.asarray(a, dtype=np.float64)), g_next


# -- behavior policies ---------------------------------------------------------

@dataclass(frozen=True)
class BehaviorPolicy:
    tier: str
    target: tuple
    gain: float = 1.0


def behavior_policy(env, tier, gain=1.0):
    if tier not in TIERS:
        raise ContractError(f"unknown tier {tier!r}; choose from {TIERS}")
    goal = np.asarray(env.goal, dtype=np.float64)
    if tier == "optimized":
        target = goal
    elif tier == "mediocre":
        target = goal - 0.4
    else:
        target = np.array([-0.9, -0.9])
    return BehaviorPolicy(tier, tuple(float(x) for x in target), gain)


def behavior_action(policy, s):
    """Proportional-derivative pull toward the tier's target point."""
    s = np.asarray(s, dtype=np.float64)
    p, v = s[..., :2], s[..., 2:]
    a = policy.gain * (np.asarray(policy.target) - p) - 0.5 * v
    return np.clip(a, -ACTION_CAP, ACTION_CAP)


def epsilon_greedy(policy, s, epsilon, rng):
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError(f"epsilon must lie in [0, 1], got {epsilon}")
    a = behavior_action(policy, s)
    if rng.random() < epsilon:
        return rng.uniform(-1.0, 1.0, size=a.shape)
    return a


# -- datasets --------------------------------------------------------------------

@dataclass
class Dataset:
    episode: np.ndarray
    t: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    env: EnvSpec = field(default_factory=EnvSpec)
    generation: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.r)

    @property
    def n_episodes(self):
        return len(np.unique(self.episode))

    def subset(self, mask):
        return Dataset(self.episode[mask], self.t[mask], self.s[mask], self.a[mask],
                       self.r[mask], self.s_next[mask], self.env, dict(self.generation))

    def split_episodes(self, holdout=0.1):
        """Train/held-out split with the last ``holdout`` fraction of episodes held out."""
        eps = np.unique(self.episode)
        n_hold = int(np.ceil(holdout * len(eps))) if len(eps) > 1 else 0
        if n_hold == 0:
            return self, self.subset(np.zeros(len(self), dtype=bool))
        held = np.isin(self.episode, eps[-n_hold:])
        return self.subset(~held), self.subset(held)

    def episode_returns(self):
        eps, inv = np.unique(self.episode, return_inverse=True)
        return np.bincount(inv, weights=self.r, minlength=len(eps))

    def mean_episode_return(self):
        return float(self.episode_returns().mean())

    def start_states(self):
        return self.s[self.t == 0]

    def state_ranges(self):
        both = np.concatenate([self.s, self.s_next])
        return both.min(axis=0), both.max(axis=0)

    def header(self):
        cols = (["episode", "t"] + [f"s_{i}" for i in range(self.env.state_dim)]
                + [f"a_{i}" for i in range(self.env.action_dim)] + ["r"]
                + [f"s_next_{i}" for i in range(self.env.state_dim)])
        env = asdict(self.env)
        env["goal"] = list(env["goal"])
        return {"columns": cols, "env": env, "generation": self.generation}

    def save(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write("# moose-dataset 1 " + json.dumps(self.header(), sort_keys=True) + "\n")
            floats = np.column_stack([self.s, self.a, self.r, self.s_next])
            for e, t, row in zip(self.episode, self.t, floats):
                fh.write(f"{int(e)},{int(t)}," + ",".join(format(x, ".17g") for x in row) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            first = fh.readline()
            if not first.startswith("# moose-dataset 1 "):
                raise FormatError(f"{path}: missing moose-dataset header")
            header = json.loads(first[len("# moose-dataset 1 "):])
            rows = [line.split(",") for line in fh if line.strip()]
        env_d = header["env"]
        env = EnvSpec(**{**env_d, "goal": tuple(env_d["goal"])})
        sd, ad = env.state_dim, env.action_dim
        if rows and len(rows[0]) != 2 + 2 * sd + ad + 1:
            raise FormatError(f"{path}: expected {2 + 2 * sd + ad + 1} columns, found {len(rows[0])}")
        ints = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64).reshape(-1, 2)
        vals = np.array([[float(x) for x in r[2:]] for r in rows], dtype=np.float64).reshape(len(rows), -1)
        return cls(ints[:, 0], ints[:, 1], vals[:, :sd], vals[:, sd:sd + ad], vals[:, sd + ad],
                   vals[:, sd + ad + 1:], env, header["generation"])


def _episode_draws(env, seed, episode):
    """Every random number one episode consumes, from its own stream."""
    rng = derive_rng(seed, "episode", episode)
    L = env.episode_length
    start = reset(env, rng)
    explore = rng.random(L)
    random_a = rng.uniform(-1.0, 1.0, size=(L, env.action_dim))
    xi = rng.standard_normal((L, env.state_dim - env.action_dim))
    return start, explore, random_a, xi


def generate_dataset(env, policy, epsilon, n_steps, seed):
    """Roll the epsilon-greedy behavior policy for ``n_steps`` transitions.

    Episodes are simulated side by side, but each one reads only its own
    random stream, so results do not depend on how many run together.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError(f"epsilon must lie in [0, 1], got {epsilon}")
    L = env.episode_length
    if n_steps <= 0 or n_steps % L:
        raise ContractError(f"n_steps must be a positive multiple of the episode length {L}")
    E = n_steps // L
    draws = [_episode_draws(env, seed, e) for e in range(E)]
    s = np.stack([d[0] for d in draws])
    explore = np.stack([d[1] for d in draws])
    random_a = np.stack([d[2] for d in draws])
    xi = np.stack([d[3] for d in draws])

    S, A, R, S2 = [], [], [], []
    for t in range(L):
        a = behavior_action(policy, s)
        pick = explore[:, t] < epsilon
        a = np.where(pick[:, None], random_a[:, t], a)
        s2, r = step(env, s, a, noise_draw=xi[:, t])
        S.append(s), A.append(a), R.append(r), S2.append(s2)
        s = s2
    # episode-major row order
    episode = np.repeat(np.arange(E), L)
    tt = np.tile(np.arange(L), E)
    gen = {"tier": policy.tier, "gain": policy.gain, "target": list(policy.target),
           "epsilon": float(epsilon), "n_steps": int(n_steps), "seed": int(seed)}
    return Dataset(episode, tt, np.stack(S, 1).reshape(-1, env.state_dim),
                   np.stack(A, 1).reshape(-1, env.action_dim), np.stack(R, 1).reshape(-1),
                   np.stack(S2, 1).reshape(-1, env.state_dim), env, gen)


def rollout_return(env, act, starts, horizon, rng=None):
    """Undiscounted returns of ``act`` (state batch -> action batch) from ``starts``."""
    s = np.array(starts, dtype=np.float64)
    total = np.zeros(len(s))
    for _ in range(horizon):
        a = np.clip(act(s), -1.0, 1.0)
        s, r = step(env, s, a, rng)
        total += r
    return total


# -- behavior cloning -----------------------------------------------------------------

@dataclass
class CloneConfig:
    epochs: int = 50
    batch_size: int = 500
    lr: float = 1e-3
    hidden: tuple = (64, 64)
    seed: int = 0


def clone_behavior(dataset, config=None, callback=None):
    """Fit a deterministic policy to the batch's actions by mean squared error.

    ``callback(epoch, policy)`` runs after every epoch (1-based).
    """
    config = config or CloneConfig()
    if len(dataset) == 0:
        raise ContractError("cannot clone from an empty dataset")
    mean = dataset.s.mean(axis=0)
    std = np.maximum(dataset.s.std(axis=0), 1e-6)
    init_rng = derive_rng(config.seed, "clone-init")
    policy = DeterministicPolicy.init(dataset.env.state_dim, dataset.env.action_dim, init_rng,
                                      config.hidden, mean, std)
    # keep targets strictly inside the tanh range
    target = np.clip(dataset.a, -ACTION_CAP, ACTION_CAP)
    opt = Optimizer(policy.parameters(), "adam", config.lr)
    shuffle = derive_rng(config.seed, "clone-shuffle")
    n = len(dataset)
    bs = min(config.batch_size, n)
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(n)
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            opt.zero_grad()
            loss = ops.mean(ops.square(policy.forward(Tensor(dataset.s[idx])) - target[idx]))
            loss.backward()
            opt.step()
        if callback is not None:
            callback(epoch, policy)
    return policy
