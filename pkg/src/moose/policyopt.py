"""Policy search through imagined ensemble rollouts with a support penalty.

Each policy update samples start states from the batch, unrolls the policy
through every ensemble member for ``horizon`` steps as one differentiable
computation, and descends

    loss = -lam * E[R] + (1 - lam) * E[P]

where E[R] leans toward the worst member (``eta``) and E[P] is the VAE
reconstruction error accumulated along the imagined trajectories.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import envsuite
from .diffcore import Optimizer, Tensor, ops
from .dynmodel import predict_all
from .errors import ContractError, DivergenceError
from .policy import DeterministicPolicy
from .seeding import derive_rng
from .supportvae import accumulate_penalty

log = logging.getLogger(__name__)


@dataclass
class MooseConfig:
    lam: float = 0.01
    eta: float = 0.5
    gamma: float = 0.97
    horizon: int = 50
    n_starts: int = 100
    optimizer: str = "sgd"
    lr: float = 1e-4
    steps: int = 1000
    hidden: tuple = (64, 64)
    episode_starts_only: bool = False
    learned_reward: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.eta <= 1.0:
            raise ContractError(f"eta must lie in [0, 1], got {self.eta}")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.horizon < 1 or self.n_starts < 1:
            raise ContractError("horizon and number of start states must be at least 1")


@dataclass
class RolloutBatch:
    starts: np.ndarray
    horizon: int
    gamma: float
    states: Tensor  # (H, K, N, state_dim): the state each action was taken in
    actions: Tensor  # (H, K, N, action_dim)
    returns: Tensor  # (K, N) discounted sums of normalized rewards
    rewards: Tensor  # (H, K, N) un-normalized rewards

    @property
    def K(self):
        return self.returns.shape[0]

    def flat_pairs(self):
        """States and actions as (H, K*N, dim) for penalty scoring."""
        H, K, N = self.states.shape[:3]
        return (ops.reshape(self.states, (H, K * N, -1)),
                ops.reshape(self.actions, (H, K * N, -1)))


def rollout(ensemble, policy, starts, horizon, gamma, env=None, learned_reward=False):
    """Unroll ``policy`` through every member from every start state.

    Rewards come from ``env``'s known reward on (s, a, s') unless
    ``learned_reward`` is set, in which case the members' reward head is used.
    Rewards in ``returns`` are normalized with the ensemble's statistics.
    """
    starts = np.asarray(starts, dtype=np.float64)
    K = ensemble.K
    if learned_reward and not ensemble.reward_head:
        raise ContractError("ensemble has no reward head")
    if not learned_reward and env is None:
        raise ContractError("known-reward rollouts need the environment spec")
    stats = ensemble.stats
    s = Tensor(np.broadcast_to(starts, (K,) + starts.shape).copy())
    states, actions, rewards = [], [], []
    ret = Tensor(np.zeros((K, len(starts))))
    for t in range(horizon):
        a = policy.forward(s)
        s_next, r_model = predict_all(ensemble, s, a)
        r = r_model if learned_reward else envsuite.reward_tensor(env, s, a, s_next)
        if not np.all(np.isfinite(s_next.data)):
            bad = np.argwhere(~np.isfinite(s_next.data))[0]
            raise DivergenceError(f"rollout produced a non-finite state at step {t} in model {bad[0]}")
        states.append(s)
        actions.append(a)
        rewards.append(r)
        ret = ret + (gamma ** t) * ((r - stats.r_mean) / stats.r_std)
        s = s_next
    if horizon == 0:
        sd, ad = policy.state_dim, policy.action_dim
        empty = (lambda d: Tensor(np.zeros((0, K, len(starts), d))))
        return RolloutBatch(starts, 0, gamma, empty(sd), empty(ad), ret, Tensor(np.zeros((0, K, len(starts)))))
    return RolloutBatch(starts, horizon, gamma, ops.stack(states), ops.stack(actions), ret, ops.stack(rewards))


def weighted_return(per_model_returns, eta):
    """``eta * min_k R_k + (1 - eta) * mean_k R_k`` over the first axis.

    Extra trailing axes (one per start state) are kept; the min gradient goes
    to the first arg-minimum member.
    """
    R = ops.as_tensor(per_model_returns)
    if R.shape[0] < 1:
        raise ContractError("need at least one model return")
    return eta * ops.amin(R, axis=0) + (1.0 - eta) * ops.mean(R, axis=0)


def moose_loss(expected_return, expected_penalty, lam):
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    return -lam * ops.as_tensor(expected_return) + (1.0 - lam) * ops.as_tensor(expected_penalty)


def objective(policy, ensemble, vae, starts, config, env):
    """Returns ``(loss, E[R], E[P])`` as tensors for one batch of start states."""
    batch = rollout(ensemble, policy, starts, config.horizon, config.gamma, env, config.learned_reward)
    expected_return = ops.mean(weighted_return(batch.returns, config.eta))
    s, a = batch.flat_pairs()
    if config.lam < 1.0:
        expected_penalty = accumulate_penalty(vae, s, a)
    else:
        # weight is zero: score for the log only, outside the graph
        expected_penalty = Tensor(accumulate_penalty(vae, s.data, a.data).data)
    return moose_loss(expected_return, expected_penalty, config.lam), expected_return, expected_penalty


def init_policy(dataset, ensemble, config):
    rng = derive_rng(config.seed, "policy-init")
    return DeterministicPolicy.init(dataset.env.state_dim, dataset.env.action_dim, rng, config.hidden,
                                    ensemble.stats.s_mean, ensemble.stats.s_std)


def start_state_pool(dataset, config):
    return dataset.start_states() if config.episode_starts_only else dataset.s


def train_policy(dataset, ensemble, vae, config=None, callback=None, policy=None):
    """Run ``config.steps`` policy updates; returns ``(policy, diagnostics)``.

    ``diagnostics`` holds one ``(step, E[R], E[P], loss)`` tuple per update.
    ``callback(step, policy)`` runs after every update (step 0 is the
    freshly initialized policy). A :class:`DivergenceError` carries the
    diagnostics recorded before it in its ``diagnostics`` attribute.
    """
    config = config or MooseConfig()
    env = dataset.env
    policy = policy or init_policy(dataset, ensemble, config)
    pool = start_state_pool(dataset, config)
    sampler = derive_rng(config.seed, "policy-starts")
    opt = Optimizer(policy.parameters(), config.optimizer, config.lr)
    diagnostics = []
    if callback is not None:
        callback(0, policy)
    for step in range(1, config.steps + 1):
        starts = pool[sampler.integers(len(pool), size=config.n_starts)]
        opt.zero_grad()
        try:
            loss, er, ep = objective(policy, ensemble, vae, starts, config, env)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"policy loss became non-finite at step {step}")
        except DivergenceError as exc:
            exc.diagnostics = diagnostics
            raise
        loss.backward()
        opt.step()
        diagnostics.append((step, er.item(), ep.item(), loss.item()))
        if step % 100 == 0:
            log.info("policy step %d: E[R]=%.4f E[P]=%.4f loss=%.4f", step, er.item(), ep.item(), loss.item())
        if callback is not None:
            callback(step, policy)
    return policy, diagnostics


def imagined_vs_true_gap(policy, ensemble, env, horizon, n_starts=100, seed=0):
    """Mean undiscounted return in imagination and in the real environment.

    Both use the same start states, drawn from the environment's start
    distribution, and the same horizon. Imagined rewards are averaged over
    ensemble members.
    """
    if horizon == 0:
        return 0.0, 0.0
    starts = envsuite.reset(env, derive_rng(seed, "gap-starts"), n_starts)
    batch = rollout(ensemble, policy, starts, horizon, 1.0, env)
    imagined = float(batch.rewards.data.sum(axis=0).mean())
    true = envsuite.rollout_return(env, policy.act, starts, horizon, derive_rng(seed, "gap-env")).mean()
    return imagined, float(true)
