"""Ensembles of learned transition models on normalized data.

Members share one set of normalization statistics and are trained side by
side as a single batched network (a leading members axis), each with its
own initialization and shuffle stream derived from ``(seed, member)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Layer, Mlp, Optimizer, Tensor, forward_mlp, ops
from .diffcore.checkpoint import mlp_from_arrays, mlp_to_arrays, read_container, write_container
from .errors import ContractError, DivergenceError, FormatError
from .seeding import derive_rng

SIGMA_FLOOR = 1e-6
STAT_FIELDS = ("s_mean", "s_std", "ds_mean", "ds_std", "r_mean", "r_std", "s_min", "s_max")


@dataclass
class NormStats:
    s_mean: np.ndarray
    s_std: np.ndarray
    ds_mean: np.ndarray
    ds_std: np.ndarray
    r_mean: float
    r_std: float
    s_min: np.ndarray
    s_max: np.ndarray

    def norm_s(self, s):
        return (s - self.s_mean) / self.s_std

    def denorm_s(self, z):
        return z * self.s_std + self.s_mean

    def norm_ds(self, ds):
        return (ds - self.ds_mean) / self.ds_std

    def denorm_ds(self, z):
        return z * self.ds_std + self.ds_mean

    def norm_r(self, r):
        return (r - self.r_mean) / self.r_std

    def denorm_r(self, z):
        return z * self.r_std + self.r_mean

    def to_arrays(self, prefix="stats."):
        return {prefix + k: np.atleast_1d(np.asarray(getattr(self, k), dtype=np.float64)) for k in STAT_FIELDS}

    @classmethod
    def from_arrays(cls, arrays, prefix="stats."):
        vals = {k: arrays[prefix + k] for k in STAT_FIELDS}
        vals["r_mean"] = float(vals["r_mean"][0])
        vals["r_std"] = float(vals["r_std"][0])
        return cls(**vals)

    def same_as(self, other):
        return all(np.array_equal(np.asarray(getattr(self, k)), np.asarray(getattr(other, k)))
                   for k in STAT_FIELDS)


def compute_norm_stats(dataset):
    """Population mean/std per dimension (std floored at 1e-6) and observed state ranges."""
    if len(dataset) < 2:
        raise ContractError("need at least two transitions to compute statistics")
    ds = dataset.s_next - dataset.s
    lo, hi = dataset.state_ranges()
    return NormStats(
        s_mean=dataset.s.mean(axis=0),
        s_std=np.maximum(dataset.s.std(axis=0), SIGMA_FLOOR),
        ds_mean=ds.mean(axis=0),
        ds_std=np.maximum(ds.std(axis=0), SIGMA_FLOOR),
        r_mean=float(dataset.r.mean()),
        r_std=float(max(dataset.r.std(), SIGMA_FLOOR)),
        s_min=lo,
        s_max=hi,
    )


@dataclass
class EnsembleConfig:
    members: int = 4
    mode: str = "delta"
    reward_head: bool = False
    hidden: tuple = (64, 64)
    epochs: int = 50
    batch_size: int = 500
    lr: float = 1e-4
    holdout: float = 0.1
    seed: int = 0


@dataclass
class DynamicsEnsemble:
    net: Mlp  # members axis of length K
    stats: NormStats
    mode: str
    reward_head: bool
    state_dim: int
    action_dim: int
    holdout_mse: list = field(default_factory=list)
    train_curve: list = field(default_factory=list)
    _frozen: Mlp | None = field(default=None, repr=False)

    @property
    def K(self):
        return self.net.members

    def frozen(self):
        """Constant-weight view used during policy search (models are read-only there)."""
        if self._frozen is None:
            self._frozen = self.net.frozen()
        return self._frozen

    def member_net(self, k):
        if not 0 <= k < self.K:
            raise ContractError(f"member index {k} out of range for K={self.K}")
        return self.net.member(k)

    def save(self, path):
        meta = {"mode": self.mode, "K": self.K, "reward_head": self.reward_head,
                "state_dim": self.state_dim, "action_dim": self.action_dim,
                "holdout_mse": [float(x) for x in self.holdout_mse]}
        arrays = self.stats.to_arrays()
        for k in range(self.K):
            m_meta, m_arrays = mlp_to_arrays(self.net.member(k), prefix=f"member{k}.")
            arrays.update(m_arrays)
        meta["member"] = m_meta
        write_container(path, "ensemble", meta, arrays)

    @classmethod
    def load(cls, path):
        _, meta, arrays = read_container(path, "ensemble")
        members = [mlp_from_arrays(meta["member"], arrays, prefix=f"member{k}.") for k in range(meta["K"])]
        return cls(_stack(members), NormStats.from_arrays(arrays), meta["mode"], meta["reward_head"],
                   meta["state_dim"], meta["action_dim"], meta["holdout_mse"])


def _stack(mlps):
    layers = []
    for parts in zip(*(m.layers for m in mlps)):
        g = None if parts[0].g is None else Tensor(np.stack([p.g.data for p in parts]), requires_grad=True)
        layers.append(Layer(
            Tensor(np.stack([p.v.data for p in parts]), requires_grad=True),
            g,
            Tensor(np.stack([p.b.data for p in parts])[:, None, :], requires_grad=True),
            parts[0].activation,
        ))
    return Mlp(layers, mlps[0].weight_norm, len(mlps))


def _inputs(stats, s, a):
    return np.concatenate([stats.norm_s(s), a], axis=-1)


def _targets(stats, mode, reward_head, s, s_next, r):
    y = stats.norm_ds(s_next - s) if mode == "delta" else stats.norm_s(s_next)
    if reward_head:
        y = np.concatenate([y, stats.norm_r(r)[..., None]], axis=-1)
    return y


def train_ensemble(dataset, config=None, stats=None):
    """Fit K members by mean squared error on normalized targets.

    The last ``holdout`` fraction of episodes is kept aside; each member's
    held-out error (normalized next-state MSE) is reported in ``holdout_mse``.
    """
    config = config or EnsembleConfig()
    if config.mode not in ("delta", "direct"):
        raise ContractError(f"mode must be 'delta' or 'direct', got {config.mode!r}")
    if config.members < 1:
        raise ContractError("an ensemble needs at least one member")
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    stats = stats or compute_norm_stats(dataset)
    train, held = dataset.split_episodes(config.holdout)
    sd, ad = dataset.env.state_dim, dataset.env.action_dim
    out = sd + (1 if config.reward_head else 0)
    sizes = [sd + ad, *config.hidden, out]
    acts = ["relu"] * len(config.hidden) + ["linear"]
    K = config.members
    net = _stack([Mlp.init(sizes, acts, derive_rng(config.seed, "ensemble-init", k), weight_norm=True)
                  for k in range(K)])

    x_all = _inputs(stats, train.s, train.a)
    y_all = _targets(stats, config.mode, config.reward_head, train.s, train.s_next, train.r)
    shufflers = [derive_rng(config.seed, "ensemble-shuffle", k) for k in range(K)]
    opt = Optimizer(net.parameters(), "adam", config.lr)
    n = len(x_all)
    bs = min(config.batch_size, n)
    ens = DynamicsEnsemble(net, stats, config.mode, config.reward_head, sd, ad)
    for _ in range(config.epochs):
        orders = np.stack([rng.permutation(n) for rng in shufflers])
        for lo in range(0, n, bs):
            idx = orders[:, lo:lo + bs]
            opt.zero_grad()
            err = forward_mlp(net, x_all[idx]) - y_all[idx]
            per_member = ops.mean(ops.square(err), axis=(1, 2))
            bad = ~np.isfinite(per_member.data)
            if bad.any():
                raise DivergenceError(f"ensemble member {int(np.argmax(bad))} diverged (non-finite loss)")
            ops.sum(per_member).backward()
            opt.step()
        ens.train_curve.append(_member_mse(net, x_all, y_all))
    ens.holdout_mse = holdout_state_mse(ens, held) if len(held) else [float("nan")] * K
    return ens


def _member_mse(net, x, y):
    xs = np.broadcast_to(x, (net.members,) + x.shape)
    err = forward_mlp(net.frozen(), xs).data - y
    return [float(v) for v in (err ** 2).mean(axis=(1, 2))]


def holdout_state_mse(ens, data):
    """Per-member mean of ((s_hat' - s') / sigma_s)^2 over ``data``."""
    pred, _ = predict_all(ens, np.broadcast_to(data.s, (ens.K,) + data.s.shape),
                          np.broadcast_to(data.a, (ens.K,) + data.a.shape))
    err = (pred.data - data.s_next) / ens.stats.s_std
    return [float(v) for v in (err ** 2).mean(axis=(1, 2))]


def _decode(ens, s, raw):
    """Map raw network output to clipped next states (and reward)."""
    st = ens.stats
    sd = ens.state_dim
    head = raw[..., :sd] if ens.reward_head else raw
    if ens.mode == "delta":
        s_next = ops.add(s, ops.add(ops.mul(head, st.ds_std), st.ds_mean))
    else:
        s_next = ops.add(ops.mul(head, st.s_std), st.s_mean)
    s_next = ops.clamp(s_next, st.s_min, st.s_max)
    r = None
    if ens.reward_head:
        r = ops.add(ops.mul(raw[..., sd], st.r_std), st.r_mean)
    return s_next, r


def predict_all(ens, s, a):
    """Every member at once: ``s`` (K, N, sd), ``a`` (K, N, ad) -> ((K, N, sd), reward or None).

    Differentiable in ``s`` and ``a``; model weights are constants here.
    """
    s, a = ops.as_tensor(s), ops.as_tensor(a)
    x = ops.concat([ops.div(ops.sub(s, ens.stats.s_mean), ens.stats.s_std), a], axis=-1)
    raw = forward_mlp(ens.frozen(), x)
    return _decode(ens, s, raw)


def predict(ens, k, s, a):
    """Member ``k`` on states (..., sd) and actions (..., ad)."""
    if not 0 <= k < ens.K:
        raise ContractError(f"member index {k} out of range for K={ens.K}")
    s, a = ops.as_tensor(s), ops.as_tensor(a)
    layers = [Layer(Tensor(l.v.data[k]), None, Tensor(l.b.data[k, 0]), l.activation)
              for l in ens.frozen().layers]
    x = ops.concat([ops.div(ops.sub(s, ens.stats.s_mean), ens.stats.s_std), a], axis=-1)
    return _decode(ens, s, forward_mlp(Mlp(layers, False), x))


def model_disagreement(ens, s, a):
    """Mean pairwise Euclidean distance between member predictions (diagnostic only)."""
    if ens.K < 2:
        raise ContractError("disagreement needs at least two members")
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    pred = predict_all(ens, np.broadcast_to(s, (ens.K,) + s.shape),
                       np.broadcast_to(a, (ens.K,) + a.shape))[0].data
    total, pairs = 0.0, 0
    for i in range(ens.K):
        for j in range(i + 1, ens.K):
            total = total + np.linalg.norm(pred[i] - pred[j], axis=-1)
            pairs += 1
    return float(np.mean(total / pairs))


def check_stats(ens, stats):
    if not ens.stats.same_as(stats):
        raise FormatError("normalization statistics differ from the ones the ensemble was trained with")
