"""Variational autoencoder over (normalized state, action) pairs.

Its reconstruction error scores how well a pair is supported by the batch:
pairs like the ones it was trained on reconstruct well, unfamiliar ones do not.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Mlp, Optimizer, Tensor, forward_mlp, ops
from .diffcore.checkpoint import mlp_from_arrays, mlp_to_arrays, read_container, write_container
from .dynmodel import NormStats
from .errors import ContractError, DivergenceError, FormatError
from .seeding import derive_rng


@dataclass
class VaeConfig:
    hidden: int = 128
    epochs: int = 50
    batch_size: int = 500
    lr: float = 1e-4
    holdout: float = 0.1
    seed: int = 0


@dataclass
class SupportVAE:
    encoder: Mlp  # (s, a) -> hidden
    mean_head: Mlp
    logvar_head: Mlp
    decoder: Mlp  # z -> hidden -> hidden -> (s, a)
    stats: NormStats
    state_dim: int
    action_dim: int
    train_curve: list = field(default_factory=list)

    @property
    def latent_dim(self):
        return 2 * self.action_dim

    def parameters(self):
        return [p for net in (self.encoder, self.mean_head, self.logvar_head, self.decoder)
                for p in net.parameters()]

    def encode(self, x):
        h = forward_mlp(self.encoder, x)
        return forward_mlp(self.mean_head, h), forward_mlp(self.logvar_head, h)

    def save(self, path):
        meta = {"state_dim": self.state_dim, "action_dim": self.action_dim}
        arrays = self.stats.to_arrays()
        for name in ("encoder", "mean_head", "logvar_head", "decoder"):
            m_meta, m_arrays = mlp_to_arrays(getattr(self, name), prefix=name + ".")
            meta[name] = m_meta
            arrays.update(m_arrays)
        write_container(path, "vae", meta, arrays)

    @classmethod
    def load(cls, path):
        _, meta, arrays = read_container(path, "vae")
        nets = {name: mlp_from_arrays(meta[name], arrays, prefix=name + ".")
                for name in ("encoder", "mean_head", "logvar_head", "decoder")}
        return cls(**nets, stats=NormStats.from_arrays(arrays),
                   state_dim=meta["state_dim"], action_dim=meta["action_dim"])


def build_vae(state_dim, action_dim, stats, hidden, rng):
    d = state_dim + action_dim
    z = 2 * action_dim
    return SupportVAE(
        encoder=Mlp.init([d, hidden], ["relu"], rng),
        mean_head=Mlp.init([hidden, z], ["linear"], rng),
        logvar_head=Mlp.init([hidden, z], ["linear"], rng),
        decoder=Mlp.init([z, hidden, hidden, d], ["relu", "relu", "linear"], rng),
        stats=stats,
        state_dim=state_dim,
        action_dim=action_dim,
    )


def vae_inputs(stats, s, a):
    return np.concatenate([stats.norm_s(np.asarray(s)), np.asarray(a)], axis=-1)


def elbo_loss(vae, x, xi):
    """Negative ELBO per pair, averaged over the batch.

    Unit-variance Gaussian decoder, so the likelihood term is half the summed
    squared reconstruction error (up to a constant); ``xi`` is the
    standard-normal draw of the reparameterization ``z = mu + exp(logvar / 2) * xi``.
    """
    mu, logvar = vae.encode(x)
    z = mu + ops.exp(0.5 * logvar) * xi
    recon = 0.5 * ops.mean(ops.sum(ops.square(forward_mlp(vae.decoder, z) - x), axis=-1))
    kl = -0.5 * ops.mean(ops.sum(1.0 + logvar - ops.square(mu) - ops.exp(logvar), axis=-1))
    return recon + kl


def train_vae(dataset, stats, config=None):
    config = config or VaeConfig()
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    sd, ad = dataset.env.state_dim, dataset.env.action_dim
    vae = build_vae(sd, ad, stats, config.hidden, derive_rng(config.seed, "vae-init"))
    train, _ = dataset.split_episodes(config.holdout)
    x_all = vae_inputs(stats, train.s, train.a)
    opt = Optimizer(vae.parameters(), "adam", config.lr)
    shuffle = derive_rng(config.seed, "vae-shuffle")
    noise = derive_rng(config.seed, "vae-noise")
    eval_noise = derive_rng(config.seed, "vae-eval-noise").standard_normal((len(x_all), vae.latent_dim))
    n = len(x_all)
    bs = min(config.batch_size, n)
    for _ in range(config.epochs):
        order = shuffle.permutation(n)
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            opt.zero_grad()
            loss = elbo_loss(vae, Tensor(x_all[idx]), noise.standard_normal((len(idx), vae.latent_dim)))
            if not np.isfinite(loss.data):
                raise DivergenceError("VAE training diverged (non-finite loss)")
            loss.backward()
            opt.step()
        # fixed noise so epoch-to-epoch values are comparable
        vae.train_curve.append(elbo_loss(vae, Tensor(x_all), eval_noise).item())
    return vae


def reconstruction_errors(vae, x):
    """Per-pair MSE of the mean-latent reconstruction; differentiable in ``x``."""
    mu = forward_mlp(vae.mean_head, forward_mlp(vae.encoder, x))
    return ops.mean(ops.square(forward_mlp(vae.decoder, mu) - x), axis=-1)


def penalty(vae, s, a):
    """Support penalty of (raw state, action) pairs: one value per pair, each >= 0.

    States are normalized with the VAE's statistics; actions stay raw.
    """
    s, a = ops.as_tensor(s), ops.as_tensor(a)
    x = ops.concat([ops.div(ops.sub(s, vae.stats.s_mean), vae.stats.s_std), a], axis=-1)
    return reconstruction_errors(vae, x)


def accumulate_penalty(vae, states, actions):
    """Mean over trajectories of the undiscounted per-step penalty sum.

    ``states``/``actions`` have shape (H, n_traj, dim): step-major, every
    trajectory of equal length.
    """
    states, actions = ops.as_tensor(states), ops.as_tensor(actions)
    H, n = states.shape[:2]
    flat = penalty(vae, ops.reshape(states, (H * n, -1)), ops.reshape(actions, (H * n, -1)))
    return ops.mean(ops.sum(ops.reshape(flat, (H, n)), axis=0))


def check_stats(vae, stats):
    if not vae.stats.same_as(stats):
        raise FormatError("VAE was trained against different normalization statistics; refusing to score")
