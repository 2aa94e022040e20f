"""Recurrent state-space model: belief encoder, latent transition and pixel decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..core import NonFiniteError
from ..nets import ConvDecoder, ConvEncoder, mlp

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LatentState:
    """Deterministic recurrent part ``h`` and Gaussian stochastic part ``z``."""

    h: torch.Tensor
    z: torch.Tensor
    mean: torch.Tensor
    std: torch.Tensor

    @property
    def features(self) -> torch.Tensor:
        return torch.cat([self.h, self.z], -1)

    def detach(self) -> LatentState:
        return LatentState(self.h.detach(), self.z.detach(), self.mean.detach(), self.std.detach())

    def map(self, fn) -> LatentState:
        return LatentState(fn(self.h), fn(self.z), fn(self.mean), fn(self.std))

    @staticmethod
    def stack(states: list[LatentState], dim: int = 0) -> LatentState:
        return LatentState(*(torch.stack([getattr(s, k) for s in states], dim)
                             for k in ("h", "z", "mean", "std")))


def gaussian_kl(mean_q, std_q, mean_p, std_p) -> torch.Tensor:
    """KL(N(mean_q, std_q^2) || N(mean_p, std_p^2)) summed over the last axis."""
    var_ratio = (std_q / std_p) ** 2
    t = ((mean_q - mean_p) / std_p) ** 2
    return 0.5 * (var_ratio + t - 1.0 - torch.log(var_ratio)).sum(-1)


def unit_gaussian_loglik(x: torch.Tensor, mean: torch.Tensor, event_dims: int = 3) -> torch.Tensor:
    """log N(x; mean, I) summed over the trailing ``event_dims`` axes."""
    dims = tuple(range(-event_dims, 0))
    n = math.prod(x.shape[-event_dims:])
    return -0.5 * ((x - mean) ** 2).sum(dims) - 0.5 * n * LOG_2PI


class RSSM(nn.Module):
    def __init__(self, action_dim: int, deter_dim: int = 64, stoch_dim: int = 16, hidden_dim: int = 128,
                 channels: int = 1, min_std: float = 0.1, cnn_depth: int = 32):
        super().__init__()
        self.action_dim = action_dim
        self.deter_dim = deter_dim
        self.stoch_dim = stoch_dim
        self.min_std = min_std
        self.encoder = ConvEncoder(channels, cnn_depth)
        self.embed_dim = self.encoder.embed_dim
        self.decoder = ConvDecoder(deter_dim + stoch_dim, channels, cnn_depth)
        self.inp = nn.Sequential(nn.Linear(stoch_dim + action_dim, hidden_dim), nn.ELU())
        self.cell = nn.GRUCell(hidden_dim, deter_dim)
        self.prior_head = mlp(deter_dim, hidden_dim, 2 * stoch_dim, layers=1)
        self.post_head = mlp(deter_dim + self.embed_dim, hidden_dim, 2 * stoch_dim, layers=1)

    @property
    def feature_dim(self) -> int:
        return self.deter_dim + self.stoch_dim

    def initial(self, batch: int) -> LatentState:
        p = next(self.parameters())
        zeros = lambda d: torch.zeros(batch, d, dtype=p.dtype, device=p.device)
        return LatentState(zeros(self.deter_dim), zeros(self.stoch_dim), zeros(self.stoch_dim),
                           torch.ones(batch, self.stoch_dim, dtype=p.dtype, device=p.device))

    def _gaussian(self, raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, pre_std = raw.chunk(2, -1)
        return mean, F.softplus(pre_std) + self.min_std

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        lead = pixels.shape[:-3]
        return self.encoder(pixels.reshape(-1, *pixels.shape[-3:])).reshape(*lead, -1)

    def recurrent(self, prev: LatentState, action: torch.Tensor) -> torch.Tensor:
        return self.cell(self.inp(torch.cat([prev.z, action], -1)), prev.h)

    def prior_step(self, prev: LatentState, action: torch.Tensor, noise: torch.Tensor) -> LatentState:
        h = self.recurrent(prev, action)
        mean, std = self._gaussian(self.prior_head(h))
        return LatentState(h, mean + std * noise, mean, std)

    def observe_step(self, prev: LatentState, action: torch.Tensor, embed: torch.Tensor,
                     noise: torch.Tensor) -> tuple[LatentState, LatentState]:
        """Posterior sample plus the prior Gaussian sharing the same ``h``.

        The returned prior's ``z`` is its mean (it is only used for the KL term).
        """
        h = self.recurrent(prev, action)
        p_mean, p_std = self._gaussian(self.prior_head(h))
        q_mean, q_std = self._gaussian(self.post_head(torch.cat([h, embed], -1)))
        post = LatentState(h, q_mean + q_std * noise, q_mean, q_std)
        return post, LatentState(h, p_mean, p_mean, p_std)

    def posterior_step(self, prev: LatentState, action: torch.Tensor, pixels: torch.Tensor,
                       noise: torch.Tensor) -> LatentState:
        return self.observe_step(prev, action, self.embed(pixels), noise)[0]

    def decode(self, latent: LatentState) -> torch.Tensor:
        feat = latent.features
        lead = feat.shape[:-1]
        out = self.decoder(feat.reshape(-1, feat.shape[-1]))
        return out.reshape(*lead, *out.shape[1:])

    def log_likelihood(self, pixels: torch.Tensor, latent: LatentState) -> torch.Tensor:
        return unit_gaussian_loglik(pixels, self.decode(latent))

    @torch.no_grad()
    def tie_posterior_to_prior(self) -> None:
        """Make the posterior head ignore observations and copy the prior head."""
        for q, p in zip(self.post_head, self.prior_head):
            if isinstance(q, nn.Linear):
                q.weight.zero_()
                q.weight[:, : p.weight.shape[1]].copy_(p.weight)
                q.bias.copy_(p.bias)


@dataclass
class ElboOutput:
    loss: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor
    posteriors: LatentState  # (L, B, ...) time-major

    def terms(self) -> dict[str, float]:
        return {"elbo": -self.loss.item(), "recon": self.recon.item(), "kl": self.kl.item()}


def filter_sequence(model, pixels: torch.Tensor, actions: torch.Tensor, noise: torch.Tensor,
                    start: LatentState | None = None):
    """Sequential posterior sampling over a time-major batch.

    ``pixels`` (L, B, ...), ``actions`` (L-1, B, A), ``noise`` (L, B, Dz).
    The first observation is paired with a zero action from the initial state.
    Returns stacked posteriors and priors.
    """
    L, B = pixels.shape[:2]
    embeds = model.embed(pixels)
    prev = model.initial(B) if start is None else start
    zero = torch.zeros(B, model.action_dim, dtype=embeds.dtype)
    posts, priors = [], []
    for t in range(L):
        a = zero if t == 0 else actions[t - 1]
        post, prior = model.observe_step(prev, a, embeds[t], noise[t])
        posts.append(post)
        priors.append(prior)
        prev = post
    return LatentState.stack(posts), LatentState.stack(priors)


def elbo_loss(model, pixels: torch.Tensor, actions: torch.Tensor, noise: torch.Tensor,
              free_nats: float = 0.0, event_dims: int = 3) -> ElboOutput:
    """Negative sequence ELBO, averaged over batch and time.

    ``loss = -(sum_t log U(x_t | z_t) - KL(q_t || T_t)) / (L * B)`` with ``z_t``
    drawn sequentially from the posterior by reparameterization.
    """
    posts, priors = filter_sequence(model, pixels, actions, noise)
    recon = unit_gaussian_loglik(pixels, model.decode(posts), event_dims).mean()
    kl_t = gaussian_kl(posts.mean, posts.std, priors.mean, priors.std)
    kl = kl_t.mean()
    kl_term = torch.clamp(kl_t, min=free_nats).mean() if free_nats > 0 else kl
    loss = kl_term - recon
    for name, v in (("recon", recon), ("kl", kl)):
        if not torch.isfinite(v):
            raise NonFiniteError(name)
    return ElboOutput(loss, recon.detach(), kl.detach(), posts)


def imagine_rollout(model, start: LatentState, policy, horizon: int, action_noise: torch.Tensor,
                    state_noise: torch.Tensor):
    """Roll the latent transition forward under ``policy`` for ``horizon`` steps.

    ``policy(features, noise) -> action``. Noise tensors are (H, B, A) and
    (H, B, Dz). Returns stacked latents (H+1, B, ...) and actions (H, B, A).
    Fully differentiable in both policy and model parameters.
    """
    states, actions = [start], []
    cur = start
    for t in range(horizon):
        a = policy(cur.features, action_noise[t])
        cur = model.prior_step(cur, a, state_noise[t])
        actions.append(a)
        states.append(cur)
    acts = torch.stack(actions) if actions else start.z.new_zeros(0, start.z.shape[0], model.action_dim)
    return LatentState.stack(states), acts
