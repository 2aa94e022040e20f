"""Scalar linear-Gaussian state-space model exposing the RSSM step interface.

Used as a toy where the exact marginal likelihood (Kalman filter) and the exact
ELBO (Gaussian moment propagation) are available in closed form.

    prior      z_t ~ N(a z_{t-1} + b u_{t-1}, sp^2)
    posterior  z_t ~ N(alpha z_{t-1} + beta u_{t-1} + kappa x_t + delta, sq^2)
    decoder    x_t ~ N(c z_t + d, 1)

with ``z_0 = 0`` and the first action ``u_0 = 0``.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .rssm import LatentState

LOG_2PI = math.log(2.0 * math.pi)


class LinearGaussianSSM(nn.Module):
    action_dim = 1
    stoch_dim = 1
    deter_dim = 0

    def __init__(self, a=0.9, b=0.5, log_sp=0.0, alpha=0.5, beta=0.3, kappa=0.4, delta=0.0,
                 log_sq=-0.5, c=1.0, d=0.0, dtype=torch.float64):
        super().__init__()
        vals = dict(a=a, b=b, log_sp=log_sp, alpha=alpha, beta=beta, kappa=kappa, delta=delta,
                    log_sq=log_sq, c=c, d=d)
        for k, v in vals.items():
            setattr(self, k, nn.Parameter(torch.tensor(float(v), dtype=dtype)))

    @classmethod
    def random(cls, rng: np.random.Generator) -> LinearGaussianSSM:
        return cls(a=rng.uniform(-1.2, 1.2), b=rng.normal(), log_sp=rng.uniform(-1, 1),
                   alpha=rng.uniform(-1.2, 1.2), beta=rng.normal(), kappa=rng.normal(),
                   delta=rng.normal(scale=0.3), log_sq=rng.uniform(-1.5, 1), c=rng.normal(scale=1.5),
                   d=rng.normal(scale=0.3))

    def values(self) -> dict[str, float]:
        return {k: v.item() for k, v in self.named_parameters()}

    # -- RSSM-compatible interface -----------------------------------------
    def initial(self, batch: int) -> LatentState:
        z = torch.zeros(batch, 1, dtype=self.a.dtype)
        return LatentState(z[:, :0], z, z, torch.ones_like(z))

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        return pixels.reshape(*pixels.shape[:-3], -1)

    def prior_step(self, prev: LatentState, action, noise) -> LatentState:
        mean = self.a * prev.z + self.b * action
        std = torch.exp(self.log_sp).expand_as(mean)
        return LatentState(prev.h, mean + std * noise, mean, std)

    def observe_step(self, prev: LatentState, action, embed, noise):
        prior = self.prior_step(prev, action, torch.zeros_like(prev.z))
        mean = self.alpha * prev.z + self.beta * action + self.kappa * embed + self.delta
        std = torch.exp(self.log_sq).expand_as(mean)
        return LatentState(prev.h, mean + std * noise, mean, std), prior

    def posterior_step(self, prev, action, pixels, noise):
        return self.observe_step(prev, action, self.embed(pixels), noise)[0]

    def decode(self, latent: LatentState) -> torch.Tensor:
        mean = self.c * latent.z + self.d
        return mean.reshape(*mean.shape, 1, 1)


def kalman_log_likelihood(p: dict, xs, us) -> float:
    """Exact log p(x_{1:T} | u_{1:T-1}) by Kalman filtering; ``p`` from ``values()``."""
    sp2 = math.exp(2 * p["log_sp"])
    m, P = 0.0, 0.0
    ll = 0.0
    for t, x in enumerate(xs):
        u = 0.0 if t == 0 else us[t - 1]
        m_pred = p["a"] * m + p["b"] * u
        P_pred = p["a"] ** 2 * P + sp2
        S = p["c"] ** 2 * P_pred + 1.0
        resid = x - p["c"] * m_pred - p["d"]
        ll += -0.5 * (LOG_2PI + math.log(S) + resid ** 2 / S)
        K = P_pred * p["c"] / S
        m = m_pred + K * resid
        P = (1.0 - K * p["c"]) * P_pred
    return ll


def exact_elbo(p: dict, xs, us) -> float:
    """Closed-form ELBO sum_t E_q[log U(x_t|z_t)] - E_q[KL(q_t || T_t)] for the toy."""
    sp2, sq2 = math.exp(2 * p["log_sp"]), math.exp(2 * p["log_sq"])
    m, v = 0.0, 0.0  # moments of z_{t-1} under q
    total = 0.0
    for t, x in enumerate(xs):
        u = 0.0 if t == 0 else us[t - 1]
        # KL between posterior and prior, both conditioned on z_{t-1}
        diff_mean = (p["alpha"] - p["a"]) * m + (p["beta"] - p["b"]) * u + p["kappa"] * x + p["delta"]
        diff_sq = diff_mean ** 2 + (p["alpha"] - p["a"]) ** 2 * v
        kl = 0.5 * (sq2 / sp2 + diff_sq / sp2 - 1.0 - math.log(sq2 / sp2))
        m = p["alpha"] * m + p["beta"] * u + p["kappa"] * x + p["delta"]
        v = p["alpha"] ** 2 * v + sq2
        recon = -0.5 * LOG_2PI - 0.5 * ((x - p["c"] * m - p["d"]) ** 2 + p["c"] ** 2 * v)
        total += recon - kl
    return total
