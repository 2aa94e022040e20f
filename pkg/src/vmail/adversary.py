"""Latent-space discriminator and the learned reward ``log D``."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .core import NonFiniteError
from .nets import mlp


class Discriminator(nn.Module):
    """Two-hidden-layer map from (h, z, a) to a logit; D = sigmoid(logit)."""

    def __init__(self, feature_dim: int, action_dim: int, hidden_dim: int = 128):
        super().__init__()
        self.net = mlp(feature_dim + action_dim, hidden_dim, 1, layers=2)

    def logit(self, features: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([features, action], -1)).squeeze(-1)

    def forward(self, features, action):
        return torch.sigmoid(self.logit(features, action))


def discriminator_loss(disc: Discriminator, expert_features, expert_actions, policy_features, policy_actions,
                       expert_weights=None, policy_weights=None) -> torch.Tensor:
    """``mean[-log D(expert)] + mean[-log(1 - D(policy))]``; inputs are treated as constants.

    Optional weights (summing to 1 per side) turn the means into expectations
    under given distributions, which is how the tabular oracle test trains.
    """
    le = disc.logit(expert_features.detach(), expert_actions.detach())
    lp = disc.logit(policy_features.detach(), policy_actions.detach())
    # -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l)
    te, tp = F.softplus(-le), F.softplus(lp)
    loss = ((te * expert_weights).sum() if expert_weights is not None else te.mean()) + \
           ((tp * policy_weights).sum() if policy_weights is not None else tp.mean())
    if not torch.isfinite(loss):
        raise NonFiniteError("disc_loss")
    return loss


def reward(disc: Discriminator, features, action, logit_clip: float = 10.0) -> torch.Tensor:
    """``log D(z, a)`` with the logit clamped to ``[-logit_clip, logit_clip]``; always <= 0."""
    return F.logsigmoid(torch.clamp(disc.logit(features, action), -logit_clip, logit_clip))


def add_input_noise(features: torch.Tensor, std: float, noise: torch.Tensor | None) -> torch.Tensor:
    if std <= 0 or noise is None:
        return features
    return features + std * noise
