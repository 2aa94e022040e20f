"""Latent-conditioned actor and critic trained by backpropagating K-step value
expansion returns through the learned latent dynamics."""

from __future__ import annotations

import copy

import torch
from torch import nn

from . import adversary
from .core import NonFiniteError
from .models import LatentState, imagine_rollout
from .nets import frozen, grad_norm, mlp

STD_MIN, STD_MAX = 1e-3, 2.0


class Policy(nn.Module):
    """Diagonal Gaussian over pre-squash actions; emitted actions are tanh of a sample."""

    def __init__(self, feature_dim: int, action_dim: int, hidden_dim: int = 128, init_std: float = 0.5):
        super().__init__()
        self.action_dim = action_dim
        self.net = mlp(feature_dim, hidden_dim, 2 * action_dim, layers=2)
        # raw offset so that a zero pre-activation gives ``init_std``
        frac = (init_std - STD_MIN) / (STD_MAX - STD_MIN)
        self.std_offset = float(torch.log(torch.tensor(frac / (1 - frac))))

    def dist_params(self, features):
        mean, raw = self.net(features).chunk(2, -1)
        std = STD_MIN + (STD_MAX - STD_MIN) * torch.sigmoid(raw + self.std_offset)
        return mean, std

    def act(self, features, noise=None, mode: str = "sample"):
        mean, std = self.dist_params(features)
        if mode == "mean" or noise is None:
            return torch.tanh(mean)
        return torch.tanh(mean + std * noise)

    def forward(self, features, noise):
        return self.act(features, noise)

    def entropy(self, features):
        _, std = self.dist_params(features)
        return torch.log(std).sum(-1)


class ValueFunction(nn.Module):
    def __init__(self, feature_dim: int, hidden_dim: int = 128):
        super().__init__()
        self.net = mlp(feature_dim, hidden_dim, 1, layers=2)

    def forward(self, features):
        return self.net(features).squeeze(-1)


def expansion_targets(rewards: torch.Tensor, values: torch.Tensor, K: int, gamma: float) -> torch.Tensor:
    """K-step returns ``sum_{i<K} g^i r_{t+i} + g^K V_{t+K}`` for every t in 0..H-K.

    ``rewards`` is (H, B), ``values`` is (H+1, B); result is (H-K+1, B).
    """
    H = rewards.shape[0]
    if not 1 <= K <= H:
        raise ValueError(f"need 1 <= K <= H, got K={K}, H={H}")
    n = H - K + 1
    ret = gamma ** K * values[K:K + n]
    for i in range(K - 1, -1, -1):
        ret = ret + gamma ** i * rewards[i:i + n]
    return ret


def value_expansion_return(model, disc, policy, value, start: LatentState, K: int, action_noise, state_noise,
                           gamma: float = 0.99, logit_clip: float = 10.0) -> torch.Tensor:
    """Per-start ``sum_{tau<K} g^tau log D(z_tau, a_tau) + g^K V(z_K)`` along an imagined rollout."""
    states, actions = imagine_rollout(model, start, policy, K, action_noise, state_noise)
    r = adversary.reward(disc, states.features[:-1], actions, logit_clip)
    v = value(states.features)
    return expansion_targets(r, v, K, gamma)[0]


class ActorCritic:
    """Actor, critic and their optimizers.

    Model and discriminator parameters are never updated here; gradients only
    pass through them to reach the actor.
    """

    def __init__(self, feature_dim: int, action_dim: int, hidden_dim: int = 128, actor_lr: float = 8e-5,
                 critic_lr: float = 8e-5, gamma: float = 0.99, expansion: int = 5, entropy_coef: float = 0.0,
                 target_value: bool = False, grad_clip: float = 100.0, logit_clip: float = 10.0,
                 target_every: int = 100):
        self.policy = Policy(feature_dim, action_dim, hidden_dim)
        self.value = ValueFunction(feature_dim, hidden_dim)
        self.actor_opt = torch.optim.Adam(self.policy.parameters(), lr=actor_lr)
        self.critic_opt = torch.optim.Adam(self.value.parameters(), lr=critic_lr)
        self.gamma = gamma
        self.expansion = expansion
        self.entropy_coef = entropy_coef
        self.grad_clip = grad_clip
        self.logit_clip = logit_clip
        self.target = copy.deepcopy(self.value) if target_value else None
        self.target_every = target_every
        self.updates = 0
        self.version = 0  # bumped on each policy parameter change

    def bootstrap_value(self) -> nn.Module:
        return self.target if self.target is not None else self.value

    def imagine(self, model, start: LatentState, horizon: int, action_noise, state_noise):
        with frozen(model):
            return imagine_rollout(model, start, self.policy, horizon, action_noise, state_noise)

    def returns(self, disc, states: LatentState, actions: torch.Tensor) -> torch.Tensor:
        with frozen(disc, self.value, *( [self.target] if self.target is not None else [])):
            r = adversary.reward(disc, states.features[:-1], actions, self.logit_clip)
            v = self.bootstrap_value()(states.features)
            return expansion_targets(r, v, self.expansion, self.gamma), r

    def policy_update(self, disc, states: LatentState, actions: torch.Tensor) -> dict:
        """One ascent step on the mean K-step value expansion of a fresh rollout."""
        targets, r = self.returns(disc, states, actions)
        objective = targets.mean()
        if self.entropy_coef > 0:
            objective = objective + self.entropy_coef * self.policy.entropy(states.features[:-1]).mean()
        loss = -objective
        if not torch.isfinite(loss):
            raise NonFiniteError("policy_loss")
        self.actor_opt.zero_grad()
        loss.backward()
        gn = grad_norm(self.policy.parameters())
        if gn != gn:
            raise NonFiniteError("policy_grad")
        nn.utils.clip_grad_norm_(self.policy.parameters(), self.grad_clip)
        self.actor_opt.step()
        self.version += 1
        return {"policy_objective": objective.item(), "mean_imagined_reward": r.mean().item(),
                "policy_grad_norm": gn, "_targets": targets.detach()}

    def value_update(self, states: LatentState, targets: torch.Tensor) -> dict:
        """Regress V on gradient-stopped bootstrapped targets."""
        n = targets.shape[0]
        pred = self.value(states.features[:n].detach())
        loss = 0.5 * ((pred - targets.detach()) ** 2).mean()
        if not torch.isfinite(loss):
            raise NonFiniteError("value_loss")
        self.critic_opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(self.value.parameters(), self.grad_clip)
        self.critic_opt.step()
        self.updates += 1
        if self.target is not None and self.updates % self.target_every == 0:
            self.target.load_state_dict(self.value.state_dict())
        return {"value_loss": loss.item()}

    def modules(self) -> dict[str, nn.Module]:
        return {"policy": self.policy, "value": self.value}
