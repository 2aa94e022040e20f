import contextlib

import torch
from torch import nn


def mlp(inp: int, hidden: int, out: int, layers: int = 2, act=nn.ELU) -> nn.Sequential:
    mods, d = [], inp
    for _ in range(layers):
        mods += [nn.Linear(d, hidden), act()]
        d = hidden
    mods.append(nn.Linear(d, out))
    return nn.Sequential(*mods)


class ConvEncoder(nn.Module):
    """(N, C, 16, 16) pixels -> (N, embed_dim)."""

    def __init__(self, channels: int = 1, depth: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, depth, 4, stride=2), nn.ELU(),       # 7x7
            nn.Conv2d(depth, 2 * depth, 3, stride=2), nn.ELU(),      # 3x3
            nn.Flatten(),
        )
        self.embed_dim = 2 * depth * 9

    def forward(self, x):
        return self.net(x - 0.5)


class ConvDecoder(nn.Module):
    """(N, feat_dim) -> (N, C, 16, 16) pixel means."""

    def __init__(self, feat_dim: int, channels: int = 1, depth: int = 32):
        super().__init__()
        self.depth = depth
        self.fc = nn.Linear(feat_dim, 2 * depth * 16)
        self.net = nn.Sequential(
            nn.ELU(),
            nn.ConvTranspose2d(2 * depth, depth, 4, stride=2, padding=1), nn.ELU(),  # 8x8
            nn.ConvTranspose2d(depth, channels, 4, stride=2, padding=1),            # 16x16
        )

    def forward(self, feat):
        x = self.fc(feat).view(-1, 2 * self.depth, 4, 4)
        return self.net(x) + 0.5


@contextlib.contextmanager
def frozen(*modules: nn.Module):
    """Disable parameter gradients while still letting gradients flow through inputs."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def grad_norm(params) -> float:
    grads = [p.grad.detach().flatten() for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.cat(grads).norm())
