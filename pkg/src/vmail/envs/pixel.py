"""Pixel-rendered continuous-control POMDPs with scripted privileged experts."""

from __future__ import annotations

import contextlib
import math

import numpy as np

from ..core import Observation, Trajectory, derive_seed

RES = 16
_GRID = -1.0 + (2.0 * np.arange(RES) + 1.0) / RES  # pixel centres in [-1, 1]


def _blob(points: np.ndarray, sigma: float) -> np.ndarray:
    """Max-combined isotropic Gaussian blobs at (x, y) points; y points up."""
    xs = _GRID[None, None, :]
    ys = _GRID[::-1][None, :, None]
    d2 = (xs - points[:, 0, None, None]) ** 2 + (ys - points[:, 1, None, None]) ** 2
    img = np.exp(-d2 / (2.0 * sigma ** 2)).max(axis=0)
    return img.astype(np.float32)[None]


class PixelEnv:
    """Base class. Subclasses define ``_reset_state``, ``_dynamics``, ``_render``,
    ``_reward`` and ``expert_action``.

    The agent-facing surface is ``reset``/``step``, which only expose rendered
    pixels. ``state`` and ``expert_act`` are privileged (demo generation only).
    """

    env_id = "pixel"
    action_dim = 1
    episode_length = 50

    def __init__(self, noise_std: float = 0.0):
        self.noise_std = noise_std
        self.state = None
        self.t = 0
        self.episode_return = 0.0
        self.clamp_warnings = 0
        self.interaction_steps = 0
        self.eval_steps = 0
        self._eval_mode = False
        self._rng = np.random.default_rng(0)

    # -- reward bookkeeping, evaluation only --------------------------------
    @property
    def max_return(self) -> float:
        return float(self.episode_length)

    @contextlib.contextmanager
    def evaluating(self):
        prev, self._eval_mode = self._eval_mode, True
        try:
            yield self
        finally:
            self._eval_mode = prev

    # -- episode API --------------------------------------------------------
    def reset(self, seed: int) -> Observation:
        self._rng = np.random.default_rng(derive_seed(seed, "env"))
        self.state = self._reset_state(self._rng)
        self.t = 1
        self.episode_return = self._reward(self.state)
        return self.observe()

    @property
    def done(self) -> bool:
        return self.t >= self.episode_length

    def observe(self) -> Observation:
        return Observation(pixels=self._render(self.state))

    def step(self, action) -> tuple[Observation, bool]:
        if self.state is None or self.done:
            raise RuntimeError("step() called on a finished or unreset episode")
        a = np.asarray(action, dtype=np.float64).reshape(self.action_dim)
        if np.any(np.abs(a) > 1.0) or not np.all(np.isfinite(a)):
            self.clamp_warnings += 1
            a = np.clip(np.nan_to_num(a), -1.0, 1.0)
        noise = self._rng.standard_normal(len(self.state)) * self.noise_std
        self.state = self._dynamics(self.state, a, noise)
        self.t += 1
        self.episode_return += self._reward(self.state)
        if self._eval_mode:
            self.eval_steps += 1
        else:
            self.interaction_steps += 1
        return self.observe(), self.done

    def expert_act(self, state=None) -> np.ndarray:
        s = self.state if state is None else np.asarray(state, dtype=np.float64)
        return np.clip(self.expert_action(s), -1.0, 1.0).astype(np.float32)

    # -- subclass hooks -----------------------------------------------------
    def _reset_state(self, rng) -> np.ndarray:
        raise NotImplementedError

    def _dynamics(self, state, action, noise) -> np.ndarray:
        raise NotImplementedError

    def _render(self, state) -> np.ndarray:
        raise NotImplementedError

    def _reward(self, state) -> float:
        raise NotImplementedError

    def expert_action(self, state) -> np.ndarray:
        raise NotImplementedError

    def render_state(self, state) -> np.ndarray:
        return self._render(np.asarray(state, dtype=np.float64))


QUADRANT_GOALS = {
    "NE": (0.5, 0.5),
    "NW": (-0.5, 0.5),
    "SE": (0.5, -0.5),
    "SW": (-0.5, -0.5),
}


class PointMass(PixelEnv):
    """Damped 2-D point mass in the box [-1, 1]^2; state is (x, y, vx, vy).

    The goal is not rendered: the task is only conveyed by demonstrations.
    """

    action_dim = 2
    dt = 0.1
    force = 4.0
    damping = 1.0
    kp, kd = 2.0, 0.9
    blob_sigma = 0.15

    def __init__(self, quadrant: str = "NE", noise_std: float = 0.0):
        super().__init__(noise_std)
        if quadrant not in QUADRANT_GOALS:
            raise ValueError(f"unknown quadrant {quadrant!r}; expected one of {sorted(QUADRANT_GOALS)}")
        self.quadrant = quadrant
        self.env_id = f"pixel-pointmass:{quadrant}"
        self.goal = np.array(QUADRANT_GOALS[quadrant])
        corners = np.array([[-1, -1], [-1, 1], [1, -1], [1, 1]], dtype=np.float64)
        self.max_dist = float(np.max(np.linalg.norm(corners - self.goal, axis=1)))

    def _reset_state(self, rng):
        return np.concatenate([rng.uniform(-0.8, 0.8, 2), np.zeros(2)])

    def _dynamics(self, state, action, noise):
        pos, vel = state[:2], state[2:]
        vel = vel + self.dt * (self.force * action - self.damping * vel) + noise[2:]
        pos = pos + self.dt * vel + noise[:2]
        hit = np.abs(pos) > 1.0
        pos = np.clip(pos, -1.0, 1.0)
        vel = np.where(hit, 0.0, vel)
        return np.concatenate([pos, vel])

    def _render(self, state):
        return _blob(state[None, :2], self.blob_sigma)

    def _reward(self, state):
        dist = float(np.linalg.norm(state[:2] - self.goal))
        return float(np.clip(1.0 - dist / self.max_dist, 0.0, 1.0))

    def expert_action(self, state):
        pos, vel = state[:2], state[2:]
        return self.kp * (self.goal - pos) - self.kd * vel


class Pendulum(PixelEnv):
    """Torque-limited pendulum; state is (angle, angular velocity), angle 0 hangs down.

    Rendering shows only the rod, so states differing in velocity alias.
    """

    env_id = "pixel-pendulum"
    action_dim = 1
    dt = 0.1
    gravity = 10.0
    max_torque = 14.0
    friction = 0.1
    max_speed = 10.0
    rod = 0.8
    blob_sigma = 0.12

    def _reset_state(self, rng):
        return np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])

    def _dynamics(self, state, action, noise):
        theta, omega = state
        acc = -self.gravity * math.sin(theta) + self.max_torque * float(action[0]) - self.friction * omega
        omega = float(np.clip(omega + self.dt * acc + noise[1], -self.max_speed, self.max_speed))
        theta = theta + self.dt * omega + noise[0]
        theta = (theta + math.pi) % (2 * math.pi) - math.pi
        return np.array([theta, omega])

    def _render(self, state):
        theta = state[0]
        direction = np.array([math.sin(theta), -math.cos(theta)])
        pts = np.linspace(0.15, 1.0, 6)[:, None] * self.rod * direction[None]
        return _blob(pts, self.blob_sigma)

    def _reward(self, state):
        return float((1.0 - math.cos(state[0])) / 2.0)

    def expert_action(self, state):
        theta, omega = state
        err = (theta - math.pi + math.pi) % (2 * math.pi) - math.pi  # signed distance to upright
        if abs(err) < 0.6:
            torque = -40.0 * err - 8.0 * omega + self.gravity * math.sin(theta)
        else:
            energy = 0.5 * omega ** 2 + self.gravity * (1.0 - math.cos(theta))
            target = 2.0 * self.gravity
            direction = 1.0 if omega >= 0.0 else -1.0
            torque = 3.0 * (target - energy) * direction
        return np.array([torque / self.max_torque])


def rollout_expert(env: PixelEnv, seed: int) -> Trajectory:
    obs = env.reset(seed)
    pixels, actions = [obs.pixels], []
    while not env.done:
        a = env.expert_act()
        obs, _ = env.step(a)
        pixels.append(obs.pixels)
        actions.append(a)
    return Trajectory(pixels=np.stack(pixels), actions=np.array(actions, np.float32).reshape(-1, env.action_dim),
                      env_id=env.env_id, eval_returns=float(env.episode_return))


def generate_demos(env: PixelEnv, n: int, seed: int) -> list[Trajectory]:
    """``n`` scripted-expert episodes with per-episode randomized initial states."""
    if n < 1:
        raise ValueError("n must be >= 1")
    with env.evaluating():
        return [rollout_expert(env, derive_seed(seed, f"demo/{i}")) for i in range(n)]
