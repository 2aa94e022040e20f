"""Environment registry.

Ids: ``pixel-pendulum``, ``pixel-pointmass:<quadrant>`` (NE, NW, SE, SW) and
``tabular:<path to JSON>``.
"""

from functools import lru_cache

import numpy as np

from .pixel import PixelEnv, PointMass, Pendulum, QUADRANT_GOALS, generate_demos, rollout_expert
from .tabular import HistoryPolicy, TabularPOMDP, random_state_policy, random_tabular_pomdp

EXPERT_REFERENCE_EPISODES = 100
EXPERT_REFERENCE_SEED = 12345


class UnknownEnvError(ValueError):
    pass


def make_env(env_id: str, **kwargs):
    if env_id == "pixel-pendulum":
        return Pendulum(**kwargs)
    if env_id.startswith("pixel-pointmass:"):
        quadrant = env_id.split(":", 1)[1]
        if quadrant not in QUADRANT_GOALS:
            raise UnknownEnvError(f"unknown point-mass quadrant in {env_id!r}")
        return PointMass(quadrant, **kwargs)
    if env_id.startswith("tabular:"):
        return TabularPOMDP.load(env_id.split(":", 1)[1])
    raise UnknownEnvError(f"unknown environment id {env_id!r}")


@lru_cache(maxsize=None)
def expert_return(env_id: str) -> float:
    """Mean scripted-expert return over a fixed reference evaluation run."""
    env = make_env(env_id)
    demos = generate_demos(env, EXPERT_REFERENCE_EPISODES, EXPERT_REFERENCE_SEED)
    return float(np.mean([d.eval_returns for d in demos]))


__all__ = [
    "PixelEnv", "PointMass", "Pendulum", "QUADRANT_GOALS", "generate_demos", "rollout_expert",
    "HistoryPolicy", "TabularPOMDP", "random_state_policy", "random_tabular_pomdp",
    "make_env", "expert_return", "UnknownEnvError",
]
