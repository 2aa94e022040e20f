"""Shared data model: trajectories, replay buffers, seeding, archives, run bookkeeping."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
import zlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

ARCHIVE_FORMAT = "vmail-archive/1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class EmptyBufferError(RuntimeError):
    pass


class ArchiveError(RuntimeError):
    pass


class ConfigError(ValueError):
    """Malformed run configuration. ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class NonFiniteError(FloatingPointError):
    def __init__(self, term: str, step: int | None = None):
        where = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite value in '{term}'{where}")
        self.term = term
        self.step = step


# ---------------------------------------------------------------------------
# seeding


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit seed for a named component stream."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & (2**63 - 1)


def make_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label))


def torch_generator(seed: int, label: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, label))
    return g


def seed_torch(seed: int, label: str) -> None:
    """Seed torch's global stream, used only for parameter initialization."""
    torch.manual_seed(derive_seed(seed, label))


# ---------------------------------------------------------------------------
# observations and trajectories


@dataclass
class Observation:
    pixels: np.ndarray  # (C, H, W) in [0, 1]
    proprio: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))


@dataclass
class Trajectory:
    """Observations ``x_{1:T}`` and actions ``a_{1:T-1}`` of one episode.

    Arrays are stacked: ``pixels`` is (T, C, H, W), ``proprio`` is (T, P) with
    P possibly 0, ``actions`` is (T-1, A).
    """

    pixels: np.ndarray
    actions: np.ndarray
    env_id: str
    proprio: np.ndarray | None = None
    eval_returns: float | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        if self.actions.ndim == 1:
            self.actions = self.actions.reshape(len(self.actions), -1)
        if self.proprio is None:
            self.proprio = np.zeros((len(self.pixels), 0), np.float32)
        self.proprio = np.asarray(self.proprio, dtype=np.float32)
        if len(self.pixels) < 1:
            raise ValueError("trajectory needs at least one observation")
        if len(self.actions) != len(self.pixels) - 1:
            raise ValueError(
                f"expected {len(self.pixels) - 1} actions for {len(self.pixels)} observations, "
                f"got {len(self.actions)}")
        if len(self.proprio) != len(self.pixels):
            raise ValueError("proprio length must match observation count")

    def __len__(self) -> int:
        return len(self.pixels)

    def window(self, start: int, length: int) -> Trajectory:
        stop = min(start + length, len(self))
        return Trajectory(
            pixels=self.pixels[start:stop],
            actions=self.actions[start:stop - 1],
            proprio=self.proprio[start:stop],
            env_id=self.env_id,
            eval_returns=None,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"pixels": self.pixels, "actions": self.actions, "proprio": self.proprio}

    def equals(self, other: Trajectory) -> bool:
        return (self.env_id == other.env_id and self.eval_returns == other.eval_returns
                and all(np.array_equal(a, b) and a.shape == b.shape
                        for a, b in zip(self.arrays().values(), other.arrays().values())))


class ReplayBuffer:
    """FIFO buffer of whole trajectories; capacity counts trajectories."""

    def __init__(self, capacity: int = 1000, trajectories: Iterable[Trajectory] = ()):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[Trajectory] = deque(maxlen=capacity)
        for t in trajectories:
            self.add(t)

    def add(self, traj: Trajectory) -> None:
        self._items.append(traj)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i: int) -> Trajectory:
        return self._items[i]

    @property
    def trajectories(self) -> list[Trajectory]:
        return list(self._items)

    @property
    def steps(self) -> int:
        return sum(len(t) for t in self._items)


def sample_subsequences(buffer: ReplayBuffer | Sequence[Trajectory], count: int, length: int,
                        seed: int | np.random.Generator) -> list[Trajectory]:
    """Draw ``count`` contiguous windows, uniform over stored trajectories and start offsets.

    A trajectory shorter than ``length`` is returned whole.
    """
    trajs = list(buffer)
    if not trajs:
        raise EmptyBufferError("cannot sample from an empty buffer")
    if length < 2:
        raise ValueError("subsequence length must be >= 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.integers(len(trajs), size=count)
    out = []
    for i in idx:
        traj = trajs[i]
        n_starts = max(len(traj) - length + 1, 1)
        start = int(rng.integers(n_starts))
        out.append(traj.window(start, length))
    return out


def stack_batch(slices: Sequence[Trajectory], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Time-major tensors ``pixels (L, B, C, H, W)`` and ``actions (L-1, B, A)``.

    All slices must share one length.
    """
    lengths = {len(s) for s in slices}
    if len(lengths) != 1:
        raise ValueError(f"slices have mixed lengths {sorted(lengths)}")
    pix = np.stack([s.pixels for s in slices], axis=1)
    act = np.stack([s.actions for s in slices], axis=1)
    return torch.as_tensor(pix, dtype=dtype), torch.as_tensor(act, dtype=dtype)


# ---------------------------------------------------------------------------
# archive format


def save_arrays(arrays: dict[str, np.ndarray], directory: Path, prefix: str = "") -> dict:
    entries = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = "float64" if arr.dtype == np.float64 else "float32"
        fname = f"{prefix}{name}.bin"
        (directory / fname).write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": dtype}
    return entries


def load_arrays(entries: dict, directory: Path) -> dict[str, np.ndarray]:
    out = {}
    for name, meta in entries.items():
        path = directory / meta["file"]
        if not path.exists():
            raise ArchiveError(f"missing array file: {meta['file']}")
        dtype = meta.get("dtype", "float32")
        if dtype not in _DTYPES:
            raise ArchiveError(f"unsupported dtype {dtype!r} for {meta['file']}")
        raw = np.frombuffer(path.read_bytes(), dtype=_DTYPES[dtype])
        shape = tuple(meta["shape"])
        if raw.size != int(np.prod(shape)):
            raise ArchiveError(
                f"{meta['file']}: {raw.size} values on disk, manifest shape {list(shape)}")
        out[name] = raw.reshape(shape).astype(dtype)
    return out


def save_trajectories(trajs: Sequence[Trajectory], path) -> dict:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, traj in enumerate(trajs):
        records.append({
            "env_id": traj.env_id,
            "eval_returns": traj.eval_returns,
            "arrays": save_arrays(traj.arrays(), directory, prefix=f"traj_{i:05d}_"),
        })
    manifest = {"format": ARCHIVE_FORMAT, "count": len(records), "trajectories": records}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_trajectories(path) -> list[Trajectory]:
    directory = Path(path)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise ArchiveError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(mpath.read_text())
        records = manifest["trajectories"]
        if manifest.get("count") != len(records):
            raise ArchiveError("manifest count does not match its entries")
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ArchiveError(f"corrupt manifest {mpath}: {exc}") from exc
    out = []
    for rec in records:
        arrays = load_arrays(rec["arrays"], directory)
        try:
            out.append(Trajectory(env_id=rec["env_id"], eval_returns=rec.get("eval_returns"), **arrays))
        except ValueError as exc:
            raise ArchiveError(f"shape mismatch in archive entry: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# run configuration and reports


@dataclass
class RunConfig:
    seed: int = 0
    env_id: str = "pixel-pointmass:NE"
    demo_count: int = 10
    deter_dim: int = 64
    stoch_dim: int = 16
    hidden_dim: int = 128
    horizon: int = 15
    expansion: int = 5
    gamma: float = 0.99
    model_lr: float = 6e-4
    actor_lr: float = 8e-5
    critic_lr: float = 8e-5
    disc_lr: float = 8e-5
    batch_size: int = 16
    seq_len: int = 20
    total_env_steps: int = 100_000
    train_iters: int = 100
    eval_every: int = 5_000
    eval_episodes: int = 5
    warmup_episodes: int = 5
    buffer_capacity: int = 1000
    min_std: float = 0.1
    free_nats: float = 0.0
    disc_input_noise: float = 0.1
    logit_clip: float = 10.0
    entropy_coef: float = 0.0
    target_value: bool = False
    grad_clip: float = 100.0
    expl_noise: float = 0.0
    bc_steps: int = 5_000
    bc_window: int = 3
    bc_lr: float = 3e-4
    bc_nll_beta: float = 0.5
    transfer_iters: int = 10_000
    checkpoint_every: int = 0
    expert_return: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma", "must lie in (0, 1)")
        if self.expansion < 1:
            raise ConfigError("expansion", "must be >= 1")
        if self.horizon < self.expansion:
            raise ConfigError("horizon", "must be >= expansion")
        for name in ("model_lr", "actor_lr", "critic_lr", "disc_lr", "bc_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "learning rates must be > 0")
        for name in ("demo_count", "deter_dim", "stoch_dim", "hidden_dim", "batch_size",
                     "eval_episodes", "buffer_capacity", "bc_window"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.seq_len < 2:
            raise ConfigError("seq_len", "must be >= 2")
        for name in ("total_env_steps", "train_iters", "warmup_episodes", "bc_steps",
                     "transfer_iters", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every", "must be >= 1")
        if not 0.0 <= self.bc_nll_beta <= 1.0:
            raise ConfigError("bc_nll_beta", "must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key in data:
            if key not in fields:
                raise ConfigError(key, "unknown config key")
        kwargs = {}
        defaults = cls()
        for key, value in data.items():
            default = getattr(defaults, key)
            if key == "expert_return":
                ok = value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
            elif isinstance(default, bool):
                ok = isinstance(value, bool)
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif isinstance(default, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            else:
                ok = isinstance(value, str)
            if not ok:
                raise ConfigError(key, f"wrong type {type(value).__name__}")
            kwargs[key] = float(value) if isinstance(default, float) and value is not None else value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


class RunReport:
    """Metrics stream plus checkpoint references for one run."""

    def __init__(self, config: RunConfig | None = None, info: dict | None = None):
        self.config = config
        self.info = dict(info or {})
        self.metrics: list[tuple[int, str, float]] = []
        self.checkpoints: list[str] = []
        self._t0 = time.perf_counter()
        self.wall_seconds = 0.0

    def log(self, step: int, name: str, value: float) -> None:
        for s, n, _ in reversed(self.metrics):
            if n == name:
                if step < s:
                    raise ValueError(f"metric {name!r} step went backwards: {step} < {s}")
                break
        self.metrics.append((int(step), name, float(value)))

    def series(self, name: str) -> list[tuple[int, float]]:
        return [(s, v) for s, n, v in self.metrics if n == name]

    def last(self, name: str) -> float | None:
        vals = self.series(name)
        return vals[-1][1] if vals else None

    def finish(self) -> RunReport:
        self.wall_seconds = time.perf_counter() - self._t0
        return self

    def to_dict(self) -> dict:
        return {
            "config": None if self.config is None else self.config.to_dict(),
            "info": self.info,
            "checkpoints": self.checkpoints,
            "wall_seconds": self.wall_seconds,
            "final": {n: self.last(n) for n in dict.fromkeys(n for _, n, _ in self.metrics)},
        }


def write_metrics_csv(metrics: Iterable[tuple[int, str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "metric", "value"])
        for step, name, value in metrics:
            w.writerow([step, name, repr(float(value))])


def read_metrics_csv(path) -> list[tuple[int, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["step", "metric", "value"]:
            raise ValueError(f"{path}: expected header step,metric,value")
        return [(int(r["step"]), r["metric"], float(r["value"])) for r in reader]
