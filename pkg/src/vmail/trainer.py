"""Training loops: V-MAIL (single and multi-task), zero-shot transfer,
behavior cloning, plus evaluation and run-directory persistence."""

from __future__ import annotations

import json
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import adversary
from .agent import ActorCritic, Policy
from .core import (
    NonFiniteError,
    ReplayBuffer,
    RunConfig,
    RunReport,
    Trajectory,
    derive_seed,
    load_arrays,
    load_trajectories,
    make_rng,
    sample_subsequences,
    save_arrays,
    save_trajectories,
    seed_torch,
    stack_batch,
    torch_generator,
    write_metrics_csv,
)
from .envs import PixelEnv, expert_return, make_env
from .models import RSSM, LatentState, elbo_loss, filter_sequence
from .nets import ConvEncoder, mlp

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# acting and evaluation


class LatentAgent:
    """Posterior filtering online plus the latent policy."""

    def __init__(self, model: RSSM, policy: Policy, mode: str = "mean", generator: torch.Generator | None = None,
                 expl_noise: float = 0.0):
        self.model, self.policy, self.mode = model, policy, mode
        self.generator = generator
        self.expl_noise = expl_noise

    def _noise(self, *shape):
        if self.generator is None or self.mode == "mean":
            return torch.zeros(*shape)
        return torch.randn(*shape, generator=self.generator)

    def reset(self):
        self.latent = self.model.initial(1)
        self.prev_action = torch.zeros(1, self.model.action_dim)

    @torch.no_grad()
    def act(self, obs) -> np.ndarray:
        pix = torch.as_tensor(obs.pixels, dtype=torch.float32)[None]
        self.latent = self.model.posterior_step(self.latent, self.prev_action, pix, self._noise(1, self.model.stoch_dim))
        a = self.policy.act(self.latent.features, self._noise(1, self.model.action_dim), mode=self.mode)
        if self.expl_noise > 0 and self.generator is not None:
            a = torch.clamp(a + self.expl_noise * torch.randn(a.shape, generator=self.generator), -1.0, 1.0)
        self.prev_action = a
        return a[0].numpy()


class RandomAgent:
    def __init__(self, action_dim: int, rng: np.random.Generator):
        self.action_dim, self.rng = action_dim, rng

    def reset(self):
        pass

    def act(self, obs):
        return self.rng.uniform(-1.0, 1.0, self.action_dim).astype(np.float32)


class ExpertAgent:
    """Privileged scripted expert; reads the environment's internal state."""

    def __init__(self, env: PixelEnv):
        self.env = env

    def reset(self):
        pass

    def act(self, obs):
        return self.env.expert_act()


def run_episode(env: PixelEnv, agent, seed: int) -> Trajectory:
    obs = env.reset(seed)
    agent.reset()
    pixels, actions = [obs.pixels], []
    while not env.done:
        a = np.asarray(agent.act(obs), dtype=np.float32).reshape(env.action_dim)
        obs, _ = env.step(a)
        pixels.append(obs.pixels)
        actions.append(a)
    return Trajectory(pixels=np.stack(pixels), actions=np.array(actions, np.float32).reshape(-1, env.action_dim),
                      env_id=env.env_id, eval_returns=float(env.episode_return))


def evaluate_policy(env: PixelEnv, agent, episodes: int, seed: int) -> tuple[float, float]:
    """Mean and std of ground-truth return; rewards are never shown to learners."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    with env.evaluating():
        returns = [run_episode(env, agent, derive_seed(seed, f"eval/{i}")).eval_returns for i in range(episodes)]
    return float(np.mean(returns)), float(np.std(returns))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, modules: dict[str, nn.Module], step: int) -> Path:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    header = {"step": step, "modules": {}}
    for name, module in modules.items():
        arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
        header["modules"][name] = save_arrays(arrays, directory, prefix=f"{name}.")
    (directory / "header.json").write_text(json.dumps(header, indent=1, sort_keys=True))
    return directory


def load_checkpoint(path, modules: dict[str, nn.Module]) -> int:
    directory = Path(path)
    header = json.loads((directory / "header.json").read_text())
    for name, module in modules.items():
        arrays = load_arrays(header["modules"][name], directory)
        module.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
    return int(header["step"])


# ---------------------------------------------------------------------------
# V-MAIL


@dataclass
class Task:
    env: PixelEnv
    demos: ReplayBuffer
    actor_critic: ActorCritic
    disc: adversary.Discriminator
    disc_opt: torch.optim.Optimizer
    name: str = ""


@dataclass
class VMAILState:
    config: RunConfig
    model: RSSM
    model_opt: torch.optim.Optimizer
    buffer: ReplayBuffer
    tasks: list[Task]
    env_steps: int = 0
    iterations: int = 0
    staleness: list[int] = field(default_factory=list)


def build_model(config: RunConfig, action_dim: int) -> RSSM:
    seed_torch(config.seed, "model")
    return RSSM(action_dim, config.deter_dim, config.stoch_dim, config.hidden_dim, min_std=config.min_std)


def build_task(config: RunConfig, model: RSSM, env: PixelEnv | None, demos: Sequence[Trajectory], name: str,
               action_dim: int | None = None) -> Task:
    action_dim = action_dim if action_dim is not None else env.action_dim
    seed_torch(config.seed, f"policy/{name}")
    ac = ActorCritic(model.feature_dim, action_dim, config.hidden_dim, config.actor_lr, config.critic_lr,
                     config.gamma, config.expansion, config.entropy_coef, config.target_value, config.grad_clip,
                     config.logit_clip)
    seed_torch(config.seed, f"disc/{name}")
    disc = adversary.Discriminator(model.feature_dim, action_dim, config.hidden_dim)
    opt = torch.optim.Adam(disc.parameters(), lr=config.disc_lr)
    return Task(env, ReplayBuffer(max(len(demos), 1), demos), ac, disc, opt, name)


class Trainer:
    """Shared model, one (policy, value, discriminator) per task."""

    def __init__(self, state: VMAILState):
        self.s = state
        cfg = state.config
        self.sampler = make_rng(cfg.seed, "sampler")
        self.model_gen = torch_generator(cfg.seed, "model")
        self.policy_gen = torch_generator(cfg.seed, "policy")
        self.disc_gen = torch_generator(cfg.seed, "disc")
        self.act_gen = torch_generator(cfg.seed, "act")

    @property
    def cfg(self) -> RunConfig:
        return self.s.config

    def _randn(self, gen, *shape):
        return torch.randn(*shape, generator=gen)

    # -- phases -----------------------------------------------------------
    def model_update(self) -> tuple[dict, LatentState]:
        cfg, m = self.cfg, self.s.model
        joint = [t for task in self.s.tasks for t in task.demos] + list(self.s.buffer)
        slices = sample_subsequences(joint, cfg.batch_size, cfg.seq_len, self.sampler)
        slices = _equal_length(slices)
        pix, act = stack_batch(slices)
        noise = self._randn(self.model_gen, pix.shape[0], pix.shape[1], m.stoch_dim)
        out = elbo_loss(m, pix, act, noise, free_nats=cfg.free_nats)
        self.s.model_opt.zero_grad()
        out.loss.backward()
        nn.utils.clip_grad_norm_(m.parameters(), cfg.grad_clip)
        self.s.model_opt.step()
        return out.terms(), out.posteriors.detach()

    @torch.no_grad()
    def expert_latents(self, task: Task):
        cfg, m = self.cfg, self.s.model
        slices = _equal_length(sample_subsequences(task.demos, cfg.batch_size, cfg.seq_len, self.sampler))
        pix, act = stack_batch(slices)
        noise = self._randn(self.model_gen, pix.shape[0], pix.shape[1], m.stoch_dim)
        posts, _ = filter_sequence(m, pix, act, noise)
        feats = posts.features[:-1].reshape(-1, m.feature_dim)
        return feats, act.reshape(-1, act.shape[-1])

    def adversarial_update(self, task: Task, starts: LatentState) -> dict:
        cfg, m, ac = self.cfg, self.s.model, task.actor_critic
        # discriminator on re-filtered expert latents vs a fresh imagined rollout
        e_feat, e_act = self.expert_latents(task)
        flat = starts.map(lambda x: x.reshape(-1, x.shape[-1]))
        B = flat.z.shape[0]
        version = ac.version
        a_noise = self._randn(self.policy_gen, cfg.horizon, B, ac.policy.action_dim)
        z_noise = self._randn(self.policy_gen, cfg.horizon, B, m.stoch_dim)
        states, actions = ac.imagine(m, flat, cfg.horizon, a_noise, z_noise)
        p_feat = states.features[:-1].reshape(-1, m.feature_dim)
        p_act = actions.reshape(-1, actions.shape[-1])
        self.s.staleness.append(ac.version - version)
        std = cfg.disc_input_noise
        ne = self._randn(self.disc_gen, *e_feat.shape) if std > 0 else None
        npi = self._randn(self.disc_gen, *p_feat.shape) if std > 0 else None
        d_loss = adversary.discriminator_loss(task.disc, adversary.add_input_noise(e_feat, std, ne), e_act,
                                              adversary.add_input_noise(p_feat.detach(), std, npi), p_act)
        task.disc_opt.zero_grad()
        d_loss.backward()
        nn.utils.clip_grad_norm_(task.disc.parameters(), cfg.grad_clip)
        task.disc_opt.step()
        with torch.no_grad():
            d_e = task.disc(e_feat, e_act).mean()
            d_p = task.disc(p_feat.detach(), p_act.detach()).mean()
        # actor and critic on the same rollout, rewards from the updated discriminator
        stats = ac.policy_update(task.disc, states, actions)
        targets = stats.pop("_targets")
        stats.update(ac.value_update(states, targets))
        stats.update({"disc_loss": d_loss.item(), "disc_expert": float(d_e), "disc_policy": float(d_p)})
        return stats

    def train_iteration(self, task_index: int | None = None) -> dict:
        terms, posts = self.model_update()
        tasks = self.s.tasks if task_index is None else [self.s.tasks[task_index]]
        for task in tasks:
            stats = self.adversarial_update(task, posts)
            terms.update(stats if len(self.s.tasks) == 1 else {f"{k}/{task.name}": v for k, v in stats.items()})
        self.s.iterations += 1
        return terms

    def collect(self, task: Task, random: bool = False) -> Trajectory:
        env = task.env
        seed = derive_seed(self.cfg.seed, f"collect/{self.s.env_steps}/{task.name}")
        if random:
            agent = RandomAgent(env.action_dim, np.random.default_rng(seed))
        else:
            agent = LatentAgent(self.s.model, task.actor_critic.policy, mode="sample", generator=self.act_gen,
                                expl_noise=self.cfg.expl_noise)
        before = env.interaction_steps
        traj = run_episode(env, agent, seed)
        traj.eval_returns = None  # never visible to the learner
        self.s.buffer.add(traj)
        self.s.env_steps += env.interaction_steps - before
        return traj

    def evaluate(self, task: Task, episodes: int | None = None) -> tuple[float, float]:
        agent = LatentAgent(self.s.model, task.actor_critic.policy, mode="mean")
        return evaluate_policy(task.env, agent, episodes or self.cfg.eval_episodes,
                               derive_seed(self.cfg.seed, "evaluation"))


def _equal_length(slices: list[Trajectory]) -> list[Trajectory]:
    n = min(len(s) for s in slices)
    return [s.window(0, n) for s in slices]


def _log_eval(report: RunReport, trainer: Trainer, step: int) -> None:
    for task in trainer.s.tasks:
        mean, std = trainer.evaluate(task)
        suffix = "" if len(trainer.s.tasks) == 1 else f"/{task.name}"
        report.log(step, "eval_return" + suffix, mean)
        report.log(step, "eval_return_std" + suffix, std)
        log.info("step %d eval_return%s %.2f", step, suffix, mean)


def vmail_train_tasks(config: RunConfig, tasks: Sequence[tuple[PixelEnv, Sequence[Trajectory]]],
                      out_dir=None) -> RunReport:
    """V-MAIL training with a shared model and replay buffer across one or more tasks.

    Per collected episode: ``train_iters`` iterations of (model update on
    B_E u B_pi, discriminator update, policy/value update). With several tasks
    episodes are collected round-robin and every task's adversarial phase runs
    each iteration.
    """
    if not tasks or any(len(d) == 0 for _, d in tasks):
        raise ValueError("each task needs at least one demonstration")
    action_dim = tasks[0][0].action_dim
    model = build_model(config, action_dim)
    state = VMAILState(
        config=config,
        model=model,
        model_opt=torch.optim.Adam(model.parameters(), lr=config.model_lr),
        buffer=ReplayBuffer(config.buffer_capacity),
        tasks=[build_task(config, model, env, demos, env.env_id) for env, demos in tasks],
    )
    trainer = Trainer(state)
    report = RunReport(config, {"envs": [env.env_id for env, _ in tasks]})
    _log_eval(report, trainer, 0)
    next_eval = config.eval_every
    next_ckpt = config.checkpoint_every or None
    episode_len = tasks[0][0].episode_length - 1
    k = 0

    def budget_left():
        return state.env_steps + episode_len <= config.total_env_steps

    for _ in range(config.warmup_episodes):
        if not budget_left():
            break
        trainer.collect(state.tasks[k % len(state.tasks)], random=True)
        k += 1
    while budget_left() and config.total_env_steps > 0:
        trainer.collect(state.tasks[k % len(state.tasks)])
        k += 1
        sums = defaultdict(float)
        for it in range(config.train_iters):
            try:
                terms = trainer.train_iteration()
            except NonFiniteError as exc:
                exc.step = state.env_steps
                raise
            for name, v in terms.items():
                sums[name] += v
        for name in sorted(sums):
            report.log(state.env_steps, name, sums[name] / max(config.train_iters, 1))
        if state.env_steps >= next_eval:
            _log_eval(report, trainer, state.env_steps)
            while next_eval <= state.env_steps:
                next_eval += config.eval_every
        if out_dir is not None and next_ckpt is not None and state.env_steps >= next_ckpt:
            report.checkpoints.append(str(write_checkpoint(out_dir, state)))
            next_ckpt += config.checkpoint_every
    evals = report.series("eval_return" if len(state.tasks) == 1 else f"eval_return/{state.tasks[0].name}")
    if state.env_steps > 0 and evals[-1][0] != state.env_steps:
        _log_eval(report, trainer, state.env_steps)
    report.info["env_steps"] = state.env_steps
    report.info["iterations"] = state.iterations
    report.info["max_disc_staleness"] = max(state.staleness, default=0)
    report.state = state
    if out_dir is not None:
        report.checkpoints.append(str(write_checkpoint(out_dir, state)))
    return report.finish()


def vmail_train(config: RunConfig, demos: Sequence[Trajectory], env: PixelEnv, out_dir=None) -> RunReport:
    return vmail_train_tasks(config, [(env, demos)], out_dir)


def task_modules(state: VMAILState) -> dict[str, nn.Module]:
    mods: dict[str, nn.Module] = {"model": state.model}
    for i, task in enumerate(state.tasks):
        mods[f"policy{i}"] = task.actor_critic.policy
        mods[f"value{i}"] = task.actor_critic.value
        mods[f"disc{i}"] = task.disc
    return mods


def write_checkpoint(out_dir, state: VMAILState) -> Path:
    path = Path(out_dir) / "checkpoints" / f"step_{state.env_steps}"
    save_checkpoint(path, task_modules(state), state.env_steps)
    (path / "tasks.json").write_text(json.dumps([t.name for t in state.tasks]))
    return path


# ---------------------------------------------------------------------------
# zero-shot transfer


@dataclass
class SourceModel:
    model: RSSM
    buffer: ReplayBuffer
    policies: dict[str, Policy] = field(default_factory=dict)


def load_source_run(run_dir) -> SourceModel:
    run_dir = Path(run_dir)
    if not (run_dir / "config.json").exists():
        raise FileNotFoundError(f"no source run at {run_dir}")
    config = RunConfig.load(run_dir / "config.json")
    ckpts = sorted((run_dir / "checkpoints").glob("step_*"), key=lambda p: int(p.name.split("_")[1]))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints in {run_dir}")
    names = json.loads((ckpts[-1] / "tasks.json").read_text())
    env0 = make_env(names[0])
    model = build_model(config, env0.action_dim)
    policies = {}
    mods = {"model": model}
    for i, name in enumerate(names):
        policies[name] = Policy(model.feature_dim, env0.action_dim, config.hidden_dim)
        mods[f"policy{i}"] = policies[name]
    load_checkpoint(ckpts[-1], mods)
    buf_dir = run_dir / "buffer"
    if not buf_dir.exists():
        raise FileNotFoundError(f"no replay buffer archive in {run_dir}")
    buffer = ReplayBuffer(config.buffer_capacity, load_trajectories(buf_dir))
    return SourceModel(model, buffer, policies)


def vmail_transfer(source: SourceModel, target_demos: Sequence[Trajectory], config: RunConfig,
                   eval_env: PixelEnv, out_dir=None, eval_points: int = 5) -> RunReport:
    """Zero-shot transfer: fine-tune the shared model on B_E u B_pi and learn a fresh
    discriminator and policy purely from model rollouts. No environment steps
    are taken except for reporting evaluations."""
    if source is None or source.model is None or source.buffer is None:
        raise ValueError("transfer requires a source model and replay buffer")
    if not target_demos:
        raise ValueError("transfer requires target demonstrations")
    model = source.model
    state = VMAILState(
        config=config,
        model=model,
        model_opt=torch.optim.Adam(model.parameters(), lr=config.model_lr),
        buffer=source.buffer,
        tasks=[build_task(config, model, eval_env, target_demos, "target", action_dim=model.action_dim)],
    )
    trainer = Trainer(state)
    report = RunReport(config, {"mode": "transfer", "target": eval_env.env_id})
    interaction_before = eval_env.interaction_steps
    _log_eval(report, trainer, 0)
    every = max(config.transfer_iters // max(eval_points, 1), 1)
    sums = defaultdict(float)
    for it in range(1, config.transfer_iters + 1):
        for name, v in trainer.train_iteration().items():
            sums[name] += v
        if it % every == 0 or it == config.transfer_iters:
            n = every if it % every == 0 else it % every
            for name in sorted(sums):
                report.log(it, name, sums[name] / n)
            sums.clear()
            _log_eval(report, trainer, it)
    report.info["env_interaction_steps"] = eval_env.interaction_steps - interaction_before
    report.info["iterations"] = state.iterations
    report.info["max_disc_staleness"] = max(state.staleness, default=0)
    report.state = state
    if out_dir is not None:
        report.checkpoints.append(str(write_checkpoint(out_dir, state)))
    return report.finish()


def source_policy_return(source: SourceModel, eval_env: PixelEnv, config: RunConfig) -> dict[str, float]:
    """Evaluate each source-task policy directly on the target task."""
    out = {}
    for name, policy in source.policies.items():
        agent = LatentAgent(source.model, policy, mode="mean")
        out[name] = evaluate_policy(eval_env, agent, config.eval_episodes, derive_seed(config.seed, "evaluation"))[0]
    return out


# ---------------------------------------------------------------------------
# behavior cloning


class BCNet(nn.Module):
    """Frame-window encoder feeding the same tanh-Gaussian head as the latent policy."""

    def __init__(self, action_dim: int, window: int = 3, hidden_dim: int = 128, feature_dim: int = 80):
        super().__init__()
        self.window = window
        self.encoder = ConvEncoder(window)
        self.proj = nn.Sequential(nn.Linear(self.encoder.embed_dim, feature_dim), nn.ELU())
        self.policy = Policy(feature_dim, action_dim, hidden_dim)

    def features(self, frames):
        return self.proj(self.encoder(frames))

    def forward(self, frames):
        return self.policy.dist_params(self.features(frames))


def frame_windows(traj: Trajectory, window: int) -> np.ndarray:
    """(T, window, H, W) stacks of the latest frames, padded by repeating the first."""
    pix = traj.pixels[:, 0]
    idx = np.arange(len(pix))[:, None] - np.arange(window - 1, -1, -1)[None]
    return pix[np.clip(idx, 0, None)]


class BCAgent:
    def __init__(self, net: BCNet):
        self.net = net

    def reset(self):
        self.frames = deque(maxlen=self.net.window)

    @torch.no_grad()
    def act(self, obs):
        frame = obs.pixels[0]
        if not self.frames:
            self.frames.extend([frame] * self.net.window)
        else:
            self.frames.append(frame)
        x = torch.as_tensor(np.stack(self.frames), dtype=torch.float32)[None]
        mean, _ = self.net(x)
        return torch.tanh(mean)[0].numpy()


ACTION_EPS = 1e-3


def bc_dataset(demos: Sequence[Trajectory], window: int) -> tuple[torch.Tensor, torch.Tensor]:
    xs = [frame_windows(d, window)[:-1] for d in demos]
    ys = [d.actions for d in demos]
    return torch.as_tensor(np.concatenate(xs)), torch.as_tensor(np.concatenate(ys))


def bc_train(demos: Sequence[Trajectory], config: RunConfig, eval_env: PixelEnv | None = None,
             eval_points: int = 5, batch_size: int = 64) -> RunReport:
    """Maximum likelihood of expert actions given observation windows; no environment interaction."""
    if not demos:
        raise ValueError("behavior cloning requires demonstrations")
    X, Y = bc_dataset(demos, config.bc_window)
    seed_torch(config.seed, "bc")
    net = BCNet(Y.shape[1], config.bc_window, config.hidden_dim)
    opt = torch.optim.Adam(net.parameters(), lr=config.bc_lr)
    rng = make_rng(config.seed, "sampler")
    # tanh is a fixed bijection, so likelihood of a is likelihood of atanh(a) up to a constant
    target = torch.atanh(torch.clamp(Y, -1 + ACTION_EPS, 1 - ACTION_EPS))
    report = RunReport(config, {"mode": "bc", "pairs": len(X)})
    agent = BCAgent(net)
    every = max(config.bc_steps // max(eval_points, 1), 1)
    running = 0.0
    for step in range(1, config.bc_steps + 1):
        idx = torch.as_tensor(rng.integers(len(X), size=min(batch_size, len(X))))
        mean, std = net(X[idx])
        per_dim = 0.5 * ((target[idx] - mean) / std) ** 2 + torch.log(std)
        # beta-weighted NLL: stops a learned std from absorbing the error on rare inputs
        nll = (std.detach() ** (2 * config.bc_nll_beta) * per_dim).sum(-1).mean()
        if not torch.isfinite(nll):
            raise NonFiniteError("bc_loss", step)
        opt.zero_grad()
        nll.backward()
        opt.step()
        running += nll.item()
        if step % every == 0 or step == config.bc_steps:
            report.log(step, "bc_loss", running / (every if step % every == 0 else step % every))
            running = 0.0
            if eval_env is not None:
                mean_ret, std_ret = evaluate_policy(eval_env, agent, config.eval_episodes,
                                                    derive_seed(config.seed, "evaluation"))
                report.log(step, "eval_return", mean_ret)
                report.log(step, "eval_return_std", std_ret)
    if config.bc_steps == 0 and eval_env is not None:
        report.log(0, "eval_return", evaluate_policy(eval_env, agent, config.eval_episodes,
                                                     derive_seed(config.seed, "evaluation"))[0])
    report.state = net
    return report.finish()


# ---------------------------------------------------------------------------
# run directories


def write_run_dir(out_dir, report: RunReport, demos_manifest: dict | None = None,
                  buffer: ReplayBuffer | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.config.save(out / "config.json")
    write_metrics_csv(report.metrics, out / "metrics.csv")
    if demos_manifest is not None:
        (out / "demos_manifest.json").write_text(json.dumps(demos_manifest, indent=1, sort_keys=True))
    if buffer is not None:
        save_trajectories(buffer.trajectories, out / "buffer")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return out


def reference_expert_return(env_id: str) -> float:
    return expert_return(env_id)
