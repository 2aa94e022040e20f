"""Exact occupancy-measure computations on small POMDPs and numerical checks of
the divergence and sub-optimality bounds that justify latent-space imitation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import derive_seed
from .envs.tabular import HistoryPolicy, TabularPOMDP, random_state_policy, random_tabular_pomdp

SLACK = 1e-9
LN2 = math.log(2.0)
DIVERGENCES = ("KL", "JS", "TV")


class EnumerationBudgetError(RuntimeError):
    pass


class ImpossibleHistoryError(ValueError):
    pass


class SupportMismatchError(ValueError):
    pass


@dataclass
class OccupancyMeasure:
    """Discounted visitation distribution; ``support`` is 'sa', 'xa' or 'ha'."""

    probs: np.ndarray
    support: str = "sa"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-10:
            raise ValueError("occupancy must be nonnegative and sum to 1")


def _as_probs(p) -> tuple[np.ndarray, str | None]:
    if isinstance(p, OccupancyMeasure):
        return p.probs.ravel(), p.support
    return np.asarray(p, dtype=np.float64).ravel(), None


# ---------------------------------------------------------------------------
# MDP occupancies


def state_transition_matrix(pomdp: TabularPOMDP, policy: np.ndarray) -> np.ndarray:
    return np.einsum("sa,sat->st", policy, pomdp.T)


def discounted_occupancy_mdp(pomdp: TabularPOMDP, policy: np.ndarray, gamma: float | None = None) -> OccupancyMeasure:
    """Solve ``d = (1-g) mu0 + g P_pi^T d`` and return ``rho(s, a) = d(s) pi(a|s)``."""
    g = pomdp.gamma if gamma is None else gamma
    P = state_transition_matrix(pomdp, policy)
    d = np.linalg.solve(np.eye(pomdp.S) - g * P.T, (1.0 - g) * pomdp.mu0)
    d = np.clip(d, 0.0, None)
    rho = d[:, None] * policy
    return OccupancyMeasure(rho / rho.sum(), "sa")


def occupancy_power_iteration(pomdp: TabularPOMDP, policy: np.ndarray, steps: int) -> np.ndarray:
    """Truncated series ``(1-g) sum_{t<steps} g^t P(s_t=s) pi(a|s)``, unnormalized."""
    g = pomdp.gamma
    P = state_transition_matrix(pomdp, policy)
    p, d = pomdp.mu0.copy(), np.zeros(pomdp.S)
    for t in range(steps):
        d += (1.0 - g) * g ** t * p
        p = p @ P
    return d[:, None] * policy


def policy_value(pomdp: TabularPOMDP, policy: np.ndarray, gamma: float | None = None) -> float:
    """J such that ``(1 - g) J = E_rho[r]``."""
    g = pomdp.gamma if gamma is None else gamma
    rho = discounted_occupancy_mdp(pomdp, policy, g).probs
    return float((rho * pomdp.R).sum() / (1.0 - g))


# ---------------------------------------------------------------------------
# POMDP trajectory law


@dataclass
class TruncatedTrajectoryLaw:
    """Exact law of histories up to ``horizon`` for a history-conditioned policy.

    For each time t, ``joint[t][h, s]`` is P(h_t = h, s_t = s), histories in the
    canonical order of :class:`HistoryPolicy`; ``actions[t][h]`` is pi(.|h).
    Time t carries discount weight ``(1-g) g^t / (1 - g^horizon)``.
    """

    horizon: int
    gamma: float
    X: int
    A: int
    joint: list[np.ndarray] = field(repr=False)
    actions: list[np.ndarray] = field(repr=False)

    @property
    def normalizer(self) -> float:
        return 1.0 - self.gamma ** self.horizon

    def weight(self, t: int) -> float:
        return (1.0 - self.gamma) * self.gamma ** t / self.normalizer

    def total_mass(self) -> float:
        return float(sum(self.weight(t) * self.joint[t].sum() for t in range(self.horizon)))

    def rho_sa(self) -> np.ndarray:
        return sum(self.weight(t) * np.einsum("hs,ha->sa", j, pa)
                   for t, (j, pa) in enumerate(zip(self.joint, self.actions)))

    def rho_xa(self) -> np.ndarray:
        out = np.zeros((self.X, self.A))
        for t, (j, pa) in enumerate(zip(self.joint, self.actions)):
            ha = j.sum(1)[:, None] * pa
            out += self.weight(t) * ha.reshape(-1, self.X, self.A).sum(0)
        return out

    def rho_ha(self) -> np.ndarray:
        """Flattened over (t, h, a); every history is a distinct latent value."""
        return np.concatenate([(self.weight(t) * j.sum(1)[:, None] * pa).ravel()
                               for t, (j, pa) in enumerate(zip(self.joint, self.actions))])

    def history_probs(self, t: int) -> np.ndarray:
        return self.joint[t].sum(1)


def history_index(observations, actions, X: int, A: int) -> int:
    idx = observations[0]
    for a, x in zip(actions, observations[1:]):
        idx = (idx * A + a) * X + x
    return int(idx)


def trajectory_law(pomdp: TabularPOMDP, policy: HistoryPolicy, T_trunc: int,
                   budget: int = 1_000_000) -> TruncatedTrajectoryLaw:
    """Enumerate every history of length < ``T_trunc`` with its exact probability."""
    X, A, S = pomdp.X, pomdp.A, pomdp.S
    n_hist = sum(X * (X * A) ** t for t in range(T_trunc))
    if n_hist > budget:
        raise EnumerationBudgetError(f"{n_hist} histories exceed the budget of {budget}")
    if policy.horizon < T_trunc:
        raise ValueError("policy tables shorter than the truncation horizon")
    # t = 0: joint[x0, s0] = mu0(s0) U(x0|s0)
    joint = [(pomdp.mu0[:, None] * pomdp.U).T.copy()]
    acts = [policy.probs(0)]
    TU = np.einsum("sat,tx->saxt", pomdp.T, pomdp.U)
    for t in range(1, T_trunc):
        prev, pa = joint[-1], acts[-1]
        nxt = np.einsum("hs,ha,saxt->haxt", prev, pa, TU)
        joint.append(nxt.reshape(-1, S))
        acts.append(policy.probs(t))
    return TruncatedTrajectoryLaw(T_trunc, pomdp.gamma, X, A, joint, acts)


def belief_filter(pomdp: TabularPOMDP, observations, actions=()) -> np.ndarray:
    """Exact filtering distribution P(s_t | x_0..x_t, a_0..a_{t-1})."""
    observations, actions = list(observations), list(actions)
    if not observations:
        return pomdp.mu0.copy()
    if len(actions) != len(observations) - 1:
        raise ValueError("need exactly one action between consecutive observations")
    b = pomdp.mu0 * pomdp.U[:, observations[0]]
    for a, x in [(None, None)] + list(zip(actions, observations[1:])):
        if a is not None:
            b = pomdp.U[:, x] * (b @ pomdp.T[:, a, :])
        z = b.sum()
        if z <= 0.0:
            raise ImpossibleHistoryError("history has zero probability under the model")
        b = b / z
    return b


# ---------------------------------------------------------------------------
# divergences


def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> float:
    """sum p log(p/q) with 0 log(0/q) = 0 and +inf where p > 0 = q."""
    mask = p > 0
    if np.any(q[mask] <= 0):
        return math.inf
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def f_divergence(p, q, kind: str) -> float:
    pa, ps = _as_probs(p)
    qa, qs = _as_probs(q)
    if pa.shape != qa.shape or (ps is not None and qs is not None and ps != qs):
        raise SupportMismatchError(f"supports differ: {ps}{pa.shape} vs {qs}{qa.shape}")
    if kind == "KL":
        return max(_xlogy_ratio(pa, qa), 0.0)
    if kind == "TV":
        return 0.5 * float(np.abs(pa - qa).sum())
    if kind == "JS":
        m = 0.5 * (pa + qa)
        js = 0.5 * _xlogy_ratio(pa, m) + 0.5 * _xlogy_ratio(qa, m)
        return float(min(max(js, 0.0), LN2))
    raise ValueError(f"unknown divergence {kind!r}; expected one of {DIVERGENCES}")


def optimal_discriminator(rho_E, rho_pi) -> tuple[np.ndarray, float]:
    """Pointwise optimum ``rho_E / (rho_E + rho_pi)`` (0/0 -> 1/2) and the
    objective ``E_E[-log D] + E_pi[-log(1 - D)]`` evaluated there."""
    e, es = _as_probs(rho_E)
    p, ps = _as_probs(rho_pi)
    if e.shape != p.shape or (es is not None and ps is not None and es != ps):
        raise SupportMismatchError("expert and policy occupancies have different supports")
    tot = e + p
    d = np.where(tot > 0, e / np.where(tot > 0, tot, 1.0), 0.5)
    me, mp = e > 0, p > 0
    # log D and log(1 - D) written as log-ratios so tiny masses do not round to log 0
    value = -np.sum(e[me] * (np.log(e[me]) - np.log(tot[me]))) - np.sum(p[mp] * (np.log(p[mp]) - np.log(tot[mp])))
    shape = rho_E.probs.shape if isinstance(rho_E, OccupancyMeasure) else np.shape(rho_E)
    return d.reshape(shape), float(value)


# ---------------------------------------------------------------------------
# bound checks


@dataclass
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool

    @property
    def slack(self) -> float:
        return self.lhs - self.rhs


def check_suboptimality_bound(pomdp: TabularPOMDP, expert: np.ndarray, policy: np.ndarray,
                              gamma: float | None = None) -> BoundCheck:
    """|J^E - J^pi| <= R_max / (1-g) * TV(rho^pi, rho^E)."""
    g = pomdp.gamma if gamma is None else gamma
    lhs = abs(policy_value(pomdp, expert, g) - policy_value(pomdp, policy, g))
    tv = f_divergence(discounted_occupancy_mdp(pomdp, policy, g), discounted_occupancy_mdp(pomdp, expert, g), "TV")
    rhs = pomdp.r_max / (1.0 - g) * tv
    return BoundCheck(lhs, rhs, lhs <= rhs + SLACK)


def perturbed_model(pomdp: TabularPOMDP, alpha: float, rng: np.random.Generator) -> TabularPOMDP:
    """``(1 - alpha) T + alpha Q`` for random stochastic Q; TV to T is at most alpha per row."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    Q = rng.dirichlet(np.ones(pomdp.S), size=(pomdp.S, pomdp.A))
    T_hat = (1.0 - alpha) * pomdp.T + alpha * Q
    return pomdp.with_transitions(T_hat / T_hat.sum(-1, keepdims=True))


def check_lemma1(pomdp: TabularPOMDP, expert: np.ndarray, policy: np.ndarray, alpha: float,
                 seed: int) -> BoundCheck:
    """|J(E, M) - J(pi, M)| <= R_max/(1-g) TV(rho^pi_{M_hat}, rho^E_M) + alpha R_max/(1-g)^2."""
    model = perturbed_model(pomdp, alpha, np.random.default_rng(seed))
    g, rmax = pomdp.gamma, pomdp.r_max
    lhs = abs(policy_value(pomdp, expert) - policy_value(pomdp, policy))
    tv = f_divergence(discounted_occupancy_mdp(model, policy), discounted_occupancy_mdp(pomdp, expert), "TV")
    rhs = rmax / (1.0 - g) * tv + alpha * rmax / (1.0 - g) ** 2
    return BoundCheck(lhs, rhs, lhs <= rhs + SLACK)


@dataclass
class Theorem1Check:
    d_xa: float
    d_sa: float
    d_za: float

    @property
    def obs_le_state(self) -> bool:
        return self.d_xa <= self.d_sa + SLACK

    @property
    def state_le_latent(self) -> bool:
        return self.d_sa <= self.d_za + SLACK

    @property
    def obs_le_latent(self) -> bool:
        return self.d_xa <= self.d_za + SLACK

    @property
    def holds(self) -> bool:
        return self.obs_le_state and self.state_le_latent

    @property
    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.d_xa, self.d_sa, self.d_za))

    @property
    def slack(self) -> float:
        vals = [v for v in (self.d_xa - self.d_sa, self.d_sa - self.d_za) if math.isfinite(v)]
        return max(vals) if vals else -math.inf


def check_theorem1(pomdp: TabularPOMDP, expert: HistoryPolicy, policy: HistoryPolicy, kind: str,
                   T_trunc: int, laws: tuple | None = None) -> Theorem1Check:
    """Divergences D(rho^pi || rho^E) on (x, a), (s, a) and (h, a) from one truncated law each."""
    law_pi, law_E = laws or (trajectory_law(pomdp, policy, T_trunc), trajectory_law(pomdp, expert, T_trunc))
    return Theorem1Check(
        d_xa=f_divergence(law_pi.rho_xa(), law_E.rho_xa(), kind),
        d_sa=f_divergence(law_pi.rho_sa(), law_E.rho_sa(), kind),
        d_za=f_divergence(law_pi.rho_ha(), law_E.rho_ha(), kind),
    )


# ---------------------------------------------------------------------------
# campaigns


@dataclass
class CampaignResult:
    suite: str
    trials: int
    checks: int = 0
    violations: int = 0
    skipped: int = 0
    max_slack: float = -math.inf
    violating_seeds: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def record(self, slack: float, ok: bool, seed: int) -> None:
        self.checks += 1
        if math.isfinite(slack):
            self.max_slack = max(self.max_slack, slack)
        if not ok:
            self.violations += 1
            if seed not in self.violating_seeds:
                self.violating_seeds.append(seed)

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "trials": self.trials,
            "checks": self.checks,
            "violations": self.violations,
            "skipped": self.skipped,
            "max_slack": self.max_slack if math.isfinite(self.max_slack) else None,
            "violating_seeds": self.violating_seeds,
            "details": self.details,
        }


def theorem1_campaign(trials: int = 100, seed: int = 0, pairs: int = 3, T_trunc: int = 6,
                      gamma: float = 0.9, max_sizes=(6, 4, 2)) -> CampaignResult:
    res = CampaignResult("theorem1", trials)
    sub = {"obs_le_state": 0, "state_le_latent": 0, "obs_le_latent": 0}
    for i in range(trials):
        s = derive_seed(seed, f"theorem1/{i}")
        rng = np.random.default_rng(s)
        S = int(rng.integers(2, max_sizes[0] + 1))
        X = int(rng.integers(2, max_sizes[1] + 1))
        A = max_sizes[2]
        pomdp = random_tabular_pomdp((S, A, X), int(rng.integers(2**31)), gamma)
        for _ in range(pairs):
            expert = HistoryPolicy.random(X, A, T_trunc, rng)
            policy = HistoryPolicy.random(X, A, T_trunc, rng)
            laws = (trajectory_law(pomdp, policy, T_trunc), trajectory_law(pomdp, expert, T_trunc))
            for kind in DIVERGENCES:
                chk = check_theorem1(pomdp, expert, policy, kind, T_trunc, laws=laws)
                if not chk.finite:
                    res.skipped += 1
                    continue
                for name in sub:
                    sub[name] += not getattr(chk, name)
                res.record(chk.slack, chk.holds, s)
    res.details = {"violations_by_inequality": sub}
    return res


def _random_mdp_instance(rng: np.random.Generator, gamma: float):
    S = int(rng.integers(1, 7))
    A = int(rng.integers(1, 4))
    pomdp = random_tabular_pomdp((S, A, 1), int(rng.integers(2**31)), gamma)
    return pomdp, random_state_policy(S, A, rng), random_state_policy(S, A, rng)


def lemma1_campaign(trials: int = 200, seed: int = 0, alphas=(0.0, 0.05, 0.1, 0.3),
                    gamma: float = 0.9) -> CampaignResult:
    res = CampaignResult("lemma1", trials)
    for i in range(trials):
        s = derive_seed(seed, f"lemma1/{i}")
        rng = np.random.default_rng(s)
        pomdp, expert, policy = _random_mdp_instance(rng, gamma)
        for alpha in alphas:
            chk = check_lemma1(pomdp, expert, policy, alpha, int(rng.integers(2**31)))
            res.record(chk.slack, chk.holds, s)
    return res


def suboptimality_campaign(trials: int = 200, seed: int = 0, gamma: float = 0.9) -> CampaignResult:
    res = CampaignResult("suboptimality", trials)
    for i in range(trials):
        s = derive_seed(seed, f"suboptimality/{i}")
        pomdp, expert, policy = _random_mdp_instance(np.random.default_rng(s), gamma)
        chk = check_suboptimality_bound(pomdp, expert, policy)
        res.record(chk.slack, chk.holds, s)
    return res


def random_occupancy_pair(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = int(rng.integers(2, 13))
    p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    if rng.random() < 0.3:  # exercise zero-mass cells
        p[rng.random(n) < 0.3] = 0.0
        q[rng.random(n) < 0.3] = 0.0
        p[0] += p.sum() == 0
        q[-1] += q.sum() == 0
    return p / p.sum(), q / q.sum()


def discriminator_campaign(trials: int = 100, seed: int = 0, tol: float = 1e-10) -> CampaignResult:
    res = CampaignResult("discriminator", trials)
    for i in range(trials):
        s = derive_seed(seed, f"discriminator/{i}")
        p, q = random_occupancy_pair(np.random.default_rng(s))
        _, value = optimal_discriminator(p, q)
        err = abs(value - (2 * LN2 - 2 * f_divergence(p, q, "JS")))
        res.record(err - tol, err <= tol, s)
    return res


CAMPAIGNS = {
    "theorem1": theorem1_campaign,
    "lemma1": lemma1_campaign,
    "suboptimality": suboptimality_campaign,
    "discriminator": discriminator_campaign,
}
