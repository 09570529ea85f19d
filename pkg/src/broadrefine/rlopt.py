"""Group-relative policy optimization of the rewrite policy.

Rollouts are rewrite sets sampled from the factorized keep/drop policy and
scored by running them through the engine and the oracle verifier. Three
objectives are provided, all maximized by gradient ascent with closed-form
gradients:

``grpo``
    Token-level clipped importance ratios with group-standardized advantages
    and an exact Bernoulli KL penalty toward the reference policy.
``gspo``
    One clipped ratio per sequence: the exponentiated mean token log-ratio.
``reinforcepp``
    No group baseline; the KL penalty is folded into per-token returns and
    advantages are standardized across the whole rollout batch.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import Catalog, derive_seed
from .engine import DEFAULT_LIMIT, SearchEngine, SearchRequest
from .expander import (DEFAULT_N_REWRITES, DEFAULT_TEMPERATURE, PolicyParams, RewriteSet,
                       TokenRecord, expand_identity, log_sigmoid, policy_sample, sigmoid)
from .querylang import ParsedQuery
from .rewards import REWARD_MODES, RewardReport, outcomes_from, reward_report
from .serving import CandidatePool
from .verifier import NEUTRAL_USER, UserContext, VerifierConfig, verify

logger = logging.getLogger(__name__)

__all__ = [
    "ALGORITHMS",
    "OptimizerConfig",
    "Rollout",
    "Group",
    "RewardEnv",
    "TrainingDiverged",
    "rollout_group",
    "compute_advantages",
    "equivalence_filter",
    "difficulty_filter",
    "grpo_objective",
    "gspo_objective",
    "reinforcepp_objective",
    "objective",
    "bernoulli_kl",
    "train",
    "TrainResult",
    "evaluate_policy",
    "evaluate_expander",
]

ALGORITHMS = ("grpo", "gspo", "reinforcepp")
DEGENERATE_STD = 1e-8


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "gspo"
    reward_mode: str = "effective"
    group_size: int = 8
    clip_eps: float = 0.2
    kl_coef: float = 0.01
    adv_clip: float = 2.0
    difficulty: tuple[float, float] = (0.1, 0.9)
    gamma: int | None = None
    learning_rate: float = 1e-2
    steps: int = 200
    batch_size: int = 64
    inner_epochs: int = 1
    seed: int = 0
    temperature: float = DEFAULT_TEMPERATURE
    n_slots: int = DEFAULT_N_REWRITES
    limit: int = DEFAULT_LIMIT
    save_every: int = 0

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be >= 0")
        lo, hi = self.difficulty
        if not (0.0 <= lo < hi <= 1.0):
            raise ValueError("difficulty interval must satisfy 0 <= lo < hi <= 1")
        object.__setattr__(self, "difficulty", (float(lo), float(hi)))
        if self.steps < 0 or self.batch_size < 1 or self.inner_epochs < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and inner_epochs >= 1 required")

    @property
    def equivalence_cap(self) -> int:
        return self.gamma if self.gamma is not None else self.group_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["difficulty"] = list(self.difficulty)
        return d


@dataclass
class Rollout:
    record: TokenRecord
    rewrites: RewriteSet
    reward: float
    report: RewardReport | None = None

    @property
    def n_tokens(self) -> int:
        return self.record.n_tokens


@dataclass
class Group:
    query: ParsedQuery
    rollouts: list[Rollout]
    advantages: np.ndarray | None = None
    degenerate: bool = False

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts], dtype=np.float64)

    @property
    def decisions(self) -> np.ndarray:
        """Stacked decisions, shape (G, slots, |A|)."""
        return np.stack([r.record.decisions for r in self.rollouts]).astype(np.float64)


class RewardEnv:
    """Scores rewrite sets by broadening through the engine and refining with the verifier.

    Verifier labels are memoized per (query, item); engine results are
    memoized inside the engine.
    """

    def __init__(self, catalog: Catalog, engine: SearchEngine | None = None,
                 user: UserContext = NEUTRAL_USER, verifier: VerifierConfig | None = None,
                 limit: int = DEFAULT_LIMIT) -> None:
        self.catalog = catalog
        self.engine = engine if engine is not None else SearchEngine(catalog)
        self.user = user
        self.verifier = verifier or VerifierConfig()
        self.limit = limit
        self._labels: dict[tuple[ParsedQuery, int], bool] = {}

    def _relevant(self, q: ParsedQuery, item_id: int) -> bool:
        key = (q, item_id)
        hit = self._labels.get(key)
        if hit is None:
            hit = verify(q, self.catalog[item_id], self.user, self.verifier).relevant
            self._labels[key] = hit
        return hit

    def report(self, q: ParsedQuery, rewrites: RewriteSet) -> RewardReport:
        returned = [self.engine.search(SearchRequest(r, self.limit, 0)).item_ids
                    for r in rewrites.rewrites]
        pool = CandidatePool()
        for i, ids in enumerate(returned):
            pool.add(ids, i)
        relevant = {x for x in pool.dedup if self._relevant(q, x)}
        pool.refined = [x for x in pool.dedup if x in relevant]
        return reward_report(outcomes_from(returned, relevant), pool)

    def reward(self, q: ParsedQuery, rewrites: RewriteSet, mode: str) -> float:
        return self.report(q, rewrites).value(mode)


def rollout_group(q: ParsedQuery, params: PolicyParams, cfg: OptimizerConfig, seed: int,
                  env: RewardEnv) -> Group:
    rollouts = []
    for i in range(cfg.group_size):
        rs, rec = policy_sample(params, q, derive_seed(seed, i))
        rep = env.report(q, rs)
        rollouts.append(Rollout(rec, rs, rep.value(cfg.reward_mode), rep))
    return Group(q, rollouts)


def compute_advantages(group: Group, clip_bound: float = 2.0) -> Group:
    """Standardize rewards within the group (population std), then clip."""
    r = group.rewards
    std = r.std()
    if std < DEGENERATE_STD:
        group.degenerate = True
        group.advantages = np.zeros_like(r)
        return group
    group.degenerate = False
    group.advantages = np.clip((r - r.mean()) / std, -clip_bound, clip_bound)
    return group


def equivalence_filter(groups: Sequence[Group], gamma: int) -> list[Group]:
    """Drop groups in which one rewrite set is produced by ``gamma`` or more rollouts.

    Two rewrite sets count as the same output when their rewrites are
    equivalent slot by slot.
    """
    kept = []
    for g in groups:
        counts: dict[tuple[str, ...], int] = {}
        for ro in g.rollouts:
            key = tuple(ro.rewrites.strings())
            counts[key] = counts.get(key, 0) + 1
        if max(counts.values()) < gamma:
            kept.append(g)
    return kept


def difficulty_filter(groups: Sequence[Group], interval: tuple[float, float] = (0.1, 0.9)) -> list[Group]:
    lo, hi = interval
    kept = [g for g in groups if lo < float(g.rewards.mean()) < hi]
    if groups and not kept:
        logger.info("difficulty filter removed all %d groups", len(groups))
    return kept


def bernoulli_kl(z: np.ndarray, z_ref: np.ndarray) -> np.ndarray:
    """KL(Bern(sigmoid(z)) || Bern(sigmoid(z_ref))), elementwise."""
    p = sigmoid(z)
    return (p * (log_sigmoid(z) - log_sigmoid(z_ref))
            + (1.0 - p) * (log_sigmoid(-z) - log_sigmoid(-z_ref)))


def _token_logp(z: np.ndarray, o: np.ndarray) -> np.ndarray:
    # z: (slots, m); o: (G, slots, m)
    return np.where(o == 1.0, log_sigmoid(z)[None], log_sigmoid(-z)[None])


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(arr)))[0].tolist()
        raise FloatingPointError(f"non-finite value in {name} at index {bad}")


def _kl_term(theta: np.ndarray, theta_ref: np.ndarray, m: int, temp: float) -> tuple[float, np.ndarray]:
    """Mean per-decision KL over the query's real columns and its gradient."""
    n = theta.shape[0]
    grad = np.zeros_like(theta)
    if m == 0:
        return 0.0, grad
    z, zr = theta[:, :m] / temp, theta_ref[:, :m] / temp
    p = sigmoid(z)
    kl = float(bernoulli_kl(z, zr).mean())
    grad[:, :m] = p * (1.0 - p) * (z - zr) / (temp * n * m)
    return kl, grad


def _clipped_min(ratio: np.ndarray, adv: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise min(ratio*A, clip(ratio)*A) and the mask where it has nonzero slope."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    return np.minimum(unclipped, clipped), unclipped <= clipped


def _prepare(groups: Sequence[Group]) -> list[Group]:
    out = [g for g in groups if not g.degenerate and g.rollouts and g.rollouts[0].n_tokens > 0]
    for g in out:
        if g.advantages is None:
            raise ValueError("compute_advantages must run before the objective")
    return out


def grpo_objective(theta: np.ndarray, theta_old: np.ndarray, theta_ref: np.ndarray,
                   groups: Sequence[Group], cfg: OptimizerConfig) -> tuple[float, np.ndarray]:
    """Token-level clipped surrogate minus the KL penalty, averaged over groups."""
    groups = _prepare(groups)
    grad = np.zeros_like(theta)
    if not groups:
        return 0.0, grad
    T = cfg.temperature
    total = 0.0
    for g in groups:
        o = g.decisions
        G, n, m = o.shape
        z, z_old = theta[:, :m] / T, theta_old[:, :m] / T
        ratio = np.exp(_token_logp(z, o) - _token_logp(z_old, o))
        adv = g.advantages[:, None, None]
        term, active = _clipped_min(ratio, adv, cfg.clip_eps)
        _check_finite("grpo surrogate", term)
        surrogate = term.sum() / (G * n * m)
        # d logp / dz = o - p
        dz = (active * adv * ratio * (o - sigmoid(z)[None])).sum(axis=0) / (G * n * m)
        kl, kl_grad = _kl_term(theta, theta_ref, m, T)
        total += surrogate - cfg.kl_coef * kl
        grad[:, :m] += dz / T
        grad -= cfg.kl_coef * kl_grad
    return total / len(groups), grad / len(groups)


def gspo_objective(theta: np.ndarray, theta_old: np.ndarray, theta_ref: np.ndarray,
                   groups: Sequence[Group], cfg: OptimizerConfig) -> tuple[float, np.ndarray]:
    """Sequence-level clipped surrogate minus the KL penalty, averaged over groups."""
    groups = _prepare(groups)
    grad = np.zeros_like(theta)
    if not groups:
        return 0.0, grad
    T = cfg.temperature
    total = 0.0
    for g in groups:
        o = g.decisions
        G, n, m = o.shape
        z, z_old = theta[:, :m] / T, theta_old[:, :m] / T
        mean_log_ratio = (_token_logp(z, o) - _token_logp(z_old, o)).sum(axis=(1, 2)) / (n * m)
        s = np.exp(mean_log_ratio)
        adv = g.advantages
        term, active = _clipped_min(s, adv, cfg.clip_eps)
        _check_finite("gspo surrogate", term)
        weight = active * adv * s / (G * n * m)
        dz = (weight[:, None, None] * (o - sigmoid(z)[None])).sum(axis=0)
        kl, kl_grad = _kl_term(theta, theta_ref, m, T)
        total += term.mean() - cfg.kl_coef * kl
        grad[:, :m] += dz / T
        grad -= cfg.kl_coef * kl_grad
    return total / len(groups), grad / len(groups)


def reinforcepp_advantages(groups: Sequence[Group], theta_old: np.ndarray, theta_ref: np.ndarray,
                           cfg: OptimizerConfig) -> list[np.ndarray] | None:
    """Per-token advantages standardized over the whole batch.

    Each token's return is the sequence reward minus ``kl_coef`` times the
    summed log-ratio (old vs reference) of that token and all later tokens.
    Returns None when rewards are constant across the batch.
    """
    groups = [g for g in groups if g.rollouts and g.rollouts[0].n_tokens > 0]
    if not groups:
        return None
    rewards = np.concatenate([g.rewards for g in groups])
    if rewards.std() < DEGENERATE_STD:
        return None
    T = cfg.temperature
    raw = []
    for g in groups:
        o = g.decisions
        G, n, m = o.shape
        kl = (_token_logp(theta_old[:, :m] / T, o) - _token_logp(theta_ref[:, :m] / T, o)).reshape(G, n * m)
        to_go = np.cumsum(kl[:, ::-1], axis=1)[:, ::-1]
        raw.append(g.rewards[:, None] - cfg.kl_coef * to_go)
    flat = np.concatenate([a.ravel() for a in raw])
    std = flat.std()
    if std < DEGENERATE_STD:
        return None
    mu = flat.mean()
    return [np.clip((a - mu) / std, -cfg.adv_clip, cfg.adv_clip) for a in raw]


def reinforcepp_objective(theta: np.ndarray, theta_old: np.ndarray, theta_ref: np.ndarray,
                          groups: Sequence[Group], cfg: OptimizerConfig) -> tuple[float, np.ndarray]:
    """Token-level clipped surrogate with batch-standardized, KL-shaped advantages.

    The surrogate is averaged over all rollouts in the batch; there is no
    separate KL term.
    """
    grad = np.zeros_like(theta)
    groups = [g for g in groups if g.rollouts and g.rollouts[0].n_tokens > 0]
    advs = reinforcepp_advantages(groups, theta_old, theta_ref, cfg)
    if advs is None:
        return 0.0, grad
    T = cfg.temperature
    total, count = 0.0, 0
    for g, a in zip(groups, advs):
        o = g.decisions
        G, n, m = o.shape
        z, z_old = theta[:, :m] / T, theta_old[:, :m] / T
        ratio = np.exp(_token_logp(z, o) - _token_logp(z_old, o))
        adv = a.reshape(G, n, m)
        term, active = _clipped_min(ratio, adv, cfg.clip_eps)
        _check_finite("reinforce++ surrogate", term)
        total += term.sum() / (n * m)
        grad[:, :m] += (active * adv * ratio * (o - sigmoid(z)[None])).sum(axis=0) / (n * m * T)
        count += G
    return total / count, grad / count


_OBJECTIVES = {"grpo": grpo_objective, "gspo": gspo_objective, "reinforcepp": reinforcepp_objective}


def objective(theta, theta_old, theta_ref, groups, cfg: OptimizerConfig):
    return _OBJECTIVES[cfg.algorithm](theta, theta_old, theta_ref, groups, cfg)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, last_good: PolicyParams) -> None:
        super().__init__(f"policy parameters became non-finite at step {step}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainResult:
    params: PolicyParams
    curve: list[tuple[int, float, int]] = field(default_factory=list)

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "mean_reward", "kept_groups"])
        for step, reward, kept in self.curve:
            w.writerow([step, f"{reward:.10f}", kept])
        return buf.getvalue()


class _Adam:
    def __init__(self, shape, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def ascent(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _filter_groups(groups: list[Group], cfg: OptimizerConfig) -> list[Group]:
    kept = equivalence_filter(groups, cfg.equivalence_cap)
    if cfg.algorithm != "reinforcepp":
        kept = [g for g in (compute_advantages(g, cfg.adv_clip) for g in kept) if not g.degenerate]
    return difficulty_filter(kept, cfg.difficulty)


def train(queries: Sequence[ParsedQuery], env: RewardEnv, cfg: OptimizerConfig,
          init: PolicyParams | None = None, checkpoint_dir: str | Path | None = None) -> TrainResult:
    """Optimize the policy; deterministic for a fixed ``cfg.seed``.

    Each step samples ``batch_size`` queries, rolls out ``group_size``
    rewrite sets per query, filters groups (slot-wise duplicate outputs,
    zero reward variance, mean reward outside the difficulty interval) and
    takes ``inner_epochs`` Adam ascent steps on the configured objective.
    The curve records the mean reward over all rollouts of the step.
    """
    if not queries:
        raise ValueError("training needs at least one query")
    m_max = max(len(q.constraints) for q in queries)
    params = init if init is not None else PolicyParams.zeros(cfg.n_slots, max(m_max, 1), cfg.temperature)
    if params.m_constraints < m_max:
        raise ValueError(f"policy covers {params.m_constraints} constraints, queries need {m_max}")
    theta = params.logits.copy()
    theta_ref = params.ref_logits.copy()
    adam = _Adam(theta.shape, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(params)
    last_good = params
    for step in range(cfg.steps):
        current = PolicyParams(theta, cfg.temperature, theta_ref)
        picks = rng.choice(len(queries), size=cfg.batch_size, replace=len(queries) < cfg.batch_size)
        groups = [rollout_group(queries[k], current, cfg, derive_seed(cfg.seed, step, b), env)
                  for b, k in enumerate(picks.tolist())]
        mean_reward = float(np.mean([r.reward for g in groups for r in g.rollouts]))
        kept = _filter_groups(groups, cfg)
        if not kept:
            logger.info("step %d: no groups survived filtering; update skipped", step)
        else:
            theta_old = theta.copy()
            for _ in range(cfg.inner_epochs):
                _, grad = objective(theta, theta_old, theta_ref, kept, cfg)
                theta = theta + adam.ascent(grad)
            if not np.all(np.isfinite(theta)):
                raise TrainingDiverged(step, last_good)
        last_good = PolicyParams(theta.copy(), cfg.temperature, theta_ref)
        result.curve.append((step, mean_reward, len(kept)))
        if checkpoint_dir is not None and cfg.save_every and (step + 1) % cfg.save_every == 0:
            last_good.save(Path(checkpoint_dir) / f"params_step{step + 1:05d}.json")
        logger.debug("step %d mean_reward=%.4f kept=%d", step, mean_reward, len(kept))
    result.params = PolicyParams(theta, cfg.temperature, theta_ref)
    return result


def evaluate_policy(params: PolicyParams, queries: Sequence[ParsedQuery], env: RewardEnv,
                    mode: str = "effective", samples: int = 8, seed: int = 0) -> float:
    """Mean reward of sampled rewrite sets over ``queries`` (``samples`` draws each)."""
    vals = [env.reward(q, policy_sample(params, q, derive_seed(seed, qi, s))[0], mode)
            for qi, q in enumerate(queries) for s in range(samples)]
    return float(np.mean(vals)) if vals else 0.0


def evaluate_expander(expander, queries: Sequence[ParsedQuery], env: RewardEnv,
                      mode: str = "effective") -> float:
    vals = [env.reward(q, expander(q), mode) for q in queries]
    return float(np.mean(vals)) if vals else 0.0


def identity_baseline(queries: Sequence[ParsedQuery], env: RewardEnv, mode: str = "effective") -> float:
    return evaluate_expander(expand_identity, queries, env, mode)
