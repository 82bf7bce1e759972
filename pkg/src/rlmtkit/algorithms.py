"""Policy-optimisation objectives: on-policy DPO, PPO with GAE, GRPO.

Losses are returned together with their exact parameter gradients, built by
pushing d(loss)/d(logits) through :func:`rlmtkit.policy.backward`.

KL(pi_theta || pi_ref) is the exact per-position divergence between the two
next-token distributions, averaged over completion positions and then over
rollouts. It enters every loss as an additive ``+ kl_coefficient * KL`` term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from rlmtkit.errors import InvalidInputError
from rlmtkit.policy import PolicyParams, ReferenceParams, Trace, backward, trace

DEFAULT_SAMPLES_PER_PROMPT = 8


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise InvalidInputError("DPO beta must be positive")


@dataclass(frozen=True)
class ClipKlConfig:
    epsilon: float = 0.2
    kl_coefficient: float = 0.001

    def __post_init__(self) -> None:
        if not 0 < self.epsilon < 1:
            raise InvalidInputError("epsilon must be in (0, 1)")
        if self.kl_coefficient < 0:
            raise InvalidInputError("kl_coefficient must be >= 0")


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_kl: ClipKlConfig = field(default_factory=ClipKlConfig)

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise InvalidInputError("GRPO group size must be >= 2")


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 1.0
    gae_lambda: float = 1.0
    clip_kl: ClipKlConfig = field(default_factory=ClipKlConfig)

    def __post_init__(self) -> None:
        if not (0 <= self.gamma <= 1 and 0 <= self.gae_lambda <= 1):
            raise InvalidInputError("gamma and gae_lambda must lie in [0, 1]")


@dataclass(frozen=True)
class PreferencePair:
    prompt: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.chosen == self.rejected:
            raise InvalidInputError("chosen and rejected completions must differ")


@dataclass(frozen=True)
class AdvantageBatch:
    values: np.ndarray
    estimator: str  # "grpo" or "gae"


# ---------------------------------------------------------------------------
# scalar pieces


def _log_sigmoid(x: float) -> float:
    return -float(np.logaddexp(0.0, -x))


def _sigmoid(x: float) -> float:
    return 0.5 * (1.0 + math.tanh(0.5 * x))


def dpo_loss(
    lp_theta_plus: float,
    lp_theta_minus: float,
    lp_ref_plus: float,
    lp_ref_minus: float,
    cfg: DpoConfig = DpoConfig(),
) -> tuple[float, tuple[float, float]]:
    """Loss and its derivatives w.r.t. (lp_theta_plus, lp_theta_minus)."""
    margin = (lp_theta_plus - lp_theta_minus) - (lp_ref_plus - lp_ref_minus)
    z = cfg.beta * margin
    loss = -_log_sigmoid(z)
    g = -cfg.beta * _sigmoid(-z)
    return loss, (g, -g)


def group_advantages(rewards: Sequence[float]) -> AdvantageBatch:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise InvalidInputError("a group needs at least 2 rewards")
    # Subtract the exact mean via math.fsum to keep |sum(A)| at rounding level.
    mean = math.fsum(r) / r.size
    return AdvantageBatch(r - mean, "grpo")


def gae_advantages(
    per_token_rewards: Sequence[float], per_token_values: Sequence[float], cfg: PpoConfig = PpoConfig()
) -> AdvantageBatch:
    """GAE with V = 0 after the final token."""
    r = np.asarray(per_token_rewards, dtype=np.float64)
    v = np.asarray(per_token_values, dtype=np.float64)
    if r.shape != v.shape or r.ndim != 1:
        raise InvalidInputError("rewards and values must be aligned 1-D sequences")
    n = r.size
    nxt = np.append(v[1:], 0.0)
    delta = r + cfg.gamma * nxt - v
    adv = np.zeros(n)
    acc = 0.0
    decay = cfg.gamma * cfg.gae_lambda
    for t in range(n - 1, -1, -1):
        acc = delta[t] + decay * acc
        adv[t] = acc
    return AdvantageBatch(adv, "gae")


def discounted_returns(per_token_rewards: Sequence[float], gamma: float) -> np.ndarray:
    r = np.asarray(per_token_rewards, dtype=np.float64)
    out = np.zeros(r.size)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def _surrogate_terms(ratios: np.ndarray, advantages: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit objective and its derivative w.r.t. the ratio."""
    clipped = np.clip(ratios, 1.0 - epsilon, 1.0 + epsilon)
    raw = ratios * advantages
    cl = clipped * advantages
    use_raw = raw <= cl
    obj = np.where(use_raw, raw, cl)
    # The clipped branch is flat in the ratio.
    dratio = np.where(use_raw, advantages, 0.0)
    return obj, dratio


def clipped_surrogate(ratios: Sequence[float], advantages: Sequence[float], epsilon: float) -> float:
    rho = np.asarray(ratios, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    if rho.shape != a.shape:
        raise InvalidInputError("ratios and advantages must be aligned")
    if (rho <= 0).any():
        raise InvalidInputError("ratios must be positive")
    obj, _ = _surrogate_terms(rho, a, epsilon)
    return float(obj.mean())


def kl_penalty(dist_theta: Sequence[float], dist_ref: Sequence[float]) -> float:
    p = np.asarray(dist_theta, dtype=np.float64)
    q = np.asarray(dist_ref, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError("distributions must have the same support")
    support = p > 0
    if (q[support] <= 0).any():
        raise InvalidInputError("reference assigns zero mass where policy does not")
    kl = float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))
    return max(kl, 0.0)


# ---------------------------------------------------------------------------
# sequence-level helpers


def _kl_rows(tr: Trace, ref_logp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-position KL and its gradient w.r.t. the policy logits."""
    p = tr.probs
    diff = tr.logp - ref_logp
    kl = np.sum(p * diff, axis=1)
    return kl, p * (diff - kl[:, None])


def _logprob_dlogits(tr: Trace, weights: np.ndarray) -> np.ndarray:
    """d/dlogits of sum_t weights[t] * log p(target_t)."""
    d = -tr.probs * weights[:, None]
    d[np.arange(len(tr.targets)), tr.targets] += weights
    return d


def sequence_kl(params: PolicyParams, ref: ReferenceParams | PolicyParams, prompt, completion) -> float:
    """Mean per-position KL(pi_theta || pi_ref) along one completion."""
    tr = trace(params, prompt, completion)
    return float(_kl_rows(tr, trace(ref, prompt, completion).logp)[0].mean())


def dpo_objective(
    pairs: Sequence[PreferencePair],
    params: PolicyParams,
    ref: ReferenceParams | PolicyParams,
    cfg: DpoConfig = DpoConfig(),
) -> tuple[float, PolicyParams]:
    """Mean DPO loss over ``pairs`` and its parameter gradient."""
    if not pairs:
        raise InvalidInputError("no preference pairs")
    grad = params.zeros_like()
    total = 0.0
    for pair in pairs:
        tp = trace(params, pair.prompt, pair.chosen)
        tm = trace(params, pair.prompt, pair.rejected)
        rp = trace(ref, pair.prompt, pair.chosen).token_logp.sum()
        rm = trace(ref, pair.prompt, pair.rejected).token_logp.sum()
        loss, (gp, gm) = dpo_loss(tp.token_logp.sum(), tm.token_logp.sum(), rp, rm, cfg)
        total += loss
        n = len(pairs)
        backward(params, tp, dlogits=_logprob_dlogits(tp, np.full(len(tp.targets), gp / n)), grad=grad)
        backward(params, tm, dlogits=_logprob_dlogits(tm, np.full(len(tm.targets), gm / n)), grad=grad)
    return total / len(pairs), grad


def dpo_margin(pair: PreferencePair, params: PolicyParams, ref, cfg: DpoConfig = DpoConfig()) -> float:
    """beta * [(lp+ - lp-) - (lpref+ - lpref-)] for one pair."""
    def lp(model, completion) -> float:
        return float(trace(model, pair.prompt, completion).token_logp.sum())

    theta = lp(params, pair.chosen) - lp(params, pair.rejected)
    anchor = lp(ref, pair.chosen) - lp(ref, pair.rejected)
    return cfg.beta * (theta - anchor)


@dataclass
class Rollout:
    """One sampled completion with everything the objectives need.

    ``old_logp`` and ``old_values`` are per-token, recorded from the sampling
    policy; ``ref_logp`` is the (n, V) reference log-distribution.
    """

    prompt: tuple[int, ...]
    completion: tuple[int, ...]
    reward: float
    old_logp: np.ndarray | None = None
    old_values: np.ndarray | None = None
    ref_logp: np.ndarray | None = None

    def __post_init__(self) -> None:
        if len(self.completion) == 0:
            raise InvalidInputError("rollout completion must be non-empty")


def make_rollout(
    params: PolicyParams,
    ref: ReferenceParams | PolicyParams | None,
    prompt: Sequence[int],
    completion: Sequence[int],
    reward: float,
) -> Rollout:
    """Record old log-probs/values under ``params`` and reference log-dists."""
    tr = trace(params, prompt, completion)
    ref_logp = trace(ref, prompt, completion).logp if ref is not None else None
    return Rollout(tuple(prompt), tuple(completion), float(reward), tr.token_logp.copy(), tr.values.copy(), ref_logp)


@dataclass
class ObjectiveResult:
    loss: float
    grad: PolicyParams
    surrogate: float
    kl: float


def grpo_objective(
    groups: Sequence[Sequence[Rollout]], cfg: GrpoConfig, params: PolicyParams
) -> ObjectiveResult:
    """Clipped GRPO loss over sequence-level ratios with group-mean baselines."""
    if not groups:
        raise InvalidInputError("no rollout groups")
    eps = cfg.clip_kl.epsilon
    lam = cfg.clip_kl.kl_coefficient
    grad = params.zeros_like()
    n_groups = len(groups)
    surrogate = 0.0
    kl_total = 0.0
    for group in groups:
        if len(group) != cfg.group_size:
            raise InvalidInputError(f"group has {len(group)} rollouts, expected {cfg.group_size}")
        adv = group_advantages([r.reward for r in group]).values
        for ro, a in zip(group, adv):
            if ro.old_logp is None:
                raise InvalidInputError("rollout is missing old log-probs")
            tr = trace(params, ro.prompt, ro.completion)
            ratio = math.exp(float(tr.token_logp.sum() - ro.old_logp.sum()))
            obj, dratio = _surrogate_terms(np.array([ratio]), np.array([a]), eps)
            w = 1.0 / (n_groups * cfg.group_size)
            surrogate += w * obj[0]
            # loss = -surrogate; d ratio / d lp_total = ratio
            dlp = -w * dratio[0] * ratio
            dlogits = _logprob_dlogits(tr, np.full(len(tr.targets), dlp))
            if lam > 0 and ro.ref_logp is None:
                raise InvalidInputError("rollout is missing reference log-probs")
            if ro.ref_logp is not None:
                kl, dkl = _kl_rows(tr, ro.ref_logp)
                kl_total += w * kl.mean()
                if lam > 0:
                    dlogits += (lam * w / len(kl)) * dkl
            if dlogits.any():
                backward(params, tr, dlogits=dlogits, grad=grad)
    return ObjectiveResult(-surrogate + lam * kl_total, grad, surrogate, kl_total)


@dataclass
class PpoResult:
    actor_loss: float
    actor_grad: PolicyParams
    critic_loss: float
    critic_grad: PolicyParams
    surrogate: float
    kl: float


def terminal_rewards(n: int, reward: float) -> np.ndarray:
    r = np.zeros(n)
    r[-1] = reward
    return r


def ppo_objective(rollouts: Sequence[Rollout], cfg: PpoConfig, params: PolicyParams) -> PpoResult:
    """Token-level clipped PPO actor loss plus squared-error critic loss.

    Rewards are terminal-only; advantages come from GAE over the recorded
    ``old_values``. The critic regresses current values onto discounted
    returns. Both means are over all completion tokens in the batch.
    """
    if not rollouts:
        raise InvalidInputError("no rollouts")
    eps = cfg.clip_kl.epsilon
    lam = cfg.clip_kl.kl_coefficient
    actor = params.zeros_like()
    critic = params.zeros_like()
    n_tokens = sum(len(r.completion) for r in rollouts)
    n_roll = len(rollouts)
    surrogate = 0.0
    critic_loss = 0.0
    kl_total = 0.0
    for ro in rollouts:
        n = len(ro.completion)
        if ro.old_logp is None or ro.old_values is None:
            raise InvalidInputError("rollout is missing old log-probs or values")
        if len(ro.old_logp) != n or len(ro.old_values) != n:
            raise InvalidInputError("per-token arrays are not aligned with the completion")
        tr = trace(params, ro.prompt, ro.completion)
        rewards = terminal_rewards(n, ro.reward)
        adv = gae_advantages(rewards, ro.old_values, cfg).values
        ratios = np.exp(tr.token_logp - ro.old_logp)
        obj, dratio = _surrogate_terms(ratios, adv, eps)
        surrogate += obj.sum() / n_tokens
        dlogits = _logprob_dlogits(tr, -dratio * ratios / n_tokens)
        if lam > 0 and ro.ref_logp is None:
            raise InvalidInputError("rollout is missing reference log-probs")
        if ro.ref_logp is not None:
            kl, dkl = _kl_rows(tr, ro.ref_logp)
            kl_total += kl.mean() / n_roll
            if lam > 0:
                dlogits += (lam / (n_roll * n)) * dkl
        backward(params, tr, dlogits=dlogits, grad=actor)

        returns = discounted_returns(rewards, cfg.gamma)
        err = tr.values - returns
        critic_loss += float(err @ err) / n_tokens
        backward(params, tr, dvalues=2.0 * err / n_tokens, grad=critic)
    return PpoResult(-surrogate + lam * kl_total, actor, critic_loss, critic, surrogate, kl_total)


def build_preference_pairs(
    scored_rollouts: Sequence[tuple[Sequence[int], Sequence[int], float]],
    rule: str = "best-worst",
) -> list[PreferencePair]:
    """Group ``(prompt, completion, reward)`` triples by prompt; one pair per prompt.

    Prompts whose best and worst rewards tie produce no pair. Among equal
    rewards the earliest rollout wins, so the result is deterministic.
    """
    if rule != "best-worst":
        raise InvalidInputError(f"unknown pair rule {rule!r}")
    by_prompt: dict[tuple[int, ...], list[tuple[tuple[int, ...], float]]] = {}
    for prompt, completion, reward in scored_rollouts:
        by_prompt.setdefault(tuple(prompt), []).append((tuple(completion), float(reward)))
    pairs = []
    for prompt, items in by_prompt.items():
        if len(items) < 2:
            raise InvalidInputError("need at least 2 rollouts per prompt")
        rewards = [r for _, r in items]
        hi = int(np.argmax(rewards))
        lo = int(np.argmin(rewards))
        if rewards[hi] == rewards[lo] or items[hi][0] == items[lo][0]:
            continue
        pairs.append(PreferencePair(prompt, items[hi][0], items[lo][0]))
    return pairs
