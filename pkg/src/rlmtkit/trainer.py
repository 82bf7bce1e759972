"""Training loops: SFT warm start, on-policy GRPO/PPO, on-policy DPO, evaluation.

All randomness is derived from ``(cfg.seed, step, index)`` keys, so a run is a
pure function of its config, dataset and seed.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, fields
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from rlmtkit.algorithms import (
    PreferencePair,
    Rollout,
    build_preference_pairs,
    dpo_objective,
    grpo_objective,
    make_rollout,
    ppo_objective,
    sequence_kl,
)
from rlmtkit.chatproto import (
    ParsedOutput,
    TemplateKind,
    parse_output,
    render_completion,
    render_prompt,
    segment_lengths,
    strip_thought,
)
from rlmtkit.config import Algorithm, TrainConfig
from rlmtkit.errors import DataError, InvalidInputError, NumericError
from rlmtkit.policy import (
    PolicyParams,
    ReferenceParams,
    backward,
    rollout_rng,
    sample_batch,
    snapshot_reference,
    trace,
)
from rlmtkit.rewards import RewardKind, RewardSource, Task, shaped_length_reward, RewardSignal
from rlmtkit.tasks import Demo

T = TypeVar("T")
R = TypeVar("R")

METRICS_HEADER = "step,mean_reward,mean_thought_tokens,mean_response_tokens,mean_kl,loss,well_formed_frac"

# Seed-key salts keep the sampling streams of different phases disjoint.
_EVAL_SALT = 0x0E7A1
_DPO_SALT = 0x0D90
_ORDER_SALT = 0x00DE


@dataclass
class MetricsRow:
    step: int
    mean_reward: float
    mean_thought_tokens: float
    mean_response_tokens: float
    mean_kl: float
    loss: float
    well_formed_frac: float


def format_metrics(rows: Iterable[MetricsRow]) -> str:
    out = [METRICS_HEADER]
    for r in rows:
        vals = astuple(r)
        out.append(",".join([str(vals[0])] + [repr(float(v)) for v in vals[1:]]))
    return "\n".join(out) + "\n"


def write_metrics(path: str, rows: Iterable[MetricsRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_metrics(rows))


def read_metrics(path: str) -> list[MetricsRow]:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise DataError(f"cannot read metrics: {e.strerror}", path) from None
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise DataError("metrics file is empty", path)
    if ",".join(header) != METRICS_HEADER:
        raise DataError("unexpected metrics header", path, 1)
    rows = []
    for lineno, rec in enumerate(reader, 2):
        if not rec:
            continue
        if len(rec) != len(fields(MetricsRow)):
            raise DataError(f"expected {len(fields(MetricsRow))} columns, got {len(rec)}", path, lineno)
        try:
            rows.append(MetricsRow(int(rec[0]), *(float(x) for x in rec[1:])))
        except ValueError:
            raise DataError("non-numeric metrics value", path, lineno) from None
    if not rows:
        raise DataError("metrics file has no rows", path)
    return rows


def _map(fn: Callable[[T], R], items: Sequence[T], threads: int) -> list[R]:
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _check_finite(params: PolicyParams, loss: float) -> None:
    if not math.isfinite(loss) or not params.is_finite():
        raise NumericError("non-finite loss or parameters")


def _mean(xs: Sequence[float]) -> float:
    return float(np.mean(xs)) if len(xs) else math.nan


# ---------------------------------------------------------------------------
# encoding


def encode_prompt(params: PolicyParams, kind: TemplateKind, query: str, cfg: TrainConfig) -> list[int]:
    ids = params.vocab.encode(render_prompt(kind, query))
    if len(ids) > cfg.max_prompt_tokens:
        raise InvalidInputError(f"prompt of {len(ids)} tokens exceeds max_prompt_tokens={cfg.max_prompt_tokens}")
    return ids


def encode_demo(params: PolicyParams, kind: TemplateKind, demo: Demo, cfg: TrainConfig) -> tuple[list[int], list[int]]:
    """Prompt ids and target completion ids (ending in EOS)."""
    prompt = encode_prompt(params, kind, demo.prompt, cfg)
    thought = demo.thought if kind.thinking else None
    completion = params.vocab.encode(render_completion(kind, thought, demo.response)) + [params.vocab.eos]
    if len(completion) > cfg.max_completion_tokens:
        raise InvalidInputError(
            f"demo completion of {len(completion)} tokens exceeds max_completion_tokens={cfg.max_completion_tokens}")
    return prompt, completion


# ---------------------------------------------------------------------------
# SFT


def sft_loss(params: PolicyParams, examples: Sequence[tuple[Sequence[int], Sequence[int]]]) -> tuple[float, PolicyParams]:
    """Token-mean cross-entropy over completion tokens; prompt positions carry no loss."""
    grad = params.zeros_like()
    n_tokens = sum(len(c) for _, c in examples)
    total = 0.0
    for prompt, completion in examples:
        tr = trace(params, prompt, completion)
        total -= float(tr.token_logp.sum())
        d = tr.probs
        d[np.arange(len(tr.targets)), tr.targets] -= 1.0
        backward(params, tr, dlogits=d / n_tokens, grad=grad)
    return total / n_tokens, grad


def sft_train(
    params: PolicyParams, demos: Sequence[Demo], cfg: TrainConfig, kind: TemplateKind | None = None
) -> tuple[PolicyParams, list[MetricsRow]]:
    """``cfg.epochs`` passes of minibatch gradient descent on demonstrations."""
    kind = kind or cfg.kind
    if not demos:
        raise InvalidInputError("no demonstrations")
    examples = [encode_demo(params, kind, d, cfg) for d in demos]
    lengths = []
    for d in demos:
        parsed = ParsedOutput(d.thought if kind.thinking else None, d.response, True)
        lengths.append(segment_lengths(parsed, params.vocab))
    params = params.copy()
    rows: list[MetricsRow] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rollout_rng(cfg.seed, _ORDER_SALT, epoch).permutation(len(examples))
        for i in range(0, len(order), cfg.sft_batch_size):
            idx = order[i:i + cfg.sft_batch_size]
            loss, grad = sft_loss(params, [examples[j] for j in idx])
            params.add_(grad, -cfg.sft_lr)
            _check_finite(params, loss)
            step += 1
            rows.append(MetricsRow(
                step, math.nan,
                _mean([lengths[j][0] for j in idx]), _mean([lengths[j][1] for j in idx]),
                math.nan, loss, 1.0,
            ))
    return params, rows


# ---------------------------------------------------------------------------
# rollouts and rewards


@dataclass
class Scored:
    task: Task
    prompt: list[int]
    completion: list[int]
    parsed: ParsedOutput
    thought_tokens: int
    response_tokens: int
    reward: float


def score_outputs(
    tasks: Sequence[Task],
    parsed: Sequence[ParsedOutput],
    thought_tokens: Sequence[int],
    reward_source: RewardSource,
    cfg: TrainConfig,
) -> list[float]:
    """Rewards for one batch of parsed outputs.

    Malformed outputs get the floor: 0 under a verifier, or (lowest
    well-formed score in the batch) - 1 under a reward model. The length
    bonus, when configured, applies to well-formed outputs only.
    """
    base: list[RewardSignal | None] = [
        reward_source.score(t, strip_thought(p)) if p.well_formed else None for t, p in zip(tasks, parsed)
    ]
    if reward_source.kind is RewardKind.VERIFIER:
        floor = 0.0
    else:
        good = [b.value for b in base if b is not None]
        floor = (min(good) if good else 0.0) - 1.0
    out = []
    for b, n_thought in zip(base, thought_tokens):
        if b is None:
            out.append(floor)
        elif cfg.length_bonus > 0:
            out.append(shaped_length_reward(b, n_thought, cfg.length_bonus, cfg.length_cap).value)
        else:
            out.append(b.value)
    return out


def sample_and_score(
    params: PolicyParams | ReferenceParams,
    tasks: Sequence[Task],
    prompts: Sequence[list[int]],
    seeds: Sequence[tuple[int, ...]],
    reward_source: RewardSource,
    kind: TemplateKind,
    cfg: TrainConfig,
) -> list[Scored]:
    vocab = params.vocab
    completions = sample_batch(params, prompts, seeds, cfg.temperature, cfg.max_completion_tokens)
    parsed = [parse_output(kind, vocab.decode(c)) for c in completions]
    lengths = [segment_lengths(p, vocab) for p in parsed]
    rewards = score_outputs(tasks, parsed, [n for n, _ in lengths], reward_source, cfg)
    return [
        Scored(t, list(pr), c, p, n_t, n_r, r)
        for t, pr, c, p, (n_t, n_r), r in zip(tasks, prompts, completions, parsed, lengths, rewards)
    ]


def _batch_indices(n_tasks: int, batch_size: int, step: int, seed: int) -> list[int]:
    """Prompt indices for ``step``: walk a fresh permutation per pass over the data."""
    out = []
    for k in range(step * batch_size, (step + 1) * batch_size):
        epoch, pos = divmod(k, n_tasks)
        out.append(int(rollout_rng(seed, _ORDER_SALT, epoch).permutation(n_tasks)[pos]))
    return out


# ---------------------------------------------------------------------------
# RL


def rl_train(
    params: PolicyParams,
    tasks: Sequence[Task],
    reward_source: RewardSource,
    cfg: TrainConfig,
    start_step: int = 0,
    on_step: Callable[[MetricsRow], None] | None = None,
) -> tuple[PolicyParams, list[MetricsRow]]:
    """On-policy GRPO or PPO; one gradient update per rollout wave.

    The reference policy is a snapshot of ``params`` taken once on entry.
    """
    if cfg.algorithm not in (Algorithm.GRPO, Algorithm.PPO):
        raise InvalidInputError(f"rl_train runs grpo or ppo, not {cfg.algorithm.value}")
    if not tasks:
        raise InvalidInputError("no prompts")
    reward_source.check_tasks(tasks)
    kind = cfg.kind
    encoded = [encode_prompt(params, kind, t.prompt, cfg) for t in tasks]
    ref = snapshot_reference(params)
    params = params.copy()
    k = cfg.samples_per_prompt
    rows: list[MetricsRow] = []

    for step in range(start_step, start_step + cfg.steps):
        idx = [i for i in _batch_indices(len(tasks), cfg.batch_size, step, cfg.seed) for _ in range(k)]
        seeds = [(cfg.seed, step, j) for j in range(len(idx))]
        scored = sample_and_score(
            params, [tasks[i] for i in idx], [encoded[i] for i in idx], seeds, reward_source, kind, cfg)
        rollouts = _map(
            lambda s: make_rollout(params, ref, s.prompt, s.completion, s.reward), scored, cfg.threads)

        if cfg.algorithm is Algorithm.GRPO:
            groups = [rollouts[g:g + k] for g in range(0, len(rollouts), k)]
            res = grpo_objective(groups, cfg.grpo_config(), params)
            loss, kl = res.loss, res.kl
            params.add_(res.grad, -cfg.actor_lr)
        else:
            ppo = ppo_objective(rollouts, cfg.ppo_config(), params)
            loss, kl = ppo.actor_loss, ppo.kl
            params.add_(ppo.actor_grad, -cfg.actor_lr)
            params.add_(ppo.critic_grad, -cfg.critic_lr)
        _check_finite(params, loss)

        row = MetricsRow(
            step + 1,
            _mean([s.reward for s in scored]),
            _mean([s.thought_tokens for s in scored]),
            _mean([s.response_tokens for s in scored]),
            kl,
            loss,
            _mean([1.0 if s.parsed.well_formed else 0.0 for s in scored]),
        )
        rows.append(row)
        if on_step is not None:
            on_step(row)
    return params, rows


def dpo_round(
    params: PolicyParams,
    ref: ReferenceParams | None,
    tasks: Sequence[Task],
    reward_source: RewardSource,
    cfg: TrainConfig,
) -> tuple[PolicyParams, list[MetricsRow], list[PreferencePair]]:
    """Sample once from the pre-DPO policy, build best-vs-worst pairs, run offline DPO epochs."""
    if not tasks:
        raise InvalidInputError("no prompts")
    reward_source.check_tasks(tasks)
    kind = cfg.kind
    if ref is None:
        ref = snapshot_reference(params)
    encoded = [encode_prompt(params, kind, t.prompt, cfg) for t in tasks]
    k = cfg.samples_per_prompt
    idx = [i for i in range(len(tasks)) for _ in range(k)]
    seeds = [(cfg.seed, _DPO_SALT, j) for j in range(len(idx))]
    scored = sample_and_score(
        params, [tasks[i] for i in idx], [encoded[i] for i in idx], seeds, reward_source, kind, cfg)
    # Same query text may repeat with different tasks; key pairs by task index.
    pairs: list[PreferencePair] = []
    for i in range(len(tasks)):
        group = scored[i * k:(i + 1) * k]
        pairs.extend(build_preference_pairs([(s.prompt, s.completion, s.reward) for s in group]))
    if not pairs:
        raise InvalidInputError("no valid preference pairs: every prompt's samples tied")

    sample_reward = _mean([s.reward for s in scored])
    sample_wf = _mean([1.0 if s.parsed.well_formed else 0.0 for s in scored])
    params = params.copy()
    dcfg = cfg.dpo_config()
    rows: list[MetricsRow] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rollout_rng(cfg.seed, _DPO_SALT, _ORDER_SALT, epoch).permutation(len(pairs))
        for b in range(0, len(order), cfg.dpo_batch_size):
            batch = [pairs[j] for j in order[b:b + cfg.dpo_batch_size]]
            kl = _mean([sequence_kl(params, ref, p.prompt, p.chosen) for p in batch])
            loss, grad = dpo_objective(batch, params, ref, dcfg)
            params.add_(grad, -cfg.dpo_lr)
            _check_finite(params, loss)
            step += 1
            rows.append(MetricsRow(
                step, sample_reward,
                _mean([_thought_len(params, kind, p.chosen) for p in batch]),
                _mean([_response_len(params, kind, p.chosen) for p in batch]),
                kl, loss, sample_wf,
            ))
    return params, rows, pairs


def _segments(params: PolicyParams, kind: TemplateKind, completion: Sequence[int]) -> tuple[int, int]:
    return segment_lengths(parse_output(kind, params.vocab.decode(completion)), params.vocab)


def _thought_len(params: PolicyParams, kind: TemplateKind, completion: Sequence[int]) -> int:
    return _segments(params, kind, completion)[0]


def _response_len(params: PolicyParams, kind: TemplateKind, completion: Sequence[int]) -> int:
    return _segments(params, kind, completion)[1]


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalResult:
    mean_reward: float
    win_rate: float
    mean_thought_tokens: float
    mean_response_tokens: float
    well_formed_frac: float
    ref_mean_reward: float


def evaluate(
    params: PolicyParams | ReferenceParams,
    ref: PolicyParams | ReferenceParams,
    tasks: Sequence[Task],
    reward_source: RewardSource,
    n_samples: int,
    seed: int,
    cfg: TrainConfig,
) -> EvalResult:
    """Sample ``n_samples`` per prompt from both policies with shared seeds and compare.

    Sample ``j`` of prompt ``i`` uses the same random stream for both
    policies, so a policy evaluated against itself ties everywhere. Ties
    count as half a win.
    """
    if not tasks:
        raise InvalidInputError("no prompts")
    reward_source.check_tasks(tasks)
    kind = cfg.kind
    if params.vocab != ref.vocab:
        raise InvalidInputError("policy and reference use different vocabularies")
    p0 = params.params if isinstance(params, ReferenceParams) else params
    encoded = [encode_prompt(p0, kind, t.prompt, cfg) for t in tasks]
    idx = [i for i in range(len(tasks)) for _ in range(n_samples)]
    seeds = [(seed, _EVAL_SALT, i, j) for i in range(len(tasks)) for j in range(n_samples)]
    vocab = params.vocab

    def run(model):
        comps = sample_batch(model, [encoded[i] for i in idx], seeds, cfg.temperature, cfg.max_completion_tokens)
        parsed = [parse_output(kind, vocab.decode(c)) for c in comps]
        return parsed, [segment_lengths(p, vocab) for p in parsed]

    mine, mine_len = run(params)
    theirs, theirs_len = run(ref)
    # Score both sides as one batch so the malformed floor is shared.
    rewards = score_outputs(
        [tasks[i] for i in idx] * 2, mine + theirs,
        [n for n, _ in mine_len] + [n for n, _ in theirs_len], reward_source, cfg)
    a, b = rewards[:len(idx)], rewards[len(idx):]
    wins = [1.0 if x > y else 0.5 if x == y else 0.0 for x, y in zip(a, b)]
    return EvalResult(
        _mean(a), _mean(wins),
        _mean([n for n, _ in mine_len]), _mean([n for _, n in mine_len]),
        _mean([1.0 if p.well_formed else 0.0 for p in mine]), _mean(b),
    )
