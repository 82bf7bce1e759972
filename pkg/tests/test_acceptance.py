"""Acceptance criteria A1-A11.

Each test prints one ``A<n> PASS|FAIL: detail`` line (also collected into the
terminal summary). Toy runs share one SFT warm start, built once per module.
"""

from __future__ import annotations

import math
import os
import time
import zlib

import numpy as np
import pytest

from conftest import random_params, random_tokens
from gradcheck import CHECKS
from oracles import LN2, brute_gae, kl_hp
from rlmtkit.algorithms import (
    ClipKlConfig,
    DpoConfig,
    GrpoConfig,
    PpoConfig,
    PreferencePair,
    clipped_surrogate,
    dpo_objective,
    gae_advantages,
    group_advantages,
    grpo_objective,
    kl_penalty,
    make_rollout,
)
from rlmtkit.chatproto import TAGS, TemplateKind, parse_output, render_completion
from rlmtkit.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from rlmtkit.config import TrainConfig
from rlmtkit.policy import init_params, sample_sequence, snapshot_reference
from rlmtkit.rewards import ModelReward, VerifierReward, pairwise_accuracy, train_reward_model
from rlmtkit.tasks import DIGITS, sort_demos, sort_preferences, sort_tasks, task_vocab
from rlmtkit.trainer import dpo_round, evaluate, format_metrics, rl_train, sft_train
from rlmtkit.traitlab import StubJudge, ThoughtPair, analyze

RESULTS: list[str] = []


def report(capsys, criterion: str, ok: bool, detail: str) -> None:
    line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)


# -- shared toy setup --------------------------------------------------------

VOCAB = task_vocab([DIGITS])
TRAIN = sort_tasks(2000, 1)
TEST = sort_tasks(200, 2)
BASE = TrainConfig(dim=64, sft_lr=2.0, epochs=20, max_completion_tokens=24, batch_size=8, seed=0,
                   samples_per_prompt=8, temperature=0.7, kl_coefficient=0.001, epsilon=0.2)
A6_CFG = BASE.replace(actor_lr=0.3, steps=600)


def window_means(xs, width):
    return [float(np.mean(xs[i:i + width])) for i in range(0, len(xs), width)]


@pytest.fixture(scope="module")
def warm():
    params, _ = sft_train(init_params(VOCAB, 64, 0), sort_demos(TRAIN, 3), BASE)
    return params


@pytest.fixture(scope="module")
def a6_run(warm):
    t0 = time.perf_counter()
    params, rows = rl_train(warm, TRAIN, VerifierReward(), A6_CFG)
    return params, rows, time.perf_counter() - t0


@pytest.fixture(scope="module")
def reward_model():
    return train_reward_model(sort_preferences(sort_tasks(600, 11), 12), epochs=300, lr=1.0)


HELDOUT_PREFS = sort_preferences(sort_tasks(200, 13), 14)


# -- A1 ----------------------------------------------------------------------


def test_a1_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for name, check in CHECKS.items():
        rng = np.random.default_rng(zlib.crc32(b"A1" + name.encode()))
        worst[name] = max(check(rng) for _ in range(10))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed < 60
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(capsys, "A1", ok, f"max rel err over 10 instances each: {detail}; {elapsed:.1f}s")
    assert ok


# -- A2 ----------------------------------------------------------------------


def test_a2_grpo_centering(capsys):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 17))
        rewards = rng.normal(0, rng.uniform(0.1, 100), size=k) + rng.normal(0, 50)
        worst = max(worst, abs(math.fsum(group_advantages(rewards).values)))
    const_ok = True
    p = random_params(rng, n_symbols=5, dim=3)
    ref = snapshot_reference(p)
    for c in (0.0, 1.0, -3.5, 0.1):
        k = int(rng.integers(2, 17))
        const_ok &= not group_advantages([c] * k).values.any()
        prompt = random_tokens(rng, p.vocab, 1, 3)
        group = [make_rollout(p, ref, prompt, random_tokens(rng, p.vocab, 1, 5), c) for _ in range(k)]
        res = grpo_objective([group], GrpoConfig(k, ClipKlConfig(0.2, 0.0)), p)
        const_ok &= not res.grad.flatten().any()
    ok = worst <= 1e-12 and const_ok
    report(capsys, "A2", ok, f"max |sum A| over 1000 groups = {worst:.1e}; constant groups zero grad: {const_ok}")
    assert ok


# -- A3 ----------------------------------------------------------------------


def test_a3_dpo_anchor(capsys):
    rng = np.random.default_rng(3)
    worst_ln2 = 0.0
    decreased = 0
    n = 50
    for _ in range(n):
        p = random_params(rng)
        ref = snapshot_reference(p)
        pairs = []
        while len(pairs) < 3:
            c, r = random_tokens(rng, p.vocab, 1, 6), random_tokens(rng, p.vocab, 1, 6)
            if c != r:
                pairs.append(PreferencePair(tuple(random_tokens(rng, p.vocab, 0, 3)), tuple(c), tuple(r)))
        cfg = DpoConfig(0.1)
        loss0, _ = dpo_objective(pairs, p, ref, cfg)
        worst_ln2 = max(worst_ln2, abs(loss0 - LN2))
        # The step is taken away from theta = ref so the margin is non-zero.
        q = p.copy()
        for _, t in q.tensors():
            t += rng.normal(0, 0.3, size=t.shape)
        pair = pairs[:1]
        before, grad = dpo_objective(pair, q, ref, cfg)
        q.add_(grad, -1e-2)
        decreased += dpo_objective(pair, q, ref, cfg)[0] < before
    ok = worst_ln2 <= 1e-12 and decreased == n
    report(capsys, "A3", ok, f"max |loss - ln2| = {worst_ln2:.1e}; lr=1e-2 step decreased loss {decreased}/{n}")
    assert ok


# -- A4 ----------------------------------------------------------------------

A4_COUNTEREXAMPLE = ([2.0], [-1.0], 0.5)


def _a4_parts():
    rng = np.random.default_rng(4)
    violations = 0
    upper_ok = True
    kl_min = math.inf
    kl_oracle = 0.0
    gae_err = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        eps = float(rng.uniform(0.05, 0.5))
        rho = np.exp(rng.normal(0, 1.0, size=n))
        adv = rng.normal(0, 2.0, size=n)
        obj = clipped_surrogate(rho, adv, eps)
        bound = (1 + eps) * np.max(np.abs(adv))
        violations += abs(obj) > bound + 1e-12
        upper_ok &= obj <= bound + 1e-12
        m = int(rng.integers(2, 12))
        p, q = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(m))
        kl = kl_penalty(p, q)
        kl_min = min(kl_min, kl)
        kl_oracle = max(kl_oracle, abs(kl - kl_hp(p, q)))
        kl_oracle = max(kl_oracle, abs(kl_penalty(p, p)))
        r, v = rng.normal(size=n), rng.normal(size=n)
        g, lam = float(rng.uniform(0, 1)), float(rng.uniform(0, 1))
        gae = gae_advantages(r, v, PpoConfig(g, lam)).values
        gae_err = max(gae_err, float(np.max(np.abs(gae - np.array(brute_gae(r, v, g, lam))))))
    return violations, upper_ok, kl_min, kl_oracle, gae_err


def test_a4_clip_kl_gae(capsys):
    violations, upper_ok, kl_min, kl_oracle, gae_err = _a4_parts()
    rest_ok = upper_ok and kl_min >= 0 and kl_oracle <= 1e-12 and gae_err <= 1e-10
    counter = clipped_surrogate(*A4_COUNTEREXAMPLE)
    literal_ok = violations == 0
    detail = (f"two-sided bound |obj| <= (1+eps)max|A| violated in {violations}/1000 random cases "
              f"(e.g. rho=2, A=-1, eps=0.5 gives {counter}); upper bound holds: {upper_ok}; "
              f"min KL = {kl_min:.1e}; max KL error = {kl_oracle:.1e}; max GAE error = {gae_err:.1e}")
    report(capsys, "A4", literal_ok and rest_ok, detail)
    assert rest_ok


@pytest.mark.xfail(strict=True, reason="the min-form clipped objective is unbounded below for rho > 1+eps, A < 0")
def test_a4_literal_two_sided_bound():
    obj = clipped_surrogate(*A4_COUNTEREXAMPLE)
    assert abs(obj) <= (1 + A4_COUNTEREXAMPLE[2]) * 1.0


# -- A5 ----------------------------------------------------------------------


def test_a5_format_protocol(capsys):
    rng = np.random.default_rng(5)
    alphabet = list("abc0123 \n.,!?xyz")
    round_trips = 0
    for _ in range(1000):
        kind = list(TemplateKind)[int(rng.integers(4))]
        t = "".join(rng.choice(alphabet, size=int(rng.integers(0, 30))))
        r = "".join(rng.choice(alphabet, size=int(rng.integers(0, 30))))
        p = parse_output(kind, render_completion(kind, t if kind.thinking else None, r))
        round_trips += p.well_formed and p.response == r.strip() and p.thought == (t.strip() if kind.thinking else None)
    malformed = [
        "<think>plan", "</think> x", "<think>a<think>b", "<response>x", "x</response>",
        "<think>a</think>", "<think>a</think> <response>b", "<response>b</response><think>a</think>",
        "<THINK>a</THINK><response>b</response>", "", "   ", "<think></think><response>",
    ]
    pieces = list("ab <>/\n") + list(TAGS)
    for _ in range(500):
        malformed.append("".join(rng.choice(pieces, size=int(rng.integers(0, 12)))))
    crashes = flagged = checked = 0
    for raw in malformed[:12]:
        for kind in (TemplateKind.ZERO_THINK, TemplateKind.WARMSTART_THINK):
            try:
                out = parse_output(kind, raw)
            except Exception:
                crashes += 1
                continue
            # Every hand-written case is malformed under the zero-think layout.
            if kind is TemplateKind.ZERO_THINK:
                checked += 1
                flagged += not out.well_formed
    for raw in malformed[12:]:
        for kind in list(TemplateKind):
            try:
                out = parse_output(kind, raw)
                if not out.well_formed:
                    assert out.thought is None
            except Exception:
                crashes += 1
    ok = round_trips == 1000 and crashes == 0 and flagged == checked
    report(capsys, "A5", ok, f"{round_trips}/1000 round trips; malformed flagged {flagged}/{checked}; "
                             f"{crashes} crashes over {len(malformed)} outputs x 4 templates")
    assert ok


# -- A6 ----------------------------------------------------------------------


def test_a6_rlvr_convergence(capsys, warm, a6_run):
    _, rows, elapsed = a6_run
    start = evaluate(warm, warm, TEST, VerifierReward(), 4, 0, A6_CFG).mean_reward
    rewards = [r.mean_reward for r in rows]
    windows = window_means(rewards, 100)
    non_decreasing = all(b >= a for a, b in zip(windows, windows[1:]))
    ok = (len(VOCAB) == 16 and start < 0.15 and windows[-1] >= 0.9 and non_decreasing
          and len(rows) <= 2000 and elapsed <= 600)
    report(capsys, "A6", ok, f"|V|={len(VOCAB)}; post-SFT reward {start:.3f}; 100-step windows "
                             f"{[round(w, 3) for w in windows]}; {len(rows)} steps in {elapsed:.1f}s")
    assert ok


# -- A7 ----------------------------------------------------------------------


def test_a7_rlmt_analogue(capsys, warm, reward_model):
    acc = pairwise_accuracy(reward_model, HELDOUT_PREFS)
    src = ModelReward(reward_model)
    cfg = BASE.replace(actor_lr=0.03, steps=600)
    assert cfg.kind is TemplateKind.WARMSTART_THINK
    params, rows = rl_train(warm, TRAIN, src, cfg)
    windows = window_means([r.mean_reward for r in rows], 50)
    gain = windows[-1] - windows[0]
    win = evaluate(params, warm, TEST, src, 4, 0, cfg).win_rate
    ok = acc >= 0.95 and gain >= 1.0 and win >= 0.7
    report(capsys, "A7", ok, f"RM trained on 600 pairs, held-out accuracy {acc:.3f}; RM score "
                             f"{windows[0]:.2f} -> {windows[-1]:.2f} (+{gain:.2f}); win rate vs reference {win:.3f}")
    assert ok


# -- A8 ----------------------------------------------------------------------


def test_a8_on_policy_dpo(capsys, warm, reward_model):
    src = ModelReward(reward_model)
    cfg = BASE.replace(dpo_lr=0.05, dpo_batch_size=16, epochs=2, dpo_beta=0.1)
    params, rows, pairs = dpo_round(warm, None, TRAIN[:500], src, cfg)
    win = evaluate(params, warm, TEST, src, 4, 0, cfg).win_rate
    ok = cfg.samples_per_prompt == 8 and win >= 0.6
    report(capsys, "A8", ok, f"{len(pairs)} best-vs-worst pairs from 8 samples x 500 prompts, 2 epochs, "
                             f"beta=0.1; held-out win rate vs reference {win:.3f}")
    assert ok


# -- A9 ----------------------------------------------------------------------


def test_a9_length_trend(capsys, warm):
    cfg = BASE.replace(actor_lr=0.3, steps=800, length_bonus=0.01, length_cap=50)
    _, rows = rl_train(warm, TRAIN, VerifierReward(), cfg)
    windows = window_means([r.mean_thought_tokens for r in rows], 200)
    growth = windows[-1] / windows[0] - 1.0
    _, control = rl_train(warm, TRAIN, VerifierReward(), cfg.replace(length_bonus=0.0))
    cw = window_means([r.mean_thought_tokens for r in control], 200)
    ok = growth >= 0.25
    report(capsys, "A9", ok, f"thought tokens per 200-step window {[round(w, 2) for w in windows]} "
                             f"(+{100 * growth:.0f}%); no-bonus control +{100 * (cw[-1] / cw[0] - 1):.0f}%")
    assert ok


# -- A10 ---------------------------------------------------------------------


def test_a10_determinism_and_persistence(capsys, tmp_path, warm, a6_run):
    params, rows, _ = a6_run
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    first.write_text(format_metrics(rows))
    _, rows2 = rl_train(warm, TRAIN, VerifierReward(), A6_CFG)
    second.write_text(format_metrics(rows2))
    metrics_same = first.read_bytes() == second.read_bytes()

    path = os.path.join(tmp_path, "ckpt.txt")
    save_checkpoint(path, Checkpoint(params, A6_CFG.to_dict(), len(rows), 0, len(rows)))
    loaded = load_checkpoint(path).params
    prompts = [VOCAB.encode(t.prompt) for t in TEST[:100]]
    same = sum(sample_sequence(params, pr, 0.7, 24, seed=s) == sample_sequence(loaded, pr, 0.7, 24, seed=s)
               for s, pr in enumerate(prompts))
    ok = metrics_same and same == 100 and np.array_equal(params.flatten(), loaded.flatten())
    report(capsys, "A10", ok, f"A6 rerun metrics byte-identical: {metrics_same}; "
                              f"save/load/resample identical for {same}/100 seeds")
    assert ok


# -- A11 ---------------------------------------------------------------------


def _corpus(seed: int, n: int) -> list[tuple[str, str]]:
    words = ["first", "checklist", "audience", "tone", "outline", "step", "example", "verify",
             "revise", "maybe", "the", "plan", "answer", "draft"]
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        text = " ".join(rng.choice(words, size=int(rng.integers(3, 60))))
        if rng.random() < 0.5:
            text = text.replace(" the ", ". ")
        out.append((f"prompt {i} plan", text))
    return out


def test_a11_traitlab_symmetry(capsys):
    a, b = _corpus(11, 100), _corpus(12, 100)
    pairs = [ThoughtPair(p, x, y) for (p, x), (_, y) in zip(a, b)]
    swapped = [ThoughtPair(p.prompt, p.thought_b, p.thought_a) for p in pairs]
    fwd, back = analyze(StubJudge(), pairs), analyze(StubJudge(), swapped)
    exact = fwd.traits == back.traits and all(
        back.table.rows[t].win_rate_a == 1.0 - fwd.table.rows[t].win_rate_a for t in fwd.traits)
    sums = all(r.total == len(pairs) for res in (fwd, back) for r in res.table.rows.values())
    ok = exact and sums and bool(fwd.traits)
    report(capsys, "A11", ok, f"{len(fwd.traits)} traits over {len(pairs)} examples; swap maps w -> 1-w exactly: "
                              f"{exact}; tallies sum to example count: {sums}")
    assert ok
