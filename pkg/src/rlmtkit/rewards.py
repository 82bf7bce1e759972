"""Reward sources: an exact-match verifier and a linear Bradley-Terry reward model.

Feature contract (``featurize``). Texts are split into tokens = their
non-whitespace characters, so spacing never changes a score:

    0  bias, always 1
    1  response length in tokens
    2  fraction of distinct prompt tokens that also occur in the response
    3  longest non-decreasing contiguous run / response length
    4  distinct response tokens / response length

Features 2-4 are 0 for an empty response.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from rlmtkit.errors import DataError, InvalidInputError

FEATURE_SPEC_VERSION = 1
FEATURE_NAMES = ("bias", "length", "echo", "sorted_run", "distinct")
N_FEATURES = len(FEATURE_NAMES)
RM_HEADER = "RLMTKIT-RM v1"


class RewardKind(str, enum.Enum):
    VERIFIER = "verifier"
    MODEL = "model"
    SHAPED = "shaped"


@dataclass(frozen=True)
class Task:
    prompt: str
    gold: str | None = None

    @property
    def verifiable(self) -> bool:
        return self.gold is not None


@dataclass(frozen=True)
class RewardSignal:
    value: float
    source: RewardKind


_SPACES = re.compile(r" +")


def normalize_answer(text: str) -> str:
    return _SPACES.sub(" ", text.strip())


def verify_exact(response: str, gold: str | None) -> RewardSignal:
    if gold is None:
        raise InvalidInputError("verifier needs a gold answer")
    hit = normalize_answer(response) == normalize_answer(gold)
    return RewardSignal(1.0 if hit else 0.0, RewardKind.VERIFIER)


def _tokens(text: str) -> list[str]:
    return [c for c in text if not c.isspace()]


def featurize(prompt: str, response: str) -> np.ndarray:
    toks = _tokens(response)
    n = len(toks)
    out = np.zeros(N_FEATURES)
    out[0] = 1.0
    out[1] = n
    if n == 0:
        return out
    prompt_set = set(_tokens(prompt))
    if prompt_set:
        out[2] = len(prompt_set & set(toks)) / len(prompt_set)
    best = run = 1
    for a, b in zip(toks, toks[1:]):
        run = run + 1 if b >= a else 1
        best = max(best, run)
    out[3] = best / n
    out[4] = len(set(toks)) / n
    return out


@dataclass
class BtRewardModel:
    weights: np.ndarray
    feature_version: int = FEATURE_SPEC_VERSION

    @classmethod
    def zeros(cls) -> BtRewardModel:
        return cls(np.zeros(N_FEATURES))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{RM_HEADER}\n")
            f.write(f"features {self.feature_version} {' '.join(FEATURE_NAMES)}\n")
            f.write(" ".join(f"{w:.17g}" for w in self.weights) + "\n")

    @classmethod
    def load(cls, path: str) -> BtRewardModel:
        try:
            with open(path, encoding="utf-8") as f:
                lines = f.read().splitlines()
        except OSError as e:
            raise DataError(f"cannot read reward model: {e.strerror}", path) from None
        if len(lines) < 3 or lines[0] != RM_HEADER:
            raise DataError("not a reward model file", path, 1)
        head = lines[1].split()
        if len(head) < 2 or head[0] != "features" or head[1] != str(FEATURE_SPEC_VERSION):
            raise DataError("unsupported feature spec", path, 2)
        try:
            w = np.array([float(x) for x in lines[2].split()])
        except ValueError:
            raise DataError("malformed weight", path, 3) from None
        if w.size != N_FEATURES or not np.isfinite(w).all():
            raise DataError("weight vector has wrong size or non-finite entries", path, 3)
        return cls(w)


def score_reward_model(rm: BtRewardModel, prompt: str, response: str) -> RewardSignal:
    if not np.isfinite(rm.weights).all():
        raise InvalidInputError("reward model weights are not finite")
    feats = featurize(prompt, response)
    if rm.weights.shape != feats.shape:
        raise InvalidInputError(f"reward model has {rm.weights.size} weights, features have {feats.size}")
    return RewardSignal(float(rm.weights @ feats), RewardKind.MODEL)


def _pair_deltas(pairs: Sequence[tuple[str, str, str]]) -> np.ndarray:
    return np.stack([featurize(p, c) - featurize(p, r) for p, c, r in pairs])


def bt_loss(weights: np.ndarray, deltas: np.ndarray) -> float:
    """Mean ``-log sigmoid(w . (f_chosen - f_rejected))``."""
    return float(np.mean(np.logaddexp(0.0, -(deltas @ weights))))


def train_reward_model(
    pairs: Sequence[tuple[str, str, str]], epochs: int = 200, lr: float = 0.5
) -> BtRewardModel:
    """Full-batch gradient descent on the Bradley-Terry log-loss, from zero weights."""
    if not pairs:
        raise InvalidInputError("need at least one preference pair")
    deltas = _pair_deltas(pairs)
    w = np.zeros(N_FEATURES)
    for _ in range(epochs):
        margin = deltas @ w
        # d/dw of log(1 + exp(-m)) is -sigmoid(-m) * delta
        coef = -0.5 * (1.0 - np.tanh(margin / 2.0))
        w -= lr * (coef @ deltas) / len(deltas)
    return BtRewardModel(w)


def pairwise_accuracy(rm: BtRewardModel, pairs: Sequence[tuple[str, str, str]]) -> float:
    if not pairs:
        return math.nan
    wins = sum(
        score_reward_model(rm, p, c).value > score_reward_model(rm, p, r).value for p, c, r in pairs
    )
    return wins / len(pairs)


def shaped_length_reward(
    base: RewardSignal, thought_tokens: int, bonus_per_token: float, cap: int
) -> RewardSignal:
    if bonus_per_token < 0:
        raise InvalidInputError("bonus_per_token must be >= 0")
    return RewardSignal(base.value + bonus_per_token * min(thought_tokens, cap), RewardKind.SHAPED)


class RewardSource(Protocol):
    kind: RewardKind

    def check_tasks(self, tasks: Sequence[Task]) -> None: ...

    def score(self, task: Task, response: str) -> RewardSignal: ...


class VerifierReward:
    kind = RewardKind.VERIFIER
    name = "verifier"

    def check_tasks(self, tasks: Sequence[Task]) -> None:
        missing = [t.prompt for t in tasks if t.gold is None]
        if missing:
            raise InvalidInputError(f"verifier reward needs gold answers; {len(missing)} task(s) lack one")

    def score(self, task: Task, response: str) -> RewardSignal:
        return verify_exact(response, task.gold)


class ModelReward:
    kind = RewardKind.MODEL

    def __init__(self, rm: BtRewardModel, name: str = "model"):
        self.rm = rm
        self.name = name

    def check_tasks(self, tasks: Sequence[Task]) -> None:
        pass

    def score(self, task: Task, response: str) -> RewardSignal:
        return score_reward_model(self.rm, task.prompt, response)
