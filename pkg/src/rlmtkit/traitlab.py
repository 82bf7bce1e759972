"""Trait-difference analysis between two models' thoughts.

Pipeline: extract traits per thought, compare trait sets batch-wise to find
consistent differences, consolidate them over random batches, then
adjudicate every candidate trait head-to-head on every example.

The judge is pluggable. :class:`StubJudge` is a deterministic keyword judge
used in tests and offline runs; a live LLM client would implement the same
three methods, using the instruction strings below.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from rlmtkit.errors import DataError, InvalidInputError, JudgeError

DEFAULT_BATCH_SIZE = 20
DEFAULT_BATCHES = 10
MIN_TRAITS = 3
MAX_TRAITS = 8

EXTRACT_INSTRUCTION = (
    "You are analyzing the hidden planning part produced by a model before its final answer. "
    "From the planning excerpt below, infer the key characteristics of how the planning is "
    "performed. Focus on the style and intent of the planning, not the specific content of the "
    "question. Return ONLY a compact JSON array (no extra text), where each element is a short "
    "string naming one characteristic. Aim for 3-8 distinct, non-redundant items."
)
COMPARE_INSTRUCTION = (
    "You will compare planning styles for model A vs model B. You are given multiple examples. "
    "For each, you will see the user prompt and two lists: A_plan and B_plan. Identify 1-3 "
    "concise, consistent differences describing how A's planning differs from B's. Focus on "
    "stylistic/strategic patterns that recur across the provided examples. Return ONLY a JSON "
    "array of short difference statements (no extra text)."
)
ADJUDICATE_INSTRUCTION = (
    "You are given two hidden planning excerpts from two models: A and B. For each trait, decide "
    "which planning shows the trait MORE strongly: 'A', 'B', or 'tie'. Return ONLY a JSON object "
    "mapping trait_keys to 'A', 'B', or 'tie' (lowercase also accepted). Output strictly a JSON "
    "object with these keys only, each value one of 'A', 'B', or 'tie'."
)


class Judge(Protocol):
    def extract(self, prompt: str, thought: str) -> list[str]: ...

    def compare(self, batch: Sequence[TraitExample]) -> list[str]: ...

    def adjudicate(self, prompt: str, thought_a: str, thought_b: str, trait: str) -> str: ...


@dataclass(frozen=True)
class TraitExample:
    prompt: str
    traits_a: tuple[str, ...]
    traits_b: tuple[str, ...]


@dataclass(frozen=True)
class ThoughtPair:
    prompt: str
    thought_a: str
    thought_b: str


@dataclass
class TraitTally:
    wins_a: int = 0
    wins_b: int = 0
    ties: int = 0

    @property
    def total(self) -> int:
        return self.wins_a + self.wins_b + self.ties

    @property
    def win_rate_a(self) -> float:
        """(wins_a + ties/2) / total, bit-symmetric under swapping A and B.

        The leading side's rate is at least 0.5, so ``1 - rate`` is exact and
        swapping the tallies yields exactly ``1 - win_rate_a``.
        """
        if not self.total:
            return 0.5
        if self.wins_a >= self.wins_b:
            return (2 * self.wins_a + self.ties) / (2 * self.total)
        return 1.0 - (2 * self.wins_b + self.ties) / (2 * self.total)


@dataclass
class WinRateTable:
    rows: dict[str, TraitTally] = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["trait,wins_a,wins_b,ties,win_rate_a"]
        for trait, t in self.rows.items():
            lines.append(f"{_csv_field(trait)},{t.wins_a},{t.wins_b},{t.ties},{t.win_rate_a!r}")
        return "\n".join(lines) + "\n"


def _csv_field(text: str) -> str:
    if any(c in text for c in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text


def _dedupe(items: Sequence[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for item in items:
        key = item.strip().lower()
        if key and key not in seen:
            seen.add(key)
            out.append(item.strip())
    return out


def extract_traits(judge: Judge, prompt: str, thought: str) -> list[str]:
    """Deduplicated traits for one thought, truncated to the first eight."""
    if not thought.strip():
        raise InvalidInputError("thought must be non-empty")
    try:
        raw = judge.extract(prompt, thought)
    except JudgeError:
        raise
    except Exception as e:  # judge clients fail in arbitrary ways
        raise JudgeError(f"trait extraction failed: {e}") from e
    traits = _dedupe(raw)
    if len(traits) < MIN_TRAITS:
        raise JudgeError(f"judge returned {len(traits)} distinct traits, need at least {MIN_TRAITS}")
    return traits[:MAX_TRAITS]


def _batches(examples: Sequence[TraitExample], batch_size: int) -> list[list[TraitExample]]:
    out = [list(examples[i:i + batch_size]) for i in range(0, len(examples), batch_size)]
    # A trailing singleton cannot show a "consistent" difference; fold it in.
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2].extend(out.pop())
    return out


def compare_batches(
    judge: Judge, examples: Sequence[TraitExample], batch_size: int = DEFAULT_BATCH_SIZE
) -> list[list[str]]:
    """Per-batch difference statements (1-3 each, possibly none)."""
    if len(examples) < 2:
        raise InvalidInputError("need at least 2 examples to compare")
    if batch_size < 2:
        raise InvalidInputError("batch_size must be >= 2")
    out = []
    for batch in _batches(examples, batch_size):
        try:
            statements = judge.compare(batch)
        except JudgeError:
            raise
        except Exception as e:
            raise JudgeError(f"batch comparison failed: {e}") from e
        out.append(_dedupe(statements)[:3])
    return out


def summarize_differences(
    judge: Judge,
    examples: Sequence[TraitExample],
    batches: int = DEFAULT_BATCHES,
    batch_size: int = DEFAULT_BATCH_SIZE,
    seed: int = 0,
) -> list[str]:
    """Compare ``batches`` random batches and consolidate their statements in first-seen order."""
    if len(examples) < batch_size:
        raise InvalidInputError(f"need at least {batch_size} examples, got {len(examples)}")
    rng = np.random.default_rng(seed)
    statements: list[str] = []
    for _ in range(batches):
        idx = sorted(rng.choice(len(examples), size=batch_size, replace=False))
        for group in compare_batches(judge, [examples[i] for i in idx], batch_size):
            statements.extend(group)
    return _dedupe(statements)


_VERDICTS = {"a": "A", "b": "B", "tie": "tie"}


def headtohead(judge: Judge, traits: Sequence[str], examples: Sequence[ThoughtPair]) -> WinRateTable:
    if not traits:
        raise InvalidInputError("no traits to adjudicate")
    table = WinRateTable({t: TraitTally() for t in traits})
    for ex in examples:
        for trait in traits:
            try:
                raw = judge.adjudicate(ex.prompt, ex.thought_a, ex.thought_b, trait)
            except JudgeError:
                raise
            except Exception as e:
                raise JudgeError(f"adjudication failed for trait {trait!r}: {e}") from e
            verdict = _VERDICTS.get(str(raw).strip().lower())
            if verdict is None:
                raise JudgeError(f"unknown verdict {raw!r} for trait {trait!r}")
            tally = table.rows[trait]
            if verdict == "A":
                tally.wins_a += 1
            elif verdict == "B":
                tally.wins_b += 1
            else:
                tally.ties += 1
    return table


def align_corpora(
    corpus_a: Sequence[tuple[str, str]], corpus_b: Sequence[tuple[str, str]]
) -> list[ThoughtPair]:
    """Pair thoughts by prompt, in corpus A's order. Raises if the prompt sets differ."""
    a = dict(corpus_a)
    b = dict(corpus_b)
    if len(a) != len(corpus_a) or len(b) != len(corpus_b):
        raise DataError("duplicate prompts in a thought corpus")
    only_a = [p for p in a if p not in b]
    only_b = [p for p in b if p not in a]
    if only_a or only_b:
        raise DataError(
            f"corpora cover different prompts; missing from B: {only_a!r}; missing from A: {only_b!r}")
    return [ThoughtPair(p, a[p], b[p]) for p in a]


@dataclass
class TraitAnalysis:
    traits: list[str]
    table: WinRateTable
    from_differences: bool


def analyze(
    judge: Judge,
    pairs: Sequence[ThoughtPair],
    batches: int = DEFAULT_BATCHES,
    batch_size: int = DEFAULT_BATCH_SIZE,
    seed: int = 0,
) -> TraitAnalysis:
    """Run the whole pipeline.

    If no consistent differences surface (identical corpora, say), every
    extracted trait is adjudicated instead so the table is never empty.
    """
    examples = [
        TraitExample(p.prompt, tuple(extract_traits(judge, p.prompt, p.thought_a)),
                     tuple(extract_traits(judge, p.prompt, p.thought_b)))
        for p in pairs
    ]
    size = min(batch_size, len(examples))
    traits = summarize_differences(judge, examples, batches, size, seed)
    from_diff = bool(traits)
    if not traits:
        traits = sorted({t for ex in examples for t in ex.traits_a + ex.traits_b})
    return TraitAnalysis(traits, headtohead(judge, traits, pairs), from_diff)


# ---------------------------------------------------------------------------
# deterministic stub


_KEYWORD_TRAITS = {
    "checklist": "checklist-planning",
    "constraint": "constraint-mapping",
    "audience": "audience-awareness",
    "tone": "tone-setting",
    "outline": "structured-outline",
    "step": "stepwise-decomposition",
    "example": "example-driven",
    "verify": "self-verification",
    "check": "self-verification",
    "revise": "iterative-refinement",
    "maybe": "hedged-exploration",
}


def _words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", text.lower())


class StubJudge:
    """Keyword-driven judge with no randomness and no network.

    Every thought gets two structural traits (length and breadth) plus one
    per matched keyword; a trait's strength in a thought is its keyword
    count, or the word count for structural traits.
    """

    def extract(self, prompt: str, thought: str) -> list[str]:
        words = _words(thought)
        traits = ["extended-planning" if len(words) > 40 else "brief-planning",
                  "multi-part-planning" if thought.count(".") + thought.count("\n") >= 3 else "single-pass-planning"]
        for w in words:
            for key, trait in _KEYWORD_TRAITS.items():
                if w.startswith(key):
                    traits.append(trait)
        traits.append("query-grounded" if set(_words(prompt)) & set(words) else "query-detached")
        return traits

    def compare(self, batch: Sequence[TraitExample]) -> list[str]:
        diff: dict[str, int] = {}
        for ex in batch:
            a, b = set(ex.traits_a), set(ex.traits_b)
            for t in a - b:
                diff[t] = diff.get(t, 0) + 1
            for t in b - a:
                diff[t] = diff.get(t, 0) + 1
        ranked = sorted(diff.items(), key=lambda kv: (-kv[1], kv[0]))
        return [t for t, n in ranked if n >= 2][:3]

    def _strength(self, thought: str, trait: str) -> int:
        words = _words(thought)
        keys = [k for k, t in _KEYWORD_TRAITS.items() if t == trait]
        if keys:
            return sum(1 for w in words for k in keys if w.startswith(k))
        if trait in ("extended-planning", "brief-planning"):
            return len(words) if trait == "extended-planning" else -len(words)
        if trait in ("multi-part-planning", "single-pass-planning"):
            parts = thought.count(".") + thought.count("\n")
            return parts if trait == "multi-part-planning" else -parts
        return 0

    def adjudicate(self, prompt: str, thought_a: str, thought_b: str, trait: str) -> str:
        sa, sb = self._strength(thought_a, trait), self._strength(thought_b, trait)
        return "A" if sa > sb else "B" if sb > sa else "tie"
