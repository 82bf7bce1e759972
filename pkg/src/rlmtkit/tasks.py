"""Synthetic digit-sorting task: prompts, SFT demonstrations, preference pairs.

A prompt is a string of distinct digits; the gold answer is the same digits
in ascending order. The task is order-invariant in the prompt, which suits
the bag-of-context policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rlmtkit.chatproto import TAGS, TemplateKind, render_completion, render_prompt
from rlmtkit.policy import Vocab
from rlmtkit.rewards import Task

DIGITS = "0123456789"


@dataclass(frozen=True)
class Demo:
    prompt: str
    thought: str
    response: str


def sort_tasks(n: int, seed: int, min_len: int = 3, max_len: int = 4, alphabet: str = DIGITS) -> list[Task]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(min_len, max_len + 1))
        chars = [alphabet[i] for i in rng.choice(len(alphabet), size=k, replace=False)]
        out.append(Task("".join(chars), "".join(sorted(chars))))
    return out


def sort_demos(tasks: list[Task], seed: int, style: str = "format") -> list[Demo]:
    """Procedural SFT targets.

    ``format``: thought is a shuffled restatement of 1..k prompt digits and the
    response is a random permutation of the prompt, so the model learns the
    tag layout without learning to sort. ``oracle``: thought restates the
    prompt and the response is the gold answer.
    """
    rng = np.random.default_rng(seed)
    demos = []
    for t in tasks:
        digits = list(t.prompt)
        if style == "oracle":
            demos.append(Demo(t.prompt, t.prompt, t.gold or ""))
            continue
        if style != "format":
            raise ValueError(f"unknown demo style {style!r}")
        k = int(rng.integers(1, len(digits) + 1))
        thought = "".join(rng.permutation(digits)[:k])
        response = "".join(rng.permutation(digits))
        demos.append(Demo(t.prompt, thought, response))
    return demos


def sort_preferences(tasks: list[Task], seed: int, alphabet: str = DIGITS) -> list[tuple[str, str, str]]:
    """(prompt, sorted, flawed) triples.

    Flaws cycle through disorder (a shuffle that differs from the sorted
    answer), duplication (one digit replaced by a copy of another, still
    sorted), insertion (an extra digit absent from the prompt) and omission
    (one digit dropped). Insertion and omission pull the length weight in
    opposite directions, so a fitted model rewards order and coverage
    without favouring long or short answers for their own sake.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i, t in enumerate(tasks):
        gold = t.gold or "".join(sorted(t.prompt))
        if len(gold) < 2:
            continue
        flaw = i % 4
        if flaw == 3:
            drop = int(rng.integers(len(gold)))
            flawed = gold[:drop] + gold[drop + 1:]
        elif flaw == 1:
            j = int(rng.integers(len(gold)))
            chars = list(gold)
            chars[j] = gold[(j + 1) % len(gold)]
            flawed = "".join(sorted(chars))
        elif flaw == 2:
            spare = [c for c in alphabet if c not in gold]
            if not spare:
                continue
            flawed = "".join(sorted(gold + spare[int(rng.integers(len(spare)))]))
        else:
            while True:
                flawed = "".join(rng.permutation(list(gold)))
                if flawed != gold:
                    break
        out.append((t.prompt, gold, flawed))
    return out


def task_vocab(texts: list[str], kind: TemplateKind | str = TemplateKind.WARMSTART_THINK) -> Vocab:
    """Vocabulary covering ``texts`` rendered under ``kind`` plus every chat tag.

    Warm-start kinds need only the task characters and a newline; zero kinds
    also need the instruction prefix characters.
    """
    kind = TemplateKind(kind)
    scaffold = [render_completion(kind, "", "")]
    if kind.zero:
        scaffold.append(render_prompt(kind, " "))
    return Vocab.from_texts(list(texts) + scaffold, extra=TAGS if kind.zero else TAGS[:2])
