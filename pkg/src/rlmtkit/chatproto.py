"""Prompt templates and the thought/response output grammar.

Four template kinds exist. ``warmstart-*`` kinds pass the user turn through
untouched (the SFT'd model already knows the format); ``zero-*`` kinds wrap it
in a fixed instruction prefix so a base model can discover the tags by itself.

Tag matching is first-occurrence, case-sensitive and flat (no nesting).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING

from rlmtkit.errors import InvalidInputError

if TYPE_CHECKING:
    from rlmtkit.policy import Vocab

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
RESPONSE_OPEN = "<response>"
RESPONSE_CLOSE = "</response>"
QUERY_OPEN = "<query>"
QUERY_CLOSE = "</query>"

TAGS = (THINK_OPEN, THINK_CLOSE, RESPONSE_OPEN, RESPONSE_CLOSE, QUERY_OPEN, QUERY_CLOSE)

# Appended to each user prompt when sampling warm-start data from a teacher.
TEACHER_FORMAT_INSTRUCTION = (
    "FORMAT: First showcase a detailed planning phase where you plan your response "
    "within <think>...</think> tags. Then produce the actual response within "
    "<response>...</response> tags. The content within the <think>...</think> tags "
    "should *not* refer to the fact that a planning phase was prompted - they should "
    "refer to the user prompt only."
)

ZERO_THINK_PREFIX = (
    "A conversation between User and Assistant. Following the User's query, the "
    "Assistant first plans a response, and then provides the response. The internal "
    "reasoning process is enclosed within <think> </think> tags and the response is "
    "enclosed within <response> </response> tags, i.e., in the format <think> "
    "reasoning process here </think> <response> response here </response>."
)

ZERO_PLAIN_PREFIX = (
    "A conversation between User and Assistant. The user asks a question, and the "
    "assistant provides the user with a response. The response is enclosed within "
    "<response> </response> tags, i.e., <response> response here </response>."
)

_ZERO_TURN = "\n\nUser: <query> {query} </query>\nAssistant:"


class TemplateKind(str, enum.Enum):
    WARMSTART_THINK = "warmstart-think"
    WARMSTART_PLAIN = "warmstart-plain"
    ZERO_THINK = "zero-think"
    ZERO_PLAIN = "zero-plain"

    @property
    def thinking(self) -> bool:
        return self in (TemplateKind.WARMSTART_THINK, TemplateKind.ZERO_THINK)

    @property
    def zero(self) -> bool:
        return self in (TemplateKind.ZERO_THINK, TemplateKind.ZERO_PLAIN)

    @classmethod
    def resolve(cls, thinking: bool, zero: bool) -> TemplateKind:
        if zero:
            return cls.ZERO_THINK if thinking else cls.ZERO_PLAIN
        return cls.WARMSTART_THINK if thinking else cls.WARMSTART_PLAIN


@dataclass(frozen=True)
class ParsedOutput:
    thought: str | None
    response: str
    well_formed: bool


def _kind(kind: TemplateKind | str) -> TemplateKind:
    try:
        return TemplateKind(kind)
    except ValueError:
        raise InvalidInputError(f"unknown template kind {kind!r}") from None


def render_prompt(kind: TemplateKind | str, user_query: str) -> str:
    """Render the prompt text the policy conditions on."""
    kind = _kind(kind)
    if not user_query:
        raise InvalidInputError("user query must be non-empty")
    if kind is TemplateKind.ZERO_THINK:
        return ZERO_THINK_PREFIX + _ZERO_TURN.format(query=user_query)
    if kind is TemplateKind.ZERO_PLAIN:
        return ZERO_PLAIN_PREFIX + _ZERO_TURN.format(query=user_query)
    return user_query


def render_completion(kind: TemplateKind | str, thought: str | None, response: str) -> str:
    """Inverse of :func:`parse_output`: the target text a demonstration teaches."""
    kind = _kind(kind)
    if kind is TemplateKind.WARMSTART_THINK:
        return f"{THINK_OPEN}{thought or ''}{THINK_CLOSE}\n{response}"
    if kind is TemplateKind.ZERO_THINK:
        return f"{THINK_OPEN} {thought or ''} {THINK_CLOSE} {RESPONSE_OPEN} {response} {RESPONSE_CLOSE}"
    if kind is TemplateKind.ZERO_PLAIN:
        return f"{RESPONSE_OPEN} {response} {RESPONSE_CLOSE}"
    return response


def _between(raw: str, open_tag: str, close_tag: str, start: int = 0) -> tuple[str, int] | None:
    i = raw.find(open_tag, start)
    if i < 0:
        return None
    j = raw.find(close_tag, i + len(open_tag))
    if j < 0:
        return None
    return raw[i + len(open_tag):j], j + len(close_tag)


def parse_output(kind: TemplateKind | str, raw: str) -> ParsedOutput:
    """Split a generated completion into thought and response.

    Never raises on malformed text; ``well_formed`` is False instead and the
    response falls back to the stripped raw text.
    """
    kind = _kind(kind)
    fallback = ParsedOutput(None, raw.strip(), False)

    if kind is TemplateKind.WARMSTART_PLAIN:
        return ParsedOutput(None, raw.strip(), True)

    if kind is TemplateKind.ZERO_PLAIN:
        found = _between(raw, RESPONSE_OPEN, RESPONSE_CLOSE)
        if found is None:
            return fallback
        return ParsedOutput(None, found[0].strip(), True)

    think = _between(raw, THINK_OPEN, THINK_CLOSE)
    if think is None:
        return fallback
    thought, end = think

    if kind is TemplateKind.WARMSTART_THINK:
        return ParsedOutput(thought.strip(), raw[end:].strip(), True)

    resp = _between(raw, RESPONSE_OPEN, RESPONSE_CLOSE, start=end)
    if resp is None:
        return fallback
    return ParsedOutput(thought.strip(), resp[0].strip(), True)


def strip_thought(p: ParsedOutput) -> str:
    """The text a reward function is allowed to see."""
    return p.response


def segment_lengths(p: ParsedOutput, vocab: Vocab) -> tuple[int, int]:
    """(thought tokens, response tokens) under ``vocab``; raises on unknown characters."""
    thought_tokens = len(vocab.encode(p.thought)) if p.thought else 0
    return thought_tokens, len(vocab.encode(p.response))
