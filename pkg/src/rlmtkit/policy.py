"""Tiny autoregressive token policy with exact gradients.

Architecture, per prediction step with context ``c_0 .. c_j`` (``c_0`` = BOS)::

    x      = [mean_i E[c_i] ; E[c_j]]           (2d,)
    h      = tanh(x @ W_h + b_h)                 (d,)
    logits = h @ W_o + b_o                       (V,)
    value  = h @ w_v + b_v                       scalar

Everything is float64. Completions are scored conditioned on ``[BOS] + prompt``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from rlmtkit.errors import InvalidInputError

BOS = "<bos>"
EOS = "<eos>"
PAD = "<pad>"

DEFAULT_TEMPERATURE = 0.7
GREEDY_BELOW = 1e-6


class Vocab:
    """Bijective symbol/id map with reserved BOS, EOS, PAD at the end.

    Symbols are usually single characters, but multi-character symbols (the
    chat tags) are allowed and matched greedily, longest first.
    """

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise InvalidInputError("vocabulary symbols must be unique")
        if any(not s for s in symbols):
            raise InvalidInputError("vocabulary symbols must be non-empty")
        reserved = {BOS, EOS, PAD}
        if reserved & set(symbols):
            raise InvalidInputError("reserved symbol in vocabulary")
        self.symbols: tuple[str, ...] = tuple(symbols)
        self._ids = {s: i for i, s in enumerate(self.symbols)}
        self.bos = len(self.symbols)
        self.eos = self.bos + 1
        self.pad = self.bos + 2
        self._by_length = sorted({len(s) for s in self.symbols}, reverse=True)

    @classmethod
    def from_texts(cls, texts: Sequence[str], extra: Sequence[str] = ()) -> Vocab:
        """Characters of ``texts`` (sorted) followed by ``extra`` multi-char symbols."""
        chars: set[str] = set()
        for t in texts:
            for tag in extra:
                t = t.replace(tag, "")
            chars.update(t)
        return cls(sorted(chars) + [e for e in extra if e not in chars])

    def __len__(self) -> int:
        return len(self.symbols) + 3

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.symbols == other.symbols

    def __hash__(self) -> int:
        return hash(self.symbols)

    def __repr__(self) -> str:
        return f"Vocab({list(self.symbols)!r})"

    def id(self, symbol: str) -> int:
        return self._ids[symbol]

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        i = 0
        while i < len(text):
            for n in self._by_length:
                tok = self._ids.get(text[i:i + n])
                if tok is not None:
                    out.append(tok)
                    i += n
                    break
            else:
                raise InvalidInputError(f"character {text[i]!r} is not in the vocabulary")
        return out

    def decode(self, ids: Sequence[int]) -> str:
        """Reserved ids render as nothing; EOS is dropped."""
        n = len(self.symbols)
        return "".join(self.symbols[i] for i in ids if 0 <= i < n)

    def to_json(self) -> str:
        return json.dumps(list(self.symbols), ensure_ascii=True)

    @classmethod
    def from_json(cls, text: str) -> Vocab:
        return cls(json.loads(text))


TENSOR_NAMES = ("embedding", "hidden", "hidden_bias", "output", "output_bias", "value", "value_bias")


@dataclass
class PolicyParams:
    """Model tensors plus the vocabulary they index.

    Also used as the container for gradients, which share the layout.
    """

    vocab: Vocab
    embedding: np.ndarray  # (V, d)
    hidden: np.ndarray  # (2d, d)
    hidden_bias: np.ndarray  # (d,)
    output: np.ndarray  # (d, V)
    output_bias: np.ndarray  # (V,)
    value: np.ndarray  # (d,)
    value_bias: np.ndarray = field(default_factory=lambda: np.zeros(1))  # (1,)

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in TENSOR_NAMES:
            yield name, getattr(self, name)

    def copy(self) -> PolicyParams:
        return PolicyParams(self.vocab, *(t.copy() for _, t in self.tensors()))

    def zeros_like(self) -> PolicyParams:
        return PolicyParams(self.vocab, *(np.zeros_like(t) for _, t in self.tensors()))

    def add_(self, other: PolicyParams, scale: float = 1.0) -> PolicyParams:
        """In-place ``self += scale * other``."""
        for name, t in self.tensors():
            t += scale * getattr(other, name)
        return self

    def scaled(self, scale: float) -> PolicyParams:
        return PolicyParams(self.vocab, *(scale * t for _, t in self.tensors()))

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for _, t in self.tensors()])

    def with_flat(self, flat: np.ndarray) -> PolicyParams:
        out = self.copy()
        i = 0
        for _, t in out.tensors():
            t.ravel()[:] = flat[i:i + t.size]
            i += t.size
        if i != flat.size:
            raise InvalidInputError("flat vector length does not match parameters")
        return out

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for _, t in self.tensors())

    def check_shapes(self) -> None:
        v, d = len(self.vocab), self.dim
        expected = {
            "embedding": (v, d), "hidden": (2 * d, d), "hidden_bias": (d,),
            "output": (d, v), "output_bias": (v,), "value": (d,), "value_bias": (1,),
        }
        for name, t in self.tensors():
            if t.shape != expected[name]:
                raise InvalidInputError(f"{name} has shape {t.shape}, expected {expected[name]}")


@dataclass(frozen=True)
class ReferenceParams:
    """Frozen snapshot of a policy; its arrays are read-only."""

    params: PolicyParams

    @property
    def vocab(self) -> Vocab:
        return self.params.vocab


def init_params(vocab: Vocab, dim: int, seed: int, scale: float = 0.05) -> PolicyParams:
    """Uniform(-scale, scale) initialisation drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    v = len(vocab)

    def u(*shape: int) -> np.ndarray:
        return rng.uniform(-scale, scale, size=shape)

    return PolicyParams(
        vocab, u(v, dim), u(2 * dim, dim), u(dim), u(dim, v), u(v), u(dim), u(1),
    )


def uniform_params(vocab: Vocab, dim: int, seed: int = 0) -> PolicyParams:
    """Random trunk, zero output layer and value head: uniform next-token distribution."""
    p = init_params(vocab, dim, seed)
    p.output[:] = 0.0
    p.output_bias[:] = 0.0
    p.value[:] = 0.0
    p.value_bias[:] = 0.0
    return p


def snapshot_reference(params: PolicyParams) -> ReferenceParams:
    if not params.is_finite():
        raise InvalidInputError("cannot snapshot non-finite parameters")
    frozen = params.copy()
    for _, t in frozen.tensors():
        t.flags.writeable = False
    return ReferenceParams(frozen)


def _params(p: PolicyParams | ReferenceParams) -> PolicyParams:
    return p.params if isinstance(p, ReferenceParams) else p


def _check_ids(vocab: Vocab, tokens: Sequence[int]) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= len(vocab)):
        raise InvalidInputError("token id outside the vocabulary")
    return arr


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class Trace:
    """Forward activations for every completion position of one sequence."""

    full: np.ndarray  # token ids, [BOS] + prompt + completion
    start: int  # index in ``full`` of the first completion token
    x: np.ndarray  # (n, 2d)
    h: np.ndarray  # (n, d)
    logits: np.ndarray  # (n, V)
    logp: np.ndarray  # (n, V) log-softmax
    values: np.ndarray  # (n,)

    @property
    def targets(self) -> np.ndarray:
        return self.full[self.start:]

    @property
    def token_logp(self) -> np.ndarray:
        return self.logp[np.arange(len(self.targets)), self.targets]

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp)


def _hidden(params: PolicyParams, x: np.ndarray) -> np.ndarray:
    return np.tanh(x @ params.hidden + params.hidden_bias)


def _context_features(params: PolicyParams, full: np.ndarray) -> np.ndarray:
    """Feature rows for every prefix ``full[:j+1]``, j = 0..len-1."""
    emb = params.embedding[full]
    mean = np.cumsum(emb, axis=0) / np.arange(1, len(full) + 1)[:, None]
    return np.concatenate([mean, emb], axis=1)


def trace(params: PolicyParams | ReferenceParams, prompt: Sequence[int], completion: Sequence[int]) -> Trace:
    params = _params(params)
    vocab = params.vocab
    if len(completion) == 0:
        raise InvalidInputError("completion must be non-empty")
    p = _check_ids(vocab, prompt)
    c = _check_ids(vocab, completion)
    full = np.concatenate([[vocab.bos], p, c]).astype(np.int64)
    start = 1 + len(p)
    x = _context_features(params, full[:-1])[start - 1:]
    h = _hidden(params, x)
    logits = h @ params.output + params.output_bias
    values = h @ params.value + params.value_bias[0]
    return Trace(full, start, x, h, logits, _log_softmax(logits), values)


def backward(
    params: PolicyParams,
    tr: Trace,
    dlogits: np.ndarray | None = None,
    dvalues: np.ndarray | None = None,
    grad: PolicyParams | None = None,
) -> PolicyParams:
    """Accumulate d(loss)/d(params) given d(loss)/d(logits) and d(loss)/d(values).

    ``dlogits`` is (n, V) and ``dvalues`` is (n,), aligned with ``tr``'s
    completion positions. Either may be omitted.
    """
    if grad is None:
        grad = params.zeros_like()
    n, d = tr.h.shape
    dh = np.zeros((n, d))
    if dlogits is not None:
        grad.output += tr.h.T @ dlogits
        grad.output_bias += dlogits.sum(axis=0)
        dh += dlogits @ params.output.T
    if dvalues is not None:
        grad.value += tr.h.T @ dvalues
        grad.value_bias[0] += dvalues.sum()
        dh += np.outer(dvalues, params.value)
    dpre = dh * (1.0 - tr.h**2)
    grad.hidden += tr.x.T @ dpre
    grad.hidden_bias += dpre.sum(axis=0)
    dx = dpre @ params.hidden.T
    dmean, dlast = dx[:, :d], dx[:, d:]

    # Position j (context end index in ``full``) averages embeddings 0..j.
    ctx_end = np.arange(tr.start - 1, tr.start - 1 + n)
    per_ctx = np.zeros((tr.start - 1 + n, d))
    per_ctx[ctx_end] = dmean / (ctx_end + 1)[:, None]
    spread = np.cumsum(per_ctx[::-1], axis=0)[::-1]
    np.add.at(grad.embedding, tr.full[: len(spread)], spread)
    np.add.at(grad.embedding, tr.full[ctx_end], dlast)
    return grad


def forward_dist(params: PolicyParams | ReferenceParams, context: Sequence[int]) -> np.ndarray:
    """Next-token distribution after ``context`` (which should start with BOS)."""
    params = _params(params)
    if len(context) == 0:
        raise InvalidInputError("context must be non-empty")
    ctx = _check_ids(params.vocab, context)
    x = _context_features(params, ctx)[-1]
    return _softmax(_hidden(params, x) @ params.output + params.output_bias)


def value_estimate(params: PolicyParams | ReferenceParams, prefix: Sequence[int]) -> float:
    params = _params(params)
    if len(prefix) == 0:
        raise InvalidInputError("prefix must be non-empty")
    ctx = _check_ids(params.vocab, prefix)
    h = _hidden(params, _context_features(params, ctx)[-1])
    return float(h @ params.value + params.value_bias[0])


@dataclass(frozen=True)
class SequenceLogProb:
    per_token: np.ndarray
    total: float


def sequence_logprob(
    params: PolicyParams | ReferenceParams, prompt: Sequence[int], completion: Sequence[int]
) -> SequenceLogProb:
    lp = trace(params, prompt, completion).token_logp
    return SequenceLogProb(lp, float(lp.sum()))


def logprob_grad(params: PolicyParams, prompt: Sequence[int], completion: Sequence[int]) -> PolicyParams:
    """Gradient of ``log pi(completion | prompt)`` w.r.t. every tensor."""
    tr = trace(params, prompt, completion)
    dlogits = -tr.probs
    dlogits[np.arange(len(tr.targets)), tr.targets] += 1.0
    return backward(params, tr, dlogits=dlogits)


def rollout_rng(*key: int) -> np.random.Generator:
    """Independent generator for one rollout, keyed by (seed, counters...)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key])))


def sample_batch(
    params: PolicyParams | ReferenceParams,
    prompts: Sequence[Sequence[int]],
    seeds: Sequence[int | Sequence[int]],
    temperature: float = DEFAULT_TEMPERATURE,
    max_len: int = 256,
) -> list[list[int]]:
    """Sample one completion per prompt; row ``i`` depends only on ``seeds[i]``.

    Each completion ends with EOS unless it hit ``max_len``.
    """
    params = _params(params)
    vocab = params.vocab
    if temperature <= 0:
        raise InvalidInputError("temperature must be positive")
    if max_len < 1:
        raise InvalidInputError("max_len must be >= 1")
    b = len(prompts)
    if b == 0:
        return []
    greedy = temperature < GREEDY_BELOW
    uniforms = np.stack([
        rollout_rng(*(s if isinstance(s, (tuple, list)) else (s,))).random(max_len) for s in seeds
    ])

    sums = np.zeros((b, params.dim))
    lens = np.zeros(b)
    last = np.zeros(b, dtype=np.int64)
    for i, pr in enumerate(prompts):
        ctx = np.concatenate([[vocab.bos], _check_ids(vocab, pr)]).astype(np.int64)
        sums[i] = params.embedding[ctx].sum(axis=0)
        lens[i] = len(ctx)
        last[i] = ctx[-1]

    out: list[list[int]] = [[] for _ in range(b)]
    alive = np.ones(b, dtype=bool)
    for t in range(max_len):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        x = np.concatenate([sums[rows] / lens[rows, None], params.embedding[last[rows]]], axis=1)
        logits = _hidden(params, x) @ params.output + params.output_bias
        if greedy:
            tok = logits.argmax(axis=1)
        else:
            cdf = np.cumsum(_softmax(logits / temperature), axis=1)
            u = uniforms[rows, t] * cdf[:, -1]
            tok = np.minimum((cdf <= u[:, None]).sum(axis=1), len(vocab) - 1)
        for r, k in zip(rows, tok):
            out[r].append(int(k))
        sums[rows] += params.embedding[tok]
        lens[rows] += 1
        last[rows] = tok
        alive[rows[tok == vocab.eos]] = False
    return out


def sample_sequence(
    params: PolicyParams | ReferenceParams,
    prompt: Sequence[int],
    temperature: float = DEFAULT_TEMPERATURE,
    max_len: int = 256,
    seed: int = 0,
) -> list[int]:
    return sample_batch(params, [prompt], [seed], temperature, max_len)[0]

