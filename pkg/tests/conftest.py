from __future__ import annotations

import numpy as np
import pytest

from rlmtkit.policy import PolicyParams, Vocab, init_params


def small_vocab(n: int = 6) -> Vocab:
    return Vocab([chr(ord("a") + i) for i in range(n)])


def random_params(rng: np.random.Generator, n_symbols: int | None = None, dim: int | None = None,
                  scale: float = 0.8) -> PolicyParams:
    """Random params with O(1) weights so every gradient path is exercised."""
    n_symbols = n_symbols or int(rng.integers(3, 10))
    dim = dim or int(rng.integers(2, 6))
    p = init_params(small_vocab(n_symbols), dim, int(rng.integers(1 << 30)))
    for _, t in p.tensors():
        t[...] = rng.normal(0.0, scale, size=t.shape)
    return p


def random_tokens(rng: np.random.Generator, vocab: Vocab, lo: int, hi: int) -> list[int]:
    """Symbols plus EOS, never BOS or PAD."""
    n = int(rng.integers(lo, hi + 1))
    pool = list(range(len(vocab.symbols))) + [vocab.eos]
    return [int(x) for x in rng.choice(pool, size=n)]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
