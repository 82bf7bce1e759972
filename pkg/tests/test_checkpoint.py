from __future__ import annotations

import numpy as np
import pytest

from conftest import random_params
from rlmtkit.checkpoint import HEADER, Checkpoint, dumps, load_checkpoint, loads, save_checkpoint
from rlmtkit.errors import CheckpointError, VersionError


def _ckpt(rng):
    return Checkpoint(random_params(rng), {"algorithm": "grpo", "seed": 3}, step=7, rng_seed=3, rng_counter=7)


def test_round_trip_bit_exact(tmp_path, rng):
    c = _ckpt(rng)
    path = str(tmp_path / "c.txt")
    save_checkpoint(path, c)
    back = load_checkpoint(path)
    assert np.array_equal(back.params.flatten(), c.params.flatten())
    assert back.vocab == c.vocab
    assert (back.config, back.step, back.rng_seed, back.rng_counter) == (c.config, 7, 3, 7)
    assert dumps(back) == dumps(c)


def test_header_first_line(rng):
    assert dumps(_ckpt(rng)).split("\n")[0] == HEADER


def test_truncated(rng):
    text = dumps(_ckpt(rng))
    lines = text.split("\n")
    for cut in (1, 3, len(lines) // 2, len(lines) - 2):
        with pytest.raises(CheckpointError):
            loads("\n".join(lines[:cut]))


def test_version_mismatch(rng):
    text = dumps(_ckpt(rng)).replace("RLMTKIT-CKPT v1", "RLMTKIT-CKPT v9", 1)
    with pytest.raises(VersionError, match="v9"):
        loads(text)
    with pytest.raises(CheckpointError, match="not an rlmtkit"):
        loads("hello\n")


def test_dimension_mismatch(rng):
    c = _ckpt(rng)
    c.params.output_bias = c.params.output_bias[:-1]
    with pytest.raises(CheckpointError, match="inconsistent"):
        loads(dumps(c))


def test_non_finite_rejected(rng):
    c = _ckpt(rng)
    c.params.hidden[0, 0] = np.nan
    with pytest.raises(CheckpointError, match="non-finite"):
        loads(dumps(c))


def test_trailing_and_garbage(rng):
    text = dumps(_ckpt(rng))
    with pytest.raises(CheckpointError, match="trailing"):
        loads(text + "extra\n")
    with pytest.raises(CheckpointError, match="non-numeric"):
        lines = text.split("\n")
        row = lines.index(next(ln for ln in lines if ln.startswith("hidden "))) + 1
        lines[row] = "x" + lines[row][lines[row].index(" "):]
        loads("\n".join(lines))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="no such file"):
        load_checkpoint(str(tmp_path / "nope"))
