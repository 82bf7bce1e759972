"""Text checkpoint format.

::

    RLMTKIT-CKPT v1
    vocab ["0", "1", ...]
    config {"algorithm": "grpo", ...}
    embedding 16 8
    <16 lines of 8 floats>
    ...                      (one block per tensor, fixed order)
    step 120
    rng 0 120

Floats are written with 17 significant digits, which round-trips float64.
1-D tensors are stored as one row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from rlmtkit.errors import CheckpointError, VersionError
from rlmtkit.policy import TENSOR_NAMES, PolicyParams, Vocab

FORMAT = "RLMTKIT-CKPT"
VERSION = "v1"
HEADER = f"{FORMAT} {VERSION}"


@dataclass
class Checkpoint:
    params: PolicyParams
    config: dict[str, Any] = field(default_factory=dict)
    step: int = 0
    rng_seed: int = 0
    rng_counter: int = 0
    version: str = VERSION

    @property
    def vocab(self) -> Vocab:
        return self.params.vocab


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def dumps(ckpt: Checkpoint) -> str:
    p = ckpt.params
    lines = [HEADER, "vocab " + p.vocab.to_json(), "config " + json.dumps(ckpt.config, sort_keys=True)]
    for name, t in p.tensors():
        mat = t.reshape(-1, t.shape[-1]) if t.ndim == 2 else t.reshape(1, -1)
        lines.append(f"{name} {mat.shape[0]} {mat.shape[1]}")
        lines.extend(" ".join(_fmt(x) for x in row) for row in mat)
    lines.append(f"step {ckpt.step}")
    lines.append(f"rng {ckpt.rng_seed} {ckpt.rng_counter}")
    return "\n".join(lines) + "\n"


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps(ckpt))


def loads(text: str, path: str | None = None) -> Checkpoint:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    pos = 0

    def take(what: str) -> str:
        nonlocal pos
        if pos >= len(lines):
            raise CheckpointError(f"unexpected end of file, expected {what}", path, pos + 1)
        pos += 1
        return lines[pos - 1]

    head = take("header")
    parts = head.split()
    if len(parts) != 2 or parts[0] != FORMAT:
        raise CheckpointError("not an rlmtkit checkpoint", path, 1)
    if parts[1] != VERSION:
        raise VersionError(f"checkpoint version {parts[1]} is not supported (expected {VERSION})", path, 1)

    def keyed(key: str) -> str:
        line = take(key)
        if not line.startswith(key + " "):
            raise CheckpointError(f"expected '{key}' line", path, pos)
        return line[len(key) + 1:]

    try:
        vocab = Vocab.from_json(keyed("vocab"))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"bad vocab line: {e}", path, pos) from None
    try:
        config = json.loads(keyed("config"))
    except ValueError as e:
        raise CheckpointError(f"bad config line: {e}", path, pos) from None

    tensors: dict[str, np.ndarray] = {}
    for name in TENSOR_NAMES:
        header = take(f"tensor {name}").split()
        if len(header) != 3 or header[0] != name:
            raise CheckpointError(f"expected tensor header '{name} rows cols'", path, pos)
        try:
            rows, cols = int(header[1]), int(header[2])
        except ValueError:
            raise CheckpointError("tensor dimensions must be integers", path, pos) from None
        data = np.empty((rows, cols))
        for r in range(rows):
            vals = take(f"row {r} of {name}").split()
            if len(vals) != cols:
                raise CheckpointError(f"row of {name} has {len(vals)} values, expected {cols}", path, pos)
            try:
                data[r] = [float(v) for v in vals]
            except ValueError:
                raise CheckpointError(f"non-numeric value in {name}", path, pos) from None
        tensors[name] = data

    try:
        step = int(keyed("step"))
        seed, counter = (int(x) for x in keyed("rng").split())
    except ValueError:
        raise CheckpointError("bad step or rng line", path, pos) from None
    if pos != len(lines):
        raise CheckpointError("trailing content after rng line", path, pos + 1)

    one_d = {"hidden_bias", "output_bias", "value", "value_bias"}
    arrays = [tensors[n].reshape(-1) if n in one_d else tensors[n] for n in TENSOR_NAMES]
    params = PolicyParams(vocab, *arrays)
    try:
        params.check_shapes()
    except ValueError as e:
        raise CheckpointError(f"inconsistent dimensions: {e}", path) from None
    if not params.is_finite():
        raise CheckpointError("checkpoint contains non-finite values", path)
    return Checkpoint(params, config, step, seed, counter)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError:
        raise CheckpointError("no such file", path) from None
    except (OSError, UnicodeDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint: {e}", path) from None
    return loads(text, path)
