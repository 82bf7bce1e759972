"""Training configuration and its flat ``key = value`` file format.

Defaults are full-scale reference hyperparameters except the two length
limits, which are desk-scale (1024 / 4096 remain the ceilings). Learning
rates at the full-scale values are far too small for the toy policy;
toy runs override them.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, fields
from typing import Any

from rlmtkit.algorithms import ClipKlConfig, DpoConfig, GrpoConfig, PpoConfig
from rlmtkit.chatproto import TemplateKind
from rlmtkit.errors import DataError, InvalidInputError

PROMPT_TOKEN_CEILING = 1024
COMPLETION_TOKEN_CEILING = 4096


class Algorithm(str, enum.Enum):
    SFT = "sft"
    DPO = "dpo"
    PPO = "ppo"
    GRPO = "grpo"


class Mode(str, enum.Enum):
    WARMSTART = "warmstart"
    ZERO = "zero"


@dataclass
class TrainConfig:
    algorithm: Algorithm = Algorithm.GRPO
    mode: Mode = Mode.WARMSTART
    thinking: bool = True
    # None means "derive from mode and thinking".
    template: TemplateKind | None = None

    # optimisation
    actor_lr: float = 1e-6
    critic_lr: float = 1e-5
    sft_lr: float = 4e-6
    dpo_lr: float = 3e-7
    # Recorded for fidelity only; updates are plain gradient descent.
    adam_betas: str = "0.9,0.95"
    batch_size: int = 64
    sft_batch_size: int = 16
    dpo_batch_size: int = 128
    samples_per_prompt: int = 8
    steps: int = 120
    epochs: int = 2

    # lengths
    max_prompt_tokens: int = 64
    max_completion_tokens: int = 256
    temperature: float = 0.7

    # objectives
    epsilon: float = 0.2
    kl_coefficient: float = 0.001
    dpo_beta: float = 0.1
    gamma: float = 1.0
    gae_lambda: float = 1.0

    # rewards
    reward: str = "verifier"
    reward_model: str = ""
    length_bonus: float = 0.0
    length_cap: int = 50

    # model and run
    dim: int = 16
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        self.algorithm = Algorithm(self.algorithm)
        self.mode = Mode(self.mode)
        if self.template is not None:
            self.template = TemplateKind(self.template)
        self.validate()

    @property
    def kind(self) -> TemplateKind:
        if self.template is not None:
            return self.template
        return TemplateKind.resolve(self.thinking, self.mode is Mode.ZERO)

    def validate(self) -> None:
        for name in ("actor_lr", "critic_lr", "sft_lr", "dpo_lr", "temperature"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        for name in ("batch_size", "sft_batch_size", "dpo_batch_size", "samples_per_prompt",
                     "epochs", "max_prompt_tokens", "max_completion_tokens", "dim", "threads"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.steps < 0:
            raise InvalidInputError("steps must be >= 0")
        if self.max_prompt_tokens > PROMPT_TOKEN_CEILING:
            raise InvalidInputError(f"max_prompt_tokens exceeds {PROMPT_TOKEN_CEILING}")
        if self.max_completion_tokens > COMPLETION_TOKEN_CEILING:
            raise InvalidInputError(f"max_completion_tokens exceeds {COMPLETION_TOKEN_CEILING}")
        if self.template is not None:
            if self.thinking != self.template.thinking:
                raise InvalidInputError(
                    f"thinking={self.thinking} is incompatible with template {self.template.value}")
            if (self.mode is Mode.ZERO) != self.template.zero:
                raise InvalidInputError(
                    f"mode {self.mode.value} is incompatible with template {self.template.value}")
        if self.reward not in ("verifier", "model"):
            raise InvalidInputError("reward must be 'verifier' or 'model'")
        if self.length_bonus < 0 or self.length_cap < 0:
            raise InvalidInputError("length bonus and cap must be >= 0")
        # raises on bad values
        self.grpo_config()
        self.ppo_config()
        self.dpo_config()

    def clip_kl(self) -> ClipKlConfig:
        return ClipKlConfig(self.epsilon, self.kl_coefficient)

    def grpo_config(self) -> GrpoConfig:
        return GrpoConfig(self.samples_per_prompt, self.clip_kl())

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(self.gamma, self.gae_lambda, self.clip_kl())

    def dpo_config(self) -> DpoConfig:
        return DpoConfig(self.dpo_beta)

    def replace(self, **changes: Any) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, enum.Enum) else v
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if v is None:
                v = "auto"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> TrainConfig:
        known = {f.name: f for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, value in raw.items():
            if key not in known:
                raise InvalidInputError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, cls.__dataclass_fields__[key].default, value)
        return cls(**kwargs)


def _coerce(key: str, default: Any, value: Any) -> Any:
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if key == "template":
            return None if text in ("", "auto", "none") else TemplateKind(text)
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int) and not isinstance(default, enum.Enum):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise InvalidInputError(f"bad value {value!r} for config key {key!r}") from None
    return text


def parse_config_text(text: str, path: str | None = None) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError("expected 'key = value'", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise DataError("empty key", path, lineno)
        if key in out:
            raise DataError(f"duplicate key {key!r}", path, lineno)
        out[key] = value
    return out


def load_config(path: str, **overrides: Any) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw: dict[str, Any] = parse_config_text(f.read(), path)
    except OSError as e:
        raise DataError(f"cannot read config: {e.strerror}", path) from None
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(raw)
    except InvalidInputError as e:
        raise DataError(str(e), path) from None
