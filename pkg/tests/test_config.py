from __future__ import annotations

import pytest

from rlmtkit.chatproto import TemplateKind
from rlmtkit.config import (
    COMPLETION_TOKEN_CEILING,
    PROMPT_TOKEN_CEILING,
    Algorithm,
    Mode,
    TrainConfig,
    load_config,
    parse_config_text,
)
from rlmtkit.errors import DataError, InvalidInputError


def test_reference_defaults():
    c = TrainConfig()
    assert c.actor_lr == 1e-6
    assert c.critic_lr == 1e-5
    assert c.sft_lr == 4e-6
    assert c.dpo_lr == 3e-7
    assert c.batch_size == 64
    assert c.epochs == 2
    assert c.samples_per_prompt == 8
    assert c.kl_coefficient == 0.001
    assert c.dpo_beta == 0.1
    assert c.epsilon == 0.2
    assert c.temperature == 0.7
    assert (PROMPT_TOKEN_CEILING, COMPLETION_TOKEN_CEILING) == (1024, 4096)


def test_kind_resolution():
    assert TrainConfig().kind is TemplateKind.WARMSTART_THINK
    assert TrainConfig(mode="zero", thinking=False).kind is TemplateKind.ZERO_PLAIN
    assert TrainConfig(template="zero-think", mode="zero").kind is TemplateKind.ZERO_THINK


def test_incompatible_template():
    with pytest.raises(InvalidInputError, match="incompatible"):
        TrainConfig(template="zero-think", mode="warmstart")
    with pytest.raises(InvalidInputError, match="incompatible"):
        TrainConfig(template="warmstart-plain", thinking=True)


@pytest.mark.parametrize("change", [
    {"actor_lr": 0.0}, {"batch_size": 0}, {"steps": -1},
    {"max_completion_tokens": 4097}, {"max_prompt_tokens": 1025},
    {"reward": "magic"}, {"length_bonus": -1.0}, {"epsilon": -0.1},
])
def test_invalid_values(change):
    with pytest.raises(InvalidInputError):
        TrainConfig(**change)


def test_text_round_trip():
    c = TrainConfig(algorithm="ppo", mode="zero", thinking=False, actor_lr=0.1 + 0.2, seed=9)
    back = TrainConfig.from_dict(parse_config_text(c.to_text()))
    assert back == c
    assert back.algorithm is Algorithm.PPO and back.mode is Mode.ZERO


def test_parse_errors_carry_line_numbers():
    with pytest.raises(DataError, match=r"cfg:3:"):
        parse_config_text("a = 1\n# note\noops\n", "cfg")
    with pytest.raises(DataError, match=r"cfg:2: duplicate"):
        parse_config_text("a = 1\na = 2\n", "cfg")
    assert parse_config_text("a = 1 # tail\n\n b=x=y ") == {"a": "1", "b": "x=y"}


def test_unknown_key_and_bad_value():
    with pytest.raises(InvalidInputError, match="unknown config key"):
        TrainConfig.from_dict({"learning_rate": "1"})
    with pytest.raises(InvalidInputError, match="bad value"):
        TrainConfig.from_dict({"steps": "many"})
    with pytest.raises(InvalidInputError, match="bad value"):
        TrainConfig.from_dict({"thinking": "maybe"})


def test_load_config(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("steps = 5\nthinking = no\n")
    c = load_config(str(path), seed=3, dim=None)
    assert (c.steps, c.thinking, c.seed, c.dim) == (5, False, 3, 16)
    path.write_text("stepz = 5\n")
    with pytest.raises(DataError, match=str(path)):
        load_config(str(path))
    with pytest.raises(DataError):
        load_config(str(tmp_path / "none.txt"))
