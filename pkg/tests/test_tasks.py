from __future__ import annotations

import pytest

from rlmtkit.chatproto import TemplateKind, render_completion, render_prompt
from rlmtkit.tasks import DIGITS, sort_demos, sort_preferences, sort_tasks, task_vocab


def test_sort_tasks_shape_and_determinism():
    tasks = sort_tasks(200, 3)
    assert tasks == sort_tasks(200, 3)
    assert tasks != sort_tasks(200, 4)
    for t in tasks:
        assert 3 <= len(t.prompt) <= 4
        assert len(set(t.prompt)) == len(t.prompt)
        assert t.gold == "".join(sorted(t.prompt))


def test_format_demos_do_not_teach_sorting():
    tasks = sort_tasks(50, 1)
    for t, d in zip(tasks, sort_demos(tasks, 2)):
        assert d.prompt == t.prompt
        assert sorted(d.response) == sorted(t.prompt)
        assert 1 <= len(d.thought) <= len(t.prompt)
        assert set(d.thought) <= set(t.prompt)


def test_oracle_demos():
    tasks = sort_tasks(5, 1)
    assert all(d.response == t.gold for t, d in zip(tasks, sort_demos(tasks, 0, "oracle")))
    with pytest.raises(ValueError):
        sort_demos(tasks, 0, "other")


def test_preferences_cycle_flaws():
    tasks = sort_tasks(40, 7)
    prefs = sort_preferences(tasks, 8)
    assert len(prefs) == 40
    for i, (prompt, chosen, rejected) in enumerate(prefs):
        assert chosen == "".join(sorted(prompt))
        assert rejected != chosen
        kind = i % 4
        if kind == 0:
            assert sorted(rejected) == sorted(chosen)
        elif kind == 1:
            assert len(rejected) == len(chosen) and len(set(rejected)) == len(chosen) - 1
        elif kind == 2:
            assert len(rejected) == len(chosen) + 1 and set(chosen) < set(rejected)
        else:
            assert len(rejected) == len(chosen) - 1 and set(rejected) < set(chosen)


@pytest.mark.parametrize("kind", list(TemplateKind))
def test_task_vocab_covers_rendered_text(kind):
    v = task_vocab([DIGITS], kind)
    text = render_prompt(kind, "3120") + render_completion(kind, "12" if kind.thinking else None, "0123")
    assert v.decode(v.encode(text)) == text
