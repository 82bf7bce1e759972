from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rlmtkit.datasets import (
    escape_field,
    read_demos,
    read_preferences,
    read_prompts,
    read_thoughts,
    unescape_field,
    write_demos,
    write_preferences,
    write_prompts,
    write_thoughts,
)
from rlmtkit.errors import DataError
from rlmtkit.rewards import Task
from rlmtkit.tasks import Demo

_field = st.text(alphabet=st.characters(blacklist_characters="\t", blacklist_categories=("Cs",)), max_size=20)


@given(_field)
def test_escape_round_trip(text):
    assert unescape_field(escape_field(text)) == text
    assert "\n" not in escape_field(text)


def test_tab_rejected():
    with pytest.raises(DataError):
        escape_field("a\tb")


def test_file_round_trips(tmp_path):
    p = str(tmp_path / "x.tsv")
    tasks = [Task("312", "123"), Task("a\\b\nc")]
    write_prompts(p, tasks)
    assert read_prompts(p) == tasks
    demos = [Demo("1", "", "1"), Demo("21", "t\nx", "12")]
    write_demos(p, demos)
    assert read_demos(p) == demos
    prefs = [("21", "12", "21")]
    write_preferences(p, prefs)
    assert read_preferences(p) == prefs
    write_thoughts(p, [("q", "plan")])
    assert read_thoughts(p) == [("q", "plan")]


def test_blank_lines_skipped(tmp_path):
    p = tmp_path / "p.tsv"
    p.write_text("\n312\t123\n\n  \n21\n")
    assert read_prompts(str(p)) == [Task("312", "123"), Task("21")]


def test_errors_name_path_and_line(tmp_path):
    p = tmp_path / "d.tsv"
    p.write_text("1\t\t1\n2\t2\n")
    with pytest.raises(DataError, match=rf"{p}:2: expected 3"):
        read_demos(str(p))
    p.write_text("\t123\n")
    with pytest.raises(DataError, match=rf"{p}:1: empty prompt"):
        read_prompts(str(p))
    with pytest.raises(DataError, match="no such file"):
        read_prompts(str(tmp_path / "missing.tsv"))
    p.write_bytes(b"\xff\xfe\n")
    with pytest.raises(DataError, match="UTF-8"):
        read_prompts(str(p))
