"""Line-delimited, tab-separated dataset files.

One record per line, UTF-8. Fields may not contain tabs. A literal newline
inside a field is written as ``\\n`` and a backslash as ``\\\\``. Blank lines
are skipped.

    prompts       prompt [TAB gold]
    demos         prompt TAB thought TAB response   (thought may be empty)
    preferences   prompt TAB chosen TAB rejected
    thoughts      prompt TAB thought
"""

from __future__ import annotations

from typing import Iterable, Sequence

from rlmtkit.errors import DataError
from rlmtkit.rewards import Task
from rlmtkit.tasks import Demo


def escape_field(text: str) -> str:
    if "\t" in text:
        raise DataError("tab characters are not allowed in dataset fields")
    return text.replace("\\", "\\\\").replace("\n", "\\n")


def unescape_field(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        c = text[i]
        if c == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            if nxt == "n":
                out.append("\n")
                i += 2
                continue
            if nxt == "\\":
                out.append("\\")
                i += 2
                continue
        out.append(c)
        i += 1
    return "".join(out)


def read_records(path: str, min_fields: int, max_fields: int) -> list[tuple[int, list[str]]]:
    """Return ``(line number, fields)`` for every non-blank line."""
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().split("\n")
    except FileNotFoundError:
        raise DataError("no such file", path) from None
    except OSError as e:
        raise DataError(f"cannot read: {e.strerror}", path) from None
    except UnicodeDecodeError:
        raise DataError("file is not valid UTF-8", path) from None
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if not min_fields <= len(parts) <= max_fields:
            want = str(min_fields) if min_fields == max_fields else f"{min_fields}-{max_fields}"
            raise DataError(f"expected {want} tab-separated fields, got {len(parts)}", path, lineno)
        out.append((lineno, [unescape_field(p) for p in parts]))
    return out


def write_records(path: str, rows: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write("\t".join(escape_field(x) for x in row) + "\n")


def read_prompts(path: str) -> list[Task]:
    tasks = []
    for lineno, fields in read_records(path, 1, 2):
        if not fields[0]:
            raise DataError("empty prompt", path, lineno)
        tasks.append(Task(fields[0], fields[1] if len(fields) > 1 else None))
    return tasks


def write_prompts(path: str, tasks: Iterable[Task]) -> None:
    write_records(path, ([t.prompt] if t.gold is None else [t.prompt, t.gold] for t in tasks))


def read_demos(path: str) -> list[Demo]:
    demos = []
    for lineno, fields in read_records(path, 3, 3):
        if not fields[0]:
            raise DataError("empty prompt", path, lineno)
        demos.append(Demo(*fields))
    return demos


def write_demos(path: str, demos: Iterable[Demo]) -> None:
    write_records(path, ([d.prompt, d.thought, d.response] for d in demos))


def read_preferences(path: str) -> list[tuple[str, str, str]]:
    return [(f[0], f[1], f[2]) for _, f in read_records(path, 3, 3)]


def write_preferences(path: str, pairs: Iterable[tuple[str, str, str]]) -> None:
    write_records(path, pairs)


def read_thoughts(path: str) -> list[tuple[str, str]]:
    return [(f[0], f[1]) for _, f in read_records(path, 2, 2)]


def write_thoughts(path: str, rows: Iterable[tuple[str, str]]) -> None:
    write_records(path, rows)
