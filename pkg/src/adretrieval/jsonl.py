"""Line-delimited JSON helpers shared by every file format in the package.

One JSON object per line, UTF-8, LF endings.  Writers emit canonical
lines (sorted keys, compact separators) so identical data always
produces identical bytes; readers raise ParseError with the offending
line number.
"""

from __future__ import annotations

import json
from typing import Any, Iterable, Iterator


class ParseError(ValueError):
    """A malformed line in a line-delimited JSON file."""

    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no
        self.message = message


def dump_json_line(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_json_lines(path: str, objs: Iterable[Any]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for obj in objs:
            fh.write(dump_json_line(obj))
            fh.write("\n")


def iter_json_lines(path: str) -> Iterator[tuple[int, dict]]:
    """Yield (line_no, object) pairs; blank lines are skipped."""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ParseError(path, line_no, "expected a JSON object")
            yield line_no, obj


def expect_fields(path: str, line_no: int, obj: dict, fields: frozenset[str]) -> None:
    """Require the object's keys to equal `fields` exactly."""
    missing = fields - obj.keys()
    if missing:
        raise ParseError(path, line_no, f"missing field {sorted(missing)[0]!r}")
    unknown = obj.keys() - fields
    if unknown:
        raise ParseError(path, line_no, f"unknown field {sorted(unknown)[0]!r}")
