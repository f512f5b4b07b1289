"""Line-number alignment for line-indexed benchmark queries.

Instrumentation inserts lines, so coverage/state/path queries that reference
original line numbers must be remapped through the program's line map before
evaluation. Output-prediction queries carry no line and pass through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .model import LineMap

TASK_CCP = "CCP"
TASK_PSP = "PSP"
TASK_EPP = "EPP"
TASK_OP = "OP"
LINE_TASKS = (TASK_CCP, TASK_PSP, TASK_EPP)
QUERY_TASKS = LINE_TASKS + (TASK_OP,)


class LineOutOfRange(ValueError):
    def __init__(self, line: int, index: int | None = None):
        self.line = line
        self.index = index
        at = "" if index is None else f" (query index {index})"
        super().__init__(f"line {line} is outside the map's original domain{at}")


@dataclass(frozen=True)
class LineQuery:
    task: str
    payload: str
    line: int | None = None

    def __post_init__(self) -> None:
        if self.task not in QUERY_TASKS:
            raise ValueError(f"unknown query task {self.task!r}")
        if self.task in LINE_TASKS and self.line is None:
            raise ValueError(f"{self.task} queries require a line")


def align(query: LineQuery, line_map: LineMap) -> LineQuery:
    """Remap the query's line into instrumented coordinates; OP queries pass
    through unchanged."""
    if query.task == TASK_OP:
        return query
    assert query.line is not None
    try:
        new_line = line_map.lookup(query.line)
    except KeyError:
        raise LineOutOfRange(query.line) from None
    return replace(query, line=new_line)


def align_file(queries: Sequence[LineQuery] | Iterable[LineQuery], line_map: LineMap) -> list[LineQuery]:
    """Elementwise align, order preserved; the first out-of-range line aborts
    with its index."""
    out: list[LineQuery] = []
    for index, query in enumerate(queries):
        try:
            out.append(align(query, line_map))
        except LineOutOfRange as exc:
            raise LineOutOfRange(exc.line, index) from None
    return out
