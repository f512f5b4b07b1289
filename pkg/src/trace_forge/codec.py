"""Parsing and serialization of tagged reasoning responses.

Responses interleave <reasoning>, <print>, <input>, and <answer> blocks. Tags
are matched case-sensitively, non-nested, first-match; text outside tags is
ignored. Payloads are trimmed at both ends only.
"""

from __future__ import annotations

import re

from .model import (
    TASK_INPUT,
    TASK_KINDS,
    TASK_OUTPUT,
    Block,
    ExecutionTrace,
    MalformedResponse,
    Trajectory,
)

_BLOCK_RE = re.compile(r"<(reasoning|print|input|answer)>(.*?)</\1>", re.DOTALL)
_OPEN_RE = re.compile(r"<(reasoning|print|input|answer)>")


class UnbalancedTags(ValueError):
    """An opening tag has no matching close."""


class ShapeError(ValueError):
    """Blocks are balanced but violate the task's required structure."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


def parse(text: str, task_kind: str) -> Trajectory:
    """Parse a response into a Trajectory, validating its shape for the task.

    Raises UnbalancedTags or ShapeError; use parse_or_malformed for the total
    variant reward scoring relies on.
    """
    if task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {task_kind!r}")
    blocks = _extract_blocks(text)
    _validate_shape(blocks, task_kind)
    return Trajectory(blocks=blocks)


def parse_or_malformed(text: str, task_kind: str) -> Trajectory | MalformedResponse:
    """Total parse: structural failures come back as a malformed wrapper so the
    reward engine can score them zero instead of crashing."""
    try:
        return parse(text, task_kind)
    except UnbalancedTags as exc:
        return MalformedResponse(reason=f"unbalanced tags: {exc}")
    except ShapeError as exc:
        blocks = _extract_blocks(text)
        return MalformedResponse(reason=exc.reason, blocks=blocks)


def _extract_blocks(text: str) -> tuple[Block, ...]:
    blocks: list[Block] = []
    remainder: list[str] = []
    cursor = 0
    for match in _BLOCK_RE.finditer(text):
        remainder.append(text[cursor : match.start()])
        blocks.append(Block(tag=match.group(1), text=match.group(2).strip()))
        cursor = match.end()
    remainder.append(text[cursor:])
    stray = _OPEN_RE.search("".join(remainder))
    if stray:
        raise UnbalancedTags(f"<{stray.group(1)}> is never closed")
    return tuple(blocks)


def _validate_shape(blocks: tuple[Block, ...], task_kind: str) -> None:
    tags = [b.tag for b in blocks]
    if tags.count("answer") == 0:
        raise ShapeError("missing answer block")
    if tags.count("answer") > 1:
        raise ShapeError("multiple answer blocks")
    if tags[-1] != "answer":
        raise ShapeError("answer block is not last")

    pos = 0
    if task_kind == TASK_INPUT:
        if tags[:2] != ["reasoning", "input"]:
            raise ShapeError("input task must open with a reasoning/input pair")
        pos = 2
    elif "input" in tags:
        raise ShapeError("output task carries an input block")

    body = tags[pos:]
    # (reasoning, print)^n then (reasoning, answer)
    if len(body) % 2 != 0:
        raise ShapeError("blocks do not pair into reasoning/prediction cycles")
    for i in range(0, len(body), 2):
        if body[i] != "reasoning":
            raise ShapeError(f"expected reasoning at block {pos + i}, got {body[i]}")
        want = "answer" if i == len(body) - 2 else "print"
        if body[i + 1] != want:
            raise ShapeError(f"expected {want} at block {pos + i + 1}, got {body[i + 1]}")


def serialize_target(
    trace: ExecutionTrace,
    target: str,
    task_kind: str,
    gt_input: str | None = None,
) -> str:
    """Emit the ground-truth supervision skeleton for a trace.

    Print payloads are exactly `name: value` per trace event in order; the
    answer payload is the target; input tasks lead with the true input.
    Reasoning blocks are left as empty placeholders for downstream tooling.
    parse() on the result recovers the same payloads.
    """
    if task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {task_kind!r}")
    parts: list[str] = []

    def block(tag: str, payload: str) -> None:
        parts.append(f"<{tag}>\n{payload}\n</{tag}>" if payload else f"<{tag}>\n</{tag}>")

    if task_kind == TASK_INPUT:
        if gt_input is None:
            raise ValueError("input tasks require gt_input")
        block("reasoning", "")
        block("input", gt_input)
    for name, value in trace.events:
        block("reasoning", "")
        block("print", f"{name}: {value}")
    block("reasoning", "")
    block("answer", target)
    return "\n\n".join(parts) + "\n"


def extract_print_pairs(t: Trajectory) -> list[tuple[str, str]]:
    """Split each print payload at the first ': ' into (name, value).

    Payloads without the separator, or with an empty name, come back as
    ("", payload): the empty name marks them ill-formed.
    """
    pairs: list[tuple[str, str]] = []
    for payload in t.predicted_states:
        name, sep, value = payload.partition(": ")
        if not sep or not name:
            pairs.append(("", payload))
        else:
            pairs.append((name, value))
    return pairs
