"""Shared domain types and the JSONL record schemas used across the toolchain.

All types are immutable value objects; records are one JSON object per line,
UTF-8. Field names in the record schemas are part of the wire contract:

    source_program {id, entry_name, source_text}
    instrumented   {origin_id, source_text, anchors:[{name,line,kind}], line_map:[[orig,instr],...]}
    trace          {origin_id, events:[[name,value],...], final_value}
    trajectory     {instance_id, blocks:[{tag,text},...]}
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Any, Iterable, Iterator

IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

ANCHOR_KIND_ASSIGNMENT = "assignment"
ANCHOR_KIND_POST_LOOP = "post_loop"
ANCHOR_KIND_RETURN = "return_val"
ANCHOR_KINDS = (ANCHOR_KIND_ASSIGNMENT, ANCHOR_KIND_POST_LOOP, ANCHOR_KIND_RETURN)

TASK_OUTPUT = "output_prediction"
TASK_INPUT = "input_prediction"
TASK_KINDS = (TASK_OUTPUT, TASK_INPUT)

BLOCK_TAGS = ("reasoning", "print", "input", "answer")


class SchemaError(ValueError):
    """A JSONL record does not match its declared schema."""


@dataclass(frozen=True)
class SourceProgram:
    """A raw subject-language program with a designated entry function."""

    id: str
    entry_name: str
    source_text: str


@dataclass(frozen=True)
class AnchorDecl:
    """One anchor print: the label it emits, its line, and why it was inserted."""

    name: str
    line: int
    kind: str

    def __post_init__(self) -> None:
        if not IDENT_RE.match(self.name):
            raise ValueError(f"anchor name {self.name!r} is not an identifier")
        if self.kind not in ANCHOR_KINDS:
            raise ValueError(f"unknown anchor kind {self.kind!r}")
        if self.kind == ANCHOR_KIND_RETURN and self.name != "return_val":
            raise ValueError("return anchors must be labelled 'return_val'")


@dataclass(frozen=True)
class LineMap:
    """Total, strictly monotone map from original to instrumented line numbers.

    Insertions only: instr_line >= orig_line for every pair.
    """

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        prev_orig, prev_instr = 0, 0
        for orig, instr in self.pairs:
            if orig <= prev_orig or instr <= prev_instr:
                raise ValueError("line map must be strictly monotone")
            if instr < orig:
                raise ValueError("line map admits insertions only (instr >= orig)")
            prev_orig, prev_instr = orig, instr

    def lookup(self, orig_line: int) -> int:
        for orig, instr in self.pairs:
            if orig == orig_line:
                return instr
        raise KeyError(orig_line)

    def domain(self) -> tuple[int, ...]:
        return tuple(orig for orig, _ in self.pairs)

    def compose(self, outer: "LineMap") -> "LineMap":
        """Map through self, then through `outer` (whose domain is self's codomain)."""
        return LineMap(tuple((orig, outer.lookup(instr)) for orig, instr in self.pairs))

    @staticmethod
    def identity(n_lines: int) -> "LineMap":
        return LineMap(tuple((i, i) for i in range(1, n_lines + 1)))


@dataclass(frozen=True)
class InstrumentedProgram:
    """A subject program with anchor prints inserted and the original->new line map."""

    origin_id: str
    source_text: str
    anchors: tuple[AnchorDecl, ...]
    line_map: LineMap


@dataclass(frozen=True)
class TaskInstance:
    """One reasoning task over an instrumented program.

    For output prediction the condition is the input literal and the target the
    output literal; for input prediction the condition is the expected output and
    the target an input literal. gt_input always holds the true input used for
    trace generation.
    """

    program: InstrumentedProgram
    task_kind: str
    condition: str
    target: str
    gt_input: str

    def __post_init__(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if self.task_kind == TASK_OUTPUT and self.condition != self.gt_input:
            raise ValueError("output tasks must have condition == gt_input")


@dataclass(frozen=True)
class ExecutionTrace:
    """Ordered interpreter-observed anchor events plus the final return value."""

    events: tuple[tuple[str, str], ...]
    final_value: str

    @property
    def n(self) -> int:
        return len(self.events)

    def lines(self) -> tuple[str, ...]:
        return tuple(f"{name}: {value}" for name, value in self.events)


@dataclass(frozen=True)
class Block:
    """One tagged block of a model response."""

    tag: str
    text: str

    def __post_init__(self) -> None:
        if self.tag not in BLOCK_TAGS:
            raise ValueError(f"unknown block tag {self.tag!r}")


@dataclass(frozen=True)
class Trajectory:
    """A parsed model response: reasoning, predicted states, optional committed
    input, and the final answer."""

    blocks: tuple[Block, ...]

    @property
    def predicted_states(self) -> tuple[str, ...]:
        return tuple(b.text for b in self.blocks if b.tag == "print")

    @property
    def committed_input(self) -> str | None:
        for b in self.blocks:
            if b.tag == "input":
                return b.text
        return None

    @property
    def answer(self) -> str:
        for b in reversed(self.blocks):
            if b.tag == "answer":
                return b.text
        raise ValueError("trajectory has no answer block")


@dataclass(frozen=True)
class MalformedResponse:
    """A response that failed structural parsing; scored all-zero downstream."""

    reason: str
    blocks: tuple[Block, ...] = ()


# --- record encoding -------------------------------------------------------


def encode_source_program(p: SourceProgram) -> dict[str, Any]:
    return {"id": p.id, "entry_name": p.entry_name, "source_text": p.source_text}


def decode_source_program(rec: dict[str, Any]) -> SourceProgram:
    try:
        return SourceProgram(
            id=str(rec["id"]),
            entry_name=str(rec["entry_name"]),
            source_text=str(rec["source_text"]),
        )
    except KeyError as exc:
        raise SchemaError(f"source_program record missing field {exc}") from exc


def encode_instrumented(p: InstrumentedProgram) -> dict[str, Any]:
    return {
        "origin_id": p.origin_id,
        "source_text": p.source_text,
        "anchors": [{"name": a.name, "line": a.line, "kind": a.kind} for a in p.anchors],
        "line_map": [[orig, instr] for orig, instr in p.line_map.pairs],
    }


def decode_instrumented(rec: dict[str, Any]) -> InstrumentedProgram:
    try:
        anchors = tuple(
            AnchorDecl(name=str(a["name"]), line=int(a["line"]), kind=str(a["kind"]))
            for a in rec["anchors"]
        )
        line_map = LineMap(tuple((int(o), int(i)) for o, i in rec["line_map"]))
        return InstrumentedProgram(
            origin_id=str(rec["origin_id"]),
            source_text=str(rec["source_text"]),
            anchors=anchors,
            line_map=line_map,
        )
    except KeyError as exc:
        raise SchemaError(f"instrumented record missing field {exc}") from exc


def encode_trace(origin_id: str, trace: ExecutionTrace) -> dict[str, Any]:
    return {
        "origin_id": origin_id,
        "events": [[name, value] for name, value in trace.events],
        "final_value": trace.final_value,
    }


def decode_trace(rec: dict[str, Any]) -> tuple[str, ExecutionTrace]:
    try:
        events = tuple((str(n), str(v)) for n, v in rec["events"])
        return str(rec["origin_id"]), ExecutionTrace(events=events, final_value=str(rec["final_value"]))
    except KeyError as exc:
        raise SchemaError(f"trace record missing field {exc}") from exc


def encode_trajectory(instance_id: str, t: Trajectory | MalformedResponse) -> dict[str, Any]:
    rec: dict[str, Any] = {
        "instance_id": instance_id,
        "blocks": [{"tag": b.tag, "text": b.text} for b in t.blocks],
    }
    if isinstance(t, MalformedResponse):
        rec["malformed"] = t.reason
    return rec


def decode_trajectory(rec: dict[str, Any]) -> tuple[str, Trajectory | MalformedResponse]:
    try:
        blocks = tuple(Block(tag=str(b["tag"]), text=str(b["text"])) for b in rec["blocks"])
        if "malformed" in rec:
            return str(rec["instance_id"]), MalformedResponse(reason=str(rec["malformed"]), blocks=blocks)
        return str(rec["instance_id"]), Trajectory(blocks=blocks)
    except KeyError as exc:
        raise SchemaError(f"trajectory record missing field {exc}") from exc


# --- JSONL plumbing --------------------------------------------------------


def read_jsonl(source: str | Path | IO[str]) -> Iterator[dict[str, Any]]:
    """Yield one decoded object per non-empty line."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fp:
            yield from read_jsonl(fp)
        return
    for lineno, line in enumerate(source, 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise SchemaError(f"line {lineno}: record must be a JSON object")
        yield obj


def write_jsonl(records: Iterable[dict[str, Any]], sink: str | Path | IO[str]) -> int:
    """Write records one per line; returns the record count."""
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8") as fp:
            return write_jsonl(records, fp)
    count = 0
    for rec in records:
        sink.write(json.dumps(rec, ensure_ascii=False) + "\n")
        count += 1
    return count
