from __future__ import annotations

import io
import random

import pytest

from trace_forge.model import (
    AnchorDecl,
    Block,
    ExecutionTrace,
    InstrumentedProgram,
    LineMap,
    MalformedResponse,
    SchemaError,
    SourceProgram,
    Trajectory,
    decode_instrumented,
    decode_source_program,
    decode_trace,
    decode_trajectory,
    encode_instrumented,
    encode_source_program,
    encode_trace,
    encode_trajectory,
    read_jsonl,
    write_jsonl,
)


def _sample_instrumented() -> InstrumentedProgram:
    return InstrumentedProgram(
        origin_id="s1",
        source_text="def f(x):\n    y = x\n    print(f'y: {y}')\n    return y\n",
        anchors=(AnchorDecl("y", 3, "assignment"),),
        line_map=LineMap(((1, 1), (2, 2), (3, 4))),
    )


def test_source_program_round_trip():
    p = SourceProgram(id="a", entry_name="f", source_text="def f():\n    return 1\n")
    assert decode_source_program(encode_source_program(p)) == p


def test_instrumented_round_trip():
    p = _sample_instrumented()
    assert decode_instrumented(encode_instrumented(p)) == p


def test_trace_round_trip():
    trace = ExecutionTrace(events=(("a", "1"), ("b", "x y")), final_value="'z'")
    origin, decoded = decode_trace(encode_trace("s1", trace))
    assert origin == "s1"
    assert decoded == trace
    assert decoded.n == 2
    assert decoded.lines() == ("a: 1", "b: x y")


def test_trajectory_round_trip():
    t = Trajectory(
        blocks=(
            Block("reasoning", "think"),
            Block("print", "a: 1"),
            Block("reasoning", ""),
            Block("answer", "1"),
        )
    )
    instance_id, decoded = decode_trajectory(encode_trajectory("i1", t))
    assert instance_id == "i1"
    assert decoded == t
    assert decoded.predicted_states == ("a: 1",)
    assert decoded.committed_input is None
    assert decoded.answer == "1"


def test_malformed_round_trip():
    m = MalformedResponse(reason="answer block is not last", blocks=(Block("answer", "1"),))
    _, decoded = decode_trajectory(encode_trajectory("i1", m))
    assert decoded == m


def test_missing_field_raises_schema_error():
    with pytest.raises(SchemaError):
        decode_source_program({"id": "a", "source_text": "x"})
    with pytest.raises(SchemaError):
        decode_trace({"origin_id": "a", "events": []})


def test_anchor_decl_validation():
    with pytest.raises(ValueError):
        AnchorDecl(name="1bad", line=1, kind="assignment")
    with pytest.raises(ValueError):
        AnchorDecl(name="x", line=1, kind="weird")
    with pytest.raises(ValueError):
        AnchorDecl(name="x", line=1, kind="return_val")


def test_line_map_validation():
    with pytest.raises(ValueError):
        LineMap(((1, 1), (2, 1)))  # not monotone
    with pytest.raises(ValueError):
        LineMap(((1, 1), (3, 2)))  # instr < orig
    m = LineMap(((1, 1), (2, 4), (3, 5)))
    assert m.lookup(2) == 4
    with pytest.raises(KeyError):
        m.lookup(9)


def test_line_map_from_random_insertions():
    # Applying single-line insertions in order always yields a valid map.
    rng = random.Random(7)
    for _ in range(50):
        n = rng.randint(1, 20)
        positions = list(range(1, n + 1))
        offsets = [0] * (n + 1)
        for _ in range(rng.randint(0, 15)):
            k = rng.randint(0, n)  # insert after original line k
            offsets[k] += 1
        pairs = []
        shift = 0
        for line in positions:
            shift += offsets[line - 1]
            pairs.append((line, line + shift))
        m = LineMap(tuple(pairs))
        assert m.domain() == tuple(positions)


def test_jsonl_round_trip():
    records = [{"a": 1}, {"b": "two"}, {"c": [1, 2, 3]}]
    buf = io.StringIO()
    assert write_jsonl(records, buf) == 3
    buf.seek(0)
    assert list(read_jsonl(buf)) == records


def test_jsonl_rejects_non_objects():
    with pytest.raises(SchemaError):
        list(read_jsonl(io.StringIO("[1, 2]\n")))
    with pytest.raises(SchemaError):
        list(read_jsonl(io.StringIO("{bad json\n")))


def test_task_instance_invariant():
    from trace_forge.model import TaskInstance

    program = _sample_instrumented()
    with pytest.raises(ValueError):
        TaskInstance(
            program=program,
            task_kind="output_prediction",
            condition="(1,)",
            target="'x'",
            gt_input="(2,)",
        )
    instance = TaskInstance(
        program=program,
        task_kind="input_prediction",
        condition="'x'",
        target="(2,)",
        gt_input="(2,)",
    )
    assert instance.condition == "'x'"
