from __future__ import annotations

import json

import pytest

import oracle
import refdata
from trace_forge.cli import main
from trace_forge.execution import fixture_record
from trace_forge.instrument import instrument
from trace_forge.model import (
    decode_instrumented,
    encode_source_program,
    encode_trace,
    read_jsonl,
    write_jsonl,
)


def run_cli(capsys, *argv: str) -> tuple[int, str, str]:
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_help_and_version(capsys):
    assert run_cli(capsys, "--help")[0] == 0
    assert run_cli(capsys, "--version")[0] == 0


def test_usage_errors_exit_one(capsys):
    assert run_cli(capsys, "no-such-command")[0] == 1
    assert run_cli(capsys, "instrument")[0] == 1  # missing --in


def test_instrument_stage(tmp_path, capsys, ref_program):
    programs = tmp_path / "programs.jsonl"
    write_jsonl([encode_source_program(ref_program)], programs)
    out = tmp_path / "instrumented.jsonl"
    code, _, _ = run_cli(capsys, "instrument", "--in", str(programs), "--out", str(out))
    assert code == 0
    rec = next(read_jsonl(out))
    assert decode_instrumented(rec).source_text == refdata.INSTRUMENTED_SOURCE


def test_instrument_data_error_reports_id(tmp_path, capsys):
    programs = tmp_path / "programs.jsonl"
    write_jsonl(
        [{"id": "broken_9", "entry_name": "f", "source_text": "def f(:\n    pass\n"}],
        programs,
    )
    code, _, err = run_cli(capsys, "instrument", "--in", str(programs))
    assert code == 2
    assert "broken_9" in err


def test_full_stage_chain(tmp_path, capsys, ref_program, ref_instrumented):
    programs = tmp_path / "programs.jsonl"
    write_jsonl([encode_source_program(ref_program)], programs)
    instrumented_path = tmp_path / "instrumented.jsonl"
    assert run_cli(capsys, "instrument", "--in", str(programs), "--out", str(instrumented_path))[0] == 0

    inputs_path = tmp_path / "inputs.jsonl"
    write_jsonl([{"id": refdata.SAMPLE_ID, "input": refdata.INPUT_LITERAL}], inputs_path)
    fixtures_path = tmp_path / "fixtures.jsonl"
    write_jsonl(
        [
            fixture_record(
                ref_instrumented.source_text,
                refdata.INPUT_LITERAL,
                events=refdata.TRACE_EVENTS,
                final_value=refdata.FINAL_VALUE,
                origin_id=refdata.SAMPLE_ID,
            )
        ],
        fixtures_path,
    )
    traces_path = tmp_path / "traces.jsonl"
    code, _, _ = run_cli(
        capsys,
        "trace",
        "--in", str(instrumented_path),
        "--inputs", str(inputs_path),
        "--fixtures", str(fixtures_path),
        "--out", str(traces_path),
    )
    assert code == 0
    origin, events = None, None
    trace_rec = next(read_jsonl(traces_path))
    assert trace_rec["origin_id"] == refdata.SAMPLE_ID
    assert trace_rec["final_value"] == refdata.FINAL_VALUE

    responses_path = tmp_path / "responses.jsonl"
    write_jsonl(
        [
            {"id": refdata.SAMPLE_ID, "text": refdata.CASE_1_TEXT},
            {"id": refdata.SAMPLE_ID, "text": refdata.CASE_2_TEXT},
            {"id": refdata.SAMPLE_ID, "text": refdata.CASE_3_TEXT},
            {"id": refdata.SAMPLE_ID, "text": refdata.CASE_1_TEXT},
            {"id": refdata.SAMPLE_ID, "text": "<print>broken"},
        ],
        responses_path,
    )
    trajectories_path = tmp_path / "trajectories.jsonl"
    code, _, _ = run_cli(
        capsys, "parse", "--in", str(responses_path), "--task", "output",
        "--out", str(trajectories_path),
    )
    assert code == 0
    recs = list(read_jsonl(trajectories_path))
    assert len(recs) == 5
    assert "malformed" in recs[4]

    rewards_path = tmp_path / "rewards.jsonl"
    code, _, _ = run_cli(
        capsys,
        "score",
        "--trajectories", str(trajectories_path),
        "--traces", str(traces_path),
        "--out", str(rewards_path),
    )
    assert code == 0
    reward_recs = list(read_jsonl(rewards_path))
    assert [r["budgeted_total"] for r in reward_recs] == [2.0, 1.5, 0.5, 2.0, 0.0]

    advantages_path = tmp_path / "advantages.jsonl"
    code, _, _ = run_cli(
        capsys,
        "advantage",
        "--rewards", str(rewards_path),
        "--lambda", "0.3",
        "--out", str(advantages_path),
    )
    assert code == 0
    adv = next(read_jsonl(advantages_path))
    assert adv["instance_id"] == refdata.SAMPLE_ID
    assert len(adv["combined"]) == 5
    assert len(adv["combined"][0]) == 6
    assert adv["lambda"] == 0.3
    # Anchor 1 (index 0): cases 1,2,4 correct; case 3 and the garbage row wrong.
    col = [row[0] for row in adv["group"]]
    assert col[0] == pytest.approx(col[1]) == pytest.approx(col[3])
    assert col[2] < 0 and col[4] < 0


def test_score_mismatched_ids_exit_two(tmp_path, capsys, ref_trace):
    traces_path = tmp_path / "traces.jsonl"
    write_jsonl([encode_trace("some_other_id", ref_trace)], traces_path)
    trajectories_path = tmp_path / "trajectories.jsonl"
    write_jsonl(
        [
            {
                "instance_id": "orphan_7",
                "blocks": [
                    {"tag": "reasoning", "text": "r"},
                    {"tag": "answer", "text": "1"},
                ],
            }
        ],
        trajectories_path,
    )
    code, _, err = run_cli(
        capsys, "score", "--trajectories", str(trajectories_path), "--traces", str(traces_path)
    )
    assert code == 2
    assert "orphan_7" in err


def test_stdout_piping(tmp_path, capsys, ref_program):
    programs = tmp_path / "programs.jsonl"
    write_jsonl([encode_source_program(ref_program)], programs)
    code, out, _ = run_cli(capsys, "instrument", "--in", str(programs))
    assert code == 0
    rec = json.loads(out.strip())
    assert rec["origin_id"] == refdata.SAMPLE_ID


def test_stdin_piping(capsys, monkeypatch, ref_program):
    import io

    payload = json.dumps(encode_source_program(ref_program)) + "\n"
    monkeypatch.setattr("sys.stdin", io.StringIO(payload))
    code, out, _ = run_cli(capsys, "instrument", "--in", "-")
    assert code == 0
    assert json.loads(out.strip())["origin_id"] == refdata.SAMPLE_ID


def test_align_cli(tmp_path, capsys, ref_program):
    instrumented = instrument(ref_program)
    maps_path = tmp_path / "instrumented.jsonl"
    from trace_forge.model import encode_instrumented

    write_jsonl([encode_instrumented(instrumented)], maps_path)
    queries_path = tmp_path / "queries.jsonl"
    write_jsonl(
        [
            {"id": refdata.SAMPLE_ID, "task": "PSP", "line": 12, "payload": "res?"},
            {"id": refdata.SAMPLE_ID, "task": "OP", "payload": "output?"},
        ],
        queries_path,
    )
    out_path = tmp_path / "aligned.jsonl"
    code, _, _ = run_cli(
        capsys, "align", "--queries", str(queries_path), "--maps", str(maps_path),
        "--out", str(out_path),
    )
    assert code == 0
    recs = list(read_jsonl(out_path))
    assert recs[0]["line"] == 17
    assert recs[1]["line"] is None


def test_build_dataset_cli(tmp_path, capsys):
    source = "def f(x):\n    doubled = x * 2\n    tripled = doubled + x\n    return tripled\n"
    program = {"id": "cli_keep", "entry_name": "f", "source_text": source}
    programs_path = tmp_path / "programs.jsonl"
    write_jsonl([program], programs_path)
    inputs_path = tmp_path / "inputs.jsonl"
    write_jsonl([{"id": "cli_keep", "input": "(2,)"}], inputs_path)
    bench_path = tmp_path / "bench.jsonl"
    write_jsonl([{"text": "unrelated benchmark material"}], bench_path)

    from trace_forge.instrument import InstrumentationConfig
    from trace_forge.model import SourceProgram

    instrumented = instrument(
        SourceProgram(id="cli_keep", entry_name="f", source_text=source),
        InstrumentationConfig(max_static_anchors=100),
    )
    events, final = oracle.trace_events(instrumented.source_text, "f", "(2,)")
    fixtures_path = tmp_path / "fixtures.jsonl"
    write_jsonl(
        [fixture_record(instrumented.source_text, "(2,)", events=events, final_value=final)],
        fixtures_path,
    )

    out_dir = tmp_path / "data"
    code, _, err = run_cli(
        capsys,
        "build-dataset",
        "--programs", str(programs_path),
        "--inputs", str(inputs_path),
        "--bench", str(bench_path),
        "--out-dir", str(out_dir),
        "--fixtures", str(fixtures_path),
    )
    assert code == 0
    assert (out_dir / "sft.jsonl").exists()
    sft = list(read_jsonl(out_dir / "sft.jsonl"))
    assert {rec["task_kind"] for rec in sft} == {"output_prediction", "input_prediction"}
    assert (out_dir / "rejected.jsonl").read_text() == ""


def test_simulate_cli(tmp_path, capsys):
    out_dir = tmp_path / "curves"
    code, _, _ = run_cli(
        capsys,
        "simulate",
        "--method", "bilevel",
        "--steps", "5",
        "--seed", "1",
        "--out", str(out_dir),
    )
    assert code == 0
    assert (out_dir / "curves.csv").exists()
    assert (out_dir / "metadata.json").exists()
