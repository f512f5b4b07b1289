from __future__ import annotations

import pytest

import refdata
from trace_forge.execution import Executor, ExecutorConfig, fixture_record
from trace_forge.instrument import instrument
from trace_forge.model import write_jsonl


@pytest.fixture
def ref_program():
    return refdata.source_program()


@pytest.fixture
def ref_instrumented(ref_program):
    return instrument(ref_program)


@pytest.fixture
def ref_trace():
    return refdata.ground_truth_trace()


@pytest.fixture
def fixture_executor_factory(tmp_path):
    """Build a fixture-mode Executor from authored records."""

    def factory(records):
        path = tmp_path / "fixtures.jsonl"
        write_jsonl(records, path)
        return Executor(ExecutorConfig(fixture_path=path))

    return factory


@pytest.fixture
def ref_executor(fixture_executor_factory, ref_instrumented):
    """Fixture-mode executor preloaded with the reference sample's trace."""
    rec = fixture_record(
        ref_instrumented.source_text,
        refdata.INPUT_LITERAL,
        events=refdata.TRACE_EVENTS,
        final_value=refdata.FINAL_VALUE,
        origin_id=refdata.SAMPLE_ID,
    )
    return fixture_executor_factory([rec])
