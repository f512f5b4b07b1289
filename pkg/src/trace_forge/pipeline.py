"""End-to-end dataset construction.

Each program is instrumented, executed for its ground-truth trace, then routed:
traces longer than the cap are rejected, single-line traces go to the
terminal-only pool (stepwise prediction degenerates to terminal prediction
there), samples sharing any k-gram with the benchmark corpus are removed, and
the remainder is emitted to both the SFT set (with serialized supervision
targets) and the RL set. Every input id lands in exactly one bucket and
rejections always carry a reason.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from statistics import median
from typing import Any, Iterable, Mapping, Sequence

from . import codec
from .execution import ExecutionFailed, Executor, TraceParseError
from .instrument import InstrumentationConfig, InstrumenterError, instrument
from .model import (
    TASK_INPUT,
    TASK_OUTPUT,
    ExecutionTrace,
    InstrumentedProgram,
    SourceProgram,
    encode_instrumented,
    encode_trace,
)

_TOKEN_RE = re.compile(r"\w+")

# The pipeline filters on runtime trace length, so the instrumenter's static
# cap is lifted out of the way here; over-instrumented samples still get
# rejected when their traces run long.
_PIPELINE_STATIC_CAP = 10_000


class EmptySet(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    max_trace_lines: int = 10
    ngram_k: int = 10
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_trace_lines < 1:
            raise ValueError("max_trace_lines must be >= 1")
        if self.ngram_k < 1:
            raise ValueError("ngram_k must be >= 1")


@dataclass
class BuildResult:
    sft_set: list[dict[str, Any]] = field(default_factory=list)
    rl_set: list[dict[str, Any]] = field(default_factory=list)
    terminal_only_set: list[dict[str, Any]] = field(default_factory=list)
    rejected: list[tuple[str, str]] = field(default_factory=list)


def assign_ids(records: Iterable[Mapping[str, Any]]) -> list[dict[str, Any]]:
    """Give records without a caller-supplied id a sequential train_<n> id."""
    out: list[dict[str, Any]] = []
    for index, rec in enumerate(records):
        rec = dict(rec)
        if not rec.get("id"):
            rec["id"] = f"train_{index}"
        out.append(rec)
    return out


def tokenize(text: str) -> list[str]:
    """Lowercased split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def ngrams(tokens: Sequence[str], k: int) -> set[tuple[str, ...]]:
    if len(tokens) < k:
        return set()
    return {tuple(tokens[i : i + k]) for i in range(len(tokens) - k + 1)}


def _corpus_text(record: Mapping[str, Any] | str) -> str:
    if isinstance(record, str):
        return record
    for key in ("text", "source_text"):
        if key in record:
            return str(record[key])
    return " ".join(str(v) for v in record.values())


def decontaminate(
    samples: Sequence[SourceProgram],
    benchmark_corpus: Iterable[Mapping[str, Any] | str],
    k: int,
) -> tuple[list[SourceProgram], list[tuple[SourceProgram, tuple[str, ...]]]]:
    """Split samples into (kept, removed); each removed sample carries the
    witnessing k-gram it shares with the benchmark corpus."""
    if k < 1:
        raise ValueError("k must be >= 1")
    bench_grams: set[tuple[str, ...]] = set()
    for record in benchmark_corpus:
        bench_grams |= ngrams(tokenize(_corpus_text(record)), k)

    kept: list[SourceProgram] = []
    removed: list[tuple[SourceProgram, tuple[str, ...]]] = []
    for sample in samples:
        tokens = tokenize(sample.source_text)
        witness = None
        # First overlapping k-gram by position, so the witness is stable
        # across processes regardless of hash randomization.
        for i in range(len(tokens) - k + 1):
            gram = tuple(tokens[i : i + k])
            if gram in bench_grams:
                witness = gram
                break
        if witness is None:
            kept.append(sample)
        else:
            removed.append((sample, witness))
    return kept, removed


def anchor_stats(traces: Sequence[ExecutionTrace]) -> dict[str, float]:
    """Distribution of runtime anchor counts over generated traces."""
    if not traces:
        raise EmptySet("anchor_stats needs at least one trace")
    lengths = [t.n for t in traces]
    return {
        "mean": sum(lengths) / len(lengths),
        "median": float(median(lengths)),
        "min": float(min(lengths)),
        "max": float(max(lengths)),
    }


def _instance_record(
    program: SourceProgram,
    instrumented: InstrumentedProgram,
    trace: ExecutionTrace,
    input_literal: str,
    task_kind: str,
) -> dict[str, Any]:
    if task_kind == TASK_OUTPUT:
        condition, target = input_literal, trace.final_value
    else:
        condition, target = trace.final_value, input_literal
    return {
        "id": program.id,
        "task_kind": task_kind,
        "entry_name": program.entry_name,
        "condition": condition,
        "target": target,
        "gt_input": input_literal,
        "instrumented": encode_instrumented(instrumented),
        "trace": encode_trace(program.id, trace),
    }


def _sft_record(base: dict[str, Any], trace: ExecutionTrace) -> dict[str, Any]:
    rec = dict(base)
    rec["target_text"] = codec.serialize_target(
        trace,
        target=base["target"],
        task_kind=base["task_kind"],
        gt_input=base["gt_input"] if base["task_kind"] == TASK_INPUT else None,
    )
    return rec


def build(
    programs: Sequence[SourceProgram],
    inputs: Mapping[str, str],
    benchmark_corpus: Iterable[Mapping[str, Any] | str],
    cfg: PipelineConfig,
    executor: Executor,
) -> BuildResult:
    """Instrument, trace, filter, decontaminate, and emit SFT/RL instances.

    Deterministic for identical inputs and config; instrumenter and executor
    failures become rejections with reasons, never silent drops.
    """
    result = BuildResult()
    instr_cfg = InstrumentationConfig(
        max_static_anchors=_PIPELINE_STATIC_CAP,
        dropout_rate=cfg.dropout_rate,
        rng_seed=cfg.seed,
    )

    def prepare(program: SourceProgram):
        input_literal = inputs.get(program.id)
        if input_literal is None:
            return ("rejected", "missing_input")
        try:
            instrumented = instrument(program, instr_cfg)
        except InstrumenterError as exc:
            return ("rejected", f"instrument:{type(exc).__name__}")
        try:
            trace = executor.generate_trace(
                instrumented, input_literal, entry_name=program.entry_name
            )
        except ExecutionFailed as exc:
            return ("rejected", f"execution:{exc.status}")
        except TraceParseError:
            return ("rejected", "trace_parse")
        if trace.n > cfg.max_trace_lines:
            return ("rejected", "too_long")
        return ("traced", instrumented, trace, input_literal)

    # Instrumentation and tracing fan out across the executor's pool width;
    # outcomes are reassembled in input order so results stay deterministic.
    workers = executor.config.pool_size
    if workers > 1 and len(programs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as tp:
            outcomes = list(tp.map(prepare, programs))
    else:
        outcomes = [prepare(program) for program in programs]

    traced: list[tuple[SourceProgram, InstrumentedProgram, ExecutionTrace, str]] = []
    for program, outcome in zip(programs, outcomes):
        if outcome[0] == "rejected":
            result.rejected.append((program.id, outcome[1]))
        else:
            _, instrumented, trace, input_literal = outcome
            traced.append((program, instrumented, trace, input_literal))

    kept, removed = decontaminate(
        [program for program, _, _, _ in traced], benchmark_corpus, cfg.ngram_k
    )
    kept_ids = {p.id for p in kept}
    for sample, witness in removed:
        result.rejected.append((sample.id, "contaminated:" + " ".join(witness)))

    for program, instrumented, trace, input_literal in traced:
        if program.id not in kept_ids:
            continue
        records = [
            _instance_record(program, instrumented, trace, input_literal, task_kind)
            for task_kind in (TASK_OUTPUT, TASK_INPUT)
        ]
        if trace.n == 1:
            result.terminal_only_set.extend(records)
        else:
            result.rl_set.extend(records)
            result.sft_set.extend(_sft_record(rec, trace) for rec in records)
    return result
