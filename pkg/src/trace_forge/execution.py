"""Ground-truth trace generation and literal equality.

The executor drives sandbox shim processes over a newline-delimited JSON stdio
protocol to run instrumented programs, or replays recorded traces from a
fixture file so everything upstream of the shim can be exercised without it.

Fixture records extend the trace record schema:

    {"origin_id": ..., "source_sha256": ..., "input": ..., "status": "ok",
     "events": [[name, value], ...], "final_value": ..., "error_text": ...}

keyed by (source_sha256, trimmed input literal). Records with status != ok
replay the corresponding failure.
"""

from __future__ import annotations

import ast
import hashlib
import importlib.util
import json
import os
import queue
import re
import shlex
import subprocess
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

from .model import ExecutionTrace, InstrumentedProgram, SourceProgram, read_jsonl

TRACE_LINE_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*): (.*)$")

SHIM_ENV_VAR = "TRACE_FORGE_SHIM"


class ExecutionFailed(Exception):
    """A run did not produce a usable trace (timeout, exception, bad syntax...)."""

    def __init__(self, status: str, detail: str = ""):
        self.status = status
        self.detail = detail
        super().__init__(f"{status}: {detail}" if detail else status)


class TraceParseError(Exception):
    """Captured stdout contained a line outside the anchor format (usually a
    multi-line value); the sample must be rejected upstream."""


# --- literal canonicalization -------------------------------------------------


def canonicalize_literal(text: str) -> str | None:
    """Canonical printed representation of a literal, or None when the text is
    not a pure literal."""
    try:
        return repr(ast.literal_eval(text.strip()))
    except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
        return None


def _comparable_forms(text: str) -> set[str]:
    trimmed = text.strip()
    forms = {trimmed}
    try:
        value = ast.literal_eval(trimmed)
    except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
        return forms
    forms.add(repr(value))
    if isinstance(value, str):
        # A bare trace value and its quoted literal must compare equal.
        forms.add(value)
    return forms


def values_equal(a: str, b: str) -> bool:
    """True when the two literals canonicalize identically, falling back to
    trimmed-string comparison when either side is not parseable."""
    return not _comparable_forms(a).isdisjoint(_comparable_forms(b))


def source_sha(source_text: str) -> str:
    return hashlib.sha256(source_text.encode("utf-8")).hexdigest()


def fixture_record(
    source_text: str,
    input_literal: str,
    events: Sequence[tuple[str, str]] = (),
    final_value: str = "",
    status: str = "ok",
    origin_id: str = "",
    error_text: str = "",
) -> dict[str, Any]:
    """Author one fixture record for the given source/input pair."""
    return {
        "origin_id": origin_id,
        "source_sha256": source_sha(source_text),
        "input": input_literal.strip(),
        "status": status,
        "events": [[n, v] for n, v in events],
        "final_value": final_value,
        "error_text": error_text,
    }


# --- shim client ----------------------------------------------------------------


def resolve_shim_command() -> list[str]:
    """Shim launch command: TRACE_FORGE_SHIM overrides; default is the bundled
    trace_shim module when installed."""
    override = os.environ.get(SHIM_ENV_VAR)
    if override:
        return shlex.split(override)
    if importlib.util.find_spec("trace_shim") is not None:
        return [sys.executable, "-m", "trace_shim"]
    raise ExecutionFailed(
        "shim_unavailable",
        f"no {SHIM_ENV_VAR} set and the trace_shim package is not installed",
    )


class _ShimProcess:
    """One shim child process with a background stdout reader."""

    def __init__(self, cmd: list[str]):
        self.proc = subprocess.Popen(
            cmd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        assert self.proc.stdout is not None
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def request(self, payload: dict[str, Any], deadline_s: float) -> dict[str, Any]:
        assert self.proc.stdin is not None
        try:
            self.proc.stdin.write(json.dumps(payload, ensure_ascii=False) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ExecutionFailed("exception", f"shim pipe broken: {exc}") from exc
        try:
            line = self._lines.get(timeout=deadline_s)
        except queue.Empty:
            self.kill()
            raise ExecutionFailed("timeout", "shim did not answer before the deadline")
        if line is None:
            raise ExecutionFailed("exception", "shim terminated unexpectedly")
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise ExecutionFailed("exception", f"unparseable shim response: {exc}") from exc

    def shutdown(self) -> None:
        try:
            if self.proc.stdin is not None:
                self.proc.stdin.write(json.dumps({"mode": "shutdown"}) + "\n")
                self.proc.stdin.flush()
            self.proc.wait(timeout=2)
        except Exception:
            self.kill()

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()


@dataclass
class ExecutorConfig:
    pool_size: int = 1
    timeout_ms: int = 5000
    fixture_path: str | Path | None = None

    def __post_init__(self) -> None:
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")


class Executor:
    """Generates ExecutionTraces, checks behavior equivalence, and decides
    answer-value equality. Thread-safe; one shim process per pool slot."""

    def __init__(self, config: ExecutorConfig | None = None, shim_cmd: list[str] | None = None):
        self.config = config or ExecutorConfig()
        self._shim_cmd = shim_cmd
        self._fixtures: dict[tuple[str, str], dict[str, Any]] | None = None
        self._idle: queue.Queue[_ShimProcess] = queue.Queue()
        self._spawned = 0
        self._lock = threading.Lock()
        if self.config.fixture_path is not None:
            self._fixtures = {}
            for rec in read_jsonl(self.config.fixture_path):
                key = (str(rec["source_sha256"]), str(rec["input"]).strip())
                self._fixtures[key] = rec

    # -- lifecycle

    def __enter__(self) -> "Executor":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    def close(self) -> None:
        while True:
            try:
                proc = self._idle.get_nowait()
            except queue.Empty:
                break
            proc.shutdown()

    # -- core operations

    def generate_trace(
        self,
        program: InstrumentedProgram,
        input_literal: str,
        entry_name: str | None = None,
    ) -> ExecutionTrace:
        """Run the instrumented program and parse its anchor output.

        Raises ExecutionFailed for timeout/exception/syntax failures and
        TraceParseError when any stdout line escapes the anchor format.
        """
        stdout_lines, final_value = self.run_source(
            program.source_text, entry_name, input_literal
        )
        events = []
        for line in stdout_lines:
            m = TRACE_LINE_RE.match(line)
            if not m:
                raise TraceParseError(
                    f"stdout line {line!r} does not match the anchor format"
                )
            events.append((m.group(1), m.group(2)))
        return ExecutionTrace(events=tuple(events), final_value=final_value)

    def run_source(
        self, source_text: str, entry_name: str | None, input_literal: str
    ) -> tuple[list[str], str]:
        """Raw (stdout_lines, final_value) for one run, via fixtures or the shim."""
        if self._fixtures is not None:
            rec = self._fixtures.get((source_sha(source_text), input_literal.strip()))
            if rec is None:
                raise ExecutionFailed(
                    "fixture_missing",
                    f"no fixture for sha {source_sha(source_text)[:12]} input {input_literal!r}",
                )
            if rec.get("status", "ok") != "ok":
                raise ExecutionFailed(str(rec["status"]), str(rec.get("error_text", "")))
            lines = [f"{n}: {v}" for n, v in rec.get("events", [])]
            return lines, str(rec["final_value"])

        response = self._shim_request(
            {
                "mode": "run",
                "source_text": source_text,
                "entry_name": entry_name,
                "input_literal": input_literal,
                "timeout_ms": self.config.timeout_ms,
            }
        )
        if response.get("status") != "ok":
            raise ExecutionFailed(
                str(response.get("status", "exception")),
                str(response.get("error_text", "")),
            )
        return list(response.get("stdout_lines", [])), str(response.get("return_repr", ""))

    def values_equal(self, a: str, b: str) -> bool:
        return values_equal(a, b)

    def check_equivalence(
        self,
        original: SourceProgram,
        instrumented: InstrumentedProgram,
        inputs: Iterable[str],
    ) -> bool:
        """True when original and instrumented programs return equal values on
        every input. Requires at least one input."""
        count = 0
        for input_literal in inputs:
            count += 1
            _, original_value = self.run_source(
                original.source_text, original.entry_name, input_literal
            )
            _, instrumented_value = self.run_source(
                instrumented.source_text, original.entry_name, input_literal
            )
            if not values_equal(original_value, instrumented_value):
                return False
        if count == 0:
            raise ValueError("check_equivalence needs at least one input")
        return True

    # -- shim pool

    def _shim_request(self, payload: dict[str, Any]) -> dict[str, Any]:
        proc = self._borrow()
        try:
            deadline = self.config.timeout_ms / 1000.0 + 5.0
            response = proc.request(payload, deadline)
        except ExecutionFailed:
            proc.kill()
            with self._lock:
                self._spawned -= 1
            raise
        self._idle.put(proc)
        return response

    def _borrow(self) -> _ShimProcess:
        try:
            return self._idle.get_nowait()
        except queue.Empty:
            pass
        with self._lock:
            if self._spawned < self.config.pool_size:
                self._spawned += 1
                cmd = self._shim_cmd or resolve_shim_command()
                return _ShimProcess(cmd)
        return self._idle.get()
