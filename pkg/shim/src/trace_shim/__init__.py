"""Minimal untrusted-code runner speaking newline-delimited JSON over stdio.

One JSON request per line, exactly one JSON response per request, in order.
Requests:

    {"mode": "run", "source_text": ..., "entry_name": ..., "input_literal": ...,
     "timeout_ms": 5000}
    {"mode": "syntax_check", "source_text": ...}
    {"mode": "canonicalize", "source_text": <literal text>}
    {"mode": "shutdown"}

Responses carry {"status": ok|timeout|exception|syntax_error, "stdout_lines",
"return_repr", "error_text", "duration_ms"}. `run` executes the module, calls
the entry function on the evaluated argument tuple, and captures everything it
prints; `canonicalize` returns the canonical printed representation of a
literal; `syntax_check` only compiles. A malformed request answers with status
exception; nothing short of a kill takes the loop down. The wall-clock timeout
is enforced in-process via an interval timer (the spawning side should keep its
own kill as a backstop); this is best-effort isolation, not a security
boundary.
"""

from __future__ import annotations

import ast
import contextlib
import io
import json
import signal
import sys
import time
import traceback
from typing import IO, Any

__version__ = "0.1.0"

DEFAULT_TIMEOUT_MS = 5000

STATUS_OK = "ok"
STATUS_TIMEOUT = "timeout"
STATUS_EXCEPTION = "exception"
STATUS_SYNTAX_ERROR = "syntax_error"


class _Timeout(Exception):
    pass


def _alarm(signum: int, frame: Any) -> None:
    raise _Timeout()


def _response(
    status: str,
    stdout_lines: list[str] | None = None,
    return_repr: str = "",
    error_text: str = "",
    started: float | None = None,
) -> dict[str, Any]:
    duration_ms = 0.0 if started is None else (time.perf_counter() - started) * 1000.0
    return {
        "status": status,
        "stdout_lines": stdout_lines or [],
        "return_repr": return_repr,
        "error_text": error_text,
        "duration_ms": duration_ms,
    }


def _captured_lines(buf: io.StringIO) -> list[str]:
    lines = buf.getvalue().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _resolve_entry(source_text: str, entry_name: str | None) -> str:
    if entry_name:
        return entry_name
    tree = ast.parse(source_text)
    for node in tree.body:
        if isinstance(node, ast.FunctionDef):
            return node.name
    raise ValueError("no function definition found and no entry_name given")


def _argument_pack(input_literal: str) -> tuple[Any, ...]:
    """A top-level tuple literal is an argument pack; anything else is one arg."""
    text = input_literal.strip()
    node = ast.parse(text, mode="eval").body
    value = ast.literal_eval(text)
    if isinstance(node, ast.Tuple):
        return tuple(value)
    return (value,)


def _run(request: dict[str, Any]) -> dict[str, Any]:
    started = time.perf_counter()
    source_text = str(request.get("source_text", ""))
    raw_timeout = request.get("timeout_ms", DEFAULT_TIMEOUT_MS)
    timeout_ms = DEFAULT_TIMEOUT_MS if raw_timeout is None else int(raw_timeout)
    if timeout_ms <= 0:
        return _response(STATUS_EXCEPTION, error_text="timeout_ms must be > 0", started=started)

    try:
        code = compile(source_text, "<sample>", "exec")
    except SyntaxError as exc:
        return _response(STATUS_SYNTAX_ERROR, error_text=str(exc), started=started)

    buf = io.StringIO()
    old_handler = signal.signal(signal.SIGALRM, _alarm)
    signal.setitimer(signal.ITIMER_REAL, timeout_ms / 1000.0)
    try:
        with contextlib.redirect_stdout(buf):
            namespace: dict[str, Any] = {"__name__": "<shim>"}
            exec(code, namespace)
            entry = _resolve_entry(source_text, request.get("entry_name"))
            func = namespace.get(entry)
            if not callable(func):
                raise ValueError(f"entry function {entry!r} not found")
            args = _argument_pack(str(request.get("input_literal", "()")))
            result = func(*args)
        return _response(
            STATUS_OK,
            stdout_lines=_captured_lines(buf),
            return_repr=repr(result),
            started=started,
        )
    except _Timeout:
        return _response(
            STATUS_TIMEOUT,
            stdout_lines=_captured_lines(buf),
            error_text=f"exceeded {timeout_ms} ms",
            started=started,
        )
    except BaseException as exc:  # the loop must survive whatever the sample throws
        tail = traceback.format_exception_only(type(exc), exc)[-1].strip()
        return _response(
            STATUS_EXCEPTION,
            stdout_lines=_captured_lines(buf),
            error_text=tail,
            started=started,
        )
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0.0)
        signal.signal(signal.SIGALRM, old_handler)


def _canonicalize(request: dict[str, Any]) -> dict[str, Any]:
    started = time.perf_counter()
    literal = str(request.get("source_text", ""))
    try:
        value = ast.literal_eval(literal.strip())
    except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError) as exc:
        return _response(STATUS_EXCEPTION, error_text=f"not a literal: {exc}", started=started)
    return _response(STATUS_OK, return_repr=repr(value), started=started)


def _syntax_check(request: dict[str, Any]) -> dict[str, Any]:
    started = time.perf_counter()
    try:
        compile(str(request.get("source_text", "")), "<sample>", "exec")
    except SyntaxError as exc:
        return _response(STATUS_SYNTAX_ERROR, error_text=str(exc), started=started)
    return _response(STATUS_OK, started=started)


def handle_request(request: Any) -> dict[str, Any]:
    """Dispatch one decoded request; total, never raises."""
    try:
        if not isinstance(request, dict):
            return _response(STATUS_EXCEPTION, error_text="request must be a JSON object")
        mode = request.get("mode")
        if mode == "run":
            return _run(request)
        if mode == "canonicalize":
            return _canonicalize(request)
        if mode == "syntax_check":
            return _syntax_check(request)
        return _response(STATUS_EXCEPTION, error_text=f"unknown mode {mode!r}")
    except Exception as exc:  # defensive: a handler bug must not kill the loop
        return _response(STATUS_EXCEPTION, error_text=f"internal error: {exc}")


def serve(stdin: IO[str], stdout: IO[str]) -> int:
    """Request/response loop; returns the process exit code."""
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            request = None
            response = _response(STATUS_EXCEPTION, error_text=f"bad request JSON: {exc}")
        else:
            if isinstance(request, dict) and request.get("mode") == "shutdown":
                stdout.write(json.dumps(_response(STATUS_OK)) + "\n")
                stdout.flush()
                return 0
            response = handle_request(request)
        stdout.write(json.dumps(response, ensure_ascii=False) + "\n")
        stdout.flush()
    return 0


def main() -> int:
    return serve(sys.stdin, sys.stdout)


if __name__ == "__main__":
    sys.exit(main())
