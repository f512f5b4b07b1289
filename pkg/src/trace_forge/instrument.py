"""Deterministic anchor insertion for subject programs.

Inserts `print(f'NAME: {NAME}')` anchor statements into the entry function of a
Python program and records an original->instrumented line map. The rules:

  * never inside a loop body (at any nesting depth);
  * after every statement-level assignment to a single simple name, outside
    loops (suppressed when the very next statement returns that same name: the
    return anchor already exposes the value);
  * immediately after each loop, one anchor per simple name assigned inside it,
    in first-assignment order;
  * immediately before every return, labelled `return_val`; returns of anything
    but a bare name are rewritten to bind `return_val` first.

Anchors go only into the entry function. Insertion is purely line-based so the
untouched original lines survive byte-for-byte; constructs the rules cannot
handle deterministically are refused with UnsupportedConstruct.
"""

from __future__ import annotations

import ast
import random
import re
from dataclasses import dataclass, field

from .model import (
    ANCHOR_KIND_ASSIGNMENT,
    ANCHOR_KIND_POST_LOOP,
    ANCHOR_KIND_RETURN,
    AnchorDecl,
    InstrumentedProgram,
    LineMap,
    SourceProgram,
)

# Exact textual shape of an anchor statement (label and printed name may differ
# for return anchors: print(f'return_val: {res}')).
ANCHOR_STMT_RE = re.compile(
    r"^\s*print\(f'([A-Za-z_][A-Za-z0-9_]*): \{([A-Za-z_][A-Za-z0-9_]*)\}'\)$"
)

_LOOP_NODES = (ast.For, ast.While)


class InstrumenterError(Exception):
    """Base class; carries the offending program id when known."""

    def __init__(self, message: str, program_id: str | None = None):
        self.program_id = program_id
        super().__init__(message if program_id is None else f"{program_id}: {message}")


class ParseError(InstrumenterError):
    pass


class UnsupportedConstruct(InstrumenterError):
    pass


class TooManyAnchors(InstrumenterError):
    def __init__(self, count: int, limit: int, program_id: str | None = None):
        self.count = count
        self.limit = limit
        super().__init__(f"{count} anchor sites exceed the cap of {limit}", program_id)


@dataclass(frozen=True)
class InstrumentationConfig:
    max_static_anchors: int = 10
    unroll_oneliners: bool = True
    dropout_rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout_rate must lie in [0, 1]")
        if self.max_static_anchors < 1:
            raise ValueError("max_static_anchors must be >= 1")


def anchor_statement(label: str, var: str) -> str:
    return f"print(f'{label}: {{{var}}}')"


@dataclass
class _Site:
    """One candidate anchor before dropout."""

    kind: str
    label: str
    var: str
    # Insert the print after this original line (insert-before-return sites use
    # the preceding line). Return rewrites replace a line span instead.
    after_line: int
    indent: str
    order: int
    replace_span: tuple[int, int] | None = None
    replace_expr_src: str | None = None


@dataclass
class _Emit:
    """Lines to splice in after an original line, with anchor labels attached."""

    lines: list[str] = field(default_factory=list)
    anchor_sites: list[tuple[int, _Site]] = field(default_factory=list)  # (offset, site)


def instrument(
    program: SourceProgram, config: InstrumentationConfig = InstrumentationConfig()
) -> InstrumentedProgram:
    """Insert anchors into the program's entry function.

    Raises ParseError, UnsupportedConstruct, or TooManyAnchors. Deterministic:
    the same (program, config) always yields byte-identical output.
    """
    try:
        tree = ast.parse(program.source_text)
    except SyntaxError as exc:
        raise ParseError(f"invalid source: {exc}", program.id) from exc

    func = _find_entry(tree, program.entry_name, program.id)
    src_lines = program.source_text.splitlines()
    _validate_subset(func, program.id)

    sites = _collect_sites(func, src_lines, program.id, config)
    if len(sites) > config.max_static_anchors:
        raise TooManyAnchors(len(sites), config.max_static_anchors, program.id)

    kept = _apply_dropout(sites, config)
    return _assemble(program, src_lines, kept)


def count_static_anchors(p: InstrumentedProgram) -> int:
    return len(p.anchors)


# --- entry lookup and subset validation -------------------------------------


def _find_entry(tree: ast.Module, entry_name: str, pid: str | None) -> ast.FunctionDef:
    for node in tree.body:
        if isinstance(node, ast.FunctionDef) and node.name == entry_name:
            return node
    async_hit = False
    for node in ast.walk(tree):
        if isinstance(node, ast.FunctionDef) and node.name == entry_name:
            return node
        if isinstance(node, ast.AsyncFunctionDef) and node.name == entry_name:
            async_hit = True
    if async_hit:
        raise UnsupportedConstruct("async entry functions are not supported", pid)
    raise ParseError(f"entry function {entry_name!r} not found", pid)


_ALLOWED_STMTS = (
    ast.Assign,
    ast.AugAssign,
    ast.AnnAssign,
    ast.For,
    ast.While,
    ast.If,
    ast.Return,
    ast.Expr,
    ast.Pass,
    ast.Break,
    ast.Continue,
)


def _validate_subset(func: ast.FunctionDef, pid: str | None) -> None:
    """Check the entry function against the supported statement subset."""

    def check_block(body: list[ast.stmt], in_loop: bool) -> None:
        for stmt in body:
            if isinstance(stmt, (ast.FunctionDef, ast.AsyncFunctionDef)):
                for inner in ast.walk(stmt):
                    if isinstance(inner, ast.Return):
                        raise UnsupportedConstruct(
                            f"nested function {stmt.name!r} contains a return", pid
                        )
                continue  # anchor-free; its scope is not ours to trace
            if not isinstance(stmt, _ALLOWED_STMTS):
                raise UnsupportedConstruct(
                    f"{type(stmt).__name__} statements are outside the supported subset", pid
                )
            if isinstance(stmt, ast.Return) and in_loop:
                raise UnsupportedConstruct("return inside a loop body cannot be anchored", pid)
            if isinstance(stmt, _LOOP_NODES):
                check_block(stmt.body, True)
                check_block(stmt.orelse, True)
            elif isinstance(stmt, ast.If):
                check_block(stmt.body, in_loop)
                check_block(stmt.orelse, in_loop)

    check_block(func.body, False)


# --- anchor site collection --------------------------------------------------


def _simple_target(stmt: ast.stmt) -> str | None:
    """The assigned name for a statement-level assignment to one simple name."""
    if isinstance(stmt, ast.Assign):
        if len(stmt.targets) == 1 and isinstance(stmt.targets[0], ast.Name):
            return stmt.targets[0].id
    elif isinstance(stmt, ast.AugAssign):
        if isinstance(stmt.target, ast.Name):
            return stmt.target.id
    elif isinstance(stmt, ast.AnnAssign):
        if isinstance(stmt.target, ast.Name) and stmt.value is not None:
            return stmt.target.id
    return None


def _loop_assigned_names(loop: ast.stmt) -> list[str]:
    """Simple names assigned anywhere inside the loop, in first-assignment order."""
    found: list[tuple[int, int, str]] = []
    seen: set[str] = set()

    def walk(body: list[ast.stmt]) -> None:
        for stmt in body:
            if isinstance(stmt, (ast.FunctionDef, ast.AsyncFunctionDef)):
                continue
            name = _simple_target(stmt)
            if name is not None and name not in seen:
                seen.add(name)
                found.append((stmt.lineno, stmt.col_offset, name))
            if isinstance(stmt, (*_LOOP_NODES, ast.If)):
                walk(stmt.body)
                walk(stmt.orelse)

    walk(loop.body)  # type: ignore[attr-defined]
    walk(loop.orelse)  # type: ignore[attr-defined]
    found.sort(key=lambda t: (t[0], t[1]))
    return [name for _, _, name in found]


def _leading_ws(line: str) -> str:
    return line[: len(line) - len(line.lstrip())]


def _collect_sites(
    func: ast.FunctionDef,
    src_lines: list[str],
    pid: str | None,
    config: InstrumentationConfig,
) -> list[_Site]:
    sites: list[_Site] = []
    order = 0

    def indent_of(stmt: ast.stmt) -> str:
        indent = _leading_ws(src_lines[stmt.lineno - 1])
        if len(indent) != stmt.col_offset:
            # Statement shares its line with an inline suite or semicolon chain;
            # a line-based insertion would land in the wrong block.
            raise UnsupportedConstruct(
                f"statement on line {stmt.lineno} does not start its own line", pid
            )
        return indent

    def add(site: _Site) -> None:
        nonlocal order
        sites.append(site)
        order += 1

    def next_returns_name(body: list[ast.stmt], idx: int, name: str) -> bool:
        if idx + 1 >= len(body):
            return False
        nxt = body[idx + 1]
        return (
            isinstance(nxt, ast.Return)
            and isinstance(nxt.value, ast.Name)
            and nxt.value.id == name
        )

    def walk(body: list[ast.stmt]) -> None:
        for idx, stmt in enumerate(body):
            name = _simple_target(stmt)
            if name is not None:
                if not next_returns_name(body, idx, name):
                    add(
                        _Site(
                            kind=ANCHOR_KIND_ASSIGNMENT,
                            label=name,
                            var=name,
                            after_line=stmt.end_lineno or stmt.lineno,
                            indent=indent_of(stmt),
                            order=order,
                        )
                    )
            elif isinstance(stmt, _LOOP_NODES):
                names = _loop_assigned_names(stmt)
                if names:
                    loop_indent = indent_of(stmt)
                    for var in names:
                        add(
                            _Site(
                                kind=ANCHOR_KIND_POST_LOOP,
                                label=var,
                                var=var,
                                after_line=stmt.end_lineno or stmt.lineno,
                                indent=loop_indent,
                                order=order,
                            )
                        )
            elif isinstance(stmt, ast.If):
                walk(stmt.body)
                walk(stmt.orelse)
            elif isinstance(stmt, ast.Return):
                if isinstance(stmt.value, ast.Name):
                    add(
                        _Site(
                            kind=ANCHOR_KIND_RETURN,
                            label="return_val",
                            var=stmt.value.id,
                            after_line=stmt.lineno - 1,
                            indent=indent_of(stmt),
                            order=order,
                        )
                    )
                else:
                    if not config.unroll_oneliners:
                        raise UnsupportedConstruct(
                            "return expression needs unrolling but unroll_oneliners is off",
                            pid,
                        )
                    expr_src = "None"
                    if stmt.value is not None:
                        seg = ast.get_source_segment(
                            "\n".join(src_lines) + "\n", stmt.value
                        )
                        if seg is None:  # pragma: no cover - positions always present
                            raise ParseError("could not recover return expression source", pid)
                        expr_src = seg
                    add(
                        _Site(
                            kind=ANCHOR_KIND_RETURN,
                            label="return_val",
                            var="return_val",
                            after_line=stmt.lineno - 1,
                            indent=indent_of(stmt),
                            order=order,
                            replace_span=(stmt.lineno, stmt.end_lineno or stmt.lineno),
                            replace_expr_src=expr_src,
                        )
                    )

    walk(func.body)
    return sites


def _apply_dropout(sites: list[_Site], config: InstrumentationConfig) -> list[_Site]:
    """Drop each non-return site independently; return anchors are never dropped
    so the terminal state stays observable."""
    if config.dropout_rate <= 0.0:
        return sites
    rng = random.Random(config.rng_seed)
    kept: list[_Site] = []
    for site in sites:
        if site.kind != ANCHOR_KIND_RETURN and rng.random() < config.dropout_rate:
            continue
        kept.append(site)
    return kept


# --- line-level assembly ------------------------------------------------------


def _assemble(
    program: SourceProgram, src_lines: list[str], sites: list[_Site]
) -> InstrumentedProgram:
    inserts: dict[int, _Emit] = {}
    replaces: dict[int, _Site] = {}

    for site in sorted(sites, key=lambda s: (s.after_line, s.order)):
        if site.replace_span is not None:
            replaces[site.replace_span[0]] = site
            continue
        emit = inserts.setdefault(site.after_line, _Emit())
        emit.anchor_sites.append((len(emit.lines), site))
        emit.lines.append(site.indent + anchor_statement(site.label, site.var))

    out_lines: list[str] = []
    map_pairs: list[tuple[int, int]] = []
    anchors: list[AnchorDecl] = []

    def flush_inserts(orig_line: int) -> None:
        emit = inserts.get(orig_line)
        if emit is None:
            return
        base = len(out_lines)
        out_lines.extend(emit.lines)
        for offset, site in emit.anchor_sites:
            anchors.append(AnchorDecl(name=site.label, line=base + offset + 1, kind=site.kind))

    flush_inserts(0)
    lineno = 1
    total = len(src_lines)
    while lineno <= total:
        site = replaces.get(lineno)
        if site is not None:
            start, end = site.replace_span  # type: ignore[misc]
            bind = site.indent + "return_val = " + (site.replace_expr_src or "None")
            bind_lines = bind.splitlines()
            for offset, text in enumerate(bind_lines):
                out_lines.append(text)
                if offset <= end - start:
                    map_pairs.append((start + offset, len(out_lines)))
            # Defensive: a span wider than the bind block maps leftovers onto its
            # closing line (cannot happen for source segments, which keep lines).
            for extra in range(len(bind_lines), end - start + 1):
                map_pairs.append((start + extra, len(out_lines)))
            out_lines.append(site.indent + anchor_statement("return_val", "return_val"))
            anchors.append(
                AnchorDecl(name="return_val", line=len(out_lines), kind=ANCHOR_KIND_RETURN)
            )
            out_lines.append(site.indent + "return return_val")
            for covered in range(start, end + 1):
                flush_inserts(covered)
            lineno = end + 1
            continue
        out_lines.append(src_lines[lineno - 1])
        map_pairs.append((lineno, len(out_lines)))
        flush_inserts(lineno)
        lineno += 1

    text = "\n".join(out_lines)
    if program.source_text.endswith("\n"):
        text += "\n"
    anchors.sort(key=lambda a: a.line)
    return InstrumentedProgram(
        origin_id=program.id,
        source_text=text,
        anchors=tuple(anchors),
        line_map=LineMap(tuple(map_pairs)),
    )
