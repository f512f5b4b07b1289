"""Single command-line entry point for all pipeline stages.

Every subcommand reads JSONL (a path or `-` for stdin) and writes JSONL to
--out or stdout, so stages pipe into each other. Exit codes: 0 success,
1 usage error, 2 data error (the offending record id goes to stderr).
"""

from __future__ import annotations

import argparse
import contextlib
import sys
from pathlib import Path
from typing import IO, Any, Iterator

from . import __version__, codec, pipeline, sim
from .advantage import AdvantageMatrix, GroupRewards
from .align import LineQuery, align_file
from .execution import ExecutionFailed, Executor, ExecutorConfig, TraceParseError
from .instrument import InstrumentationConfig, InstrumenterError, instrument
from .model import (
    MalformedResponse,
    SchemaError,
    decode_instrumented,
    decode_source_program,
    decode_trace,
    decode_trajectory,
    encode_instrumented,
    encode_trace,
    encode_trajectory,
    read_jsonl,
    write_jsonl,
)


class DataError(Exception):
    def __init__(self, message: str, record_id: str | None = None):
        self.record_id = record_id
        super().__init__(message)


@contextlib.contextmanager
def _open_in(path: str) -> Iterator[IO[str]]:
    if path == "-":
        yield sys.stdin
    else:
        with open(path, "r", encoding="utf-8") as fp:
            yield fp


@contextlib.contextmanager
def _open_out(path: str | None) -> Iterator[IO[str]]:
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8") as fp:
            yield fp


def _read_inputs(path: str) -> dict[str, str]:
    inputs: dict[str, str] = {}
    with _open_in(path) as fp:
        for rec in read_jsonl(fp):
            try:
                inputs[str(rec["id"])] = str(rec["input"])
            except KeyError as exc:
                raise DataError(f"inputs record missing field {exc}") from exc
    return inputs


def _executor_from_args(args: argparse.Namespace) -> Executor:
    return Executor(
        ExecutorConfig(
            pool_size=getattr(args, "pool", 1) or 1,
            timeout_ms=getattr(args, "timeout_ms", 5000),
            fixture_path=getattr(args, "fixtures", None),
        )
    )


# --- subcommand implementations ------------------------------------------------


def _cmd_instrument(args: argparse.Namespace) -> int:
    config = InstrumentationConfig(
        max_static_anchors=args.max_anchors,
        dropout_rate=args.dropout,
        rng_seed=args.seed,
    )
    with _open_in(args.infile) as src, _open_out(args.out) as dst:
        for rec in pipeline.assign_ids(read_jsonl(src)):
            program = decode_source_program(rec)
            try:
                instrumented = instrument(program, config)
            except InstrumenterError as exc:
                raise DataError(str(exc), program.id) from exc
            write_jsonl([encode_instrumented(instrumented)], dst)
    return 0


def _cmd_trace(args: argparse.Namespace) -> int:
    inputs = _read_inputs(args.inputs)
    with _executor_from_args(args) as executor:
        with _open_in(args.infile) as src:
            records = [decode_instrumented(rec) for rec in read_jsonl(src)]

        def run_one(instrumented):
            input_literal = inputs.get(instrumented.origin_id)
            if input_literal is None:
                raise DataError("no input for program", instrumented.origin_id)
            try:
                return executor.generate_trace(instrumented, input_literal)
            except (ExecutionFailed, TraceParseError) as exc:
                raise DataError(str(exc), instrumented.origin_id) from exc

        if args.pool > 1 and len(records) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=args.pool) as tp:
                traces = list(tp.map(run_one, records))
        else:
            traces = [run_one(rec) for rec in records]
        with _open_out(args.out) as dst:
            for instrumented, trace in zip(records, traces):
                write_jsonl([encode_trace(instrumented.origin_id, trace)], dst)
    return 0


def _cmd_parse(args: argparse.Namespace) -> int:
    task_kind = "output_prediction" if args.task == "output" else "input_prediction"
    with _open_in(args.infile) as src, _open_out(args.out) as dst:
        for rec in read_jsonl(src):
            try:
                rec_id, text = str(rec["id"]), str(rec["text"])
            except KeyError as exc:
                raise DataError(f"response record missing field {exc}") from exc
            parsed = codec.parse_or_malformed(text, task_kind)
            write_jsonl([encode_trajectory(rec_id, parsed)], dst)
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    from .rewards import RewardConfig, score

    traces = {}
    with _open_in(args.traces) as fp:
        for rec in read_jsonl(fp):
            origin_id, trace = decode_trace(rec)
            traces[origin_id] = trace
    cfg = RewardConfig(
        r_internal_budget=args.internal_budget, r_final=args.final_budget
    )
    counters: dict[str, int] = {}
    with _open_in(args.trajectories) as src, _open_out(args.out) as dst:
        for rec in read_jsonl(src):
            instance_id, trajectory = decode_trajectory(rec)
            trace = traces.get(instance_id)
            if trace is None:
                raise DataError("no trace for trajectory", instance_id)
            vector = score(trajectory, trace, cfg)
            index = counters.get(instance_id, 0)
            counters[instance_id] = index + 1
            write_jsonl(
                [
                    {
                        "instance_id": instance_id,
                        "index": index,
                        "step": list(vector.step),
                        "final": vector.final,
                        "budgeted_total": vector.budgeted_total,
                    }
                ],
                dst,
            )
    return 0


def _cmd_advantage(args: argparse.Namespace) -> int:
    groups: dict[str, list[dict[str, Any]]] = {}
    order: list[str] = []
    with _open_in(args.rewards) as fp:
        for rec in read_jsonl(fp):
            try:
                instance_id = str(rec["instance_id"])
            except KeyError as exc:
                raise DataError(f"reward record missing field {exc}") from exc
            if instance_id not in groups:
                groups[instance_id] = []
                order.append(instance_id)
            groups[instance_id].append(rec)

    with _open_out(args.out) as dst:
        for instance_id in order:
            records = groups[instance_id]
            try:
                rewards = GroupRewards.from_vectors(
                    [list(map(int, r["step"])) for r in records],
                    [int(r["final"]) for r in records],
                )
                adv = AdvantageMatrix.from_rewards(
                    rewards, lam=args.lam, epsilon=args.epsilon
                )
            except (KeyError, ValueError) as exc:
                raise DataError(str(exc), instance_id) from exc
            write_jsonl(
                [
                    {
                        "instance_id": instance_id,
                        "group": adv.group.tolist(),
                        "intra": adv.intra.tolist(),
                        "combined": adv.combined.tolist(),
                        "final_advantage": adv.final.tolist(),
                        "lambda": adv.lam,
                        "epsilon": adv.epsilon,
                    }
                ],
                dst,
            )
    return 0


def _cmd_build_dataset(args: argparse.Namespace) -> int:
    with _open_in(args.programs) as fp:
        programs = [decode_source_program(rec) for rec in pipeline.assign_ids(read_jsonl(fp))]
    inputs = _read_inputs(args.inputs)
    with _open_in(args.bench) as fp:
        bench = list(read_jsonl(fp))
    cfg = pipeline.PipelineConfig(
        max_trace_lines=args.max_trace,
        ngram_k=args.ngram,
        dropout_rate=args.dropout,
        seed=args.seed,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _executor_from_args(args) as executor:
        result = pipeline.build(programs, inputs, bench, cfg, executor)
    write_jsonl(result.sft_set, out_dir / "sft.jsonl")
    write_jsonl(result.rl_set, out_dir / "rl.jsonl")
    write_jsonl(result.terminal_only_set, out_dir / "terminal_only.jsonl")
    write_jsonl(
        ({"id": pid, "reason": reason} for pid, reason in result.rejected),
        out_dir / "rejected.jsonl",
    )
    if not args.quiet:
        print(
            f"sft={len(result.sft_set)} rl={len(result.rl_set)} "
            f"terminal_only={len(result.terminal_only_set)} rejected={len(result.rejected)}",
            file=sys.stderr,
        )
    return 0


def _cmd_align(args: argparse.Namespace) -> int:
    maps = {}
    with _open_in(args.maps) as fp:
        for rec in read_jsonl(fp):
            instrumented = decode_instrumented(rec)
            maps[instrumented.origin_id] = instrumented.line_map
    with _open_in(args.queries) as src, _open_out(args.out) as dst:
        for rec in read_jsonl(src):
            try:
                rec_id = str(rec["id"])
                query = LineQuery(
                    task=str(rec["task"]),
                    payload=str(rec.get("payload", "")),
                    line=int(rec["line"]) if rec.get("line") is not None else None,
                )
            except (KeyError, ValueError) as exc:
                raise DataError(f"bad query record: {exc}", str(rec.get("id"))) from exc
            line_map = maps.get(rec_id)
            if line_map is None:
                raise DataError("no line map for query", rec_id)
            try:
                aligned = align_file([query], line_map)[0]
            except Exception as exc:
                raise DataError(str(exc), rec_id) from exc
            write_jsonl(
                [
                    {
                        "id": rec_id,
                        "task": aligned.task,
                        "line": aligned.line,
                        "payload": aligned.payload,
                    }
                ],
                dst,
            )
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    env = sim.SyntheticEnv.hard(seed=args.env_seed)
    curve = sim.train(
        env,
        method=args.method,
        steps=args.steps,
        lr=args.lr,
        lam=args.lam,
        seed=args.seed,
        G=args.group,
        kl_coeff=args.kl_coeff,
    )
    paths = sim.plot_curves({args.method: curve}, args.out, smooth_window=args.smooth)
    if not args.quiet:
        print(
            f"final expected reward {curve.expected_final_reward[-1]:.4f}, "
            f"stepwise accuracy {curve.stepwise_accuracy[-1]:.4f} -> {paths['csv']}",
            file=sys.stderr,
        )
    return 0


# --- argument parsing ------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trace-forge",
        description="Execution-trace supervision toolchain: instrument programs, "
        "generate ground-truth traces, score trajectories, and estimate advantages.",
    )
    parser.add_argument("--version", action="version", version=f"trace-forge {__version__}")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("instrument", help="insert trace anchors into programs")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-anchors", type=int, default=10)
    p.set_defaults(func=_cmd_instrument)

    p = sub.add_parser("trace", help="execute instrumented programs for ground-truth traces")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--inputs", required=True)
    p.add_argument("--out")
    p.add_argument("--pool", type=int, default=1)
    p.add_argument("--timeout-ms", type=int, default=5000)
    p.add_argument("--fixtures", help="replay recorded traces instead of running the shim")
    p.set_defaults(func=_cmd_trace)

    p = sub.add_parser("parse", help="parse tagged model responses into trajectories")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--task", choices=["output", "input"], default="output")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_parse)

    p = sub.add_parser("score", help="score trajectories against ground-truth traces")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--out")
    p.add_argument("--internal-budget", type=float, default=1.0)
    p.add_argument("--final-budget", type=float, default=1.0)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("advantage", help="group-relative and intra-trajectory advantages")
    p.add_argument("--rewards", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.3)
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_advantage)

    p = sub.add_parser("build-dataset", help="run the full dataset construction pipeline")
    p.add_argument("--programs", required=True)
    p.add_argument("--inputs", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-trace", type=int, default=10)
    p.add_argument("--ngram", type=int, default=10)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pool", type=int, default=1)
    p.add_argument("--timeout-ms", type=int, default=5000)
    p.add_argument("--fixtures")
    p.set_defaults(func=_cmd_build_dataset)

    p = sub.add_parser("align", help="remap line-indexed queries to instrumented coordinates")
    p.add_argument("--queries", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("simulate", help="train the tabular policy testbed")
    p.add_argument("--method", choices=list(sim.METHODS), default=sim.METHOD_BILEVEL)
    p.add_argument("--lambda", dest="lam", type=float, default=0.3)
    p.add_argument("--group", type=int, default=sim.DEFAULT_GROUP_SIZE)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--env-seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=sim.DEFAULT_LEARNING_RATE)
    p.add_argument("--kl-coeff", type=float, default=sim.DEFAULT_KL_COEFF)
    p.add_argument("--smooth", type=int, default=25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; this tool reserves 2 for data errors.
        return 0 if exc.code in (0, None) else 1
    try:
        return int(args.func(args))
    except DataError as exc:
        if exc.record_id is not None:
            print(f"record {exc.record_id}: {exc}", file=sys.stderr)
        else:
            print(str(exc), file=sys.stderr)
        return 2
    except SchemaError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except ExecutionFailed as exc:
        print(str(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
