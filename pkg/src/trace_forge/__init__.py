"""trace-forge: execution-trace supervision toolchain.

Instruments subject programs with trace anchors, generates interpreter-verified
ground-truth traces, parses and scores stepwise reasoning trajectories, and
computes bi-level group-relative advantages, plus a dataset pipeline, benchmark
line alignment, and a tabular-policy optimization testbed.
"""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    AnchorDecl,
    Block,
    ExecutionTrace,
    InstrumentedProgram,
    LineMap,
    MalformedResponse,
    SourceProgram,
    TaskInstance,
    Trajectory,
)
