"""
Replay of schedules against a chain: the memory model every solver must be
sound against.

A compute raises the peak to the resident memory plus its temporary memory
plus the size of those outputs that are not already resident; its outputs
then become resident. A forget lowers the resident memory and never raises
the peak, so memory freed right after a compute still counts towards that
compute's peak. A data node with several contributing computes (gradient
accumulation) is resident after its first contribution and is only usable
once every contributor has run since it was materialized.

.. autofunction:: rematsched.simulate
.. autofunction:: rematsched.eager_free_schedule
.. autofunction:: rematsched.no_recompute_schedule
.. autoclass:: rematsched.Simulator
.. autoclass:: rematsched.SimReport

"""

import collections
import csv
import dataclasses
import logging
from typing import Iterable, Optional, Sequence, TextIO

from .errors import (
    BudgetExceeded,
    DanglingDependency,
    DoubleLoss,
    ForgetAbsent,
    IncompleteSchedule,
    UnknownTarget,
)
from .model import (
    BlockBwd,
    BlockFwd,
    BlockOption,
    CDGraph,
    Chain,
    CKind,
    Compute,
    DataKey,
    Forget,
    Schedule,
    ScheduleOp,
)

__all__ = (
    "ComputeKey",
    "SimState",
    "TraceRow",
    "SimReport",
    "Simulator",
    "step",
    "simulate",
    "expand_ops",
    "reindex_ops",
    "format_op",
    "write_trace_csv",
    "eager_free_schedule",
    "no_recompute_schedule",
)

_LOGGER = logging.getLogger(__name__)

#: Chain-wide name of a computation: (block index, compute id).
ComputeKey = tuple[int, str]

TRACE_HEADER = ("op_index", "op", "elapsed_us", "current_mem", "peak_mem")


@dataclasses.dataclass
class SimState:
    """Mutable replay state."""

    resident: dict[DataKey, int] = dataclasses.field(default_factory=dict)
    current_mem: int = 0
    peak_mem: int = 0
    elapsed: int = 0
    loss_done: bool = False
    runs: collections.Counter[ComputeKey] = dataclasses.field(
        default_factory=collections.Counter
    )
    #: Contributors seen by each resident data since it was materialized.
    contributions: dict[DataKey, set[ComputeKey]] = dataclasses.field(
        default_factory=dict
    )

    @classmethod
    def initial(cls, chain: Chain) -> "SimState":
        """State at the start of an iteration: the model input is resident."""
        state = cls()
        if chain.blocks:
            key = (0, chain.blocks[0].input_data)
            state.resident[key] = chain.act_sizes[0]
            state.contributions[key] = set()
            state.current_mem = chain.act_sizes[0]
        return state

    def copy(self) -> "SimState":
        """Independent copy of this state."""
        return SimState(
            dict(self.resident),
            self.current_mem,
            self.peak_mem,
            self.elapsed,
            self.loss_done,
            collections.Counter(self.runs),
            {key: set(value) for key, value in self.contributions.items()},
        )


@dataclasses.dataclass(frozen=True)
class TraceRow:
    """State after one op of a replay."""

    op_index: int
    op: ScheduleOp
    elapsed_us: int
    current_mem: int
    peak_mem: int
    #: Peak reached during this op alone (equal to memory for forgets).
    step_peak: int


@dataclasses.dataclass(frozen=True)
class SimReport:
    """Outcome of a full replay."""

    makespan: int
    peak_mem: int
    #: Memory right after the loss and the forgets that follow it.
    mem_at_loss: Optional[int]
    #: Makespan minus the time of running every computation once.
    overhead: int
    trace: tuple[TraceRow, ...] = ()


@dataclasses.dataclass(frozen=True)
class _ComputeInfo:
    time: int
    tmp_mem: int
    kind: CKind
    deps: tuple[DataKey, ...]
    outputs: tuple[DataKey, ...]


class _ReplayGraph:
    """Chain flattened to chain-wide keys, seams unified."""

    def __init__(self, chain: Chain) -> None:
        self.chain = chain
        self.computes: dict[ComputeKey, _ComputeInfo] = {}
        self.sizes: dict[DataKey, int] = {}
        parents: dict[DataKey, set[ComputeKey]] = collections.defaultdict(set)
        for index, block in enumerate(chain.blocks):
            for dnode in block.dnodes:
                self.sizes[chain.data_key(index, dnode.id)] = dnode.size
            for cnode in block.cnodes:
                if chain.is_virtual_loss(index, cnode.id):
                    continue
                key = (index, cnode.id)
                outputs = tuple(
                    chain.data_key(index, out) for out in cnode.outputs
                )
                self.computes[key] = _ComputeInfo(
                    cnode.time,
                    cnode.tmp_mem,
                    cnode.kind,
                    tuple(chain.data_key(index, dep) for dep in cnode.deps),
                    tuple(dict.fromkeys(outputs)),
                )
                for out in outputs:
                    parents[out].add(key)
        self.parents = {
            key: frozenset(value) for key, value in parents.items()
        }
        self.required = frozenset(
            key
            for key, info in self.computes.items()
            if info.kind in (CKind.BACKWARD, CKind.LOSS)
        )

    def compute_key(self, op: Compute, op_index: int) -> ComputeKey:
        """Validate and resolve a compute target."""
        if not 0 <= op.block < len(self.chain.blocks):
            raise UnknownTarget(f"no block {op.block}", op_index)
        if self.chain.is_virtual_loss(op.block, op.target):
            raise UnknownTarget(
                f"loss of block {op.block} stands for the later blocks and "
                "cannot be computed",
                op_index,
            )
        key = (op.block, op.target)
        if key not in self.computes:
            raise UnknownTarget(
                f"block {op.block} has no compute {op.target}", op_index
            )
        return key

    def data_key(self, op: Forget, op_index: int) -> DataKey:
        """Validate and resolve a forget target."""
        if not 0 <= op.block < len(self.chain.blocks):
            raise UnknownTarget(f"no block {op.block}", op_index)
        if op.target not in self.chain.blocks[op.block].dnode_map:
            raise UnknownTarget(
                f"block {op.block} has no data {op.target}", op_index
            )
        return self.chain.data_key(op.block, op.target)


def format_op(op: ScheduleOp) -> str:
    """Compact textual form of an op, as used in traces."""
    names = {
        Compute: "compute",
        Forget: "forget",
        BlockFwd: "block_fwd",
        BlockBwd: "block_bwd",
    }
    return f"{names[type(op)]}:{op.block}:{op.target}"


def reindex_ops(
    ops: Iterable[ScheduleOp], block: int
) -> tuple[ScheduleOp, ...]:
    """Move ops to another block index."""
    return tuple(dataclasses.replace(op, block=block) for op in ops)


def expand_ops(
    ops: Iterable[ScheduleOp],
    options: Optional[Sequence[Sequence[BlockOption]]] = None,
) -> list[ScheduleOp]:
    """
    Replace block-level ops by the op lists of their options.

    :param ops: Ops possibly containing block-level ops.
    :param options: Options of each block, indexed by option id.
    :return: The flat op list.
    :raises UnknownTarget: If a block-level op names a missing option.
    """
    flat: list[ScheduleOp] = []
    for index, op in enumerate(ops):
        if isinstance(op, (BlockFwd, BlockBwd)):
            if (
                options is None
                or not 0 <= op.block < len(options)
                or not 0 <= op.target < len(options[op.block])
            ):
                raise UnknownTarget(
                    f"no option {op.target} for block {op.block}", index
                )
            option = options[op.block][op.target]
            flat.extend(
                option.fwd_ops if isinstance(op, BlockFwd) else option.bwd_ops
            )
        else:
            flat.append(op)
    return flat


class Simulator:
    """
    Step-by-step replay of flat ops on a chain.

    :param chain: The chain replayed against.
    :param budget: If given, a step peak above it raises
        :class:`~rematsched.errors.BudgetExceeded`.
    :param state: Starting state; defaults to :meth:`SimState.initial`.
    """

    def __init__(
        self,
        chain: Chain,
        budget: Optional[int] = None,
        state: Optional[SimState] = None,
    ) -> None:
        self.graph = _ReplayGraph(chain)
        self.budget = budget
        self.state = state if state is not None else SimState.initial(chain)
        self.mem_at_loss: Optional[int] = None
        self._after_loss = False

    def _compute(self, op: Compute, op_index: int) -> int:
        key = self.graph.compute_key(op, op_index)
        info = self.graph.computes[key]
        state = self.state
        if info.kind == CKind.LOSS and state.loss_done:
            raise DoubleLoss("the loss is computed a second time", op_index)
        for dep in info.deps:
            if dep not in state.resident:
                raise DanglingDependency(
                    f"{op.target} needs {dep[1]} of block {dep[0]}, which is "
                    "not resident",
                    op_index,
                )
            missing = self.graph.parents.get(dep, frozenset()) - (
                state.contributions[dep]
            )
            if missing:
                raise DanglingDependency(
                    f"{op.target} needs {dep[1]} of block {dep[0]}, still "
                    f"waiting for {sorted(name for _, name in missing)}",
                    op_index,
                )

        new_bytes = sum(
            self.graph.sizes[out]
            for out in info.outputs
            if out not in state.resident
        )
        step_peak = state.current_mem + info.tmp_mem + new_bytes
        state.peak_mem = max(state.peak_mem, step_peak)
        if self.budget is not None and step_peak > self.budget:
            raise BudgetExceeded(step_peak, self.budget, op_index)

        for out in info.outputs:
            if out not in state.resident:
                state.resident[out] = self.graph.sizes[out]
                state.contributions[out] = set()
            state.contributions[out].add(key)
        state.current_mem += new_bytes
        state.elapsed += info.time
        state.runs[key] += 1

        self._after_loss = info.kind == CKind.LOSS
        if self._after_loss:
            state.loss_done = True
            self.mem_at_loss = state.current_mem
        return step_peak

    def _forget(self, op: Forget, op_index: int) -> int:
        key = self.graph.data_key(op, op_index)
        state = self.state
        if key not in state.resident:
            raise ForgetAbsent(
                f"{op.target} of block {op.block} is not resident", op_index
            )
        state.current_mem -= state.resident.pop(key)
        del state.contributions[key]
        if self._after_loss:
            self.mem_at_loss = state.current_mem
        return state.current_mem

    def step(self, op: ScheduleOp, op_index: int = 0) -> int:
        """
        Apply one flat op.

        :param op: A :class:`~rematsched.Compute` or
            :class:`~rematsched.Forget`.
        :param op_index: Position reported in errors.
        :return: The peak reached during the op.
        :raises SimulationError: If the op is not applicable.
        """
        if isinstance(op, Compute):
            return self._compute(op, op_index)
        if isinstance(op, Forget):
            return self._forget(op, op_index)
        raise UnknownTarget(
            "block-level ops must be expanded before replay", op_index
        )

    def check_complete(self) -> None:
        """
        Verify every backward and the loss ran exactly once.

        :raises IncompleteSchedule: If not.
        """
        runs = self.state.runs
        wrong = sorted(
            key for key in self.graph.required if runs.get(key, 0) != 1
        )
        if wrong:
            block, name = wrong[0]
            raise IncompleteSchedule(
                f"{name} of block {block} ran {runs.get(wrong[0], 0)} times "
                f"({len(wrong)} computations not run exactly once)"
            )


def step(state: SimState, op: ScheduleOp, chain: Chain) -> SimState:
    """
    Apply one flat op to a copy of a state.

    :param state: State before the op; left untouched.
    :param op: The op to apply.
    :param chain: The chain the op refers to.
    :return: The state after the op.
    """
    simulator = Simulator(chain, state=state.copy())
    simulator.step(op)
    return simulator.state


def simulate(
    schedule: Schedule,
    chain: Chain,
    budget: Optional[int] = None,
    options: Optional[Sequence[Sequence[BlockOption]]] = None,
    trace: bool = False,
) -> SimReport:
    """
    Replay a whole schedule.

    :param schedule: The schedule; block-level ops are expanded with
        ``options``.
    :param chain: The chain the schedule refers to.
    :param budget: Byte budget the peak must stay within, if any.
    :param options: Options of each block, needed for block-level ops.
    :param trace: Whether to record one :class:`TraceRow` per op.
    :return: The replay report.
    :raises SimulationError: On the first inapplicable op, on a budget
        violation, or if a non-empty schedule does not run every backward
        and the loss exactly once.
    """
    ops = expand_ops(schedule.ops, options)
    simulator = Simulator(chain, budget)
    rows = []
    for index, op in enumerate(ops):
        step_peak = simulator.step(op, index)
        if trace:
            state = simulator.state
            rows.append(
                TraceRow(
                    index,
                    op,
                    state.elapsed,
                    state.current_mem,
                    state.peak_mem,
                    step_peak,
                )
            )
    overhead = 0
    if ops:
        simulator.check_complete()
        overhead = simulator.state.elapsed - chain.one_pass_time()
    _LOGGER.debug(
        "Replayed %d ops: makespan %d us, peak %d bytes",
        len(ops),
        simulator.state.elapsed,
        simulator.state.peak_mem,
    )
    return SimReport(
        simulator.state.elapsed,
        simulator.state.peak_mem,
        simulator.mem_at_loss,
        overhead,
        tuple(rows),
    )


def write_trace_csv(report: SimReport, stream: TextIO) -> None:
    """
    Write the trace of a report as CSV.

    :param report: A report produced with ``trace=True``.
    :param stream: Text stream to write to.
    """
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for row in report.trace:
        writer.writerow(
            (
                row.op_index,
                format_op(row.op),
                row.elapsed_us,
                row.current_mem,
                row.peak_mem,
            )
        )


# ==============================================================================
# Canonical one-pass schedules
# ==============================================================================
def _last_use(g: CDGraph) -> dict[str, int]:
    """Position of the last compute touching each freeable data node."""
    edges = g.edges
    keep = {g.input_data, *g.retained_sinks}
    last = {}
    for dnode in g.dnodes:
        if dnode.id in keep:
            continue
        touching = (
            *edges.parents_of_data[dnode.id],
            *edges.children_of_data[dnode.id],
        )
        last[dnode.id] = max(g.cnode_index[cid] for cid in touching)
    return last


def _one_pass(g: CDGraph, block: int, free_from: int) -> Schedule:
    last = _last_use(g)
    ops: list[ScheduleOp] = []
    freed: set[str] = set()
    for pos, cnode in enumerate(g.cnodes):
        ops.append(Compute(block, cnode.id))
        if pos < free_from:
            continue
        for dnode in g.dnodes:
            if dnode.id in last and dnode.id not in freed:
                if last[dnode.id] <= pos:
                    ops.append(Forget(block, dnode.id))
                    freed.add(dnode.id)
    return Schedule(tuple(ops))


def eager_free_schedule(g: CDGraph, block: int = 0) -> Schedule:
    """
    Run each computation once, forgetting data right after its last use.

    :param g: The block.
    :param block: Block index written into the ops.
    :return: The schedule.
    """
    return _one_pass(g, block, 0)


def no_recompute_schedule(g: CDGraph, block: int = 0) -> Schedule:
    """
    Run each computation once, forgetting nothing before the loss.

    From the loss onwards data is forgotten after its last use.

    :param g: The block.
    :param block: Block index written into the ops.
    :return: The schedule.
    """
    return _one_pass(g, block, g.loss_index)
