"""
Exact solving of block models, and an exhaustive oracle to check them
against.

:class:`BranchAndBoundSolver` is a depth-first search over the binary
variables. Every row is kept in ``<=`` form; fixing a variable re-examines
the rows it appears in and fixes any variable whose other value would make
a row's minimum activity exceed its right-hand side. The cost of the
variables fixed to 1 is a lower bound on every completion, as objective
coefficients are nonnegative.

:func:`brute_force_block` enumerates stage-structured schedules directly
on the block, independently of the model: computations first run in order,
within a stage each computation runs at most once and in order, and any
resident data can be forgotten after any computation.

:func:`brute_force_any_order` drops the stages and searches every order of
runs and forgets, which bounds the stage-structured optimum from below.

.. autofunction:: rematsched.solve
.. autofunction:: rematsched.brute_force_block
.. autofunction:: rematsched.brute_force_any_order
.. autoclass:: rematsched.SolveResult
.. autoclass:: rematsched.Solver

"""

import dataclasses
import enum
import heapq
import itertools
import logging
import time
from typing import Optional, Protocol, Sequence

from .block_ilp import EQ, GE, BudgetPair, IlpModel
from .errors import SearchExploded
from .model import CDGraph, CKind, Compute, Forget, Schedule, ScheduleOp

__all__ = (
    "DEFAULT_TIME_LIMIT",
    "DEFAULT_STATE_CAP",
    "SolveStatus",
    "SolveStats",
    "SolveResult",
    "Solver",
    "BranchAndBoundSolver",
    "solve",
    "OracleResult",
    "brute_force_block",
    "brute_force_any_order",
)

_LOGGER = logging.getLogger(__name__)

DEFAULT_TIME_LIMIT = 120.0
DEFAULT_STATE_CAP = 2_000_000

#: Nodes between two clock reads.
_CLOCK_PERIOD = 256


class SolveStatus(str, enum.Enum):
    """Outcome of a solve."""

    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    TIMED_OUT = "timed_out"


@dataclasses.dataclass(frozen=True)
class SolveStats:
    """Search statistics."""

    nodes: int
    wall_time: float


@dataclasses.dataclass(frozen=True)
class SolveResult:
    """
    Result of solving a model.

    ``assignment`` is the optimum when :attr:`status` is optimal and the best
    incumbent, if any, when the search timed out.
    """

    status: SolveStatus
    objective: Optional[int]
    assignment: Optional[tuple[int, ...]]
    stats: SolveStats

    def named_assignment(self, model: IlpModel) -> dict[str, int]:
        """The assignment keyed by variable name."""
        if self.assignment is None:
            return {}
        return dict(zip(model.names, self.assignment))


class Solver(Protocol):
    """Anything able to solve block models exactly."""

    def solve(self, model: IlpModel, time_limit: float) -> SolveResult:
        """Solve a model within a time limit in seconds."""


class _Conflict(Exception):
    """Propagation reached an empty domain."""


class _Search:
    """State of one branch-and-bound run."""

    def __init__(self, model: IlpModel, time_limit: float) -> None:
        self.model = model
        self.deadline = time.monotonic() + time_limit
        n_vars = model.num_variables
        # Rows as (vars, coefs, rhs) with sum(coef * var) <= rhs.
        self.rows: list[tuple[tuple[int, ...], tuple[int, ...], int]] = []
        for row in model.rows:
            variables = tuple(var for var, _ in row.coefs)
            coefs = tuple(coef for _, coef in row.coefs)
            if row.sense in (GE, EQ):
                self.rows.append(
                    (variables, tuple(-c for c in coefs), -row.rhs)
                )
            if row.sense != GE:
                self.rows.append((variables, coefs, row.rhs))
        self.watch: list[list[int]] = [[] for _ in range(n_vars)]
        for index, (variables, _, _) in enumerate(self.rows):
            for var in variables:
                self.watch[var].append(index)
        self.values = [-1] * n_vars
        self.trail: list[int] = []
        self.cost = 0
        self.nodes = 0
        self.best: Optional[tuple[int, ...]] = None
        self.best_cost: Optional[int] = None
        self.timed_out = False

    def _assign(self, var: int, value: int, queue: list[int]) -> None:
        current = self.values[var]
        if current == value:
            return
        if current != -1:
            raise _Conflict()
        self.values[var] = value
        self.trail.append(var)
        if value:
            self.cost += self.model.objective.get(var, 0)
        queue.extend(self.watch[var])

    def _propagate(self, queue: list[int]) -> None:
        values = self.values
        while queue:
            variables, coefs, rhs = self.rows[queue.pop()]
            min_act = 0
            for var, coef in zip(variables, coefs):
                value = values[var]
                if value == -1:
                    if coef < 0:
                        min_act += coef
                else:
                    min_act += coef * value
            if min_act > rhs:
                raise _Conflict()
            slack = rhs - min_act
            for var, coef in zip(variables, coefs):
                if values[var] == -1 and abs(coef) > slack:
                    self._assign(var, 0 if coef > 0 else 1, queue)

    def fix(self, var: int, value: int) -> bool:
        """Fix a variable and propagate; False on conflict."""
        try:
            queue: list[int] = []
            self._assign(var, value, queue)
            self._propagate(queue)
        except _Conflict:
            return False
        return True

    def undo(self, mark: int) -> None:
        """Unfix every variable fixed after ``mark`` trail entries."""
        while len(self.trail) > mark:
            var = self.trail.pop()
            if self.values[var]:
                self.cost -= self.model.objective.get(var, 0)
            self.values[var] = -1

    def root(self) -> bool:
        """Apply the fixings and propagate every row once."""
        try:
            queue = list(range(len(self.rows)))
            for var, value in self.model.fixed.items():
                self._assign(var, value, queue)
            self._propagate(queue)
        except _Conflict:
            return False
        return True

    def _next_var(self) -> Optional[int]:
        for var in self.model.branch_order:
            if self.values[var] == -1:
                return var
        return next(
            (var for var, value in enumerate(self.values) if value == -1),
            None,
        )

    def _pruned(self) -> bool:
        return self.best_cost is not None and self.cost >= self.best_cost

    def _clock(self) -> bool:
        self.nodes += 1
        if self.nodes % _CLOCK_PERIOD == 0:
            self.timed_out = time.monotonic() > self.deadline
        return self.timed_out

    def run(self) -> None:
        """Depth-first search with an explicit stack of open branches."""
        # Each frame: (variable, value still to try, trail mark).
        stack: list[tuple[int, Optional[int], int]] = []
        descend = True
        while True:
            if descend and not self._clock():
                if self._pruned():
                    descend = False
                    continue
                var = self._next_var()
                if var is None:
                    self.best = tuple(self.values)
                    self.best_cost = self.cost
                    _LOGGER.debug(
                        "Incumbent %d after %d nodes", self.cost, self.nodes
                    )
                    descend = False
                    continue
                first = self.model.first_value.get(var, 0)
                mark = len(self.trail)
                stack.append((var, 1 - first, mark))
                descend = self.fix(var, first)
                continue
            if self.timed_out:
                return
            # Backtrack to the deepest frame with an untried value.
            while stack:
                var, alt, mark = stack.pop()
                self.undo(mark)
                if alt is not None:
                    stack.append((var, None, mark))
                    descend = self.fix(var, alt)
                    break
            else:
                return


class BranchAndBoundSolver:
    """Depth-first branch-and-bound with row propagation."""

    def solve(
        self, model: IlpModel, time_limit: float = DEFAULT_TIME_LIMIT
    ) -> SolveResult:
        """
        Solve a model to optimality.

        :param model: The model.
        :param time_limit: Wall-clock limit in seconds.
        :return: The result; an optimal assignment is re-checked against
            every row before being returned.
        """
        start = time.monotonic()
        search = _Search(model, time_limit)
        if search.root():
            root_bound = search.cost
            search.run()
            if search.best_cost is not None:
                assert root_bound <= search.best_cost
        elapsed = time.monotonic() - start
        stats = SolveStats(search.nodes, elapsed)

        if search.timed_out:
            _LOGGER.warning(
                "Solve timed out after %.1fs (%d nodes) for budget %s",
                elapsed,
                search.nodes,
                model.budget,
            )
            return SolveResult(
                SolveStatus.TIMED_OUT, search.best_cost, search.best, stats
            )
        if search.best is None:
            _LOGGER.debug("Budget %s is infeasible", model.budget)
            return SolveResult(SolveStatus.INFEASIBLE, None, None, stats)
        broken = model.violated_rows(search.best)
        assert not broken, f"solver returned a broken assignment: {broken}"
        return SolveResult(
            SolveStatus.OPTIMAL, search.best_cost, search.best, stats
        )


def solve(
    model: IlpModel,
    time_limit: float = DEFAULT_TIME_LIMIT,
    solver: Optional[Solver] = None,
) -> SolveResult:
    """
    Solve a block model.

    :param model: The model.
    :param time_limit: Wall-clock limit in seconds.
    :param solver: Solver to use; the internal branch-and-bound by default.
    :return: The result.
    """
    return (solver or BranchAndBoundSolver()).solve(model, time_limit)


# ==============================================================================
# Exhaustive oracle
# ==============================================================================
@dataclasses.dataclass(frozen=True)
class OracleResult:
    """Cheapest schedule found by exhaustive search, if any."""

    feasible: bool
    #: Recomputation time of the best schedule.
    cost: Optional[int]
    witness: Optional[Schedule]


# Resident data, contributors seen per resident data, runs per compute.
_State = tuple[frozenset[str], frozenset[tuple[str, str]], tuple[int, ...]]


class _Oracle:
    def __init__(self, g: CDGraph, budget: BudgetPair, cap: int) -> None:
        self.g = g
        self.budget = budget
        self.cap = cap
        edges = g.edges
        self.parents = {d: set(p) for d, p in edges.parents_of_data.items()}
        self.sinks = frozenset(g.retained_sinks)

    def memory(self, resident: frozenset[str]) -> int:
        return sum(self.g.size(d) for d in resident)

    def ready(self, state: _State, dep: str) -> bool:
        resident, contrib, _ = state
        return dep in resident and all(
            (dep, parent) in contrib for parent in self.parents[dep]
        )

    def run(
        self, state: _State, j: int
    ) -> Optional[tuple[_State, int]]:
        """Run compute ``j``; None when not runnable within budget."""
        g = self.g
        cnode = g.cnodes[j]
        resident, contrib, runs = state
        if runs[j] >= (self.cap if cnode.kind == CKind.FORWARD else 1):
            return None
        if not all(self.ready(state, dep) for dep in cnode.deps):
            return None
        new = [
            out for out in dict.fromkeys(cnode.outputs) if out not in resident
        ]
        peak = self.memory(resident) + cnode.tmp_mem
        peak += sum(g.size(out) for out in new)
        if peak > self.budget.m_peak:
            return None
        fresh = frozenset(new)
        contrib = frozenset(c for c in contrib if c[0] not in fresh)
        contrib |= {(out, cnode.id) for out in cnode.outputs}
        counts = list(runs)
        counts[j] += 1
        return (resident | fresh, contrib, tuple(counts)), cnode.time

    def freeable(self, state: _State) -> list[str]:
        return sorted(state[0] - {self.g.input_data} - self.sinks)

    def forget(self, state: _State, gone: frozenset[str]) -> _State:
        resident, contrib, runs = state
        return (
            resident - gone,
            frozenset(c for c in contrib if c[0] not in gone),
            runs,
        )

    def forget_choices(
        self, state: _State
    ) -> list[tuple[_State, tuple[str, ...]]]:
        freeable = self.freeable(state)
        return [
            (self.forget(state, frozenset(chosen)), chosen)
            for size in range(len(freeable) + 1)
            for chosen in itertools.combinations(freeable, size)
        ]


def brute_force_block(
    g: CDGraph,
    b: BudgetPair,
    recompute_cap: int,
    state_cap: int = DEFAULT_STATE_CAP,
) -> OracleResult:
    """
    Find the cheapest schedule of a block by exhaustive search.

    The search walks stages in order; at each step of a stage it either
    skips or runs the step's computation (always running the stage's own
    computation), then forgets any subset of the resident data. Runs must fit
    ``m_peak``; the memory after the loss and its forgets must fit ``m_save``;
    the input gradient must be resident at the end. States with equal
    residency, contributions and run counts are merged, keeping the
    cheapest.

    :param g: The block.
    :param b: The budgets.
    :param recompute_cap: Maximum number of runs of each forward.
    :param state_cap: Maximum number of states kept at once.
    :return: The cheapest recomputation time and a witness schedule.
    :raises SearchExploded: If a layer holds more than ``state_cap`` states.
    """
    oracle = _Oracle(g, b, recompute_cap)
    loss = g.loss_index
    start: _State = (
        frozenset({g.input_data}),
        frozenset(),
        (0,) * len(g.cnodes),
    )
    # Cheapest cost and witness ops of every state of the current layer.
    layer: dict[_State, tuple[int, tuple[ScheduleOp, ...]]] = {
        start: (0, ())
    }
    for t in range(len(g.cnodes)):
        for j in range(t + 1):
            nxt: dict[_State, tuple[int, tuple[ScheduleOp, ...]]] = {}
            for state, (cost, ops) in layer.items():
                if j < t:
                    _keep(nxt, state, cost, ops)
                ran = oracle.run(state, j)
                if ran is None:
                    continue
                after, step_cost = ran
                extra = step_cost if j < t else 0
                ops_run = (*ops, Compute(0, g.cnodes[j].id))
                for forgotten, chosen in oracle.forget_choices(after):
                    if (t, j) == (loss, loss) and oracle.memory(
                        forgotten[0]
                    ) > b.m_save:
                        continue
                    _keep(
                        nxt,
                        forgotten,
                        cost + extra,
                        (*ops_run, *(Forget(0, d) for d in chosen)),
                    )
            if len(nxt) > state_cap:
                raise SearchExploded(
                    f"{len(nxt)} states at stage {t} step {j}, cap is "
                    f"{state_cap}"
                )
            layer = nxt

    best: Optional[tuple[int, tuple[ScheduleOp, ...]]] = None
    for state, (cost, ops) in layer.items():
        if not oracle.sinks <= state[0]:
            continue
        if best is None or cost < best[0]:
            best = (cost, ops)
    if best is None:
        return OracleResult(False, None, None)
    return OracleResult(True, best[0], Schedule(best[1]))


def brute_force_any_order(
    g: CDGraph,
    b: BudgetPair,
    recompute_cap: int,
    state_cap: int = DEFAULT_STATE_CAP,
) -> OracleResult:
    """
    Find the cheapest schedule of a block over every order of its ops.

    Unlike :func:`brute_force_block` there are no stages: any runnable
    computation may run next and any single resident data may be forgotten
    at any time, so this search covers schedules the stage structure rules
    out. The first run of each computation is free and every further run
    costs its time. The memory when the first computation after the loss
    starts, or at the end, must fit ``m_save``.

    :param g: The block.
    :param b: The budgets.
    :param recompute_cap: Maximum number of runs of each forward.
    :param state_cap: Maximum number of states reached.
    :return: The cheapest recomputation time and a witness schedule.
    :raises SearchExploded: If more than ``state_cap`` states are reached.
    """
    oracle = _Oracle(g, b, recompute_cap)
    loss = g.loss_index
    once = [j for j, c in enumerate(g.cnodes) if c.kind != CKind.FORWARD]
    # A state and whether the loss has run with no computation since.
    start: tuple[_State, bool] = (
        (frozenset({g.input_data}), frozenset(), (0,) * len(g.cnodes)),
        False,
    )
    best: dict[tuple[_State, bool], int] = {start: 0}
    came_from: dict[
        tuple[_State, bool], tuple[tuple[_State, bool], ScheduleOp]
    ] = {}
    heap: list[tuple[int, int, tuple[_State, bool]]] = [(0, 0, start)]
    pushed = itertools.count(1)
    while heap:
        cost, _, node = heapq.heappop(heap)
        if cost > best[node]:
            continue
        state, after_loss = node
        resident, _, runs = state
        saved = not after_loss or oracle.memory(resident) <= b.m_save
        if saved and all(runs[j] for j in once) and oracle.sinks <= resident:
            ops: list[ScheduleOp] = []
            while node in came_from:
                node, op = came_from[node]
                ops.append(op)
            return OracleResult(True, cost, Schedule(tuple(reversed(ops))))

        moves: list[tuple[tuple[_State, bool], int, ScheduleOp]] = []
        if saved:
            for j, cnode in enumerate(g.cnodes):
                ran = oracle.run(state, j)
                if ran is not None:
                    after, time_us = ran
                    moves.append(
                        (
                            (after, j == loss),
                            time_us if runs[j] else 0,
                            Compute(0, cnode.id),
                        )
                    )
        for d in oracle.freeable(state):
            moves.append(
                (
                    (oracle.forget(state, frozenset({d})), after_loss),
                    0,
                    Forget(0, d),
                )
            )
        for nxt, extra, op in moves:
            if cost + extra < best.get(nxt, cost + extra + 1):
                best[nxt] = cost + extra
                came_from[nxt] = (node, op)
                heapq.heappush(heap, (cost + extra, next(pushed), nxt))
        if len(best) > state_cap:
            raise SearchExploded(
                f"{len(best)} states reached, cap is {state_cap}"
            )
    return OracleResult(False, None, None)


def _keep(
    layer: dict[_State, tuple[int, tuple[ScheduleOp, ...]]],
    state: _State,
    cost: int,
    ops: Sequence[ScheduleOp],
) -> None:
    current = layer.get(state)
    if current is None or cost < current[0]:
        layer[state] = (cost, tuple(ops))
