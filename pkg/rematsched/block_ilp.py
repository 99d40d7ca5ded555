"""
Integer linear program scheduling one block under a pair of memory budgets,
and the block options extracted from its solutions.

Time is split into stages: stage ``t`` runs a subset of the computations
``0 .. t`` in order and always runs computation ``t``; stages before the
loss are the forward phase. Binary variables:

- ``R[t,j]``: computation ``j`` runs in stage ``t``.
- ``S[t,(p,d)]``: data ``d`` is kept from an earlier run of its parent ``p``
  at the start of stage ``t``.
- ``P[t,d]``: data ``d`` is resident at the start of stage ``t``.
- ``create[t,d,p]`` / ``delete[t,d,j]``: ``d`` is allocated by parent ``p`` /
  freed right after step ``j`` of stage ``t``.

The block input is resident throughout and is accounted for as a constant.
Freeing is eager: ``delete`` equals the product "step ``j`` runs, ``d`` is not
kept into the next stage and no later step of the stage consumes ``d``",
written as its standard linearisation.

Implied rows tighten the search without changing the feasible set: a step
that runs counts the bytes of its own inputs and outputs, and the loss step
counts the gradient that has to survive it. Those bytes alone, with the
input, are floors that fail at the root when a budget is too small. Data
produced only by the loss or a backward cannot be produced again, so its
saves up to each consumer are fixed to 1.

.. autofunction:: rematsched.build_model
.. autofunction:: rematsched.budget_grid
.. autofunction:: rematsched.extract_option
.. autofunction:: rematsched.dedup_options
.. autofunction:: rematsched.forward_only_option
.. autofunction:: rematsched.measure_option

"""

import dataclasses
import logging
from typing import Iterable, Optional, Sequence

from .errors import (
    InfeasibleBlock,
    InputError,
    ModelTooLarge,
    SolutionInfeasible,
)
from .model import (
    BlockOption,
    CDGraph,
    Chain,
    CKind,
    Compute,
    Forget,
    Schedule,
    ScheduleOp,
)
from .simulate import (
    Simulator,
    eager_free_schedule,
    format_op,
    no_recompute_schedule,
    reindex_ops,
    simulate,
)

__all__ = (
    "DEFAULT_VARIABLE_CAP",
    "BudgetPair",
    "Row",
    "VariableIndex",
    "IlpModel",
    "build_model",
    "budget_grid",
    "schedule_ops",
    "extract_option",
    "measure_option",
    "forward_only_option",
    "dedup_options",
)

_LOGGER = logging.getLogger(__name__)

DEFAULT_VARIABLE_CAP = 200_000

LE, GE, EQ = "<=", ">=", "=="


@dataclasses.dataclass(frozen=True)
class BudgetPair:
    """Peak and save budgets of one block solve, in bytes."""

    m_peak: int
    m_save: int


@dataclasses.dataclass(frozen=True)
class Row:
    """Sparse linear constraint ``sum(coef * var) <sense> rhs``."""

    coefs: tuple[tuple[int, int], ...]
    sense: str
    rhs: int
    name: str

    def activity(self, values: Sequence[int]) -> int:
        """Left-hand side under an assignment."""
        return sum(coef * values[var] for var, coef in self.coefs)

    def satisfied(self, values: Sequence[int]) -> bool:
        """Whether an assignment satisfies the row."""
        lhs = self.activity(values)
        if self.sense == LE:
            return lhs <= self.rhs
        if self.sense == GE:
            return lhs >= self.rhs
        return lhs == self.rhs


@dataclasses.dataclass
class VariableIndex:
    """Variable ids of each family, keyed by their indices."""

    r: dict[tuple[int, int], int] = dataclasses.field(default_factory=dict)
    s: dict[tuple[int, int, str], int] = dataclasses.field(
        default_factory=dict
    )
    p: dict[tuple[int, str], int] = dataclasses.field(default_factory=dict)
    create: dict[tuple[int, str, int], int] = dataclasses.field(
        default_factory=dict
    )
    delete: dict[tuple[int, str, int], int] = dataclasses.field(
        default_factory=dict
    )


@dataclasses.dataclass
class IlpModel:
    """A 0/1 program for one block and one budget pair."""

    graph: CDGraph
    budget: BudgetPair
    names: list[str]
    index: VariableIndex
    rows: list[Row]
    #: Variables whose value is fixed by construction.
    fixed: dict[int, int]
    #: Objective coefficients (recomputation time), all nonnegative.
    objective: dict[int, int]
    #: Variables in the order the search should branch on them.
    branch_order: list[int]
    #: Value tried first for each branched variable.
    first_value: dict[int, int]

    @property
    def num_variables(self) -> int:
        """Number of variables."""
        return len(self.names)

    def objective_value(self, values: Sequence[int]) -> int:
        """Objective under an assignment."""
        return sum(
            coef * values[var] for var, coef in self.objective.items()
        )

    def violated_rows(self, values: Sequence[int]) -> list[str]:
        """Names of the rows and fixings an assignment breaks."""
        broken = [
            self.names[var]
            for var, value in self.fixed.items()
            if values[var] != value
        ]
        broken += [
            row.name for row in self.rows if not row.satisfied(values)
        ]
        broken += [
            self.names[var]
            for var, value in enumerate(values)
            if value not in (0, 1)
        ]
        return broken

    def memory_profile(
        self, values: Sequence[int]
    ) -> dict[tuple[int, int], int]:
        """
        Resident memory after each step, deletions of the step applied.

        :param values: A feasible assignment.
        :return: Map of (stage, step) to bytes.
        """
        g = self.graph
        idx = self.index
        profile = {}
        for t in range(len(g.cnodes)):
            mem = g.input_size + sum(
                g.size(d) * values[var]
                for (stage, d), var in idx.p.items()
                if stage == t
            )
            for j in range(t + 1):
                for (stage, d, step), var in idx.create.items():
                    if stage == t and step == j:
                        mem += g.size(d) * values[var]
                for (stage, d, step), var in idx.delete.items():
                    if stage == t and step == j:
                        mem -= g.size(d) * values[var]
                profile[(t, j)] = mem
        return profile


class _Expr(dict[int, int]):
    """Linear expression over variable ids, constant kept aside."""

    def __init__(self) -> None:
        super().__init__()
        self.const = 0

    def add(self, var: Optional[int], coef: int = 1) -> "_Expr":
        """Add ``coef * var``; a ``None`` variable is the constant 0."""
        if var is not None and coef:
            self[var] = self.get(var, 0) + coef
        return self

    def copy(self) -> "_Expr":
        ret = _Expr()
        ret.update(self)
        ret.const = self.const
        return ret


class _ModelBuilder:
    """Accumulates the variables and rows of one model."""

    def __init__(self, g: CDGraph, budget: BudgetPair) -> None:
        self.g = g
        self.budget = budget
        self.names: list[str] = []
        self.index = VariableIndex()
        self.rows: list[Row] = []
        self.fixed: dict[int, int] = {}
        edges = g.edges
        pos = g.cnode_index
        self.n_steps = len(g.cnodes)
        self.data = [d.id for d in g.dnodes if d.id != g.input_data]
        self.par = {
            d: sorted(pos[c] for c in edges.parents_of_data[d])
            for d in self.data
        }
        self.ch = {
            d: sorted(pos[c] for c in edges.children_of_data[d])
            for d in self.data
        }
        self.touch = {
            d: sorted(set(self.par[d]) | set(self.ch[d])) for d in self.data
        }
        self.retained = set(g.retained_sinks)
        # Data resident whenever a step runs, input excluded.
        self.needed = [
            sorted({*c.deps, *c.outputs} - {g.input_data}) for c in g.cnodes
        ]
        self.kept_over_loss = [
            d
            for d in g.cnodes[g.loss_index].outputs
            if self.ch[d] or d in self.retained
        ]
        # Least memory of a step, wherever it runs.
        self.floor = [
            g.input_size + c.tmp_mem + sum(g.size(d) for d in need)
            for c, need in zip(g.cnodes, self.needed)
        ]

    def count(self) -> int:
        """Number of variables the model will have."""
        steps = self.n_steps
        n_edges = sum(len(self.par[d]) for d in self.data)
        creates = sum(steps - p for d in self.data for p in self.par[d])
        deletes = sum(steps - j for d in self.data for j in self.touch[d])
        triangle = steps * (steps + 1) // 2
        return (
            triangle
            + steps * (n_edges + len(self.data))
            + creates
            + deletes
        )

    def _var(self, name: str) -> int:
        self.names.append(name)
        return len(self.names) - 1

    def declare(self) -> None:
        """Create every variable."""
        g, idx = self.g, self.index
        for t in range(self.n_steps):
            for j in range(t + 1):
                idx.r[t, j] = self._var(f"R[{t},{g.cnodes[j].id}]")
            self.fixed[idx.r[t, t]] = 1
        for t in range(self.n_steps):
            for d in self.data:
                for p in self.par[d]:
                    idx.s[t, p, d] = self._var(
                        f"S[{t},{g.cnodes[p].id}>{d}]"
                    )
        for t in range(self.n_steps):
            for d in self.data:
                idx.p[t, d] = self._var(f"P[{t},{d}]")
        for t in range(self.n_steps):
            for d in self.data:
                for p in self.par[d]:
                    if p <= t:
                        idx.create[t, d, p] = self._var(
                            f"create[{t},{d},{g.cnodes[p].id}]"
                        )
                for j in self.touch[d]:
                    if j <= t:
                        idx.delete[t, d, j] = self._var(
                            f"delete[{t},{d},{g.cnodes[j].id}]"
                        )

    def row(self, expr: _Expr, sense: str, rhs: int, name: str) -> None:
        """Record ``expr <sense> rhs``, folding the expression constant."""
        self.rows.append(
            Row(
                tuple(sorted((v, c) for v, c in expr.items() if c)),
                sense,
                rhs - expr.const,
                name,
            )
        )

    def r(self, t: int, j: int) -> Optional[int]:
        """``R[t,j]``, or None when structurally zero."""
        return self.index.r.get((t, j))

    def alive(self, t: int, d: str, j: int) -> _Expr:
        """Whether ``d`` is resident right after step ``j`` of stage ``t``."""
        idx = self.index
        expr = _Expr().add(idx.p[t, d])
        for p in self.par[d]:
            if p <= j:
                expr.add(idx.create[t, d, p])
        for step in self.touch[d]:
            if step <= j:
                expr.add(idx.delete[t, d, step], -1)
        return expr

    def held(self, t: int, d: str, j: int) -> _Expr:
        """Whether ``d`` is resident while step ``j`` of stage ``t`` runs."""
        idx = self.index
        expr = _Expr().add(idx.p[t, d])
        for p in self.par[d]:
            if p <= j:
                expr.add(idx.create[t, d, p])
        for step in self.touch[d]:
            if step < j:
                expr.add(idx.delete[t, d, step], -1)
        return expr

    def pinned(self) -> None:
        """Fix the saves of data that only the loss or a backward produces."""
        g, idx = self.g, self.index
        for d in self.data:
            for p in self.par[d]:
                if g.cnodes[p].kind == CKind.FORWARD:
                    continue
                for c in self.ch[d]:
                    for t in range(p + 1, c + 1):
                        self.fixed[idx.s[t, p, d]] = 1
                        self.fixed[idx.p[t, d]] = 1

    def feasibility_rows(self) -> None:
        """Ordering, run-once, keep and availability constraints."""
        g, idx, steps = self.g, self.index, self.n_steps
        for j, cnode in enumerate(g.cnodes):
            if cnode.kind == CKind.LOSS:
                expr = _Expr()
                for t in range(j, steps):
                    expr.add(idx.r[t, j])
                self.row(expr, EQ, 1, f"loss-once[{cnode.id}]")
            elif cnode.kind == CKind.BACKWARD:
                expr = _Expr()
                for t in range(j + 1, steps):
                    expr.add(idx.r[t, j])
                self.row(expr, EQ, 0, f"backward-once[{cnode.id}]")

        for d in self.data:
            first = self.par[d][0]
            expr = _Expr()
            for t in range(min(first + 1, steps)):
                expr.add(idx.p[t, d])
            self.row(expr, EQ, 0, f"unborn[{d}]")
            for p in self.par[d]:
                expr = _Expr()
                for t in range(min(p + 1, steps)):
                    expr.add(idx.s[t, p, d])
                self.row(expr, EQ, 0, f"unsaved[{d},{p}]")
                for t in range(steps):
                    self.row(
                        _Expr().add(idx.s[t, p, d]).add(idx.p[t, d], -1),
                        LE,
                        0,
                        f"save-resident[{t},{d},{p}]",
                    )
                    if t + 1 < steps:
                        self.row(
                            _Expr()
                            .add(idx.s[t + 1, p, d])
                            .add(idx.s[t, p, d], -1)
                            .add(self.r(t, p), -1),
                            LE,
                            0,
                            f"save-carry[{t},{d},{p}]",
                        )
            for t in range(steps):
                for c in self.ch[d]:
                    if c > t:
                        continue
                    for p in self.par[d]:
                        self.row(
                            _Expr()
                            .add(idx.r[t, c])
                            .add(self.r(t, p), -1)
                            .add(idx.s[t, p, d], -1),
                            LE,
                            0,
                            f"available[{t},{g.cnodes[c].id},{d},{p}]",
                        )

    def bookkeeping_rows(self) -> None:
        """Creation, liveness and eager deletion of every data node."""
        idx, steps = self.index, self.n_steps
        for t in range(steps):
            for d in self.data:
                for p in self.par[d]:
                    if p <= t:
                        self.row(
                            _Expr()
                            .add(idx.create[t, d, p])
                            .add(idx.r[t, p], -1),
                            LE,
                            0,
                            f"create-run[{t},{d},{p}]",
                        )
                touched = [j for j in self.touch[d] if j <= t]
                for j in touched:
                    alive = self.alive(t, d, j)
                    self.row(alive, GE, 0, f"alive-low[{t},{d},{j}]")
                    self.row(alive, LE, 1, f"alive-high[{t},{d},{j}]")
                    if j in self.par[d]:
                        self.row(
                            alive.copy()
                            .add(idx.delete[t, d, j])
                            .add(idx.r[t, j], -1),
                            GE,
                            0,
                            f"produced[{t},{d},{j}]",
                        )
                    self._delete_rows(t, d, j)
                self._carry_row(t, d, touched)

    def _carry_row(self, t: int, d: str, touched: list[int]) -> None:
        idx = self.index
        end = (
            self.alive(t, d, touched[-1])
            if touched
            else _Expr().add(idx.p[t, d])
        )
        if t + 1 < self.n_steps:
            self.row(
                end.add(idx.p[t + 1, d], -1), EQ, 0, f"carry[{t},{d}]"
            )
        else:
            self.row(
                end, EQ, int(d in self.retained), f"terminal[{d}]"
            )

    def _delete_rows(self, t: int, d: str, j: int) -> None:
        idx = self.index
        delete = idx.delete[t, d, j]
        keep_var = idx.p.get((t + 1, d)) if t + 1 < self.n_steps else None
        keep_const = 0 if keep_var is not None else int(d in self.retained)
        later = [c for c in self.ch[d] if j < c <= t]
        name = f"{t},{d},{j}"

        self.row(
            _Expr().add(delete).add(idx.r[t, j], -1),
            LE,
            0,
            f"delete-run[{name}]",
        )
        if keep_var is not None:
            self.row(
                _Expr().add(delete).add(keep_var),
                LE,
                1,
                f"delete-kept[{name}]",
            )
        elif keep_const:
            self.row(_Expr().add(delete), LE, 0, f"delete-kept[{name}]")
        for c in later:
            self.row(
                _Expr().add(delete).add(idx.r[t, c]),
                LE,
                1,
                f"delete-needed[{name},{c}]",
            )
        expr = _Expr().add(delete).add(idx.r[t, j], -1).add(keep_var)
        expr.const = keep_const
        for c in later:
            expr.add(idx.r[t, c])
        self.row(expr, GE, 0, f"delete-eager[{name}]")

    def memory_rows(self) -> None:
        """Peak rows for every step and the save row at the loss step."""
        g, idx = self.g, self.index
        loss = g.loss_index
        creates_at: dict[int, list[str]] = {}
        deletes_at: dict[int, list[str]] = {}
        for d in self.data:
            for p in self.par[d]:
                creates_at.setdefault(p, []).append(d)
            for j in self.touch[d]:
                deletes_at.setdefault(j, []).append(d)

        for t in range(self.n_steps):
            mem = _Expr()
            mem.const = g.input_size
            for d in self.data:
                mem.add(idx.p[t, d], g.size(d))
            for j in range(t + 1):
                for d in creates_at.get(j, ()):
                    mem.add(idx.create[t, d, j], g.size(d))
                peak = mem.copy().add(idx.r[t, j], g.cnodes[j].tmp_mem)
                self.row(peak, LE, self.budget.m_peak, f"peak[{t},{j}]")
                self.row(
                    self._peak_need(mem, t, j),
                    LE,
                    self.budget.m_peak,
                    f"peak-need[{t},{j}]",
                )
                self.row(
                    _Expr().add(idx.r[t, j], self.floor[j]),
                    LE,
                    self.budget.m_peak,
                    f"need[{t},{j}]",
                )
                for d in deletes_at.get(j, ()):
                    mem.add(idx.delete[t, d, j], -g.size(d))
                if t == loss and j == loss:
                    self.row(mem.copy(), LE, self.budget.m_save, "save")
                    self.row(
                        self._save_need(mem),
                        LE,
                        self.budget.m_save,
                        "save-need",
                    )
                    floor = _Expr()
                    floor.const = g.input_size + sum(
                        g.size(d) for d in self.kept_over_loss
                    )
                    self.row(floor, LE, self.budget.m_save, "save-floor")

    def _peak_need(self, mem: _Expr, t: int, j: int) -> _Expr:
        """The peak row of step ``j`` counting its own data when it runs."""
        g = self.g
        expr = mem.copy()
        needed = g.cnodes[j].tmp_mem
        for d in self.needed[j]:
            needed += g.size(d)
            for var, coef in self.held(t, d, j).items():
                expr.add(var, -g.size(d) * coef)
        return expr.add(self.index.r[t, j], needed)

    def _save_need(self, mem: _Expr) -> _Expr:
        """The save row with the surviving loss gradient counted."""
        g = self.g
        loss = g.loss_index
        expr = mem.copy()
        for d in self.kept_over_loss:
            for var, coef in self.alive(loss, d, loss).items():
                expr.add(var, -g.size(d) * coef)
            expr.const += g.size(d)
        return expr

    def objective(self) -> dict[int, int]:
        """Recomputation time: every run outside its own stage."""
        g = self.g
        return {
            var: g.cnodes[j].time
            for (t, j), var in self.index.r.items()
            if j < t and g.cnodes[j].time
        }

    def branching(self) -> tuple[list[int], dict[int, int]]:
        """Search order: recomputations, then residency, then the rest."""
        idx = self.index
        order = [var for (t, j), var in idx.r.items() if j < t]
        first = dict.fromkeys(order, 0)
        for family, value in ((idx.p, 1), (idx.s, 1)):
            for var in family.values():
                order.append(var)
                first[var] = value
        for family in (idx.create, idx.delete):
            for var in family.values():
                order.append(var)
                first[var] = 0
        return order, first


def build_model(
    g: CDGraph,
    b: BudgetPair,
    variable_cap: int = DEFAULT_VARIABLE_CAP,
) -> IlpModel:
    """
    Build the 0/1 program of a block under a budget pair.

    :param g: A validated block.
    :param b: The budgets; ``m_save`` may not exceed ``m_peak``.
    :param variable_cap: Largest number of variables allowed.
    :return: The model.
    :raises InputError: If the budget pair is malformed.
    :raises ModelTooLarge: If the model would exceed ``variable_cap``.
    """
    if b.m_save > b.m_peak or b.m_save < 0:
        raise InputError(
            f"budget pair needs 0 <= m_save <= m_peak, got {b.m_save} > "
            f"{b.m_peak}"
        )
    builder = _ModelBuilder(g, b)
    count = builder.count()
    if count > variable_cap:
        raise ModelTooLarge(
            f"block model needs {count} variables, cap is {variable_cap}"
        )
    builder.declare()
    builder.pinned()
    builder.feasibility_rows()
    builder.bookkeeping_rows()
    builder.memory_rows()
    order, first = builder.branching()
    model = IlpModel(
        g,
        b,
        builder.names,
        builder.index,
        builder.rows,
        builder.fixed,
        builder.objective(),
        order,
        first,
    )
    _LOGGER.debug(
        "Built model for budget %s: %d variables, %d rows",
        b,
        model.num_variables,
        len(model.rows),
    )
    return model


# ==============================================================================
# Budget grid
# ==============================================================================
def _spaced(low: int, high: int, count: int) -> list[int]:
    """``count`` evenly spaced integers from ``low`` to ``high``."""
    if count == 1 or high <= low:
        return [high]
    return [low + (high - low) * k // (count - 1) for k in range(count)]


def budget_grid(g: CDGraph, n_peak: int, n_save: int) -> list[BudgetPair]:
    """
    Budget pairs to solve a block for.

    Peaks are spread between the peak of the schedule freeing data as soon as
    possible and the peak of the schedule that recomputes nothing; save
    budgets between the output size and the peak budget.

    :param g: A validated block.
    :param n_peak: Number of peak budgets.
    :param n_save: Number of save budgets per peak budget.
    :return: The distinct pairs, in grid order.
    :raises InfeasibleBlock: If the block has no computation.
    """
    if not g.cnodes:
        raise InfeasibleBlock("block has no computation")
    if n_peak < 1 or n_save < 1:
        raise ValueError("budget grid needs at least one value per axis")
    chain = Chain((g,))
    min_peak = simulate(eager_free_schedule(g), chain).peak_mem
    max_peak = simulate(no_recompute_schedule(g), chain).peak_mem
    pairs = []
    for m_peak in _spaced(min_peak, max_peak, n_peak):
        for m_save in _spaced(min(g.output_size, m_peak), m_peak, n_save):
            pairs.append(BudgetPair(m_peak, m_save))
    return list(dict.fromkeys(pairs))


# ==============================================================================
# Options
# ==============================================================================
def schedule_ops(
    model: IlpModel, values: Sequence[int], block: int = 0
) -> tuple[list[ScheduleOp], list[ScheduleOp]]:
    """
    Flatten an assignment into forward and backward op lists.

    Stages run in order, steps within a stage in order; each executed step
    is followed by the forgets it triggers. The backward list starts with
    the forgets of the loss step.

    :param model: The model the assignment belongs to.
    :param values: The assignment.
    :param block: Block index written into the ops.
    :return: The forward ops and the backward ops.
    """
    g, idx = model.graph, model.index
    loss = g.loss_index
    fwd: list[ScheduleOp] = []
    bwd: list[ScheduleOp] = []
    for t in range(len(g.cnodes)):
        for j in range(t + 1):
            if not values[idx.r[t, j]]:
                continue
            target = fwd if t < loss or (t == loss and j < loss) else bwd
            if (t, j) != (loss, loss):
                target.append(Compute(block, g.cnodes[j].id))
            for dnode in g.dnodes:
                var = idx.delete.get((t, dnode.id, j))
                if var is not None and values[var]:
                    target.append(Forget(block, dnode.id))
    return fwd, bwd


def _run_ops(
    g: CDGraph, ops: Iterable[ScheduleOp], simulator: Simulator, start: int
) -> tuple[int, int]:
    """Step ops on a one-block simulator; return (time, peak)."""
    time = 0
    peak = 0
    for offset, op in enumerate(ops):
        peak = max(peak, simulator.step(op, start + offset))
        if isinstance(op, Compute):
            time += g.cnode(op.target).time
    return time, peak


def measure_option(
    g: CDGraph,
    fwd_ops: Sequence[ScheduleOp],
    bwd_ops: Sequence[ScheduleOp],
    option_id: int = 1,
    block: int = 0,
) -> BlockOption:
    """
    Measure an option by replaying its phases around the loss.

    :param g: The block.
    :param fwd_ops: Ops before the loss.
    :param bwd_ops: Ops after the loss.
    :param option_id: Id given to the option.
    :param block: Block index written into the option's ops.
    :return: The measured option.
    :raises SimulationError: If the ops do not replay on the block.
    """
    local_fwd = reindex_ops(fwd_ops, 0)
    local_bwd = reindex_ops(bwd_ops, 0)
    simulator = Simulator(Chain((g,)))
    time_fwd, peak_fwd = _run_ops(g, local_fwd, simulator, 0)
    peak_fwd = max(peak_fwd, g.input_size)
    save_mem = simulator.state.current_mem - g.output_size
    peak_loss = simulator.step(Compute(0, g.loss_id), len(local_fwd))
    time_bwd, peak_bwd = _run_ops(
        g, local_bwd, simulator, len(local_fwd) + 1
    )
    simulator.check_complete()
    return BlockOption(
        option_id,
        time_fwd,
        time_bwd,
        save_mem,
        peak_fwd,
        max(peak_loss, peak_bwd),
        reindex_ops(local_fwd, block),
        reindex_ops(local_bwd, block),
    )


def extract_option(
    g: CDGraph,
    model: IlpModel,
    values: Sequence[int],
    block: int = 0,
    option_id: int = 1,
) -> BlockOption:
    """
    Turn a solver assignment into a measured block option.

    :param g: The block the model was built for.
    :param model: The model.
    :param values: The assignment, re-checked against every row.
    :param block: Block index written into the ops.
    :param option_id: Id given to the option.
    :return: The option.
    :raises SolutionInfeasible: If the assignment breaks a row, or its
        replay breaks the budgets it was solved for.
    """
    broken = model.violated_rows(values)
    if broken:
        raise SolutionInfeasible(
            f"assignment breaks {len(broken)} constraints, first {broken[0]}"
        )
    fwd, bwd = schedule_ops(model, values)
    report = simulate(
        Schedule((*fwd, Compute(0, g.loss_id), *bwd)), Chain((g,))
    )
    if report.peak_mem > model.budget.m_peak:
        raise SolutionInfeasible(
            f"replay peaks at {report.peak_mem} bytes above m_peak "
            f"{model.budget.m_peak}"
        )
    if (report.mem_at_loss or 0) > model.budget.m_save:
        raise SolutionInfeasible(
            f"replay keeps {report.mem_at_loss} bytes at the loss above "
            f"m_save {model.budget.m_save}"
        )
    return measure_option(g, fwd, bwd, option_id, block)


def forward_only_option(g: CDGraph, block: int = 0) -> BlockOption:
    """
    Option 0: run the forward once, keeping only the input and output.

    :param g: The block.
    :param block: Block index written into the ops.
    :return: The option, without a backward phase.
    """
    edges = g.edges
    loss = g.loss_index
    forwards = list(g.cnodes[:loss])
    last: dict[str, int] = {}
    for dnode in g.dnodes:
        if dnode.id in (g.input_data, g.output_data):
            continue
        touching = [
            g.cnode_index[c]
            for c in (
                *edges.parents_of_data[dnode.id],
                *edges.children_of_data[dnode.id],
            )
            if g.cnode_index[c] < loss
        ]
        if touching:
            last[dnode.id] = max(touching)
    ops: list[ScheduleOp] = []
    for pos, cnode in enumerate(forwards):
        ops.append(Compute(0, cnode.id))
        ops.extend(
            Forget(0, dnode.id)
            for dnode in g.dnodes
            if last.get(dnode.id) == pos
        )
    simulator = Simulator(Chain((g,)))
    time, peak = _run_ops(g, ops, simulator, 0)
    return BlockOption(
        0,
        time,
        None,
        simulator.state.current_mem - g.output_size,
        max(peak, g.input_size),
        None,
        reindex_ops(ops, block),
        (),
    )


def _dominates(a: BlockOption, b: BlockOption) -> bool:
    ca, cb = a.costs(), b.costs()
    return all(x <= y for x, y in zip(ca, cb)) and ca != cb


def _sort_key(option: BlockOption) -> tuple[tuple[int, ...], tuple[str, ...]]:
    return (
        option.costs(),
        tuple(format_op(op) for op in (*option.fwd_ops, *option.bwd_ops)),
    )


def dedup_options(opts: Sequence[BlockOption]) -> list[BlockOption]:
    """
    Drop repeated and dominated options, renumbering the survivors.

    Option 0 is kept as is; the others are sorted by cost and numbered from 1.

    :param opts: Options of one block.
    :return: The surviving options, option 0 first if present.
    """
    zero = [opt for opt in opts if opt.option_id == 0][:1]
    unique: dict[
        tuple[tuple[ScheduleOp, ...], tuple[ScheduleOp, ...]], BlockOption
    ] = {}
    for opt in opts:
        if opt.option_id != 0:
            unique.setdefault((opt.fwd_ops, opt.bwd_ops), opt)
    candidates = list(unique.values())
    survivors = sorted(
        (
            opt
            for opt in candidates
            if not any(_dominates(other, opt) for other in candidates)
        ),
        key=_sort_key,
    )
    renumbered = [
        dataclasses.replace(opt, option_id=number)
        for number, opt in enumerate(survivors, start=1)
    ]
    return zero + renumbered

