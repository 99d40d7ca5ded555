"""
End-to-end solving: block options per equivalence class, then the chain.

Each class representative is solved over its budget grid; the surviving
options are carried over to every member of the class. Budget pairs are
independent and solved on a pool of worker processes; results are gathered
in submission order so the output does not depend on scheduling.

.. autofunction:: rematsched.solve_options
.. autofunction:: rematsched.run_solve
.. autofunction:: rematsched.run_sweep
.. autoclass:: rematsched.SolveSettings

"""

import concurrent.futures
import csv
import dataclasses
import logging
import os
from typing import Iterable, Optional, Sequence, TextIO

from .block_ilp import (
    DEFAULT_VARIABLE_CAP,
    BudgetPair,
    budget_grid,
    build_model,
    dedup_options,
    extract_option,
    forward_only_option,
)
from .chain_dp import (
    DEFAULT_UNITS,
    OptionMenu,
    keep_all_menu,
    solve_chain,
    unit_for,
)
from .errors import InfeasibleBudget, RematError
from .ilp_solver import DEFAULT_TIME_LIMIT, SolveStatus, solve
from .model import BlockOption, CDGraph, Chain, Schedule
from .partition import match_cdgraphs, translate_option
from .simulate import SimReport, simulate

__all__ = (
    "THREADS_ENV",
    "MENU_FULL",
    "MENU_KEEP_ALL",
    "MANY_OPTIONS",
    "SolveSettings",
    "ClassStats",
    "OptionsResult",
    "SolveOutcome",
    "SweepRow",
    "worker_count",
    "solve_options",
    "build_menu",
    "run_solve",
    "run_sweep",
    "write_sweep_csv",
)

_LOGGER = logging.getLogger(__name__)

THREADS_ENV = "REMAT_THREADS"

MENU_FULL = "full"
MENU_KEEP_ALL = "keep-all"

#: Option counts above this are reported.
MANY_OPTIONS = 30

SWEEP_HEADER = (
    "budget_bytes",
    "makespan_us",
    "overhead_pct",
    "peak_bytes",
    "status",
)


@dataclasses.dataclass(frozen=True)
class SolveSettings:
    """Tunables of a solve."""

    n_peak: int = 20
    n_save: int = 20
    units: int = DEFAULT_UNITS
    time_limit: float = DEFAULT_TIME_LIMIT
    variable_cap: int = DEFAULT_VARIABLE_CAP
    #: Worker processes; see :func:`worker_count`.
    workers: Optional[int] = None
    singleton_classes: bool = False
    menu_mode: str = MENU_FULL


def worker_count(requested: Optional[int] = None) -> int:
    """
    Number of worker processes to use.

    :param requested: Explicit count, which wins if given.
    :return: The count, else the ``REMAT_THREADS`` environment variable,
        else the number of CPUs.
    :raises ValueError: If the environment variable is not a positive
        integer.
    """
    if requested is not None:
        return max(1, requested)
    env = os.environ.get(THREADS_ENV)
    if env:
        count = int(env)
        if count < 1:
            raise ValueError(f"{THREADS_ENV} must be at least 1")
        return count
    return os.cpu_count() or 1


@dataclasses.dataclass(frozen=True)
class _PairTask:
    graph: CDGraph
    budget: BudgetPair
    time_limit: float
    variable_cap: int


@dataclasses.dataclass(frozen=True)
class _PairResult:
    status: SolveStatus
    option: Optional[BlockOption]


def _solve_pair(task: _PairTask) -> _PairResult:
    """Solve one block under one budget pair; runs in a worker."""
    model = build_model(task.graph, task.budget, task.variable_cap)
    result = solve(model, task.time_limit)
    option = None
    if result.assignment is not None:
        option = extract_option(task.graph, model, result.assignment)
    return _PairResult(result.status, option)


def _map(tasks: Sequence[_PairTask], workers: int) -> list[_PairResult]:
    """Solve tasks in order, on worker processes when there are several."""
    if workers <= 1 or len(tasks) <= 1:
        return [_solve_pair(task) for task in tasks]
    with concurrent.futures.ProcessPoolExecutor(
        max_workers=min(workers, len(tasks))
    ) as executor:
        return list(executor.map(_solve_pair, tasks))


@dataclasses.dataclass(frozen=True)
class ClassStats:
    """How the solve of one equivalence class went."""

    class_id: int
    members: tuple[int, ...]
    pairs: int
    optimal: int
    infeasible: int
    timed_out: int
    #: Options after deduplication, option 0 included.
    options: int


@dataclasses.dataclass(frozen=True)
class OptionsResult:
    """Menu of a chain with per-class statistics."""

    menu: OptionMenu
    stats: tuple[ClassStats, ...]

    @property
    def class_solves(self) -> int:
        """Number of classes whose representative was solved."""
        return len(self.stats)

    @property
    def timed_out(self) -> int:
        """Budget pairs whose solve timed out."""
        return sum(stat.timed_out for stat in self.stats)


def _classes(chain: Chain, singleton: bool) -> list[tuple[int, ...]]:
    if singleton:
        return [(index,) for index in range(chain.length)]
    return sorted(chain.classes().values())


def _broadcast(
    chain: Chain, members: tuple[int, ...], options: Iterable[BlockOption]
) -> dict[int, tuple[BlockOption, ...]]:
    """Options of a representative moved onto every member of its class."""
    rep = chain.blocks[members[0]]
    kept = tuple(options)
    menus = {}
    for member in members:
        match = match_cdgraphs(rep, chain.blocks[member])
        if match is None:
            raise RematError(
                f"block {member} does not match block {members[0]}"
            )
        menus[member] = tuple(
            translate_option(opt, match, member) for opt in kept
        )
    return menus


def solve_options(
    chain: Chain, settings: SolveSettings = SolveSettings()
) -> OptionsResult:
    """
    Solve every class representative over its budget grid.

    :param chain: A validated chain.
    :param settings: Grid sizes, limits and worker count.
    :return: The menu of every block and per-class statistics.
    """
    classes = _classes(chain, settings.singleton_classes)
    tasks = []
    spans = []
    for members in classes:
        rep = chain.blocks[members[0]]
        grid = budget_grid(rep, settings.n_peak, settings.n_save)
        spans.append((len(tasks), len(tasks) + len(grid)))
        tasks.extend(
            _PairTask(rep, pair, settings.time_limit, settings.variable_cap)
            for pair in grid
        )
    workers = worker_count(settings.workers)
    _LOGGER.info(
        "Solving %d budget pairs for %d classes on %d workers",
        len(tasks),
        len(classes),
        workers,
    )
    results = _map(tasks, workers)

    menus: dict[int, tuple[BlockOption, ...]] = {}
    stats = []
    for class_id, (members, (start, end)) in enumerate(zip(classes, spans)):
        found = results[start:end]
        statuses = [result.status for result in found]
        options = dedup_options(
            [
                forward_only_option(chain.blocks[members[0]]),
                *(r.option for r in found if r.option is not None),
            ]
        )
        stat = ClassStats(
            class_id,
            members,
            len(found),
            statuses.count(SolveStatus.OPTIMAL),
            statuses.count(SolveStatus.INFEASIBLE),
            statuses.count(SolveStatus.TIMED_OUT),
            len(options),
        )
        stats.append(stat)
        log = _LOGGER.warning if len(options) > MANY_OPTIONS else _LOGGER.info
        log(
            "Class %d (%d blocks): %d options from %d pairs, "
            "%d infeasible, %d timed out",
            class_id,
            len(members),
            len(options),
            stat.pairs,
            stat.infeasible,
            stat.timed_out,
        )
        menus.update(_broadcast(chain, members, options))
    return OptionsResult(
        OptionMenu(tuple(menus[index] for index in range(chain.length))),
        tuple(stats),
    )


def build_menu(
    chain: Chain, settings: SolveSettings = SolveSettings()
) -> OptionsResult:
    """
    The menu selected by ``settings.menu_mode``.

    :param chain: A validated chain.
    :param settings: The settings.
    :return: The menu; the keep-all menu involves no class solve.
    """
    if settings.menu_mode == MENU_KEEP_ALL:
        return OptionsResult(keep_all_menu(chain), ())
    if settings.menu_mode != MENU_FULL:
        raise ValueError(f"unknown menu mode {settings.menu_mode!r}")
    return solve_options(chain, settings)


@dataclasses.dataclass(frozen=True)
class SolveOutcome:
    """A chain schedule and its replay."""

    schedule: Schedule
    report: SimReport
    menu: OptionMenu


def run_solve(
    chain: Chain,
    budget: int,
    settings: SolveSettings = SolveSettings(),
    options: Optional[OptionsResult] = None,
) -> SolveOutcome:
    """
    Schedule a chain within a budget, building its menu unless given.

    The schedule is replayed under the budget before being returned.

    :param chain: A validated chain.
    :param budget: Memory budget in bytes.
    :param settings: The settings.
    :param options: A menu computed or loaded beforehand, if any.
    :return: The schedule, its replay and the menu used.
    :raises InfeasibleBudget: If nothing fits; ``timed_out`` counts the
        block solves that timed out.
    """
    if options is None:
        options = build_menu(chain, settings)
    menu, timed_out = options.menu, options.timed_out
    try:
        schedule = solve_chain(chain, menu, budget, settings.units)
    except InfeasibleBudget as exc:
        if not timed_out:
            raise
        raise InfeasibleBudget(budget, exc.min_feasible, timed_out) from exc
    report = simulate(schedule, chain, budget=budget)
    return SolveOutcome(schedule, report, menu)


@dataclasses.dataclass(frozen=True)
class SweepRow:
    """One budget of a sweep."""

    budget_bytes: int
    makespan_us: Optional[int]
    overhead_pct: Optional[float]
    peak_bytes: Optional[int]

    @property
    def status(self) -> str:
        """``ok`` or ``infeasible``."""
        return "infeasible" if self.makespan_us is None else "ok"


def run_sweep(
    chain: Chain,
    budgets: Iterable[int],
    settings: SolveSettings = SolveSettings(),
    options: Optional[OptionsResult] = None,
) -> list[SweepRow]:
    """
    Solve a chain for several budgets.

    The menu is built once and every budget uses the unit of the largest one,
    which makes the makespan non-increasing in the budget.

    :param chain: A validated chain.
    :param budgets: Budgets in bytes.
    :param settings: The settings.
    :param options: A menu computed or loaded beforehand, if any.
    :return: One row per distinct budget, by increasing budget.
    :raises RematError: If the makespan ever increases with the budget.
    """
    ordered = sorted(set(budgets))
    if not ordered:
        return []
    menu = (options or build_menu(chain, settings)).menu
    unit = unit_for(ordered[-1], settings.units)
    base = chain.one_pass_time()
    rows = []
    for budget in ordered:
        try:
            schedule = solve_chain(
                chain, menu, budget, unit=unit, find_minimum=False
            )
        except InfeasibleBudget:
            _LOGGER.debug("Budget %d is infeasible", budget)
            rows.append(SweepRow(budget, None, None, None))
            continue
        assert schedule.metadata is not None
        makespan = schedule.metadata.makespan_us
        rows.append(
            SweepRow(
                budget,
                makespan,
                100.0 * (makespan - base) / base if base else 0.0,
                schedule.metadata.peak_bytes,
            )
        )
    feasible = [row.makespan_us for row in rows if row.makespan_us is not None]
    if any(later > earlier for earlier, later in zip(feasible, feasible[1:])):
        raise RematError(f"sweep makespans are not monotone: {feasible}")
    return rows


def write_sweep_csv(rows: Iterable[SweepRow], stream: TextIO) -> None:
    """
    Write sweep rows as CSV; infeasible rows leave the numbers empty.

    :param rows: The rows.
    :param stream: Text stream to write to.
    """
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for row in rows:
        writer.writerow(
            (
                row.budget_bytes,
                "" if row.makespan_us is None else row.makespan_us,
                "" if row.overhead_pct is None else f"{row.overhead_pct:.2f}",
                "" if row.peak_bytes is None else row.peak_bytes,
                row.status,
            )
        )
