"""
Dynamic program scheduling a chain of blocks from per-block option menus.

``Opt(s, t, m)`` is the fastest way to run the forward and backward of
blocks ``s .. t-1`` within ``m`` memory units. On entry the activation
``a_s`` is resident and not counted in ``m``; when ``t`` is not the end of
the chain the gradient arriving at ``t`` is resident and counted. On exit
``a_s`` and the gradient of ``a_s`` are resident and nothing else of the
subproblem remains. Two choices are tried for every cell:

- run block ``s`` with an option ``o > 0``, keeping its pack, then solve
  ``s + 1 .. t`` on what is left;
- sweep option 0 forwards up to a cut ``i``, solve ``i .. t`` with ``a_i``
  pinned, forget ``a_i`` and solve ``s .. i`` again.

Memory quantities are converted to whole units by ceiling, each on its own,
and the budget by floor, so a schedule feasible in units is feasible in
bytes.

.. autofunction:: rematsched.quantize
.. autofunction:: rematsched.compute_table
.. autofunction:: rematsched.keep_fits
.. autofunction:: rematsched.sweep_fits
.. autofunction:: rematsched.build_schedule
.. autofunction:: rematsched.solve_chain
.. autofunction:: rematsched.minimum_feasible_budget
.. autofunction:: rematsched.keep_all_menu
.. autoclass:: rematsched.OptionMenu

"""

import dataclasses
import logging
from typing import Optional, Sequence

import numpy as np
import numpy.typing as npt

from .block_ilp import forward_only_option, measure_option
from .errors import InfeasibleBudget, ValidationError, Violation
from .model import (
    BlockBwd,
    BlockFwd,
    BlockOption,
    Chain,
    Compute,
    Forget,
    Schedule,
    ScheduleMetadata,
    ScheduleOp,
)
from .simulate import expand_ops, no_recompute_schedule, simulate

__all__ = (
    "DEFAULT_UNITS",
    "INF",
    "OptionMenu",
    "Quantized",
    "QuantizedMenu",
    "DPTable",
    "unit_for",
    "quantize",
    "quantize_menu",
    "top_budget",
    "keep_fits",
    "sweep_fits",
    "compute_table",
    "build_schedule",
    "expand",
    "solve_chain",
    "minimum_feasible_budget",
    "keep_all_menu",
)

_LOGGER = logging.getLogger(__name__)

DEFAULT_UNITS = 500

#: Value of infeasible cells.
INF = 2**60

_NONE, _CASE_KEEP, _CASE_CUT = 0, 1, 2

#: Doublings tried before giving up on finding a feasible budget.
_MAX_DOUBLINGS = 32

_IntArray = npt.NDArray[np.int64]


@dataclasses.dataclass(frozen=True)
class OptionMenu:
    """
    The options of every block of a chain, indexed by option id.

    Option 0 of each block is the forward-only sweep.
    """

    options: tuple[tuple[BlockOption, ...], ...]

    @property
    def length(self) -> int:
        """Number of blocks covered."""
        return len(self.options)

    def counts(self) -> tuple[int, ...]:
        """Number of options of each block, option 0 included."""
        return tuple(len(opts) for opts in self.options)

    def validate(self, chain: Chain) -> list[Violation]:
        """
        Check the menu fits a chain.

        :param chain: The chain the menu is meant for.
        :return: The violations found.
        """
        if self.length != chain.length:
            return [
                Violation(
                    "menu-length",
                    "menu",
                    f"{self.length} menus for {chain.length} blocks",
                )
            ]
        violations = []
        for block, opts in enumerate(self.options):
            for index, opt in enumerate(opts):
                subject = f"block {block} option {index}"
                if opt.option_id != index:
                    violations.append(
                        Violation("option-id", subject, "id out of place")
                    )
                if (index == 0) != (opt.time_bwd is None):
                    violations.append(
                        Violation(
                            "option-phases",
                            subject,
                            "only option 0 lacks a backward phase",
                        )
                    )
        for members in chain.classes().values():
            first = self.options[members[0]]
            for member in members[1:]:
                costs = [opt.costs() for opt in self.options[member]]
                if costs != [opt.costs() for opt in first]:
                    violations.append(
                        Violation(
                            "class-menu",
                            f"block {member}",
                            f"menu differs from block {members[0]} of the "
                            "same class",
                        )
                    )
        return violations


# ==============================================================================
# Quantisation
# ==============================================================================
def _ceil_div(value: int, unit: int) -> int:
    return -(-value // unit)


def unit_for(budget: int, units: int) -> int:
    """Bytes per unit when splitting ``budget`` into ``units`` units."""
    if units < 1:
        raise ValueError("units must be at least 1")
    return max(1, _ceil_div(budget, units))


@dataclasses.dataclass(frozen=True)
class Quantized:
    """Sizes and a budget in whole units."""

    unit: int
    sizes: tuple[int, ...]
    budget: int


def quantize(sizes: Sequence[int], budget: int, units: int) -> Quantized:
    """
    Convert byte quantities to units.

    :param sizes: Sizes in bytes, each ceiled to whole units.
    :param budget: Budget in bytes, floored to whole units.
    :param units: Number of units the budget is split into.
    :return: The unit and the converted quantities.
    """
    unit = unit_for(budget, units)
    return Quantized(
        unit,
        tuple(_ceil_div(size, unit) for size in sizes),
        budget // unit,
    )


@dataclasses.dataclass(frozen=True)
class _KeepCosts:
    option_id: int
    time: int
    fwd_over: int
    bwd_over: int
    pack_over: int


@dataclasses.dataclass(frozen=True)
class QuantizedMenu:
    """The numbers the table is computed from, in units."""

    unit: int
    #: Activations ``a_0 .. a_L``.
    acts: tuple[int, ...]
    keep: tuple[tuple[_KeepCosts, ...], ...]
    sweep_time: tuple[int, ...]
    #: Option 0 peak above the kept ``a_s`` when starting a sweep.
    sweep_first: tuple[int, ...]
    #: Option 0 peak when in the middle of a sweep.
    sweep_mid: tuple[int, ...]
    input_data: tuple[str, ...]
    loss_id: str

    @property
    def length(self) -> int:
        """Number of blocks."""
        return len(self.keep)

    @property
    def max_options(self) -> int:
        """Largest number of options above 0 of any block."""
        return max((len(keep) for keep in self.keep), default=0)


def quantize_menu(chain: Chain, menu: OptionMenu, unit: int) -> QuantizedMenu:
    """
    Convert a menu to units.

    :param chain: The chain.
    :param menu: Its menu.
    :param unit: Bytes per unit.
    :return: The converted menu.
    """
    acts = chain.act_sizes
    keep = []
    for s, opts in enumerate(menu.options):
        keep.append(
            tuple(
                _KeepCosts(
                    opt.option_id,
                    opt.time_total,
                    _ceil_div(opt.peak_fwd - acts[s], unit),
                    _ceil_div((opt.peak_bwd or 0) - acts[s], unit),
                    _ceil_div(opt.save_mem - acts[s] + acts[s + 1], unit),
                )
                for opt in opts[1:]
            )
        )
    return QuantizedMenu(
        unit,
        tuple(_ceil_div(act, unit) for act in acts),
        tuple(keep),
        tuple(opts[0].time_fwd for opts in menu.options),
        tuple(
            _ceil_div(opts[0].peak_fwd - acts[s], unit)
            for s, opts in enumerate(menu.options)
        ),
        tuple(_ceil_div(opts[0].peak_fwd, unit) for opts in menu.options),
        tuple(block.input_data for block in chain.blocks),
        chain.blocks[-1].loss_id,
    )


def top_budget(qmenu: QuantizedMenu, budget: int) -> int:
    """Units left for ``Opt(0, L, .)`` once the chain input is resident."""
    return budget // qmenu.unit - qmenu.acts[0]


# ==============================================================================
# Table
# ==============================================================================
@dataclasses.dataclass(frozen=True)
class DPTable:
    """
    ``Opt`` and its argmin for every cell ``0 <= s < t <= L``, ``m <= M``.

    ``kind[s, t, m]`` is 1 when block ``s`` keeps option ``choice[s, t, m]``
    and 2 when the sweep cuts at ``choice[s, t, m]``.
    """

    qmenu: QuantizedMenu
    m_units: int
    opt: _IntArray
    kind: npt.NDArray[np.int8]
    choice: npt.NDArray[np.int32]
    #: Most choices evaluated for a single cell.
    max_candidates: int

    def value(self, s: int, t: int, m: int) -> Optional[int]:
        """The optimal time of a cell, None when infeasible."""
        if m < 0:
            return None
        result = int(self.opt[s, t, min(m, self.m_units)])
        return None if result >= INF else result


def _shift(values: _IntArray, by: int) -> _IntArray:
    """``out[m] = values[m - by]``, infinite where ``m < by``."""
    if by <= 0:
        return values
    out = np.full_like(values, INF)
    if by < len(values):
        out[by:] = values[: len(values) - by]
    return out


def _add(*parts: _IntArray) -> _IntArray:
    total = np.zeros_like(parts[0])
    infeasible = np.zeros(len(parts[0]), dtype=bool)
    for part in parts:
        infeasible |= part >= INF
        total = total + np.minimum(part, INF)
    return np.where(infeasible, INF, total)


def _keep_need(qmenu: QuantizedMenu, t: int, costs: _KeepCosts) -> int:
    grad = qmenu.acts[t] if t < qmenu.length else 0
    return max(grad + costs.fwd_over, costs.bwd_over)


def _cut_need(qmenu: QuantizedMenu, s: int, cut: int, t: int) -> int:
    grad = qmenu.acts[t] if t < qmenu.length else 0
    return grad + max(qmenu.sweep_first[s], *qmenu.sweep_mid[s + 1 : cut], 0)


def keep_fits(
    qmenu: QuantizedMenu, s: int, t: int, option_id: int, m: int
) -> bool:
    """
    Whether block ``s`` can run with option ``option_id`` and keep its pack
    in cell ``(s, t, m)``.

    :raises ValueError: If block ``s`` has no such option above 0.
    """
    for costs in qmenu.keep[s]:
        if costs.option_id == option_id:
            return m >= _keep_need(qmenu, t, costs)
    raise ValueError(f"block {s} has no option {option_id}")


def sweep_fits(qmenu: QuantizedMenu, s: int, cut: int, t: int, m: int) -> bool:
    """Whether option 0 can sweep ``s .. cut-1`` in cell ``(s, t, m)``."""
    if not s < cut < t:
        raise ValueError(f"cut {cut} not strictly inside {s} .. {t}")
    return m >= _cut_need(qmenu, s, cut, t)


def compute_table(qmenu: QuantizedMenu, m_units: int) -> DPTable:
    """
    Fill the table, diagonal by diagonal, vectorised over memory.

    Ties keep the first choice in the order: options by id, then cuts from
    left to right.

    :param qmenu: The quantised menu.
    :param m_units: Largest memory value of the table.
    :return: The table.
    """
    length = qmenu.length
    size = max(m_units, 0) + 1
    opt = np.full((length + 1, length + 1, size), INF, dtype=np.int64)
    kind = np.zeros((length + 1, length + 1, size), dtype=np.int8)
    choice = np.zeros((length + 1, length + 1, size), dtype=np.int32)
    mem = np.arange(size)
    max_candidates = 0

    for span in range(1, length + 1):
        for s in range(length - span + 1):
            t = s + span
            best = np.full(size, INF, dtype=np.int64)
            candidates = 0

            for costs in qmenu.keep[s]:
                candidates += 1
                if t == s + 1:
                    cand = np.full(size, costs.time, dtype=np.int64)
                else:
                    cand = _add(
                        np.full(size, costs.time, dtype=np.int64),
                        _shift(opt[s + 1, t], costs.pack_over),
                    )
                need = _keep_need(qmenu, t, costs)
                cand = np.where(mem >= need, cand, INF)
                better = cand < best
                best = np.where(better, cand, best)
                kind[s, t][better] = _CASE_KEEP
                choice[s, t][better] = costs.option_id

            for cut in range(s + 1, t):
                candidates += 1
                need = _cut_need(qmenu, s, cut, t)
                cand = _add(
                    np.full(
                        size, sum(qmenu.sweep_time[s:cut]), dtype=np.int64
                    ),
                    _shift(opt[cut, t], qmenu.acts[cut]),
                    opt[s, cut],
                )
                cand = np.where(mem >= need, cand, INF)
                better = cand < best
                best = np.where(better, cand, best)
                kind[s, t][better] = _CASE_CUT
                choice[s, t][better] = cut

            assert candidates <= span + qmenu.max_options + 1
            max_candidates = max(max_candidates, candidates)
            opt[s, t] = best

    _LOGGER.debug(
        "Filled table of %d blocks x %d units (%d cells)",
        length,
        size,
        (length * (length + 1) // 2) * size,
    )
    return DPTable(qmenu, max(m_units, 0), opt, kind, choice, max_candidates)


# ==============================================================================
# Schedules
# ==============================================================================
def _build(table: DPTable, s: int, t: int, m: int) -> list[ScheduleOp]:
    qmenu = table.qmenu
    m = min(m, table.m_units)
    kind = int(table.kind[s, t, m])
    chosen = int(table.choice[s, t, m])
    if table.value(s, t, m) is None or kind == _NONE:
        raise InfeasibleBudget(m * qmenu.unit)

    if kind == _CASE_KEEP:
        pack = next(c for c in qmenu.keep[s] if c.option_id == chosen)
        ops: list[ScheduleOp] = [BlockFwd(s, chosen)]
        if t > s + 1:
            ops.extend(_build(table, s + 1, t, m - pack.pack_over))
        elif t == qmenu.length:
            ops.append(Compute(t - 1, qmenu.loss_id))
        ops.append(BlockBwd(s, chosen))
        return ops

    ops = []
    for block in range(s, chosen):
        ops.append(BlockFwd(block, 0))
        if block > s:
            ops.append(Forget(block, qmenu.input_data[block]))
    ops.extend(_build(table, chosen, t, m - qmenu.acts[chosen]))
    ops.append(Forget(chosen, qmenu.input_data[chosen]))
    ops.extend(_build(table, s, chosen, m))
    return ops


def build_schedule(table: DPTable, s: int, t: int, m: int) -> Schedule:
    """
    Rebuild the block-level schedule of a cell.

    :param table: A filled table.
    :param s: First block.
    :param t: One past the last block.
    :param m: Memory in units.
    :return: Schedule of block-level ops.
    :raises InfeasibleBudget: If the cell is infeasible.
    """
    if table.value(s, t, m) is None:
        raise InfeasibleBudget(max(m, 0) * table.qmenu.unit)
    return Schedule(tuple(_build(table, s, t, m)))


def expand(schedule: Schedule, menu: OptionMenu) -> Schedule:
    """
    Replace block-level ops by their option ops.

    :param schedule: A block-level schedule.
    :param menu: The menu its options refer to.
    :return: The flat schedule, with the same metadata.
    """
    return Schedule(
        tuple(expand_ops(schedule.ops, menu.options)), schedule.metadata
    )


def _feasible(chain: Chain, menu: OptionMenu, budget: int, units: int) -> bool:
    qmenu = quantize_menu(chain, menu, unit_for(budget, units))
    m_top = top_budget(qmenu, budget)
    if m_top < 0:
        return False
    table = compute_table(qmenu, m_top)
    return table.value(0, chain.length, m_top) is not None


def minimum_feasible_budget(
    chain: Chain, menu: OptionMenu, units: int = DEFAULT_UNITS
) -> Optional[int]:
    """
    Smallest budget the table finds a schedule for.

    The budget is doubled until feasible and then bisected, each attempt
    quantised on its own as :func:`solve_chain` would.

    :param chain: The chain.
    :param menu: Its menu.
    :param units: Units per budget.
    :return: A feasible budget whose predecessor is infeasible, or None if
        no budget was found feasible.
    """
    if any(len(opts) < 2 for opts in menu.options):
        return None
    high = max(1, sum(chain.act_sizes))
    for _ in range(_MAX_DOUBLINGS):
        if _feasible(chain, menu, high, units):
            break
        high *= 2
    else:
        _LOGGER.warning(
            "No feasible budget up to %d bytes; consider more units", high
        )
        return None
    low = -1
    while high - low > 1:
        mid = (low + high) // 2
        if mid >= 0 and _feasible(chain, menu, mid, units):
            high = mid
        else:
            low = mid
    _LOGGER.info("Minimum feasible budget: %d bytes", high)
    return high


def solve_chain(
    chain: Chain,
    menu: OptionMenu,
    budget_bytes: int,
    units: int = DEFAULT_UNITS,
    unit: Optional[int] = None,
    find_minimum: bool = True,
) -> Schedule:
    """
    Schedule a whole chain within a byte budget.

    :param chain: The chain.
    :param menu: Options of every block.
    :param budget_bytes: Memory budget.
    :param units: Units the budget is split into.
    :param unit: Bytes per unit, overriding ``units``; sweeps share one unit
        so their results are comparable.
    :param find_minimum: Whether to search for the minimum feasible budget
        when the budget is infeasible.
    :return: The flat schedule, its metadata taken from a replay.
    :raises ValidationError: If the menu does not fit the chain.
    :raises InfeasibleBudget: If nothing fits, with the minimum feasible
        budget.
    """
    violations = menu.validate(chain)
    if violations:
        raise ValidationError(violations)
    if unit is None:
        unit = unit_for(budget_bytes, units)
    qmenu = quantize_menu(chain, menu, unit)
    m_top = top_budget(qmenu, budget_bytes)
    table = compute_table(qmenu, m_top)
    best = table.value(0, chain.length, m_top)
    if best is None:
        raise InfeasibleBudget(
            budget_bytes,
            (
                minimum_feasible_budget(chain, menu, units)
                if find_minimum
                else None
            ),
        )
    blocks = build_schedule(table, 0, chain.length, m_top)
    flat = expand(blocks, menu)
    report = simulate(flat, chain, budget=budget_bytes)
    assert report.makespan == best, (
        f"replayed makespan {report.makespan} differs from table {best}"
    )
    _LOGGER.info(
        "Chain of %d blocks: makespan %d us, peak %d of %d bytes",
        chain.length,
        report.makespan,
        report.peak_mem,
        budget_bytes,
    )
    return Schedule(
        flat.ops,
        ScheduleMetadata(budget_bytes, report.makespan, report.peak_mem),
    )


def keep_all_menu(chain: Chain) -> OptionMenu:
    """
    The two-option menu of the plain chain strategy.

    Each block either runs its forward saving nothing (option 0) or runs it
    once keeping everything its backward needs (option 1).

    :param chain: The chain.
    :return: The menu.
    """
    menus = []
    for block, g in enumerate(chain.blocks):
        ops = no_recompute_schedule(g, block).ops
        at = ops.index(Compute(block, g.loss_id))
        menus.append(
            (
                forward_only_option(g, block),
                measure_option(g, ops[:at], ops[at + 1 :], 1, block),
            )
        )
    return OptionMenu(tuple(menus))
