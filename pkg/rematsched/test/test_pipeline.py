"""Tests for solving whole chains."""

import io
import logging
from typing import Optional, Union

import pytest

from ..block_ilp import budget_grid
from ..errors import InfeasibleBudget
from ..model import Chain, validate_chain
from ..pipeline import (
    MANY_OPTIONS,
    MENU_KEEP_ALL,
    THREADS_ENV,
    ClassStats,
    OptionsResult,
    SolveSettings,
    SweepRow,
    build_menu,
    run_solve,
    run_sweep,
    solve_options,
    worker_count,
    write_sweep_csv,
)
from ..simulate import simulate
from .fixtures import (
    abab_chain,
    repeated_chain,
    tiny_chain,
    transformer_block,
)

SMALL = SolveSettings(n_peak=3, n_save=3, workers=1)
KEEP_ALL = SolveSettings(workers=1, menu_mode=MENU_KEEP_ALL)


def test_worker_count(monkeypatch: pytest.MonkeyPatch) -> None:
    """Explicit counts win over the environment, which wins over CPUs."""
    monkeypatch.setenv(THREADS_ENV, "3")
    assert worker_count() == 3
    assert worker_count(2) == 2
    assert worker_count(0) == 1
    monkeypatch.setenv(THREADS_ENV, "0")
    with pytest.raises(ValueError):
        worker_count()
    monkeypatch.delenv(THREADS_ENV)
    assert worker_count() >= 1


def test_classes_solved_once() -> None:
    """Identical blocks share one solve and get the same options."""
    chain = repeated_chain(3)
    grouped = solve_options(chain, SMALL)
    single = solve_options(
        chain,
        SolveSettings(n_peak=3, n_save=3, workers=1, singleton_classes=True),
    )
    assert grouped.class_solves == 1
    assert single.class_solves == 3
    assert grouped.menu == single.menu
    assert grouped.stats[0].members == (0, 1, 2)
    assert grouped.stats[0].timed_out == 0
    assert grouped.menu.validate(chain) == []
    for block, options in enumerate(grouped.menu.options):
        assert options[0].option_id == 0
        assert all(op.block == block for opt in options for op in opt.fwd_ops)


def test_worker_processes_agree() -> None:
    """Solving on several processes gives the same menu."""
    chain = repeated_chain(2)
    serial = solve_options(chain, SMALL)
    parallel = solve_options(
        chain, SolveSettings(n_peak=3, n_save=3, workers=2)
    )
    assert parallel.menu == serial.menu


def test_build_menu() -> None:
    """The menu mode picks between solving blocks and the plain menu."""
    keep = build_menu(tiny_chain(), KEEP_ALL)
    assert keep.class_solves == 0
    assert keep.menu.counts() == (2, 2)
    with pytest.raises(ValueError):
        build_menu(tiny_chain(), SolveSettings(menu_mode="fastest"))


def test_run_solve() -> None:
    """With room to spare nothing is recomputed."""
    chain = repeated_chain(3)
    for settings in (SMALL, KEEP_ALL):
        outcome = run_solve(chain, 1000, settings)
        assert outcome.report.makespan == chain.one_pass_time()
        assert outcome.report.overhead == 0
        replay = simulate(outcome.schedule, chain, budget=1000)
        assert replay == outcome.report


def test_solved_menu_beats_keep_all() -> None:
    """Solved options are never slower than the plain menu."""
    chain = tiny_chain()
    solved = run_solve(chain, 24, SMALL).report
    plain = run_solve(chain, 24, KEEP_ALL).report
    assert solved.makespan <= plain.makespan
    assert solved.peak_mem <= 24


def test_run_solve_infeasible() -> None:
    """Infeasible budgets report time outs of the block solves."""
    chain = tiny_chain()
    with pytest.raises(InfeasibleBudget) as info:
        run_solve(chain, 10, KEEP_ALL)
    assert info.value.timed_out == 0
    assert info.value.min_feasible == 20

    options = build_menu(chain, KEEP_ALL)
    stats = ClassStats(0, (0,), 4, 3, 0, 1, 2)
    with pytest.raises(InfeasibleBudget) as info:
        run_solve(
            chain, 10, KEEP_ALL, OptionsResult(options.menu, (stats,))
        )
    assert info.value.timed_out == 1


def test_sweep() -> None:
    """Sweeps cover each distinct budget once, smallest first."""
    rows = run_sweep(tiny_chain(), [1000, 10, 24, 24], KEEP_ALL)
    assert [row.budget_bytes for row in rows] == [10, 24, 1000]
    assert [row.status for row in rows] == ["infeasible", "ok", "ok"]
    assert rows[0].makespan_us is None
    assert rows[2].makespan_us == tiny_chain().one_pass_time()
    assert rows[2].overhead_pct == 0.0
    assert rows[1].makespan_us is not None
    assert rows[1].makespan_us >= rows[2].makespan_us
    assert run_sweep(tiny_chain(), [], KEEP_ALL) == []


def test_sweep_csv() -> None:
    """Infeasible rows leave their numbers empty."""
    stream = io.StringIO()
    write_sweep_csv(
        [SweepRow(10, None, None, None), SweepRow(24, 49, 25.641, 20)],
        stream,
    )
    assert stream.getvalue() == (
        "budget_bytes,makespan_us,overhead_pct,peak_bytes,status\n"
        "10,,,,infeasible\n"
        "24,49,25.64,20,ok\n"
    )


def test_option_count_reported(caplog: pytest.LogCaptureFixture) -> None:
    """The default grid's option count is logged, loudly when large."""
    chain = Chain((transformer_block(),))
    with caplog.at_level(logging.INFO, logger="rematsched.pipeline"):
        result = solve_options(chain, SolveSettings(workers=1))
    (stats,) = result.stats
    assert stats.pairs == len(budget_grid(chain.blocks[0], 20, 20)) <= 400
    assert 2 <= stats.options <= stats.pairs + 1
    assert stats.options == len(result.menu.options[0])
    assert stats.timed_out == 0
    loud = [r for r in caplog.records if r.levelno == logging.WARNING]
    assert bool(loud) == (stats.options > MANY_OPTIONS)
    assert any(
        f"{stats.options} options from {stats.pairs} pairs" in r.getMessage()
        for r in caplog.records
    )


def test_alternating_classes() -> None:
    """Two classes of three blocks solve twice and schedule as six."""
    chain = abab_chain()
    assert validate_chain(chain) == []
    grouped = solve_options(chain, SMALL)
    single = solve_options(
        chain,
        SolveSettings(n_peak=3, n_save=3, workers=1, singleton_classes=True),
    )
    assert grouped.class_solves == 2
    assert single.class_solves == 6
    assert grouped.stats[0].members == (0, 2, 4)
    assert grouped.stats[1].members == (1, 3, 5)
    assert grouped.menu == single.menu
    for budget in (30, 40, 60, 1000):
        assert _outcome(chain, budget, grouped) == _outcome(
            chain, budget, single
        )
    assert _outcome(chain, 1000, grouped) == chain.one_pass_time()


def _outcome(
    chain: Chain, budget: int, options: OptionsResult
) -> Union[int, tuple[str, Optional[int]]]:
    """Makespan of a budget, or the minimum feasible budget."""
    try:
        return run_solve(chain, budget, SMALL, options).report.makespan
    except InfeasibleBudget as exc:
        return ("infeasible", exc.min_feasible)
