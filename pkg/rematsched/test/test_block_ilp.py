"""Tests for the block models and block options."""

import random
from typing import Optional

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ..block_ilp import (
    BudgetPair,
    budget_grid,
    build_model,
    dedup_options,
    extract_option,
    forward_only_option,
    measure_option,
)
from ..errors import InputError, ModelTooLarge
from ..ilp_solver import SolveStatus, solve
from ..model import BlockOption, Chain, Compute, Forget, Schedule
from ..simulate import no_recompute_schedule, simulate
from .fixtures import random_rich_block, tiny_chain, toy_block


def _objective(m_peak: int, m_save: int) -> Optional[int]:
    result = solve(build_model(toy_block(), BudgetPair(m_peak, m_save)))
    if result.status == SolveStatus.INFEASIBLE:
        return None
    assert result.status == SolveStatus.OPTIMAL
    return result.objective


def test_variable_count() -> None:
    """Every family is declared once per stage and step."""
    model = build_model(toy_block(), BudgetPair(22, 22))
    assert model.num_variables == 107
    assert len(model.index.r) == 15
    assert len(model.index.s) == 25
    assert len(model.index.p) == 25
    assert len(model.index.create) == 15
    assert len(model.index.delete) == 27


def test_toy_block_peak_budgets() -> None:
    """Lower peaks force recomputing the first forward, then fail."""
    assert _objective(22, 22) == 0
    for m_peak in range(18, 22):
        assert _objective(m_peak, m_peak) == 2
    assert _objective(17, 17) is None


def test_toy_block_save_budgets() -> None:
    """Saving less across the loss costs a recomputation."""
    assert _objective(22, 14) == 0
    assert _objective(22, 12) == 2
    assert _objective(22, 10) == 2
    assert _objective(22, 9) is None


def test_bad_budgets() -> None:
    """Malformed pairs and oversized models are refused."""
    with pytest.raises(InputError):
        build_model(toy_block(), BudgetPair(10, 12))
    with pytest.raises(ModelTooLarge):
        build_model(toy_block(), BudgetPair(22, 22), variable_cap=100)


def test_violated_rows() -> None:
    """The all-zero assignment breaks the rows forcing each stage's step."""
    model = build_model(toy_block(), BudgetPair(22, 22))
    assert model.violated_rows([0] * model.num_variables)
    result = solve(model)
    assert result.assignment is not None
    assert model.violated_rows(result.assignment) == []
    profile = model.memory_profile(result.assignment)
    assert max(profile.values()) <= 22


def test_budget_grid() -> None:
    """Peaks span the one-pass schedules; saves run up to the peak."""
    assert budget_grid(toy_block(), 3, 3) == [
        BudgetPair(22, 8),
        BudgetPair(22, 15),
        BudgetPair(22, 22),
    ]
    g = tiny_chain().blocks[0]
    grid = budget_grid(g, 2, 2)
    assert grid == [
        BudgetPair(20, 4),
        BudgetPair(20, 20),
    ]
    assert all(pair.m_save <= pair.m_peak for pair in grid)


def test_extract_option() -> None:
    """A solved assignment becomes an option that replays as measured."""
    g = toy_block()
    model = build_model(g, BudgetPair(18, 18))
    result = solve(model)
    assert result.assignment is not None
    option = extract_option(g, model, result.assignment, option_id=3)
    assert option.option_id == 3
    assert option.time_fwd == 5
    assert option.time_bwd == 7
    assert option.save_mem == 2
    assert option.peak_fwd == 14
    assert option.peak_bwd == 18
    assert Compute(0, "f1") in option.bwd_ops
    report = simulate(
        Schedule((*option.fwd_ops, Compute(0, "loss"), *option.bwd_ops)),
        Chain((g,)),
        budget=18,
    )
    assert report.makespan == 12
    assert report.overhead == 2


def test_forward_only_option() -> None:
    """Option 0 keeps nothing but the input and the output."""
    option = forward_only_option(toy_block())
    assert option.option_id == 0
    assert option.fwd_ops == (
        Compute(0, "f1"),
        Compute(0, "f2"),
        Forget(0, "d1"),
    )
    assert option.bwd_ops == ()
    assert option.time_bwd is None
    assert option.peak_bwd is None
    assert option.time_fwd == 5
    assert option.save_mem == 2
    assert option.peak_fwd == 14


def test_measure_option() -> None:
    """The no-recompute schedule measures as the keep-everything option."""
    g = tiny_chain().blocks[0]
    ops = no_recompute_schedule(g, 1).ops
    at = ops.index(Compute(1, "loss0"))
    option = measure_option(g, ops[:at], ops[at + 1 :], 1, block=1)
    assert option.costs() == (22, 10, 14, 20)
    assert option.time_fwd == 10
    assert all(op.block == 1 for op in (*option.fwd_ops, *option.bwd_ops))


def _option(
    option_id: int, time_bwd: int, save: int, peak_bwd: int, tag: str
) -> BlockOption:
    return BlockOption(
        option_id,
        5,
        time_bwd,
        save,
        14,
        peak_bwd,
        (Compute(0, "f1"), Compute(0, tag)),
        (),
    )


def test_dedup_options() -> None:
    """Duplicates and dominated options go; survivors are renumbered."""
    zero = forward_only_option(toy_block())
    fast = _option(7, 5, 6, 22, "fast")
    lean = _option(4, 7, 2, 18, "lean")
    worse = _option(2, 9, 2, 18, "worse")
    again = _option(9, 5, 6, 22, "fast")
    kept = dedup_options([lean, worse, fast, zero, again])
    assert kept[0] == zero
    assert [opt.option_id for opt in kept] == [0, 1, 2]
    assert [opt.fwd_ops[1].target for opt in kept[1:]] == ["fast", "lean"]
    assert dedup_options(kept) == kept


def test_backward_outputs_are_kept() -> None:
    """Gradients cannot be produced twice, so they stay until consumed."""
    model = build_model(toy_block(), BudgetPair(22, 22))
    idx = model.index
    assert model.fixed[idx.s[3, 2, "g2"]] == 1
    assert model.fixed[idx.s[4, 3, "g1"]] == 1
    assert model.fixed[idx.p[4, "g1"]] == 1
    assert idx.s[3, 0, "d1"] not in model.fixed


def test_implied_rows() -> None:
    """Each step and the save get rows for the bytes they must hold."""
    model = build_model(toy_block(), BudgetPair(22, 22))
    rows = {row.name: row for row in model.rows}
    assert "save-need" in rows
    assert "peak-need[3,3]" in rows
    need = rows["need[3,3]"]
    assert need.coefs == ((model.index.r[3, 3], 18),)
    assert need.rhs == 22
    assert rows["save-floor"].coefs == ()
    assert rows["save-floor"].rhs == 22 - 10
    result = solve(model)
    assert result.assignment is not None
    assert model.violated_rows(result.assignment) == []


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_objective_never_grows_with_budget(seed: int) -> None:
    """More memory of either kind never costs more recomputation."""
    g = random_rich_block(random.Random(seed), max_size=8)
    pairs = budget_grid(g, 3, 3)
    low = min(pair.m_peak for pair in pairs)
    pairs.append(BudgetPair(low - 1, min(g.output_size, low - 1)))
    best: dict[BudgetPair, Optional[int]] = {}
    for pair in pairs:
        result = solve(build_model(g, pair), time_limit=60.0)
        assert result.status != SolveStatus.TIMED_OUT
        best[pair] = result.objective
    for small, small_cost in best.items():
        for large, large_cost in best.items():
            if (
                small.m_peak <= large.m_peak
                and small.m_save <= large.m_save
                and small_cost is not None
            ):
                assert large_cost is not None, (small, large)
                assert large_cost <= small_cost, (small, large)
