"""
Command line front end.

Sub-commands:

- ``partition``: cut a forward graph into blocks and group identical ones.
- ``solve``: build block options and schedule a chain within a budget.
- ``simulate``: replay a schedule and report its makespan and peak.
- ``sweep``: solve a chain for several budgets and write a CSV.

Exit codes: 0 on success, 1 on any other scheduler error, 2 on bad input,
3 when the budget cannot be met, 4 when it cannot be met and some block
solves timed out.

.. autofunction:: rematsched.cli.main

"""

import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Protocol, Sequence

from cfgclasses import arg, optional, parse_args_with_submodes, validator

from .errors import (
    BudgetExceeded,
    InfeasibleBudget,
    InputError,
    IoError,
    RematError,
    SimulationError,
)
from .ingest import (
    load_chain,
    load_forward_graph,
    load_options,
    load_schedule,
    save_options,
    save_partition,
    save_schedule,
)
from .model import Chain
from .partition import cut_into_blocks, find_separators, group_identical
from .pipeline import (
    MENU_FULL,
    MENU_KEEP_ALL,
    OptionsResult,
    SolveSettings,
    build_menu,
    run_solve,
    run_sweep,
    write_sweep_csv,
)
from .simulate import simulate, write_trace_csv
from .transforms import bytesize, bytesizes, optional_bytesize

__all__ = (
    "EXIT_OK",
    "EXIT_ERROR",
    "EXIT_INPUT",
    "EXIT_INFEASIBLE",
    "EXIT_TIMED_OUT",
    "GlobalConfig",
    "PartitionCommand",
    "SolveCommand",
    "SimulateCommand",
    "SweepCommand",
    "SUBCOMMANDS",
    "main",
)

_LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_TIMED_OUT = 4


@dataclasses.dataclass
class GlobalConfig:
    """Schedule re-materialisation of activations within a memory budget."""

    verbose: bool = arg("Log debug messages", "-v", "--verbose", default=False)
    workers: Optional[int] = optional(
        "Worker processes for block solves "
        "(default: $REMAT_THREADS, else the number of CPUs)"
    )

    @validator
    def check_workers(self) -> None:
        """Worker count must be positive."""
        if self.workers is not None and self.workers < 1:
            raise ValueError("--workers must be at least 1")

    def configure_logging(self) -> None:
        """Set the root logger to the requested level."""
        logging.getLogger().setLevel(
            logging.DEBUG if self.verbose else logging.INFO
        )


class _Command(Protocol):
    def run(self, top: GlobalConfig) -> int:
        """Run the sub-command, returning the exit code."""


def _print_report(**values: object) -> None:
    for key, value in values.items():
        print(f"{key}: {value}")


@dataclasses.dataclass
class PartitionCommand:
    """Cut a forward graph into blocks and group identical blocks."""

    graph: Path = arg("Forward graph file", positional=True)
    output: Path = arg("Partition file to write", "-o", "--output")

    def run(self, top: GlobalConfig) -> int:
        """Partition the graph and write the blocks with their classes."""
        del top
        graph = load_forward_graph(self.graph)
        blocks = cut_into_blocks(graph, find_separators(graph))
        classes = group_identical(blocks)
        save_partition(blocks, classes, self.output)
        _print_report(blocks=len(blocks), classes=len(classes))
        return EXIT_OK


@dataclasses.dataclass
class SolveCommand:
    """Schedule a chain within a memory budget."""

    chain: Path = arg("Chain file", positional=True)
    memory: int = arg(
        "Memory budget in bytes, K/M/G/T suffixes accepted",
        transform=bytesize,
        transform_type=str,
    )
    output: Path = arg("Schedule file to write", "-o", "--output")
    npeak: int = arg("Peak budgets per block", default=20)
    nsave: int = arg("Save budgets per peak budget", default=20)
    units: int = arg("Memory units of the chain table", default=500)
    time_limit: float = arg(
        "Solver time limit per budget pair in seconds", default=120.0
    )
    menu: str = arg(
        "Block options: solved per block, or keep-everything-or-nothing",
        choices=[MENU_FULL, MENU_KEEP_ALL],
        default=MENU_FULL,
    )
    save_options: Optional[Path] = optional("Write the block options here")
    load_options: Optional[Path] = optional(
        "Read the block options from here instead of solving blocks"
    )
    singleton_classes: bool = arg(
        "Solve every block on its own, ignoring equivalence classes",
        default=False,
    )

    @validator
    def check_grid(self) -> None:
        """Grid sizes and units must be positive."""
        if min(self.npeak, self.nsave, self.units) < 1:
            raise ValueError("--npeak, --nsave and --units must be positive")
        if self.time_limit <= 0:
            raise ValueError("--time-limit must be positive")

    @validator
    def check_options(self) -> None:
        """Loaded options exclude the keep-all menu."""
        if self.load_options is not None and self.menu == MENU_KEEP_ALL:
            raise ValueError("--load-options cannot be used with keep-all")

    def settings(self, top: GlobalConfig) -> SolveSettings:
        """The library settings these arguments describe."""
        return SolveSettings(
            self.npeak,
            self.nsave,
            self.units,
            self.time_limit,
            workers=top.workers,
            singleton_classes=self.singleton_classes,
            menu_mode=self.menu,
        )

    def options(self, chain: Chain, settings: SolveSettings) -> OptionsResult:
        """Load or build the block options, saving them if asked to."""
        if self.load_options is not None:
            options = OptionsResult(load_options(self.load_options), ())
        else:
            options = build_menu(chain, settings)
            _LOGGER.info("Solved %d block classes", options.class_solves)
        if self.save_options is not None:
            save_options(options.menu, self.save_options)
        return options

    def run(self, top: GlobalConfig) -> int:
        """Solve and write the schedule."""
        chain = load_chain(self.chain)
        settings = self.settings(top)
        outcome = run_solve(
            chain, self.memory, settings, self.options(chain, settings)
        )
        save_schedule(outcome.schedule, self.output)
        _print_report(
            budget_bytes=self.memory,
            makespan_us=outcome.report.makespan,
            overhead_us=outcome.report.overhead,
            peak_bytes=outcome.report.peak_mem,
        )
        return EXIT_OK


@dataclasses.dataclass
class SimulateCommand:
    """Replay a schedule against a chain."""

    schedule: Path = arg("Schedule file", positional=True)
    chain: Path = arg("Chain file", positional=True)
    budget: Optional[int] = optional(
        "Fail if the peak exceeds these bytes, K/M/G/T suffixes accepted",
        transform=optional_bytesize,
        transform_type=str,
    )
    options: Optional[Path] = optional(
        "Block options file, for schedules with block-level ops"
    )
    trace: Optional[Path] = optional("Write a per-op CSV trace here")

    def run(self, top: GlobalConfig) -> int:
        """Replay and report."""
        del top
        schedule = load_schedule(self.schedule)
        chain = load_chain(self.chain)
        menu = None if self.options is None else load_options(self.options)
        report = simulate(
            schedule,
            chain,
            budget=self.budget,
            options=None if menu is None else menu.options,
            trace=self.trace is not None,
        )
        if self.trace is not None:
            try:
                with open(self.trace, "w", encoding="utf-8") as stream:
                    write_trace_csv(report, stream)
            except OSError as exc:
                raise IoError(f"cannot write {self.trace}: {exc}") from exc
        metadata = schedule.metadata
        if metadata is not None and metadata.makespan_us != report.makespan:
            _LOGGER.warning(
                "Schedule records makespan %d us, replay gives %d us",
                metadata.makespan_us,
                report.makespan,
            )
        _print_report(
            makespan_us=report.makespan,
            overhead_us=report.overhead,
            peak_bytes=report.peak_mem,
        )
        return EXIT_OK


@dataclasses.dataclass
class SweepCommand:
    """Solve a chain for a range of budgets and write a CSV."""

    chain: Path = arg("Chain file", positional=True)
    budgets: list[int] = arg(
        "Budgets in bytes, K/M/G/T suffixes accepted",
        default_factory=list,
        transform=bytesizes,
        transform_type=list[str],
    )
    start: Optional[int] = optional(
        "First budget of a range",
        "--from",
        transform=optional_bytesize,
        transform_type=str,
    )
    stop: Optional[int] = optional(
        "Last budget of a range",
        "--to",
        transform=optional_bytesize,
        transform_type=str,
    )
    steps: Optional[int] = optional("Number of budgets in the range")
    output: Optional[Path] = optional("CSV file to write, else stdout")
    npeak: int = arg("Peak budgets per block", default=20)
    nsave: int = arg("Save budgets per peak budget", default=20)
    units: int = arg("Memory units of the chain table", default=500)
    time_limit: float = arg(
        "Solver time limit per budget pair in seconds", default=120.0
    )
    menu: str = arg(
        "Block options: solved per block, or keep-everything-or-nothing",
        choices=[MENU_FULL, MENU_KEEP_ALL],
        default=MENU_FULL,
    )
    singleton_classes: bool = arg(
        "Solve every block on its own, ignoring equivalence classes",
        default=False,
    )

    @validator
    def check_budgets(self) -> None:
        """Budgets are either listed or given as a range."""
        ranged = (self.start, self.stop, self.steps)
        if self.budgets and any(value is not None for value in ranged):
            raise ValueError("give either --budgets or --from/--to/--steps")
        if not self.budgets and any(value is None for value in ranged):
            raise ValueError("give --budgets or all of --from, --to, --steps")
        if self.steps is not None and self.steps < 1:
            raise ValueError("--steps must be at least 1")

    def budget_values(self) -> list[int]:
        """The budgets to solve for."""
        if self.budgets:
            return list(self.budgets)
        assert self.start is not None and self.stop is not None
        assert self.steps is not None
        if self.steps == 1:
            return [self.stop]
        return [
            self.start + (self.stop - self.start) * k // (self.steps - 1)
            for k in range(self.steps)
        ]

    def run(self, top: GlobalConfig) -> int:
        """Sweep and write the CSV."""
        settings = SolveSettings(
            self.npeak,
            self.nsave,
            self.units,
            self.time_limit,
            workers=top.workers,
            singleton_classes=self.singleton_classes,
            menu_mode=self.menu,
        )
        rows = run_sweep(
            load_chain(self.chain), self.budget_values(), settings
        )
        if self.output is None:
            write_sweep_csv(rows, sys.stdout)
        else:
            try:
                with open(self.output, "w", encoding="utf-8") as stream:
                    write_sweep_csv(rows, stream)
            except OSError as exc:
                raise IoError(f"cannot write {self.output}: {exc}") from exc
        return EXIT_OK


SUBCOMMANDS: dict[str, type[_Command]] = {
    "partition": PartitionCommand,
    "solve": SolveCommand,
    "simulate": SimulateCommand,
    "sweep": SweepCommand,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Entry point of the ``rematsched`` command.

    :param argv: Arguments, without the program name; defaults to
        ``sys.argv[1:]``.
    :return: The exit code.
    """
    logging.basicConfig(
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        top, command = parse_args_with_submodes(
            GlobalConfig, args, SUBCOMMANDS, prog="rematsched"
        )
    except (InputError, IoError) as exc:
        _LOGGER.error("%s", exc)
        return EXIT_INPUT
    top.configure_logging()
    try:
        return command.run(top)
    except InfeasibleBudget as exc:
        _LOGGER.error("%s", exc)
        return EXIT_TIMED_OUT if exc.timed_out else EXIT_INFEASIBLE
    except BudgetExceeded as exc:
        _LOGGER.error("%s", exc)
        return EXIT_INFEASIBLE
    except (InputError, IoError, SimulationError) as exc:
        _LOGGER.error("%s", exc)
        return EXIT_INPUT
    except RematError as exc:
        _LOGGER.error("%s", exc)
        return EXIT_ERROR
