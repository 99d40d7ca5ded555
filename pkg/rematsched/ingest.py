"""
Reading and writing the version 1 file format.

Every file is one JSON document with a ``format_version`` and a ``kind``;
the remaining keys depend on the kind. Unknown keys are errors. Documents
are written with sorted keys and a fixed indent so that identical content
gives identical bytes.

.. autofunction:: rematsched.load_forward_graph
.. autofunction:: rematsched.load_chain
.. autofunction:: rematsched.load_schedule
.. autofunction:: rematsched.load_options
.. autofunction:: rematsched.load_partition
.. autofunction:: rematsched.save_schedule

"""

import json
import logging
from pathlib import Path, PurePath
from typing import Any, Callable, Optional, TypeVar, Union

from .block_ilp import BudgetPair
from .chain_dp import OptionMenu
from .errors import IoError, ParseError, ValidationError, Violation
from .ilp_solver import SolveResult, SolveStats, SolveStatus
from .model import (
    BlockBwd,
    BlockFwd,
    BlockOption,
    CDGraph,
    Chain,
    CKind,
    CNode,
    Compute,
    DKind,
    DNode,
    Forget,
    ForwardGraph,
    ForwardNode,
    Schedule,
    ScheduleMetadata,
    ScheduleOp,
    validate_chain,
    validate_forward_graph,
)
from .partition import BlockClass, anonymize_map, cdgraphs_equal

__all__ = (
    "FORMAT_VERSION",
    "PathLike",
    "dumps",
    "parse_forward_graph",
    "parse_chain",
    "parse_schedule",
    "parse_options",
    "parse_partition",
    "parse_solve_result",
    "load_forward_graph",
    "load_chain",
    "load_schedule",
    "load_options",
    "load_partition",
    "load_solve_result",
    "encode_forward_graph",
    "encode_chain",
    "encode_schedule",
    "encode_options",
    "encode_partition",
    "encode_solve_result",
    "save_forward_graph",
    "save_chain",
    "save_schedule",
    "save_options",
    "save_partition",
    "save_solve_result",
)

_LOGGER = logging.getLogger(__name__)

FORMAT_VERSION = 1

PathLike = Union[str, PurePath]

_T = TypeVar("_T")

_OP_NAMES: dict[type, str] = {
    Compute: "compute",
    Forget: "forget",
    BlockFwd: "block_fwd",
    BlockBwd: "block_bwd",
}


# ==============================================================================
# Decoding helpers
# ==============================================================================
class _Obj:
    """A JSON object being decoded, tracking its path and the keys used."""

    def __init__(self, value: Any, path: str) -> None:
        if not isinstance(value, dict):
            raise ParseError("expected an object", path or "document")
        self.value = value
        self.path = path
        self.seen: set[str] = set()

    def sub(self, key: str) -> str:
        """Path of a key of this object."""
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, optional: bool = False) -> Any:
        """Raw value of a key."""
        self.seen.add(key)
        if key not in self.value:
            if optional:
                return None
            raise ParseError("missing field", self.sub(key))
        return self.value[key]

    def integer(self, key: str) -> int:
        """An integer field."""
        return _integer(self.get(key), self.sub(key))

    def optional_integer(self, key: str) -> Optional[int]:
        """An integer field that may be null or absent."""
        value = self.get(key, optional=True)
        return None if value is None else _integer(value, self.sub(key))

    def string(self, key: str) -> str:
        """A string field."""
        return _string(self.get(key), self.sub(key))

    def items(self, key: str) -> list[tuple[Any, str]]:
        """Elements of a list field with their paths."""
        value = self.get(key)
        path = self.sub(key)
        if not isinstance(value, list):
            raise ParseError("expected a list", path)
        return [(item, f"{path}[{index}]") for index, item in enumerate(value)]

    def strings(self, key: str) -> tuple[str, ...]:
        """A list of strings."""
        return tuple(_string(item, path) for item, path in self.items(key))

    def integers(self, key: str) -> tuple[int, ...]:
        """A list of integers."""
        return tuple(_integer(item, path) for item, path in self.items(key))

    def close(self) -> None:
        """Reject the keys that were never asked for."""
        unknown = sorted(set(self.value) - self.seen)
        if unknown:
            raise ParseError(
                f"unknown field {unknown[0]!r}", self.sub(unknown[0])
            )


def _integer(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError("expected an integer", path)
    return value


def _string(value: Any, path: str) -> str:
    if not isinstance(value, str):
        raise ParseError("expected a string", path)
    return value


def _open(text: str, kind: str) -> _Obj:
    """Decode the JSON text of a document and check its header."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            exc.msg, f"line {exc.lineno} column {exc.colno}"
        ) from exc
    obj = _Obj(doc, "")
    version = obj.get("format_version")
    if isinstance(version, bool) or version != FORMAT_VERSION:
        raise ParseError("unsupported version", "format_version")
    actual = obj.string("kind")
    if actual != kind:
        raise ParseError(f"expected a {kind} document, got {actual}", "kind")
    return obj


def _enum(cls: Callable[[str], _T], value: str, path: str) -> _T:
    try:
        return cls(value)
    except ValueError as exc:
        raise ParseError(f"unknown kind {value!r}", path) from exc


def _read(path: PathLike) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc


def _write(path: PathLike, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc
    _LOGGER.debug("Wrote %s", path)


def dumps(kind: str, payload: dict[str, Any]) -> str:
    """
    Canonical text of a document.

    :param kind: The document kind.
    :param payload: The kind-specific keys.
    :return: The text, ending in a newline.
    """
    doc = {"format_version": FORMAT_VERSION, "kind": kind, **payload}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


# ==============================================================================
# Forward graphs
# ==============================================================================
def _decode_forward_graph(obj: _Obj) -> ForwardGraph:
    nodes = []
    for item, path in obj.items("nodes"):
        node = _Obj(item, path)
        nodes.append(
            ForwardNode(
                node.string("id"),
                node.string("op"),
                node.integers("shape"),
                node.string("params"),
                node.strings("preds"),
            )
        )
        node.close()
    graph = ForwardGraph(
        tuple(nodes), obj.strings("inputs"), obj.string("output")
    )
    obj.close()
    return graph


def encode_forward_graph(g: ForwardGraph) -> dict[str, Any]:
    """Payload of a forward graph."""
    return {
        "nodes": [
            {
                "id": node.id,
                "op": node.op_signature,
                "shape": list(node.output_shape),
                "params": node.param_signature,
                "preds": list(node.predecessors),
            }
            for node in g.nodes
        ],
        "inputs": list(g.input_ids),
        "output": g.output_id,
    }


def parse_forward_graph(text: str) -> ForwardGraph:
    """
    Decode and validate a forward graph document.

    :param text: The document.
    :return: The graph.
    :raises ParseError: If the document is malformed.
    :raises ValidationError: If the graph breaks an invariant.
    """
    graph = _decode_forward_graph(_open(text, "forward_graph"))
    violations = validate_forward_graph(graph)
    if violations:
        raise ValidationError(violations)
    return graph


def load_forward_graph(path: PathLike) -> ForwardGraph:
    """Read a forward graph file; see :func:`parse_forward_graph`."""
    return parse_forward_graph(_read(path))


def save_forward_graph(g: ForwardGraph, path: PathLike) -> None:
    """Write a forward graph file."""
    _write(path, dumps("forward_graph", encode_forward_graph(g)))


# ==============================================================================
# Chains
# ==============================================================================
def _decode_block(obj: _Obj) -> CDGraph:
    cnodes = []
    for item, path in obj.items("cnodes"):
        cnode = _Obj(item, path)
        cnodes.append(
            CNode(
                cnode.string("id"),
                _enum(CKind, cnode.string("kind"), cnode.sub("kind")),
                cnode.integer("time_us"),
                cnode.integer("tmp_mem"),
                cnode.strings("deps"),
                cnode.strings("outputs"),
            )
        )
        cnode.close()
    dnodes = []
    for item, path in obj.items("dnodes"):
        dnode = _Obj(item, path)
        dnodes.append(
            DNode(
                dnode.string("id"),
                dnode.integer("size"),
                _enum(DKind, dnode.string("kind"), dnode.sub("kind")),
                dnode.strings("parents"),
            )
        )
        dnode.close()
    block = CDGraph(
        tuple(cnodes),
        tuple(dnodes),
        obj.string("input_data"),
        obj.string("output_data"),
        obj.string("loss_id"),
    )
    obj.close()
    return block


def _encode_block(g: CDGraph) -> dict[str, Any]:
    return {
        "cnodes": [
            {
                "id": c.id,
                "kind": c.kind.value,
                "time_us": c.time,
                "tmp_mem": c.tmp_mem,
                "deps": list(c.deps),
                "outputs": list(c.outputs),
            }
            for c in g.cnodes
        ],
        "dnodes": [
            {
                "id": d.id,
                "size": d.size,
                "kind": d.kind.value,
                "parents": list(d.parents),
            }
            for d in g.dnodes
        ],
        "input_data": g.input_data,
        "output_data": g.output_data,
        "loss_id": g.loss_id,
    }


def encode_chain(chain: Chain) -> dict[str, Any]:
    """Payload of a chain."""
    return {
        "blocks": [_encode_block(block) for block in chain.blocks],
        "equiv_class": list(chain.equiv_class),
    }


def _class_violations(chain: Chain) -> list[Violation]:
    violations = []
    for members in chain.classes().values():
        first = chain.blocks[members[0]]
        violations.extend(
            Violation(
                "equiv-class",
                f"block {member}",
                f"declared identical to block {members[0]} but differs",
            )
            for member in members[1:]
            if not cdgraphs_equal(first, chain.blocks[member])
        )
    return violations


def parse_chain(text: str) -> Chain:
    """
    Decode and validate a chain document.

    Blocks declared to share an equivalence class are compared node by node.

    :param text: The document.
    :return: The chain.
    :raises ParseError: If the document is malformed.
    :raises ValidationError: If the chain breaks an invariant.
    """
    obj = _open(text, "chain")
    blocks = tuple(
        _decode_block(_Obj(item, path)) for item, path in obj.items("blocks")
    )
    classes: tuple[int, ...] = ()
    if obj.get("equiv_class", optional=True) is not None:
        classes = obj.integers("equiv_class")
    obj.close()
    chain = Chain(blocks, classes)
    violations = validate_chain(chain)
    if not violations:
        violations = _class_violations(chain)
    if violations:
        raise ValidationError(violations)
    return chain


def load_chain(path: PathLike) -> Chain:
    """Read a chain file; see :func:`parse_chain`."""
    return parse_chain(_read(path))


def save_chain(chain: Chain, path: PathLike) -> None:
    """Write a chain file."""
    _write(path, dumps("chain", encode_chain(chain)))


# ==============================================================================
# Schedules
# ==============================================================================
def _decode_op(item: Any, path: str) -> ScheduleOp:
    obj = _Obj(item, path)
    name = obj.string("op")
    block = obj.integer("block")
    op: ScheduleOp
    if name == "compute":
        op = Compute(block, obj.string("target"))
    elif name == "forget":
        op = Forget(block, obj.string("target"))
    elif name == "block_fwd":
        op = BlockFwd(block, obj.integer("target"))
    elif name == "block_bwd":
        op = BlockBwd(block, obj.integer("target"))
    else:
        raise ParseError(f"unknown op {name!r}", obj.sub("op"))
    obj.close()
    return op


def _encode_op(op: ScheduleOp) -> dict[str, Any]:
    return {"op": _OP_NAMES[type(op)], "block": op.block, "target": op.target}


def _decode_ops(obj: _Obj, key: str) -> tuple[ScheduleOp, ...]:
    return tuple(_decode_op(item, path) for item, path in obj.items(key))


def encode_schedule(s: Schedule) -> dict[str, Any]:
    """Payload of a schedule."""
    payload: dict[str, Any] = {"ops": [_encode_op(op) for op in s.ops]}
    if s.metadata is not None:
        payload["metadata"] = {
            "budget_bytes": s.metadata.budget_bytes,
            "makespan_us": s.metadata.makespan_us,
            "peak_bytes": s.metadata.peak_bytes,
        }
    return payload


def parse_schedule(text: str) -> Schedule:
    """
    Decode a schedule document.

    :param text: The document.
    :return: The schedule.
    :raises ParseError: If the document is malformed.
    """
    obj = _open(text, "schedule")
    ops = _decode_ops(obj, "ops")
    metadata = None
    raw = obj.get("metadata", optional=True)
    if raw is not None:
        meta = _Obj(raw, obj.sub("metadata"))
        metadata = ScheduleMetadata(
            meta.integer("budget_bytes"),
            meta.integer("makespan_us"),
            meta.integer("peak_bytes"),
        )
        meta.close()
    obj.close()
    return Schedule(ops, metadata)


def load_schedule(path: PathLike) -> Schedule:
    """Read a schedule file; see :func:`parse_schedule`."""
    return parse_schedule(_read(path))


def save_schedule(s: Schedule, path: PathLike) -> None:
    """
    Write a schedule file.

    :param s: The schedule.
    :param path: Destination.
    :raises IoError: If the file cannot be written.
    """
    _write(path, dumps("schedule", encode_schedule(s)))


# ==============================================================================
# Option menus
# ==============================================================================
def _decode_option(item: Any, path: str) -> BlockOption:
    obj = _Obj(item, path)
    option = BlockOption(
        obj.integer("option_id"),
        obj.integer("time_fwd"),
        obj.optional_integer("time_bwd"),
        obj.integer("save_mem"),
        obj.integer("peak_fwd"),
        obj.optional_integer("peak_bwd"),
        _decode_ops(obj, "fwd_ops"),
        _decode_ops(obj, "bwd_ops"),
    )
    obj.close()
    return option


def encode_options(menu: OptionMenu) -> dict[str, Any]:
    """Payload of an option menu."""
    return {
        "blocks": [
            [
                {
                    "option_id": opt.option_id,
                    "time_fwd": opt.time_fwd,
                    "time_bwd": opt.time_bwd,
                    "save_mem": opt.save_mem,
                    "peak_fwd": opt.peak_fwd,
                    "peak_bwd": opt.peak_bwd,
                    "fwd_ops": [_encode_op(op) for op in opt.fwd_ops],
                    "bwd_ops": [_encode_op(op) for op in opt.bwd_ops],
                }
                for opt in opts
            ]
            for opts in menu.options
        ]
    }


def parse_options(text: str) -> OptionMenu:
    """
    Decode an option menu document.

    :param text: The document.
    :return: The menu; fit to a chain is checked when it is used.
    :raises ParseError: If the document is malformed.
    """
    obj = _open(text, "options")
    menus = []
    for item, path in obj.items("blocks"):
        if not isinstance(item, list):
            raise ParseError("expected a list", path)
        menus.append(
            tuple(
                _decode_option(opt, f"{path}[{index}]")
                for index, opt in enumerate(item)
            )
        )
    obj.close()
    return OptionMenu(tuple(menus))


def load_options(path: PathLike) -> OptionMenu:
    """Read an option menu file; see :func:`parse_options`."""
    return parse_options(_read(path))


def save_options(menu: OptionMenu, path: PathLike) -> None:
    """Write an option menu file."""
    _write(path, dumps("options", encode_options(menu)))


# ==============================================================================
# Partitions
# ==============================================================================
def encode_partition(
    blocks: list[ForwardGraph], classes: list[BlockClass]
) -> dict[str, Any]:
    """Payload of a partition."""
    return {
        "blocks": [encode_forward_graph(block) for block in blocks],
        "classes": [
            {
                "class_id": cls.class_id,
                "representative": cls.representative,
                "members": list(cls.members),
            }
            for cls in classes
        ],
    }


def parse_partition(text: str) -> tuple[list[ForwardGraph], list[BlockClass]]:
    """
    Decode a partition document.

    :param text: The document.
    :return: The blocks and their classes.
    :raises ParseError: If the document is malformed.
    :raises ValidationError: If a block breaks an invariant.
    """
    obj = _open(text, "partition")
    blocks = [
        _decode_forward_graph(_Obj(item, path))
        for item, path in obj.items("blocks")
    ]
    classes = []
    for item, path in obj.items("classes"):
        entry = _Obj(item, path)
        members = entry.integers("members")
        if any(not 0 <= member < len(blocks) for member in members):
            raise ParseError("member out of range", entry.sub("members"))
        classes.append(
            BlockClass(
                entry.integer("class_id"),
                entry.integer("representative"),
                members,
                tuple(anonymize_map(blocks[member]) for member in members),
            )
        )
        entry.close()
    obj.close()
    violations = [
        Violation(v.rule, f"block {index}: {v.subject}", v.detail)
        for index, block in enumerate(blocks)
        for v in validate_forward_graph(block)
    ]
    if violations:
        raise ValidationError(violations)
    return blocks, classes


def load_partition(
    path: PathLike,
) -> tuple[list[ForwardGraph], list[BlockClass]]:
    """Read a partition file; see :func:`parse_partition`."""
    return parse_partition(_read(path))


def save_partition(
    blocks: list[ForwardGraph], classes: list[BlockClass], path: PathLike
) -> None:
    """Write a partition file."""
    _write(path, dumps("partition", encode_partition(blocks, classes)))


# ==============================================================================
# Solver results
# ==============================================================================
def encode_solve_result(
    result: SolveResult, budget: BudgetPair
) -> dict[str, Any]:
    """Payload of a block solver result."""
    return {
        "m_peak": budget.m_peak,
        "m_save": budget.m_save,
        "status": result.status.value,
        "objective": result.objective,
        "assignment": (
            None if result.assignment is None else list(result.assignment)
        ),
        "nodes": result.stats.nodes,
        "wall_time": result.stats.wall_time,
    }


def parse_solve_result(text: str) -> tuple[SolveResult, BudgetPair]:
    """
    Decode a block solver result document.

    :param text: The document.
    :return: The result and the budget pair it was solved for.
    :raises ParseError: If the document is malformed.
    """
    obj = _open(text, "solve_result")
    budget = BudgetPair(obj.integer("m_peak"), obj.integer("m_save"))
    status = _enum(SolveStatus, obj.string("status"), obj.sub("status"))
    assignment = None
    if obj.get("assignment", optional=True) is not None:
        assignment = obj.integers("assignment")
    wall_time = obj.get("wall_time")
    if isinstance(wall_time, bool) or not isinstance(
        wall_time, (int, float)
    ):
        raise ParseError("expected a number", obj.sub("wall_time"))
    result = SolveResult(
        status,
        obj.optional_integer("objective"),
        assignment,
        SolveStats(obj.integer("nodes"), float(wall_time)),
    )
    obj.close()
    if result.status == SolveStatus.OPTIMAL and assignment is None:
        raise ParseError("optimal result needs an assignment", "assignment")
    return result, budget


def load_solve_result(path: PathLike) -> tuple[SolveResult, BudgetPair]:
    """Read a block solver result file; see :func:`parse_solve_result`."""
    return parse_solve_result(_read(path))


def save_solve_result(
    result: SolveResult, budget: BudgetPair, path: PathLike
) -> None:
    """Write a block solver result file."""
    _write(path, dumps("solve_result", encode_solve_result(result, budget)))
