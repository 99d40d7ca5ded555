"""
Shared domain types of the scheduler and their validation.

All types are frozen dataclasses; derived edge sets of a
:class:`CDGraph` are computed once on first access and cached.

.. autoclass:: rematsched.ForwardGraph
.. autoclass:: rematsched.CDGraph
.. autoclass:: rematsched.Chain
.. autoclass:: rematsched.BlockOption
.. autoclass:: rematsched.Schedule

.. autofunction:: rematsched.validate_forward_graph
.. autofunction:: rematsched.validate_cdgraph
.. autofunction:: rematsched.validate_chain
.. autofunction:: rematsched.derive_edge_sets

"""

import dataclasses
import enum
import functools
from typing import Mapping, NamedTuple, Optional, Union

import networkx as nx

from .errors import Violation

__all__ = (
    "CKind",
    "DKind",
    "ForwardNode",
    "ForwardGraph",
    "CNode",
    "DNode",
    "CDGraph",
    "EdgeSets",
    "Chain",
    "DataKey",
    "Compute",
    "Forget",
    "BlockFwd",
    "BlockBwd",
    "ScheduleOp",
    "ScheduleMetadata",
    "Schedule",
    "BlockOption",
    "validate_forward_graph",
    "validate_cdgraph",
    "validate_chain",
    "derive_edge_sets",
)


class CKind(str, enum.Enum):
    """Kind of a compute node."""

    FORWARD = "forward"
    BACKWARD = "backward"
    LOSS = "loss"


class DKind(str, enum.Enum):
    """Kind of a data node."""

    DATA = "data"
    GRAD = "grad"
    PHANTOM = "phantom"


# ==============================================================================
# Forward graphs
# ==============================================================================
@dataclasses.dataclass(frozen=True)
class ForwardNode:
    """One operation of the simplified forward graph."""

    id: str
    op_signature: str
    output_shape: tuple[int, ...]
    param_signature: str
    predecessors: tuple[str, ...] = ()


@dataclasses.dataclass(frozen=True)
class ForwardGraph:
    """
    Forward DAG of named operations.

    The order of :attr:`nodes` is a topological order; ties are resolved by
    the order nodes were listed in the input file.
    """

    nodes: tuple[ForwardNode, ...]
    input_ids: tuple[str, ...]
    output_id: str

    @functools.cached_property
    def positions(self) -> Mapping[str, int]:
        """Map of node id to its topological position."""
        return {node.id: pos for pos, node in enumerate(self.nodes)}

    @functools.cached_property
    def successors(self) -> Mapping[str, tuple[str, ...]]:
        """Map of node id to the ids of the nodes consuming it."""
        succs: dict[str, list[str]] = {node.id: [] for node in self.nodes}
        for node in self.nodes:
            for pred in node.predecessors:
                if pred in succs:
                    succs[pred].append(node.id)
        return {key: tuple(value) for key, value in succs.items()}

    def node(self, node_id: str) -> ForwardNode:
        """Look up a node by id."""
        return self.nodes[self.positions[node_id]]

    def to_networkx(self) -> "nx.DiGraph":
        """Directed networkx view of the graph, nodes in stated order."""
        graph = nx.DiGraph()
        graph.add_nodes_from(node.id for node in self.nodes)
        for node in self.nodes:
            graph.add_edges_from((pred, node.id) for pred in node.predecessors)
        return graph


def validate_forward_graph(g: ForwardGraph) -> list[Violation]:
    """
    Check the invariants of a forward graph.

    :param g: The graph to check.
    :return: The violations found, empty iff the graph is well-formed.
    """
    violations = []
    seen: set[str] = set()
    for node in g.nodes:
        if node.id in seen:
            violations.append(
                Violation("unique-id", node.id, "node id is repeated")
            )
        for pred in node.predecessors:
            if pred not in g.positions:
                violations.append(
                    Violation(
                        "dangling-edge", node.id, f"unknown predecessor {pred}"
                    )
                )
            elif pred not in seen:
                violations.append(
                    Violation(
                        "topological-order",
                        node.id,
                        f"listed before its predecessor {pred}",
                    )
                )
        if any(dim < 0 for dim in node.output_shape):
            violations.append(
                Violation("shape", node.id, "negative dimension in shape")
            )
        seen.add(node.id)

    for input_id in g.input_ids:
        if input_id not in g.positions:
            violations.append(
                Violation("dangling-input", input_id, "unknown input node")
            )
    if g.output_id not in g.positions:
        violations.append(
            Violation("output", g.output_id, "unknown output node")
        )
    else:
        sinks = [node.id for node in g.nodes if not g.successors[node.id]]
        if g.successors[g.output_id]:
            violations.append(
                Violation("output", g.output_id, "output node has successors")
            )
        if sinks != [g.output_id] and g.nodes:
            violations.append(
                Violation(
                    "output",
                    ",".join(sinks),
                    "graph must have exactly one node without successors",
                )
            )
    return violations


# ==============================================================================
# Compute/data graphs
# ==============================================================================
@dataclasses.dataclass(frozen=True)
class CNode:
    """A computation with its measured time and temporary memory."""

    id: str
    kind: CKind
    time: int
    tmp_mem: int
    deps: tuple[str, ...]
    outputs: tuple[str, ...]


@dataclasses.dataclass(frozen=True)
class DNode:
    """A tensor stored in memory."""

    id: str
    size: int
    kind: DKind
    parents: tuple[str, ...]


class EdgeSets(NamedTuple):
    """Edge sets derived from a :class:`CDGraph`."""

    #: Every (compute, data) production edge, in compute then output order.
    children_of_comp: tuple[tuple[str, str], ...]
    #: Contributing computes of each data node.
    parents_of_data: Mapping[str, tuple[str, ...]]
    #: Consuming computes of each data node, in compute order.
    children_of_data: Mapping[str, tuple[str, ...]]


@dataclasses.dataclass(frozen=True)
class CDGraph:
    """
    Compute/data graph of one block, forward and backward.

    :attr:`cnodes` are listed in the fixed topological order the block ILP
    uses; compute ``t`` of that order closes stage ``t``.
    """

    cnodes: tuple[CNode, ...]
    dnodes: tuple[DNode, ...]
    input_data: str
    output_data: str
    loss_id: str

    @functools.cached_property
    def cnode_index(self) -> Mapping[str, int]:
        """Map of compute id to its position in :attr:`cnodes`."""
        return {cnode.id: pos for pos, cnode in enumerate(self.cnodes)}

    @functools.cached_property
    def dnode_map(self) -> Mapping[str, DNode]:
        """Map of data id to data node."""
        return {dnode.id: dnode for dnode in self.dnodes}

    @functools.cached_property
    def edges(self) -> EdgeSets:
        """Cached result of :func:`derive_edge_sets`."""
        return derive_edge_sets(self)

    @property
    def loss_index(self) -> int:
        """Position of the loss in the compute order."""
        return self.cnode_index[self.loss_id]

    def cnode(self, cnode_id: str) -> CNode:
        """Look up a compute node by id."""
        return self.cnodes[self.cnode_index[cnode_id]]

    def dnode(self, dnode_id: str) -> DNode:
        """Look up a data node by id."""
        return self.dnode_map[dnode_id]

    def size(self, dnode_id: str) -> int:
        """Size in bytes of a data node."""
        return self.dnode_map[dnode_id].size

    @property
    def input_size(self) -> int:
        """Size of the block input activation."""
        return self.size(self.input_data)

    @property
    def output_size(self) -> int:
        """Size of the block output activation."""
        return self.size(self.output_data)

    @functools.cached_property
    def loss_output(self) -> str:
        """Id of the gradient the loss produces."""
        return self.cnode(self.loss_id).outputs[0]

    @functools.cached_property
    def retained_sinks(self) -> tuple[str, ...]:
        """
        Gradients with no consumer other than the loss output.

        These are the block's input gradients: they outlive the block's
        backward phase.
        """
        return tuple(
            dnode.id
            for dnode in self.dnodes
            if dnode.kind == DKind.GRAD
            and not self.edges.children_of_data.get(dnode.id)
            and dnode.id != self.loss_output
        )

    @property
    def input_grad(self) -> Optional[str]:
        """Id of the gradient of the block input, if the block has one."""
        return self.retained_sinks[0] if self.retained_sinks else None

    def one_pass_time(self) -> int:
        """Time of running every computation exactly once."""
        return sum(cnode.time for cnode in self.cnodes)


def derive_edge_sets(g: CDGraph) -> EdgeSets:
    """
    Derive the production and consumption edge sets of a graph.

    :param g: The graph, assumed validated.
    :return: The three edge sets.
    """
    children_of_comp = []
    parents: dict[str, list[str]] = {dnode.id: [] for dnode in g.dnodes}
    children: dict[str, list[str]] = {dnode.id: [] for dnode in g.dnodes}
    for cnode in g.cnodes:
        for output in cnode.outputs:
            children_of_comp.append((cnode.id, output))
            parents.setdefault(output, []).append(cnode.id)
        for dep in cnode.deps:
            children.setdefault(dep, []).append(cnode.id)
    return EdgeSets(
        tuple(children_of_comp),
        {key: tuple(value) for key, value in parents.items()},
        {key: tuple(value) for key, value in children.items()},
    )


def _cdgraph_reference_violations(g: CDGraph) -> list[Violation]:
    """Uniqueness and dangling-reference checks."""
    violations = []
    for kind, ids in (
        ("cnode", [cnode.id for cnode in g.cnodes]),
        ("dnode", [dnode.id for dnode in g.dnodes]),
    ):
        for dup in sorted({x for x in ids if ids.count(x) > 1}):
            violations.append(
                Violation("unique-id", dup, f"{kind} id is repeated")
            )
    for cnode in g.cnodes:
        for ref in (*cnode.deps, *cnode.outputs):
            if ref not in g.dnode_map:
                violations.append(
                    Violation(
                        "dangling-edge", cnode.id, f"unknown data node {ref}"
                    )
                )
    for dnode in g.dnodes:
        for parent in dnode.parents:
            if parent not in g.cnode_index:
                violations.append(
                    Violation(
                        "dangling-edge",
                        dnode.id,
                        f"unknown parent compute {parent}",
                    )
                )
    for name, ref in (
        ("input_data", g.input_data),
        ("output_data", g.output_data),
    ):
        if ref not in g.dnode_map:
            violations.append(
                Violation("dangling-edge", name, f"unknown data node {ref}")
            )
    losses = [cnode.id for cnode in g.cnodes if cnode.kind == CKind.LOSS]
    if len(losses) != 1 or g.loss_id not in g.cnode_index:
        violations.append(
            Violation(
                "loss-count",
                g.loss_id,
                f"expected exactly one loss node, found {losses}",
            )
        )
    elif losses[0] != g.loss_id:
        violations.append(
            Violation("loss-count", g.loss_id, "loss_id is not the loss node")
        )
    return violations


def _cdgraph_node_violations(g: CDGraph) -> list[Violation]:
    """Per-node checks, run once references are known to be sound."""
    violations = []
    loss_pos = g.cnode_index[g.loss_id]
    for pos, cnode in enumerate(g.cnodes):
        if cnode.time < 0 or cnode.tmp_mem < 0:
            violations.append(
                Violation(
                    "nonnegative", cnode.id, "negative time or tmp_mem"
                )
            )
        if cnode.kind == CKind.LOSS:
            if cnode.time != 0:
                violations.append(
                    Violation("loss-time", cnode.id, "loss time must be 0")
                )
            if cnode.tmp_mem != 0:
                violations.append(
                    Violation("loss-tmp", cnode.id, "loss tmp_mem must be 0")
                )
            if cnode.deps != (g.output_data,) or len(cnode.outputs) != 1:
                violations.append(
                    Violation(
                        "loss-arity",
                        cnode.id,
                        "loss must consume the block output and produce "
                        "exactly one gradient",
                    )
                )
            elif g.dnode(cnode.outputs[0]).kind != DKind.GRAD:
                violations.append(
                    Violation(
                        "loss-arity", cnode.id, "loss output must be a grad"
                    )
                )
        elif not cnode.outputs:
            violations.append(
                Violation("outputs", cnode.id, "computation has no output")
            )
        if cnode.kind == CKind.FORWARD and pos > loss_pos:
            violations.append(
                Violation("phase-order", cnode.id, "forward after the loss")
            )
        if cnode.kind == CKind.BACKWARD and pos < loss_pos:
            violations.append(
                Violation("phase-order", cnode.id, "backward before the loss")
            )

    edges = derive_edge_sets(g)
    for dnode in g.dnodes:
        if dnode.size < 0:
            violations.append(
                Violation("nonnegative", dnode.id, "negative size")
            )
        producers = edges.parents_of_data.get(dnode.id, ())
        if sorted(producers) != sorted(dnode.parents):
            violations.append(
                Violation(
                    "parents",
                    dnode.id,
                    f"parents {list(dnode.parents)} do not match producing "
                    f"computes {list(producers)}",
                )
            )
        if dnode.id == g.input_data:
            if producers:
                violations.append(
                    Violation("parents", dnode.id, "block input has a parent")
                )
        elif not producers:
            violations.append(
                Violation("parents", dnode.id, "data node has no parent")
            )
        if dnode.kind == DKind.PHANTOM and (
            len(producers) != 1
            or len(edges.children_of_data.get(dnode.id, ())) != 1
        ):
            violations.append(
                Violation(
                    "phantom-degree",
                    dnode.id,
                    "phantom needs exactly one parent and one consumer",
                )
            )
    return violations


def _cdgraph_order_violations(g: CDGraph) -> list[Violation]:
    """Acyclicity and topological order of the stated compute order."""
    digraph = nx.DiGraph()
    for cnode in g.cnodes:
        digraph.add_node(("c", cnode.id))
        digraph.add_edges_from(
            (("d", dep), ("c", cnode.id)) for dep in cnode.deps
        )
        digraph.add_edges_from(
            (("c", cnode.id), ("d", out)) for out in cnode.outputs
        )
    try:
        cycle = nx.find_cycle(digraph)
    except nx.NetworkXNoCycle:
        cycle = None
    if cycle:
        return [
            Violation(
                "acyclic",
                " -> ".join(edge[0][1] for edge in cycle),
                "graph contains a cycle",
            )
        ]

    violations = []
    edges = g.edges
    for pos, cnode in enumerate(g.cnodes):
        for dep in cnode.deps:
            late = [
                parent
                for parent in edges.parents_of_data[dep]
                if g.cnode_index[parent] >= pos
            ]
            if late:
                violations.append(
                    Violation(
                        "topological-order",
                        cnode.id,
                        f"consumes {dep} before its producer {late[0]}",
                    )
                )
    return violations


def validate_cdgraph(g: CDGraph) -> list[Violation]:
    """
    Check every invariant of a compute/data graph.

    :param g: The graph to check.
    :return:
        The violations found, each naming the rule and the offending node;
        empty iff the graph is well-formed.
    """
    violations = _cdgraph_reference_violations(g)
    if violations:
        return violations
    violations = _cdgraph_node_violations(g)
    violations += _cdgraph_order_violations(g)
    if not violations and len(g.retained_sinks) > 1:
        violations.append(
            Violation(
                "retained-sink",
                ",".join(g.retained_sinks),
                "at most one gradient may be left without a consumer",
            )
        )
    if not violations and g.input_grad is not None:
        if g.size(g.input_grad) != g.input_size:
            violations.append(
                Violation(
                    "grad-size",
                    g.input_grad,
                    "input gradient size differs from the input size",
                )
            )
    if not violations and g.size(g.loss_output) != g.output_size:
        violations.append(
            Violation(
                "grad-size",
                g.loss_output,
                "loss gradient size differs from the output size",
            )
        )
    return violations


# ==============================================================================
# Chains
# ==============================================================================
#: Chain-wide name of a data node: (block index, data id).
DataKey = tuple[int, str]


@dataclasses.dataclass(frozen=True)
class Chain:
    """
    Sequence of blocks joined at single activations.

    Block ``i``'s output data is block ``i + 1``'s input data and block
    ``i``'s loss gradient is block ``i + 1``'s input gradient; see
    :meth:`data_key`.
    """

    blocks: tuple[CDGraph, ...]
    equiv_class: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.equiv_class:
            object.__setattr__(
                self, "equiv_class", tuple(range(len(self.blocks)))
            )

    @property
    def length(self) -> int:
        """Number of blocks ``L``."""
        return len(self.blocks)

    @functools.cached_property
    def act_sizes(self) -> tuple[int, ...]:
        """Activation sizes ``a_0 .. a_L``."""
        if not self.blocks:
            return ()
        return (
            *(block.input_size for block in self.blocks),
            self.blocks[-1].output_size,
        )

    def data_key(self, block: int, dnode_id: str) -> DataKey:
        """
        Chain-wide key of a block-local data node, unifying seams.

        :param block: Index of the block the id belongs to.
        :param dnode_id: Data id local to that block.
        :return: The canonical key shared by every alias of the data.
        """
        graph = self.blocks[block]
        if block + 1 < len(self.blocks):
            nxt = self.blocks[block + 1]
            if dnode_id == graph.output_data:
                return (block + 1, nxt.input_data)
            if dnode_id == graph.loss_output and nxt.input_grad is not None:
                return (block + 1, nxt.input_grad)
        return (block, dnode_id)

    def is_virtual_loss(self, block: int, cnode_id: str) -> bool:
        """Whether a compute is a loss standing in for the later blocks."""
        return (
            block + 1 < len(self.blocks)
            and cnode_id == self.blocks[block].loss_id
        )

    def one_pass_time(self) -> int:
        """Makespan of running every computation of the chain once."""
        return sum(block.one_pass_time() for block in self.blocks)

    def classes(self) -> dict[int, tuple[int, ...]]:
        """Members of each equivalence class, classes by first member."""
        ret: dict[int, list[int]] = {}
        for index, class_id in enumerate(self.equiv_class):
            ret.setdefault(class_id, []).append(index)
        return {key: tuple(value) for key, value in ret.items()}


def validate_chain(chain: Chain) -> list[Violation]:
    """
    Check every block of a chain plus the seam invariants.

    :param chain: The chain to check.
    :return: The violations found; subjects are prefixed with the block.
    """
    violations = []
    if not chain.blocks:
        return [Violation("empty", "chain", "chain has no blocks")]
    if len(chain.equiv_class) != len(chain.blocks):
        violations.append(
            Violation(
                "equiv-class",
                "chain",
                "equiv_class needs one entry per block",
            )
        )
    for index, block in enumerate(chain.blocks):
        violations.extend(
            dataclasses.replace(v, subject=f"block {index}: {v.subject}")
            for v in validate_cdgraph(block)
        )
    if violations:
        return violations

    for index in range(len(chain.blocks) - 1):
        left, right = chain.blocks[index], chain.blocks[index + 1]
        if left.output_size != right.input_size:
            violations.append(
                Violation(
                    "seam-size",
                    f"block {index}/{index + 1}",
                    f"output of {left.output_size} bytes feeds an input of "
                    f"{right.input_size} bytes",
                )
            )
        if right.input_grad is None:
            violations.append(
                Violation(
                    "seam-grad",
                    f"block {index + 1}",
                    "block after the first has no input gradient",
                )
            )
    return violations


# ==============================================================================
# Schedules
# ==============================================================================
@dataclasses.dataclass(frozen=True)
class Compute:
    """Run a compute node of a block."""

    block: int
    target: str


@dataclasses.dataclass(frozen=True)
class Forget:
    """Free a data node of a block."""

    block: int
    target: str


@dataclasses.dataclass(frozen=True)
class BlockFwd:
    """Run the forward phase of a block option."""

    block: int
    target: int


@dataclasses.dataclass(frozen=True)
class BlockBwd:
    """Run the backward phase of a block option."""

    block: int
    target: int


ScheduleOp = Union[Compute, Forget, BlockFwd, BlockBwd]


@dataclasses.dataclass(frozen=True)
class ScheduleMetadata:
    """Predictions recorded alongside a schedule."""

    budget_bytes: int
    makespan_us: int
    peak_bytes: int


@dataclasses.dataclass(frozen=True)
class Schedule:
    """Ordered compute and forget actions."""

    ops: tuple[ScheduleOp, ...] = ()
    metadata: Optional[ScheduleMetadata] = None


@dataclasses.dataclass(frozen=True)
class BlockOption:
    """
    One way of running a block: its two phases and their measured costs.

    Option 0 is the forward-only sweep that keeps nothing but the chain
    activations; it has no backward phase.
    """

    option_id: int
    time_fwd: int
    time_bwd: Optional[int]
    #: Resident between the phases, including the block input.
    save_mem: int
    peak_fwd: int
    peak_bwd: Optional[int]
    fwd_ops: tuple[ScheduleOp, ...]
    bwd_ops: tuple[ScheduleOp, ...]

    @property
    def time_total(self) -> int:
        """Time of both phases."""
        return self.time_fwd + (self.time_bwd or 0)

    def costs(self) -> tuple[int, int, int, int]:
        """The quantities options are compared on."""
        return (
            self.time_total,
            self.save_mem,
            self.peak_fwd,
            self.peak_bwd or 0,
        )
