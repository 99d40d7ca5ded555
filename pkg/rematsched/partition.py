"""
Cutting forward graphs into blocks and recognising identical blocks.

A block boundary is a node whose removal disconnects the undirected view of
the graph and that no edge jumps over in the stated order. Each boundary
node ends one block and starts the next.

.. autofunction:: rematsched.find_separators
.. autofunction:: rematsched.cut_into_blocks
.. autofunction:: rematsched.join_blocks
.. autofunction:: rematsched.anonymize
.. autofunction:: rematsched.blocks_equal
.. autofunction:: rematsched.group_identical
.. autofunction:: rematsched.match_cdgraphs
.. autofunction:: rematsched.translate_option

"""

import dataclasses
import logging
from typing import Mapping, Optional, Sequence

import networkx as nx

from .errors import DisconnectedInput
from .model import (
    BlockOption,
    CDGraph,
    CNode,
    Compute,
    DNode,
    Forget,
    ForwardGraph,
    ForwardNode,
    ScheduleOp,
)

__all__ = (
    "BlockClass",
    "CDGraphMatch",
    "find_separators",
    "cut_into_blocks",
    "join_blocks",
    "anonymize",
    "anonymize_map",
    "blocks_equal",
    "group_identical",
    "anonymize_cdgraph",
    "match_cdgraphs",
    "cdgraphs_equal",
    "translate_option",
)

_LOGGER = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class BlockClass:
    """Blocks sharing one structure."""

    class_id: int
    representative: int
    members: tuple[int, ...]
    #: Original to anonymous id of every member, in member order.
    maps: tuple[Mapping[str, str], ...]


# ==============================================================================
# Separators and blocks
# ==============================================================================
def find_separators(g: ForwardGraph) -> list[str]:
    """
    Find the block boundaries of a forward graph.

    :param g: A validated forward graph.
    :return: Boundary node ids by position; inputs and the output are never
        boundaries.
    :raises DisconnectedInput: If the graph is not weakly connected.
    """
    if not g.nodes:
        return []
    graph = g.to_networkx()
    if not nx.is_weakly_connected(graph):
        raise DisconnectedInput(
            f"forward graph has {nx.number_weakly_connected_components(graph)}"
            " disconnected parts"
        )
    cuts = set(nx.articulation_points(graph.to_undirected(as_view=True)))
    excluded = {*g.input_ids, g.output_id}
    positions = g.positions
    spans = [
        (positions[pred], positions[node.id])
        for node in g.nodes
        for pred in node.predecessors
    ]
    separators = [
        node.id
        for pos, node in enumerate(g.nodes)
        if node.id in cuts
        and node.id not in excluded
        and not any(low < pos < high for low, high in spans)
    ]
    _LOGGER.debug("Found %d separators", len(separators))
    return separators


def cut_into_blocks(
    g: ForwardGraph, seps: Sequence[str]
) -> list[ForwardGraph]:
    """
    Cut a forward graph at its separators.

    :param g: A validated forward graph.
    :param seps: Separators as returned by :func:`find_separators`.
    :return: The blocks in order; each separator is the output of one block
        and the sole input of the next.
    """
    bounds = [g.positions[sep] for sep in seps]
    starts = [0, *bounds]
    ends = [*bounds, len(g.nodes) - 1]
    blocks = []
    for index, (start, end) in enumerate(zip(starts, ends)):
        nodes = list(g.nodes[start : end + 1])
        if index > 0:
            nodes[0] = dataclasses.replace(nodes[0], predecessors=())
        blocks.append(
            ForwardGraph(
                tuple(nodes),
                g.input_ids if index == 0 else (g.nodes[start].id,),
                g.nodes[end].id,
            )
        )
    return blocks


def join_blocks(blocks: Sequence[ForwardGraph]) -> ForwardGraph:
    """
    Join blocks cut by :func:`cut_into_blocks` back into one graph.

    :param blocks: Consecutive blocks, each starting at the previous output.
    :return: The graph they were cut from.
    :raises ValueError: If there are no blocks or two do not meet.
    """
    if not blocks:
        raise ValueError("nothing to join")
    nodes = list(blocks[0].nodes)
    for left, right in zip(blocks, blocks[1:]):
        if right.input_ids != (left.output_id,):
            raise ValueError(
                f"block starting at {right.input_ids} does not follow "
                f"{left.output_id}"
            )
        nodes.extend(right.nodes[1:])
    return ForwardGraph(
        tuple(nodes), blocks[0].input_ids, blocks[-1].output_id
    )


# ==============================================================================
# Identical forward blocks
# ==============================================================================
def anonymize_map(b: ForwardGraph) -> dict[str, str]:
    """Original id to anonymous id, ``"1"`` upwards by position."""
    return {node.id: str(pos) for pos, node in enumerate(b.nodes, start=1)}


def anonymize(b: ForwardGraph) -> ForwardGraph:
    """
    Rename a block's nodes by position and its parameters by first use.

    :param b: A validated block.
    :return: The renamed block; anonymising it again changes nothing.
    """
    ids = anonymize_map(b)
    params: dict[str, str] = {}
    nodes = []
    for node in b.nodes:
        param = node.param_signature
        if param:
            param = params.setdefault(param, f"p{len(params) + 1}")
        nodes.append(
            ForwardNode(
                ids[node.id],
                node.op_signature,
                node.output_shape,
                param,
                tuple(ids[pred] for pred in node.predecessors),
            )
        )
    return ForwardGraph(
        tuple(nodes),
        tuple(ids[input_id] for input_id in b.input_ids),
        ids[b.output_id],
    )


def blocks_equal(b1: ForwardGraph, b2: ForwardGraph) -> bool:
    """
    Compare two blocks node by node in their shared order.

    :param b1: A block.
    :param b2: Another block.
    :return: Whether their anonymous forms match.
    """
    if len(b1.nodes) != len(b2.nodes):
        return False
    a1, a2 = anonymize(b1), anonymize(b2)
    if (a1.input_ids, a1.output_id) != (a2.input_ids, a2.output_id):
        return False
    return all(n1 == n2 for n1, n2 in zip(a1.nodes, a2.nodes))


def group_identical(blocks: Sequence[ForwardGraph]) -> list[BlockClass]:
    """
    Partition blocks into classes of identical blocks.

    :param blocks: Blocks as returned by :func:`cut_into_blocks`.
    :return: Classes ordered by their first member.
    """
    members: list[list[int]] = []
    for index, block in enumerate(blocks):
        for group in members:
            if blocks_equal(blocks[group[0]], block):
                group.append(index)
                break
        else:
            members.append([index])
    classes = [
        BlockClass(
            class_id,
            group[0],
            tuple(group),
            tuple(anonymize_map(blocks[m]) for m in group),
        )
        for class_id, group in enumerate(members)
    ]
    _LOGGER.info(
        "%d blocks fall into %d classes", len(blocks), len(classes)
    )
    return classes


# ==============================================================================
# Identical measured blocks
# ==============================================================================
@dataclasses.dataclass(frozen=True)
class CDGraphMatch:
    """Correspondence of the nodes of two identical measured blocks."""

    cnodes: Mapping[str, str]
    dnodes: Mapping[str, str]


def _dnode_order(g: CDGraph) -> list[str]:
    """Input first, then outputs in compute order, then the rest."""
    order = dict.fromkeys([g.input_data])
    for cnode in g.cnodes:
        order.update(dict.fromkeys(cnode.outputs))
    order.update(dict.fromkeys(dnode.id for dnode in g.dnodes))
    return list(order)


def anonymize_cdgraph(g: CDGraph) -> tuple[CDGraph, CDGraphMatch]:
    """
    Rename a measured block into a canonical form.

    Computes become ``c1 ..`` by position and data ``d1 ..`` in the order:
    input, outputs in compute order, anything else.

    :param g: A validated block.
    :return: The canonical block and the renaming applied.
    """
    cids = {c.id: f"c{pos}" for pos, c in enumerate(g.cnodes, start=1)}
    dids = {d: f"d{pos}" for pos, d in enumerate(_dnode_order(g), start=1)}
    cnodes = tuple(
        CNode(
            cids[c.id],
            c.kind,
            c.time,
            c.tmp_mem,
            tuple(dids[dep] for dep in c.deps),
            tuple(dids[out] for out in c.outputs),
        )
        for c in g.cnodes
    )
    dnodes = tuple(
        DNode(
            dids[d],
            g.size(d),
            g.dnode(d).kind,
            tuple(cids[p] for p in g.dnode(d).parents),
        )
        for d in _dnode_order(g)
    )
    return (
        CDGraph(
            cnodes,
            dnodes,
            dids[g.input_data],
            dids[g.output_data],
            cids[g.loss_id],
        ),
        CDGraphMatch(cids, dids),
    )


def match_cdgraphs(a: CDGraph, b: CDGraph) -> Optional[CDGraphMatch]:
    """
    Match two measured blocks node by node.

    Kinds, times, temporary memory, sizes and every edge must agree.

    :param a: A block.
    :param b: Another block.
    :return: The ids of ``b`` for every id of ``a``, or None if they differ.
    """
    if len(a.cnodes) != len(b.cnodes) or len(a.dnodes) != len(b.dnodes):
        return None
    canon_a, map_a = anonymize_cdgraph(a)
    canon_b, map_b = anonymize_cdgraph(b)
    if (
        canon_a.cnodes != canon_b.cnodes
        or canon_a.dnodes != canon_b.dnodes
        or canon_a.output_data != canon_b.output_data
        or canon_a.loss_id != canon_b.loss_id
    ):
        return None
    back_c = {anon: orig for orig, anon in map_b.cnodes.items()}
    back_d = {anon: orig for orig, anon in map_b.dnodes.items()}
    return CDGraphMatch(
        {orig: back_c[anon] for orig, anon in map_a.cnodes.items()},
        {orig: back_d[anon] for orig, anon in map_a.dnodes.items()},
    )


def cdgraphs_equal(a: CDGraph, b: CDGraph) -> bool:
    """Whether two measured blocks are identical up to renaming."""
    return match_cdgraphs(a, b) is not None


def _translate_ops(
    ops: Sequence[ScheduleOp], match: CDGraphMatch, block: int
) -> tuple[ScheduleOp, ...]:
    translated: list[ScheduleOp] = []
    for op in ops:
        if isinstance(op, Compute):
            translated.append(Compute(block, match.cnodes[op.target]))
        elif isinstance(op, Forget):
            translated.append(Forget(block, match.dnodes[op.target]))
        else:
            translated.append(dataclasses.replace(op, block=block))
    return tuple(translated)


def translate_option(
    option: BlockOption, match: CDGraphMatch, block: int
) -> BlockOption:
    """
    Carry an option of one block over to an identical block.

    :param option: Option of the source block.
    :param match: Result of :func:`match_cdgraphs` from source to target.
    :param block: Index of the target block.
    :return: The same option on the target block.
    """
    return dataclasses.replace(
        option,
        fwd_ops=_translate_ops(option.fwd_ops, match, block),
        bwd_ops=_translate_ops(option.bwd_ops, match, block),
    )
