"""Tests for the graph model and its validation."""

import dataclasses
import random

from ..model import (
    Chain,
    CKind,
    CNode,
    DKind,
    DNode,
    ForwardNode,
    validate_cdgraph,
    validate_chain,
    validate_forward_graph,
)
from .fixtures import (
    abab_graph,
    diamond_graph,
    random_block,
    tiny_chain,
    toy_block,
)


def _rules(violations: list) -> set[str]:
    return {v.rule for v in violations}


def test_valid_fixtures() -> None:
    """The shared fixtures are well-formed."""
    assert validate_cdgraph(toy_block()) == []
    assert validate_chain(tiny_chain()) == []
    assert validate_forward_graph(diamond_graph()) == []
    assert validate_forward_graph(abab_graph()) == []


def test_random_blocks_valid() -> None:
    """Generated blocks are well-formed whatever the seed."""
    rng = random.Random(7)
    for _ in range(50):
        assert validate_cdgraph(random_block(rng)) == []


def test_block_properties() -> None:
    """Derived properties of a block."""
    g = toy_block()
    assert g.loss_index == 2
    assert g.input_size == 2
    assert g.output_size == 8
    assert g.loss_output == "g2"
    assert g.retained_sinks == ("g0",)
    assert g.input_grad == "g0"
    assert g.one_pass_time() == 10
    assert g.edges.parents_of_data["g1"] == ("b2",)
    assert g.edges.children_of_data["d1"] == ("f2", "b2")


def test_forward_graph_violations() -> None:
    """Each broken forward graph invariant is reported by name."""
    g = diamond_graph()
    swapped = dataclasses.replace(
        g, nodes=(g.nodes[0], g.nodes[3], g.nodes[1], g.nodes[2], g.nodes[4])
    )
    assert "topological-order" in _rules(validate_forward_graph(swapped))

    dangling = dataclasses.replace(
        g,
        nodes=(*g.nodes[:4], ForwardNode("d", "linear", (2, 3), "w", ("z",))),
    )
    assert "dangling-edge" in _rules(validate_forward_graph(dangling))

    negative = dataclasses.replace(
        g, nodes=(*g.nodes[:4], ForwardNode("d", "x", (-1,), "w", ("c",)))
    )
    assert _rules(validate_forward_graph(negative)) == {"shape"}

    two_sinks = dataclasses.replace(g, output_id="c")
    assert "output" in _rules(validate_forward_graph(two_sinks))

    repeated = dataclasses.replace(g, nodes=(*g.nodes, g.nodes[4]))
    assert "unique-id" in _rules(validate_forward_graph(repeated))


def test_cdgraph_reference_violations() -> None:
    """Unknown references and loss counts are reported before the rest."""
    g = toy_block()
    bad_dep = dataclasses.replace(
        g,
        cnodes=(
            CNode("f1", CKind.FORWARD, 2, 0, ("nope",), ("d1",)),
            *g.cnodes[1:],
        ),
    )
    assert _rules(validate_cdgraph(bad_dep)) == {"dangling-edge"}

    no_loss = dataclasses.replace(
        g,
        cnodes=tuple(
            dataclasses.replace(c, kind=CKind.BACKWARD)
            if c.id == "loss"
            else c
            for c in g.cnodes
        ),
    )
    assert _rules(validate_cdgraph(no_loss)) == {"loss-count"}


def test_cdgraph_node_violations() -> None:
    """Loss, sign, phase and parent rules."""
    g = toy_block()

    def replace_cnode(cid: str, **changes: object) -> list:
        return validate_cdgraph(
            dataclasses.replace(
                g,
                cnodes=tuple(
                    dataclasses.replace(c, **changes) if c.id == cid else c
                    for c in g.cnodes
                ),
            )
        )

    assert "loss-time" in _rules(replace_cnode("loss", time=1))
    assert "loss-tmp" in _rules(replace_cnode("loss", tmp_mem=1))
    assert "nonnegative" in _rules(replace_cnode("f2", time=-1))
    assert "phase-order" in _rules(replace_cnode("b1", kind=CKind.FORWARD))

    wrong_parents = dataclasses.replace(
        g,
        dnodes=tuple(
            dataclasses.replace(d, parents=("f1",)) if d.id == "d2" else d
            for d in g.dnodes
        ),
    )
    assert "parents" in _rules(validate_cdgraph(wrong_parents))

    phantom = dataclasses.replace(
        g,
        dnodes=tuple(
            dataclasses.replace(d, kind=DKind.PHANTOM) if d.id == "d1" else d
            for d in g.dnodes
        ),
    )
    assert "phantom-degree" in _rules(validate_cdgraph(phantom))


def test_cdgraph_order_violations() -> None:
    """Out-of-order computations and cycles."""
    g = toy_block()
    c = g.cnodes
    swapped = dataclasses.replace(g, cnodes=(c[1], c[0], *c[2:]))
    assert "topological-order" in _rules(validate_cdgraph(swapped))

    cyclic = dataclasses.replace(
        g,
        cnodes=(
            CNode("f1", CKind.FORWARD, 2, 0, ("x0", "d2"), ("d1",)),
            *c[1:],
        ),
    )
    assert "acyclic" in _rules(validate_cdgraph(cyclic))


def test_cdgraph_gradient_violations() -> None:
    """Gradients left over and gradient sizes."""
    g = toy_block()
    extra = dataclasses.replace(
        g,
        cnodes=(
            *g.cnodes[:4],
            CNode("b1", CKind.BACKWARD, 2, 0, ("g1", "x0"), ("g0", "gx")),
        ),
        dnodes=(*g.dnodes, DNode("gx", 1, DKind.GRAD, ("b1",))),
    )
    assert _rules(validate_cdgraph(extra)) == {"retained-sink"}

    resized = dataclasses.replace(
        g,
        dnodes=tuple(
            dataclasses.replace(d, size=3) if d.id == "g0" else d
            for d in g.dnodes
        ),
    )
    assert _rules(validate_cdgraph(resized)) == {"grad-size"}


def test_chain_seams() -> None:
    """Seam data is shared between neighbouring blocks."""
    chain = tiny_chain()
    assert chain.length == 2
    assert chain.act_sizes == (4, 4, 2)
    assert chain.data_key(0, "y0") == (1, "x1")
    assert chain.data_key(0, "gy0") == (1, "gx1")
    assert chain.data_key(0, "h0") == (0, "h0")
    assert chain.data_key(1, "y1") == (1, "y1")
    assert chain.is_virtual_loss(0, "loss0")
    assert not chain.is_virtual_loss(1, "loss1")
    assert chain.one_pass_time() == 39
    assert chain.classes() == {0: (0,), 1: (1,)}


def test_chain_violations() -> None:
    """Seam sizes and class lengths are checked."""
    chain = tiny_chain()
    assert _rules(validate_chain(Chain(()))) == {"empty"}
    assert "equiv-class" in _rules(
        validate_chain(Chain(chain.blocks, (0, 0, 0)))
    )
    flipped = Chain((chain.blocks[1], chain.blocks[0]))
    assert _rules(validate_chain(flipped)) == {"seam-size"}
