"""Graphs and chains shared by the tests."""

import dataclasses
import functools
import random
from typing import Optional

from ..block_ilp import (
    budget_grid,
    build_model,
    dedup_options,
    extract_option,
    forward_only_option,
)
from ..chain_dp import OptionMenu
from ..ilp_solver import solve
from ..model import (
    BlockOption,
    CDGraph,
    Chain,
    CKind,
    CNode,
    DKind,
    DNode,
    ForwardGraph,
    ForwardNode,
)
from ..partition import translate_option, match_cdgraphs

FWD, BWD, LOSS = CKind.FORWARD, CKind.BACKWARD, CKind.LOSS
DATA, GRAD, PHANTOM = DKind.DATA, DKind.GRAD, DKind.PHANTOM


def cdgraph(
    cnodes: list[tuple[str, CKind, int, int, list[str], list[str]]],
    sizes: dict[str, tuple[int, DKind]],
    input_data: str,
    output_data: str,
    loss_id: str,
) -> CDGraph:
    """Build a block, deriving every data node's parents."""
    parents: dict[str, list[str]] = {name: [] for name in sizes}
    for cid, _, _, _, _, outputs in cnodes:
        for out in outputs:
            parents[out].append(cid)
    return CDGraph(
        tuple(
            CNode(cid, kind, time, tmp, tuple(deps), tuple(outs))
            for cid, kind, time, tmp, deps, outs in cnodes
        ),
        tuple(
            DNode(name, size, kind, tuple(parents[name]))
            for name, (size, kind) in sizes.items()
        ),
        input_data,
        output_data,
        loss_id,
    )


# ==============================================================================
# Hand-built blocks
# ==============================================================================
def toy_block() -> CDGraph:
    """
    Two forwards and their backwards.

    Schedules of this block recompute nothing with budgets of 22 bytes, need
    to recompute ``f1`` (2us) with a peak of 18 to 21 bytes, and do not
    exist with a peak of 17 bytes or less. With a peak of 22, a save budget
    of 10 to 13 also forces recomputing ``f1`` and 9 is infeasible.
    """
    return cdgraph(
        [
            ("f1", FWD, 2, 0, ["x0"], ["d1"]),
            ("f2", FWD, 3, 0, ["d1"], ["d2"]),
            ("loss", LOSS, 0, 0, ["d2"], ["g2"]),
            ("b2", BWD, 3, 0, ["g2", "d1"], ["g1"]),
            ("b1", BWD, 2, 0, ["g1", "x0"], ["g0"]),
        ],
        {
            "x0": (2, DATA),
            "d1": (4, DATA),
            "d2": (8, DATA),
            "g2": (8, GRAD),
            "g1": (4, GRAD),
            "g0": (2, GRAD),
        },
        "x0",
        "d2",
        "loss",
    )


def wide_block() -> CDGraph:
    """
    Three forwards, one of them with a second output kept for its backward.

    ``b3`` reads and writes 20 bytes besides the 4-byte input, so no
    schedule fits a peak below 24 bytes. The loss gradient and the input
    make a save below 8 bytes impossible.
    """
    return cdgraph(
        [
            ("f1", FWD, 3, 0, ["x0"], ["h1", "p1"]),
            ("f2", FWD, 4, 1, ["h1"], ["h2"]),
            ("f3", FWD, 2, 0, ["h2", "x0"], ["y"]),
            ("loss", LOSS, 0, 0, ["y"], ["gy"]),
            ("b3", BWD, 3, 0, ["gy", "h2"], ["g2", "g0"]),
            ("b2", BWD, 5, 1, ["g2", "h1"], ["g1"]),
            ("b1", BWD, 4, 0, ["g1", "p1"], ["g0"]),
        ],
        {
            "x0": (4, DATA),
            "h1": (6, DATA),
            "p1": (3, PHANTOM),
            "h2": (6, DATA),
            "y": (4, DATA),
            "gy": (4, GRAD),
            "g2": (6, GRAD),
            "g1": (6, GRAD),
            "g0": (4, GRAD),
        },
        "x0",
        "y",
        "loss",
    )


def transformer_block() -> CDGraph:
    """
    An attention and a feed-forward layer with their backwards.

    The attention scores ``s`` are the largest data and only the attention
    backward reads them.
    """
    return cdgraph(
        [
            ("attn", FWD, 6, 2, ["x"], ["h", "s"]),
            ("mlp", FWD, 8, 4, ["h", "x"], ["y"]),
            ("loss", LOSS, 0, 0, ["y"], ["gy"]),
            ("mlp_bwd", BWD, 9, 4, ["gy", "h"], ["gh", "gx"]),
            ("attn_bwd", BWD, 7, 2, ["gh", "s", "x"], ["gx"]),
        ],
        {
            "x": (4, DATA),
            "h": (4, DATA),
            "s": (8, DATA),
            "y": (4, DATA),
            "gy": (4, GRAD),
            "gh": (4, GRAD),
            "gx": (4, GRAD),
        },
        "x",
        "y",
        "loss",
    )


# ==============================================================================
# Tiny chain
# ==============================================================================
def tiny_chain() -> Chain:
    """
    Two blocks with activations of 4, 4 and 2 bytes.

    With the keep-all menu the best makespan is 39us from 24 bytes up,
    49us from 20 to 23 bytes (block 0 runs its forward twice) and nothing
    fits below 20 bytes.
    """
    block0 = cdgraph(
        [
            ("f0a", FWD, 4, 0, ["x0"], ["h0"]),
            ("f0b", FWD, 6, 0, ["h0"], ["y0"]),
            ("loss0", LOSS, 0, 0, ["y0"], ["gy0"]),
            ("b0b", BWD, 7, 0, ["gy0", "h0"], ["gh0"]),
            ("b0a", BWD, 5, 0, ["gh0", "x0"], ["gx0"]),
        ],
        {
            "x0": (4, DATA),
            "h0": (6, DATA),
            "y0": (4, DATA),
            "gy0": (4, GRAD),
            "gh0": (6, GRAD),
            "gx0": (4, GRAD),
        },
        "x0",
        "y0",
        "loss0",
    )
    block1 = cdgraph(
        [
            ("f1a", FWD, 3, 0, ["x1"], ["h1"]),
            ("f1b", FWD, 5, 0, ["h1"], ["y1"]),
            ("loss1", LOSS, 0, 0, ["y1"], ["gy1"]),
            ("b1b", BWD, 4, 0, ["gy1", "h1"], ["gh1"]),
            ("b1a", BWD, 5, 0, ["gh1", "x1"], ["gx1"]),
        ],
        {
            "x1": (4, DATA),
            "h1": (4, DATA),
            "y1": (2, DATA),
            "gy1": (2, GRAD),
            "gh1": (4, GRAD),
            "gx1": (4, GRAD),
        },
        "x1",
        "y1",
        "loss1",
    )
    return Chain((block0, block1))


def repeated_chain(copies: int) -> Chain:
    """The first tiny chain block ``copies`` times, all in one class."""
    block = tiny_chain().blocks[0]
    return Chain((block,) * copies, (0,) * copies)


def abab_chain() -> Chain:
    """
    Six blocks alternating the first tiny chain block with a second one.

    Both blocks take and give 4-byte activations, so any order of them
    chains; the chain has two classes of three blocks.
    """
    a = tiny_chain().blocks[0]
    b = cdgraph(
        [
            ("g1", FWD, 5, 0, ["u0"], ["v1"]),
            ("g2", FWD, 3, 1, ["v1", "u0"], ["v2"]),
            ("lossb", LOSS, 0, 0, ["v2"], ["gv2"]),
            ("c2", BWD, 6, 0, ["gv2", "v1"], ["gv1", "gu0"]),
            ("c1", BWD, 4, 0, ["gv1", "u0"], ["gu0"]),
        ],
        {
            "u0": (4, DATA),
            "v1": (5, DATA),
            "v2": (4, DATA),
            "gv2": (4, GRAD),
            "gv1": (5, GRAD),
            "gu0": (4, GRAD),
        },
        "u0",
        "v2",
        "lossb",
    )
    return Chain((a, b) * 3, (0, 1) * 3)


# ==============================================================================
# Forward graphs
# ==============================================================================
def forward_graph(
    nodes: list[tuple[str, str, list[str]]],
    inputs: tuple[str, ...],
    output: str,
) -> ForwardGraph:
    """Forward graph of ``(id, op, preds)`` nodes with their own weights."""
    return ForwardGraph(
        tuple(
            ForwardNode(nid, op, (2, 3), f"w_{nid}", tuple(preds))
            for nid, op, preds in nodes
        ),
        inputs,
        output,
    )


def diamond_graph() -> ForwardGraph:
    """A diamond followed by one node: two blocks cut at ``c``."""
    return forward_graph(
        [
            ("x", "input", []),
            ("a", "linear", ["x"]),
            ("b", "relu", ["x"]),
            ("c", "add", ["a", "b"]),
            ("d", "linear", ["c"]),
        ],
        ("x",),
        "d",
    )


def abab_graph() -> ForwardGraph:
    """A path of five nodes alternating two ops: blocks A, B, A, B."""
    return forward_graph(
        [
            ("n0", "P", []),
            ("n1", "Q", ["n0"]),
            ("n2", "P", ["n1"]),
            ("n3", "Q", ["n2"]),
            ("n4", "P", ["n3"]),
        ],
        ("n0",),
        "n4",
    )


# ==============================================================================
# Random blocks
# ==============================================================================
def random_block(
    rng: random.Random,
    in_size: Optional[int] = None,
    out_size: Optional[int] = None,
    max_size: int = 16,
) -> CDGraph:
    """
    A block of one or two forwards with their backwards.

    The second forward may also read the input, which gives the input
    gradient two contributors. Backwards read their output gradient and
    a random subset of what their forward read and wrote.

    :param rng: Source of randomness.
    :param in_size: Input size, random if None.
    :param out_size: Output size, random if None.
    :param max_size: Largest random data size.
    :return: The block.
    """

    def size() -> int:
        return rng.randint(1, max_size)

    def time() -> int:
        return rng.randint(1, 9)

    def tmp() -> int:
        return rng.choice((0, 0, rng.randint(1, 4)))

    x0 = in_size or size()
    y = out_size or size()
    if rng.random() < 0.3:
        saved = [d for d in ("x0", "d1") if rng.random() < 0.5]
        return cdgraph(
            [
                ("f1", FWD, time(), tmp(), ["x0"], ["d1"]),
                ("loss", LOSS, 0, 0, ["d1"], ["g1"]),
                ("b1", BWD, time(), tmp(), ["g1", *saved], ["g0"]),
            ],
            {
                "x0": (x0, DATA),
                "d1": (y, DATA),
                "g1": (y, GRAD),
                "g0": (x0, GRAD),
            },
            "x0",
            "d1",
            "loss",
        )

    d1 = size()
    skip = rng.random() < 0.4
    f2_in = ["d1", "x0"] if skip else ["d1"]
    b2_saved = [d for d in (*f2_in, "d2") if rng.random() < 0.5]
    b1_saved = [d for d in ("x0", "d1") if rng.random() < 0.5]
    return cdgraph(
        [
            ("f1", FWD, time(), tmp(), ["x0"], ["d1"]),
            ("f2", FWD, time(), tmp(), f2_in, ["d2"]),
            ("loss", LOSS, 0, 0, ["d2"], ["g2"]),
            (
                "b2",
                BWD,
                time(),
                tmp(),
                ["g2", *b2_saved],
                ["g1", "g0"] if skip else ["g1"],
            ),
            ("b1", BWD, time(), tmp(), ["g1", *b1_saved], ["g0"]),
        ],
        {
            "x0": (x0, DATA),
            "d1": (d1, DATA),
            "d2": (y, DATA),
            "g2": (y, GRAD),
            "g1": (d1, GRAD),
            "g0": (x0, GRAD),
        },
        "x0",
        "d2",
        "loss",
    )


def random_rich_block(rng: random.Random, max_size: int = 16) -> CDGraph:
    """
    A block of at most six computations and six data nodes.

    Besides :func:`random_block` shapes this draws forwards with a second
    output only their backward reads, and two parallel forwards whose
    backwards both write the input gradient.

    :param rng: Source of randomness.
    :param max_size: Largest random data size.
    :return: The block.
    """

    def size() -> int:
        return rng.randint(1, max_size)

    def time() -> int:
        return rng.randint(1, 9)

    def tmp() -> int:
        return rng.choice((0, rng.randint(1, 8)))

    def some(*names: str) -> list[str]:
        return [name for name in names if rng.random() < 0.5]

    shape = rng.choice(("side", "side-chain", "parallel", "plain"))
    x0 = size()
    if shape == "side":
        y = size()
        return cdgraph(
            [
                ("f1", FWD, time(), tmp(), ["x0"], ["d1", "p1"]),
                ("loss", LOSS, 0, 0, ["d1"], ["g1"]),
                (
                    "b1",
                    BWD,
                    time(),
                    tmp(),
                    ["g1", "p1", *some("x0", "d1")],
                    ["g0"],
                ),
            ],
            {
                "x0": (x0, DATA),
                "d1": (y, DATA),
                "p1": (size(), PHANTOM),
                "g1": (y, GRAD),
                "g0": (x0, GRAD),
            },
            "x0",
            "d1",
            "loss",
        )
    if shape == "side-chain":
        y = size()
        return cdgraph(
            [
                ("f1", FWD, time(), tmp(), ["x0"], ["d1", "p1"]),
                ("f2", FWD, time(), tmp(), ["d1"], ["y"]),
                ("loss", LOSS, 0, 0, ["y"], ["gy"]),
                (
                    "b1",
                    BWD,
                    time(),
                    tmp(),
                    ["gy", "p1", *some("x0", "d1", "y")],
                    ["g0"],
                ),
            ],
            {
                "x0": (x0, DATA),
                "d1": (size(), DATA),
                "p1": (size(), PHANTOM),
                "y": (y, DATA),
                "gy": (y, GRAD),
                "g0": (x0, GRAD),
            },
            "x0",
            "y",
            "loss",
        )
    if shape == "parallel":
        y = size()
        return cdgraph(
            [
                ("fa", FWD, time(), tmp(), ["x0"], ["a"]),
                ("fb", FWD, time(), tmp(), ["x0"], ["b"]),
                ("fy", FWD, time(), tmp(), ["a", "b"], ["y"]),
                ("loss", LOSS, 0, 0, ["y"], ["gy"]),
                ("bb", BWD, time(), tmp(), ["gy", "b", *some("x0")], ["g0"]),
                ("ba", BWD, time(), tmp(), ["gy", "a", *some("x0")], ["g0"]),
            ],
            {
                "x0": (x0, DATA),
                "a": (size(), DATA),
                "b": (size(), DATA),
                "y": (y, DATA),
                "gy": (y, GRAD),
                "g0": (x0, GRAD),
            },
            "x0",
            "y",
            "loss",
        )
    block = random_block(rng, x0, max_size=max_size)
    return dataclasses.replace(
        block,
        cnodes=tuple(
            c if c.kind == LOSS else dataclasses.replace(c, tmp_mem=tmp())
            for c in block.cnodes
        ),
    )


def solved_options(
    g: CDGraph, n_peak: int = 3, n_save: int = 3
) -> list[BlockOption]:
    """Option 0 plus the deduplicated optima of a small budget grid."""
    options = [forward_only_option(g)]
    for pair in budget_grid(g, n_peak, n_save):
        model = build_model(g, pair)
        result = solve(model, time_limit=60.0)
        if result.assignment is not None:
            options.append(extract_option(g, model, result.assignment))
    return dedup_options(options)


@functools.lru_cache(maxsize=None)
def block_pool(
    seed: int, count: int, act: int
) -> tuple[tuple[CDGraph, tuple[BlockOption, ...]], ...]:
    """Random blocks with ``act``-byte activations and their options."""
    rng = random.Random(seed)
    pool = []
    for _ in range(count):
        g = random_block(rng, act, act, max_size=4)
        pool.append((g, tuple(solved_options(g))))
    return tuple(pool)


def random_chain(
    rng: random.Random,
    pool: tuple[tuple[CDGraph, tuple[BlockOption, ...]], ...],
    length: int,
    max_options: int = 3,
) -> tuple[Chain, OptionMenu]:
    """
    A chain of pool blocks with menus of at most ``max_options`` options.

    :param rng: Source of randomness.
    :param pool: As returned by :func:`block_pool`.
    :param length: Number of blocks.
    :param max_options: Largest menu, option 0 included.
    :return: The chain and its menu.
    """
    blocks = []
    menus = []
    for index in range(length):
        g, options = pool[rng.randrange(len(pool))]
        blocks.append(g)
        match = match_cdgraphs(g, g)
        assert match is not None
        menus.append(
            tuple(
                translate_option(opt, match, index)
                for opt in options[:max_options]
            )
        )
    return Chain(tuple(blocks)), OptionMenu(tuple(menus))
