"""Caption vocabulary and grammar for composed glyphs.

A glyph is described by a radical-level caption: a pre-order serialization of
a structure tree whose internal nodes are spatial operators with fixed arity
and whose leaves are radicals.  Each radical decomposes into an ordered list
of strokes drawn from eight stroke classes; concatenating the per-radical
stroke lists in pre-order leaf order gives the stroke-level caption.  Stroke
captions alone are ambiguous (many glyphs share one), so the radical caption
is always the identity key.

Vocabulary file format: one record per line, tab-separated:

    name<TAB>kind<TAB>payload

where kind is ``structure`` (payload = arity), ``radical`` (payload =
space-separated stroke class names), ``stroke`` or ``special`` (payload =
``-``).  Symbol ids are assigned in file order.  Captions serialize as
space-separated symbol names.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

STROKE_CLASSES = ("heng", "shu", "pie", "na", "dian", "ti", "zhe", "gou")

# 8 binary + 2 ternary spatial operators.  Geometry lives in synthcorpus;
# here only the arity matters.
DEFAULT_STRUCTURES = {
    "LR": 2,       # left / right
    "TD": 2,       # top / bottom
    "LCR": 3,      # three columns
    "TCB": 3,      # three rows
    "WRAP": 2,     # full surround, second child nested centre
    "WRAP_B": 2,   # open bottom, second child at bottom centre
    "WRAP_T": 2,   # open top
    "WRAP_R": 2,   # open right
    "WRAP_BR": 2,  # open bottom-right
    "OVER": 2,     # overlaid
}

START, END, PAD = "<s>", "</s>", "<pad>"


class CaptionError(ValueError):
    """Base class for caption grammar violations."""


class UnknownSymbol(CaptionError):
    pass


class ArityError(CaptionError):
    """An operator ran out of tokens before all children were parsed."""


class TrailingTokens(CaptionError):
    """Tokens remain after a complete tree was parsed."""


class MissingDecomposition(CaptionError):
    """A radical has no registered stroke decomposition."""


class NoValidMutation(CaptionError):
    pass


@dataclass(frozen=True)
class Stroke:
    """One stroke of a radical: geometry slot index plus stroke class."""

    slot: int
    cls: str


@dataclass(frozen=True)
class Leaf:
    """Radical leaf.  ``strokes`` overrides the vocabulary decomposition;
    ``None`` means canonical (mutants carry explicit stroke lists)."""

    radical: str
    strokes: tuple[Stroke, ...] | None = None


@dataclass(frozen=True)
class Node:
    op: str
    children: tuple["Node | Leaf", ...]


StructureTree = Node | Leaf


class Vocabulary:
    """Symbol table: structure operators, radicals, strokes, specials.

    Ids are contiguous, ordered structures -> radicals -> strokes ->
    specials.  Exactly 10 structures and 8 stroke classes are required.
    """

    def __init__(
        self,
        structures: dict[str, int],
        decompositions: dict[str, tuple[str, ...]],
        strokes: Sequence[str] = STROKE_CLASSES,
    ):
        if len(structures) != 10:
            raise ValueError(f"expected 10 structure operators, got {len(structures)}")
        if len(strokes) != 8:
            raise ValueError(f"expected 8 stroke classes, got {len(strokes)}")
        for name, arity in structures.items():
            if arity not in (2, 3):
                raise ValueError(f"operator {name}: unsupported arity {arity}")
        self.structures = dict(structures)
        self.radicals = list(decompositions)
        self.strokes = list(strokes)
        self.specials = [START, END, PAD]
        self.decompositions = {r: tuple(s) for r, s in decompositions.items()}

        self._names: list[str] = (
            list(self.structures) + self.radicals + self.strokes + self.specials
        )
        if len(set(self._names)) != len(self._names):
            raise ValueError("symbol names must be disjoint across kinds")
        self._ids = {n: i for i, n in enumerate(self._names)}
        for rad, classes in self.decompositions.items():
            for cls in classes:
                if cls not in self.strokes:
                    raise ValueError(f"radical {rad}: unknown stroke class {cls}")

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def id_of(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise UnknownSymbol(name) from None

    def name_of(self, idx: int) -> str:
        return self._names[idx]

    def encode(self, names: Iterable[str]) -> list[int]:
        return [self.id_of(n) for n in names]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.name_of(i) for i in ids]

    def kind_of(self, name: str) -> str:
        if name in self.structures:
            return "structure"
        if name in self.decompositions:
            return "radical"
        if name in self.strokes:
            return "stroke"
        if name in (START, END, PAD):
            return "special"
        raise UnknownSymbol(name)

    def is_radical(self, name: str) -> bool:
        return name in self.decompositions

    def arity(self, op: str) -> int:
        try:
            return self.structures[op]
        except KeyError:
            raise UnknownSymbol(op) from None

    def canonical_strokes(self, radical: str) -> tuple[Stroke, ...]:
        if radical not in self.decompositions:
            raise MissingDecomposition(radical)
        return tuple(
            Stroke(slot, cls) for slot, cls in enumerate(self.decompositions[radical])
        )


def default_vocabulary(
    n_radicals: int = 32, seed: int = 7, min_strokes: int = 2, max_strokes: int = 4
) -> Vocabulary:
    """Synthetic radical alphabet with seeded stroke decompositions."""
    rng = np.random.default_rng(seed)
    decomps: dict[str, tuple[str, ...]] = {}
    for k in range(n_radicals):
        n = int(rng.integers(min_strokes, max_strokes + 1))
        classes = tuple(STROKE_CLASSES[int(i)] for i in rng.integers(0, 8, size=n))
        decomps[f"r{k:02d}"] = classes
    return Vocabulary(DEFAULT_STRUCTURES, decomps)


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    lines = ["# glyphforge vocabulary: name<TAB>kind<TAB>payload"]
    for name, arity in vocab.structures.items():
        lines.append(f"{name}\tstructure\t{arity}")
    for rad in vocab.radicals:
        lines.append(f"{rad}\tradical\t{' '.join(vocab.decompositions[rad])}")
    for s in vocab.strokes:
        lines.append(f"{s}\tstroke\t-")
    for s in vocab.specials:
        lines.append(f"{s}\tspecial\t-")
    Path(path).write_text("\n".join(lines) + "\n")


def load_vocabulary(path: str | Path) -> Vocabulary:
    structures: dict[str, int] = {}
    decomps: dict[str, tuple[str, ...]] = {}
    strokes: list[str] = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        name, kind, payload = line.split("\t")
        if kind == "structure":
            structures[name] = int(payload)
        elif kind == "radical":
            decomps[name] = tuple(payload.split())
        elif kind == "stroke":
            strokes.append(name)
        elif kind == "special":
            pass  # fixed names, validated below
        else:
            raise ValueError(f"unknown symbol kind {kind!r}")
    return Vocabulary(structures, decomps, strokes)


# ---------------------------------------------------------------------------
# parsing / serialization


def parse_caption(tokens: Sequence[str], vocab: Vocabulary) -> StructureTree:
    """Parse a pre-order radical caption into a structure tree.

    Raises UnknownSymbol, ArityError (operator short of children) or
    TrailingTokens (input continues past a complete tree).
    """
    if not tokens:
        raise ArityError("empty caption")
    pos = 0

    def parse_node() -> StructureTree:
        nonlocal pos
        if pos >= len(tokens):
            raise ArityError("caption ended while children were expected")
        tok = tokens[pos]
        pos += 1
        if tok in vocab.structures:
            children = tuple(parse_node() for _ in range(vocab.arity(tok)))
            return Node(tok, children)
        if vocab.is_radical(tok):
            return Leaf(tok)
        if tok in vocab.strokes or tok in vocab.specials:
            raise CaptionError(f"{tok!r} is not allowed in a radical caption")
        raise UnknownSymbol(tok)

    tree = parse_node()
    if pos != len(tokens):
        raise TrailingTokens(f"{len(tokens) - pos} token(s) left after complete tree")
    return tree


def serialize(tree: StructureTree) -> list[str]:
    """Pre-order token sequence; inverse of parse_caption."""
    if isinstance(tree, Leaf):
        return [tree.radical]
    out = [tree.op]
    for child in tree.children:
        out.extend(serialize(child))
    return out


def radical_leaves(tree: StructureTree) -> list[Leaf]:
    if isinstance(tree, Leaf):
        return [tree]
    out: list[Leaf] = []
    for child in tree.children:
        out.extend(radical_leaves(child))
    return out


def leaf_strokes(leaf: Leaf, vocab: Vocabulary) -> tuple[Stroke, ...]:
    return leaf.strokes if leaf.strokes is not None else vocab.canonical_strokes(leaf.radical)


def derive_strokes(
    tree: StructureTree, vocab: Vocabulary
) -> tuple[list[str], np.ndarray]:
    """Stroke caption plus the stroke-to-radical correspondence mask.

    The mask has shape (n_strokes, n_caption_tokens); entry (s, r) is True
    iff stroke s belongs to the radical at caption position r.  Structure
    operator columns are all False; every row has exactly one True.
    """
    caption = serialize(tree)
    stroke_caption: list[str] = []
    owner_cols: list[int] = []

    def walk(node: StructureTree, pos: int) -> int:
        if isinstance(node, Leaf):
            for stroke in leaf_strokes(node, vocab):
                stroke_caption.append(stroke.cls)
                owner_cols.append(pos)
            return pos + 1
        pos += 1
        for child in node.children:
            pos = walk(child, pos)
        return pos

    walk(tree, 0)
    mask = np.zeros((len(stroke_caption), len(caption)), dtype=bool)
    for row, col in enumerate(owner_cols):
        mask[row, col] = True
    return stroke_caption, mask


# ---------------------------------------------------------------------------
# mutation (misspelled-variant construction)

MUTATION_KINDS = ("stroke_add", "stroke_drop", "radical_swap")


def mutate_caption(
    tree: StructureTree, kind: str, rng_seed: int, vocab: Vocabulary
) -> StructureTree:
    """Apply exactly one edit to a tree, yielding a misspelled variant.

    stroke_add appends a stroke to one radical, stroke_drop removes one
    (only from radicals with >= 2 strokes), radical_swap replaces one leaf
    with a different radical.  Deterministic given rng_seed.
    """
    if kind not in MUTATION_KINDS:
        raise ValueError(f"unknown mutation kind {kind!r}")
    rng = np.random.default_rng(rng_seed)
    leaves = radical_leaves(tree)

    if kind == "stroke_drop":
        eligible = [
            i for i, lf in enumerate(leaves) if len(leaf_strokes(lf, vocab)) >= 2
        ]
        if not eligible:
            raise NoValidMutation("no radical with >= 2 strokes")
        target = int(rng.choice(eligible))
        strokes = list(leaf_strokes(leaves[target], vocab))
        del strokes[int(rng.integers(len(strokes)))]
        new_leaf = Leaf(leaves[target].radical, tuple(strokes))
    elif kind == "stroke_add":
        target = int(rng.integers(len(leaves)))
        strokes = list(leaf_strokes(leaves[target], vocab))
        new_slot = max(s.slot for s in strokes) + 1 if strokes else 0
        cls = STROKE_CLASSES[int(rng.integers(8))]
        strokes.append(Stroke(new_slot, cls))
        new_leaf = Leaf(leaves[target].radical, tuple(strokes))
    else:  # radical_swap
        if len(vocab.radicals) < 2:
            raise NoValidMutation("need >= 2 radicals to swap")
        target = int(rng.integers(len(leaves)))
        others = [r for r in vocab.radicals if r != leaves[target].radical]
        new_leaf = Leaf(str(rng.choice(others)))  # canonical strokes of new radical

    return _replace_leaf(tree, target, new_leaf)


def _replace_leaf(tree: StructureTree, index: int, new_leaf: Leaf) -> StructureTree:
    counter = 0

    def walk(node: StructureTree) -> StructureTree:
        nonlocal counter
        if isinstance(node, Leaf):
            leaf = new_leaf if counter == index else node
            counter += 1
            return leaf
        return Node(node.op, tuple(walk(c) for c in node.children))

    return walk(tree)


# ---------------------------------------------------------------------------
# random tree sampling (shared by corpus builder and tests)


def sample_tree(
    vocab: Vocabulary, rng: np.random.Generator, min_leaves: int = 1, max_leaves: int = 4
) -> StructureTree:
    """Uniform-ish random valid tree with a bounded leaf count."""
    n_leaves = int(rng.integers(min_leaves, max_leaves + 1))
    binary = [op for op, a in vocab.structures.items() if a == 2]
    ternary = [op for op, a in vocab.structures.items() if a == 3]

    def build(n: int) -> StructureTree:
        if n == 1:
            return Leaf(str(rng.choice(vocab.radicals)))
        if n >= 3 and ternary and rng.random() < 0.3:
            op = str(rng.choice(ternary))
            a, b = sorted(rng.choice(np.arange(1, n), size=2, replace=False))
            parts = [int(a), int(b - a), int(n - b)]
            return Node(op, tuple(build(p) for p in parts))
        op = str(rng.choice(binary))
        left = int(rng.integers(1, n))
        return Node(op, (build(left), build(n - left)))

    return build(n_leaves)


def iter_trees(vocab: Vocabulary, max_leaves: int) -> Iterator[StructureTree]:
    """Exhaustively enumerate all valid trees with <= max_leaves leaves."""
    binary = sorted(op for op, a in vocab.structures.items() if a == 2)
    ternary = sorted(op for op, a in vocab.structures.items() if a == 3)

    def gen(n: int) -> Iterator[StructureTree]:
        if n == 1:
            for r in vocab.radicals:
                yield Leaf(r)
            return
        for op in binary:
            for left in range(1, n):
                for lt in gen(left):
                    for rt in gen(n - left):
                        yield Node(op, (lt, rt))
        if n >= 3:
            for op in ternary:
                for a in range(1, n - 1):
                    for b in range(1, n - a):
                        for t1 in gen(a):
                            for t2 in gen(b):
                                for t3 in gen(n - a - b):
                                    yield Node(op, (t1, t2, t3))

    for n in range(1, max_leaves + 1):
        yield from gen(n)
