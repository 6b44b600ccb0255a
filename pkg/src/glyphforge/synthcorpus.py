"""Procedural glyph rendering and corpus construction.

Glyphs are rendered at 64x64 grayscale (white background 1.0, dark ink) by
laying out a structure tree into nested boxes and rasterizing each radical's
strokes inside its box.  A "font" is a parameter bundle applied to one shared
stroke-drawing routine, so arbitrarily many styles derive from one renderer.
Font id 0 is the standard font: zero slant, zero jitter, nominal width.

A corpus directory contains:

    config.txt      key=value snapshot of the build config
    vocab.tsv       vocabulary file (see glyphlang)
    manifest.tsv    one record per line, tab-separated columns:
                    sample_id  font_id  split  available  radical_caption
                    stroke_caption  owners  slots  image
    images/*.pgm    binary PGM (P5), 8-bit, 64x64, for available records

``owners`` maps each stroke to the caption position of its radical and
``slots`` records each stroke's geometry slot, so misspelled variants (whose
stroke lists deviate from the vocabulary decomposition) round-trip exactly.
Splits: train (seen fonts x train compositions), test_seen_font and
test_unseen_font (held-out compositions), style_ref (train compositions in
held-out fonts, used only as style sources), misspelled (mutated captions,
no target image -> unavailable).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .glyphlang import (
    Leaf,
    MUTATION_KINDS,
    Node,
    Stroke,
    StructureTree,
    Vocabulary,
    default_vocabulary,
    derive_strokes,
    leaf_strokes,
    load_vocabulary,
    mutate_caption,
    parse_caption,
    radical_leaves,
    sample_tree,
    save_vocabulary,
    serialize,
)

IMAGE_SIZE = 64
GLYPH_MARGIN = 2.0  # outer border, pixels
RADICAL_MARGIN = 0.10  # fraction of the layout box left blank on each side


class BoxTooSmall(ValueError):
    """A layout sub-box fell below the 4x4-pixel minimum."""


class ConfigInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class FontParams:
    """Documented ranges: stroke_width [1.2, 3.0] px, slant [-0.22, 0.22] rad,
    curvature [0.5, 1.7], jitter [0.0, 0.9] px."""

    font_id: int
    stroke_width: float = 1.8
    slant: float = 0.0
    curvature: float = 1.0
    jitter: float = 0.0
    serif: bool = False


def font_from_id(font_id: int) -> FontParams:
    """Deterministic parameter bundle per font id; id 0 is the standard font."""
    if font_id == 0:
        return FontParams(0)
    rng = np.random.default_rng(0xF00D + font_id)
    return FontParams(
        font_id=font_id,
        stroke_width=float(rng.uniform(1.2, 3.0)),
        slant=float(rng.uniform(-0.22, 0.22)),
        curvature=float(rng.uniform(0.5, 1.7)),
        jitter=float(rng.uniform(0.2, 0.9)),
        serif=bool(rng.random() < 0.4),
    )


# ---------------------------------------------------------------------------
# layout

Box = tuple[float, float, float, float]  # x0, y0, x1, y1


def _split_x(box: Box, cuts: list[float]) -> list[Box]:
    x0, y0, x1, y1 = box
    xs = [x0] + [x0 + c * (x1 - x0) for c in cuts] + [x1]
    return [(xs[i], y0, xs[i + 1], y1) for i in range(len(xs) - 1)]


def _split_y(box: Box, cuts: list[float]) -> list[Box]:
    x0, y0, x1, y1 = box
    ys = [y0] + [y0 + c * (y1 - y0) for c in cuts] + [y1]
    return [(x0, ys[i], x1, ys[i + 1]) for i in range(len(ys) - 1)]


def _sub_box(box: Box, fx0: float, fy0: float, fx1: float, fy1: float) -> Box:
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    return (x0 + fx0 * w, y0 + fy0 * h, x0 + fx1 * w, y0 + fy1 * h)


# child boxes per operator, as fractions of the parent box
_OPERATOR_RULES = {
    "LR": lambda b: _split_x(b, [0.5]),
    "TD": lambda b: _split_y(b, [0.5]),
    "LCR": lambda b: _split_x(b, [1 / 3, 2 / 3]),
    "TCB": lambda b: _split_y(b, [1 / 3, 2 / 3]),
    "WRAP": lambda b: [b, _sub_box(b, 0.28, 0.28, 0.72, 0.72)],
    "WRAP_B": lambda b: [b, _sub_box(b, 0.25, 0.42, 0.75, 0.95)],
    "WRAP_T": lambda b: [b, _sub_box(b, 0.25, 0.05, 0.75, 0.58)],
    "WRAP_R": lambda b: [b, _sub_box(b, 0.42, 0.25, 0.95, 0.75)],
    "WRAP_BR": lambda b: [b, _sub_box(b, 0.38, 0.38, 0.95, 0.95)],
    "OVER": lambda b: [b, _sub_box(b, 0.12, 0.12, 0.88, 0.88)],
}


def layout(tree: StructureTree, box: Box) -> list[tuple[Leaf, Box]]:
    """Assign a box to every radical leaf, pre-order.

    Raises BoxTooSmall when any sub-box shrinks below 4x4 pixels.
    """
    x0, y0, x1, y1 = box
    if x1 - x0 < 4.0 or y1 - y0 < 4.0:
        raise BoxTooSmall(f"{box}")
    if isinstance(tree, Leaf):
        return [(tree, box)]
    children_boxes = _OPERATOR_RULES[tree.op](box)
    out: list[tuple[Leaf, Box]] = []
    for child, child_box in zip(tree.children, children_boxes):
        out.extend(layout(child, child_box))
    return out


# ---------------------------------------------------------------------------
# stroke drawing

_N_CURVE_SAMPLES = 40


def _geometry_rng(radical: str, slot: int) -> np.random.Generator:
    # geometry is a pure function of (radical symbol, slot)
    return np.random.default_rng((zlib.crc32(radical.encode()) << 8) + slot)


def _control_points(cls: str, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Unit-square control polyline for one stroke class, plus a bend scale."""
    u = rng.uniform
    if cls == "heng":
        y = u(0.18, 0.82)
        pts = [(0.08, y), (0.92, y)]
        bend = rng.normal(0, 0.07)
    elif cls == "shu":
        x = u(0.18, 0.82)
        pts = [(x, 0.08), (x, 0.92)]
        bend = rng.normal(0, 0.07)
    elif cls == "pie":
        pts = [(u(0.55, 0.82), u(0.05, 0.16)), (u(0.08, 0.3), u(0.78, 0.95))]
        bend = u(0.08, 0.22)
    elif cls == "na":
        pts = [(u(0.18, 0.45), u(0.05, 0.16)), (u(0.7, 0.94), u(0.78, 0.95))]
        bend = -u(0.08, 0.22)
    elif cls == "dian":
        cx, cy = u(0.22, 0.78), u(0.22, 0.78)
        ln, ang = u(0.1, 0.18), u(0.5, 1.25)
        dx, dy = ln * np.cos(ang), ln * np.sin(ang)
        pts = [(cx - dx / 2, cy - dy / 2), (cx + dx / 2, cy + dy / 2)]
        bend = 0.0
    elif cls == "ti":
        pts = [(u(0.1, 0.3), u(0.72, 0.9)), (u(0.7, 0.92), u(0.22, 0.48))]
        bend = rng.normal(0, 0.05)
    elif cls == "zhe":
        sx, y1 = u(0.08, 0.25), u(0.15, 0.42)
        x2, y2 = u(0.6, 0.88), u(0.68, 0.9)
        pts = [(sx, y1), (x2, y1), (x2, y2)]
        bend = 0.0
    elif cls == "gou":
        x = u(0.3, 0.72)
        pts = [(x, 0.1), (x, 0.78), (x - 0.17, 0.64)]
        bend = 0.0
    else:
        raise ValueError(f"unknown stroke class {cls!r}")
    return np.array(pts, dtype=np.float64), float(bend)


def _sample_polyline(pts: np.ndarray, bend: float) -> np.ndarray:
    """Sample a smooth path: quadratic bezier for 2-point strokes, joined
    segments otherwise."""
    if len(pts) == 2 and bend != 0.0:
        a, b = pts
        mid = (a + b) / 2
        d = b - a
        n = np.array([-d[1], d[0]])
        norm = np.linalg.norm(n)
        ctrl = mid + (n / norm * bend if norm > 0 else 0)
        t = np.linspace(0.0, 1.0, _N_CURVE_SAMPLES)[:, None]
        return (1 - t) ** 2 * a + 2 * (1 - t) * t * ctrl + t**2 * b
    segs = []
    for i in range(len(pts) - 1):
        t = np.linspace(0.0, 1.0, _N_CURVE_SAMPLES // (len(pts) - 1))[:, None]
        segs.append(pts[i] * (1 - t) + pts[i + 1] * t)
    return np.concatenate(segs, axis=0)


def _draw_path(canvas: np.ndarray, path: np.ndarray, width: float) -> None:
    """Multiply anti-aliased stroke coverage into the canvas (ink = dark)."""
    aa = 1.0
    r = width / 2
    pad = int(np.ceil(r + aa)) + 1
    x_lo = max(int(path[:, 0].min()) - pad, 0)
    x_hi = min(int(path[:, 0].max()) + pad + 1, canvas.shape[1])
    y_lo = max(int(path[:, 1].min()) - pad, 0)
    y_hi = min(int(path[:, 1].max()) + pad + 1, canvas.shape[0])
    if x_lo >= x_hi or y_lo >= y_hi:
        return
    ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    px = np.stack([xs, ys], axis=-1).astype(np.float64) + 0.5
    # distance to densely sampled path points approximates curve distance
    d2 = ((px[:, :, None, :] - path[None, None, :, :]) ** 2).sum(-1)
    dist = np.sqrt(d2.min(axis=2))
    coverage = np.clip(0.5 + (r - dist) / aa, 0.0, 1.0)
    canvas[y_lo:y_hi, x_lo:x_hi] *= 1.0 - coverage


def render(tree: StructureTree, font: FontParams, rng_seed: int, vocab: Vocabulary) -> np.ndarray:
    """Rasterize a structure tree in the given font.  Deterministic for a
    fixed (tree, font, rng_seed); the standard font ignores jitter."""
    jit_rng = np.random.default_rng(rng_seed)
    glyph_box: Box = (GLYPH_MARGIN, GLYPH_MARGIN, IMAGE_SIZE - GLYPH_MARGIN, IMAGE_SIZE - GLYPH_MARGIN)
    placements = layout(tree, glyph_box)
    canvas = np.ones((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    centre = IMAGE_SIZE / 2

    for leaf, (x0, y0, x1, y1) in placements:
        w, h = x1 - x0, y1 - y0
        ix0, iy0 = x0 + RADICAL_MARGIN * w, y0 + RADICAL_MARGIN * h
        iw, ih = w * (1 - 2 * RADICAL_MARGIN), h * (1 - 2 * RADICAL_MARGIN)
        for stroke in leaf_strokes(leaf, vocab):
            geo = _geometry_rng(leaf.radical, stroke.slot)
            pts, bend = _control_points(stroke.cls, geo)
            pts = pts + jit_rng.normal(0.0, 1.0, size=pts.shape) * (font.jitter / max(iw, 1.0))
            path = _sample_polyline(pts, bend * font.curvature)
            path = np.stack([ix0 + path[:, 0] * iw, iy0 + path[:, 1] * ih], axis=-1)
            path[:, 0] += font.slant * (centre - path[:, 1])  # whole-glyph shear
            _draw_path(canvas, path, font.stroke_width)
            if font.serif and stroke.cls in ("heng", "shu"):
                for end in (path[0], path[-1]):
                    d = path[-1] - path[0]
                    n = np.array([-d[1], d[0]])
                    n = n / (np.linalg.norm(n) + 1e-9) * (font.stroke_width * 0.9 + 0.6)
                    _draw_path(canvas, np.stack([end - n, end + n]), font.stroke_width * 0.6)
    return canvas


# ---------------------------------------------------------------------------
# PGM I/O


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    if image.ndim != 2:
        raise ValueError("expected a 2-D grayscale image")
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    width, height, maxval = (int(f) for f in fields)
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# corpus records and manifest


@dataclass
class CorpusConfig:
    n_train_compositions: int = 300
    n_unseen_compositions: int = 60
    n_seen_fonts: int = 8
    n_unseen_fonts: int = 2
    n_misspelled: int = 50
    max_leaves: int = 4
    vocab_radicals: int = 32
    vocab_seed: int = 7
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_train_compositions", "n_seen_fonts"):
            if getattr(self, name) < 1:
                raise ConfigInfeasible(f"{name} must be >= 1")
        for name in ("n_unseen_compositions", "n_unseen_fonts", "n_misspelled"):
            if getattr(self, name) < 0:
                raise ConfigInfeasible(f"{name} must be >= 0")
        if self.vocab_radicals < 2 or self.max_leaves < 1:
            raise ConfigInfeasible("need >= 2 radicals and >= 1 leaf")


def save_config(config: CorpusConfig, path: str | Path) -> None:
    lines = [f"{k}={getattr(config, k)}" for k in config.__dataclass_fields__]
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path: str | Path) -> CorpusConfig:
    kwargs = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, value = line.split("=", 1)
        kwargs[key] = int(value)
    return CorpusConfig(**kwargs)


@dataclass
class Record:
    sample_id: str
    font_id: int
    split: str
    available: bool
    radical_caption: tuple[str, ...]
    stroke_caption: tuple[str, ...]
    owners: tuple[int, ...]  # caption position of each stroke's radical
    slots: tuple[int, ...]  # geometry slot of each stroke
    image: str | None  # path relative to the corpus root

    def tree(self, vocab: Vocabulary) -> StructureTree:
        """Rebuild the structure tree, including variant stroke lists."""
        base = parse_caption(list(self.radical_caption), vocab)
        caption = list(self.radical_caption)
        leaf_cols = [i for i, t in enumerate(caption) if vocab.is_radical(t)]
        per_leaf: dict[int, list[Stroke]] = {c: [] for c in leaf_cols}
        for cls, owner, slot in zip(self.stroke_caption, self.owners, self.slots):
            per_leaf[owner].append(Stroke(slot, cls))

        idx = iter(range(len(leaf_cols)))

        def materialize(node: StructureTree) -> StructureTree:
            if isinstance(node, Leaf):
                col = leaf_cols[next(idx)]
                return Leaf(node.radical, tuple(per_leaf[col]))
            return Node(node.op, tuple(materialize(c) for c in node.children))

        return materialize(base)


SPLITS = ("train", "test_seen_font", "test_unseen_font", "style_ref", "misspelled")


class Manifest:
    def __init__(self, records: list[Record], root: Path | None = None):
        self.records = sorted(records, key=lambda r: r.sample_id)
        self.root = root

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def by_id(self, sample_id: str) -> Record:
        for r in self.records:
            if r.sample_id == sample_id:
                return r
        raise KeyError(sample_id)

    def style_pool(self, font_id: int) -> list[Record]:
        """Records usable as style references for a font: training
        compositions rendered in that font."""
        return [
            r
            for r in self.records
            if r.font_id == font_id and r.available and r.split in ("train", "style_ref")
        ]

    def load_image(self, record: Record) -> np.ndarray:
        if record.image is None:
            raise ValueError(f"{record.sample_id} has no target image")
        if self.root is None:
            raise ValueError("manifest has no root directory")
        return read_pgm(self.root / record.image)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    lines = []
    for r in manifest.records:
        lines.append(
            "\t".join(
                [
                    r.sample_id,
                    str(r.font_id),
                    r.split,
                    "1" if r.available else "0",
                    " ".join(r.radical_caption),
                    " ".join(r.stroke_caption),
                    ",".join(str(o) for o in r.owners),
                    ",".join(str(s) for s in r.slots),
                    r.image if r.image is not None else "-",
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path, root: Path | None = None) -> Manifest:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        sid, fid, split, avail, rad, strokes, owners, slots, image = line.split("\t")
        records.append(
            Record(
                sample_id=sid,
                font_id=int(fid),
                split=split,
                available=avail == "1",
                radical_caption=tuple(rad.split()),
                stroke_caption=tuple(strokes.split()) if strokes else (),
                owners=tuple(int(x) for x in owners.split(",")) if owners else (),
                slots=tuple(int(x) for x in slots.split(",")) if slots else (),
                image=None if image == "-" else image,
            )
        )
    return Manifest(records, root=root)


class Corpus:
    """A corpus directory: vocabulary + manifest + images."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.config = load_config(self.root / "config.txt")
        self.vocab = load_vocabulary(self.root / "vocab.tsv")
        self.manifest = load_manifest(self.root / "manifest.tsv", root=self.root)


# ---------------------------------------------------------------------------
# corpus build


def _count_trees(vocab: Vocabulary, max_leaves: int) -> int:
    n_rad = len(vocab.radicals)
    arities = list(vocab.structures.values())
    memo = {1: n_rad}

    def count(n: int) -> int:
        if n in memo:
            return memo[n]
        total = 0
        for a in arities:
            if a > n:
                continue
            # compositions of n into a positive parts
            def comps(remaining: int, parts: int) -> int:
                if parts == 1:
                    return count(remaining)
                return sum(
                    count(k) * comps(remaining - k, parts - 1)
                    for k in range(1, remaining - parts + 2)
                )

            total += comps(n, a)
        memo[n] = total
        return total

    return sum(count(n) for n in range(1, max_leaves + 1))


def _record_tree_fields(tree: StructureTree, vocab: Vocabulary):
    caption = tuple(serialize(tree))
    stroke_caption, mask = derive_strokes(tree, vocab)
    owners = tuple(int(np.argmax(row)) for row in mask)
    slots = []
    for leaf in radical_leaves(tree):
        slots.extend(s.slot for s in leaf_strokes(leaf, vocab))
    return caption, tuple(stroke_caption), owners, tuple(slots)


def _render_seed(corpus_seed: int, index: int) -> int:
    return (corpus_seed * 1_000_003 + index) % (1 << 63)


def build_corpus(config: CorpusConfig, out_dir: str | Path) -> Corpus:
    """Materialize a corpus directory.  Byte-identical for a fixed config."""
    config.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    vocab = default_vocabulary(config.vocab_radicals, config.vocab_seed)
    rng = np.random.default_rng(config.seed)

    capacity = _count_trees(vocab, config.max_leaves)
    needed = config.n_train_compositions + config.n_unseen_compositions
    if needed > capacity // 2:
        # rejection sampling of distinct captions needs headroom
        raise ConfigInfeasible(
            f"{needed} distinct compositions requested, grammar capacity {capacity}"
        )

    # sample distinct compositions, rejecting layout failures; keep going
    # until the pool can also cover the whole radical alphabet
    seen: set[tuple[str, ...]] = set()
    pool: list[StructureTree] = []
    pool_radicals: set[str] = set()
    attempts = 0
    max_attempts = max(4000, needed * 100)
    while attempts < max_attempts:
        if len(pool) >= needed * 2 and pool_radicals == set(vocab.radicals):
            break
        attempts += 1
        tree = sample_tree(vocab, rng, max_leaves=config.max_leaves)
        caption = tuple(serialize(tree))
        if caption in seen:
            continue
        try:
            layout(tree, (GLYPH_MARGIN, GLYPH_MARGIN, IMAGE_SIZE - GLYPH_MARGIN, IMAGE_SIZE - GLYPH_MARGIN))
        except BoxTooSmall:
            continue
        seen.add(caption)
        pool.append(tree)
        pool_radicals |= {l.radical for l in radical_leaves(tree)}
    if len(pool) < needed:
        raise ConfigInfeasible(f"could only sample {len(pool)} distinct compositions")

    # training set first: max-coverage greedy so every radical is trained on
    # (zero-shot recombination needs the full alphabet seen)
    radicals_of = [{l.radical for l in radical_leaves(t)} for t in pool]
    uncovered = set(vocab.radicals)
    picked = [False] * len(pool)
    train: list[StructureTree] = []
    while uncovered:
        best = max(
            (i for i in range(len(pool)) if not picked[i]),
            key=lambda i: len(radicals_of[i] & uncovered),
            default=None,
        )
        if best is None or not radicals_of[best] & uncovered:
            raise ConfigInfeasible(f"sampled pool cannot cover radicals: {sorted(uncovered)}")
        if len(train) == config.n_train_compositions:
            raise ConfigInfeasible(
                f"{config.n_train_compositions} training compositions cannot cover "
                f"{len(vocab.radicals)} radicals"
            )
        picked[best] = True
        train.append(pool[best])
        uncovered -= radicals_of[best]
    for i, tree in enumerate(pool):
        if len(train) == config.n_train_compositions:
            break
        if not picked[i]:
            picked[i] = True
            train.append(tree)
    unseen = [t for i, t in enumerate(pool) if not picked[i]][: config.n_unseen_compositions]
    if len(unseen) < config.n_unseen_compositions:
        raise ConfigInfeasible("not enough distinct compositions for the unseen split")

    registered = {tuple(serialize(t)) for t in train + unseen}
    registered_pairs = {
        (tuple(serialize(t)), tuple(derive_strokes(t, vocab)[0])) for t in train + unseen
    }

    # misspelled variants: one edit away from a training composition, never
    # colliding with any registered caption
    misspelled: list[StructureTree] = []
    mis_seen: set[tuple] = set()
    attempts = 0
    while len(misspelled) < config.n_misspelled and attempts < config.n_misspelled * 500:
        attempts += 1
        src = train[int(rng.integers(len(train)))]
        kind = MUTATION_KINDS[int(rng.integers(len(MUTATION_KINDS)))]
        try:
            mutant = mutate_caption(src, kind, int(rng.integers(1 << 31)), vocab)
        except Exception:
            continue
        key = (tuple(serialize(mutant)), tuple(derive_strokes(mutant, vocab)[0]))
        if key in registered_pairs or key in mis_seen:
            continue
        if kind == "radical_swap" and tuple(serialize(mutant)) in registered:
            continue
        try:
            layout(mutant, (GLYPH_MARGIN, GLYPH_MARGIN, IMAGE_SIZE - GLYPH_MARGIN, IMAGE_SIZE - GLYPH_MARGIN))
        except BoxTooSmall:
            continue
        mis_seen.add(key)
        misspelled.append(mutant)
    if len(misspelled) < config.n_misspelled:
        raise ConfigInfeasible("could not build the requested misspelled split")

    seen_fonts = list(range(config.n_seen_fonts))
    unseen_fonts = list(range(config.n_seen_fonts, config.n_seen_fonts + config.n_unseen_fonts))

    records: list[Record] = []

    def add(tree: StructureTree, font_id: int, split: str, available: bool) -> None:
        idx = len(records)
        sid = f"g{idx:06d}"
        caption, strokes, owners, slots = _record_tree_fields(tree, vocab)
        image = None
        if available:
            img = render(tree, font_from_id(font_id), _render_seed(config.seed, idx), vocab)
            image = f"images/{sid}.pgm"
            write_pgm(out / image, img)
        records.append(
            Record(sid, font_id, split, available, caption, strokes, owners, slots, image)
        )

    for tree in train:
        for fid in seen_fonts:
            add(tree, fid, "train", True)
    for tree in unseen:
        for fid in seen_fonts:
            add(tree, fid, "test_seen_font", True)
        for fid in unseen_fonts:
            add(tree, fid, "test_unseen_font", True)
    for tree in train:
        for fid in unseen_fonts:
            add(tree, fid, "style_ref", True)
    for tree in misspelled:
        fid = seen_fonts[len(records) % len(seen_fonts)]
        add(tree, fid, "misspelled", False)

    save_config(config, out / "config.txt")
    save_vocabulary(vocab, out / "vocab.tsv")
    save_manifest(Manifest(records), out / "manifest.tsv")
    return Corpus(out)
