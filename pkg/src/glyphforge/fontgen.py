"""Font generator: transfer content features into a reference style.

A shared densely connected encoder maps each of the T style images to a 4x4
feature grid; the grids are flattened and concatenated into one style token
sequence with per-image block indices.  Transitive attention chains content
features -> content caption -> style captions -> style features, restricted
so each style caption token only reaches the 16 feature cells of its own
image, and the resulting 4x4 representation is rendered to 64x64 by a
deconvolution stack mirroring the skeleton renderer (four expansions, since
the input grid is 4x4).

Style captions are embedded with per-image position restarts and the same
embedding table as the skeleton builder, so caption semantics stay aligned
between the two models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .attnkern import DimensionMismatch, TransitiveAttention, TransitiveMaps
from .skeleton import CaptionEmbedding, DeconvRenderer, norm2d
from .synthcorpus import Manifest, Record

FEATURE_CELLS = 16  # 4x4 grid per style image


class CoverageImpossible(ValueError):
    """The style pool cannot provide every radical the target needs."""


@dataclass
class StyleBundle:
    """T reference records of one font plus their images and captions."""

    font_id: int
    records: list[Record]
    images: list[np.ndarray]  # 64x64 float [0,1]

    @property
    def captions(self) -> list[tuple[str, ...]]:
        return [r.radical_caption for r in self.records]

    def block_offsets(self) -> list[int]:
        """Start index of each image's caption tokens in the concatenated
        style caption sequence."""
        offsets, pos = [], 0
        for r in self.records:
            offsets.append(pos)
            pos += len(r.radical_caption)
        return offsets


def select_styles(
    target_caption: tuple[str, ...],
    font_id: int,
    manifest: Manifest,
    rng_seed: int,
    vocab,
    t_styles: int = 5,
    exclude_sample: str | None = None,
) -> StyleBundle:
    """Greedy set-cover of the target's radicals over the font's style pool,
    padded to t_styles with seeded uniform picks.  Ties break on the lowest
    sample_id; ``exclude_sample`` keeps a training target out of its own
    reference bundle.
    """
    required = {t for t in target_caption if vocab.is_radical(t)}
    pool = [
        r for r in manifest.style_pool(font_id) if r.sample_id != exclude_sample
    ]
    pool.sort(key=lambda r: r.sample_id)
    radicals_of = {
        r.sample_id: {t for t in r.radical_caption if vocab.is_radical(t)} for r in pool
    }
    coverable = set().union(*radicals_of.values()) if pool else set()
    if required - coverable:
        raise CoverageImpossible(
            f"font {font_id} cannot provide radicals {sorted(required - coverable)}"
        )

    chosen: list[Record] = []
    uncovered = set(required)
    while uncovered:
        if len(chosen) == t_styles:
            raise CoverageImpossible(
                f"radicals {sorted(uncovered)} not coverable within {t_styles} references"
            )
        # max() keeps the first maximum; the pool is sorted by sample_id, so
        # ties break on the lowest id
        best = max(
            (r for r in pool if r not in chosen),
            key=lambda r: len(radicals_of[r.sample_id] & uncovered),
        )
        if not radicals_of[best.sample_id] & uncovered:
            raise CoverageImpossible(f"greedy cover stalled on {sorted(uncovered)}")
        chosen.append(best)
        uncovered -= radicals_of[best.sample_id]

    rng = np.random.default_rng(rng_seed)
    remaining = [r for r in pool if r not in chosen]
    while len(chosen) < t_styles:
        if remaining:
            pick = remaining.pop(int(rng.integers(len(remaining))))
        else:
            pick = pool[int(rng.integers(len(pool)))]  # pool smaller than t_styles
        chosen.append(pick)
    images = [manifest.load_image(r) for r in chosen]
    return StyleBundle(font_id=font_id, records=chosen, images=images)


# ---------------------------------------------------------------------------
# dense encoder


class DenseBlock(nn.Module):
    def __init__(self, in_channels: int, pairs: int, growth: int, norm: str = "group"):
        super().__init__()
        self.pairs = nn.ModuleList()
        ch = in_channels
        for _ in range(pairs):
            self.pairs.append(
                nn.Sequential(
                    nn.Conv2d(ch, 4 * growth, 1),
                    norm2d(4 * growth, norm),
                    nn.ReLU(),
                    nn.Conv2d(4 * growth, growth, 3, padding=1),
                    norm2d(growth, norm),
                    nn.ReLU(),
                )
            )
            ch += growth
        self.out_channels = ch

    def forward(self, x: Tensor) -> Tensor:
        for pair in self.pairs:
            x = torch.cat([x, pair(x)], dim=1)
        return x


class DenseEncoder(nn.Module):
    """64x64x1 -> 4x4xD: strided 7x7 stem, three dense blocks each followed
    by a 1x1-conv + 2x2 average-pool transition, 1x1 head to D channels."""

    def __init__(self, d_model: int, pairs: int = 2, growth: int = 24, stem: int = 48, norm: str = "group"):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(1, stem, 7, stride=2, padding=3),
            norm2d(stem, norm),
            nn.ReLU(),
        )
        blocks = []
        ch = stem
        for _ in range(3):
            block = DenseBlock(ch, pairs, growth, norm)
            ch = block.out_channels
            trans_out = max(ch // 2, 16)
            blocks += [
                block,
                nn.Sequential(
                    nn.Conv2d(ch, trans_out, 1),
                    norm2d(trans_out, norm),
                    nn.ReLU(),
                    nn.AvgPool2d(2),
                ),
            ]
            ch = trans_out
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(ch, d_model, 1)

    def forward(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[-2:] != (64, 64):
            raise DimensionMismatch(f"expected (B,1,64,64) images, got {tuple(images.shape)}")
        return self.head(self.blocks(self.stem(images)))


# ---------------------------------------------------------------------------
# generator


def style_alignment_mask(caption_lengths: list[int], device=None) -> Tensor:
    """Block-diagonal mask: caption tokens of image i may only attend to the
    16 feature cells of image i."""
    total = sum(caption_lengths)
    mask = torch.zeros(total, FEATURE_CELLS * len(caption_lengths), dtype=torch.bool, device=device)
    row = 0
    for i, length in enumerate(caption_lengths):
        mask[row : row + length, i * FEATURE_CELLS : (i + 1) * FEATURE_CELLS] = True
        row += length
    return mask


class FontGenerator(nn.Module):
    """Content features + style bundle -> styled glyph and attention maps."""

    def __init__(
        self,
        embedding: CaptionEmbedding,
        d_model: int = 64,
        dense_pairs: int = 2,
        growth: int = 24,
        conv_norm: str = "group",
    ):
        super().__init__()
        self.d_model = d_model
        self.embedding = embedding  # shared with the skeleton builder
        self.encoder = DenseEncoder(d_model, pairs=dense_pairs, growth=growth, norm=conv_norm)
        self.transfer = TransitiveAttention(d_model, n_inputs=4)
        self.renderer = DeconvRenderer(d_model, n_expand=4, norm=conv_norm)

    def encode_styles(self, images: Tensor) -> Tensor:
        """(T,1,64,64) -> (T*16, D); block i comes from image i, with the
        16-cell position table added per block."""
        feats = self.encoder(images)  # T,D,4,4
        t = feats.shape[0]
        tokens = feats.permute(0, 2, 3, 1).reshape(t * FEATURE_CELLS, self.d_model)
        pos = self.embedding.positions[:FEATURE_CELLS].to(tokens.dtype)
        return tokens + pos.repeat(t, 1)

    def embed_style_captions(self, caption_ids: list[Tensor]) -> Tensor:
        """Concatenate per-image caption embeddings, positions restarting at
        every image so block order is irrelevant."""
        return torch.cat([self.embedding(ids) for ids in caption_ids], dim=0)

    def generate(
        self,
        content: Tensor,
        content_ids: Tensor,
        style_images: Tensor,
        style_caption_ids: list[Tensor],
    ) -> tuple[Tensor, TransitiveMaps]:
        if content.shape != (FEATURE_CELLS, self.d_model):
            raise DimensionMismatch(f"content grid {tuple(content.shape)}")
        if style_images.shape[0] != len(style_caption_ids):
            raise DimensionMismatch("one caption per style image required")
        x_con = self.embedding(content_ids)
        x_sty = self.embed_style_captions(style_caption_ids)
        feats = self.encode_styles(style_images)
        mask = style_alignment_mask(
            [len(ids) for ids in style_caption_ids], device=content.device
        )
        rep, maps = self.transfer([content, x_con, x_sty, feats], style_mask=mask)
        image = self.renderer(rep)
        return image, maps

    def forward(self, *args, **kwargs):
        return self.generate(*args, **kwargs)
