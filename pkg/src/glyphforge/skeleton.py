"""Skeleton builder: captions to content features and a standard-font image.

Token streams for the radical and stroke captions are embedded with shared
sinusoidal positions, refined by self-attention, and cross-bound by a
bi-directional block restricted to the stroke-radical correspondence.  A
4x4 grid of position embeddings (the blank canvas) queries the radical
tokens to place radicals spatially, is upsampled to 8x8 (strokes live at a
finer scale than radicals), and queries the stroke tokens.  A convolution
plus 2x2 average pooling reduces the filled canvas to the 4x4 content
feature grid; a seven-layer deconvolution stack renders the canvas to a
64x64 image through a sigmoid.

Ablation switches: radical/stroke streams, the bi-directional block, and
the canvas upsampling are independently disableable; without upsampling the
renderer grows a fourth expansion layer (4 -> 64 needs four doublings).
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .attnkern import (
    BidirectionalStack,
    CrossAttentionStack,
    DimensionMismatch,
    SelfAttentionStack,
)
from .glyphlang import UnknownSymbol

CANVAS = 4  # base canvas side length
IMAGE = 64


def norm2d(channels: int, kind: str = "group") -> nn.Module:
    """Per-layer conv normalization.  "group" (single-group, batch-size
    independent: train and eval behave identically, which matters for
    per-sample reference-mode training) or classic "batch"."""
    if kind == "group":
        return nn.GroupNorm(1, channels)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    raise ValueError(f"unknown norm kind {kind!r}")


def sinusoidal_positions(n_positions: int, d_model: int, dtype=torch.float64) -> Tensor:
    """P[i, 2d] = sin(i / 10000^(2d/D)), P[i, 2d+1] = cos(i / 10000^(2d/D))."""
    if d_model % 2:
        raise DimensionMismatch("model dimension must be even")
    pos = torch.arange(n_positions, dtype=dtype)[:, None]
    dims = torch.arange(0, d_model, 2, dtype=dtype)[None, :]
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype), dims / d_model)
    table = torch.zeros(n_positions, d_model, dtype=dtype)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)
    return table


class CaptionEmbedding(nn.Module):
    """Token table plus fixed sinusoidal positions, shared across models."""

    MAX_POSITIONS = 64

    def __init__(self, vocab_size: int, d_model: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.table = nn.Embedding(vocab_size, d_model)
        nn.init.normal_(self.table.weight, std=1.0 / math.sqrt(d_model))
        self.register_buffer(
            "positions", sinusoidal_positions(self.MAX_POSITIONS, d_model, torch.float32)
        )

    def forward(self, token_ids: Tensor, start: int = 0) -> Tensor:
        if token_ids.numel() and int(token_ids.max()) >= self.vocab_size:
            raise UnknownSymbol(f"token id {int(token_ids.max())} out of range")
        pos = self.positions[start : start + token_ids.shape[0]].to(self.table.weight.dtype)
        return self.table(token_ids) + pos


def upsample_canvas(canvas: Tensor, mode: str = "nearest") -> Tensor:
    """(S*S, D) -> (2S*2S, D), each cell duplicated into a 2x2 block."""
    n, d = canvas.shape
    s = int(math.isqrt(n))
    if s * s != n:
        raise DimensionMismatch(f"canvas of {n} cells is not square")
    grid = canvas.reshape(s, s, d).permute(2, 0, 1)[None]  # 1,D,S,S
    if mode == "nearest":
        up = torch.nn.functional.interpolate(grid, scale_factor=2, mode="nearest")
    elif mode == "bilinear":
        up = torch.nn.functional.interpolate(
            grid, scale_factor=2, mode="bilinear", align_corners=False
        )
    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    return up[0].permute(1, 2, 0).reshape(4 * n, d)


class DeconvRenderer(nn.Module):
    """Seven deconvolution layers: n_expand stride-2 4x4 expansions and
    7 - n_expand stride-1 3x3 layers, batch norm + ReLU between, sigmoid
    output to a single channel."""

    def __init__(self, d_model: int, n_expand: int, out_size: int = IMAGE, norm: str = "group"):
        super().__init__()
        if n_expand not in (3, 4):
            raise DimensionMismatch("renderer supports 3 or 4 expansion layers")
        self.n_expand = n_expand
        self.out_size = out_size
        plan: list[tuple[bool, int, int]] = []  # (stride2, c_in, c_out)
        ch = d_model
        remaining_plain = 7 - n_expand
        # interleave: expand, refine, expand, ... then trailing refines
        seq: list[bool] = []
        e, p = n_expand, remaining_plain
        while e or p:
            if e:
                seq.append(True)
                e -= 1
            if p:
                seq.append(False)
                p -= 1
        for i, stride2 in enumerate(seq):
            c_out = max(ch // 2, 4) if stride2 else ch
            if i == len(seq) - 1:
                c_out = 1
            plan.append((stride2, ch, c_out))
            ch = c_out
        layers: list[nn.Module] = []
        for i, (stride2, c_in, c_out) in enumerate(plan):
            if stride2:
                layers.append(nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1))
            else:
                layers.append(nn.ConvTranspose2d(c_in, c_out, 3, stride=1, padding=1))
            if i < len(plan) - 1:
                layers.append(norm2d(c_out, norm))
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def forward(self, canvas: Tensor) -> Tensor:
        n, d = canvas.shape
        s = int(math.isqrt(n))
        grid = canvas.reshape(s, s, d).permute(2, 0, 1)[None]
        out = torch.sigmoid(self.net(grid))
        if out.shape[-1] != self.out_size:
            raise DimensionMismatch(
                f"renderer produced {out.shape[-1]}, expected {self.out_size}"
            )
        return out[0, 0]


class SkeletonBuilder(nn.Module):
    """Caption pair -> (content features, filled canvas, radical fill map)."""

    def __init__(
        self,
        vocab_size: int,
        d_model: int = 64,
        n_heads: int = 4,
        n_layers: int = 2,
        use_radical: bool = True,
        use_stroke: bool = True,
        use_bidirectional: bool = True,
        use_upsample: bool = True,
        upsample_mode: str = "nearest",
        conv_norm: str = "group",
    ):
        super().__init__()
        if not (use_radical or use_stroke):
            raise ValueError("at least one caption stream must be enabled")
        self.d_model = d_model
        self.use_radical = use_radical
        self.use_stroke = use_stroke
        self.use_bidirectional = use_bidirectional and use_radical and use_stroke
        self.use_upsample = use_upsample
        self.upsample_mode = upsample_mode

        self.embedding = CaptionEmbedding(vocab_size, d_model)
        if use_radical:
            self.sa_radical = SelfAttentionStack(d_model, n_heads, n_layers)
            self.fill_radical = CrossAttentionStack(d_model, n_heads, n_layers)
        if use_stroke:
            self.sa_stroke = SelfAttentionStack(d_model, n_heads, n_layers)
            self.fill_stroke = CrossAttentionStack(d_model, n_heads, n_layers)
        if self.use_bidirectional:
            self.bind = BidirectionalStack(d_model, n_heads, n_layers)
        self.pool_conv = nn.Conv2d(d_model, d_model, 3, padding=1)
        self.renderer = DeconvRenderer(d_model, n_expand=3 if use_upsample else 4, norm=conv_norm)

    def blank_canvas(self) -> Tensor:
        """4x4 grid initialized with the first 16 position embeddings."""
        return self.embedding.positions[: CANVAS * CANVAS].to(
            self.embedding.table.weight.dtype
        )

    def build_content(
        self,
        radical_ids: Tensor,
        stroke_ids: Tensor,
        corr: Tensor,
        radical_cols: Tensor | None = None,
    ) -> tuple[Tensor, Tensor, Tensor | None]:
        """Returns (content 16xD, canvas S*SxD, fill_map 16xL_R or None)."""
        x_r = x_s = None
        if self.use_radical:
            x_r = self.sa_radical(self.embedding(radical_ids))
        if self.use_stroke:
            x_s = self.sa_stroke(self.embedding(stroke_ids))
        if self.use_bidirectional:
            x_r, x_s = self.bind(x_r, x_s, corr, radical_cols)

        canvas = self.blank_canvas()
        fill_map = None
        if self.use_radical:
            canvas, fill_map = self.fill_radical(canvas, x_r)
        if self.use_upsample:
            canvas = upsample_canvas(canvas, self.upsample_mode)
        if self.use_stroke:
            canvas, _ = self.fill_stroke(canvas, x_s)

        n = canvas.shape[0]
        s = int(math.isqrt(n))
        grid = canvas.reshape(s, s, self.d_model).permute(2, 0, 1)[None]
        pooled = self.pool_conv(grid)
        if s == 2 * CANVAS:
            pooled = torch.nn.functional.avg_pool2d(pooled, 2)
        content = pooled[0].permute(1, 2, 0).reshape(CANVAS * CANVAS, self.d_model)
        return content, canvas, fill_map

    def render(self, canvas: Tensor) -> Tensor:
        return self.renderer(canvas)

    def forward(
        self,
        radical_ids: Tensor,
        stroke_ids: Tensor,
        corr: Tensor,
        radical_cols: Tensor | None = None,
    ) -> tuple[Tensor, Tensor, Tensor | None, Tensor]:
        content, canvas, fill_map = self.build_content(
            radical_ids, stroke_ids, corr, radical_cols
        )
        return content, canvas, fill_map, self.render(canvas)
