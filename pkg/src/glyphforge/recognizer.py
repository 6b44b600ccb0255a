"""Radical-level glyph recognizer.

A dense convolutional encoder turns a 64x64 glyph into 16 feature tokens
(4x4 cells plus cell positions); a transformer decoder predicts the radical
caption token by token.  Teacher-forced mode scores a given caption and is
used by the content loss; greedy mode reads captions off generated images
and acts as the evaluation judge.  The final decoder layer's head-averaged
cross-attention over the 16 cells is exported per step: rows at radical
steps provide the style-side guidance map for the transfer loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .attnkern import MultiHeadAttention
from .fontgen import DenseEncoder, FEATURE_CELLS
from .skeleton import sinusoidal_positions


class DecodeOverrun(RuntimeError):
    """Greedy decoding hit the step limit without an end symbol."""


class LengthMismatch(ValueError):
    pass


@dataclass
class RecognitionResult:
    dists: Tensor  # (L, V) per-step distributions
    cross_attention: Tensor  # (L, 16) head-averaged map over image cells
    tokens: list[int]  # argmax per step (greedy: generated sequence, no end)


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_mult: int = 4):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ffn_mult * d_model),
            nn.ReLU(),
            nn.Linear(ffn_mult * d_model, d_model),
        )
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, x: Tensor, memory: Tensor, causal: Tensor):
        x = self.norm1(x + self.self_attn(x, x, x, causal))
        cross, amap = self.cross_attn(x, memory, memory, return_map=True)
        x = self.norm2(x + cross)
        x = self.norm3(x + self.ffn(x))
        return x, amap


class Recognizer(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        start_id: int,
        end_id: int,
        d_model: int = 64,
        n_heads: int = 4,
        n_layers: int = 2,
        dense_pairs: int = 2,
        growth: int = 24,
        max_len: int = 32,
        conv_norm: str = "group",
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.start_id = start_id
        self.end_id = end_id
        self.max_len = max_len
        self.encoder = DenseEncoder(d_model, pairs=dense_pairs, growth=growth, norm=conv_norm)
        self.tok = nn.Embedding(vocab_size, d_model)
        nn.init.normal_(self.tok.weight, std=d_model**-0.5)
        n_pos = max(max_len + 1, FEATURE_CELLS)
        self.register_buffer(
            "positions", sinusoidal_positions(n_pos, d_model, torch.float32)
        )
        self.layers = nn.ModuleList(
            DecoderLayer(d_model, n_heads) for _ in range(n_layers)
        )
        self.out = nn.Linear(d_model, vocab_size)

    def encode(self, images: Tensor) -> Tensor:
        """(B,1,64,64) -> (B,16,D) feature tokens with cell positions."""
        feats = self.encoder(images)
        b, d = feats.shape[0], feats.shape[1]
        tokens = feats.permute(0, 2, 3, 1).reshape(b, FEATURE_CELLS, d)
        return tokens + self.positions[:FEATURE_CELLS].to(tokens.dtype)

    def decode(self, memory: Tensor, input_ids: Tensor) -> tuple[Tensor, Tensor]:
        """Run the decoder on a prefix; returns (logits (L,V), cross (L,16))."""
        length = input_ids.shape[0]
        x = self.tok(input_ids) + self.positions[:length].to(self.tok.weight.dtype)
        causal = torch.ones(length, length, dtype=torch.bool, device=x.device).tril()
        amap = None
        for layer in self.layers:
            x, amap = layer(x, memory, causal)
        return self.out(x), amap

    def recognize(
        self, image: Tensor, teacher_tokens: Tensor | None = None
    ) -> RecognitionResult:
        """Teacher-forced scoring when teacher_tokens is given (L outputs for
        L tokens), greedy decoding otherwise (DecodeOverrun past max_len)."""
        if image.ndim == 2:
            image = image[None, None]
        memory = self.encode(image)[0]
        if teacher_tokens is not None:
            inputs = torch.cat(
                [torch.tensor([self.start_id], device=image.device), teacher_tokens[:-1]]
            )
            logits, cross = self.decode(memory, inputs)
            dists = torch.softmax(logits, dim=-1)
            return RecognitionResult(dists, cross, dists.argmax(dim=-1).tolist())

        ids = [self.start_id]
        for _ in range(self.max_len):
            logits, cross = self.decode(memory, torch.tensor(ids, device=image.device))
            nxt = int(logits[-1].argmax())
            ids.append(nxt)
            if nxt == self.end_id:
                dists = torch.softmax(logits, dim=-1)
                return RecognitionResult(dists, cross, ids[1:-1])
        raise DecodeOverrun(f"no end symbol within {self.max_len} steps")

    def forward(
        self, image: Tensor, teacher_tokens: Tensor | None = None
    ) -> RecognitionResult:
        return self.recognize(image, teacher_tokens)


def caption_xent(result: RecognitionResult, truth_ids: Tensor) -> Tensor:
    """Mean over steps of -log p(truth); teacher-forced alignment required."""
    if result.dists.shape[0] != truth_ids.shape[0]:
        raise LengthMismatch(
            f"{result.dists.shape[0]} predictions vs {truth_ids.shape[0]} targets"
        )
    probs = result.dists[torch.arange(truth_ids.shape[0]), truth_ids]
    return -(probs.clamp_min(1e-30)).log().mean()


def radical_rows(cross: Tensor, teacher_ids: Tensor, radical_ids: set[int]) -> Tensor:
    """Select cross-attention rows at radical-token steps (teacher order)."""
    keep = [i for i, t in enumerate(teacher_ids.tolist()) if t in radical_ids]
    return cross[keep]
