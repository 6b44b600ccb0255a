"""Attention primitives.

Covers the scaled dot-product map, the multi-head kernel used by every
attention block, self- and bi-directional stacks, and the transitive kernel
that chains several query-key pairs into one attention map.  The transitive
kernel multiplies exponentiated projections hop by hop,

    raw = exp(Q_1) exp(K_2)^T  exp(Q_2) exp(K_3)^T  ...  exp(Q_{N-1}) exp(K_N)^T,

normalizes by the analytic score variance for 2N-2 standard-normal inputs and
applies a row SoftMax.  Each hop's own product is also exposed as an
individually normalized attention map (divided by the 2-input variance, no
square root) so downstream losses can supervise the factors separately.

Exponent inputs are clamped to [-CLAMP, CLAMP] and the chain is evaluated in
float64, which keeps every intermediate finite for any realistic sequence
length; the chain is associative, so left-to-right evaluation only changes
floating-point rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

CLAMP = 30.0  # bound on exp() inputs inside the transitive chain

_LOG_DOUBLE_MAX = math.log(torch.finfo(torch.float64).max)


class DimensionMismatch(ValueError):
    pass


class AllMaskedRow(ValueError):
    """A query row was left with no admissible key."""


class ScoreOverflow(OverflowError):
    """A score or variance exceeded the float64 range."""


def attn(q: Tensor, k: Tensor, mask: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention map: SoftMax(QK^T / sqrt(D)) row-wise.

    ``mask`` is boolean (L_q, L_k), True = admissible; masked entries come
    out exactly 0.  Raises AllMaskedRow if a query row has no admissible key.
    """
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DimensionMismatch(f"attn: q {tuple(q.shape)} vs k {tuple(k.shape)}")
    logits = q @ k.T / math.sqrt(q.shape[1])
    if mask is not None:
        if mask.shape != logits.shape:
            raise DimensionMismatch(f"mask {tuple(mask.shape)} vs logits {tuple(logits.shape)}")
        if not bool(mask.any(dim=1).all()):
            raise AllMaskedRow("query row with every key masked")
        logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=-1)


class MultiHeadAttention(nn.Module):
    """Multi-head kernel: per-head full-width D x D projections, heads
    concatenated and projected by an (M*D) x D output matrix."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if n_heads < 1:
            raise DimensionMismatch("need at least one head")
        self.d_model = d_model
        self.n_heads = n_heads
        self.w_q = nn.Parameter(torch.empty(n_heads, d_model, d_model))
        self.w_k = nn.Parameter(torch.empty(n_heads, d_model, d_model))
        self.w_v = nn.Parameter(torch.empty(n_heads, d_model, d_model))
        self.w_o = nn.Parameter(torch.empty(n_heads * d_model, d_model))
        for p in (self.w_q, self.w_k, self.w_v):
            nn.init.xavier_uniform_(p)
        nn.init.xavier_uniform_(self.w_o)

    def forward(
        self,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        mask: Tensor | None = None,
        return_map: bool = False,
    ):
        if k.shape[0] != v.shape[0]:
            raise DimensionMismatch("key/value length mismatch")
        heads = []
        maps = []
        for j in range(self.n_heads):
            a = attn(q @ self.w_q[j], k @ self.w_k[j], mask)
            maps.append(a)
            heads.append(a @ (v @ self.w_v[j]))
        out = torch.cat(heads, dim=-1) @ self.w_o
        if return_map:
            return out, torch.stack(maps).mean(dim=0)
        return out


def mha(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: MultiHeadAttention,
    mask: Tensor | None = None,
    return_map: bool = False,
):
    return params(q, k, v, mask, return_map)


class SelfAttentionStack(nn.Module):
    """n layers of multi-head self-attention, residual + LayerNorm each."""

    def __init__(self, d_model: int, n_heads: int, n_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(
            MultiHeadAttention(d_model, n_heads) for _ in range(n_layers)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(d_model) for _ in range(n_layers))

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        for layer, norm in zip(self.layers, self.norms):
            x = norm(x + layer(x, x, x, mask))
        return x


class CrossAttentionStack(nn.Module):
    """n layers updating a query stream against a fixed memory; exposes the
    final layer's head-averaged attention map."""

    def __init__(self, d_model: int, n_heads: int, n_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(
            MultiHeadAttention(d_model, n_heads) for _ in range(n_layers)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(d_model) for _ in range(n_layers))

    def forward(
        self, q: Tensor, memory: Tensor, mask: Tensor | None = None
    ) -> tuple[Tensor, Tensor]:
        amap = None
        for layer, norm in zip(self.layers, self.norms):
            out, amap = layer(q, memory, memory, mask, return_map=True)
            q = norm(q + out)
        return q, amap


class BidirectionalStack(nn.Module):
    """Paired cross-attention between radical and stroke token streams.

    Each stroke token may only attend to its parent radical token and each
    radical token only to its own strokes, via the correspondence mask
    (n_strokes x n_caption_tokens).  Caption rows without strokes are either
    structure operators (copied through unchanged) or stroke-less radicals
    (an error when ``radical_cols`` identifies them as radicals).
    """

    def __init__(self, d_model: int, n_heads: int, n_layers: int):
        super().__init__()
        self.rad_layers = nn.ModuleList(
            MultiHeadAttention(d_model, n_heads) for _ in range(n_layers)
        )
        self.str_layers = nn.ModuleList(
            MultiHeadAttention(d_model, n_heads) for _ in range(n_layers)
        )
        self.rad_norms = nn.ModuleList(nn.LayerNorm(d_model) for _ in range(n_layers))
        self.str_norms = nn.ModuleList(nn.LayerNorm(d_model) for _ in range(n_layers))

    def forward(
        self,
        x_r: Tensor,
        x_s: Tensor,
        corr: Tensor,
        radical_cols: Tensor | None = None,
        return_maps: bool = False,
    ):
        if corr.shape != (x_s.shape[0], x_r.shape[0]):
            raise DimensionMismatch(
                f"correspondence {tuple(corr.shape)} vs strokes {x_s.shape[0]} / caption {x_r.shape[0]}"
            )
        corr = corr.bool()
        if not bool(corr.any(dim=1).all()):
            raise AllMaskedRow("stroke token with no parent radical")
        has_strokes = corr.any(dim=0)  # per caption token
        if radical_cols is not None and bool((radical_cols & ~has_strokes).any()):
            raise AllMaskedRow("radical token with zero strokes")
        # structure-operator rows bypass the stroke-side attention entirely
        active = has_strokes
        mask_r = corr.T.clone()
        mask_r[~active] = True  # placate attn; rows are overwritten below
        map_r = map_s = None
        for lr, ls, nr, ns in zip(self.rad_layers, self.str_layers, self.rad_norms, self.str_norms):
            up_r, map_r = lr(x_r, x_s, x_s, mask_r, return_map=True)
            up_s, map_s = ls(x_s, x_r, x_r, corr, return_map=True)
            new_r = nr(x_r + up_r)
            x_r = torch.where(active[:, None], new_r, x_r)
            x_s = ns(x_s + up_s)
        if return_maps:
            return x_r, x_s, map_r, map_s
        return x_r, x_s


def bida(
    x_r: Tensor,
    x_s: Tensor,
    corr: Tensor,
    params: BidirectionalStack,
    radical_cols: Tensor | None = None,
    return_maps: bool = False,
):
    return params(x_r, x_s, corr, radical_cols, return_maps)


# ---------------------------------------------------------------------------
# analytic score variance


def exp_score_variance(n: int, d: int) -> float:
    """Variance of an n-input exponential score chain for N(0,1) inputs:

        D^(n-1) * sum_{i=0..n} (D-1)^i C(n,i) e^(2n-i)  -  e^n D^(2(n-1))

    evaluated in log space.  Raises ScoreOverflow instead of returning inf.
    """
    if n < 2 or d < 1:
        raise ValueError(f"need n >= 2 and d >= 1, got n={n}, d={d}")
    # log of sum_{i} (D-1)^i C(n,i) e^(2n-i)
    if d == 1:
        log_sum = 2.0 * n  # only i=0 survives
    else:
        logs = [
            i * math.log(d - 1) + math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1) + (2 * n - i)
            for i in range(n + 1)
        ]
        peak = max(logs)
        log_sum = peak + math.log(sum(math.exp(l - peak) for l in logs))
    log_pos = (n - 1) * math.log(d) + log_sum
    log_neg = n + 2 * (n - 1) * math.log(d)
    # positive term always dominates: log(V) = log_pos + log1p(-exp(log_neg - log_pos))
    log_v = log_pos + math.log1p(-math.exp(log_neg - log_pos))
    if log_v > _LOG_DOUBLE_MAX:
        raise ScoreOverflow(f"variance for n={n}, d={d} exceeds float64 range")
    return math.exp(log_v)


def _log_exp_score_variance(n: int, d: int) -> float:
    if d == 1:
        log_sum = 2.0 * n
    else:
        logs = [
            i * math.log(d - 1) + math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1) + (2 * n - i)
            for i in range(n + 1)
        ]
        peak = max(logs)
        log_sum = peak + math.log(sum(math.exp(l - peak) for l in logs))
    log_pos = (n - 1) * math.log(d) + log_sum
    log_neg = n + 2 * (n - 1) * math.log(d)
    return log_pos + math.log1p(-math.exp(log_neg - log_pos))


def score_variance_mc_report(
    dims: tuple[int, ...] = (1, 2, 4, 8), n_samples: int = 200_000, seed: int = 0
) -> str:
    """Monte-Carlo check of the 2-input score variance.

    For q, k iid N(0,1)^D the single pair score sum_d e^(q_d) e^(k_d) has
    empirical variance D*(e^4 - e^2).  The analytic normalizer used by the
    transitive kernel agrees at D=1 and grows faster for D >= 2; the
    normalizer is kept as configured and this report is informational only.
    """
    gen = torch.Generator().manual_seed(seed)
    lines = [
        "2-input exponential score variance: Monte-Carlo vs normalizer",
        f"samples per dim: {n_samples}",
        f"{'D':>4} {'empirical':>14} {'D*(e^4-e^2)':>14} {'normalizer':>14}",
    ]
    iid = math.e**4 - math.e**2
    for d in dims:
        q = torch.randn(n_samples, d, generator=gen, dtype=torch.float64)
        k = torch.randn(n_samples, d, generator=gen, dtype=torch.float64)
        score = (q.exp() * k.exp()).sum(dim=1)
        emp = float(score.var(unbiased=True))
        lines.append(
            f"{d:>4} {emp:>14.4f} {d * iid:>14.4f} {exp_score_variance(2, d):>14.4f}"
        )
    lines.append(
        "note: empirical variance tracks D*(e^4-e^2); the analytic normalizer"
        " diverges from it for D >= 2 and is used verbatim for scaling."
    )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# transitive kernel


@dataclass
class TransitiveMaps:
    """Factored attention maps of one transitive pass.

    content_placement: feature cells -> content caption tokens
    caption_match:     content caption tokens -> style caption tokens
    style_lookup:      style caption tokens -> style feature cells
    weights / raw_weights: composed map after / before the row SoftMax
    raw_factors:       the unnormalized per-hop products (masked where the
                       composed map is masked)
    """

    content_placement: Tensor
    caption_match: Tensor
    style_lookup: Tensor
    weights: Tensor
    raw_weights: Tensor
    raw_factors: tuple[Tensor, ...]


def _raw_hop(q: Tensor, k: Tensor) -> Tensor:
    return torch.exp(q.double().clamp(-CLAMP, CLAMP)) @ torch.exp(
        k.double().clamp(-CLAMP, CLAMP)
    ).T


def transitive_beta(
    q_list: list[Tensor], k_list: list[Tensor], d: int | None = None
) -> tuple[Tensor, Tensor]:
    """Compose a chain of exponential query-key hops left-to-right.

    q_list holds Q_1..Q_{N-1}, k_list holds K_2..K_N; hop i pairs Q_i with
    K_{i+1}.  Returns (raw, softmaxed) where the SoftMax input is scaled by
    sqrt of the analytic variance for 2N-2 inputs.
    """
    if len(q_list) != len(k_list) or not q_list:
        raise DimensionMismatch("need equally many queries and keys")
    d = d if d is not None else q_list[0].shape[1]
    for i, (q, k) in enumerate(zip(q_list, k_list)):
        if q.shape[1] != d or k.shape[1] != d:
            raise DimensionMismatch(f"hop {i}: feature dim != {d}")
    beta_hat = _raw_hop(q_list[0], k_list[0])
    for q, k in zip(q_list[1:], k_list[1:]):
        if q.shape[0] != beta_hat.shape[1]:
            raise DimensionMismatch("chain length mismatch")
        beta_hat = beta_hat @ _raw_hop(q, k)
    if not bool(torch.isfinite(beta_hat).all()):
        raise ScoreOverflow("transitive chain overflowed float64")
    n = 2 * len(q_list)
    scale = math.exp(0.5 * _log_exp_score_variance(n, d))
    beta = torch.softmax(beta_hat / scale, dim=-1)
    return beta_hat, beta


class TransitiveAttention(nn.Module):
    """Chained attention over (content features, content caption, style
    caption, style features) with per-hop projections and a single value
    projection on the final input."""

    def __init__(self, d_model: int, n_inputs: int = 4):
        super().__init__()
        if n_inputs < 2:
            raise DimensionMismatch("need at least two inputs")
        self.d_model = d_model
        self.n_inputs = n_inputs
        self.u_q = nn.Parameter(torch.empty(n_inputs - 1, d_model, d_model))
        self.u_k = nn.Parameter(torch.empty(n_inputs - 1, d_model, d_model))
        self.u_v = nn.Parameter(torch.empty(d_model, d_model))
        nn.init.xavier_uniform_(self.u_q)
        nn.init.xavier_uniform_(self.u_k)
        nn.init.xavier_uniform_(self.u_v)

    def forward(
        self, inputs: list[Tensor], style_mask: Tensor | None = None
    ) -> tuple[Tensor, TransitiveMaps]:
        if len(inputs) != self.n_inputs:
            raise DimensionMismatch(f"expected {self.n_inputs} inputs, got {len(inputs)}")
        for x in inputs:
            if x.shape[1] != self.d_model:
                raise DimensionMismatch("input feature dim mismatch")
        raw = []
        for i in range(self.n_inputs - 1):
            q = inputs[i] @ self.u_q[i]
            k = inputs[i + 1] @ self.u_k[i]
            raw.append(_raw_hop(q, k))
        if style_mask is not None:
            last = raw[-1]
            if style_mask.shape != last.shape:
                raise DimensionMismatch(
                    f"style mask {tuple(style_mask.shape)} vs hop {tuple(last.shape)}"
                )
            if not bool(style_mask.any(dim=1).all()):
                raise AllMaskedRow("style caption token with no feature block")
            raw[-1] = last * style_mask.to(last.dtype)

        beta_hat = raw[0]
        for r in raw[1:]:
            beta_hat = beta_hat @ r
        if not bool(torch.isfinite(beta_hat).all()):
            raise ScoreOverflow("transitive chain overflowed float64")
        n = 2 * (self.n_inputs - 1)
        scale = math.exp(0.5 * _log_exp_score_variance(n, self.d_model))
        beta = torch.softmax(beta_hat / scale, dim=-1)

        # individually normalized factor maps (2-input variance, no sqrt)
        v2 = exp_score_variance(2, self.d_model)
        factors = []
        for i, r in enumerate(raw):
            logits = r / v2
            if style_mask is not None and i == len(raw) - 1:
                logits = logits.masked_fill(~style_mask.bool(), float("-inf"))
            factors.append(torch.softmax(logits, dim=-1))

        values = (inputs[-1] @ self.u_v).double()
        out = (beta @ values).to(inputs[0].dtype)
        maps = TransitiveMaps(
            content_placement=factors[0],
            caption_match=factors[1] if len(factors) > 1 else factors[0],
            style_lookup=factors[-1],
            weights=beta,
            raw_weights=beta_hat,
            raw_factors=tuple(raw),
        )
        return out, maps


def transitive_attention(
    inputs: list[Tensor], params: TransitiveAttention, style_mask: Tensor | None = None
) -> tuple[Tensor, TransitiveMaps]:
    return params(inputs, style_mask)
