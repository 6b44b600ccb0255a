from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from glyphforge.attnkern import (
    AllMaskedRow,
    BidirectionalStack,
    DimensionMismatch,
    MultiHeadAttention,
    ScoreOverflow,
    TransitiveAttention,
    attn,
    bida,
    exp_score_variance,
    mha,
    score_variance_mc_report,
    transitive_beta,
)
from oracles import (
    attn_oracle,
    bida_oracle,
    mha_oracle,
    regrouped_chain,
    transitive_oracle,
    variance_term_sum,
)

torch.manual_seed(0)


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


# --- attn --------------------------------------------------------------------


def test_attn_single_key():
    w = attn(t64([[1.0, 2.0]]), t64([[0.3, -0.1]]))
    assert torch.allclose(w, t64([[1.0]]))


def test_attn_hand_case():
    w = attn(t64([[1.0, 0.0]]), t64([[1.0, 0.0], [0.0, 1.0]]))
    assert w[0, 0].item() == pytest.approx(0.6698, abs=1e-4)
    assert w[0, 1].item() == pytest.approx(0.3302, abs=1e-4)
    # straight-line oracle agrees
    ref = attn_oracle(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert np.allclose(w.numpy(), ref)


def test_attn_mask_zeros_and_renormalizes():
    q = t64(np.random.default_rng(0).normal(size=(2, 3)))
    k = t64(np.random.default_rng(1).normal(size=(3, 3)))
    mask = torch.tensor([[True, True, False], [True, True, False]])
    w = attn(q, k, mask)
    assert (w[:, 2] == 0.0).all()
    assert torch.allclose(w.sum(dim=1), t64([1.0, 1.0]))


def test_attn_all_masked_row():
    with pytest.raises(AllMaskedRow):
        attn(t64([[1.0]]), t64([[1.0]]), torch.tensor([[False]]))


def test_attn_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        attn(t64([[1.0, 2.0]]), t64([[1.0, 2.0, 3.0]]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9))
def test_attn_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    lq, lk, d = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
    q, k = rng.normal(size=(lq, d)), rng.normal(size=(lk, d))
    mask = rng.random((lq, lk)) < 0.7
    mask[:, 0] = True  # keep every row admissible
    w = attn(t64(q), t64(k), torch.as_tensor(mask))
    assert torch.allclose(w.sum(dim=1), torch.ones(int(lq), dtype=torch.float64), atol=1e-6)
    assert (w[~torch.as_tensor(mask)] == 0).all()
    assert np.allclose(w.numpy(), attn_oracle(q, k, mask), atol=1e-12)


# --- mha ---------------------------------------------------------------------


def test_mha_degenerates_to_plain_attention():
    d = 3
    params = MultiHeadAttention(d, 1)
    with torch.no_grad():
        params.w_q[0] = torch.eye(d)
        params.w_k[0] = torch.eye(d)
        params.w_v[0] = torch.eye(d)
        params.w_o.copy_(torch.eye(d))
    q, k, v = torch.randn(2, d), torch.randn(4, d), torch.randn(4, d)
    out = mha(q, k, v, params)
    expected = attn(q, k) @ v
    assert torch.allclose(out, expected, atol=1e-6)


def test_mha_permutation_equivariance():
    params = MultiHeadAttention(4, 2).double()
    q, k, v = torch.randn(3, 4).double(), torch.randn(5, 4).double(), torch.randn(5, 4).double()
    perm = torch.randperm(5)
    out1 = mha(q, k, v, params)
    out2 = mha(q, k[perm], v[perm], params)
    assert torch.allclose(out1, out2, atol=1e-12)


def test_mha_matches_straight_line_oracle():
    rng = np.random.default_rng(7)
    params = MultiHeadAttention(4, 2).double()
    q, k, v = (t64(rng.normal(size=(3, 4))) for _ in range(3))
    out, amap = mha(q, k, v, params, return_map=True)
    ref_out, ref_map = mha_oracle(
        q.numpy(),
        k.numpy(),
        v.numpy(),
        params.w_q.detach().numpy(),
        params.w_k.detach().numpy(),
        params.w_v.detach().numpy(),
        params.w_o.detach().numpy(),
    )
    assert np.allclose(out.detach().numpy(), ref_out, atol=1e-10)
    assert np.allclose(amap.detach().numpy(), ref_map, atol=1e-10)


# --- bida --------------------------------------------------------------------


def corr_matrix(owner_cols, n_tokens):
    m = torch.zeros(len(owner_cols), n_tokens, dtype=torch.bool)
    for row, col in enumerate(owner_cols):
        m[row, col] = True
    return m


def test_bida_single_radical_single_stroke():
    stack = BidirectionalStack(4, 2, 1).double()
    x_r, x_s = torch.randn(1, 4).double(), torch.randn(1, 4).double()
    corr = corr_matrix([0], 1)
    _, _, map_r, map_s = bida(x_r, x_s, corr, stack, return_maps=True)
    assert torch.allclose(map_r, t64([[1.0]]))
    assert torch.allclose(map_s, t64([[1.0]]))


def test_bida_stroke_attends_only_to_parent():
    # caption: [op, rad_a, rad_b]; strokes 0-1 -> rad_a, 2-4 -> rad_b
    stack = BidirectionalStack(4, 2, 2).double()
    x_r, x_s = torch.randn(3, 4).double(), torch.randn(5, 4).double()
    corr = corr_matrix([1, 1, 2, 2, 2], 3)
    radical_cols = torch.tensor([False, True, True])
    _, _, map_r, map_s = bida(x_r, x_s, corr, stack, radical_cols, return_maps=True)
    assert (map_s[:2, 2] == 0).all() and (map_s[:2, 0] == 0).all()
    assert (map_s[2:, 1] == 0).all()
    # radical rows attend only to own strokes
    assert (map_r[1, 2:] == 0).all()
    assert (map_r[2, :2] == 0).all()


def test_bida_structure_rows_pass_through():
    stack = BidirectionalStack(4, 2, 2).double()
    x_r, x_s = torch.randn(3, 4).double(), torch.randn(5, 4).double()
    corr = corr_matrix([1, 1, 2, 2, 2], 3)
    out_r, _ = bida(x_r, x_s, corr, stack)
    assert torch.equal(out_r[0], x_r[0])
    assert not torch.allclose(out_r[1], x_r[1])


def test_bida_radical_without_strokes_raises():
    stack = BidirectionalStack(4, 2, 1).double()
    x_r, x_s = torch.randn(2, 4).double(), torch.randn(1, 4).double()
    corr = corr_matrix([0], 2)
    radical_cols = torch.tensor([True, True])  # token 1 claims radical, has no strokes
    with pytest.raises(AllMaskedRow):
        bida(x_r, x_s, corr, stack, radical_cols)


def test_bida_matches_straight_line_oracle():
    torch.manual_seed(3)
    stack = BidirectionalStack(4, 2, 2).double()
    x_r, x_s = torch.randn(3, 4).double(), torch.randn(5, 4).double()
    corr = corr_matrix([1, 1, 2, 2, 2], 3)
    out_r, out_s, map_r, map_s = bida(x_r, x_s, corr, stack, return_maps=True)
    ref_r, ref_s, ref_mr, ref_ms = bida_oracle(stack, x_r.numpy(), x_s.numpy(), corr.numpy())
    assert np.allclose(out_r.detach().numpy(), ref_r, atol=1e-10)
    assert np.allclose(out_s.detach().numpy(), ref_s, atol=1e-10)
    assert np.allclose(map_r.detach().numpy(), ref_mr, atol=1e-10)
    assert np.allclose(map_s.detach().numpy(), ref_ms, atol=1e-10)


# --- variance ---------------------------------------------------------------


def test_variance_closed_values():
    e = math.e
    assert exp_score_variance(2, 1) == pytest.approx(e**4 - e**2, rel=1e-12)
    assert exp_score_variance(2, 1) == pytest.approx(47.2091, abs=5e-5)
    assert exp_score_variance(2, 2) == pytest.approx(2 * e**4 + 4 * e**3 - 2 * e**2, rel=1e-12)
    assert exp_score_variance(2, 2) == pytest.approx(174.760, abs=5e-3)


@pytest.mark.parametrize("n", [2, 3, 4, 6])
@pytest.mark.parametrize("d", [1, 2, 3, 8, 64])
def test_variance_matches_term_by_term_oracle(n, d):
    assert exp_score_variance(n, d) == pytest.approx(variance_term_sum(n, d), rel=1e-10)


def test_variance_monotone_in_d():
    values = [exp_score_variance(2, d) for d in range(1, 65)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_variance_overflow_raises():
    with pytest.raises(ScoreOverflow):
        exp_score_variance(500, 2)


def test_variance_invalid_args():
    with pytest.raises(ValueError):
        exp_score_variance(1, 4)


def test_mc_report_contains_table():
    report = score_variance_mc_report(dims=(1, 2), n_samples=20_000)
    assert "empirical" in report and "normalizer" in report
    # at D=1 the empirical value is close to the analytic one
    line = [l for l in report.splitlines() if l.strip().startswith("1 ")][0]
    emp, iid, formula = (float(x) for x in line.split()[1:])
    assert emp == pytest.approx(formula, rel=0.15)


# --- transitive kernel --------------------------------------------------------


def test_transitive_beta_single_hop():
    rng = np.random.default_rng(0)
    q, k = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(2, 4)))
    beta_hat, beta = transitive_beta([q], [k])
    raw = np.exp(np.clip(q.numpy(), -30, 30)) @ np.exp(np.clip(k.numpy(), -30, 30)).T
    assert np.allclose(beta_hat.numpy(), raw, rtol=1e-12)
    expected = torch.softmax(t64(raw / math.sqrt(variance_term_sum(2, 4))), dim=-1)
    assert torch.allclose(beta, expected, atol=1e-12)


def test_transitive_beta_all_zero_inputs_uniform():
    d = 4
    qs = [torch.zeros(2, d).double(), torch.zeros(3, d).double(), torch.zeros(3, d).double()]
    ks = [torch.zeros(3, d).double(), torch.zeros(3, d).double(), torch.zeros(2, d).double()]
    beta_hat, beta = transitive_beta(qs, ks)
    assert beta.shape == (2, 2)
    assert torch.allclose(beta, torch.full((2, 2), 0.5).double())
    assert (beta_hat > 0).all()


def test_transitive_beta_factorization_and_regrouping():
    rng = np.random.default_rng(42)
    for _ in range(100):
        d = 4
        lengths = rng.integers(1, 5, size=4)
        qs = [t64(rng.normal(size=(lengths[i], d))) for i in range(3)]
        ks = [t64(rng.normal(size=(lengths[i + 1], d))) for i in range(3)]
        beta_hat, beta = transitive_beta(qs, ks)
        # factor-then-multiply oracle
        import oracles

        factors = [
            oracles.exp_clip(q.numpy()) @ oracles.exp_clip(k.numpy()).T
            for q, k in zip(qs, ks)
        ]
        ref = factors[0] @ (factors[1] @ factors[2])
        assert np.allclose(beta_hat.numpy(), ref, rtol=1e-5)
        # corrective-term regrouping
        ref2 = regrouped_chain([q.numpy() for q in qs], [k.numpy() for k in ks])
        assert np.allclose(beta_hat.numpy(), ref2, rtol=1e-5)
        assert torch.allclose(beta.sum(dim=1), torch.ones(beta.shape[0]).double(), atol=1e-6)
        assert (beta_hat > 0).all()


def test_transitive_beta_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        transitive_beta([torch.zeros(2, 4)], [torch.zeros(3, 5)])


def test_transitive_attention_single_source_convexity():
    torch.manual_seed(1)
    ta = TransitiveAttention(4).double()
    x1, x2, x3, x4 = (torch.randn(n, 4).double() for n in (4, 1, 1, 16))
    mask = torch.ones(1, 16, dtype=torch.bool)
    out, maps = ta([x1, x2, x3, x4], style_mask=mask)
    assert out.shape == (4, 4)
    assert torch.allclose(maps.weights.sum(dim=1), torch.ones(4).double(), atol=1e-6)
    # output rows live in the convex hull of the projected style values
    values = (x4 @ ta.u_v).detach()
    assert (out.detach() <= values.max(dim=0).values + 1e-9).all()
    assert (out.detach() >= values.min(dim=0).values - 1e-9).all()


def test_transitive_attention_block_permutation_invariance():
    torch.manual_seed(2)
    d, t, tokens_per = 4, 3, 2
    ta = TransitiveAttention(d).double()
    x1 = torch.randn(4, d).double()
    x2 = torch.randn(3, d).double()
    style_caps = torch.randn(t * tokens_per, d).double()
    style_feats = torch.randn(t * 16, d).double()
    mask = torch.zeros(t * tokens_per, t * 16, dtype=torch.bool)
    for i in range(t):
        mask[i * tokens_per : (i + 1) * tokens_per, i * 16 : (i + 1) * 16] = True
    out1, _ = ta([x1, x2, style_caps, style_feats], style_mask=mask)

    order = [2, 0, 1]
    cap_perm = torch.cat([style_caps[i * tokens_per : (i + 1) * tokens_per] for i in order])
    feat_perm = torch.cat([style_feats[i * 16 : (i + 1) * 16] for i in order])
    out2, _ = ta([x1, x2, cap_perm, feat_perm], style_mask=mask)
    assert torch.allclose(out1, out2, atol=1e-10)


def test_transitive_attention_matches_three_hop_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        d = 4
        ta = TransitiveAttention(d).double()
        lengths = rng.integers(1, 5, size=4)
        xs = [t64(rng.normal(size=(l, d))) for l in lengths]
        out, maps = ta(xs)
        ref_out, ref_hat, ref_beta, ref_raw, ref_factors = transitive_oracle(ta, [x.numpy() for x in xs])
        assert np.allclose(out.detach().numpy(), ref_out, rtol=1e-5, atol=1e-12)
        assert np.allclose(maps.raw_weights.detach().numpy(), ref_hat, rtol=1e-5)
        assert np.allclose(maps.weights.detach().numpy(), ref_beta, atol=1e-10)
        for got, want in zip(
            (maps.content_placement, maps.caption_match, maps.style_lookup), ref_factors
        ):
            assert np.allclose(got.detach().numpy(), want, atol=1e-10)


def test_transitive_attention_mask_zeroes_style_lookup():
    torch.manual_seed(4)
    ta = TransitiveAttention(4).double()
    xs = [torch.randn(n, 4).double() for n in (4, 2, 4, 32)]
    mask = torch.zeros(4, 32, dtype=torch.bool)
    mask[:2, :16] = True
    mask[2:, 16:] = True
    _, maps = ta(xs, style_mask=mask)
    assert (maps.style_lookup[~mask] == 0).all()
    assert (maps.raw_factors[2].detach()[~mask.numpy()] == 0).all()
    assert torch.allclose(maps.style_lookup.sum(dim=1), torch.ones(4).double(), atol=1e-6)


def test_transitive_attention_all_masked_row_raises():
    ta = TransitiveAttention(4).double()
    xs = [torch.randn(n, 4).double() for n in (4, 2, 2, 16)]
    mask = torch.zeros(2, 16, dtype=torch.bool)
    mask[0] = True
    with pytest.raises(AllMaskedRow):
        ta(xs, style_mask=mask)


def test_transitive_attention_gradcheck():
    torch.manual_seed(6)
    ta = TransitiveAttention(3).double()
    xs = [torch.randn(n, 3, dtype=torch.float64, requires_grad=True) for n in (2, 2, 3, 4)]

    names = [n for n, _ in ta.named_parameters()]

    def f(x1, x2, x3, x4, u_q, u_k, u_v):
        out, maps = torch.func.functional_call(
            ta, dict(zip(names, (u_q, u_k, u_v))), ([x1, x2, x3, x4],)
        )
        return out.sum() + maps.weights.sum() + maps.style_lookup.sum()

    params = [p.detach().clone().requires_grad_(True) for p in ta.parameters()]
    assert torch.autograd.gradcheck(f, (*xs, *params), eps=1e-6, atol=1e-7)
