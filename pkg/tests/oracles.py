"""Independent straight-line reference implementations used as test oracles.

Everything here is plain numpy with explicit loops where feasible, written
directly from the math and kept free of the library's own code paths.
"""

from __future__ import annotations

import math

import numpy as np

CLAMP = 30.0
LN_EPS = 1e-5


def softmax_rows(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        row = x[i] - np.max(x[i])
        e = np.exp(row)
        out[i] = e / e.sum()
    return out


def attn_oracle(q, k, mask=None):
    d = q.shape[1]
    logits = np.zeros((q.shape[0], k.shape[0]))
    for i in range(q.shape[0]):
        for j in range(k.shape[0]):
            logits[i, j] = float(np.dot(q[i], k[j])) / math.sqrt(d)
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    return softmax_rows(logits)


def mha_oracle(q, k, v, wq, wk, wv, wo, mask=None):
    heads, maps = [], []
    for j in range(wq.shape[0]):
        a = attn_oracle(q @ wq[j], k @ wk[j], mask)
        maps.append(a)
        heads.append(a @ (v @ wv[j]))
    return np.concatenate(heads, axis=1) @ wo, np.mean(maps, axis=0)


def layer_norm_oracle(x, gain, bias, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _np(t):
    return t.detach().cpu().numpy().astype(np.float64)


def _mha_arrays(layer):
    return _np(layer.w_q), _np(layer.w_k), _np(layer.w_v), _np(layer.w_o)


def self_stack_oracle(stack, x, mask=None):
    x = np.asarray(x, dtype=np.float64)
    for layer, norm in zip(stack.layers, stack.norms):
        y, _ = mha_oracle(x, x, x, *_mha_arrays(layer), mask)
        x = layer_norm_oracle(x + y, _np(norm.weight), _np(norm.bias))
    return x


def cross_stack_oracle(stack, q, memory, mask=None):
    q = np.asarray(q, dtype=np.float64)
    memory = np.asarray(memory, dtype=np.float64)
    amap = None
    for layer, norm in zip(stack.layers, stack.norms):
        y, amap = mha_oracle(q, memory, memory, *_mha_arrays(layer), mask)
        q = layer_norm_oracle(q + y, _np(norm.weight), _np(norm.bias))
    return q, amap


def bida_oracle(stack, x_r, x_s, corr, radical_cols=None):
    x_r = np.asarray(x_r, dtype=np.float64)
    x_s = np.asarray(x_s, dtype=np.float64)
    corr = np.asarray(corr, dtype=bool)
    active = corr.any(axis=0)
    mask_r = corr.T.copy()
    mask_r[~active] = True
    map_r = map_s = None
    for lr, ls, nr, ns in zip(stack.rad_layers, stack.str_layers, stack.rad_norms, stack.str_norms):
        up_r, map_r = mha_oracle(x_r, x_s, x_s, *_mha_arrays(lr), mask_r)
        up_s, map_s = mha_oracle(x_s, x_r, x_r, *_mha_arrays(ls), corr)
        new_r = layer_norm_oracle(x_r + up_r, _np(nr.weight), _np(nr.bias))
        x_r = np.where(active[:, None], new_r, x_r)
        x_s = layer_norm_oracle(x_s + up_s, _np(ns.weight), _np(ns.bias))
    return x_r, x_s, map_r, map_s


# --- transitive kernel -------------------------------------------------------


def exp_clip(x):
    return np.exp(np.clip(np.asarray(x, dtype=np.float64), -CLAMP, CLAMP))


def variance_term_sum(n: int, d: int) -> float:
    """Term-by-term evaluation of the analytic score variance."""
    total = 0.0
    for i in range(n + 1):
        total += (d - 1) ** i * math.comb(n, i) * math.e ** (2 * n - i)
    return d ** (n - 1) * total - math.e**n * d ** (2 * (n - 1))


def transitive_oracle(ta, inputs, style_mask=None):
    """Factor-then-multiply evaluation of a transitive attention module,
    multiplying hops right-to-left (the module goes left-to-right)."""
    u_q, u_k, u_v = _np(ta.u_q), _np(ta.u_k), _np(ta.u_v)
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]
    n_hops = len(xs) - 1
    raw = []
    for i in range(n_hops):
        q = xs[i] @ u_q[i]
        k = xs[i + 1] @ u_k[i]
        raw.append(exp_clip(q) @ exp_clip(k).T)
    if style_mask is not None:
        raw[-1] = raw[-1] * np.asarray(style_mask, dtype=np.float64)
    beta_hat = raw[-1]
    for r in reversed(raw[:-1]):
        beta_hat = r @ beta_hat
    scale = math.sqrt(variance_term_sum(2 * n_hops, xs[0].shape[1]))
    beta = softmax_rows(beta_hat / scale)
    out = beta @ (xs[-1] @ u_v)
    v2 = variance_term_sum(2, xs[0].shape[1])
    factors = []
    for i, r in enumerate(raw):
        logits = r / v2
        if style_mask is not None and i == n_hops - 1:
            logits = np.where(np.asarray(style_mask, dtype=bool), logits, -np.inf)
        factors.append(softmax_rows(logits))
    return out, beta_hat, beta, raw, factors


def regrouped_chain(q_arrays, k_arrays):
    """Corrective-term regrouping: exp(Q1) [prod exp(K_i^T) exp(Q_i)] exp(K_N^T)."""
    qs = [exp_clip(q) for q in q_arrays]
    ks = [exp_clip(k) for k in k_arrays]
    inner = np.eye(qs[0].shape[1])
    for i in range(1, len(qs)):
        inner = inner @ (ks[i - 1].T @ qs[i])
    return qs[0] @ inner @ ks[-1].T


# --- metrics ------------------------------------------------------------------


def rmse_loop(a, b):
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            total += (a[i, j] - b[i, j]) ** 2
    return math.sqrt(total / (a.shape[0] * a.shape[1]))


def gaussian_window(size=11, sigma=1.5):
    half = size // 2
    g = np.array(
        [
            [math.exp(-(x * x + y * y) / (2 * sigma * sigma)) for x in range(-half, half + 1)]
            for y in range(-half, half + 1)
        ]
    )
    return g / g.sum()


def ssim_loop(a, b, k1=0.01, k2=0.03, data_range=1.0, size=11, sigma=1.5):
    """Windowed SSIM with explicit loops over valid window positions."""
    w = gaussian_window(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    h, wd = a.shape
    half = size // 2
    vals = []
    for cy in range(half, h - half):
        for cx in range(half, wd - half):
            pa = a[cy - half : cy + half + 1, cx - half : cx + half + 1]
            pb = b[cy - half : cy + half + 1, cx - half : cx + half + 1]
            mu_a = float((w * pa).sum())
            mu_b = float((w * pb).sum())
            var_a = float((w * pa * pa).sum()) - mu_a * mu_a
            var_b = float((w * pb * pb).sum()) - mu_b * mu_b
            cov = float((w * pa * pb).sum()) - mu_a * mu_b
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(vals))


def xent_loop(dists, target_ids):
    total = 0.0
    for step, tid in enumerate(target_ids):
        total += -math.log(dists[step][tid])
    return total / len(target_ids)
