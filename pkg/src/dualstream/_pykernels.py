"""Numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable, and as the
reference the compiled versions are tested against. Every function here has
an identically named, identically behaved counterpart in ``_ckernels.pyx``.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def _check_mask(mask):
    if not mask.any(axis=1).all():
        rows = np.flatnonzero(~mask.any(axis=1)).tolist()
        raise ValueError(f"attention mask leaves query rows {rows} with no keys")


def softmax_rows(x, mask=None):
    """Row softmax with max subtraction; masked-out entries get exactly 0."""
    x = np.asarray(x, dtype=np.float64)
    if mask is None:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.asarray(mask, dtype=bool)
        _check_mask(mask)
        z = np.where(mask, x, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def attention_forward(q, k, v, mask, heads, scale):
    """Multi-head scaled dot-product attention.

    ``q`` is n x d, ``k`` and ``v`` are m x d, ``mask`` is an n x m boolean
    array (True = key visible). Returns the n x d output and the
    heads x n x m attention weights.
    """
    n, d = q.shape
    m = k.shape[0]
    dh = d // heads
    mask = np.asarray(mask, dtype=bool)
    _check_mask(mask)
    out = np.empty((n, d))
    weights = np.empty((heads, n, m))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        s = (q[:, cols] @ k[:, cols].T) * scale
        w = softmax_rows(s, mask)
        weights[h] = w
        out[:, cols] = w @ v[:, cols]
    return out, weights


def attention_backward(q, k, v, weights, gout, heads, scale):
    n, d = q.shape
    dh = d // heads
    gq = np.empty_like(q)
    gk = np.empty_like(k)
    gv = np.empty_like(v)
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        w = weights[h]
        g = gout[:, cols]
        gv[:, cols] = w.T @ g
        gw = g @ v[:, cols].T
        gs = softmax_rows_backward(w, gw) * scale
        gq[:, cols] = gs @ k[:, cols]
        gk[:, cols] = gs.T @ q[:, cols]
    return gq, gk, gv


def layer_norm_forward(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0]


def layer_norm_backward(gy, xhat, inv_std, gain):
    d = xhat.shape[1]
    gxhat = gy * gain
    gx = (inv_std[:, None] / d) * (
        d * gxhat
        - gxhat.sum(axis=1, keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=1, keepdims=True)
    )
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def gelu_forward(x):
    """Tanh-approximated GELU."""
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))


def gelu_backward(x, gy):
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    dt = GELU_C * (1.0 + 3.0 * GELU_A * x * x) * (1.0 - t * t)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def lcs_length(a, b):
    """Longest common subsequence length of two integer sequences."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        return 0
    prev = np.zeros(b.size + 1, dtype=np.int64)
    for x in a:
        cur = np.zeros_like(prev)
        eq = b == x
        for j in range(1, b.size + 1):
            if eq[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return int(prev[-1])
