"""Independent reference implementations used by the tests.

Everything here is written with explicit Python loops over pixels and
neighbours and imports nothing from the package, so an agreement between
these and the vectorised code is a real cross-check.
"""

import math

import numpy as np


def offsets(k):
    r = k // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]


def kernel_at(raw, y, x, k):
    """Normalised ``(weights, centre)`` for pixel ``(y, x)`` from a ``k_max`` raw field."""
    H, W, M = raw.shape
    k_max = int(round(math.sqrt(M + 1)))
    big = offsets(k_max)
    r = k // 2
    ws = []
    for dy, dx in offsets(k):
        slot = big.index((dy, dx))
        inside = 0 <= y + dy < H and 0 <= x + dx < W
        ws.append(float(raw[y, x, slot]) if inside else 0.0)
    total = sum(abs(v) for v in ws)
    if total == 0.0:
        return [0.0] * len(ws), 1.0
    ws = [v / total for v in ws]
    return ws, 1.0 - sum(ws)


def step(h_t, h0, raw, k):
    H, W = h_t.shape
    out = np.zeros_like(h_t)
    for y in range(H):
        for x in range(W):
            ws, c = kernel_at(raw, y, x, k)
            v = c * h0[y, x]
            for w, (dy, dx) in zip(ws, offsets(k)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < H and 0 <= xx < W:
                    v += w * h_t[yy, xx]
            out[y, x] = v
    return out


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def run_cspn(h0, raw, k, n, values=None, mask=None):
    """Vanilla propagation with hard replacement after every step (2-D grids)."""
    h = h0.copy()
    for _ in range(n):
        h = step(h, h0, raw, k)
        if mask is not None:
            h = np.where(mask, values, h)
    return h


def run_ca(h0, raw, alpha_logits, lambda_logits, kernels, checkpoints,
           values=None, mask=None, conf_logits=None):
    """Context-aware propagation that stores every snapshot and combines at the end."""
    H, W = h0.shape
    N = checkpoints[-1]

    def guided(g):
        if mask is None:
            return g
        out = g.copy()
        for y in range(H):
            for x in range(W):
                if mask[y, x]:
                    c = sigmoid(conf_logits[y, x])
                    out[y, x] = (1 - c) * g[y, x] + c * values[y, x]
        return out

    snaps = []
    for k in kernels:
        h = h0.copy()
        per_k = {}
        for s in range(1, N + 1):
            h = guided(step(h, h0, raw, k))
            if s in checkpoints:
                per_k[s] = h.copy()
        snaps.append(per_k)
    out = np.zeros_like(h0)
    for y in range(H):
        for x in range(W):
            sa = [sigmoid(a) for a in alpha_logits[y, x]]
            for ki in range(len(kernels)):
                sl = [sigmoid(v) for v in lambda_logits[y, x, ki]]
                for ti, t in enumerate(checkpoints):
                    out[y, x] += (sa[ki] / sum(sa)) * (sl[ti] / sum(sl)) * snaps[ki][t][y, x]
    return guided(out)
