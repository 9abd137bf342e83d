"""GRU cell, Gaussian head and NLL loss with hand-written backprop.

Gate layout follows the common convention, columns ordered [reset, update, candidate]:

    r = sigmoid(x Wx_r + bx_r + h Wh_r + bh_r)
    z = sigmoid(x Wx_z + bx_z + h Wh_z + bh_z)
    n = tanh(x Wx_n + bx_n + r * (h Wh_n + bh_n))
    h' = (1 - z) * n + z * h

The head maps h' to ``[mean (n_out), z_sigma (n_out)]`` and
``sigma = max(softplus(z_sigma), SIGMA_MIN)``.
"""
from __future__ import annotations

import math

import numba as nb
import numpy as np

SIGMA_MIN = 1e-6
PARAM_NAMES = ("Wx", "Wh", "bx", "bh", "Wo", "bo")


def init_params(d_in: int, d_h: int, n_out: int, rng: np.random.Generator) -> dict:
    """Uniform(+-1/sqrt(d_h)) weights, zero biases."""
    if min(d_in, d_h, n_out) < 1:
        raise ValueError("network widths must be >= 1")
    k = 1.0 / np.sqrt(d_h)
    return {
        "Wx": rng.uniform(-k, k, (d_in, 3 * d_h)),
        "Wh": rng.uniform(-k, k, (d_h, 3 * d_h)),
        "bx": np.zeros(3 * d_h),
        "bh": np.zeros(3 * d_h),
        "Wo": rng.uniform(-k, k, (d_h, 2 * n_out)),
        "bo": np.zeros(2 * n_out),
    }


def zeros_like(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def gru_forward(params: dict, x, h_prev):
    """One GRU step for a single sample or a batch (leading axis)."""
    H = params["Wh"].shape[0]
    gx = x @ params["Wx"] + params["bx"]
    gh = h_prev @ params["Wh"] + params["bh"]
    r = sigmoid(gx[..., :H] + gh[..., :H])
    z = sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
    n = np.tanh(gx[..., 2 * H:] + r * gh[..., 2 * H:])
    return (1.0 - z) * n + z * h_prev


@nb.njit(cache=True)
def _step_kernel(Wx, Wh, bx, bh, Wo, bo, x, h):
    # fused single-sample cell + head; the numpy path pays more in call overhead than in flops
    H = h.size
    gx = bx.copy()
    gh = bh.copy()
    for i in range(x.size):
        xi = x[i]
        for j in range(3 * H):
            gx[j] += xi * Wx[i, j]
    for i in range(H):
        hi = h[i]
        for j in range(3 * H):
            gh[j] += hi * Wh[i, j]
    hn = np.empty(H)
    for j in range(H):
        r = 0.5 * (1.0 + math.tanh(0.5 * (gx[j] + gh[j])))
        z = 0.5 * (1.0 + math.tanh(0.5 * (gx[H + j] + gh[H + j])))
        n = math.tanh(gx[2 * H + j] + r * gh[2 * H + j])
        hn[j] = (1.0 - z) * n + z * h[j]
    out = bo.copy()
    for i in range(H):
        hi = hn[i]
        for j in range(out.size):
            out[j] += hi * Wo[i, j]
    k = out.size // 2
    sig = np.empty(k)
    for j in range(k):
        v = out[k + j]
        sp = max(v, 0.0) + math.log1p(math.exp(-abs(v)))
        sig[j] = max(sp, SIGMA_MIN)
    return hn, out[:k].copy(), sig


def gru_step(params: dict, x, h):
    """Streaming form of ``gru_forward`` + ``head_forward`` for one 1-D sample: (h', mean, sigma)."""
    return _step_kernel(params["Wx"], params["Wh"], params["bx"], params["bh"], params["Wo"], params["bo"],
                        np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(h, dtype=np.float64))


def head_forward(params: dict, h):
    """Mean and clipped softplus standard deviation."""
    out = h @ params["Wo"] + params["bo"]
    k = out.shape[-1] // 2
    return out[..., :k], np.maximum(softplus(out[..., k:]), SIGMA_MIN)


def gaussian_nll(mean, sigma, target, mask=None) -> float:
    """``ln sigma^2 + (mean - target)^2 / sigma^2`` summed over outputs, averaged over samples."""
    per = (np.log(sigma ** 2) + (mean - target) ** 2 / sigma ** 2).sum(axis=-1)
    if mask is None:
        return float(per.mean())
    return float((per * mask).sum() / max(mask.sum(), 1))


def sequence_forward(params: dict, X, h0):
    """Unroll over ``X`` of shape (B, T, d_in). Returns means, sigmas (B, T, k), last h and a cache."""
    B, T, _ = X.shape
    H = params["Wh"].shape[0]
    GX = X @ params["Wx"] + params["bx"]
    hs = np.empty((B, T + 1, H))
    hs[:, 0] = h0
    rs = np.empty((B, T, H))
    zs = np.empty((B, T, H))
    ns = np.empty((B, T, H))
    ghn = np.empty((B, T, H))
    Wh, bh = params["Wh"], params["bh"]
    for t in range(T):
        h = hs[:, t]
        gh = h @ Wh + bh
        gx = GX[:, t]
        r = sigmoid(gx[:, :H] + gh[:, :H])
        z = sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
        hs[:, t + 1] = (1.0 - z) * n + z * h
        rs[:, t], zs[:, t], ns[:, t], ghn[:, t] = r, z, n, gh[:, 2 * H:]
    out = hs[:, 1:] @ params["Wo"] + params["bo"]
    k = out.shape[-1] // 2
    zsig = out[..., k:]
    sp = softplus(zsig)
    sigma = np.maximum(sp, SIGMA_MIN)
    cache = (X, hs, rs, zs, ns, ghn, zsig, sp)
    return out[..., :k], sigma, hs[:, -1].copy(), cache


def nll_output_grads(mean, sigma, target, mask=None):
    """Loss and its gradient w.r.t. mean and sigma (mean over unmasked samples)."""
    B, T, _ = mean.shape
    w = np.ones((B, T)) if mask is None else mask.astype(float)
    cnt = max(w.sum(), 1.0)
    e = mean - target
    s2 = sigma ** 2
    loss = float(((np.log(s2) + e ** 2 / s2).sum(-1) * w).sum() / cnt)
    ww = (w / cnt)[..., None]
    dmean = 2.0 * e / s2 * ww
    dsig = (2.0 / sigma - 2.0 * e ** 2 / (s2 * sigma)) * ww
    return loss, dmean, dsig


def sequence_backward(params: dict, cache, dmean, dsig, dh_last=None) -> dict:
    """Backprop through head and GRU for one unrolled window (no gradient into h0)."""
    X, hs, rs, zs, ns, ghn, zsig, sp = cache
    B, T, _ = X.shape
    H = params["Wh"].shape[0]
    dz_sig = dsig * sigmoid(zsig) * (sp > SIGMA_MIN)
    dout = np.concatenate([dmean, dz_sig], axis=-1)
    grads = zeros_like(params)
    hT = hs[:, 1:]
    grads["Wo"] = hT.reshape(-1, H).T @ dout.reshape(-1, dout.shape[-1])
    grads["bo"] = dout.sum(axis=(0, 1))
    dH = dout @ params["Wo"].T  # (B, T, H) direct contributions
    dGX = np.empty((B, T, 3 * H))
    dGH = np.empty((B, T, 3 * H))
    Wh = params["Wh"]
    dh = np.zeros((B, H)) if dh_last is None else dh_last.copy()
    for t in range(T - 1, -1, -1):
        dh = dh + dH[:, t]
        r, z, n, h = rs[:, t], zs[:, t], ns[:, t], hs[:, t]
        dn = dh * (1.0 - z)
        dz = dh * (h - n)
        dh_prev = dh * z
        dan = dn * (1.0 - n * n)
        dr = dan * ghn[:, t]
        dar = dr * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dGX[:, t, :H] = dar
        dGX[:, t, H:2 * H] = daz
        dGX[:, t, 2 * H:] = dan
        dGH[:, t, :H] = dar
        dGH[:, t, H:2 * H] = daz
        dGH[:, t, 2 * H:] = dan * r
        dh = dh_prev + dGH[:, t] @ Wh.T
    grads["Wx"] = X.reshape(-1, X.shape[-1]).T @ dGX.reshape(-1, 3 * H)
    grads["bx"] = dGX.sum(axis=(0, 1))
    grads["Wh"] = hs[:, :-1].reshape(-1, H).T @ dGH.reshape(-1, 3 * H)
    grads["bh"] = dGH.sum(axis=(0, 1))
    return grads


def loss_and_grad(params: dict, X, Y, h0, mask=None):
    """NLL over one window and its parameter gradient; also returns the final hidden state."""
    mean, sigma, h_last, cache = sequence_forward(params, X, h0)
    loss, dmean, dsig = nll_output_grads(mean, sigma, Y, mask)
    return loss, sequence_backward(params, cache, dmean, dsig), h_last


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
