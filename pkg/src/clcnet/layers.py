"""Forward/backward pairs for the small set of layers the regressor needs.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns the input gradient
followed by parameter gradients.
"""

from __future__ import annotations

import numpy as np

from . import fastattn
from .mapping import as_float, softmax

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def sigmoid(x):
    x = as_float(x)
    # exp(-|x|) never overflows; both branches match the textbook forms exactly
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training: bool):
    """Standard batch norm over axis 0.

    In training mode the batch statistics are returned in the cache so the
    caller decides whether to fold them into the running averages.
    """
    if training:
        mean = x.mean(axis=0)
        var = x.var(axis=0)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    out = xhat * gamma + beta
    return out, (xhat, inv_std, gamma, training, mean, var)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, training, _, _ = cache
    dgamma = np.sum(dout * xhat, axis=0)
    dbeta = np.sum(dout, axis=0)
    dxhat = dout * gamma
    if training:
        b = dout.shape[0]
        dx = (inv_std / b) * (
            b * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
        )
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


def update_running_stats(running_mean, running_var, cache):
    _, _, _, training, mean, var = cache
    if not training:
        return running_mean, running_var
    new_mean = BN_MOMENTUM * running_mean + (1.0 - BN_MOMENTUM) * mean
    new_var = BN_MOMENTUM * running_var + (1.0 - BN_MOMENTUM) * var
    return new_mean, new_var


def glu_forward(h):
    half = h.shape[-1] // 2
    lin, gate = h[..., :half], h[..., half:]
    g = sigmoid(gate)
    return lin * g, (lin, g)


def glu_backward(dout, cache):
    lin, g = cache
    dlin = dout * g
    dgate = dout * lin * g * (1.0 - g)
    return np.concatenate([dlin, dgate], axis=-1)


def self_attention_forward(f, pos, we, be, wq, wk, wv, wo, need_grad: bool = True):
    """Single-head scaled dot-product attention over the positions of ``f``.

    ``f`` has shape ``(B, m)``. Each position ``i`` is embedded as
    ``f_i * we + be + pos_i``; the attended values are projected back to a
    scalar per position and added to the input. float64 input runs the fused
    kernels in :mod:`clcnet.fastattn`; other float types use the plain
    reference implementation.
    """
    if f.dtype == np.float64:
        out, cache = fastattn.self_attention_forward(f, pos, we, be, wq, wk, wv, wo, store=need_grad)
        return out, ("fast", cache)
    out, cache = self_attention_forward_reference(f, pos, we, be, wq, wk, wv, wo)
    return out, ("ref", cache)


def self_attention_backward(dout, cache, we, wq, wk, wv, wo):
    kind, inner = cache
    if kind == "fast":
        return fastattn.self_attention_backward(dout, inner, we, wq, wk, wv, wo)
    return self_attention_backward_reference(dout, inner, we, wq, wk, wv, wo)


def self_attention_forward_reference(f, pos, we, be, wq, wk, wv, wo):
    width = we.shape[0]
    scale = 1.0 / np.sqrt(width)
    e = f[:, :, None] * we + be + pos
    q = e @ wq
    k = e @ wk
    v = e @ wv
    att = softmax((q @ np.swapaxes(k, 1, 2)) * scale, axis=-1)
    o = att @ v
    out = f + o @ wo
    return out, (f, e, q, k, v, att, o, scale)


def self_attention_backward_reference(dout, cache, we, wq, wk, wv, wo):
    f, e, q, k, v, att, o, scale = cache
    dwo = np.einsum("bme,bm->e", o, dout)
    do = dout[:, :, None] * wo
    datt = do @ np.swapaxes(v, 1, 2)
    dv = np.swapaxes(att, 1, 2) @ do
    ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, 1, 2) @ q
    flat_e = e.reshape(-1, e.shape[-1])
    dwq = flat_e.T @ dq.reshape(-1, dq.shape[-1])
    dwk = flat_e.T @ dk.reshape(-1, dk.shape[-1])
    dwv = flat_e.T @ dv.reshape(-1, dv.shape[-1])
    de = dq @ wq.T + dk @ wk.T + dv @ wv.T
    dwe = np.einsum("bme,bm->e", de, f)
    dbe = de.sum(axis=(0, 1))
    dpos = de.sum(axis=0)
    df = dout + de @ we
    return df, {"pos": dpos, "we": dwe, "be": dbe, "wq": dwq, "wk": dwk, "wv": dwv, "wo": dwo}
