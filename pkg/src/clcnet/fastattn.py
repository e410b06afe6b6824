"""Fused float64 kernels for the step-shared self-attention block.

Position ``i`` is embedded as ``e_i = f_i * we + c_i`` with ``c = be + pos``,
so queries, keys and values are affine in the scalar feature::

    q_i = f_i uq + Cq_i      uq = we Wq, Cq = c Wq      (same for k, v)

and the attention logits split into batch-independent pieces::

    S_ij = f_i (alpha f_j + beta_j) + gamma_i f_j + Gamma_ij

Likewise the output projection collapses to ``r_j = rho f_j + w_j``, giving
``out_i = f_i + sum_j A_ij r_j``. The kernels below evaluate that form one
row at a time with the exponentials done by numpy in one vectorised call; the result is the same
function as :func:`clcnet.layers.self_attention_forward`.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _logits_kernel(f, t, gam, big_gam, att):
    # shifted logits S_ij - max_j S_ij, written into ``att``
    n_batch, m = f.shape
    for b in range(n_batch):
        for i in range(m):
            fi = f[b, i]
            gi = gam[i]
            top = -np.inf
            for j in range(m):
                s = fi * t[b, j] + gi * f[b, j] + big_gam[i, j]
                att[b, i, j] = s
                if s > top:
                    top = s
            for j in range(m):
                att[b, i, j] -= top


@njit(cache=True)
def _normalize_kernel(att, r, out):
    n_batch, m = r.shape
    for b in range(n_batch):
        for i in range(m):
            total = 0.0
            acc = 0.0
            for j in range(m):
                e = att[b, i, j]
                total += e
                acc += e * r[b, j]
            inv = 1.0 / total
            out[b, i] = acc * inv
            for j in range(m):
                att[b, i, j] *= inv


@njit(cache=True)
def _backward_kernel(f, t, gam, att, r, o, dout, dr, dt, df, dgam, dbig_gam):
    n_batch, m = f.shape
    for b in range(n_batch):
        for i in range(m):
            g = dout[b, i]
            if g == 0.0:
                continue
            fi = f[b, i]
            gi = gam[i]
            oi = o[b, i]
            acc_dgam = 0.0
            acc_df = 0.0
            for j in range(m):
                a = att[b, i, j]
                dr[b, j] += a * g
                ds = a * g * (r[b, j] - oi)
                dbig_gam[i, j] += ds
                acc_dgam += ds * f[b, j]
                df[b, j] += ds * gi
                dt[b, j] += ds * fi
                acc_df += ds * t[b, j]
            dgam[i] += acc_dgam
            df[b, i] += acc_df


def _pieces(pos, we, be, wq, wk, wv, wo):
    scale = 1.0 / np.sqrt(we.shape[0])
    c = be + pos
    uq, uk, uv = we @ wq, we @ wk, we @ wv
    cq, ck, cv = c @ wq, c @ wk, c @ wv
    return {
        "scale": scale, "c": c, "uq": uq, "uk": uk, "uv": uv, "cq": cq, "ck": ck, "cv": cv,
        "alpha": scale * (uq @ uk),
        "beta": scale * (ck @ uq),
        "gamma": scale * (cq @ uk),
        "Gamma": scale * (cq @ ck.T),
        "rho": uv @ wo,
        "w": cv @ wo,
    }


def self_attention_forward(f, pos, we, be, wq, wk, wv, wo, store: bool = True):
    f = np.ascontiguousarray(f, dtype=np.float64)
    pc = _pieces(pos, we, be, wq, wk, wv, wo)
    t = pc["alpha"] * f + pc["beta"]
    r = pc["rho"] * f + pc["w"]
    att = np.empty(f.shape + (f.shape[1],))
    o = np.empty_like(f)
    _logits_kernel(f, t, np.ascontiguousarray(pc["gamma"]), np.ascontiguousarray(pc["Gamma"]), att)
    np.exp(att, out=att)  # numpy's vectorised exp beats a scalar loop
    _normalize_kernel(att, r, o)
    if not store:
        att = None
    return f + o, (f, t, r, o, att, pc)


def self_attention_backward(dout, cache, we, wq, wk, wv, wo):
    f, t, r, o, att, pc = cache
    dout = np.ascontiguousarray(dout, dtype=np.float64)
    m = f.shape[1]
    dr = np.zeros_like(f)
    dt = np.zeros_like(f)
    df = dout.copy()
    dgam = np.zeros(m)
    dbig_gam = np.zeros((m, m))
    _backward_kernel(f, t, pc["gamma"], att, r, o, dout, dr, dt, df, dgam, dbig_gam)

    # t = alpha f + beta, r = rho f + w
    dalpha = np.sum(dt * f)
    dbeta = dt.sum(axis=0)
    df += pc["alpha"] * dt + pc["rho"] * dr
    drho = np.sum(dr * f)
    dw = dr.sum(axis=0)

    s = pc["scale"]
    uq, uk, uv, cq, ck, cv, c = pc["uq"], pc["uk"], pc["uv"], pc["cq"], pc["ck"], pc["cv"], pc["c"]
    duq = s * (dalpha * uk + ck.T @ dbeta)
    duk = s * (dalpha * uq + cq.T @ dgam)
    dck = s * (np.outer(dbeta, uq) + dbig_gam.T @ cq)
    dcq = s * (np.outer(dgam, uk) + dbig_gam @ ck)
    duv = drho * wo
    dwo = drho * uv + cv.T @ dw
    dcv = np.outer(dw, wo)
    dwq = np.outer(we, duq) + c.T @ dcq
    dwk = np.outer(we, duk) + c.T @ dck
    dwv = np.outer(we, duv) + c.T @ dcv
    dwe = wq @ duq + wk @ duk + wv @ duv
    dc = dcq @ wq.T + dck @ wk.T + dcv @ wv.T
    grads = {"pos": dc, "we": dwe, "be": dc.sum(axis=0), "wq": dwq, "wk": dwk, "wv": dwv, "wo": dwo}
    return df, grads
