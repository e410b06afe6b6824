"""TabNet-style regressor turning a mapped vector into a confidence score.

Layout of one forward pass over a batch ``x`` of shape ``(B, m)``::

    x0 = batchnorm(x)
    (_, a_0) = feature_transformer_0(x0)              # initial split
    prior = 1
    for t in 1..n_steps:
        mask_t  = sparsemax(prior * batchnorm_t(a_{t-1} @ W_att_t))
        prior   = prior * (gamma - mask_t)
        (d_t, a_t) = feature_transformer_t(mask_t * x0)
    score = sigmoid(sum_t relu(d_t) @ w_head + b_head)

Every feature transformer starts with a self-attention block whose weights
are shared by all steps, followed by a shared dense/BN/GLU block and a
step-specific dense/BN/GLU block joined by a 1/sqrt(2) scaled residual.

Parameters live in a flat ``dict[str, ndarray]`` so the optimizer, the
gradient checker and the weights file all see the same names.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from .errors import NumericOverflowError
from .mapping import as_float
from .sparsemax import sparsemax, sparsemax_backward

SQRT_HALF = np.sqrt(0.5)


@dataclass(frozen=True)
class RegressorConfig:
    n_steps: int = 3
    n_d: int = 16
    n_a: int = 16
    gamma: float = 1.3
    attn_width: int = 8

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.n_d < 1 or self.n_a < 1:
            raise ValueError("n_d and n_a must be >= 1")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.attn_width < 1:
            raise ValueError("attn_width must be >= 1")

    @property
    def width(self) -> int:
        return self.n_d + self.n_a

    def to_dict(self) -> dict:
        return asdict(self)


SA_KEYS = ("pos", "we", "be", "wq", "wk", "wv", "wo")


def batchnorm_layers(cfg: RegressorConfig) -> list[str]:
    names = ["bn0"]
    for t in range(cfg.n_steps + 1):
        names += [f"ft{t}.shared_bn", f"ft{t}.spec_bn"]
    for t in range(1, cfg.n_steps + 1):
        names.append(f"att{t}.bn")
    return names


def init_regressor(cfg: RegressorConfig, m: int, rng=None):
    """Fresh ``(params, state)`` for an ``m``-feature input."""
    rng = np.random.default_rng(rng)
    d, e = cfg.width, cfg.attn_width

    def glorot(fan_in, fan_out, shape=None):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))

    params: dict[str, np.ndarray] = {}
    params["bn0.gamma"] = np.ones(m)
    params["bn0.beta"] = np.zeros(m)

    params["sa.pos"] = rng.normal(0.0, 0.1, size=(m, e))
    params["sa.we"] = rng.normal(0.0, 1.0, size=e)
    params["sa.be"] = np.zeros(e)
    params["sa.wq"] = glorot(e, e)
    params["sa.wk"] = glorot(e, e)
    params["sa.wv"] = glorot(e, e)
    params["sa.wo"] = rng.normal(0.0, 0.1, size=e)

    params["ft.shared.w"] = glorot(m, 2 * d)
    for t in range(cfg.n_steps + 1):
        params[f"ft{t}.shared_bn.gamma"] = np.ones(2 * d)
        params[f"ft{t}.shared_bn.beta"] = np.zeros(2 * d)
        params[f"ft{t}.spec.w"] = glorot(d, 2 * d)
        params[f"ft{t}.spec_bn.gamma"] = np.ones(2 * d)
        params[f"ft{t}.spec_bn.beta"] = np.zeros(2 * d)
    for t in range(1, cfg.n_steps + 1):
        params[f"att{t}.w"] = glorot(cfg.n_a, m)
        params[f"att{t}.bn.gamma"] = np.ones(m)
        params[f"att{t}.bn.beta"] = np.zeros(m)

    params["head.w"] = glorot(cfg.n_d, 1, shape=cfg.n_d)
    params["head.b"] = np.zeros(1)

    state = {}
    for name in batchnorm_layers(cfg):
        size = params[f"{name}.gamma"].shape[0]
        state[f"{name}.mean"] = np.zeros(size)
        state[f"{name}.var"] = np.ones(size)
    return params, state


# ---------------------------------------------------------------------------
# building blocks


def _bn(x, name, params, state, training):
    return layers.batchnorm_forward(
        x,
        params[f"{name}.gamma"],
        params[f"{name}.beta"],
        state[f"{name}.mean"],
        state[f"{name}.var"],
        training,
    )


def _sa_weights(params):
    return [params[f"sa.{k}"] for k in SA_KEYS]


def shared_self_attention(f, params):
    """Apply the step-shared self-attention block to ``(B, m)`` or ``(m,)`` features."""
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    out, _ = layers.self_attention_forward(np.atleast_2d(f), *_sa_weights(params), need_grad=False)
    return out[0] if single else out


def _feature_transformer_forward(x, t, params, state, training, need_grad=True):
    sa_out, sa_cache = layers.self_attention_forward(x, *_sa_weights(params), need_grad=need_grad)
    h1 = sa_out @ params["ft.shared.w"]
    b1, bn1_cache = _bn(h1, f"ft{t}.shared_bn", params, state, training)
    g1, glu1_cache = layers.glu_forward(b1)
    h2 = g1 @ params[f"ft{t}.spec.w"]
    b2, bn2_cache = _bn(h2, f"ft{t}.spec_bn", params, state, training)
    g2, glu2_cache = layers.glu_forward(b2)
    out = (g1 + g2) * SQRT_HALF
    cache = (x, sa_out, sa_cache, bn1_cache, glu1_cache, g1, bn2_cache, glu2_cache)
    return out, cache


def _feature_transformer_backward(dout, t, cache, params, grads):
    x, sa_out, sa_cache, bn1_cache, glu1_cache, g1, bn2_cache, glu2_cache = cache
    dsum = dout * SQRT_HALF
    db2 = layers.glu_backward(dsum, glu2_cache)
    dh2, dgam, dbet = layers.batchnorm_backward(db2, bn2_cache)
    grads[f"ft{t}.spec_bn.gamma"] += dgam
    grads[f"ft{t}.spec_bn.beta"] += dbet
    grads[f"ft{t}.spec.w"] += g1.T @ dh2
    dg1 = dsum + dh2 @ params[f"ft{t}.spec.w"].T
    db1 = layers.glu_backward(dg1, glu1_cache)
    dh1, dgam, dbet = layers.batchnorm_backward(db1, bn1_cache)
    grads[f"ft{t}.shared_bn.gamma"] += dgam
    grads[f"ft{t}.shared_bn.beta"] += dbet
    grads["ft.shared.w"] += sa_out.T @ dh1
    dsa = dh1 @ params["ft.shared.w"].T
    dx, sa_grads = layers.self_attention_backward(
        dsa, sa_cache, params["sa.we"], params["sa.wq"], params["sa.wk"], params["sa.wv"], params["sa.wo"]
    )
    for k, g in sa_grads.items():
        grads[f"sa.{k}"] += g
    return dx


def feature_transformer(masked, t, params, state, cfg: RegressorConfig):
    """Inference-mode feature transformer for step ``t``; returns ``(d, a)``."""
    masked = np.asarray(masked, dtype=np.float64)
    single = masked.ndim == 1
    out, _ = _feature_transformer_forward(np.atleast_2d(masked), t, params, state, False, need_grad=False)
    d, a = out[:, : cfg.n_d], out[:, cfg.n_d :]
    return (d[0], a[0]) if single else (d, a)


def attentive_transformer(a_feat, prior, t, params, state, cfg: RegressorConfig):
    """Inference-mode attentive transformer for step ``t``; returns ``(mask, next_prior)``."""
    a_feat = np.atleast_2d(np.asarray(a_feat, dtype=np.float64))
    prior = np.asarray(prior, dtype=np.float64)
    single = prior.ndim == 1
    logits, _ = _bn(a_feat @ params[f"att{t}.w"], f"att{t}.bn", params, state, False)
    mask = sparsemax(np.atleast_2d(prior) * logits)
    next_prior = np.atleast_2d(prior) * (cfg.gamma - mask)
    return (mask[0], next_prior[0]) if single else (mask, next_prior)


# ---------------------------------------------------------------------------
# full pass


@dataclass
class StepTrace:
    masks: list
    decisions: list
    priors: list


def regressor_forward_batch(x, params, state, cfg: RegressorConfig, training: bool = False, need_grad: bool = True):
    """Score a ``(B, m)`` batch. Returns ``(scores, cache)``; ``cache['trace']`` holds a StepTrace.

    ``need_grad=False`` skips storing attention matrices (the cache then
    cannot be passed to :func:`regressor_backward`).
    """
    x = as_float(x)
    x0, bn0_cache = _bn(x, "bn0", params, state, training)
    out0, ft0_cache = _feature_transformer_forward(x0, 0, params, state, training, need_grad)
    a_prev = out0[:, cfg.n_d :]
    prior = np.ones_like(x0)
    agg = np.zeros((x.shape[0], cfg.n_d), dtype=x0.dtype)
    steps = []
    trace = StepTrace([], [], [prior])
    for t in range(1, cfg.n_steps + 1):
        h = a_prev @ params[f"att{t}.w"]
        g, bn_cache = _bn(h, f"att{t}.bn", params, state, training)
        mask = sparsemax(prior * g)
        masked = mask * x0
        out, ft_cache = _feature_transformer_forward(masked, t, params, state, training, need_grad)
        d_pre = out[:, : cfg.n_d]
        d = np.maximum(d_pre, 0.0)
        agg = agg + d
        steps.append((a_prev, prior, g, bn_cache, mask, ft_cache, d_pre))
        prior = prior * (cfg.gamma - mask)
        a_prev = out[:, cfg.n_d :]
        trace.masks.append(mask)
        trace.decisions.append(d)
        trace.priors.append(prior)
    logit = agg @ params["head.w"] + params["head.b"][0]
    if not np.all(np.isfinite(logit)):
        raise NumericOverflowError("regressor produced a non-finite logit")
    y = layers.sigmoid(logit)
    bn_caches = {"bn0": bn0_cache, "ft0.shared_bn": ft0_cache[3], "ft0.spec_bn": ft0_cache[6]}
    for t, step in enumerate(steps, start=1):
        bn_caches[f"att{t}.bn"] = step[3]
        bn_caches[f"ft{t}.shared_bn"] = step[5][3]
        bn_caches[f"ft{t}.spec_bn"] = step[5][6]
    cache = {
        "x0": x0,
        "bn0": bn0_cache,
        "ft0": ft0_cache,
        "steps": steps,
        "agg": agg,
        "y": y,
        "bn": bn_caches,
        "trace": trace,
    }
    return y, cache


def regressor_backward(dy, cache, params, cfg: RegressorConfig):
    """Backpropagate ``dL/dscore``. Returns ``(dL/dx, grads)``."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    y = cache["y"]
    dlogit = dy * y * (1.0 - y)
    grads["head.w"] += cache["agg"].T @ dlogit
    grads["head.b"] += np.sum(dlogit)
    dagg = np.outer(dlogit, params["head.w"])
    x0 = cache["x0"]
    dx0 = np.zeros_like(x0)
    da_next = np.zeros((x0.shape[0], cfg.n_a))
    dprior_next = np.zeros_like(x0)
    for t in range(cfg.n_steps, 0, -1):
        a_prev, prior, g, bn_cache, mask, ft_cache, d_pre = cache["steps"][t - 1]
        dd = dagg * (d_pre > 0)
        dmasked = _feature_transformer_backward(
            np.concatenate([dd, da_next], axis=1), t, ft_cache, params, grads
        )
        dx0 += dmasked * mask
        dmask = dmasked * x0 - dprior_next * prior
        dprior = dprior_next * (cfg.gamma - mask)
        dz = sparsemax_backward(dmask, mask)
        dprior += dz * g
        dg = dz * prior
        dh, dgam, dbet = layers.batchnorm_backward(dg, bn_cache)
        grads[f"att{t}.bn.gamma"] += dgam
        grads[f"att{t}.bn.beta"] += dbet
        grads[f"att{t}.w"] += a_prev.T @ dh
        da_next = dh @ params[f"att{t}.w"].T
        dprior_next = dprior
    dout0 = np.concatenate([np.zeros((x0.shape[0], cfg.n_d)), da_next], axis=1)
    dx0 += _feature_transformer_backward(dout0, 0, cache["ft0"], params, grads)
    dx, dgam, dbet = layers.batchnorm_backward(dx0, cache["bn0"])
    grads["bn0.gamma"] += dgam
    grads["bn0.beta"] += dbet
    return dx, grads


def fold_running_stats(state, cache):
    """Return a new state with this batch's statistics folded into the running averages."""
    new_state = dict(state)
    for name, bn_cache in cache["bn"].items():
        mean, var = layers.update_running_stats(state[f"{name}.mean"], state[f"{name}.var"], bn_cache)
        new_state[f"{name}.mean"] = mean
        new_state[f"{name}.var"] = var
    return new_state


def regressor_forward(v, params, state, cfg: RegressorConfig, return_trace: bool = False):
    """Inference-mode score for a single mapped vector."""
    y, cache = regressor_forward_batch(np.atleast_2d(v), params, state, cfg, training=False, need_grad=False)
    if return_trace:
        trace = cache["trace"]
        single = StepTrace(
            [mk[0] for mk in trace.masks], [d[0] for d in trace.decisions], [p[0] for p in trace.priors]
        )
        return float(y[0]), single
    return float(y[0])
