"""Transformer encoder with Gaussian-weighted absolute-score attention, in numpy.

The network maps a stacked feature sequence ``[B, T', in_dim]`` through a
pre-sequence projection (affine + GELU + sinusoidal positions), a stack of
pre-norm transformer layers (optionally densely connected) and small MLP
heads. Gradients are computed by hand: :func:`forward` records a tape of
intermediate values and :func:`backward` walks it in reverse.

Attention per head:

    S = Q K^T / sqrt(d_head)
    W = exp(-(i - j)^2 / (2 sigma^2)) * |S|
    A = softmax(W)   (padded keys masked)

``sigma`` is a trainable per-head parameter, clamped from below at 0.1.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

SIGMA_MIN = 0.1
LN_EPS = 1e-5
HEAD_NAMES = ("mag0", "doa", "mag1")
TASK_HEADS = {1: ("mag0", "doa"), 2: ("mag0", "mag1")}


@dataclass(frozen=True)
class ModelConfig:
    d_rate: int = 3
    d_model: int = 768
    n_layers: int = 3
    n_heads: int = 8
    ffn_dim: int = 2048
    head_hidden: int = 1024
    in_dim: int = 1920
    out_mag_dim: int = 960
    n_doa_classes: int = 72
    sigma_init: float = 10.0
    dense_variant: bool = False
    dense_ffn_dim: int = 1024
    dtype: str = "float32"

    def __post_init__(self):
        dims = (self.d_rate, self.d_model, self.n_layers, self.n_heads, self.ffn_dim,
                self.head_hidden, self.in_dim, self.out_mag_dim, self.n_doa_classes, self.dense_ffn_dim)
        if min(dims) <= 0:
            raise ValueError("all model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.sigma_init <= 0:
            raise ValueError("sigma_init must be positive")

    @property
    def layer_ffn_dim(self) -> int:
        return self.dense_ffn_dim if self.dense_variant else self.ffn_dim

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(d_model=32, n_layers=2, n_heads=2, ffn_dim=48, head_hidden=24, in_dim=24,
                    out_mag_dim=12, n_doa_classes=72, dense_ffn_dim=40, dtype="float64")
        base.update(kw)
        return cls(**base)

    @classmethod
    def small(cls, **kw) -> "ModelConfig":
        base = dict(d_model=128, n_layers=2, n_heads=4, ffn_dim=512, head_hidden=256, dense_ffn_dim=256)
        base.update(kw)
        return cls(**base)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, f = cfg.d_model, cfg.layer_ffn_dim
    shapes = {"preseq.w": (cfg.in_dim, d), "preseq.b": (d,)}
    for l in range(cfg.n_layers):
        if cfg.dense_variant:
            shapes[f"dense.{l}.w"] = ((l + 1) * d, d)
            shapes[f"dense.{l}.b"] = (d,)
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "attn.sigma": (cfg.n_heads,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ffn.w1": (d, f), p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d), p + "ffn.b2": (d,),
        })
    outs = {"mag0": cfg.out_mag_dim, "doa": cfg.n_doa_classes, "mag1": cfg.out_mag_dim}
    for h in HEAD_NAMES:
        shapes.update({
            f"head.{h}.w1": (d, cfg.head_hidden), f"head.{h}.b1": (cfg.head_hidden,),
            f"head.{h}.w2": (cfg.head_hidden, outs[h]), f"head.{h}.b2": (outs[h],),
        })
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Affine weights ~ N(0, 0.02^2), biases 0, layer-norm gains 1, sigma = sigma_init."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "sigma":
            params[name] = np.full(shape, cfg.sigma_init, dtype=dt)
        elif leaf == "g":
            params[name] = np.ones(shape, dtype=dt)
        elif leaf.startswith("w"):
            params[name] = (0.02 * rng.standard_normal(shape)).astype(dt)
        else:
            params[name] = np.zeros(shape, dtype=dt)
    return params


def count_params(params_or_cfg) -> int:
    if isinstance(params_or_cfg, ModelConfig):
        return int(sum(np.prod(s) for s in param_shapes(params_or_cfg).values()))
    return int(sum(p.size for p in params_or_cfg.values()))


def sinusoidal_pe(n_frames: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_frames, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / (10000.0 ** (i2 / d_model))
    pe = np.zeros((n_frames, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : d_model // 2]
    return pe


def gaussian_mask(n_frames: int, sigma) -> np.ndarray:
    """``[H, T, T]`` distance weights ``exp(-(i-j)^2 / (2 sigma_h^2))``."""
    sigma = np.maximum(np.atleast_1d(np.asarray(sigma, dtype=np.float64)), SIGMA_MIN)
    idx = np.arange(n_frames)
    d2 = (idx[:, None] - idx[None, :]).astype(np.float64) ** 2
    return np.exp(-d2[None] / (2.0 * sigma[:, None, None] ** 2))


# --------------------------------------------------------------------------- primitives


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def _linear(x, w, b):
    return x @ w + b


def _linear_back(dy, x, w, grads, wname, bname):
    grads[wname] += x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    grads[bname] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ w.T


def layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, cache, g, grads, gname, bname):
    xhat, rstd = cache
    grads[gname] += np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    grads[bname] += np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    return rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))


def _split_heads(x, n_heads):
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


# --------------------------------------------------------------------------- attention


def _attention_fwd(x, p, prefix, n_heads, mask, gaussian=True):
    B, T, d = x.shape
    dh = d // n_heads
    q = _split_heads(_linear(x, p[prefix + "wq"], p[prefix + "bq"]), n_heads)
    k = _split_heads(_linear(x, p[prefix + "wk"], p[prefix + "bk"]), n_heads)
    v = _split_heads(_linear(x, p[prefix + "wv"], p[prefix + "bv"]), n_heads)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
    sigma = p[prefix + "sigma"]
    G = gaussian_mask(T, sigma).astype(x.dtype) if gaussian else np.ones((n_heads, T, T), dtype=x.dtype)
    w = G[None] * np.abs(scores)
    if mask is not None:
        w = np.where(mask[:, None, None, :], w, -np.inf)
    w = w - w.max(axis=-1, keepdims=True)
    e = np.exp(w)
    attn = e / e.sum(axis=-1, keepdims=True)
    z = _merge_heads(attn @ v)
    out = _linear(z, p[prefix + "wo"], p[prefix + "bo"])
    cache = (x, q, k, v, scores, G, attn, z, gaussian)
    return out, cache


def _attention_back(dout, cache, p, prefix, n_heads, grads):
    x, q, k, v, scores, G, attn, z, gaussian = cache
    B, T, d = x.shape
    dh = d // n_heads
    dz = _linear_back(dout, z, p[prefix + "wo"], grads, prefix + "wo", prefix + "bo")
    dz = _split_heads(dz, n_heads)
    dattn = dz @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dz
    dw = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    dscores = dw * G[None] * np.sign(scores)
    if gaussian:
        dG = np.sum(dw * np.abs(scores), axis=0)  # [H, T, T]
        sigma = p[prefix + "sigma"]
        s_eff = np.maximum(sigma, SIGMA_MIN)
        idx = np.arange(T)
        d2 = (idx[:, None] - idx[None, :]).astype(x.dtype) ** 2
        dsig = np.sum(dG * G * d2[None], axis=(1, 2)) / s_eff**3
        grads[prefix + "sigma"] += np.where(sigma >= SIGMA_MIN, dsig, 0.0)
    dq = dscores @ k / np.sqrt(dh)
    dk = dscores.transpose(0, 1, 3, 2) @ q / np.sqrt(dh)
    dx = _linear_back(_merge_heads(dq), x, p[prefix + "wq"], grads, prefix + "wq", prefix + "bq")
    dx += _linear_back(_merge_heads(dk), x, p[prefix + "wk"], grads, prefix + "wk", prefix + "bk")
    dx += _linear_back(_merge_heads(dv), x, p[prefix + "wv"], grads, prefix + "wv", prefix + "bv")
    return dx


def tgsa_attention(x, params, prefix: str, n_heads: int, mask=None, gaussian: bool = True, return_weights: bool = False):
    """Gaussian-weighted attention of one layer on ``[T, d]`` or ``[B, T, d]`` input."""
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    out, cache = _attention_fwd(xb, params, prefix, n_heads, mask, gaussian)
    out = out[0] if squeeze else out
    if return_weights:
        return out, (cache[6][0] if squeeze else cache[6])
    return out


# --------------------------------------------------------------------------- layers


def _layer_fwd(x, p, l, n_heads, mask):
    pre = f"layers.{l}."
    n1, ln1 = layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    a, att = _attention_fwd(n1, p, pre + "attn.", n_heads, mask)
    x1 = x + a
    n2, ln2 = layernorm(x1, p[pre + "ln2.g"], p[pre + "ln2.b"])
    h = _linear(n2, p[pre + "ffn.w1"], p[pre + "ffn.b1"])
    f = _linear(gelu(h), p[pre + "ffn.w2"], p[pre + "ffn.b2"])
    return x1 + f, (ln1, att, n2, ln2, h)


def _layer_back(dout, cache, p, l, n_heads, grads):
    pre = f"layers.{l}."
    ln1, att, n2, ln2, h = cache
    dgh = _linear_back(dout, gelu(h), p[pre + "ffn.w2"], grads, pre + "ffn.w2", pre + "ffn.b2")
    dn2 = _linear_back(dgh * gelu_grad(h), n2, p[pre + "ffn.w1"], grads, pre + "ffn.w1", pre + "ffn.b1")
    dx1 = dout + _layernorm_back(dn2, ln2, p[pre + "ln2.g"], grads, pre + "ln2.g", pre + "ln2.b")
    dn1 = _attention_back(dx1, att, p, pre + "attn.", n_heads, grads)
    return dx1 + _layernorm_back(dn1, ln1, p[pre + "ln1.g"], grads, pre + "ln1.g", pre + "ln1.b")


def transformer_layer(x, params, layer: int, n_heads: int, mask=None):
    squeeze = x.ndim == 2
    out, _ = _layer_fwd(x[None] if squeeze else x, params, layer, n_heads, mask)
    return out[0] if squeeze else out


def _stack_fwd(h0, p, cfg, mask):
    hs = [h0]
    caches = []
    for l in range(cfg.n_layers):
        if cfg.dense_variant:
            cat = np.concatenate(hs, axis=-1)
            inp = _linear(cat, p[f"dense.{l}.w"], p[f"dense.{l}.b"])
        else:
            cat, inp = None, hs[-1]
        out, c = _layer_fwd(inp, p, l, cfg.n_heads, mask)
        caches.append((cat, c))
        hs.append(out)
    return hs[-1], caches


def _stack_back(dout, caches, p, cfg, grads):
    d = cfg.d_model
    # gradient accumulators for every stack output H_0..H_L
    dh = [None] * (cfg.n_layers + 1)
    dh[-1] = dout
    for l in reversed(range(cfg.n_layers)):
        cat, c = caches[l]
        dinp = _layer_back(dh[l + 1], c, p, l, cfg.n_heads, grads)
        if cfg.dense_variant:
            dcat = _linear_back(dinp, cat, p[f"dense.{l}.w"], grads, f"dense.{l}.w", f"dense.{l}.b")
            for j in range(l + 1):
                part = dcat[..., j * d : (j + 1) * d]
                dh[j] = part if dh[j] is None else dh[j] + part
        else:
            dh[l] = dinp if dh[l] is None else dh[l] + dinp
    return dh[0]


def dense_stack(x, params, cfg: ModelConfig, mask=None):
    squeeze = x.ndim == 2
    out, _ = _stack_fwd(x[None] if squeeze else x, params, cfg, mask)
    return out[0] if squeeze else out


def _head_fwd(h, p, name):
    a = _linear(h, p[f"head.{name}.w1"], p[f"head.{name}.b1"])
    return _linear(gelu(a), p[f"head.{name}.w2"], p[f"head.{name}.b2"]), a


def _head_back(dy, a, h, p, name, grads):
    pre = f"head.{name}."
    dga = _linear_back(dy, gelu(a), p[pre + "w2"], grads, pre + "w2", pre + "b2")
    return _linear_back(dga * gelu_grad(a), h, p[pre + "w1"], grads, pre + "w1", pre + "b1")


def heads(h, params, task: int):
    if task not in TASK_HEADS:
        raise ValueError(f"task must be 1 or 2, got {task}")
    return {name: _head_fwd(h, params, name)[0] for name in TASK_HEADS[task]}


def preseq(y, params, cfg: ModelConfig):
    squeeze = y.ndim == 2
    yb = y[None] if squeeze else y
    pre = _linear(yb, params["preseq.w"], params["preseq.b"])
    out = gelu(pre) + sinusoidal_pe(yb.shape[1], cfg.d_model).astype(yb.dtype)
    return out[0] if squeeze else out


# --------------------------------------------------------------------------- model


@dataclass
class GradTape:
    cfg: ModelConfig
    task: int
    y: np.ndarray
    pre: np.ndarray
    h0: np.ndarray
    stack: list
    h_final: np.ndarray
    head_caches: dict
    squeeze: bool


class TapeError(RuntimeError):
    pass


def forward(params, cfg: ModelConfig, y, task: int, mask=None, record: bool = False):
    """Run the network on ``y`` ``[T', in_dim]`` or ``[B, T', in_dim]``.

    Returns ``(outputs, tape)``; ``tape`` is None unless ``record``. Outputs
    are keyed by head name: ``mag0``/``doa`` for task 1, ``mag0``/``mag1``
    for task 2.
    """
    if task not in TASK_HEADS:
        raise ValueError(f"task must be 1 or 2, got {task}")
    y = np.asarray(y, dtype=cfg.np_dtype)
    squeeze = y.ndim == 2
    yb = y[None] if squeeze else y
    if yb.shape[-1] != cfg.in_dim:
        raise ValueError(f"input width {yb.shape[-1]} does not match in_dim={cfg.in_dim}")
    pre = _linear(yb, params["preseq.w"], params["preseq.b"])
    h0 = gelu(pre) + sinusoidal_pe(yb.shape[1], cfg.d_model).astype(yb.dtype)
    h, stack = _stack_fwd(h0, params, cfg, mask)
    outputs, head_caches = {}, {}
    for name in TASK_HEADS[task]:
        outputs[name], head_caches[name] = _head_fwd(h, params, name)
    tape = GradTape(cfg, task, yb, pre, h0, stack, h, head_caches, squeeze) if record else None
    if squeeze:
        outputs = {k: v[0] for k, v in outputs.items()}
    return outputs, tape


def backward(tape: GradTape | None, params, output_grads: dict) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of every parameter given d(loss)/d(output) per head."""
    if tape is None:
        raise TapeError("backward needs the tape from a forward(..., record=True) call")
    cfg = tape.cfg
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dh = np.zeros_like(tape.h_final)
    for name in TASK_HEADS[tape.task]:
        if name not in output_grads:
            continue
        g = np.asarray(output_grads[name], dtype=tape.h_final.dtype)
        if tape.squeeze:
            g = g[None]
        dh += _head_back(g, tape.head_caches[name], tape.h_final, params, name, grads)
    dh0 = _stack_back(dh, tape.stack, params, cfg, grads)
    _linear_back(dh0 * gelu_grad(tape.pre), tape.y, params["preseq.w"], grads, "preseq.w", "preseq.b")
    return grads
