"""Central finite-difference check of the hand-written gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnet
from .training import task1_loss, task2_loss


@dataclass
class GradReport:
    max_rel_err: float
    worst_param: str
    per_param: dict


def _problem(cfg: nnet.ModelConfig, task: int, seed: int, n_frames: int, batch: int):
    rng = np.random.default_rng(seed + 1000)
    y = rng.standard_normal((batch, n_frames, cfg.in_dim))
    mask = np.ones((batch, n_frames), dtype=bool)
    if batch > 1:
        mask[-1, n_frames // 2 :] = False
    t0 = rng.standard_normal((batch, n_frames, cfg.out_mag_dim))
    if task == 1:
        cls = rng.integers(cfg.n_doa_classes, size=batch)

        def loss_fn(out):
            return task1_loss(out["mag0"], out["doa"], t0, cls, mask)
    else:
        t1 = rng.standard_normal((batch, n_frames, cfg.out_mag_dim))

        def loss_fn(out):
            return task2_loss(out["mag0"], out["mag1"], t0, t1, mask)

    return y, mask, loss_fn


def perturb_params(params, seed):
    """Move parameters off their symmetric init so every path carries gradient."""
    rng = np.random.default_rng(seed + 2000)
    out = {}
    for k, v in params.items():
        if k.endswith(".sigma"):
            out[k] = rng.uniform(1.0, 4.0, v.shape)
        elif k.endswith((".g",)):
            out[k] = 1.0 + 0.3 * rng.standard_normal(v.shape)
        else:
            out[k] = v + 0.3 * rng.standard_normal(v.shape)
    return out


def grad_check(
    cfg: nnet.ModelConfig | None = None,
    seed: int = 0,
    task: int = 1,
    n_frames: int = 8,
    batch: int = 2,
    step: float = 1e-5,
    grad_fn=None,
) -> GradReport:
    """Compare analytic gradients with central differences on every parameter entry.

    The error per tensor is ``|g - g_fd|_2 / max(|g|_2, |g_fd|_2)``; the
    report carries the worst tensor. ``grad_fn`` overrides
    :func:`nnet.backward` (used to check that corrupted gradients are caught).
    """
    cfg = cfg or nnet.ModelConfig.tiny()
    if cfg.np_dtype != np.float64:
        raise ValueError("gradient checks need a float64 model")
    params = perturb_params(nnet.init_params(cfg, seed), seed)
    y, mask, loss_fn = _problem(cfg, task, seed, n_frames, batch)

    def loss_of(p):
        out, _ = nnet.forward(p, cfg, y, task, mask)
        return loss_fn(out)[0]

    out, tape = nnet.forward(params, cfg, y, task, mask, record=True)
    _, out_grads, _ = loss_fn(out)
    analytic = (grad_fn or nnet.backward)(tape, params, out_grads)

    per_param = {}
    for name, p in params.items():
        fd = np.zeros_like(p)
        flat, gflat = p.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_of(params)
            flat[i] = orig - step
            down = loss_of(params)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        a = analytic[name]
        scale = max(np.linalg.norm(a), np.linalg.norm(fd))
        per_param[name] = 0.0 if scale == 0 else float(np.linalg.norm(a - fd) / scale)
    worst = max(per_param, key=per_param.get)
    return GradReport(per_param[worst], worst, per_param)
