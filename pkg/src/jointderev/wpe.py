"""Weighted prediction error (WPE) dereverberation in the STFT domain.

Offline, iterative, variance-normalised delayed linear prediction. Every
frequency bin is an independent problem; the bins are solved together with
batched linear algebra.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .signals import ComplexSpec

log = logging.getLogger(__name__)

POWER_FLOOR = 1e-10


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 10
    delay: int = 3
    iterations: int = 3
    diagonal_loading: float = 1e-10
    # False runs every channel through its own single-channel WPE
    multichannel: bool = True

    def __post_init__(self):
        if self.taps < 1 or self.delay < 1 or self.iterations < 1:
            raise ValueError("taps, delay and iterations must all be >= 1")


def delayed_stack(Y: np.ndarray, taps: int, delay: int) -> np.ndarray:
    """``[K, D, T] -> [K, D*taps, T]`` holding y(t-delay), ..., y(t-delay-taps+1)."""
    K, D, T = Y.shape
    out = np.zeros((K, D * taps, T), dtype=Y.dtype)
    for k in range(taps):
        d = delay + k
        if d >= T:
            break
        out[:, k * D : (k + 1) * D, d:] = Y[:, :, : T - d]
    return out


def _power(X: np.ndarray) -> np.ndarray:
    return np.maximum(np.mean(X.real**2 + X.imag**2, axis=1), POWER_FLOOR)


def weighted_objective(Y: np.ndarray, Ytil: np.ndarray, G: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Per-bin negative log-likelihood ``sum_t D*ln(lam) + |y - G^H y~|^2 / lam``."""
    E = Y - np.conj(np.transpose(G, (0, 2, 1))) @ Ytil
    D = Y.shape[1]
    return np.sum(D * np.log(lam) + np.sum(np.abs(E) ** 2, axis=1) / lam, axis=-1)


def _solve_filters(R: np.ndarray, P: np.ndarray, loading: float) -> np.ndarray:
    """Batched solve of ``R G = P`` after Jacobi equilibration.

    The loading is added to the unit diagonal of the equilibrated system,
    i.e. it is relative to each diagonal entry of ``R``. Heavily weighted
    frames make ``R`` badly scaled; equilibrating first keeps the solve accurate.
    """
    n = R.shape[-1]
    d = np.sqrt(np.real(np.diagonal(R, axis1=1, axis2=2)))
    d = np.where(d > 0, d, 1.0)
    Rs = R / d[:, :, None] / d[:, None, :]
    Ps = P / d[:, :, None]
    eye = np.eye(n)
    load = loading
    for attempt in range(4):
        try:
            G = np.linalg.solve(Rs + load * eye, Ps)
            if np.all(np.isfinite(G)):
                return G / d[:, :, None]
        except np.linalg.LinAlgError:
            pass
        load = load * 10 if load > 0 else 1e-12
        log.warning("WPE normal equations singular; raising loading to %g", load)
    raise np.linalg.LinAlgError("WPE normal equations remain singular after 3 loading increases")


def _wpe_bins(Y: np.ndarray, cfg: WpeConfig, history: list | None = None) -> np.ndarray:
    """Y is ``[K, D, T]``; returns the dereverberated ``[K, D, T]``."""
    Ytil = delayed_stack(Y, cfg.taps, cfg.delay)
    X = Y
    active = np.any(Y != 0, axis=(1, 2))
    G = np.zeros((Y.shape[0], Ytil.shape[1], Y.shape[1]), dtype=Y.dtype)
    for _ in range(cfg.iterations):
        lam = _power(X)
        if history is not None and not history:
            history.append(weighted_objective(Y, Ytil, G, lam))
        Yw = Ytil / lam[:, None, :]
        R = Yw @ np.conj(np.transpose(Ytil, (0, 2, 1)))
        P = Yw @ np.conj(np.transpose(Y, (0, 2, 1)))
        G = np.zeros_like(G)
        if np.any(active):
            G[active] = _solve_filters(R[active], P[active], cfg.diagonal_loading)
        X = Y - np.conj(np.transpose(G, (0, 2, 1))) @ Ytil
        if history is not None:
            history.append(weighted_objective(Y, Ytil, G, lam))
            history.append(weighted_objective(Y, Ytil, G, _power(X)))
    return X


def wpe_dereverb(spec: ComplexSpec, cfg: WpeConfig = WpeConfig(), history: list | None = None) -> ComplexSpec:
    """Dereverberate a ``[C, T, K]`` spectrogram; the output has the input's shape.

    If ``history`` is a list, per-bin objective values are appended after the
    initial state and after every filter and power update.
    """
    C, T, K = spec.data.shape
    if T <= cfg.delay + cfg.taps:
        raise ValueError(f"utterance too short for WPE: {T} frames <= delay+taps={cfg.delay + cfg.taps}")
    Y = np.transpose(spec.data, (2, 0, 1)).astype(np.complex128)  # [K, C, T]
    if cfg.multichannel:
        X = _wpe_bins(Y, cfg, history)
    else:
        X = np.concatenate([_wpe_bins(Y[:, c : c + 1], cfg, history if c == 0 else None) for c in range(C)], axis=1)
    return ComplexSpec(np.transpose(X, (1, 2, 0)), spec.config, spec.sample_rate)
