"""Evaluation metrics: SI-SDR, log-spectral distance, mel L2 and circular DOA scores."""

from __future__ import annotations

import csv
import io
from collections import defaultdict

import numpy as np

SI_SDR_CAP = 100.0


def si_sdr(est, ref) -> float:
    est = np.asarray(est, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise ValueError("reference signal is all zeros")
    alpha = np.dot(est, ref) / ref_energy
    target = alpha * ref
    noise = est - target
    t, n = np.dot(target, target), np.dot(noise, noise)
    if t == 0:
        return -SI_SDR_CAP
    if n == 0:
        return SI_SDR_CAP
    return float(np.clip(10 * np.log10(t / n), -SI_SDR_CAP, SI_SDR_CAP))


def lsd(est_logmel, ref_logmel) -> float:
    """Mean over frames of the RMS log-spectral difference (last axis = bins)."""
    est, ref = np.asarray(est_logmel), np.asarray(ref_logmel)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {ref.shape}")
    d = (est - ref).reshape(-1, est.shape[-1])
    return float(np.mean(np.sqrt(np.mean(d**2, axis=-1))))


def mel_l2(est, ref) -> float:
    est, ref = np.asarray(est), np.asarray(ref)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {ref.shape}")
    return float(np.sum((est - ref) ** 2))


def circular_error(a, b) -> float:
    d = abs(float(a) - float(b)) % 360.0
    return min(d, 360.0 - d)


def doa_report(predictions, truths, k: int = 5) -> dict:
    """Top-1 and best-of-top-k accuracy/MAE for ranked candidate angle lists."""
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if not truths:
        raise ValueError("no utterances to score")
    top1, bestk = [], []
    for cands, truth in zip(predictions, truths):
        if not len(cands):
            raise ValueError("empty candidate list")
        errs = [circular_error(c, truth) for c in list(cands)[:k]]
        top1.append(errs[0])
        bestk.append(min(errs))
    top1, bestk = np.array(top1), np.array(bestk)
    return {
        "n": len(truths),
        "acc@1": float(np.mean(top1 == 0)),
        "top1_err": float(np.mean(top1 != 0)),
        f"top{k}_err": float(np.mean(bestk != 0)),
        "mae@1": float(top1.mean()),
        f"top{k}_mae": float(bestk.mean()),
    }


def summarize_by_t60(records: list[dict], fields: list[str]) -> str:
    """CSV table of per-T60 means of ``fields`` over per-utterance records."""
    groups = defaultdict(list)
    for r in records:
        groups[r["t60"]].append(r)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["t60", "n"] + fields)
    for t60 in sorted(groups):
        rows = groups[t60]
        w.writerow([t60, len(rows)] + [f"{np.mean([r[f] for r in rows]):.4f}" for f in fields])
    return buf.getvalue()
