"""Task losses, Adam with warmup/linear-decay schedule, frame voting and the train/eval loops."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nnet
from .metrics import doa_report, lsd, mel_l2
from .nnet import ModelConfig

log = logging.getLogger(__name__)

GRID_STEP = 5.0


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 75000
    peak_lr: float = 3e-4
    warmup_frac: float = 0.01
    batch_size: int = 8
    seed: int = 0
    task: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.task not in (1, 2):
            raise ValueError(f"task must be 1 or 2, got {self.task}")

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------- losses


def _batched(x, ndim):
    x = np.asarray(x)
    return x[None] if x.ndim == ndim - 1 else x


def _frame_mask(mask, B, T):
    if mask is None:
        return np.ones((B, T), dtype=bool)
    return np.asarray(mask, dtype=bool).reshape(B, T)


def l2_term(pred, true, mask=None):
    """Frame-summed squared error (batch mean) and its gradient."""
    pred, true = _batched(pred, 3), _batched(true, 3)
    if pred.shape != true.shape:
        raise ValueError(f"prediction {pred.shape} and target {true.shape} disagree")
    B, T, _ = pred.shape
    m = _frame_mask(mask, B, T)[..., None]
    diff = (pred - true) * m
    return float(np.sum(diff.astype(np.float64) ** 2) / B), 2.0 * diff / B


def ce_term(logits, doa_class, mask=None):
    """Frame-summed cross entropy against the utterance class (batch mean) and its gradient."""
    logits = _batched(logits, 3)
    B, T, K = logits.shape
    cls = np.atleast_1d(np.asarray(doa_class, dtype=np.int64))
    if cls.shape != (B,):
        raise ValueError(f"expected {B} class labels, got {cls.shape}")
    if np.any(cls < 0) or np.any(cls >= K):
        raise ValueError(f"DOA class out of range [0, {K})")
    m = _frame_mask(mask, B, T)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, np.broadcast_to(cls[:, None, None], (B, T, 1)), axis=-1)[..., 0]
    loss = float(-np.sum(picked * m) / B)
    grad = np.exp(logp)
    grad[np.arange(B)[:, None], np.arange(T)[None, :], cls[:, None]] -= 1.0
    return loss, grad * m[..., None] / B


def task1_loss(mag_pred, doa_logits, mag_true, doa_class, mask=None):
    """L2 on magnitudes plus per-frame DOA cross entropy, unit weights.

    Returns ``(loss, output_grads, components)``.
    """
    l2, dmag = l2_term(mag_pred, mag_true, mask)
    ce, dlog = ce_term(doa_logits, doa_class, mask)
    squeeze = np.asarray(mag_pred).ndim == 2
    grads = {"mag0": dmag[0] if squeeze else dmag, "doa": dlog[0] if squeeze else dlog}
    return l2 + ce, grads, {"l2": l2, "ce": ce}


def task2_loss(mag0_pred, mag1_pred, mag0_true, mag1_true, mask=None):
    """Sum of the two speakers' L2 terms with the fixed head-to-speaker assignment."""
    l0, d0 = l2_term(mag0_pred, mag0_true, mask)
    l1, d1 = l2_term(mag1_pred, mag1_true, mask)
    squeeze = np.asarray(mag0_pred).ndim == 2
    grads = {"mag0": d0[0] if squeeze else d0, "mag1": d1[0] if squeeze else d1}
    return l0 + l1, grads, {"l2_0": l0, "l2_1": l1}


def batch_loss(outputs, batch, task):
    if task == 1:
        return task1_loss(outputs["mag0"], outputs["doa"], batch["mag0"], batch["doa"], batch.get("mask"))
    return task2_loss(outputs["mag0"], outputs["mag1"], batch["mag0"], batch["mag1"], batch.get("mask"))


# --------------------------------------------------------------------------- schedule and optimiser


def warmup_end(total_steps: int, warmup_frac: float = 0.01) -> int:
    return int(round(warmup_frac * total_steps))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then linear decay to 0 at ``total_steps``."""
    total = cfg.total_steps
    step = min(max(step, 0), total)
    end = warmup_end(total, cfg.warmup_frac)
    if step <= end:
        return cfg.peak_lr * step / end if end > 0 else cfg.peak_lr
    return cfg.peak_lr * (total - step) / (total - end)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: OptimizerState, lr: float, cfg: TrainConfig = TrainConfig()) -> bool:
    """Bias-corrected Adam update in place. Returns False if a non-finite gradient skipped the step."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped (%d so far)", state.step, state.skipped)
        return False
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype)
        if name.endswith(".sigma"):
            np.maximum(p, nnet.SIGMA_MIN, out=p)
    return True


# --------------------------------------------------------------------------- voting


def doa_vote(doa_logits) -> int:
    """Majority vote of per-frame argmax classes; ties go to the lowest class."""
    logits = np.asarray(doa_logits)
    if logits.ndim == 1:
        logits = logits[None]
    counts = np.bincount(np.argmax(logits, axis=-1), minlength=logits.shape[-1])
    return int(np.argmax(counts))


def vote_ranking(doa_logits, k: int = 5) -> list[int]:
    """Classes ranked by vote count, then by mean log-posterior."""
    logits = np.asarray(doa_logits, dtype=np.float64)
    counts = np.bincount(np.argmax(logits, axis=-1), minlength=logits.shape[-1])
    z = logits - logits.max(axis=-1, keepdims=True)
    mean_logp = np.mean(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), axis=0)
    order = np.lexsort((np.arange(len(counts)), -mean_logp, -counts))
    return [int(i) for i in order[:k]]


# --------------------------------------------------------------------------- batching


def make_batch(utts: list[dict], task: int, dtype=np.float32) -> dict:
    """Zero-pad a list of utterances to a common length with a frame mask."""
    T = max(u["inputs"].shape[0] for u in utts)
    B = len(utts)
    mask = np.zeros((B, T), dtype=bool)
    batch = {"inputs": np.zeros((B, T, utts[0]["inputs"].shape[1]), dtype=dtype)}
    keys = ("mag0",) if task == 1 else ("mag0", "mag1")
    for k in keys:
        batch[k] = np.zeros((B, T, utts[0][k].shape[1]), dtype=dtype)
    for i, u in enumerate(utts):
        n = u["inputs"].shape[0]
        mask[i, :n] = True
        batch["inputs"][i, :n] = u["inputs"]
        for k in keys:
            batch[k][i, :n] = u[k]
    if task == 1:
        batch["doa"] = np.array([u["doa"] for u in utts], dtype=np.int64)
    batch["mask"] = mask
    return batch


def epoch_batches(n_utts: int, lengths, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Length-bucketed batches in a shuffled order fixed by ``(seed, epoch)``."""
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(n_utts)
    by_len = sorted(perm.tolist(), key=lambda i: lengths[i])
    batches = [by_len[i : i + batch_size] for i in range(0, n_utts, batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def batch_for_step(step: int, lengths, cfg: TrainConfig) -> list[int]:
    n_per_epoch = -(-len(lengths) // cfg.batch_size)
    epoch, idx = divmod(step, n_per_epoch)
    return epoch_batches(len(lengths), lengths, cfg.batch_size, cfg.seed, epoch)[idx]


# --------------------------------------------------------------------------- loops


@dataclass
class TrainResult:
    params: dict
    state: OptimizerState
    curve: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def train(
    params: dict,
    model_cfg: ModelConfig,
    dataset: list[dict],
    cfg: TrainConfig,
    state: OptimizerState | None = None,
    stop_at: int | None = None,
    checkpoint_dir=None,
    extra_meta: dict | None = None,
) -> TrainResult:
    """Optimise ``params`` in place from ``state.step`` up to ``stop_at`` (default ``total_steps``).

    Each step's batch is a pure function of (seed, step), so a run resumed
    from a checkpoint follows the same trajectory as an unbroken one.
    """
    if not dataset:
        raise ValueError("empty dataset")
    state = OptimizerState.zeros_like(params) if state is None else state
    stop_at = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    lengths = [u["inputs"].shape[0] for u in dataset]
    dtype = model_cfg.np_dtype
    result = TrainResult(params, state)
    while state.step < stop_at:
        step = state.step
        batch = make_batch([dataset[i] for i in batch_for_step(step, lengths, cfg)], cfg.task, dtype)
        outputs, tape = nnet.forward(params, model_cfg, batch["inputs"], cfg.task, batch["mask"], record=True)
        loss, out_grads, parts = batch_loss(outputs, batch, cfg.task)
        grads = nnet.backward(tape, params, out_grads)
        lr = lr_at(step, cfg)
        if not adam_step(params, grads, state, lr, cfg):
            state.step += 1
        result.curve.append({"step": step, "loss": loss, "lr": lr, **parts})
        if checkpoint_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            from .datasetio import save_checkpoint

            path = f"{checkpoint_dir}/step_{state.step:06d}"
            save_checkpoint(path, params, model_cfg, state, train_cfg=cfg, extra=extra_meta)
            result.checkpoints.append(path)
    return result


def write_loss_curve(curve: list[dict], path):
    fields = ["step", "loss", "lr"] + sorted({k for row in curve for k in row} - {"step", "loss", "lr"})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in curve:
            w.writerow(row)


def dataset_loss(params, model_cfg: ModelConfig, dataset: list[dict], task: int) -> dict:
    """Mean per-utterance loss (and components) without updating anything."""
    totals = {}
    for u in dataset:
        batch = make_batch([u], task, model_cfg.np_dtype)
        outputs, _ = nnet.forward(params, model_cfg, batch["inputs"], task, batch["mask"])
        loss, _, parts = batch_loss(outputs, batch, task)
        for k, v in {"loss": loss, **parts}.items():
            totals[k] = totals.get(k, 0.0) + v / len(dataset)
    return totals


def evaluate(params, model_cfg: ModelConfig, dataset: list[dict], task: int, k: int = 5) -> dict:
    """Per-utterance predictions and an aggregate report."""
    records = []
    for u in dataset:
        outputs, _ = nnet.forward(params, model_cfg, u["inputs"], task)
        rec = {"utt_id": u.get("utt_id"), "t60": u.get("t60")}
        rec["mel_l2_0"] = mel_l2(outputs["mag0"], u["mag0"]) / u["inputs"].shape[0]
        rec["lsd_0"] = lsd(outputs["mag0"], u["mag0"])
        if task == 1:
            logits = outputs["doa"]
            rec["frame_acc"] = float(np.mean(np.argmax(logits, axis=-1) == u["doa"]))
            rec["vote"] = doa_vote(logits)
            rec["top5"] = [c * GRID_STEP for c in vote_ranking(logits, k)]
            rec["truth"] = u["doa"] * GRID_STEP
        else:
            rec["mel_l2_1"] = mel_l2(outputs["mag1"], u["mag1"]) / u["inputs"].shape[0]
            rec["lsd_1"] = lsd(outputs["mag1"], u["mag1"])
        records.append(rec)
    report = {"n": len(records), "task": task}
    numeric = [key for key in records[0] if key.startswith(("mel_l2", "lsd", "frame_acc"))]
    for key in numeric:
        report[key] = float(np.mean([r[key] for r in records]))
    if task == 1:
        report["doa"] = doa_report([r["top5"] for r in records], [r["truth"] for r in records], k)
    return {"report": report, "records": records}
