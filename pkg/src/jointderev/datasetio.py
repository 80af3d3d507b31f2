"""Binary tensor files, checkpoints, manifests and dataset synthesis.

Tensor file layout (all little-endian)::

    magic   4 bytes  b"NTSR"
    version u32      1
    dtype   u32      1 = float32, 2 = float64, 3 = int64
    ndim    u32
    dims    u64 * ndim
    payload row-major elements

A checkpoint is a directory::

    manifest.json        model/train config, step, seed, feature stats
    params/<name>.ntsr   one file per parameter
    adam_m/<name>.ntsr   first moments
    adam_v/<name>.ntsr   second moments
"""

from __future__ import annotations

import json
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import nnet, roomsim, signals
from .signals import FeatStats, FeatTensor, MultiWave
from .speechlike import synth_utterance

log = logging.getLogger(__name__)

MAGIC = b"NTSR"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
CODE_FOR = {("f", 4): 1, ("f", 8): 2, ("i", 8): 3}
SPLITS = ("tr", "dt", "et")


class TensorFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------- tensors


def encode_tensor(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    code = CODE_FOR.get((x.dtype.kind, x.dtype.itemsize))
    if code is None:
        raise TensorFormatError(f"dtype: unsupported {x.dtype}; use float32, float64 or int64")
    header = MAGIC + struct.pack("<III", VERSION, code, x.ndim) + struct.pack(f"<{x.ndim}Q", *x.shape)
    return header + np.ascontiguousarray(x, dtype=DTYPE_CODES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise TensorFormatError(f"header: need at least 16 bytes, got {len(buf)}")
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"magic: expected {MAGIC!r}, got {buf[:4]!r}")
    version, code, ndim = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"version: expected {VERSION}, got {version}")
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"dtype: unknown code {code}")
    off = 16 + 8 * ndim
    if len(buf) < off:
        raise TensorFormatError(f"dims: expected {8 * ndim} bytes of dims, got {len(buf) - 16}")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 16)
    dt = DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    actual = len(buf) - off
    if actual != expected:
        raise TensorFormatError(f"payload: expected {expected} bytes, got {actual}")
    arr = np.frombuffer(buf, dtype=dt, offset=off, count=expected // dt.itemsize).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def write_tensor(path, x: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_tensor(x))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: dict, model_cfg: nnet.ModelConfig, state=None, train_cfg=None, stats: FeatStats | None = None, extra: dict | None = None):
    path = Path(path)
    for name, p in params.items():
        write_tensor(path / "params" / f"{name}.ntsr", p)
        if state is not None:
            write_tensor(path / "adam_m" / f"{name}.ntsr", state.m[name])
            write_tensor(path / "adam_v" / f"{name}.ntsr", state.v[name])
    manifest = {
        "format": "jointderev-checkpoint",
        "version": VERSION,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "step": state.step if state is not None else 0,
        "skipped": state.skipped if state is not None else 0,
        "seed": train_cfg.seed if train_cfg is not None else None,
        "stats": stats.to_dict() if stats is not None else None,
        "params": sorted(params),
        "has_optimizer": state is not None,
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path, expect_cfg: nnet.ModelConfig | None = None):
    """Returns ``(params, model_cfg, state_or_None, manifest)``."""
    from .training import OptimizerState

    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no manifest.json in {path}")
    manifest = json.loads(mpath.read_text())
    cfg = nnet.ModelConfig.from_dict(manifest["model_config"])
    if expect_cfg is not None and expect_cfg != cfg:
        diff = [k for k, v in expect_cfg.to_dict().items() if manifest["model_config"].get(k) != v]
        raise CheckpointError(f"checkpoint config differs from expected in: {', '.join(diff)}")
    shapes = nnet.param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        f = path / "params" / f"{name}.ntsr"
        if not f.exists():
            raise CheckpointError(f"parameter {name}: missing from checkpoint")
        arr = read_tensor(f)
        if arr.shape != tuple(shape):
            raise CheckpointError(f"parameter {name}: shape {arr.shape} does not match config {tuple(shape)}")
        params[name] = arr
    state = None
    if manifest.get("has_optimizer"):
        m = {k: read_tensor(path / "adam_m" / f"{k}.ntsr") for k in shapes}
        v = {k: read_tensor(path / "adam_v" / f"{k}.ntsr") for k in shapes}
        state = OptimizerState(m, v, manifest["step"], manifest.get("skipped", 0))
    return params, cfg, state, manifest


# --------------------------------------------------------------------------- manifests


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def append_manifest(path, entries: list[dict]):
    with open(path, "a") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def write_synthetic_corpus(out_dir, n: int, seed: int = 0, duration: float = 1.0) -> list[Path]:
    """Write ``n`` speech-like mono 16 kHz PCM wavs (corpus substitute)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        x = synth_utterance(duration, seed=seed * 100003 + i)
        p = out_dir / f"synth_{i:04d}.wav"
        signals.write_wav(p, MultiWave(x[None]), pcm16=True)
        paths.append(p)
    return paths


def scan_corpus(corpus_dir) -> list[tuple[Path, np.ndarray]]:
    wavs = sorted(Path(corpus_dir).glob("*.wav"))
    good = []
    for p in wavs:
        try:
            w = signals.read_wav(p)
        except Exception as exc:  # noqa: BLE001 - any unreadable file is skipped
            log.warning("skipping unreadable wav %s: %s", p, exc)
            continue
        if w.sample_rate != signals.SAMPLE_RATE:
            log.warning("skipping %s: sample rate %d != %d", p, w.sample_rate, signals.SAMPLE_RATE)
            continue
        good.append((p, w.samples[0]))
    if not good:
        raise FileNotFoundError(f"no usable 16 kHz wav files in {corpus_dir}")
    return good


def _render_utt(job):
    utt_id, split, task, scene_seed, src_idx, out_dir, corpus = job
    out_dir = Path(out_dir)
    scene = roomsim.sample_scene(task, scene_seed)
    sources = [corpus[i][1] for i in src_idx]
    rendered = roomsim.render_scene(sources, scene)
    fb = signals.mel_filterbank()
    feats = signals.extract_features(rendered.mixture, fb=fb)
    paths = {"features": f"feats/{utt_id}.mix.ntsr", "mixture_wav": f"wav/{utt_id}.mix.wav"}
    write_tensor(out_dir / paths["features"], feats.data.astype(np.float32))
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    signals.write_wav(out_dir / paths["mixture_wav"], rendered.mixture)
    for r, clean in enumerate(rendered.clean):
        tgt = signals.logmel(signals.multi_stft(clean), fb)
        paths[f"target{r}"] = f"feats/{utt_id}.tgt{r}.ntsr"
        write_tensor(out_dir / paths[f"target{r}"], tgt.data.astype(np.float32))
        paths[f"clean{r}_wav"] = f"wav/{utt_id}.clean{r}.wav"
        signals.write_wav(out_dir / paths[f"clean{r}_wav"], clean)
    paths["early0_wav"] = f"wav/{utt_id}.early0.wav"
    signals.write_wav(out_dir / paths["early0_wav"], rendered.early[0])
    entry = {
        "utt_id": utt_id,
        "split": split,
        "task": task,
        "sources": [str(corpus[i][0]) for i in src_idx],
        "scene": scene.to_dict(),
        "doa_class": scene.doa_class,
        "t60": scene.t60,
        "paths": paths,
    }
    if task == 2:
        entry["interferer_angle"] = scene.interferer_angle
    return entry


def synth_dataset(corpus_dir, out_dir, task: int, counts: dict, seed: int = 0, jobs: int = 1) -> Path:
    """Render ``counts[split]`` utterances per split and append them to ``out_dir/manifest.jsonl``.

    Utterances already in the manifest (by id) are not re-rendered.
    """
    corpus = scan_corpus(corpus_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    done = {e["utt_id"] for e in read_manifest(manifest_path)}
    jobs_list = []
    for s_idx, split in enumerate(SPLITS):
        for i in range(int(counts.get(split, 0))):
            utt_id = f"t{task}_{split}_{i:05d}"
            rng = np.random.default_rng([seed, task, s_idx, i])
            scene_seed = int(rng.integers(2**32))
            n_src = 2 if task == 2 else 1
            if len(corpus) >= n_src:
                src_idx = rng.choice(len(corpus), size=n_src, replace=False).tolist()
            else:
                src_idx = [int(rng.integers(len(corpus)))] * n_src
            if utt_id not in done:
                jobs_list.append((utt_id, split, task, scene_seed, src_idx, str(out_dir), corpus))
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            entries = list(ex.map(_render_utt, jobs_list))
    else:
        entries = [_render_utt(j) for j in jobs_list]
    append_manifest(manifest_path, entries)
    return manifest_path


# --------------------------------------------------------------------------- training sets


def _resolve(manifest_path, rel):
    return Path(manifest_path).parent / rel


def load_utterances(manifest_path, split: str | None = None, stats: FeatStats | None = None, dr: int = 3):
    """Normalised, frame-stacked training examples from a manifest.

    When ``stats`` is None they are computed from the ``tr`` split.
    Returns ``(utterances, stats)``.
    """
    entries = read_manifest(manifest_path)
    if not entries:
        raise ValueError(f"manifest {manifest_path} is empty")
    raw = {e["utt_id"]: FeatTensor(read_tensor(_resolve(manifest_path, e["paths"]["features"])).astype(np.float64), "combined", {"mag_dims": 80}) for e in entries}
    if stats is None:
        tr = [raw[e["utt_id"]] for e in entries if e["split"] == "tr"] or list(raw.values())
        stats = signals.compute_stats(tr)
    utts = []
    for e in entries:
        if split is not None and e["split"] != split:
            continue
        utts.append(make_example(raw[e["utt_id"]], [read_tensor(_resolve(manifest_path, e["paths"][k])).astype(np.float64) for k in sorted(e["paths"]) if k.startswith("target")], stats, e, dr))
    return utts, stats


def make_example(mix: FeatTensor, targets: list[np.ndarray], stats: FeatStats, entry: dict | None = None, dr: int = 3) -> dict:
    entry = entry or {}
    x = signals.downsample(signals.normalize(mix, stats), dr).data
    utt = {"inputs": x, "utt_id": entry.get("utt_id"), "t60": entry.get("t60")}
    for r, t in enumerate(targets):
        tn = signals.normalize(FeatTensor(t, "target"), stats)
        utt[f"mag{r}"] = signals.downsample(tn, dr).data
    if "doa_class" in entry:
        utt["doa"] = int(entry["doa_class"])
    return utt


def synth_examples(task: int, n: int, seed: int = 0, duration: float = 1.0, scenes=None, dr: int = 3):
    """Render ``n`` utterances in memory and return ``(examples, stats)``.

    Sources are speech-like synthetic signals; stats come from the examples
    themselves. ``scenes`` overrides scene sampling.
    """
    fb = signals.mel_filterbank()
    mixes, targets, entries = [], [], []
    for i in range(n):
        rng = np.random.default_rng([seed, task, i])
        scene = scenes[i] if scenes is not None else roomsim.sample_scene(task, int(rng.integers(2**32)))
        n_src = 2 if task == 2 else 1
        srcs = [synth_utterance(duration, seed=int(rng.integers(2**31))) for _ in range(n_src)]
        rendered = roomsim.render_scene(srcs, scene)
        mixes.append(signals.extract_features(rendered.mixture, fb=fb))
        targets.append([signals.logmel(signals.multi_stft(c), fb).data for c in rendered.clean])
        entries.append({"utt_id": f"mem{i:04d}", "t60": scene.t60, "doa_class": scene.doa_class, "scene": scene})
    stats = signals.compute_stats(mixes)
    return [make_example(m, t, stats, e, dr) for m, t, e in zip(mixes, targets, entries)], stats

