"""STFT, log-mel and phase features, frame stacking and waveform reconstruction.

All transforms work on float64 numpy arrays. Multichannel waveforms are
``[C, N]``; complex spectrograms are ``[C, T, K]`` with ``K = fft_len // 2 + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io.wavfile

SAMPLE_RATE = 16000
LOG_EPS = 1e-10
STD_FLOOR = 1e-5
N_MELS = 80
N_PHASE_BINS = 80


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    win_len: int = 1200
    fft_len: int = 2048
    hop: int = 300

    def __post_init__(self):
        if min(self.win_len, self.fft_len, self.hop) <= 0:
            raise SignalError("STFT sizes must be positive")
        if not self.hop <= self.win_len <= self.fft_len:
            raise SignalError(
                f"need hop <= win_len <= fft_len, got {self.hop}, {self.win_len}, {self.fft_len}"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    def window(self) -> np.ndarray:
        n = np.arange(self.win_len)
        return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / self.win_len))

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.win_len) // self.hop + 1


@dataclass
class MultiWave:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 2 or self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise SignalError(f"expected [channels, samples], got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("waveform contains non-finite samples")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]


@dataclass
class ComplexSpec:
    data: np.ndarray  # [C, T, K]
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.shape[-1] != self.config.n_bins:
            raise SignalError(
                f"spectrum has {self.data.shape[-1]} bins, config implies {self.config.n_bins}"
            )

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    def bin_freqs(self) -> np.ndarray:
        return np.arange(self.config.n_bins) * self.sample_rate / self.config.fft_len


@dataclass
class FeatTensor:
    """Real-valued feature tensor plus a record of how it was laid out."""

    data: np.ndarray
    kind: str
    dims_meta: dict = field(default_factory=dict)

    KINDS = ("mag", "phase", "combined", "downsampled", "target")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise SignalError(f"unknown feature kind {self.kind!r}")


@dataclass
class FeatStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# --------------------------------------------------------------------------- STFT


def stft(x: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """One-sided STFT of a 1-D signal, ``[T, K]``.

    Frames start at ``t * hop`` with no centre padding; trailing samples that
    do not fill a whole window are dropped.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise SignalError("stft expects a single channel")
    if x.shape[0] < cfg.win_len:
        raise SignalError(f"signal too short: {x.shape[0]} samples < window of {cfg.win_len}")
    n_frames = cfg.n_frames(x.shape[0])
    idx = np.arange(cfg.win_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * cfg.window()
    return np.fft.rfft(frames, n=cfg.fft_len, axis=-1)


def window_sumsquare(cfg: StftConfig, n_frames: int) -> np.ndarray:
    n = cfg.win_len + cfg.hop * (n_frames - 1)
    wss = np.zeros(n)
    w2 = cfg.window() ** 2
    for t in range(n_frames):
        wss[t * cfg.hop : t * cfg.hop + cfg.win_len] += w2
    return wss


def check_cola(cfg: StftConfig, rtol: float = 1e-9):
    """Raise unless the squared window overlap-adds to a constant."""
    reps = cfg.win_len // cfg.hop + 2
    wss = window_sumsquare(cfg, 2 * reps + 1)
    mid = wss[reps * cfg.hop : (reps + 1) * cfg.hop]
    if cfg.win_len % cfg.hop or np.ptp(mid) > rtol * mid.mean():
        raise SignalError(
            f"window {cfg.win_len} / hop {cfg.hop} does not overlap-add to a constant"
        )


def istft(spec: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Least-squares inverse of :func:`stft` for a single channel ``[T, K]``."""
    check_cola(cfg)
    spec = np.asarray(spec)
    n_frames = spec.shape[0]
    frames = np.fft.irfft(spec, n=cfg.fft_len, axis=-1)[:, : cfg.win_len] * cfg.window()
    n = cfg.win_len + cfg.hop * (n_frames - 1)
    out = np.zeros(n)
    for t in range(n_frames):
        out[t * cfg.hop : t * cfg.hop + cfg.win_len] += frames[t]
    wss = window_sumsquare(cfg, n_frames)
    nz = wss > 1e-12
    out[nz] /= wss[nz]
    out[~nz] = 0.0
    return out


def multi_stft(wave: MultiWave, cfg: StftConfig = StftConfig()) -> ComplexSpec:
    data = np.stack([stft(ch, cfg) for ch in wave.samples])
    return ComplexSpec(data, cfg, wave.sample_rate)


def multi_istft(spec: ComplexSpec) -> MultiWave:
    return MultiWave(np.stack([istft(ch, spec.config) for ch in spec.data]), spec.sample_rate)


# --------------------------------------------------------------------------- mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS,
    f_lo: float = 80.0,
    f_hi: float = 7000.0,
    fft_len: int = 2048,
    sample_rate: int = SAMPLE_RATE,
) -> np.ndarray:
    """HTK-scale triangular filters, each row rescaled so its largest tap is 1."""
    if not 0 <= f_lo < f_hi <= sample_rate / 2:
        raise SignalError(f"invalid mel band [{f_lo}, {f_hi}] for sample rate {sample_rate}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))
    freqs = np.arange(fft_len // 2 + 1) * sample_rate / fft_len
    lo, centre, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (centre - lo)
    falling = (hi - freqs) / (hi - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    peaks = fb.max(axis=1, keepdims=True)
    if np.any(peaks <= 0):
        raise SignalError("a mel filter falls between FFT bins; use a longer FFT")
    return fb / peaks


def mel_centers(n_mels=N_MELS, f_lo=80.0, f_hi=7000.0) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))[1:-1]


def logmel(spec: ComplexSpec, fb: np.ndarray) -> FeatTensor:
    if fb.shape[1] != spec.data.shape[-1]:
        raise SignalError(f"filterbank expects {fb.shape[1]} bins, spectrum has {spec.data.shape[-1]}")
    mel = np.abs(spec.data) @ fb.T
    return FeatTensor(np.log(mel + LOG_EPS), "mag", {"channels": spec.data.shape[0], "dims": fb.shape[0]})


def phase_features(spec: ComplexSpec, n_bins: int = N_PHASE_BINS) -> FeatTensor:
    if spec.data.shape[-1] < n_bins:
        raise SignalError(f"need at least {n_bins} bins for phase features")
    ph = np.angle(spec.data[..., :n_bins])
    # np.angle returns (-pi, pi]; fold +pi onto -pi
    ph = np.where(ph >= np.pi, ph - 2 * np.pi, ph)
    return FeatTensor(ph, "phase", {"channels": spec.data.shape[0], "dims": n_bins})


def assemble_features(mag: FeatTensor, phase: FeatTensor) -> FeatTensor:
    if mag.data.shape[:-1] != phase.data.shape[:-1]:
        raise SignalError(f"mag {mag.data.shape} and phase {phase.data.shape} disagree")
    n_mag = mag.data.shape[-1]
    data = np.concatenate([mag.data, phase.data], axis=-1)
    return FeatTensor(data, "combined", {"channels": data.shape[0], "mag_dims": n_mag, "dims": data.shape[-1]})


def split_features(feat: FeatTensor) -> tuple[FeatTensor, FeatTensor]:
    n_mag = feat.dims_meta.get("mag_dims", N_MELS)
    return (
        FeatTensor(feat.data[..., :n_mag], "mag", {"channels": feat.data.shape[0], "dims": n_mag}),
        FeatTensor(feat.data[..., n_mag:], "phase", {"channels": feat.data.shape[0], "dims": feat.data.shape[-1] - n_mag}),
    )


def extract_features(wave: MultiWave, cfg: StftConfig = StftConfig(), fb: np.ndarray | None = None) -> FeatTensor:
    """Unnormalised ``[C, T, 160]`` log-mel + phase features of a waveform."""
    if fb is None:
        fb = mel_filterbank(fft_len=cfg.fft_len, sample_rate=wave.sample_rate)
    spec = multi_stft(wave, cfg)
    return assemble_features(logmel(spec, fb), phase_features(spec))


# --------------------------------------------------------------------------- normalisation


def _mag_view(feat: FeatTensor) -> np.ndarray:
    if feat.kind in ("mag", "target"):
        return feat.data
    if feat.kind == "combined":
        return feat.data[..., : feat.dims_meta.get("mag_dims", N_MELS)]
    raise SignalError(f"cannot normalise features of kind {feat.kind!r}")


def compute_stats(train_feats) -> FeatStats:
    """Per-dimension statistics of the magnitude dims, pooled over channels and frames."""
    rows = [_mag_view(f).reshape(-1, _mag_view(f).shape[-1]) for f in train_feats]
    rows = [r for r in rows if r.shape[0]]
    if not rows:
        raise SignalError("no training frames to compute statistics from")
    allrows = np.concatenate(rows, axis=0)
    return FeatStats(allrows.mean(axis=0), np.maximum(allrows.std(axis=0), STD_FLOOR))


def normalize(feat: FeatTensor, stats: FeatStats) -> FeatTensor:
    data = feat.data.copy()
    n = stats.mean.shape[0]
    data[..., :n] = (data[..., :n] - stats.mean) / stats.std
    return FeatTensor(data, feat.kind, {**feat.dims_meta, "normalized": True})


def denormalize(feat: FeatTensor, stats: FeatStats) -> FeatTensor:
    data = feat.data.copy()
    n = stats.mean.shape[0]
    data[..., :n] = data[..., :n] * stats.std + stats.mean
    return FeatTensor(data, feat.kind, {**feat.dims_meta, "normalized": False})


# --------------------------------------------------------------------------- frame stacking


def downsample(feat: FeatTensor, dr: int = 3) -> FeatTensor:
    """Stack ``dr`` frames into super-frames: ``[C, T, F] -> [T // dr, dr * C * F]``.

    Each super-frame is ordered (frame-within-superframe, channel, feature),
    feature innermost. Frames past the last whole super-frame are dropped.
    """
    x = feat.data
    if x.ndim == 2:
        x = x[None]
    C, T, F = x.shape
    if T < dr:
        raise SignalError(f"need at least dr={dr} frames, got {T}")
    Tp = T // dr
    out = x[:, : Tp * dr].reshape(C, Tp, dr, F).transpose(1, 2, 0, 3).reshape(Tp, dr * C * F)
    meta = {"layout": "frame,channel,feature", "dr": dr, "channels": C, "feat_dims": F, "source_kind": feat.kind}
    return FeatTensor(out, "downsampled", meta)


def upsample(data: np.ndarray, dr: int, channels: int) -> np.ndarray:
    """Inverse of :func:`downsample`'s layout: ``[T', dr*C*F] -> [C, T'*dr, F]``."""
    Tp, D = data.shape
    F = D // (dr * channels)
    if F * dr * channels != D:
        raise SignalError(f"width {D} is not divisible by dr*C = {dr * channels}")
    return data.reshape(Tp, dr, channels, F).transpose(2, 0, 1, 3).reshape(channels, Tp * dr, F)


# --------------------------------------------------------------------------- reconstruction


def mel_to_linear(mel_mag: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Map linear-domain mel magnitudes ``[..., M]`` back to ``[..., K]`` bins.

    Minimum-norm pseudo-inverse followed by clipping at zero.
    """
    return np.maximum(np.asarray(mel_mag) @ np.linalg.pinv(fb).T, 0.0)


def spectral_convergence(x: np.ndarray, mag: np.ndarray, cfg: StftConfig) -> float:
    est = np.abs(stft(x, cfg))
    ref = np.linalg.norm(mag)
    return float(np.linalg.norm(est - mag) / ref) if ref > 0 else float(np.linalg.norm(est))


def griffin_lim(
    mag: np.ndarray,
    cfg: StftConfig = StftConfig(),
    iters: int = 60,
    seed: int = 0,
    return_history: bool = False,
):
    """Recover a waveform whose STFT magnitude approximates ``mag`` ``[T, K]``."""
    mag = np.asarray(mag, dtype=np.float64)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    x = istft(mag * phase, cfg)
    history = []
    for _ in range(iters):
        S = stft(x, cfg)
        if return_history:
            history.append(float(np.linalg.norm(np.abs(S) - mag)))
        x = istft(mag * np.exp(1j * np.angle(S)), cfg)
    if return_history:
        history.append(float(np.linalg.norm(np.abs(stft(x, cfg)) - mag)))
        return x, history
    return x


def logmel_to_wave(logmel_feats: np.ndarray, fb: np.ndarray, cfg: StftConfig = StftConfig(), iters: int = 60) -> np.ndarray:
    """Vocoder substitute: un-log a single-channel ``[T, 80]`` log-mel, invert the mel map, run Griffin-Lim."""
    mel = np.maximum(np.exp(logmel_feats) - LOG_EPS, 0.0)
    return griffin_lim(mel_to_linear(mel, fb), cfg, iters)


# --------------------------------------------------------------------------- WAV I/O


def read_wav(path) -> MultiWave:
    sr, data = scipy.io.wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    data = data.T if data.ndim == 2 else data[None]
    return MultiWave(data, int(sr))


def write_wav(path, wave: MultiWave, pcm16: bool = False):
    x = wave.samples.T
    if pcm16:
        x = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
    else:
        x = x.astype(np.float32)
    scipy.io.wavfile.write(path, wave.sample_rate, x[:, 0] if x.shape[1] == 1 else x)
