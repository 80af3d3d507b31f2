"""Shoebox image-source RIRs, scene sampling and multichannel rendering.

Geometry is the 4 x 4 x 2.5 m room with a 4-mic, 1 m radius circular array
at the room centre and sources on a coplanar 1.5 m circle.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .signals import SAMPLE_RATE, MultiWave

SOUND_SPEED = 343.0
ROOM_DIMS = (4.0, 4.0, 2.5)
ARRAY_CENTER = (2.0, 2.0, 1.25)
ARRAY_RADIUS = 1.0
MIC_ANGLES = (0.0, 90.0, 180.0, 270.0)
SOURCE_RADIUS = 1.5
T60_CHOICES = (0.3, 0.6, 0.9)
TASK1_ANGLES = tuple(range(0, 360, 5))
TASK2_INTERFERER_ANGLES = tuple(range(30, 331, 30))

FD_TAPS = 81
FD_HALF = FD_TAPS // 2
# fractional delays are tabulated on this grid and linearly interpolated
FD_TABLE_STEPS = 64


class GeometryError(ValueError):
    pass


def circle_point(angle_deg: float, radius: float, center=ARRAY_CENTER) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([center[0] + radius * math.cos(a), center[1] + radius * math.sin(a), center[2]])


def array_positions(center=ARRAY_CENTER, radius=ARRAY_RADIUS, angles=MIC_ANGLES) -> np.ndarray:
    return np.stack([circle_point(a, radius, center) for a in angles])


@dataclass
class RoomScene:
    task: int = 1
    source_angle: float = 0.0
    interferer_angle: float | None = None
    t60: float = 0.6
    room_dims: tuple = ROOM_DIMS
    mic_positions: np.ndarray = field(default_factory=array_positions)
    source_radius: float = SOURCE_RADIUS
    array_center: tuple = ARRAY_CENTER
    sound_speed: float = SOUND_SPEED
    sample_rate: int = SAMPLE_RATE
    anechoic: bool = False

    def __post_init__(self):
        self.mic_positions = np.asarray(self.mic_positions, dtype=np.float64)
        if self.t60 <= 0:
            raise GeometryError("t60 must be positive")
        d = np.linalg.norm(self.mic_positions[:, None] - self.mic_positions[None], axis=-1)
        if np.any(d[~np.eye(len(d), dtype=bool)] <= 0):
            raise GeometryError("microphone positions must be distinct")
        for pos in [self.source_position("target")] + (
            [self.source_position("interferer")] if self.interferer_angle is not None else []
        ):
            check_inside(pos, self.room_dims)

    @property
    def doa_class(self) -> int:
        return int(round(self.source_angle / 5.0)) % 72

    def source_position(self, role: str = "target") -> np.ndarray:
        angle = self.source_angle if role == "target" else self.interferer_angle
        if angle is None:
            raise GeometryError(f"scene has no {role} source")
        return circle_point(angle, self.source_radius, self.array_center)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mic_positions"] = self.mic_positions.tolist()
        d["room_dims"] = list(self.room_dims)
        d["array_center"] = list(self.array_center)
        d["units"] = {"length": "m", "time": "s", "angle": "deg"}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoomScene":
        d = {k: v for k, v in d.items() if k != "units"}
        d["room_dims"] = tuple(d["room_dims"])
        d["array_center"] = tuple(d["array_center"])
        return cls(**d)


@dataclass
class Rir:
    taps: np.ndarray  # [C, L]
    sample_rate: int
    scene: RoomScene
    source_role: str = "target"


def check_inside(pos, room_dims):
    pos = np.asarray(pos)
    if np.any(pos <= 0) or np.any(pos >= np.asarray(room_dims)):
        raise GeometryError(f"source {pos.tolist()} is not strictly inside room {list(room_dims)}")


def sample_scene(task: int, rng_seed) -> RoomScene:
    """Draw a scene uniformly from the task's angle grid and the three T60 values."""
    rng = np.random.default_rng(rng_seed)
    t60 = float(T60_CHOICES[rng.integers(len(T60_CHOICES))])
    if task == 1:
        return RoomScene(task=1, source_angle=float(TASK1_ANGLES[rng.integers(72)]), t60=t60)
    if task == 2:
        inter = float(TASK2_INTERFERER_ANGLES[rng.integers(len(TASK2_INTERFERER_ANGLES))])
        return RoomScene(task=2, source_angle=0.0, interferer_angle=inter, t60=t60)
    raise ValueError(f"task must be 1 or 2, got {task}")


def sabine_reflection(room_dims, t60: float) -> float:
    Lx, Ly, Lz = room_dims
    volume = Lx * Ly * Lz
    surface = 2 * (Lx * Ly + Lx * Lz + Ly * Lz)
    absorption = 0.161 * volume / (surface * t60)
    if absorption > 1:
        raise GeometryError(
            f"t60={t60} s is too short for a {Lx}x{Ly}x{Lz} m room (Sabine absorption {absorption:.3f} > 1)"
        )
    return float(np.clip(math.sqrt(1.0 - absorption), 0.0, 0.9999))


def rir_length(t60: float, fs: int = SAMPLE_RATE) -> int:
    return int(math.ceil(1.25 * t60 * fs))


def fractional_delay_kernel(frac) -> np.ndarray:
    """Hann-windowed sinc taps at offsets ``-40..40`` for delays ``40 + frac``."""
    frac = np.asarray(frac, dtype=np.float64)[..., None]
    n = np.arange(-FD_HALF, FD_HALF + 1) - frac
    window = 0.5 * (1.0 + np.cos(2.0 * np.pi * n / (FD_TAPS + 1)))
    return np.sinc(n) * window


_FD_TABLE = fractional_delay_kernel(np.arange(FD_TABLE_STEPS + 1) / FD_TABLE_STEPS)


def _image_lattice(src, room_dims, max_dist, center):
    """All image sources within ``max_dist`` of ``center``.

    Returns positions ``[N, 3]`` and the number of wall reflections per image.
    """
    src = np.asarray(src, dtype=np.float64)
    dims = np.asarray(room_dims, dtype=np.float64)
    per_axis = []
    for ax in range(3):
        nmax = int(math.ceil(max_dist / (2 * dims[ax]))) + 1
        n = np.arange(-nmax, nmax + 1)
        pos = []
        refl = []
        for p in (0, 1):
            pos.append(2 * n * dims[ax] + (1 - 2 * p) * src[ax])
            refl.append(np.abs(n - p) + np.abs(n))
        pos = np.concatenate(pos)
        refl = np.concatenate(refl)
        keep = np.abs(pos - center[ax]) <= max_dist
        per_axis.append((pos[keep], refl[keep]))
    (px, rx), (py, ry), (pz, rz) = per_axis
    # prune in the xy plane first to keep the 3-D product small
    dxy2 = (px[:, None] - center[0]) ** 2 + (py[None, :] - center[1]) ** 2
    ix, iy = np.nonzero(dxy2 <= max_dist**2)
    dz2 = (pz - center[2]) ** 2
    ok = dxy2[ix, iy][:, None] + dz2[None, :] <= max_dist**2
    i_xy, iz = np.nonzero(ok)
    ix, iy = ix[i_xy], iy[i_xy]
    positions = np.stack([px[ix], py[iy], pz[iz]], axis=1)
    reflections = rx[ix] + ry[iy] + rz[iz]
    return positions, reflections


def _render_impulses(delays, amplitudes, length):
    """Sum windowed-sinc fractional-delay impulses into a length-``length`` response."""
    start = np.floor(delays).astype(np.int64)
    frac = delays - start
    pos = frac * FD_TABLE_STEPS
    q = np.minimum(np.floor(pos).astype(np.int64), FD_TABLE_STEPS - 1)
    w_hi = pos - q
    # accumulate on the padded grid so taps before t=0 are simply discarded
    padded = length + 2 * FD_HALF
    keep = (start + FD_HALF >= 0) & (start - FD_HALF < length)
    start, q, w_hi, amplitudes = start[keep], q[keep], w_hi[keep], amplitudes[keep]
    n_rows = FD_TABLE_STEPS + 1
    flat = (start + FD_HALF) * n_rows
    acc = np.bincount(flat + q, weights=amplitudes * (1 - w_hi), minlength=padded * n_rows)
    acc += np.bincount(flat + q + 1, weights=amplitudes * w_hi, minlength=padded * n_rows)
    acc = acc[: padded * n_rows].reshape(padded, n_rows)
    used = np.nonzero(np.any(acc != 0, axis=0))[0]
    nfft = 1 << int(math.ceil(math.log2(padded + FD_TAPS)))
    acc_f = np.fft.rfft(acc[:, used], n=nfft, axis=0)
    ker_f = np.fft.rfft(_FD_TABLE[used].T, n=nfft, axis=0)
    full = np.fft.irfft(np.sum(acc_f * ker_f, axis=1), n=nfft)
    # kernel tap j sits at start + j - FD_HALF; padded index start + FD_HALF
    return full[2 * FD_HALF : 2 * FD_HALF + length]


def _schroeder_t60(energy: np.ndarray, fs: int) -> float:
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        raise ValueError("impulse response has no energy")
    with np.errstate(divide="ignore"):
        edc_db = 10 * np.log10(edc / edc[0])
    seg = np.nonzero((edc_db <= -5) & (edc_db >= -35))[0]
    if len(seg) < 10 or edc_db[seg[-1]] > -30 or edc_db[seg[0]] < -10:
        raise ValueError("decay curve does not span -5..-35 dB; no usable decay")
    slope, _ = np.polyfit(seg / fs, edc_db[seg], 1)
    if slope >= 0:
        raise ValueError("energy decay curve is not decaying")
    return float(-60.0 / slope)


def estimate_t60(taps: np.ndarray, fs: int = SAMPLE_RATE) -> float:
    """Reverberation time from the Schroeder decay curve (-5 to -35 dB line fit)."""
    return _schroeder_t60(np.asarray(taps, dtype=np.float64) ** 2, fs)


def highpass(taps: np.ndarray, fs: int = SAMPLE_RATE, cutoff: float = 100.0) -> np.ndarray:
    """Allen-Berkley DC-blocking filter; removes the low-frequency build-up of positive image sums."""
    w = 2 * np.pi * cutoff / fs
    r1 = math.exp(-w)
    b = [1.0, -(1.0 + r1), r1]
    a = [1.0, -2 * r1 * math.cos(w), r1 * r1]
    return lfilter(b, a, taps, axis=-1)


def image_rir(
    scene: RoomScene,
    role: str = "target",
    length: int | None = None,
    reflection: float | None = None,
) -> Rir:
    """Image-source room impulse responses from one source to every microphone.

    Wall reflection is uniform, from Sabine's formula unless ``reflection``
    is given; ``scene.anechoic`` keeps only the direct path. Responses are
    high-passed at 100 Hz.
    """
    fs, c = scene.sample_rate, scene.sound_speed
    src = scene.source_position(role)
    check_inside(src, scene.room_dims)
    if scene.anechoic:
        beta = 0.0
    elif reflection is not None:
        beta = float(np.clip(reflection, 0.0, 0.9999))
    else:
        beta = sabine_reflection(scene.room_dims, scene.t60)
    if length is None:
        length = rir_length(scene.t60, fs)
    mics = scene.mic_positions
    direct = np.linalg.norm(mics - src, axis=1)
    if length <= int(np.ceil(direct.max() / c * fs)):
        raise GeometryError(f"RIR length {length} shorter than direct-path delay")

    center = mics.mean(axis=0)
    reach = (length + FD_HALF) / fs * c + np.linalg.norm(mics - center, axis=1).max()
    if beta == 0.0:
        positions, reflections = src[None], np.zeros(1, dtype=np.int64)
    else:
        positions, reflections = _image_lattice(src, scene.room_dims, reach, center)
    gains = beta ** reflections.astype(np.float64)
    taps = np.empty((len(mics), length))
    for m, mic in enumerate(mics):
        dist = np.linalg.norm(positions - mic, axis=1)
        taps[m] = _render_impulses(dist / c * fs, gains / (4 * np.pi * dist), length)
    return Rir(highpass(taps, fs), fs, scene, role)


def early_rir(rir: Rir, early_ms: float = 50.0) -> np.ndarray:
    """Direct path plus the first ``early_ms`` of each channel's response."""
    scene = rir.scene
    src = scene.source_position(rir.source_role)
    direct = np.linalg.norm(scene.mic_positions - src, axis=1) / scene.sound_speed * rir.sample_rate
    out = rir.taps.copy()
    for m, d in enumerate(direct):
        cut = int(np.ceil(d + early_ms * 1e-3 * rir.sample_rate))
        out[m, cut:] = 0.0
    return out


@dataclass
class Rendered:
    mixture: MultiWave
    images: list  # reverberant image per source, MultiWave [C, N]
    clean: list  # direct-path image per source, MultiWave [C, N]
    early: list  # direct + first 50 ms image per source
    rirs: list


def render_scene(sources, scene: RoomScene, rir_len: int | None = None) -> Rendered:
    """Convolve each mono source with its RIRs and mix.

    With two sources each reverberant image is scaled to a common peak
    amplitude before summing; the same factor applies to its clean and early
    references.
    """
    sources = [np.asarray(s, dtype=np.float64).ravel() for s in sources]
    if len(sources) > 2:
        raise ValueError(f"at most 2 sources supported, got {len(sources)}")
    if scene.task == 2 and len(sources) != 2:
        raise ValueError("task 2 scenes need exactly 2 sources")
    n = max(len(s) for s in sources)
    sources = [np.pad(s, (0, n - len(s))) for s in sources]
    roles = ["target", "interferer"][: len(sources)]

    images, cleans, earlies, rirs = [], [], [], []
    anechoic_scene = replace(scene, anechoic=True)
    for src, role in zip(sources, roles):
        rir = image_rir(scene, role, length=rir_len)
        dry = image_rir(anechoic_scene, role, length=rir.taps.shape[1])
        early = early_rir(rir)
        images.append(np.stack([fftconvolve(src, h)[:n] for h in rir.taps]))
        cleans.append(np.stack([fftconvolve(src, h)[:n] for h in dry.taps]))
        earlies.append(np.stack([fftconvolve(src, h)[:n] for h in early]))
        rirs.append(rir)

    if len(images) == 2:
        ref = np.abs(images[0]).max()
        for i in range(2):
            peak = np.abs(images[i]).max()
            g = ref / peak if peak > 0 else 0.0
            images[i] = images[i] * g
            cleans[i] = cleans[i] * g
            earlies[i] = earlies[i] * g
    mixture = images[0].copy()
    for img in images[1:]:
        mixture = mixture + img
    fs = scene.sample_rate
    return Rendered(
        MultiWave(mixture, fs),
        [MultiWave(x, fs) for x in images],
        [MultiWave(x, fs) for x in cleans],
        [MultiWave(x, fs) for x in earlies],
        rirs,
    )
