"""Audio I/O, mel-spectrograms, frame power contours and frame normalisation.

All analysis runs at a fixed rate (24 kHz by default) on a 12.5 ms frame
grid.  Frame ``t`` is the window centred on sample ``t * hop``; the signal is
zero-padded at both ends, so a clip of ``n`` samples has ``ceil(n / hop)``
frames.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

POWER_FLOOR = 1e-10
# mel values are log-magnitudes; a magnitude of 1e-5 is a power of 1e-10
MAG_FLOOR = math.sqrt(POWER_FLOOR)
LOG_FLOOR = math.log(MAG_FLOOR)
POWER_MODES = ("plain", "a_weighted")

# grid for frame_normalize output; keeps the normalised frame exactly
# invariant to a constant added to every bin
NORM_QUANTUM = 2.0 ** -20


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 24000
    n_mels: int = 80
    hop_s: float = 0.0125
    window_s: float = 0.05
    power_mode: str = "plain"
    n_fft: int = 2048
    fmin: float = 0.0
    fmax: float | None = None

    def __post_init__(self):
        if self.power_mode not in POWER_MODES:
            raise ValueError(f"unknown power_mode {self.power_mode!r}; expected one of {POWER_MODES}")
        if self.sample_rate <= 0 or self.n_mels <= 0 or self.hop_s <= 0 or self.window_s <= 0:
            raise ValueError(f"MelConfig values must be positive: {self}")

    @property
    def hop(self) -> int:
        return int(round(self.hop_s * self.sample_rate))

    @property
    def window(self) -> int:
        return int(round(self.window_s * self.sample_rate))

    def fingerprint(self) -> str:
        """Short hash of the fields that shape the estimator input."""
        d = asdict(self)
        d.pop("power_mode")  # target choice, not input layout
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MelConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, value in d.items():
            if key not in known:
                continue
            if key in ("sample_rate", "n_mels", "n_fft"):
                value = int(value)
            elif key in ("hop_s", "window_s", "fmin"):
                value = float(value)
            elif key == "fmax":
                value = None if value in (None, "", "none", "None") else float(value)
            kw[key] = value
        return cls(**kw)


def read_config_file(path: str | Path) -> dict[str, str]:
    """Read a flat ``key = value`` file (``#`` comments allowed)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    text = Path(path).read_text()
    parser.read_string("[config]\n" + text)
    return dict(parser["config"])


def load_mel_config(path: str | Path) -> MelConfig:
    return MelConfig.from_dict(read_config_file(path))


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioError(f"audio must be a non-empty mono array, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def scaled(self, gain: float) -> "AudioClip":
        return AudioClip(self.samples * gain, self.sample_rate)


@dataclass
class MelSpectrogram:
    """``values`` is ``[frames, n_mels]`` natural-log magnitudes."""

    values: np.ndarray
    hop_s: float = 0.0125

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


def read_wav(path: str | Path) -> AudioClip:
    """Read PCM 8/16/24/32-bit or float WAV; multi-channel input is averaged."""
    try:
        sr, data = wavfile.read(str(path))
    except (ValueError, EOFError) as exc:
        raise AudioError(f"cannot read WAV {path}: {exc}") from exc
    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype.kind == "f":
        x = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported WAV sample type {data.dtype} in {path}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(x, int(sr))


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write 64-bit float WAV (lossless for generated material)."""
    wavfile.write(str(path), clip.sample_rate, clip.samples.astype(np.float64))


def resample(clip: AudioClip, sample_rate: int) -> AudioClip:
    if clip.sample_rate == sample_rate:
        return clip
    ratio = Fraction(sample_rate, clip.sample_rate)
    y = resample_poly(clip.samples, ratio.numerator, ratio.denominator)
    return AudioClip(y, sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _n_fft(config: MelConfig) -> int:
    return max(config.n_fft, config.window)


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """Triangular filters with unit peak, ``[n_mels, n_fft // 2 + 1]``."""
    n_fft = _n_fft(config)
    fmax = config.fmax or config.sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(fmax), config.n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * config.sample_rate / n_fft
    lo, centre, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (centre - lo)
    falling = (hi - freqs) / (hi - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def _frames(x: np.ndarray, config: MelConfig) -> np.ndarray:
    hop, win = config.hop, config.window
    if x.size < win:
        raise AudioError(
            f"clip too short: {x.size / config.sample_rate:.4f} s, minimum duration is "
            f"{config.window_s} s (one analysis window)"
        )
    n_frames = -(-x.size // hop)
    padded = np.pad(x, (win // 2, win // 2 + hop))
    view = np.lib.stride_tricks.sliding_window_view(padded, win)
    return view[: n_frames * hop : hop]


def _analysis_samples(clip: AudioClip, config: MelConfig) -> np.ndarray:
    return resample(clip, config.sample_rate).samples


def n_frames_for(n_samples: int, config: MelConfig) -> int:
    return -(-n_samples // config.hop)


def mel_spectrogram(clip: AudioClip, config: MelConfig | None = None) -> MelSpectrogram:
    config = config or MelConfig()
    frames = _frames(_analysis_samples(clip, config), config)
    window = get_window("hann", config.window)
    spec = np.abs(np.fft.rfft(frames * window, n=_n_fft(config)))
    mel = spec @ mel_filterbank(config).T
    return MelSpectrogram(np.log(np.maximum(mel, MAG_FLOOR)), config.hop_s)


def a_weighting(freqs) -> np.ndarray:
    """IEC 61672 A-weighting magnitude (linear, 0 dB at 1 kHz)."""
    f2 = np.asarray(freqs, dtype=np.float64) ** 2
    num = 12194.0**2 * f2**2
    den = (f2 + 20.6**2) * np.sqrt((f2 + 107.7**2) * (f2 + 737.9**2)) * (f2 + 12194.0**2)
    ra = np.divide(num, den, out=np.zeros_like(f2), where=den > 0)
    return ra * 10.0 ** (2.0 / 20.0)


def power_contour(clip: AudioClip, config: MelConfig | None = None, mode: str | None = None) -> np.ndarray:
    """Per-frame mean-square power on the mel frame grid, floored at 1e-10.

    ``plain`` is the mean squared sample value of each (rectangular) window;
    ``a_weighted`` is the same power after weighting the window's spectrum
    with the A curve (Parseval, so a flat weight reproduces ``plain``).
    """
    config = config or MelConfig()
    mode = mode or config.power_mode
    if mode not in POWER_MODES:
        raise ValueError(f"unknown power mode {mode!r}; expected one of {POWER_MODES}")
    frames = _frames(_analysis_samples(clip, config), config)
    n = frames.shape[1]
    if mode == "plain":
        p = np.mean(frames * frames, axis=1)
    else:
        spec = np.fft.rfft(frames, axis=1)
        freqs = np.fft.rfftfreq(n, 1.0 / config.sample_rate)
        weight = 2.0 * a_weighting(freqs) ** 2
        weight[0] /= 2.0
        if n % 2 == 0:
            weight[-1] /= 2.0
        p = (np.abs(spec) ** 2 @ weight) / (n * n)
    return np.maximum(p, POWER_FLOOR)


def frame_normalize(mel):
    """Subtract each frame's mean over mel bins.

    The result is snapped to a 2**-20 grid, so adding any constant to all bins
    of a frame leaves the output bit-identical.  Accepts a
    :class:`MelSpectrogram` or an array whose last axis is the mel axis.
    """
    if isinstance(mel, MelSpectrogram):
        return MelSpectrogram(frame_normalize(mel.values), mel.hop_s)
    x = np.asarray(mel, dtype=np.float64)
    centred = x - x.mean(axis=-1, keepdims=True)
    # + 0.0 turns -0.0 into 0.0
    return np.round(centred / NORM_QUANTUM) * NORM_QUANTUM + 0.0


def to_db(power) -> np.ndarray:
    return 10.0 * np.log10(np.asarray(power, dtype=np.float64))


# ---------------------------------------------------------------- mel files

MEL_MAGIC = b"VXLMEL01"


def save_mel_matrix(path, mel: MelSpectrogram) -> None:
    """Write a mel matrix: CSV for ``.csv`` paths, otherwise raw float64.

    Raw layout: magic, uint32 frames, uint32 bins, float64 hop, then the
    row-major little-endian float64 values.  CSV carries the same fields in a
    leading ``#`` comment line.
    """
    path = Path(path)
    v = np.ascontiguousarray(mel.values, dtype="<f8")
    if path.suffix.lower() == ".csv":
        lines = [f"# frames={v.shape[0]} bins={v.shape[1]} hop_s={float(mel.hop_s)!r}"]
        lines += [",".join(repr(float(x)) for x in row) for row in v]
        path.write_text("\n".join(lines) + "\n")
        return
    with open(path, "wb") as fh:
        fh.write(MEL_MAGIC)
        fh.write(struct.pack("<IId", v.shape[0], v.shape[1], mel.hop_s))
        fh.write(v.tobytes())


def load_mel_matrix(path) -> MelSpectrogram:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        text = path.read_text().splitlines()
        if not text or not text[0].startswith("#"):
            raise AudioError(f"{path}: missing mel header line")
        meta = dict(item.split("=", 1) for item in text[0][1:].split())
        values = np.loadtxt(text[1:], delimiter=",", ndmin=2)
        if values.shape != (int(meta["frames"]), int(meta["bins"])):
            raise AudioError(f"{path}: header says {meta['frames']}x{meta['bins']}, data is {values.shape}")
        return MelSpectrogram(values, float(meta["hop_s"]))
    raw = path.read_bytes()
    if raw[:8] != MEL_MAGIC or len(raw) < 24:
        raise AudioError(f"{path}: not a mel matrix file")
    frames, bins, hop = struct.unpack("<IId", raw[8:24])
    if len(raw) != 24 + 8 * frames * bins:
        raise AudioError(f"{path}: expected {frames}x{bins} values, file size disagrees")
    values = np.frombuffer(raw, dtype="<f8", offset=24).reshape(frames, bins).astype(np.float64)
    return MelSpectrogram(values, hop)
