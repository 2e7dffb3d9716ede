"""Synthetic singing corpus with known voice level, f0, voicing and gain.

Each file is additive harmonic synthesis.  The true level contour ``l`` (dB)
sets the signal power, and it also sets the timbre: the harmonic rolloff
exponent falls linearly from 2.5 at -33 dB to 1.0 at -3 dB and the number of
audible harmonics grows from 8 to 40.  A vowel formant envelope is applied,
a little aspiration noise is mixed in, unvoiced gaps are cut out, and the
whole file is scaled by the recording gain ``g``.  Before the gain, the frame
power is ``REF_POWER * 10**(l/10)`` (plus the fixed noise share).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .dsp import AudioClip, write_wav
from .manifest import Manifest, ManifestRow, write_contour, write_manifest

log = logging.getLogger(__name__)

DYNAMICS = ("pp", "mp", "mf", "f", "ff")
DYNAMIC_RANGES = {
    "pp": (-33.0, -21.0),
    "mp": (-29.0, -17.0),
    "mf": (-24.0, -12.0),
    "f": (-19.0, -7.0),
    "ff": (-15.0, -3.0),
}
# (F1, F2, F3) in Hz
VOWELS = {
    "a": (800.0, 1200.0, 2500.0),
    "e": (400.0, 2100.0, 2700.0),
    "i": (280.0, 2300.0, 3000.0),
    "o": (450.0, 800.0, 2600.0),
    "u": (320.0, 800.0, 2300.0),
}
FORMANT_GAIN_DB = (20.0, 16.0, 12.0)
FORMANT_WIDTH_HZ = (90.0, 130.0, 180.0)

# -12 dB of headroom: l = -3 dB at 0 dB gain gives an RMS of 0.177
REF_POWER = 0.0625
MAX_HARMONICS = 48
CONTROL_STEP = 48  # samples between amplitude control points (2 ms)
RAMP_S = 0.01


@dataclass
class SynthSpec:
    n_speakers: int = 4
    files_per_speaker: int = 50
    duration_s: float = 2.5
    level_range_db: tuple[float, float] = (-33.0, -3.0)
    gain_mode: str = "file"
    gain_range_db: tuple[float, float] = (-12.0, 0.0)
    vowels: tuple[str, ...] = tuple(VOWELS)
    dynamics: dict = field(default_factory=lambda: dict(DYNAMIC_RANGES))
    f0_range: tuple[float, float] = (110.0, 440.0)
    vibrato_hz: float = 5.0
    vibrato_cents: float = 30.0
    walk_s: float = 0.25
    gaps_per_file: tuple[int, int] = (1, 2)
    gap_s: tuple[float, float] = (0.12, 0.3)
    noise_db: float = -30.0
    sample_rate: int = 24000
    hop_s: float = 0.0125
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.level_range_db
        if not lo < hi:
            raise ValueError(f"degenerate level range {self.level_range_db}")
        if self.gain_range_db[0] > self.gain_range_db[1]:
            raise ValueError(f"bad gain range {self.gain_range_db}")
        if self.gain_mode not in ("file", "speaker"):
            raise ValueError(f"gain_mode must be 'file' or 'speaker', got {self.gain_mode!r}")
        if self.n_speakers < 1 or self.files_per_speaker < 1:
            raise ValueError("need at least one speaker and one file per speaker")
        unknown = set(self.vowels) - set(VOWELS)
        if unknown:
            raise ValueError(f"unknown vowels {sorted(unknown)}")
        if len(self.vowels) < 1:
            raise ValueError("need at least one vowel")
        bounds = [self.dynamics[d] for d in DYNAMICS]
        for (a_lo, a_hi), (b_lo, b_hi) in zip(bounds, bounds[1:]):
            if not (a_lo < b_lo and a_hi < b_hi):
                raise ValueError("dynamics sub-ranges must be ordered pp < mp < mf < f < ff")
        for d_lo, d_hi in bounds:
            if not (lo <= d_lo < d_hi <= hi):
                raise ValueError(f"dynamics range ({d_lo}, {d_hi}) outside level range {self.level_range_db}")
        if self.gap_s[0] <= 0 or self.duration_s < 4 * self.gap_s[1]:
            raise ValueError("files too short for the requested unvoiced gaps")


@dataclass
class SynthFile:
    """One rendered file plus its frame-grid ground truth."""

    audio: AudioClip
    times: np.ndarray
    level_db: np.ndarray
    f0_hz: np.ndarray
    voiced: np.ndarray
    gain_db: float


def rolloff_exponent(level_db, level_range_db=(-33.0, -3.0)):
    lo, hi = level_range_db
    u = np.clip((np.asarray(level_db) - lo) / (hi - lo), 0.0, 1.0)
    return 2.5 - 1.5 * u


def harmonic_count(level_db, level_range_db=(-33.0, -3.0)):
    lo, hi = level_range_db
    u = np.clip((np.asarray(level_db) - lo) / (hi - lo), 0.0, 1.0)
    return 8.0 + 32.0 * u


def formant_envelope_db(freqs, formants, scale: float = 1.0) -> np.ndarray:
    freqs = np.asarray(freqs, dtype=np.float64)
    env = np.zeros_like(freqs)
    for f, gain, width in zip(formants, FORMANT_GAIN_DB, FORMANT_WIDTH_HZ):
        env += gain * np.exp(-0.5 * ((freqs - scale * f) / width) ** 2)
    return env


def harmonic_amplitudes(level_db, f0_hz, formants, formant_scale=1.0, sample_rate=24000,
                        level_range_db=(-33.0, -3.0)) -> np.ndarray:
    """``[n, MAX_HARMONICS]`` amplitudes normalised to unit power per row."""
    level_db = np.atleast_1d(np.asarray(level_db, dtype=np.float64))
    f0_hz = np.atleast_1d(np.asarray(f0_hz, dtype=np.float64))
    k = np.arange(1, MAX_HARMONICS + 1, dtype=np.float64)
    freqs = f0_hz[:, None] * k
    rho = rolloff_exponent(level_db, level_range_db)[:, None]
    count = harmonic_count(level_db, level_range_db)[:, None]
    amp = k ** (-rho)
    amp = amp / (1.0 + np.exp((k - count) / 1.5))
    amp *= 10.0 ** (formant_envelope_db(freqs, formants, formant_scale) / 20.0)
    nyquist_margin = 0.46 * sample_rate
    amp *= 1.0 / (1.0 + np.exp((freqs - nyquist_margin) / 100.0))
    power = 0.5 * np.sum(amp * amp, axis=1, keepdims=True)
    return amp / np.sqrt(power)


def voicing_envelope(n_samples: int, sample_rate: int, gaps) -> np.ndarray:
    """1 inside voiced stretches, 0 in gaps, raised-cosine ramps of 10 ms."""
    t = np.arange(n_samples) / sample_rate
    env = np.ones(n_samples)
    edges = [(0.0, 0.0)] + list(gaps) + [(n_samples / sample_rate, n_samples / sample_rate)]
    for start, stop in gaps:
        env[(t >= start) & (t < stop)] = 0.0
    for (_, seg_start), (seg_stop, _) in zip(edges[:-1], edges[1:]):
        # voiced segment [seg_start, seg_stop): fade in and out
        rise = np.clip((t - seg_start) / RAMP_S, 0.0, 1.0)
        fall = np.clip((seg_stop - t) / RAMP_S, 0.0, 1.0)
        inside = (t >= seg_start) & (t < seg_stop)
        env[inside] *= (0.5 - 0.5 * np.cos(np.pi * np.minimum(rise, fall)))[inside]
    return env


def render(level_db, f0_hz, gaps, vowel: str, gain_db: float, *, formant_scale: float = 1.0,
           noise_db: float = -30.0, sample_rate: int = 24000, hop_s: float = 0.0125,
           duration_s: float | None = None, rng=None, level_range_db=(-33.0, -3.0)) -> AudioClip:
    """Render audio from frame-grid controls (one value per ``hop_s``).

    ``gaps`` is a list of (start_s, stop_s) unvoiced intervals.  ``f0_hz`` must
    be positive on every frame (values inside gaps only set the phase).
    """
    level_db = np.asarray(level_db, dtype=np.float64)
    f0_hz = np.asarray(f0_hz, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    n_frames = level_db.size
    duration_s = duration_s if duration_s is not None else n_frames * hop_s
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    frame_t = np.arange(n_frames) * hop_s
    level_t = np.interp(t, frame_t, level_db)
    f0_t = np.interp(t, frame_t, f0_hz)
    phase = 2.0 * np.pi * np.cumsum(f0_t) / sample_rate

    ctrl = np.arange(0, n + CONTROL_STEP, CONTROL_STEP)
    ctrl_t = ctrl / sample_rate
    amps = harmonic_amplitudes(
        np.interp(ctrl_t, frame_t, level_db), np.interp(ctrl_t, frame_t, f0_hz),
        VOWELS[vowel], formant_scale, sample_rate, level_range_db,
    )
    i0 = np.arange(n) // CONTROL_STEP
    w = (np.arange(n) % CONTROL_STEP / CONTROL_STEP)[:, None]
    amp_t = amps[i0] * (1.0 - w) + amps[i0 + 1] * w
    k = np.arange(1, MAX_HARMONICS + 1)
    voice = np.sum(amp_t * np.sin(phase[:, None] * k), axis=1)
    noise = rng.standard_normal(n) * 10.0 ** (noise_db / 20.0)

    envelope = math.sqrt(REF_POWER) * 10.0 ** (level_t / 20.0) * voicing_envelope(n, sample_rate, gaps)
    y = (voice + noise) * envelope * 10.0 ** (gain_db / 20.0)
    return AudioClip(y, sample_rate)


def _level_walk(rng, n_frames, lo, hi, walk_frames):
    z = gaussian_filter1d(rng.standard_normal(n_frames + 8 * int(walk_frames)), walk_frames, mode="nearest")
    z = z[4 * int(walk_frames): 4 * int(walk_frames) + n_frames]
    z = (z - z.mean()) / (z.std() + 1e-12)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return mid + half * np.tanh(0.8 * z)


def _gaps(rng, spec: SynthSpec):
    n_gaps = int(rng.integers(spec.gaps_per_file[0], spec.gaps_per_file[1] + 1))
    gaps: list[tuple[float, float]] = []
    margin = 0.3
    for _ in range(100):
        if len(gaps) == n_gaps:
            break
        length = rng.uniform(*spec.gap_s)
        start = rng.uniform(margin, spec.duration_s - margin - length)
        stop = start + length
        if all(stop + margin < a or start > b + margin for a, b in gaps):
            gaps.append((start, stop))
    return sorted(gaps)


def _speaker_traits(spec: SynthSpec, speaker: int):
    rng = np.random.default_rng([spec.seed, 1_000_003, speaker])
    lo, hi = spec.f0_range
    base_f0 = math.exp(rng.uniform(math.log(lo * 1.2), math.log(hi / 1.2)))
    formant_scale = rng.uniform(0.92, 1.08)
    gain = rng.uniform(*spec.gain_range_db)
    return base_f0, formant_scale, gain


def synthesize_file(spec: SynthSpec, speaker: int, index: int) -> tuple[SynthFile, str, str]:
    """Render file ``index`` of ``speaker``; returns (file, vowel, dynamics)."""
    base_f0, formant_scale, speaker_gain = _speaker_traits(spec, speaker)
    rng = np.random.default_rng([spec.seed, speaker, index])
    dynamics = DYNAMICS[index % len(DYNAMICS)]
    vowel = spec.vowels[(index // len(DYNAMICS)) % len(spec.vowels)]
    n = int(round(spec.duration_s * spec.sample_rate))
    hop = int(round(spec.hop_s * spec.sample_rate))
    n_frames = -(-n // hop)
    times = np.arange(n_frames) * spec.hop_s

    lo, hi = spec.dynamics[dynamics]
    level = _level_walk(rng, n_frames, lo, hi, spec.walk_s / spec.hop_s)
    semitones = rng.uniform(-3.0, 3.0)
    note = float(np.clip(base_f0 * 2.0 ** (semitones / 12.0), *spec.f0_range))
    vib_phase = rng.uniform(0.0, 2.0 * np.pi)
    f0 = note * 2.0 ** (spec.vibrato_cents / 1200.0 * np.sin(2.0 * np.pi * spec.vibrato_hz * times + vib_phase))
    gaps = _gaps(rng, spec)
    gain = speaker_gain if spec.gain_mode == "speaker" else float(rng.uniform(*spec.gain_range_db))
    noise_rng = np.random.default_rng([spec.seed, speaker, index, 7])

    audio = render(level, f0, gaps, vowel, gain, formant_scale=formant_scale, noise_db=spec.noise_db,
                   sample_rate=spec.sample_rate, hop_s=spec.hop_s, duration_s=spec.duration_s,
                   rng=noise_rng, level_range_db=spec.level_range_db)
    voiced = np.ones(n_frames, dtype=bool)
    for start, stop in gaps:
        voiced[(times >= start) & (times < stop)] = False
    f0_out = np.where(voiced, f0, 0.0)
    return SynthFile(audio, times, level, f0_out, voiced, gain), vowel, dynamics


def synthesize_corpus(spec: SynthSpec, out_dir: str | Path, threads: int = 1) -> Manifest:
    """Write WAVs, ground-truth CSVs and ``manifest.jsonl`` under ``out_dir``."""
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    (out_dir / "truth").mkdir(parents=True, exist_ok=True)
    jobs = [(s, i) for s in range(spec.n_speakers) for i in range(spec.files_per_speaker)]

    def make(job):
        speaker, index = job
        sf, vowel, dynamics = synthesize_file(spec, speaker, index)
        name = f"s{speaker:02d}_f{index:03d}"
        write_wav(out_dir / "audio" / f"{name}.wav", sf.audio)
        write_contour(out_dir / "truth" / f"{name}_level.csv", sf.times, sf.level_db)
        write_contour(out_dir / "truth" / f"{name}_f0.csv", sf.times, sf.f0_hz)
        write_contour(out_dir / "truth" / f"{name}_voicing.csv", sf.times, sf.voiced.astype(float))
        return ManifestRow(
            path=f"audio/{name}.wav", speaker=f"s{speaker:02d}", group=f"s{speaker:02d}",
            vowel=vowel, dynamics=dynamics, gain_db=float(sf.gain_db),
            level_path=f"truth/{name}_level.csv", f0_path=f"truth/{name}_f0.csv",
            voicing_path=f"truth/{name}_voicing.csv",
        )

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(make, jobs))
    else:
        rows = [make(j) for j in jobs]
    write_manifest(out_dir / "manifest.jsonl", rows)
    log.info("wrote %d files to %s", len(rows), out_dir)
    for lineno, row in enumerate(rows, start=1):
        row.line = lineno
    return Manifest(rows, out_dir)
