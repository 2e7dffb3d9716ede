"""Dynamics histograms and transformation precision."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .manifest import Manifest, ManifestError, read_contour
from .synth import DYNAMICS

GRID_LO, GRID_HI, GRID_STEP = -33.0, -3.0, 0.05
KERNEL_SIGMA_DB = 0.31
BOUNDARY_S = 0.05
DEFAULT_DELTAS = (-10.0, -6.0, 0.0, 6.0, 10.0)


def level_grid(lo: float = GRID_LO, hi: float = GRID_HI, step: float = GRID_STEP) -> np.ndarray:
    n = int(round((hi - lo) / step))
    return lo + step * np.arange(n + 1)


def boundary_frames(hop_s: float = 0.0125, guard_s: float = BOUNDARY_S) -> int:
    # small slack so 0.05 / 0.0125 does not round up to 5
    return math.ceil(guard_s / hop_s - 1e-9)


def keep_mask(voiced, hop_s: float = 0.0125, guard_s: float = BOUNDARY_S) -> np.ndarray:
    """Voiced frames further than ``guard_s`` from any unvoiced frame.

    The boundary sits half a frame from its neighbours, so at a 12.5 ms hop
    exactly 4 voiced frames are dropped next to each transition.
    """
    voiced = np.asarray(voiced, dtype=bool)
    n = boundary_frames(hop_s, guard_s)
    unvoiced = ~voiced
    near = unvoiced.copy()
    for s in range(1, n + 1):
        near[s:] |= unvoiced[:-s]
        near[:-s] |= unvoiced[s:]
    return voiced & ~near


def kde_density(values, grid=None, sigma: float = KERNEL_SIGMA_DB) -> np.ndarray | None:
    """Gaussian-kernel density on ``grid`` with unit mass (step * sum == 1).

    Returns None when nothing lands on the grid.
    """
    grid = level_grid() if grid is None else np.asarray(grid)
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        return None
    step = grid[1] - grid[0]
    dens = np.zeros_like(grid)
    for chunk in np.array_split(values, max(1, values.size // 4096)):
        dens += np.exp(-0.5 * ((grid[:, None] - chunk[None, :]) / sigma) ** 2).sum(axis=1)
    mass = dens.sum() * step
    if not mass > 0 or not np.isfinite(mass):
        return None
    return dens / mass


@dataclass
class HistogramCell:
    vowel: str
    dynamics: str
    n_frames: int
    mean_db: float | None
    density: np.ndarray | None

    @property
    def empty(self) -> bool:
        return self.density is None


@dataclass
class HistogramSet:
    grid: np.ndarray
    cells: dict = field(default_factory=dict)
    offset_db: float = 0.0
    sigma_db: float = KERNEL_SIGMA_DB

    def cell(self, vowel: str, dynamics: str) -> HistogramCell:
        return self.cells[(vowel, dynamics)]

    @property
    def vowels(self) -> list[str]:
        return sorted({v for v, _ in self.cells if v != "all"}) + ["all"]

    @property
    def dynamics(self) -> list[str]:
        present = {d for _, d in self.cells}
        return [d for d in DYNAMICS if d in present] + sorted(present - set(DYNAMICS))


@dataclass
class LabelledItem:
    """One evaluation file: log-mel, voicing, labels and optional truth."""

    path: str
    mel: np.ndarray
    voiced: np.ndarray
    vowel: str | None = None
    dynamics: str | None = None
    f0: np.ndarray | None = None
    level_db: np.ndarray | None = None


def load_items(manifest: Manifest, mel_config, features=None, need=("voicing_path",)) -> list[LabelledItem]:
    from .trainer import compute_features

    manifest.require(*need)
    feats = features if features is not None else compute_features(manifest, mel_config)
    items = []
    for row, f in zip(manifest.rows, feats):
        T = f.mel.shape[0]
        voiced = np.ones(T, dtype=bool)
        f0 = level = None
        if row.voicing_path:
            voiced = _aligned(manifest, row, row.voicing_path, T) > 0.5
        if row.f0_path:
            f0 = _aligned(manifest, row, row.f0_path, T)
        if row.level_path:
            level = _aligned(manifest, row, row.level_path, T)
        items.append(LabelledItem(row.path, f.mel, voiced, row.vowel, row.dynamics, f0, level))
    return items


def _aligned(manifest, row, rel, frames):
    _, values = read_contour(manifest.resolve(rel))
    if values.size != frames:
        raise ManifestError(f"{rel}: {values.size} contour frames but {row.path} has {frames} mel frames")
    return values


def dynamics_histograms(model, items: list[LabelledItem], offset_db: float | None = None,
                        grid=None, sigma: float = KERNEL_SIGMA_DB) -> HistogramSet:
    """Pool estimated frame levels (dB) per (vowel, dynamics) and smooth them.

    Estimates are ``10*log10(q) + offset_db``.  ``q`` is only defined up to a
    global constant, so when ``offset_db`` is None and ground-truth levels are
    available the offset is the mean true-minus-estimated level over all kept
    frames; otherwise it is 0.
    """
    grid = level_grid() if grid is None else np.asarray(grid)
    hop = model.mel_config.hop_s
    pooled: dict[tuple[str, str], list[np.ndarray]] = {}
    residuals = []
    for it in items:
        if it.vowel is None or it.dynamics is None:
            raise ManifestError(f"{it.path}: histograms need vowel and dynamics labels")
        keep = keep_mask(it.voiced, hop)
        est = 10.0 * np.log10(model.predict(it.mel))[keep]
        if it.level_db is not None:
            residuals.append(it.level_db[keep] - est)
        for vowel in (it.vowel, "all"):
            pooled.setdefault((vowel, it.dynamics), []).append(est)
    if offset_db is None:
        offset_db = float(np.mean(np.concatenate(residuals))) if residuals and sum(r.size for r in residuals) else 0.0
    hs = HistogramSet(grid, offset_db=offset_db, sigma_db=sigma)
    for key in sorted(pooled):
        vals = np.concatenate(pooled[key]) + offset_db
        dens = kde_density(vals, grid, sigma)
        mean = float(vals.mean()) if vals.size else None
        hs.cells[key] = HistogramCell(key[0], key[1], int(vals.size), mean, dens)
    return hs


def write_histograms(hs: HistogramSet, out_dir) -> None:
    """CSV (long format), gnuplot data (one block per vowel) and JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "histograms.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vowel", "dynamics", "level_db", "density"])
        for (v, d), cell in hs.cells.items():
            if cell.empty:
                continue
            for x, y in zip(hs.grid, cell.density):
                w.writerow([v, d, f"{x:.2f}", repr(float(y))])
    dyn = hs.dynamics
    lines = []
    for v in hs.vowels:
        lines.append(f"# vowel {v}")
        lines.append("# level_db " + " ".join(dyn))
        cols = []
        for d in dyn:
            cell = hs.cells.get((v, d))
            cols.append(cell.density if cell is not None and not cell.empty else np.full(hs.grid.size, np.nan))
        for i, x in enumerate(hs.grid):
            lines.append(f"{x:.2f} " + " ".join(f"{c[i]:.10g}" for c in cols))
        lines += ["", ""]
    (out_dir / "histograms.dat").write_text("\n".join(lines))
    doc = {
        "grid_db": [round(float(x), 10) for x in hs.grid],
        "sigma_db": hs.sigma_db,
        "offset_db": hs.offset_db,
        "cells": [
            {"vowel": c.vowel, "dynamics": c.dynamics, "n_frames": c.n_frames, "mean_db": c.mean_db,
             "empty": c.empty, "density": None if c.empty else [float(y) for y in c.density]}
            for c in hs.cells.values()
        ],
    }
    (out_dir / "histograms.json").write_text(json.dumps(doc, indent=1) + "\n")


# ---------------------------------------------------------------- precision


@dataclass
class PrecisionReport:
    deltas: list[float]
    mean_abs_error: dict
    mean_shift: dict
    sign_agreement: dict
    shifts: dict  # delta -> per-file measured shifts

    def rows(self):
        for d in self.deltas:
            yield {"delta_db": d, "mean_abs_error_db": self.mean_abs_error[d],
                   "mean_shift_db": self.mean_shift[d], "sign_agreement": self.sign_agreement[d],
                   "n_files": len(self.shifts[d])}


def mean_level_db(level_model, mel, voiced) -> float:
    q = level_model.predict(mel)
    v = np.asarray(voiced, dtype=bool)
    if not v.any():
        raise ValueError("no voiced frames to measure")
    return float(np.mean(10.0 * np.log10(q[v])))


def transform_precision(ae, level_model, items: list[LabelledItem], deltas=DEFAULT_DELTAS) -> PrecisionReport:
    """Requested vs measured level shift of ``ae`` transformations.

    The measured shift of a file is the mean dB level (voiced frames) of the
    transformed mel minus that of the original mel, so the 0 dB entry is the
    drift of plain auto-encoding.  ``ae`` needs ``conditioning(level_model,
    item)`` and ``transform(mel, cond, delta_db)``.
    """
    deltas = [float(d) for d in deltas]
    if not deltas:
        raise ValueError("no deltas requested")
    if not items:
        raise ValueError("empty evaluation set")
    shifts = {d: [] for d in deltas}
    for it in items:
        if not np.any(it.voiced):
            continue
        ref = mean_level_db(level_model, it.mel, it.voiced)
        cond = ae.conditioning(level_model, it)
        for d in deltas:
            out = ae.transform(it.mel, cond, d)
            shifts[d].append(mean_level_db(level_model, out, it.voiced) - ref)
    if not shifts[deltas[0]]:
        raise ValueError("no evaluation file has voiced frames")
    shifts = {d: np.array(s) for d, s in shifts.items()}
    err = {d: float(np.mean(np.abs(d - s))) for d, s in shifts.items()}
    mean_shift = {d: float(np.mean(s)) for d, s in shifts.items()}
    sign = {d: float(np.mean(np.sign(s) == np.sign(d))) if d != 0 else float("nan") for d, s in shifts.items()}
    return PrecisionReport(deltas, err, mean_shift, sign, shifts)


def write_precision(report: PrecisionReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = list(report.rows())
    with open(out_dir / "precision.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    (out_dir / "precision.json").write_text(json.dumps(rows, indent=1) + "\n")
