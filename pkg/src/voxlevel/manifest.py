"""JSON-lines corpus manifests.

One row per audio file.  Paths are stored relative to the manifest's
directory so that a corpus can be moved (and so that two corpora generated
with the same seed are byte-identical wherever they live).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

FIELDS = ("path", "speaker", "group", "vowel", "dynamics", "gain_db", "level_path", "f0_path", "voicing_path")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRow:
    path: str
    speaker: str | None = None
    group: str | None = None
    vowel: str | None = None
    dynamics: str | None = None
    gain_db: float | None = None
    level_path: str | None = None
    f0_path: str | None = None
    voicing_path: str | None = None
    line: int = 0

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k in FIELDS}
        return json.dumps(d, sort_keys=False)


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __getitem__(self, i):
        return self.rows[i]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def require(self, *names: str) -> None:
        """Raise on the first row missing any of ``names``."""
        if not self.rows:
            raise ManifestError("manifest is empty")
        for row in self.rows:
            for name in names:
                if getattr(row, name) in (None, ""):
                    raise ManifestError(f"manifest line {row.line} ({row.path}): missing field {name!r}")

    def check_files(self) -> None:
        for row in self.rows:
            for name in ("path", "level_path", "f0_path", "voicing_path"):
                rel = getattr(row, name)
                if rel and not self.resolve(rel).is_file():
                    raise FileNotFoundError(f"manifest line {row.line}: {name} {rel} not found")

    def subset(self, rows) -> "Manifest":
        return Manifest(list(rows), self.root)


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    known = {f.name for f in fields(ManifestRow)} - {"line"}
    rows = []
    for lineno, text in enumerate(path.read_text().splitlines(), start=1):
        if not text.strip():
            continue
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(d, dict) or "path" not in d:
            raise ManifestError(f"{path}:{lineno}: row must be an object with a 'path'")
        rows.append(ManifestRow(**{k: v for k, v in d.items() if k in known}, line=lineno))
    return Manifest(rows, path.parent)


def write_manifest(path: str | Path, rows) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in rows))


def read_contour(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a ``time_s,value`` CSV into (times, values)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]


def write_contour(path: str | Path, times, values) -> None:
    lines = ["time_s,value"]
    lines += [f"{float(t)!r},{float(v)!r}" for t, v in zip(times, values)]
    Path(path).write_text("\n".join(lines) + "\n")
