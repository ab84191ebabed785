"""Energy-based selection of the coefficients worth modeling.

For each image the squared coefficients are sorted in decreasing order and
the shortest prefix holding at least a fraction ``P`` of the image's energy is
kept. The model then uses the union of these prefixes over all images, so
every image individually keeps at least ``100 P`` percent of its energy.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from isofmm.errors import ConfigError, DataError
from isofmm.wavelet import CoefSet


@dataclass
class CompressionMask:
    retained: np.ndarray  # sorted 0-based positions
    level: float
    n_total: int
    per_image_energy: np.ndarray

    @property
    def t_star(self) -> int:
        return int(self.retained.size)

    @property
    def ratio(self) -> float:
        return self.n_total / self.t_star

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.retained, dtype="<i8").tobytes())
        h.update(str(self.n_total).encode())
        return h.hexdigest()[:16]


def _check_level(P: float) -> None:
    if not 0 < P <= 1:
        raise ConfigError(f"energy level P must lie in (0, 1], got {P}")


def _decreasing_order(row: np.ndarray) -> np.ndarray:
    # stable sort on -x^2 keeps ties in ascending position
    return np.argsort(-(row * row), kind="stable")


def energy_cusum(coef_row) -> np.ndarray:
    """Relative cumulative energy of the coefficients sorted by decreasing size."""
    row = np.asarray(coef_row, dtype=np.float64)
    sq = np.sort(row * row)[::-1]
    csum = np.cumsum(sq)
    if not csum[-1] > 0:
        raise DataError("image has zero energy in transform space")
    return csum / csum[-1]


def _minimal_prefix(row: np.ndarray, P: float) -> np.ndarray:
    order = _decreasing_order(row)
    sq = row[order] ** 2
    csum = np.cumsum(sq)
    if not csum[-1] > 0:
        raise DataError("image has zero energy in transform space")
    n_keep = int(np.searchsorted(csum / csum[-1], P, side="left")) + 1
    return order[: min(n_keep, row.size)]


def select_retained(coefs: CoefSet | np.ndarray, P: float) -> CompressionMask:
    """Union over images of the shortest energy prefix reaching ``P``.

    ``P = 1`` keeps every position, so the model is the full isomorphic one.
    """
    _check_level(P)
    full = coefs.full() if isinstance(coefs, CoefSet) else np.atleast_2d(coefs)
    n_total = full.shape[1]
    if P >= 1.0:
        retained = np.arange(n_total)
    else:
        keep = np.zeros(n_total, dtype=bool)
        for row in full:
            keep[_minimal_prefix(row, P)] = True
        retained = np.flatnonzero(keep)
    energy = (full[:, retained] ** 2).sum(axis=1) / (full**2).sum(axis=1)
    return CompressionMask(retained, float(P), n_total, energy)


def compression_table(coefs: CoefSet | np.ndarray, P_grid: Iterable[float]) -> list[tuple[float, int]]:
    levels = sorted(float(p) for p in P_grid)
    for p in levels:
        _check_level(p)
    return [(p, select_retained(coefs, p).t_star) for p in levels]


def write_compression_table(path, table, n_total: int, tag: str | None = None) -> None:
    buf = io.StringIO()
    if tag:
        buf.write(f"# {tag}\n")
    buf.write("P,t_star,ratio\n")
    for p, t_star in table:
        buf.write(f"{p:.6g},{t_star},{n_total / t_star:.6g}\n")
    Path(path).write_text(buf.getvalue())


def write_mask(path, mask: CompressionMask, dims, spec_tag: str, tag: str | None = None) -> None:
    lines = [
        f"# dims={dims[0]}x{dims[1]} spec={spec_tag} P={mask.level!r} "
        f"t_star={mask.t_star} mask={mask.digest()}"
    ]
    if tag:
        lines.append(f"# {tag}")
    lines.extend(str(int(p)) for p in mask.retained)
    Path(path).write_text("\n".join(lines) + "\n")


def read_mask(path) -> tuple[CompressionMask, dict]:
    meta: dict[str, str] = {}
    positions = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                if "=" in token:
                    key, value = token.split("=", 1)
                    meta.setdefault(key, value)
            continue
        try:
            positions.append(int(line))
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad coefficient position {line!r}") from None
    if "dims" not in meta or "P" not in meta:
        raise DataError(f"{path}: mask header lacks dims/P")
    t1, t2 = (int(v) for v in meta["dims"].split("x"))
    retained = np.asarray(positions, dtype=np.int64)
    if retained.size and (np.any(np.diff(retained) <= 0) or retained[0] < 0 or retained[-1] >= t1 * t2):
        raise DataError(f"{path}: positions must be sorted, unique and inside the image")
    mask = CompressionMask(retained, float(meta["P"]), t1 * t2, np.array([]))
    if "mask" in meta and meta["mask"] != mask.digest():
        raise DataError(f"{path}: mask digest mismatch (file edited or truncated)")
    return mask, meta
