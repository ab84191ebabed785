"""From transformed-space draws to image-space effects, discovery maps and regions."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from isofmm.errors import ConfigError, DataError
from isofmm.imagecore import ImageGrid
from isofmm.wavelet import WaveletSpec, idwt2d

DEFAULT_DELTAS = (float(np.log2(1.25)), float(np.log2(1.5)), float(np.log2(2.0)))
DEFAULT_QUANTILES = (0.005, 0.01, 0.025, 0.975, 0.99, 0.995)
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class EffectDraws:
    """Image-space draws of one effect function (a covariate or a contrast)."""

    values: np.ndarray  # n_draws x T1 x T2
    weights: np.ndarray
    mask_hash: str = ""
    rng_seed: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError("effect draws must be n_draws x T1 x T2")
        if not np.all(np.isfinite(self.values)):
            raise DataError("effect draws contain non-finite values")

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def mean(self) -> ImageGrid:
        return ImageGrid(self.values.mean(axis=0))

    def quantiles(self, levels: Sequence[float] = DEFAULT_QUANTILES) -> dict[float, ImageGrid]:
        q = np.quantile(self.values, levels, axis=0)
        return {float(lv): ImageGrid(q[i]) for i, lv in enumerate(levels)}


def _check_mask(draws, spec: WaveletSpec, dims) -> None:
    spec.check_dims(dims)
    n_total = dims[0] * dims[1]
    if draws.n_total != n_total:
        raise DataError(f"draws cover {draws.n_total} coefficients but dims {dims} need {n_total}")
    if draws.t_star and (draws.positions.min() < 0 or draws.positions.max() >= n_total):
        raise DataError("retained positions fall outside the coefficient vector")


def iter_effect_batches(draws, weights, spec: WaveletSpec, dims, batch: int = 64) -> Iterator[np.ndarray]:
    """Yield image-space contrast draws ``batch`` at a time."""
    _check_mask(draws, spec, dims)
    n_total = dims[0] * dims[1]
    for lo in range(0, draws.n_draws, batch):
        hi = min(lo + batch, draws.n_draws)
        full = np.zeros((hi - lo, n_total))
        full[:, draws.positions] = draws.contrast_batch(weights, lo, hi)
        yield idwt2d(full, spec, dims)


def reconstruct_effect_draws(draws, weights, spec: WaveletSpec, dims, batch: int = 64) -> EffectDraws:
    """Inverse-transform ``sum_a w_a B*_a`` for every draw, zero-filling dropped positions."""
    w = np.asarray(weights, dtype=np.float64)
    values = np.empty((draws.n_draws,) + tuple(dims))
    k = 0
    for chunk in iter_effect_batches(draws, w, spec, dims, batch):
        values[k : k + chunk.shape[0]] = chunk
        k += chunk.shape[0]
    return EffectDraws(values, w, draws.mask_hash, draws.rng_seed)


def prob_discovery(effect: EffectDraws | np.ndarray, delta: float) -> ImageGrid:
    """Fraction of draws with ``|value| > delta`` at each pixel."""
    if delta < 0:
        raise ConfigError("delta must be nonnegative")
    values = effect.values if isinstance(effect, EffectDraws) else np.asarray(effect)
    if values.shape[0] < 1:
        raise DataError("need at least one draw")
    counts = np.count_nonzero(np.abs(values) > delta, axis=0)
    return ImageGrid(counts / values.shape[0])


def _exact_prefix_ok(p_sorted: np.ndarray, alpha: float, idx: np.ndarray) -> np.ndarray:
    """Exact rational test of ``sum(1 - p[:j]) <= alpha * j`` at 1-based ``idx``."""
    a = Fraction(alpha)
    out = np.empty(idx.size, dtype=bool)
    total = Fraction(0)
    done = 0
    for n, j in enumerate(idx):
        for v in p_sorted[done:j]:
            total += 1 - Fraction(float(v))
        done = j
        out[n] = total <= a * j
    return out


def fdr_threshold(prob, alpha: float) -> tuple[float | None, int]:
    """Largest prefix of the descending-sorted probabilities with mean local FDR <= alpha.

    Returns ``(phi, xi)`` with ``phi = p_(xi)``, or ``(None, 0)`` when even the
    most probable pixel fails. The prefix condition is decided in exact
    rational arithmetic wherever floating-point cumulative sums are too close
    to call.
    """
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    p = np.asarray(getattr(prob, "values", prob), dtype=np.float64).ravel()
    if p.size == 0:
        return None, 0
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise DataError("probabilities must lie in [0, 1]")
    p_sorted = -np.sort(-p)
    lfdr = 1.0 - p_sorted
    j = np.arange(1, p.size + 1)
    csum = np.cumsum(lfdr)
    gap = csum - alpha * j
    slack = 4 * np.finfo(float).eps * (j * csum + alpha * j + 1.0)
    ok = gap <= 0
    close = np.abs(gap) <= slack
    if close.any():
        ok[close] = _exact_prefix_ok(p_sorted, alpha, j[close])
    hits = np.flatnonzero(ok)
    if hits.size == 0:
        return None, 0
    xi = int(hits[-1]) + 1
    return float(p_sorted[xi - 1]), xi


@dataclass
class Region:
    pixels: np.ndarray  # K x 2, 0-based (t1, t2)
    centroid: tuple[float, float]  # 1-based
    area: int
    max_p: float
    bbox: tuple[int, int, int, int]  # 1-based inclusive (t1_min, t1_max, t2_min, t2_max)


@dataclass
class DiscoveryMap:
    prob: ImageGrid
    delta: float
    alpha: float
    phi: float | None
    xi: int
    flagged: np.ndarray
    regions: list[Region] = field(default_factory=list)

    @property
    def n_flagged(self) -> int:
        return int(self.flagged.sum())


def label_regions(flagged: np.ndarray, prob: np.ndarray) -> list[Region]:
    """8-connected components sorted by max probability, then centroid."""
    labels, n = ndimage.label(flagged, structure=EIGHT_CONNECTED)
    regions = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        rr, cc = np.nonzero(labels[sl] == k)
        rr = rr + sl[0].start
        cc = cc + sl[1].start
        pix = np.column_stack([rr, cc])
        regions.append(Region(
            pixels=pix,
            centroid=(float(rr.mean()) + 1.0, float(cc.mean()) + 1.0),
            area=int(rr.size),
            max_p=float(prob[rr, cc].max()),
            bbox=(int(rr.min()) + 1, int(rr.max()) + 1, int(cc.min()) + 1, int(cc.max()) + 1),
        ))
    regions.sort(key=lambda r: (-r.max_p, r.centroid[0], r.centroid[1]))
    return regions


def flag_regions(prob, phi: float | None, delta: float = float("nan"), alpha: float = float("nan"),
                 xi: int | None = None) -> DiscoveryMap:
    """Flag pixels with ``prob >= phi`` and split them into 8-connected regions."""
    grid = prob if isinstance(prob, ImageGrid) else ImageGrid(np.asarray(prob, dtype=np.float64))
    p = grid.values
    if phi is None:
        flagged = np.zeros(p.shape, dtype=bool)
    else:
        if not 0 <= phi <= 1:
            raise ConfigError("phi must lie in [0, 1]")
        flagged = p >= phi
    if xi is None:
        xi = int(flagged.sum())
    return DiscoveryMap(grid, delta, alpha, phi, xi, flagged, label_regions(flagged, p))


def discover(effect: EffectDraws, delta: float, alpha: float) -> DiscoveryMap:
    prob = prob_discovery(effect, delta)
    phi, xi = fdr_threshold(prob, alpha)
    return flag_regions(prob, phi, delta, alpha, xi)


def virtual_gel(draws, x_row, z_row, spec: WaveletSpec, dims, rng: np.random.Generator,
                draw_index: int | None = None) -> ImageGrid:
    """One posterior-predictive image for covariates ``x_row`` and unit incidence ``z_row``."""
    _check_mask(draws, spec, dims)
    x = np.asarray(x_row, dtype=np.float64).ravel()
    z = np.asarray(z_row, dtype=np.float64).ravel()
    if draw_index is None:
        draw_index = int(rng.integers(draws.n_draws))
    if not 0 <= draw_index < draws.n_draws:
        raise ConfigError(f"draw index {draw_index} out of range")
    mean = draws.contrast_batch(x, draw_index, draw_index + 1)[0]
    var = draws.variance_batch(draw_index, draw_index + 1)[0]
    T = mean.size
    u = rng.standard_normal((z.size, T)) * np.sqrt(var[:, 0])
    e = rng.standard_normal(T) * np.sqrt(var[:, 1])
    full = np.zeros(dims[0] * dims[1])
    full[draws.positions] = mean + z @ u + e
    return ImageGrid(idwt2d(full, spec, dims))


def write_regions(path, regions: Sequence[Region], tag: str | None = None) -> None:
    buf = io.StringIO()
    if tag:
        buf.write(f"# {tag}\n")
    buf.write("region_id,x,y,area,max_p\n")
    for k, r in enumerate(regions, start=1):
        buf.write(f"{k},{r.centroid[0]:.4f},{r.centroid[1]:.4f},{r.area},{r.max_p:.6g}\n")
    Path(path).write_text(buf.getvalue())
