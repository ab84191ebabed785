"""Synthetic 2-D gels with planted group differences and known truth.

A gel from unit b of group g is

    raw(t) = scale * (background + sum_s fold_gs * A_s * 2^(a_bs) * bump_s(t)) * 2^(e(t))

where ``bump_s`` is a unit-peak Gaussian, ``A_s = 2^peak_s``, ``a_bs`` is the
unit's random log2 amplitude for spot s and ``e`` is pixel noise on the log2
scale, so a spot with fold 2 differs by one log2 unit from the reference
group and ``effect / noise_sd`` is the per-gel signal-to-noise ratio at the
spot. Raw values are rounded to 16-bit integers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from isofmm.errors import ConfigError
from isofmm.imagecore import Dataset, ImageGrid, ImageLabel, preprocess

SUPPORT_SDS = 3.0


@dataclass(frozen=True)
class Spot:
    center: tuple[float, float]
    width: float  # SD along t1
    height: float  # SD along t2
    peak: float  # log2 amplitude over background


@dataclass(frozen=True)
class PlantedEffect:
    spot: int  # index into PhantomSpec.spots
    group: int  # 1-based
    fold: float


def _default_spots() -> tuple[Spot, ...]:
    return (
        # the planted spot has mid-range intensity; see the note in simulate_dataset
        Spot((40.0, 20.0), 3.0, 3.0, 6.0),
        Spot((14.0, 14.0), 3.0, 2.5, 9.5),
        Spot((46.0, 48.0), 2.5, 3.5, 8.5),
        Spot((26.0, 34.0), 3.0, 3.0, 10.0),
        Spot((54.0, 8.0), 2.5, 2.5, 8.0),
        Spot((54.0, 34.0), 3.5, 2.5, 9.0),
    )


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int] = (64, 64)
    spots: tuple[Spot, ...] = field(default_factory=_default_spots)
    effects: tuple[PlantedEffect, ...] = (PlantedEffect(0, 3, 2.0),)
    n_groups: int = 3
    units_per_group: int = 4
    gels_per_unit: int = 2
    animal_sd: float = 0.1
    noise_sd: float = 1.0 / 3.0
    background: float = 1.0
    scale: float = 25.0
    null_field: tuple[int, int, int, int] = (0, 16, 36, 64)  # rows [r0, r1), cols [c0, c1)
    seed: int = 0

    def __post_init__(self):
        t1, t2 = self.dims
        r0, r1, c0, c1 = self.null_field
        if not (0 <= r0 < r1 <= t1 and 0 <= c0 < c1 <= t2):
            raise ConfigError("null field must be a nonempty rectangle inside the image")
        if self.n_groups < 1 or self.units_per_group < 1 or self.gels_per_unit < 1:
            raise ConfigError("need at least one group, unit and gel")
        if self.animal_sd < 0 or self.noise_sd < 0 or self.background <= 0 or self.scale <= 0:
            raise ConfigError("standard deviations must be >= 0; background and scale > 0")
        if self.n_groups * self.units_per_group * self.gels_per_unit < 2:
            raise ConfigError("need at least two gels")
        for k, spot in enumerate(self.spots):
            if spot.width <= 0 or spot.height <= 0:
                raise ConfigError(f"spot {k} needs positive width and height")
            if self._support(spot)[r0:r1, c0:c1].any():
                raise ConfigError(f"spot {k} reaches into the null field")
        seen: dict[tuple[int, int], float] = {}
        for eff in self.effects:
            if not eff.fold > 0:
                raise ConfigError(f"fold change must be positive, got {eff.fold}")
            if not 0 <= eff.spot < len(self.spots) or not 1 <= eff.group <= self.n_groups:
                raise ConfigError(f"planted effect {eff} references an unknown spot or group")
            key = (eff.spot, eff.group)
            if key in seen and seen[key] != eff.fold:
                raise ConfigError(f"spot {eff.spot} has conflicting folds in group {eff.group}")
            seen[key] = eff.fold
        for i, a in enumerate(self.effects):
            for b in self.effects[i + 1 :]:
                if a.group == b.group and a.spot != b.spot and a.fold != b.fold:
                    overlap = self._support(self.spots[a.spot]) & self._support(self.spots[b.spot])
                    if overlap.any():
                        raise ConfigError(f"planted spots {a.spot} and {b.spot} overlap with "
                                          f"conflicting folds in group {a.group}")

    def _support(self, spot: Spot) -> np.ndarray:
        r, c = np.ogrid[: self.dims[0], : self.dims[1]]
        z = ((r - spot.center[0]) / spot.width) ** 2 + ((c - spot.center[1]) / spot.height) ** 2
        return z <= SUPPORT_SDS**2

    @property
    def n_images(self) -> int:
        return self.n_groups * self.units_per_group * self.gels_per_unit

    def fold(self, spot: int, group: int) -> float:
        for eff in self.effects:
            if eff.spot == spot and eff.group == group:
                return eff.fold
        return 1.0

    def null_mask(self) -> np.ndarray:
        r0, r1, c0, c1 = self.null_field
        m = np.zeros(self.dims, dtype=bool)
        m[r0:r1, c0:c1] = True
        return m

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "spots" in d:
            d["spots"] = tuple(Spot(tuple(s["center"]), s["width"], s["height"], s["peak"]) for s in d["spots"])
        if "effects" in d:
            d["effects"] = tuple(PlantedEffect(**e) for e in d["effects"])
        for key in ("dims", "null_field"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _bump(spot: Spot, dims) -> np.ndarray:
    r, c = np.ogrid[: dims[0], : dims[1]]
    return np.exp(-0.5 * (((r - spot.center[0]) / spot.width) ** 2 + ((c - spot.center[1]) / spot.height) ** 2))


def _intensity(spec: PhantomSpec, group: int, amp_log2: np.ndarray) -> np.ndarray:
    img = np.full(spec.dims, spec.background)
    for k, spot in enumerate(spec.spots):
        img += spec.fold(k, group) * 2.0 ** (spot.peak + amp_log2[k]) * _bump(spot, spec.dims)
    return img


@dataclass
class PhantomTruth:
    spec: PhantomSpec
    group_log2: np.ndarray  # n_groups x T1 x T2, noise-free preprocessed group images

    def effect(self, g1: int, g2: int) -> np.ndarray:
        """Noise-free log2 difference ``group g1 - group g2`` (1-based)."""
        return self.group_log2[g1 - 1] - self.group_log2[g2 - 1]

    def truth_mask(self, g1: int, g2: int, delta: float) -> np.ndarray:
        return np.abs(self.effect(g1, g2)) >= delta

    def null_mask(self) -> np.ndarray:
        return self.spec.null_mask()

    def spot_mask(self, spot: int, n_sd: float = 2.0) -> np.ndarray:
        """Footprint of a spot: the ellipse where its bump is at least ``exp(-n_sd**2 / 2)``."""
        s = self.spec.spots[spot]
        r, c = np.ogrid[: self.spec.dims[0], : self.spec.dims[1]]
        return ((r - s.center[0]) / s.width) ** 2 + ((c - s.center[1]) / s.height) ** 2 <= n_sd**2

    def save(self, path) -> None:
        path = Path(path)
        np.savez(path, group_log2=self.group_log2, null_mask=self.null_mask(),
                 spec=np.array(json.dumps(self.spec.to_dict(), sort_keys=True)))

    @classmethod
    def load(cls, path) -> "PhantomTruth":
        with np.load(path) as z:
            spec = PhantomSpec.from_dict(json.loads(str(z["spec"])))
            return cls(spec, z["group_log2"].copy())


def _to_uint16(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img), 0, 65535)


def simulate_dataset(spec: PhantomSpec, halfwidth: int = 100) -> tuple[Dataset, PhantomTruth]:
    """Raw 16-bit gels plus the noise-free truth used to score discoveries.

    After log2 transformation the brightest regions have the values closest
    to zero, so energy-based compression drops their coarse coefficients
    first. A planted spot that is the brightest feature of the gel is
    therefore the first casualty of aggressive compression.
    """
    rng = np.random.default_rng(spec.seed)
    n_spots = len(spec.spots)
    images, labels = [], []
    gel = 0
    for g in range(1, spec.n_groups + 1):
        for u in range(spec.units_per_group):
            unit = f"u{(g - 1) * spec.units_per_group + u + 1:02d}"
            amp = rng.normal(0.0, spec.animal_sd, n_spots)
            base = _intensity(spec, g, amp)
            for _ in range(spec.gels_per_unit):
                gel += 1
                noise = rng.normal(0.0, spec.noise_sd, spec.dims)
                images.append(ImageGrid(_to_uint16(spec.scale * base * 2.0**noise)))
                labels.append(ImageLabel(f"gel{gel:03d}", f"g{g}", unit))
    clean = Dataset([ImageGrid(_to_uint16(spec.scale * _intensity(spec, g, np.zeros(n_spots))))
                     for g in range(1, spec.n_groups + 1)] + ([] if spec.n_groups > 1 else
                    [ImageGrid(_to_uint16(spec.scale * _intensity(spec, 1, np.zeros(n_spots))))]))
    group_log2 = preprocess(clean, halfwidth).stack()[: spec.n_groups]
    return Dataset(images, labels), PhantomTruth(spec, group_log2)
