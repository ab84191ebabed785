"""Image containers, vectorization and the gel preprocessing chain.

Preprocessing follows the usual 2-DE recipe: subtract a local background
estimated as the windowed minimum, normalize by the total intensity, then
take log2 with a small positive offset so that every pixel stays finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from isofmm.errors import DataError


@dataclass(frozen=True)
class ImageGrid:
    """A T1 x T2 grid of finite intensities, always stored as float64."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"image must be a non-empty 2D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("image contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def dims(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class VecImage:
    """Column-stacked image: pixel (t1, t2) sits at ``t1 + t2 * T1`` (0-based)."""

    values: np.ndarray
    dims: tuple[int, int]

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64).ravel()
        t1, t2 = self.dims
        if arr.size != t1 * t2:
            raise DataError(f"vector length {arr.size} does not match dims {t1}x{t2}")
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "dims", (int(t1), int(t2)))

    @property
    def length(self) -> int:
        return self.values.size


@dataclass
class ImageLabel:
    image_id: str
    group: str
    unit: str
    path: str | None = None


@dataclass
class Dataset:
    images: list[ImageGrid]
    labels: list[ImageLabel] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) < 2:
            raise DataError(f"a dataset needs at least 2 images, got {len(self.images)}")
        dims = {img.dims for img in self.images}
        if len(dims) != 1:
            raise DataError(f"images have differing dimensions: {sorted(dims)}")
        if not self.labels:
            self.labels = [ImageLabel(str(i), "1", str(i)) for i in range(len(self.images))]
        if len(self.labels) != len(self.images):
            raise DataError("every image needs a label record")

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def dims(self) -> tuple[int, int]:
        return self.images[0].dims

    def stack(self) -> np.ndarray:
        """N x T1 x T2 array of all image values."""
        return np.stack([img.values for img in self.images])


def vectorize(img: ImageGrid) -> VecImage:
    return VecImage(img.values.ravel(order="F"), img.dims)


def unvectorize(v: VecImage) -> ImageGrid:
    return ImageGrid(np.reshape(v.values, v.dims, order="F"))


def background_correct(img: ImageGrid, halfwidth: int) -> ImageGrid:
    """Subtract the minimum over a (2h+1) x (2h+1) window clipped to the image.

    ``mode="nearest"`` only replicates edge pixels that already lie inside the
    clipped window, so it yields exactly the clipped minimum.
    """
    if int(halfwidth) < 1:
        raise DataError(f"halfwidth must be >= 1, got {halfwidth}")
    size = 2 * int(halfwidth) + 1
    floor = ndimage.minimum_filter(img.values, size=size, mode="nearest")
    return ImageGrid(img.values - floor)


def normalize_total(img: ImageGrid) -> ImageGrid:
    total = img.values.sum()
    if not total > 0:
        raise DataError("degenerate image: zero total intensity")
    return ImageGrid(img.values / total)


def smallest_positive(arrays: Sequence[np.ndarray]) -> float:
    best = np.inf
    for arr in arrays:
        pos = arr[arr > 0]
        if pos.size:
            best = min(best, float(pos.min()))
    if not np.isfinite(best):
        raise DataError("no strictly positive intensity to derive the log2 offset from")
    return best


def log2_stabilize(img: ImageGrid, epsilon: float | None = None) -> ImageGrid:
    """Return ``log2(value + epsilon)``.

    ``epsilon=None`` selects the smallest strictly positive value of ``img``;
    :func:`preprocess` passes the dataset-wide value instead.
    """
    if np.any(img.values < 0):
        raise DataError("log2 stabilization needs nonnegative intensities")
    if epsilon is None:
        epsilon = smallest_positive([img.values])
    elif not epsilon > 0:
        raise DataError(f"fixed log2 offset must be positive, got {epsilon}")
    return ImageGrid(np.log2(img.values + epsilon))


def preprocess(ds: Dataset, halfwidth: int = 100, epsilon: float | None = None) -> Dataset:
    """Background-correct, normalize and log2-transform every image."""
    normed = [normalize_total(background_correct(img, halfwidth)) for img in ds.images]
    if epsilon is None:
        epsilon = smallest_positive([img.values for img in normed])
    return Dataset([log2_stabilize(img, epsilon) for img in normed], list(ds.labels))
