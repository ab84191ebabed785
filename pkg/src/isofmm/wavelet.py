"""Orthonormal periodic wavelet transforms in 1D and 2D.

Each analysis step maps a length-``n`` signal to ``ceil(n/2)`` approximation
and ``floor(n/2)`` detail coefficients. Even lengths use the ordinary
periodized filter bank. For odd lengths the first ``n - 1`` samples are
transformed periodically and the last sample is carried into the
approximation band unchanged, so the step stays orthonormal and the transform
of a T1 x T2 image has exactly T1 * T2 coefficients for any dimensions.

Layouts follow Mallat's pyramid. A 1D transform of depth J stores
``[a_J, d_J, d_{J-1}, ..., d_1]``. The square 2D transform recurses on the
top-left approximation block; the rectangular transform is the full 1D
transform along axis 0 followed by the full 1D transform along axis 1, i.e.
``D = W1 @ Y @ W2.T`` and ``vec(D) = kron(W2, W1) @ vec(Y)``.

Coefficients of images are vectorized by column stacking, the same
convention as :func:`isofmm.imagecore.vectorize`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np

from isofmm.errors import ConfigError, DataError
from isofmm.filters import daubechies

KINDS = ("square", "rectangular")

# orientation codes for the square kind
SCALING, ROW_DETAIL, COL_DETAIL, DIAG_DETAIL = 0, 1, 2, 3


@dataclass(frozen=True)
class WaveletSpec:
    vanishing_moments: int = 4
    levels: int = 6
    kind: str = "square"
    boundary: str = "periodic"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        if self.boundary != "periodic":
            raise ConfigError("only periodic boundaries are supported")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if not 1 <= self.vanishing_moments <= 10:
            raise ConfigError("vanishing moments must be in 1..10")

    def check_length(self, n: int) -> None:
        if n < 2**self.levels:
            raise DataError(
                f"too many levels for signal length: {self.levels} levels need length "
                f">= {2 ** self.levels}, got {n}"
            )

    def check_dims(self, dims: tuple[int, int]) -> None:
        for n in dims:
            self.check_length(n)

    def to_dict(self) -> dict:
        return {
            "vanishing_moments": self.vanishing_moments,
            "levels": self.levels,
            "kind": self.kind,
            "boundary": self.boundary,
        }


def level_lengths(n: int, levels: int) -> list[int]:
    """Lengths of the signal entering each analysis step."""
    out = []
    for _ in range(levels):
        out.append(n)
        n = (n + 1) // 2
    return out


@lru_cache(maxsize=None)
def _index_table(n: int, filt_len: int) -> np.ndarray:
    k = np.arange(n // 2)
    return (2 * k[None, :] + np.arange(filt_len)[:, None]) % n


def _step(x: np.ndarray, h: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One analysis step along the last axis."""
    n = x.shape[-1]
    carry = None
    if n % 2:
        carry = x[..., -1:]
        x = x[..., :-1]
        n -= 1
    idx = _index_table(n, h.size)
    a = np.zeros(x.shape[:-1] + (n // 2,))
    d = np.zeros_like(a)
    for m in range(h.size):
        xm = x[..., idx[m]]
        a += h[m] * xm
        d += g[m] * xm
    if carry is not None:
        a = np.concatenate([a, carry], axis=-1)
    return a, d


def _inverse_step(a: np.ndarray, d: np.ndarray, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    carry = None
    if a.shape[-1] > d.shape[-1]:
        carry = a[..., -1:]
        a = a[..., :-1]
    n = 2 * d.shape[-1]
    idx = _index_table(n, h.size)
    x = np.zeros(a.shape[:-1] + (n,))
    for m in range(h.size):
        x[..., idx[m]] += h[m] * a + g[m] * d
    if carry is not None:
        x = np.concatenate([x, carry], axis=-1)
    return x


def _forward_axis(x: np.ndarray, levels: int, h, g) -> np.ndarray:
    out = np.array(x, dtype=np.float64, copy=True)
    for n in level_lengths(out.shape[-1], levels):
        a, d = _step(out[..., :n], h, g)
        out[..., : a.shape[-1]] = a
        out[..., a.shape[-1] : n] = d
    return out


def _inverse_axis(c: np.ndarray, levels: int, h, g) -> np.ndarray:
    out = np.array(c, dtype=np.float64, copy=True)
    for n in reversed(level_lengths(out.shape[-1], levels)):
        na = (n + 1) // 2
        out[..., :n] = _inverse_step(out[..., :na], out[..., na:n], h, g)
    return out


def dwt1d(signal, spec: WaveletSpec) -> np.ndarray:
    """Forward transform along the last axis of ``signal``."""
    x = np.asarray(signal, dtype=np.float64)
    spec.check_length(x.shape[-1])
    h, g = daubechies(spec.vanishing_moments)
    return _forward_axis(x, spec.levels, h, g)


def idwt1d(coefs, spec: WaveletSpec) -> np.ndarray:
    c = np.asarray(coefs, dtype=np.float64)
    spec.check_length(c.shape[-1])
    h, g = daubechies(spec.vanishing_moments)
    return _inverse_axis(c, spec.levels, h, g)


def _square_forward(x: np.ndarray, levels: int, h, g) -> np.ndarray:
    out = np.array(x, dtype=np.float64, copy=True)
    r, c = out.shape[-2:]
    for _ in range(levels):
        block = out[..., :r, :c]
        a, d = _step(block, h, g)  # along axis -1 (within rows)
        block = np.concatenate([a, d], axis=-1)
        a, d = _step(np.swapaxes(block, -1, -2), h, g)  # along axis -2
        out[..., :r, :c] = np.swapaxes(np.concatenate([a, d], axis=-1), -1, -2)
        r, c = (r + 1) // 2, (c + 1) // 2
    return out


def _square_inverse(cf: np.ndarray, levels: int, h, g) -> np.ndarray:
    out = np.array(cf, dtype=np.float64, copy=True)
    sizes = list(zip(level_lengths(out.shape[-2], levels), level_lengths(out.shape[-1], levels)))
    for r, c in reversed(sizes):
        ra, ca = (r + 1) // 2, (c + 1) // 2
        block = np.swapaxes(out[..., :r, :c], -1, -2)
        block = _inverse_step(block[..., :ra], block[..., ra:], h, g)
        block = np.swapaxes(block, -1, -2)
        out[..., :r, :c] = _inverse_step(block[..., :ca], block[..., ca:], h, g)
    return out


def dwt2d_matrix(img, spec: WaveletSpec) -> np.ndarray:
    """Forward 2D transform returning the coefficient image (same shape).

    Works on the last two axes, so a stack of images is transformed at once.
    """
    x = np.asarray(img, dtype=np.float64)
    spec.check_dims(x.shape[-2:])
    h, g = daubechies(spec.vanishing_moments)
    if spec.kind == "square":
        return _square_forward(x, spec.levels, h, g)
    rows = _forward_axis(np.swapaxes(x, -1, -2), spec.levels, h, g)
    return _forward_axis(np.swapaxes(rows, -1, -2), spec.levels, h, g)


def idwt2d_matrix(coefs, spec: WaveletSpec) -> np.ndarray:
    c = np.asarray(coefs, dtype=np.float64)
    spec.check_dims(c.shape[-2:])
    h, g = daubechies(spec.vanishing_moments)
    if spec.kind == "square":
        return _square_inverse(c, spec.levels, h, g)
    cols = _inverse_axis(c, spec.levels, h, g)
    return np.swapaxes(_inverse_axis(np.swapaxes(cols, -1, -2), spec.levels, h, g), -1, -2)


def vec_stack(arr: np.ndarray) -> np.ndarray:
    """Column-stack the last two axes: (..., T1, T2) -> (..., T1*T2)."""
    arr = np.asarray(arr)
    return np.swapaxes(arr, -1, -2).reshape(arr.shape[:-2] + (-1,))


def unvec_stack(vec: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    vec = np.asarray(vec)
    t1, t2 = dims
    return np.swapaxes(vec.reshape(vec.shape[:-1] + (t2, t1)), -1, -2)


def dwt2d(img, spec: WaveletSpec) -> tuple[np.ndarray, "CoefIndexMap"]:
    """Transform an image (or ImageGrid) into its vectorized coefficients."""
    values = getattr(img, "values", img)
    values = np.asarray(values, dtype=np.float64)
    coefs = vec_stack(dwt2d_matrix(values, spec))
    return coefs, coef_index_map(values.shape[-2:], spec)


def idwt2d(coefs, spec: WaveletSpec, dims: tuple[int, int]) -> np.ndarray:
    """Invert vectorized coefficients of shape (..., T) back to (..., T1, T2)."""
    return idwt2d_matrix(unvec_stack(coefs, dims), spec)


class CoefIndex(NamedTuple):
    """Scale, orientation and 1-based location of one coefficient.

    For the rectangular kind ``scale`` is the row scale j1 and
    ``orientation`` the column scale j2.
    """

    scale: int
    orientation: int
    location: int


class CoefIndexMap:
    """Per-position (scale, orientation, location) labels in vectorized order.

    Scale 1 is the finest level, J the coarsest detail level and J + 1 marks
    the coarse scaling coefficients (orientation 0 in the square kind).
    """

    def __init__(self, scale, orientation, location, kind: str, levels: int):
        self.scale = np.asarray(scale, dtype=np.int32)
        self.orientation = np.asarray(orientation, dtype=np.int32)
        self.location = np.asarray(location, dtype=np.int32)
        self.kind = kind
        self.levels = levels

    def __len__(self) -> int:
        return self.scale.size

    def __getitem__(self, pos: int) -> CoefIndex:
        return CoefIndex(int(self.scale[pos]), int(self.orientation[pos]), int(self.location[pos]))

    def __iter__(self):
        for pos in range(len(self)):
            yield self[pos]

    def group_keys(self) -> list[tuple[int, int]]:
        return sorted(set(zip(self.scale.tolist(), self.orientation.tolist())))

    def is_scaling(self) -> np.ndarray:
        top = self.levels + 1
        if self.kind == "square":
            return self.orientation == SCALING
        return (self.scale == top) & (self.orientation == top)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, CoefIndexMap)
            and self.kind == other.kind
            and self.levels == other.levels
            and np.array_equal(self.scale, other.scale)
            and np.array_equal(self.orientation, other.orientation)
            and np.array_equal(self.location, other.location)
        )


def _axis_scales(n: int, levels: int) -> np.ndarray:
    scales = np.empty(n, dtype=np.int32)
    for j, m in enumerate(level_lengths(n, levels), start=1):
        scales[(m + 1) // 2 : m] = j
    scales[: (level_lengths(n, levels)[-1] + 1) // 2] = levels + 1
    return scales


def _label_block(scale, orient, loc, rows: slice, cols: slice, j: int, l: int) -> None:
    scale[rows, cols] = j
    orient[rows, cols] = l
    nr = rows.stop - rows.start
    nc = cols.stop - cols.start
    loc[rows, cols] = np.arange(1, nr * nc + 1).reshape(nc, nr).T


def coef_index_map(dims, spec: WaveletSpec) -> CoefIndexMap:
    t1, t2 = (int(d) for d in dims)
    spec.check_dims((t1, t2))
    scale = np.zeros((t1, t2), dtype=np.int32)
    orient = np.zeros_like(scale)
    loc = np.zeros_like(scale)
    J = spec.levels
    if spec.kind == "square":
        r, c = t1, t2
        for j in range(1, J + 1):
            ra, ca = (r + 1) // 2, (c + 1) // 2
            _label_block(scale, orient, loc, slice(0, ra), slice(ca, c), j, ROW_DETAIL)
            _label_block(scale, orient, loc, slice(ra, r), slice(0, ca), j, COL_DETAIL)
            _label_block(scale, orient, loc, slice(ra, r), slice(ca, c), j, DIAG_DETAIL)
            r, c = ra, ca
        _label_block(scale, orient, loc, slice(0, r), slice(0, c), J + 1, SCALING)
    else:
        s1, s2 = _axis_scales(t1, J), _axis_scales(t2, J)
        for j1 in np.unique(s1):
            rows = np.flatnonzero(s1 == j1)
            for j2 in np.unique(s2):
                cols = np.flatnonzero(s2 == j2)
                _label_block(
                    scale, orient, loc,
                    slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1),
                    int(j1), int(j2),
                )
    return CoefIndexMap(vec_stack(scale), vec_stack(orient), vec_stack(loc), spec.kind, J)


@lru_cache(maxsize=32)
def transform_matrix_1d(n: int, spec: WaveletSpec) -> np.ndarray:
    """Dense n x n matrix W with ``dwt1d(x) == W @ x``; for tests and small n."""
    return dwt1d(np.eye(n), spec).T


@dataclass
class CoefSet:
    """N x T* coefficient matrix with its index map and retained positions.

    ``positions`` lists the retained coefficient positions (0-based, sorted);
    ``None`` means all T positions are present.
    """

    coefs: np.ndarray
    index_map: CoefIndexMap
    dims: tuple[int, int]
    spec: WaveletSpec
    positions: np.ndarray | None = None

    def __post_init__(self):
        self.coefs = np.atleast_2d(np.asarray(self.coefs, dtype=np.float64))
        self.dims = (int(self.dims[0]), int(self.dims[1]))
        t = self.dims[0] * self.dims[1]
        if len(self.index_map) != t:
            raise DataError(f"index map has {len(self.index_map)} entries, expected {t}")
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=np.int64)
            if self.positions.size != self.coefs.shape[1]:
                raise DataError("retained positions do not match coefficient columns")
        elif self.coefs.shape[1] != t:
            raise DataError(f"expected {t} coefficient columns, got {self.coefs.shape[1]}")

    @property
    def n_images(self) -> int:
        return self.coefs.shape[0]

    @property
    def n_total(self) -> int:
        return self.dims[0] * self.dims[1]

    @property
    def retained(self) -> np.ndarray:
        if self.positions is None:
            return np.arange(self.n_total)
        return self.positions

    def full(self) -> np.ndarray:
        """Zero-filled N x T coefficient matrix."""
        if self.positions is None:
            return self.coefs
        out = np.zeros((self.n_images, self.n_total))
        out[:, self.positions] = self.coefs
        return out

    def restrict(self, positions) -> "CoefSet":
        positions = np.asarray(positions, dtype=np.int64)
        return CoefSet(self.full()[:, positions], self.index_map, self.dims, self.spec, positions)

    def images(self) -> np.ndarray:
        """Inverse transform of every row (zero-filled where not retained)."""
        return idwt2d(self.full(), self.spec, self.dims)


def transform_images(stack, spec: WaveletSpec) -> CoefSet:
    """Apply the 2D transform to an N x T1 x T2 stack (or a Dataset)."""
    if hasattr(stack, "stack"):
        stack = stack.stack()
    stack = np.asarray(stack, dtype=np.float64)
    dims = stack.shape[-2:]
    coefs, index_map = dwt2d(stack, spec)
    return CoefSet(coefs, index_map, dims, spec)


# --- coefficient cache -------------------------------------------------------
#
# Little-endian layout:
#   8s   magic b"ISOFMMC1"
#   u32  version (=1)
#   u32  T1, u32 T2
#   u32  vanishing moments, u32 levels, u32 kind (0 square, 1 rectangular)
#   u64  N, u64 T*
#   f64  N x T* coefficients, row-major
#   i64  T* retained positions (0-based, column-stacked)
#   i32  T scale labels, i32 T orientation labels, i32 T location labels

_MAGIC = b"ISOFMMC1"
_HEADER = struct.Struct("<8sIIIIIIQQ")


def write_coefset(path, cs: CoefSet) -> None:
    spec = cs.spec
    header = _HEADER.pack(
        _MAGIC, 1, cs.dims[0], cs.dims[1], spec.vanishing_moments, spec.levels,
        KINDS.index(spec.kind), cs.n_images, cs.coefs.shape[1],
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(cs.coefs, dtype="<f8").tobytes())
        fh.write(np.asarray(cs.retained, dtype="<i8").tobytes())
        for arr in (cs.index_map.scale, cs.index_map.orientation, cs.index_map.location):
            fh.write(np.asarray(arr, dtype="<i4").tobytes())


def read_coefset(path) -> CoefSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated coefficient cache")
    magic, version, t1, t2, moments, levels, kind, n, tstar = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise DataError(f"{path}: not a version-1 coefficient cache")
    spec = WaveletSpec(moments, levels, KINDS[kind])
    t = t1 * t2
    off = _HEADER.size
    expected = off + 8 * n * tstar + 8 * tstar + 12 * t
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    coefs = np.frombuffer(raw, "<f8", n * tstar, off).reshape(n, tstar).copy()
    off += 8 * n * tstar
    positions = np.frombuffer(raw, "<i8", tstar, off).copy()
    off += 8 * tstar
    labels = [np.frombuffer(raw, "<i4", t, off + 4 * t * i).copy() for i in range(3)]
    index_map = CoefIndexMap(*labels, spec.kind, spec.levels)
    return CoefSet(coefs, index_map, (t1, t2), spec, None if tstar == t else positions)


def max_levels(dims) -> int:
    return int(math.floor(math.log2(min(dims))))
