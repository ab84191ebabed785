"""Fixed- and random-effect design matrices."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from isofmm.errors import DataError

RANK_TOL = 1e-8


@dataclass
class DesignSpec:
    """Design for ``D = X B* + Z U* + E*`` with identity between-image covariances.

    ``Z`` is a 0/1 incidence matrix with exactly one 1 per row, or ``None``
    for a model without random effects.
    """

    X: np.ndarray
    Z: np.ndarray | None = None
    covariate_names: list[str] = field(default_factory=list)
    unit_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        self.X = X[:, None] if X.ndim == 1 else X
        n, p = self.X.shape
        if not self.covariate_names:
            self.covariate_names = [f"x{a + 1}" for a in range(p)]
        if len(self.covariate_names) != p:
            raise DataError("covariate_names must have one label per column of X")
        if n < p + 1:
            raise DataError(f"need at least p + 1 = {p + 1} images, got {n}")
        if not np.all(np.isfinite(self.X)):
            raise DataError("design matrix X has non-finite entries")
        _check_rank(self.X, self.covariate_names)
        if self.Z is not None:
            Z = np.asarray(self.Z, dtype=np.float64)
            if Z.ndim != 2 or Z.shape[0] != n or Z.shape[1] == 0:
                raise DataError(f"Z must be {n} x m with m >= 1")
            if not np.all((Z == 0) | (Z == 1)) or not np.all(Z.sum(axis=1) == 1):
                raise DataError("each row of Z must contain exactly one 1 (one unit per image)")
            self.Z = Z
            if not self.unit_names:
                self.unit_names = [f"u{b + 1}" for b in range(Z.shape[1])]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return 0 if self.Z is None else self.Z.shape[1]

    @property
    def unit_index(self) -> np.ndarray:
        return np.argmax(self.Z, axis=1) if self.Z is not None else np.zeros(self.n, dtype=int)

    @property
    def unit_sizes(self) -> np.ndarray:
        return self.Z.sum(axis=0) if self.Z is not None else np.zeros(0)

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.X, dtype="<f8").tobytes())
        if self.Z is not None:
            h.update(np.ascontiguousarray(self.Z, dtype="<f8").tobytes())
        h.update("\x1f".join(self.covariate_names).encode())
        return h.hexdigest()[:16]


def _check_rank(X: np.ndarray, names: Sequence[str]) -> None:
    s = np.linalg.svd(X, compute_uv=False)
    rank = int(np.sum(s > RANK_TOL * s[0])) if s.size and s[0] > 0 else 0
    if rank == X.shape[1]:
        return
    _, _, piv = scipy.linalg.qr(X, pivoting=True)
    bad = [names[i] for i in sorted(piv[rank:])]
    raise DataError(f"design matrix X is rank deficient; dependent columns: {', '.join(bad)}")


def _levels(labels: Sequence[str]) -> list[str]:
    seen: dict[str, None] = {}
    for lab in labels:
        seen.setdefault(lab, None)
    return list(seen)


def incidence(labels: Sequence[str], levels: Sequence[str] | None = None) -> tuple[np.ndarray, list[str]]:
    levels = list(levels) if levels is not None else _levels(labels)
    pos = {lev: i for i, lev in enumerate(levels)}
    M = np.zeros((len(labels), len(levels)))
    for i, lab in enumerate(labels):
        M[i, pos[lab]] = 1.0
    return M, levels


def cell_means_design(groups: Sequence[str], units: Sequence[str] | None = None,
                      coding: str = "cell-means") -> DesignSpec:
    """``X[i, a] = 1`` when image i belongs to group a; ``Z[i, b] = 1`` for unit b.

    ``coding="treatment"`` gives an intercept plus indicators for every
    group except the first.
    """
    X, levels = incidence(groups)
    names = list(levels)
    if coding == "treatment":
        X = np.column_stack([np.ones(len(groups)), X[:, 1:]])
        names = ["intercept"] + [f"{lev}-vs-{levels[0]}" for lev in levels[1:]]
    elif coding != "cell-means":
        raise DataError(f"unknown coding {coding!r}")
    Z, unit_names = (None, [])
    if units is not None:
        Z, unit_names = incidence(units)
    return DesignSpec(X, Z, names, unit_names)
