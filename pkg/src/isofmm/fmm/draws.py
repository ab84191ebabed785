"""Posterior draws in memory and on disk.

The draws file is a little-endian binary file::

    b"ISOFMMD1" | u32 header length | JSON header | block 0 | block 1 | ...

Each block covers a contiguous run of retained columns and stores, in order,
its positions (i64, C), fixed effects (f64, n_draws x p x C), inclusion
indicators (u8, n_draws x p x C), variances (f64, n_draws x C x 2, [q, s])
and MH acceptance rates (f64, C). The header carries the seed, sampler
settings, the mask and design digests and the block boundaries, and is
serialized with sorted keys so identical runs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from isofmm.compress import CompressionMask
from isofmm.errors import DataError, ProvenanceError

MAGIC = b"ISOFMMD1"


def mask_digest(positions, n_total: int) -> str:
    return CompressionMask(np.asarray(positions, dtype=np.int64), 1.0, int(n_total), np.array([])).digest()


class _DrawsAccess:
    """Batch accessors shared by the in-memory and file-backed draws."""

    n_draws: int
    p: int
    positions: np.ndarray
    n_total: int

    @property
    def t_star(self) -> int:
        return int(self.positions.size)

    def _check_weights(self, weights) -> np.ndarray:
        w = np.asarray(weights, dtype=np.float64).ravel()
        if w.size != self.p:
            raise DataError(f"contrast has {w.size} weights but the model has {self.p} covariates")
        return w

    def check_provenance(self, mask_hash: str | None = None, design_hash: str | None = None) -> None:
        if mask_hash is not None and mask_hash != self.mask_hash:
            raise ProvenanceError(f"draws were produced under mask {self.mask_hash}, not {mask_hash}")
        if design_hash is not None and self.design_hash and design_hash != self.design_hash:
            raise ProvenanceError(f"draws were produced under design {self.design_hash}, not {design_hash}")

    @property
    def mask(self) -> CompressionMask:
        return CompressionMask(self.positions, float(self.level), self.n_total, np.array([]))


@dataclass
class PosteriorDraws(_DrawsAccess):
    beta_draws: np.ndarray  # n_draws x p x T*
    gamma_draws: np.ndarray  # n_draws x p x T*, bool
    variance_draws: np.ndarray  # n_draws x T* x 2, columns [q, s]
    positions: np.ndarray
    n_total: int
    rng_seed: int
    config: dict
    accept_rate: np.ndarray
    level: float = 1.0
    mask_hash: str = ""
    design_hash: str = ""
    covariate_names: list = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if not self.mask_hash:
            self.mask_hash = mask_digest(self.positions, self.n_total)
        n, p, t = self.beta_draws.shape
        if self.gamma_draws.shape != (n, p, t) or self.variance_draws.shape != (n, t, 2):
            raise DataError("draw arrays have inconsistent shapes")
        if t != self.positions.size:
            raise DataError("draw arrays and retained positions disagree")

    @property
    def n_draws(self) -> int:
        return self.beta_draws.shape[0]

    @property
    def p(self) -> int:
        return self.beta_draws.shape[1]

    def contrast_batch(self, weights, lo: int = 0, hi: int | None = None) -> np.ndarray:
        w = self._check_weights(weights)
        return np.einsum("a,nat->nt", w, self.beta_draws[lo:hi])

    def variance_batch(self, lo: int = 0, hi: int | None = None) -> np.ndarray:
        return self.variance_draws[lo:hi]


def _header_for(draws: PosteriorDraws, bounds) -> dict:
    return {
        "format": 1,
        "rng_seed": int(draws.rng_seed),
        "config": draws.config,
        "mask_hash": draws.mask_hash,
        "design_hash": draws.design_hash,
        "level": float(draws.level),
        "n_draws": int(draws.n_draws),
        "p": int(draws.p),
        "t_star": int(draws.t_star),
        "n_total": int(draws.n_total),
        "covariate_names": list(draws.covariate_names),
        "blocks": [[int(lo), int(hi)] for lo, hi in bounds],
    }


def write_draws(path, draws: PosteriorDraws, block_size: int | None = None) -> None:
    """Write draws atomically (``.partial`` file renamed on success)."""
    path = Path(path)
    block_size = block_size or int(draws.config.get("block_size", 512))
    T = draws.t_star
    bounds = [(lo, min(lo + block_size, T)) for lo in range(0, T, block_size)]
    header = json.dumps(_header_for(draws, bounds), sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for lo, hi in bounds:
            fh.write(draws.positions[lo:hi].astype("<i8").tobytes())
            fh.write(np.ascontiguousarray(draws.beta_draws[:, :, lo:hi], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(draws.gamma_draws[:, :, lo:hi], dtype="u1").tobytes())
            fh.write(np.ascontiguousarray(draws.variance_draws[:, lo:hi], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(draws.accept_rate[lo:hi], dtype="<f8").tobytes())
    os.replace(tmp, path)


class DrawsFile(_DrawsAccess):
    """Memory-mapped view of a draws file; blocks are read lazily per batch."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            magic = fh.read(8)
            if magic != MAGIC:
                raise DataError(f"{self.path}: not a draws file")
            (hlen,) = struct.unpack("<I", fh.read(4))
            try:
                self.header = json.loads(fh.read(hlen).decode())
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise DataError(f"{self.path}: corrupt draws header") from exc
        h = self.header
        self.n_draws, self.p, self.n_total = h["n_draws"], h["p"], h["n_total"]
        self.rng_seed, self.config = h["rng_seed"], h["config"]
        self.mask_hash, self.design_hash = h["mask_hash"], h["design_hash"]
        self.level = h.get("level", 1.0)
        self.covariate_names = h.get("covariate_names", [])
        self.tag = h.get("tag")
        self._mm = np.memmap(self.path, dtype="u1", mode="r")
        self._blocks = []
        offset = 12 + hlen
        n, p = self.n_draws, self.p
        for lo, hi in h["blocks"]:
            c = hi - lo
            sizes = [8 * c, 8 * n * p * c, n * p * c, 16 * n * c, 8 * c]
            starts = np.cumsum([offset] + sizes)
            self._blocks.append((lo, hi, starts))
            offset = int(starts[-1])
        if offset != self._mm.size:
            raise DataError(f"{self.path}: size {self._mm.size} does not match header ({offset}); truncated?")
        self.positions = np.concatenate(
            [self._view(b, 0, "<i8", (b[1] - b[0],)) for b in self._blocks]
        ) if self._blocks else np.zeros(0, dtype=np.int64)
        if self.mask_hash != mask_digest(self.positions, self.n_total):
            raise DataError(f"{self.path}: positions do not match the recorded mask digest")

    def _view(self, block, k, dtype, shape):
        starts = block[2]
        return self._mm[starts[k] : starts[k + 1]].view(dtype).reshape(shape)

    def contrast_batch(self, weights, lo: int = 0, hi: int | None = None) -> np.ndarray:
        w = self._check_weights(weights)
        lo, hi, _ = slice(lo, hi).indices(self.n_draws)
        out = np.empty((hi - lo, self.t_star))
        for b in self._blocks:
            beta = self._view(b, 1, "<f8", (self.n_draws, self.p, b[1] - b[0]))
            out[:, b[0] : b[1]] = np.einsum("a,nat->nt", w, beta[lo:hi])
        return out

    def variance_batch(self, lo: int = 0, hi: int | None = None) -> np.ndarray:
        lo, hi, _ = slice(lo, hi).indices(self.n_draws)
        out = np.empty((hi - lo, self.t_star, 2))
        for b in self._blocks:
            out[:, b[0] : b[1]] = self._view(b, 3, "<f8", (self.n_draws, b[1] - b[0], 2))[lo:hi]
        return out

    def load(self) -> PosteriorDraws:
        n, p, T = self.n_draws, self.p, self.t_star
        beta = np.empty((n, p, T))
        gamma = np.empty((n, p, T), dtype=bool)
        var = np.empty((n, T, 2))
        acc = np.empty(T)
        for b in self._blocks:
            lo, hi = b[0], b[1]
            c = hi - lo
            beta[:, :, lo:hi] = self._view(b, 1, "<f8", (n, p, c))
            gamma[:, :, lo:hi] = self._view(b, 2, "u1", (n, p, c)).astype(bool)
            var[:, lo:hi] = self._view(b, 3, "<f8", (n, c, 2))
            acc[lo:hi] = self._view(b, 4, "<f8", (c,))
        return PosteriorDraws(beta, gamma, var, self.positions.copy(), self.n_total, self.rng_seed,
                              self.config, acc, self.level, self.mask_hash, self.design_hash,
                              list(self.covariate_names))


def copy_draws(src, dst, tag: str) -> None:
    """Copy a draws file, stamping ``tag`` into its header; the blocks are streamed unchanged."""
    with open(src, "rb") as fin:
        if fin.read(8) != MAGIC:
            raise DataError(f"{src}: not a draws file")
        (hlen,) = struct.unpack("<I", fin.read(4))
        header = json.loads(fin.read(hlen).decode())
        header["tag"] = tag
        raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        with open(dst, "wb") as fout:
            fout.write(MAGIC)
            fout.write(struct.pack("<I", len(raw)))
            fout.write(raw)
            shutil.copyfileobj(fin, fout, 1 << 20)


def read_draws(path) -> DrawsFile:
    return DrawsFile(path)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
