"""Image files (PGM and CSV) and dataset manifests."""

from __future__ import annotations

import csv
import io
import os
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from isofmm.errors import DataError
from isofmm.fmm.design import DesignSpec, cell_means_design
from isofmm.imagecore import Dataset, ImageGrid, ImageLabel

_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _pgm_header(buf: bytes, path) -> tuple[bytes, int, int, int, int]:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = _TOKEN.match(buf, pos)
        if not m:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise DataError(f"{path}: not a grayscale PGM (magic {magic!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DataError(f"{path}: bad PGM size or maxval")
    return magic, width, height, maxval, pos + 1  # one whitespace byte precedes raster


def read_pgm(path) -> np.ndarray:
    """Read an 8- or 16-bit PGM (plain or raw) as float64 rows x cols."""
    buf = Path(path).read_bytes()
    magic, width, height, maxval, start = _pgm_header(buf, path)
    if magic == b"P5":
        dtype = ">u2" if maxval > 255 else "u1"
        count = width * height
        raster = np.frombuffer(buf, dtype=dtype, count=count, offset=start) if \
            len(buf) - start >= count * np.dtype(dtype).itemsize else None
        if raster is None:
            raise DataError(f"{path}: PGM raster is truncated")
    else:
        text = re.sub(rb"#[^\n]*", b"", buf[start - 1 :])
        raster = np.array(text.split(), dtype=np.int64)
        if raster.size != width * height:
            raise DataError(f"{path}: expected {width * height} samples, found {raster.size}")
    return raster.reshape(height, width).astype(np.float64)


def write_pgm(path, values: np.ndarray, comments: Sequence[str] = ()) -> None:
    """Write a 16-bit raw PGM; values must already be integers in [0, 65535]."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise DataError("PGM images must be 2-D")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
        raise DataError("PGM samples must lie in [0, 65535]")
    header = "P5\n" + "".join(f"# {c}\n" for c in comments) + f"{arr.shape[1]} {arr.shape[0]}\n65535\n"
    Path(path).write_bytes(header.encode() + np.round(arr).astype(">u2").tobytes())


def heatmap(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Linear grayscale rendering onto [0, 65535]."""
    v = np.asarray(values, dtype=np.float64)
    lo = float(v.min()) if lo is None else lo
    hi = float(v.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint16)
    return np.round(np.clip((v - lo) / (hi - lo), 0, 1) * 65535).astype(np.uint16)


def read_image_csv(path) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return arr.astype(np.float64)


def write_image_csv(path, values: np.ndarray, tag: str | None = None) -> None:
    buf = io.StringIO()
    if tag:
        buf.write(f"# {tag}\n")
    np.savetxt(buf, np.asarray(values), delimiter=",", fmt="%.17g")
    Path(path).write_text(buf.getvalue())


def read_image(path) -> ImageGrid:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".pnm"):
        return ImageGrid(read_pgm(path))
    if suffix in (".csv", ".txt"):
        return ImageGrid(read_image_csv(path))
    raise DataError(f"{path}: unsupported image format {suffix!r} (use .pgm or .csv)")


def parse_manifest(path) -> list[ImageLabel]:
    """Rows ``path,image_id,group,unit``; ``#`` comments and a header row are allowed.

    Relative image paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    labels: list[ImageLabel] = []
    seen: dict[str, int] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            fields = [f.strip() for f in row]
            if lineno == 1 and fields[0].lower() == "path":
                continue
            if len(fields) != 4 or not all(fields):
                raise DataError(f"{path}:{lineno}: expected 4 nonempty fields "
                                f"(path,image_id,group,unit), got {len(fields)}")
            img_path, image_id, group, unit = fields
            if image_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate image_id {image_id!r} "
                                f"(first on line {seen[image_id]})")
            seen[image_id] = lineno
            full = Path(img_path) if os.path.isabs(img_path) else path.parent / img_path
            if not full.is_file():
                raise DataError(f"{path}:{lineno}: unknown image path {img_path!r}")
            labels.append(ImageLabel(image_id, group, unit, str(full)))
    if not labels:
        raise DataError(f"{path}: no images")
    return labels


def load_manifest(path, coding: str = "cell-means") -> tuple[Dataset, DesignSpec]:
    """Read every listed image and build group (X) and unit (Z) designs.

    Groups and units are numbered in order of first appearance.
    """
    labels = parse_manifest(path)
    images = [read_image(lab.path) for lab in labels]
    ds = Dataset(images, labels)
    design = cell_means_design([lab.group for lab in labels], [lab.unit for lab in labels], coding)
    return ds, design


def write_manifest(path, labels: Sequence[ImageLabel]) -> None:
    base = Path(path).parent
    lines = ["path,image_id,group,unit"]
    for lab in labels:
        rel = os.path.relpath(lab.path, base) if lab.path else ""
        lines.append(f"{rel},{lab.image_id},{lab.group},{lab.unit}")
    Path(path).write_text("\n".join(lines) + "\n")
