"""End-to-end runs: preprocess, transform, compress, fit, infer.

Every stage writes its outputs through ``.partial`` files that are renamed on
success. Intermediate results are cached under content hashes, so a rerun
with the same inputs and settings resumes from the last completed stage and
reproduces the same bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from isofmm.compress import CompressionMask, compression_table, read_mask, select_retained, \
    write_compression_table, write_mask
from isofmm.errors import ConfigError, DataError, IsoFMMError, ProvenanceError
from isofmm.fmm.design import DesignSpec, cell_means_design
from isofmm.fmm.draws import DrawsFile, copy_draws, read_draws, write_draws
from isofmm.fmm.estimates import init_estimates
from isofmm.fmm.hyper import estimate_shrinkage_hyperparams, write_hyperparams
from isofmm.fmm.sampler import SamplerConfig, run_sampler
from isofmm.imageio import heatmap, parse_manifest, read_image, write_image_csv, write_pgm
from isofmm.imagecore import Dataset, ImageGrid, ImageLabel, preprocess
from isofmm.inference import DEFAULT_QUANTILES, fdr_threshold, flag_regions, iter_effect_batches, \
    virtual_gel, write_regions
from isofmm.wavelet import CoefSet, WaveletSpec, read_coefset, transform_images, write_coefset

log = logging.getLogger(__name__)

DEFAULT_P_GRID = (0.5, 0.8, 0.9, 0.95, 0.975, 0.99, 0.995, 0.999, 1.0)
WORKERS_ENV = "ISOFMM_WORKERS"
INCOMPLETE = "INCOMPLETE"


@dataclass
class RunConfig:
    manifest: str | None = None
    out_dir: str = "isofmm-out"
    cache_dir: str | None = None
    moments: int = 4
    levels: int = 6
    kind: str = "square"
    compression_p: float = 0.975
    halfwidth: int = 100
    burn_in: int = 1000
    iterations: int = 20000
    thin: int = 10
    seed: int = 0
    alpha: float = 0.10
    delta: tuple[float, ...] = (math.log2(1.5),)
    contrasts: tuple[tuple[float, ...], ...] | None = None  # None: all pairwise group differences
    coding: str = "cell-means"
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES
    block_size: int = 512
    virtual_gels: bool = True

    # fields that locate files rather than determine results
    _LOCATION_FIELDS = ("manifest", "out_dir", "cache_dir")

    def __post_init__(self):
        self.delta = tuple(float(d) for d in np.atleast_1d(self.delta))
        self.quantiles = tuple(float(q) for q in self.quantiles)
        if self.contrasts is not None:
            self.contrasts = tuple(tuple(float(w) for w in c) for c in self.contrasts)
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if any(d < 0 for d in self.delta) or not self.delta:
            raise ConfigError("delta values must be nonnegative")
        if not 0 < self.compression_p <= 1:
            raise ConfigError(f"compression P must lie in (0, 1], got {self.compression_p}")
        if any(not 0 < q < 1 for q in self.quantiles):
            raise ConfigError("quantile levels must lie in (0, 1)")
        if self.coding not in ("cell-means", "treatment"):
            raise ConfigError(f"unknown coding {self.coding!r}")
        if self.halfwidth < 1:
            raise ConfigError("halfwidth must be >= 1")
        self.wavelet_spec()
        self.sampler_config()

    def wavelet_spec(self) -> WaveletSpec:
        return WaveletSpec(self.moments, self.levels, self.kind)

    def sampler_config(self, workers: int = 1) -> SamplerConfig:
        return SamplerConfig(burn_in=self.burn_in, iterations=self.iterations, thin=self.thin,
                             seed=self.seed, block_size=self.block_size, workers=workers)

    def settings(self) -> dict:
        d = dataclasses.asdict(self)
        for key in self._LOCATION_FIELDS:
            d.pop(key)
        d["delta"] = list(self.delta)
        d["quantiles"] = list(self.quantiles)
        d["contrasts"] = None if self.contrasts is None else [list(c) for c in self.contrasts]
        return d

    @classmethod
    def from_echo(cls, path, **overrides) -> "RunConfig":
        try:
            echo = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config echo {path}: {exc}") from None
        d = dict(echo.get("config", echo))
        for key in ("delta", "quantiles"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("contrasts") is not None:
            d["contrasts"] = tuple(tuple(c) for c in d["contrasts"])
        for key in cls._LOCATION_FIELDS:
            if echo.get(key) is not None:
                d.setdefault(key, echo[key])
        d.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys in {path}: {sorted(unknown)}")
        return cls(**d)


def _sha(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, (bytes, bytearray)):
            h.update(part)
        else:
            h.update(json.dumps(part, sort_keys=True, separators=(",", ":")).encode())
        h.update(b"\x1e")
    return h.hexdigest()[:16]


def config_hash(cfg: RunConfig, manifest_digest: str = "") -> str:
    return _sha(cfg.settings(), manifest_digest)


def workers_from_env() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def emit(path, write: Callable[[Path], None]) -> Path:
    """Write via ``<path>.partial`` and rename, so readers never see half a file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    write(tmp)
    os.replace(tmp, path)
    return path


def _run_stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except IsoFMMError as exc:
        raise type(exc)(f"stage {name}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"stage {name}: {exc.filename or ''}: {exc.strerror or exc}") from exc


# --- preprocessed-image cache --------------------------------------------------

_PRE_MAGIC = b"ISOFMMP1"


def write_preprocessed(path, ds: Dataset, meta: dict) -> None:
    header = json.dumps({"meta": meta, "labels": [dataclasses.asdict(l) for l in ds.labels],
                         "shape": list(ds.stack().shape)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PRE_MAGIC + struct.pack("<I", len(header)) + header)
        fh.write(np.ascontiguousarray(ds.stack(), dtype="<f8").tobytes())


def read_preprocessed(path) -> tuple[Dataset, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _PRE_MAGIC:
        raise DataError(f"{path}: not a preprocessed-image cache")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + hlen])
    shape = tuple(header["shape"])
    body = raw[12 + hlen :]
    if len(body) != 8 * int(np.prod(shape)):
        raise DataError(f"{path}: truncated preprocessed-image cache")
    stack = np.frombuffer(body, "<f8").reshape(shape)
    labels = [ImageLabel(**d) for d in header["labels"]]
    return Dataset([ImageGrid(img) for img in stack], labels), header["meta"]


# --- stages --------------------------------------------------------------------


def manifest_digest(labels: Sequence[ImageLabel]) -> str:
    """Digest over label fields and image bytes (not paths)."""
    h = hashlib.sha256()
    for lab in labels:
        h.update(f"{lab.image_id}\x1f{lab.group}\x1f{lab.unit}\x1e".encode())
        h.update(hashlib.sha256(Path(lab.path).read_bytes()).digest())
    return h.hexdigest()[:16]


def design_for(labels: Sequence[ImageLabel], coding: str) -> DesignSpec:
    return cell_means_design([l.group for l in labels], [l.unit for l in labels], coding)


def default_contrasts(design: DesignSpec, coding: str) -> list[tuple[float, ...]]:
    p = design.p
    if coding == "cell-means" and p >= 2:
        out = []
        for a in range(p):
            for b in range(a + 1, p):
                w = [0.0] * p
                w[a], w[b] = 1.0, -1.0
                out.append(tuple(w))
        return out
    return [tuple(1.0 if i == a else 0.0 for i in range(p)) for a in range(p)]


def contrast_name(weights: Sequence[float], names: Sequence[str]) -> str:
    parts = []
    for w, n in zip(weights, names):
        if w == 0:
            continue
        sign = "-" if w < 0 else "+"
        mag = "" if abs(w) == 1 else f"{abs(w):g}*"
        parts.append(f"{sign}{mag}{n}")
    text = "".join(parts).lstrip("+") or "zero"
    return "".join(ch if ch.isalnum() or ch in "+-*._" else "_" for ch in text)


def stage_preprocess(cfg: RunConfig, labels, digest: str, cache: Path) -> tuple[Dataset, Path]:
    key = _sha("pre", digest, cfg.halfwidth)
    path = cache / f"pre-{key}.bin"
    if path.is_file():
        ds, _ = read_preprocessed(path)
        return ds, path
    raw = Dataset([read_image(l.path) for l in labels], list(labels))
    if raw.n_images == 0:
        raise DataError("no images")
    pre = preprocess(raw, cfg.halfwidth)
    emit(path, lambda p: write_preprocessed(p, pre, {"halfwidth": cfg.halfwidth, "source": digest}))
    return pre, path


def stage_transform(cfg: RunConfig, pre: Dataset, pre_key: str, cache: Path) -> tuple[CoefSet, str]:
    spec = cfg.wavelet_spec()
    spec.check_dims(pre.dims)
    key = _sha("coefs", pre_key, spec.to_dict())
    path = cache / f"coefs-{key}.bin"
    if path.is_file():
        return read_coefset(path), key
    cs = transform_images(pre, spec)
    emit(path, lambda p: write_coefset(p, cs))
    return cs, key


def spec_tag(spec: WaveletSpec) -> str:
    return f"db{spec.vanishing_moments}/J{spec.levels}/{spec.kind}"


def stage_compress(cfg: RunConfig, cs: CoefSet, out: Path, tag: str) -> CompressionMask:
    table = compression_table(cs, sorted(set(DEFAULT_P_GRID) | {cfg.compression_p}))
    emit(out / "compression.csv", lambda p: write_compression_table(p, table, cs.n_total, tag))
    mask = select_retained(cs, cfg.compression_p)
    emit(out / "mask.txt", lambda p: write_mask(p, mask, cs.dims, spec_tag(cs.spec), tag))
    return mask


def stage_fit(cfg: RunConfig, cs: CoefSet, mask: CompressionMask, design: DesignSpec,
              coef_key: str, out: Path, cache: Path, tag: str, workers: int = 1) -> DrawsFile:
    sub = cs.restrict(mask.retained)
    init = init_estimates(sub, design)
    hyper = estimate_shrinkage_hyperparams(init, cs.index_map, mask.retained)
    emit(out / "hyperparams.csv", lambda p: write_hyperparams(p, hyper, design.covariate_names, tag))
    scfg = cfg.sampler_config(workers)
    key = _sha("draws", coef_key, mask.digest(), design.digest(), scfg.to_dict())
    cached = cache / f"draws-{key}.bin"
    if not cached.is_file():
        draws = run_sampler(sub, design, hyper, scfg, init=init, mask_hash=mask.digest(),
                            design_hash=design.digest(), level=mask.level)
        draws.config = {**draws.config, "wavelet": cs.spec.to_dict(), "dims": list(cs.dims)}
        emit(cached, lambda p: write_draws(p, draws))
    emit(out / "draws.bin", lambda p: copy_draws(cached, p, tag))
    return read_draws(out / "draws.bin")


def _write_grid(base: Path, values: np.ndarray, tag: str, lo=None, hi=None) -> None:
    emit(base.with_name(base.name + ".csv"), lambda p: write_image_csv(p, values, tag))
    emit(base.with_name(base.name + ".pgm"), lambda p: write_pgm(p, heatmap(values, lo, hi), [tag]))


def summarize_contrast(draws, weights, spec: WaveletSpec, dims, deltas, quantiles,
                       scratch_dir: Path, batch: int = 64):
    """Stream draws once: posterior mean, exceedance counts per delta and quantiles."""
    n = draws.n_draws
    total = np.zeros(dims)
    counts = [np.zeros(dims, dtype=np.int64) for _ in deltas]
    store = None
    if quantiles:
        fd, tmp = tempfile.mkstemp(dir=scratch_dir, suffix=".draws")
        os.close(fd)
        store = np.memmap(tmp, dtype=np.float64, mode="w+", shape=(n, dims[0] * dims[1]))
    k = 0
    try:
        for chunk in iter_effect_batches(draws, weights, spec, dims, batch):
            if not np.all(np.isfinite(chunk)):
                raise DataError("reconstructed effect draws contain non-finite values")
            total += chunk.sum(axis=0)
            for c, d in zip(counts, deltas):
                c += np.count_nonzero(np.abs(chunk) > d, axis=0)
            if store is not None:
                store[k : k + chunk.shape[0]] = chunk.reshape(chunk.shape[0], -1)
            k += chunk.shape[0]
        qimgs = {}
        if store is not None:
            T = dims[0] * dims[1]
            qs = np.empty((len(quantiles), T))
            step = max(1, (1 << 22) // max(n, 1))
            for lo in range(0, T, step):
                qs[:, lo : lo + step] = np.quantile(store[:, lo : lo + step], quantiles, axis=0)
            qimgs = {q: qs[i].reshape(dims) for i, q in enumerate(quantiles)}
    finally:
        if store is not None:
            name = store.filename
            del store
            os.unlink(name)
    return total / n, [c / n for c in counts], qimgs


def stage_infer(cfg: RunConfig, draws, spec: WaveletSpec, dims, design_names: Sequence[str],
                contrasts, out: Path, chash: str, labels=None, design: DesignSpec | None = None) -> dict:
    tag = f"config={chash}"
    summary: dict = {"alpha": cfg.alpha, "deltas": list(cfg.delta), "contrasts": [], "config_hash": chash}
    scratch = out / ".scratch"
    scratch.mkdir(parents=True, exist_ok=True)
    try:
        for k, w in enumerate(contrasts, start=1):
            name = f"c{k}_{contrast_name(w, design_names)}"
            cdir = out / name
            mean, probs, qimgs = summarize_contrast(draws, w, spec, dims, cfg.delta, cfg.quantiles, scratch)
            _write_grid(cdir / "mean", mean, tag)
            for q, img in qimgs.items():
                _write_grid(cdir / f"quantile_{q:g}", img, tag)
            entry = {"name": name, "weights": list(w), "by_delta": []}
            for d, prob in zip(cfg.delta, probs):
                dl = f"{d:.4f}"
                phi, xi = fdr_threshold(prob, cfg.alpha)
                dm = flag_regions(prob, phi, d, cfg.alpha, xi)
                _write_grid(cdir / f"prob_delta{dl}", prob, tag, 0.0, 1.0)
                emit(cdir / f"flagged_delta{dl}.pgm",
                     lambda p: write_pgm(p, dm.flagged.astype(np.uint16) * 65535, [tag]))
                emit(cdir / f"regions_delta{dl}.csv", lambda p: write_regions(p, dm.regions, tag))
                entry["by_delta"].append({"delta": d, "phi": phi, "xi": xi, "n_flagged": dm.n_flagged,
                                          "n_regions": len(dm.regions)})
            summary["contrasts"].append(entry)
        if cfg.virtual_gels and design is not None and labels is not None:
            summary["virtual_gels"] = _virtual_gels(cfg, draws, spec, dims, design, labels, out, tag)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    emit(out / "summary.json", lambda p: p.write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n"))
    return summary


def _virtual_gels(cfg, draws, spec, dims, design: DesignSpec, labels, out: Path, tag: str) -> list:
    """One posterior-predictive gel per distinct design row, for a unit of that row."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(2**31,))))
    made, seen = [], set()
    for i, lab in enumerate(labels):
        x = tuple(design.X[i])
        if x in seen:
            continue
        seen.add(x)
        z = design.Z[i] if design.Z is not None else np.zeros(0)
        gel = virtual_gel(draws, design.X[i], z, spec, dims, rng)
        name = f"virtual_{lab.group}"
        _write_grid(out / "virtual" / name, gel.values, tag)
        made.append({"name": name, "group": lab.group, "unit": lab.unit})
    return made


def _prepare_out(out: Path, chash: str, echo: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    echo_path = out / "config.json"
    if echo_path.is_file():
        try:
            old = json.loads(echo_path.read_text()).get("config_hash")
        except json.JSONDecodeError:
            old = None
        if old and old != chash:
            raise ProvenanceError(f"{out} holds artifacts of config {old}; this run is {chash}. "
                                  "Use a fresh output directory.")
    emit(echo_path, lambda p: p.write_text(json.dumps(echo, sort_keys=True, indent=1) + "\n"))


def run_pipeline(cfg: RunConfig) -> dict:
    """Run every stage; returns a summary dict. Raises IsoFMMError subclasses on failure."""
    if not cfg.manifest:
        raise ConfigError("a manifest is required")
    out = Path(cfg.out_dir)
    cache = Path(cfg.cache_dir) if cfg.cache_dir else out / "cache"
    labels = _run_stage("preprocess", parse_manifest, cfg.manifest)
    digest = _run_stage("preprocess", manifest_digest, labels)
    chash = config_hash(cfg, digest)
    tag = f"config={chash}"
    echo = {"config": cfg.settings(), "config_hash": chash, "manifest_digest": digest,
            "manifest": str(cfg.manifest)}
    _prepare_out(out, chash, echo)
    marker = out / INCOMPLETE
    marker.write_text("running\n")
    stage = "preprocess"
    try:
        design = _run_stage("preprocess", design_for, labels, cfg.coding)
        pre, pre_path = _run_stage("preprocess", stage_preprocess, cfg, labels, digest, cache)
        pre_key = pre_path.stem.split("-", 1)[1]
        stage = "transform"
        cs, coef_key = _run_stage(stage, stage_transform, cfg, pre, pre_key, cache)
        stage = "compress"
        mask = _run_stage(stage, stage_compress, cfg, cs, out, tag)
        stage = "fit"
        draws = _run_stage(stage, stage_fit, cfg, cs, mask, design, coef_key, out, cache, tag,
                           workers_from_env())
        stage = "infer"
        contrasts = list(cfg.contrasts) if cfg.contrasts else default_contrasts(design, cfg.coding)
        for w in contrasts:
            if len(w) != design.p:
                raise ConfigError(f"contrast {w} has {len(w)} weights; the design has {design.p} covariates")
        summary = _run_stage(stage, stage_infer, cfg, draws, cs.spec, cs.dims, design.covariate_names,
                             contrasts, out, chash, labels, design)
    except BaseException as exc:
        marker.write_text(f"stage {stage} failed: {exc}\n")
        raise
    marker.unlink()
    summary["t_star"] = mask.t_star
    summary["config_hash"] = chash
    return summary


def check_mask_matches(draws, mask_path) -> CompressionMask:
    mask, meta = read_mask(mask_path)
    draws.check_provenance(mask_hash=mask.digest())
    return mask
