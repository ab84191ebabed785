"""Command line: ``isofmm <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
The worker count for the sampler comes from the ``ISOFMM_WORKERS`` environment
variable only; it never changes results.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path

from isofmm import __version__
from isofmm.compress import read_mask
from isofmm.errors import ConfigError, IsoFMMError
from isofmm.fmm.draws import read_draws
from isofmm.imageio import parse_manifest, read_image, write_manifest, write_pgm
from isofmm.imagecore import Dataset, ImageLabel, preprocess
from isofmm.phantom import PhantomSpec, simulate_dataset
from isofmm.pipeline import (
    RunConfig,
    _sha,
    config_hash,
    default_contrasts,
    design_for,
    emit,
    manifest_digest,
    read_preprocessed,
    run_pipeline,
    stage_compress,
    stage_fit,
    stage_infer,
    workers_from_env,
    write_preprocessed,
)
from isofmm.wavelet import WaveletSpec, read_coefset, transform_images, write_coefset

log = logging.getLogger("isofmm")


def parse_contrast(text: str, p: int | None = None) -> tuple[float, ...] | dict[int, float]:
    """``"1:1,3:-1"`` -> weights keyed by 1-based covariate index."""
    weights: dict[int, float] = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            a, w = item.split(":")
            a_i, w_f = int(a), float(w)
        except ValueError:
            raise ConfigError(f"bad contrast term {item!r}; expected a:w") from None
        if a_i < 1 or a_i in weights:
            raise ConfigError(f"contrast index {a_i} is invalid or repeated in {text!r}")
        weights[a_i] = w_f
    if not weights:
        raise ConfigError(f"empty contrast {text!r}")
    if p is None:
        return weights
    if max(weights) > p:
        raise ConfigError(f"contrast {text!r} refers to covariate {max(weights)} of {p}")
    return tuple(weights.get(a, 0.0) for a in range(1, p + 1))


def _delta_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad --delta value {text!r}") from None


def _add_wavelet(p: argparse.ArgumentParser) -> None:
    p.add_argument("--moments", type=int, help="vanishing moments of the Daubechies wavelet (default 4)")
    p.add_argument("--levels", type=int, help="decomposition levels J (default 6)")
    p.add_argument("--kind", choices=["square", "rectangular"], help="2-D transform kind (default square)")


def _add_mcmc(p: argparse.ArgumentParser) -> None:
    p.add_argument("--burn-in", type=int, help="discarded sweeps (default 1000)")
    p.add_argument("--iterations", type=int, help="sweeps after burn-in (default 20000)")
    p.add_argument("--thin", type=int, help="keep every k-th sweep (default 10)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")


def _add_infer(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, help="target Bayesian FDR (default 0.10)")
    p.add_argument("--delta", type=_delta_list, help="effect size(s) in log2 units, comma separated "
                   "(default log2(1.5))")
    p.add_argument("--contrast", action="append", metavar="a:w,...",
                   help="contrast weights by 1-based covariate index; repeatable "
                        "(default: all pairwise group differences)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isofmm", description="Wavelet-domain functional mixed models for image data")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="background-correct, normalize and log2-transform")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output cache file")
    p.add_argument("--halfwidth", type=int, default=100)

    p = sub.add_parser("transform", help="2-D wavelet transform of preprocessed images")
    p.add_argument("--input", required=True, help="preprocessed cache")
    p.add_argument("--out", required=True, help="coefficient cache")
    _add_wavelet(p)

    p = sub.add_parser("compress-plot", help="compression table and retained-coefficient mask")
    p.add_argument("--coefs", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--compression-p", type=float, default=0.975)

    p = sub.add_parser("fit", help="empirical Bayes hyperparameters and MCMC draws")
    p.add_argument("--coefs", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--manifest", required=True, help="supplies group and unit labels")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--coding", choices=["cell-means", "treatment"], default="cell-means")
    _add_mcmc(p)

    p = sub.add_parser("infer", help="effect images, discovery maps and regions from draws")
    p.add_argument("--draws", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="enables virtual gels and group names")
    p.add_argument("--coding", choices=["cell-means", "treatment"], default="cell-means")
    _add_infer(p)

    p = sub.add_parser("simulate", help="write a phantom gel dataset with known truth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--phantom", help="JSON file with phantom settings")

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--cache", help="cache directory (default <out>/cache)")
    p.add_argument("--config", help="rerun from a config echo file")
    p.add_argument("--compression-p", type=float)
    p.add_argument("--halfwidth", type=int)
    p.add_argument("--coding", choices=["cell-means", "treatment"])
    _add_wavelet(p)
    _add_mcmc(p)
    _add_infer(p)
    return ap


def _echo(path: Path, payload: dict) -> None:
    emit(path, lambda p: p.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n"))


def _pipeline_config(args) -> RunConfig:
    overrides = {
        "manifest": args.manifest, "out_dir": args.out, "cache_dir": args.cache,
        "moments": args.moments, "levels": args.levels, "kind": args.kind,
        "compression_p": args.compression_p, "halfwidth": args.halfwidth, "coding": args.coding,
        "burn_in": args.burn_in, "iterations": args.iterations, "thin": args.thin, "seed": args.seed,
        "alpha": args.alpha, "delta": args.delta,
    }
    if args.config:
        cfg = RunConfig.from_echo(args.config, **overrides)
    else:
        cfg = RunConfig(**{k: v for k, v in overrides.items() if v is not None})
    if args.contrast:
        p = None
        if cfg.manifest:
            p = design_for(parse_manifest(cfg.manifest), cfg.coding).p
        cfg.contrasts = tuple(parse_contrast(c, p) for c in args.contrast)
    return cfg


def cmd_pipeline(args) -> int:
    cfg = _pipeline_config(args)
    summary = run_pipeline(cfg)
    for entry in summary["contrasts"]:
        for d in entry["by_delta"]:
            phi = "none" if d["phi"] is None else f"{d['phi']:.4g}"
            print(f"{entry['name']}: delta={d['delta']:.4f} phi={phi} flagged={d['n_flagged']} "
                  f"regions={d['n_regions']}")
    print(f"outputs in {cfg.out_dir} (config {summary['config_hash']})")
    return 0


def cmd_preprocess(args) -> int:
    if args.halfwidth < 1:
        raise ConfigError("halfwidth must be >= 1")
    labels = parse_manifest(args.manifest)
    digest = manifest_digest(labels)
    pre = preprocess(Dataset([read_image(l.path) for l in labels], labels), args.halfwidth)
    out = emit(args.out, lambda p: write_preprocessed(p, pre, {"halfwidth": args.halfwidth, "source": digest}))
    print(f"preprocessed {pre.n_images} images of size {pre.dims[0]}x{pre.dims[1]} -> {out}")
    return 0


def cmd_transform(args) -> int:
    pre, _ = read_preprocessed(args.input)
    cfg = RunConfig(**{k: v for k, v in {"moments": args.moments, "levels": args.levels,
                                         "kind": args.kind}.items() if v is not None})
    cs = transform_images(pre, cfg.wavelet_spec())
    out = emit(args.out, lambda p: write_coefset(p, cs))
    print(f"{cs.n_images} images -> {cs.n_total} coefficients each -> {out}")
    return 0


def cmd_compress(args) -> int:
    cs = read_coefset(args.coefs)
    cfg = RunConfig(compression_p=args.compression_p, moments=cs.spec.vanishing_moments,
                    levels=cs.spec.levels, kind=cs.spec.kind)
    tag = f"config={config_hash(cfg, _sha(Path(args.coefs).read_bytes()))}"
    mask = stage_compress(cfg, cs, Path(args.out), tag)
    print(f"P={mask.level:g}: T*={mask.t_star} of {mask.n_total} (ratio {mask.ratio:.1f}:1)")
    return 0


def cmd_fit(args) -> int:
    cs = read_coefset(args.coefs)
    mask, meta = read_mask(args.mask)
    if (cs.dims[0], cs.dims[1]) != tuple(int(v) for v in meta["dims"].split("x")):
        raise ConfigError("mask and coefficient cache have different dimensions")
    labels = parse_manifest(args.manifest)
    design = design_for(labels, args.coding)
    if design.n != cs.n_images:
        raise ConfigError(f"manifest lists {design.n} images; coefficient cache has {cs.n_images}")
    kw = {k: v for k, v in {"burn_in": args.burn_in, "iterations": args.iterations,
                            "thin": args.thin, "seed": args.seed}.items() if v is not None}
    cfg = RunConfig(moments=cs.spec.vanishing_moments, levels=cs.spec.levels, kind=cs.spec.kind,
                    compression_p=mask.level, coding=args.coding, **kw)
    coef_key = _sha(Path(args.coefs).read_bytes())
    tag = f"config={config_hash(cfg, coef_key)}"
    out = Path(args.out)
    with tempfile.TemporaryDirectory() as cache:
        draws = stage_fit(cfg, cs, mask, design, coef_key, out, Path(cache), tag, workers_from_env())
    print(f"{draws.n_draws} draws x {draws.t_star} columns -> {out / 'draws.bin'}")
    return 0


def cmd_infer(args) -> int:
    draws = read_draws(args.draws)
    mask, meta = read_mask(args.mask)
    draws.check_provenance(mask_hash=mask.digest())
    wav = draws.config.get("wavelet")
    dims = tuple(draws.config.get("dims") or (int(v) for v in meta["dims"].split("x")))
    if wav is None:
        raise ConfigError("draws file does not record its wavelet settings")
    spec = WaveletSpec(wav["vanishing_moments"], wav["levels"], wav["kind"])
    labels = design = None
    names = list(draws.covariate_names) or [f"x{a + 1}" for a in range(draws.p)]
    if args.manifest:
        labels = parse_manifest(args.manifest)
        design = design_for(labels, args.coding)
        if design.p != draws.p:
            raise ConfigError(f"design has {design.p} covariates; the draws have {draws.p}")
        draws.check_provenance(design_hash=design.digest())
    kw = {k: v for k, v in {"alpha": args.alpha, "delta": args.delta}.items() if v is not None}
    cfg = RunConfig(seed=draws.rng_seed, virtual_gels=design is not None, coding=args.coding, **kw)
    if args.contrast:
        contrasts = [parse_contrast(c, draws.p) for c in args.contrast]
    elif design is not None:
        contrasts = default_contrasts(design, args.coding)
    else:
        contrasts = [tuple(1.0 if i == a else 0.0 for i in range(draws.p)) for a in range(draws.p)]
    chash = _sha(cfg.settings(), draws.mask_hash, draws.design_hash, [list(c) for c in contrasts])
    summary = stage_infer(cfg, draws, spec, dims, names, contrasts, Path(args.out), chash, labels, design)
    for entry in summary["contrasts"]:
        for d in entry["by_delta"]:
            phi = "none" if d["phi"] is None else f"{d['phi']:.4g}"
            print(f"{entry['name']}: delta={d['delta']:.4f} phi={phi} regions={d['n_regions']}")
    return 0


def cmd_simulate(args) -> int:
    settings = {}
    if args.phantom:
        try:
            settings = json.loads(Path(args.phantom).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read phantom settings: {exc}") from None
    settings["seed"] = args.seed
    spec = PhantomSpec.from_dict(settings)
    ds, truth = simulate_dataset(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = []
    for img, lab in zip(ds.images, ds.labels):
        path = out / f"{lab.image_id}.pgm"
        emit(path, lambda p: write_pgm(p, img.values, [f"phantom seed={spec.seed}"]))
        labels.append(ImageLabel(lab.image_id, lab.group, lab.unit, str(path)))
    emit(out / "manifest.csv", lambda p: write_manifest(p, labels))
    truth.save(out / "truth.npz")
    _echo(out / "phantom.json", spec.to_dict())
    print(f"{ds.n_images} gels of {spec.dims[0]}x{spec.dims[1]} -> {out / 'manifest.csv'}")
    return 0


COMMANDS = {
    "pipeline": cmd_pipeline, "preprocess": cmd_preprocess, "transform": cmd_transform,
    "compress-plot": cmd_compress, "fit": cmd_fit, "infer": cmd_infer, "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except IsoFMMError as exc:
        print(f"isofmm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"isofmm: error: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 130



def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    entry()
