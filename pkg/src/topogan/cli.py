"""Command-line entry point: ``topogan <stage> [options]``.

Every stage resolves its settings as built-in defaults, then the optional
``--config`` key=value file, then explicit flags, and writes a
``<artifact>.run.json`` manifest holding the resolved settings and the
artifact hash.  ``topogan rerun MANIFEST`` replays a stage from such a
manifest and checks that the hash comes out the same.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from topogan import __version__, fieldio, simp
from topogan.dataset import (
    ParamBounds, augment, area_resize, generate_dataset, parameter_grid,
    read_dataset, resized, write_dataset,
)
from topogan.errors import ParameterError, TopoganError, UsageError
from topogan.pipeline import (
    RunConfig, directory_hash, file_hash, read_run_manifest, run_manifest_path, validate_sample,
    write_run_manifest,
)
from topogan.postproc import PostprocConfig, postprocess
from topogan.regressor import PROFILES as REG_PROFILES, RegressorHyper, load_regressor, predict_params, save_regressor, train_regressor

log = logging.getLogger("topogan")

DEFAULTS = {
    "simp": dict(nelx=60, nely=40, volfrac=0.5, penal=3.0, rmin=1.5, max_iters=200, change_tol=0.01, preview=False),
    "dataset": dict(nelx=60, nely=60, counts="6,5,5", augment=False, noise_fraction=0.01, noise_magnitude=0.2,
                    seed=0, workers=1, previews=False),
    "train-regressor": dict(profile="desk", epochs=300, batch_size=16, lr=2e-4, seed=0, val_fraction=0.1),
    "train-gan": dict(profile="desk", steps=2000, seed=0, n_critic=1, lr=5e-5, clip=0.01, batch_size=64,
                      loss="wasserstein", critic_bn=True, latent_dim=100),
    "generate": dict(n=64, seed=0, previews=True),
    "postprocess": dict(threshold=0.5, kernel=5, sigma=1.0, border="reflect"),
    "validate": dict(nelx=60, nely=60, threshold=0.5, kernel=5, sigma=1.0, border="reflect", limit=0),
    "report": dict(nelx=60, nely=60, threshold=0.5, kernel=5, sigma=1.0, border="reflect"),
}


def _require(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    if not Path(path).exists():
        raise ParameterError(f"{what} {path} does not exist")
    return Path(path)


def _postproc(cfg: RunConfig) -> PostprocConfig:
    return PostprocConfig(cfg["threshold"], int(cfg["kernel"]), float(cfg["sigma"]), cfg["border"])


def _provenance(cfg: RunConfig) -> dict:
    # the output path is left out so a replay to another location is byte-identical
    return {k: v for k, v in sorted(cfg.values.items()) if k != "out"}


# stages: each takes a resolved RunConfig and returns (artifact, hash, inputs)

def stage_simp(cfg):
    mesh = simp.Mesh(int(cfg["nelx"]), int(cfg["nely"]))
    settings = simp.SimpSettings(cfg["volfrac"], cfg["penal"], cfg["rmin"], max_iters=int(cfg["max_iters"]),
                                 change_tol=cfg["change_tol"])
    res = simp.optimize(settings, mesh)
    out = Path(cfg["out"])
    fieldio.write_field(out, res.density)
    if cfg["preview"]:
        fieldio.write_pgm(out.with_suffix(".pgm"), res.density)
    print(json.dumps({"iterations": res.iterations, "converged": res.converged,
                      "compliance": res.final_compliance, "mean_density": float(res.density.mean())}))
    return out, file_hash(out), {}


def stage_dataset(cfg):
    try:
        counts = tuple(int(c) for c in str(cfg["counts"]).split(","))
    except ValueError:
        raise ParameterError(f"--counts must be three integers, got {cfg['counts']!r}") from None
    if len(counts) != 3:
        raise ParameterError(f"--counts must be three integers, got {cfg['counts']!r}")
    mesh = simp.Mesh(int(cfg["nelx"]), int(cfg["nely"]))
    ds = generate_dataset(parameter_grid(ParamBounds(counts=counts)), mesh, workers=int(cfg["workers"]))
    if cfg["augment"]:
        ds = augment(ds, cfg["noise_fraction"], cfg["noise_magnitude"], seed=int(cfg["seed"]))
    ds.metadata["run"] = _provenance(cfg)
    out = Path(cfg["out"])
    digest = write_dataset(ds, out, previews=bool(cfg["previews"]))
    print(json.dumps({"samples": len(ds), "failures": ds.metadata.get("warning_count", 0), "content_hash": digest}))
    return out, digest, {}


def _training_images(data, side):
    ds = read_dataset(data)
    if ds.images().shape[1:] != (side, side):
        ds = resized(ds, side)
    return ds


def stage_train_regressor(cfg):
    data = _require(cfg.get("data"), "--data")
    if cfg["profile"] not in REG_PROFILES:
        raise ParameterError(f"unknown profile {cfg['profile']!r}")
    raw = read_dataset(data)
    ds = _training_images(data, REG_PROFILES[cfg["profile"]].input_side)
    hyper = RegressorHyper(cfg["profile"], int(cfg["epochs"]), int(cfg["batch_size"]), float(cfg["lr"]),
                           int(cfg["seed"]), float(cfg["val_fraction"]))
    trained = train_regressor(ds, hyper)
    out = Path(cfg["out"])
    digest = save_regressor(out, trained, {"run": _provenance(cfg), "data_hash": raw.content_hash()})
    last = trained.history[-1]
    print(json.dumps({"epochs": hyper.epochs, "train_loss": last["train_loss"], "val_loss": last["val_loss"]}))
    return out, digest, {"data": raw.content_hash()}


def stage_train_gan(cfg):
    from topogan.wgan import PROFILES, GanConfig, save_gan, train_wgan
    data = _require(cfg.get("data"), "--data")
    if cfg["profile"] not in PROFILES:
        raise ParameterError(f"unknown profile {cfg['profile']!r}")
    raw = read_dataset(data)
    ds = _training_images(data, PROFILES[cfg["profile"]].side)
    gcfg = GanConfig(profile=cfg["profile"], latent_dim=int(cfg["latent_dim"]), lr_critic=float(cfg["lr"]),
                     lr_generator=float(cfg["lr"]), clip=float(cfg["clip"]), n_critic=int(cfg["n_critic"]),
                     loss=cfg["loss"], critic_batchnorm=bool(cfg["critic_bn"]), batch_size=int(cfg["batch_size"]),
                     steps=int(cfg["steps"]))
    gan = train_wgan(ds.images(), gcfg, seed=int(cfg["seed"]))
    out = Path(cfg["out"])
    digest = save_gan(out, gan, {"run": _provenance(cfg), "data_hash": raw.content_hash()})
    print(json.dumps({"steps": gcfg.steps, "final": gan.history[-1]}))
    return out, digest, {"data": raw.content_hash()}


def stage_generate(cfg):
    from topogan.wgan import load_gan, sample_structures
    gan_path = _require(cfg.get("gan"), "--gan")
    gan = load_gan(gan_path)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(sample_structures(gan, int(cfg["n"]), seed=int(cfg["seed"]))):
        fieldio.write_field(out / f"g{i:05d}.topo", img)
        if cfg["previews"]:
            fieldio.write_pgm(out / f"g{i:05d}.pgm", img)
    return out, directory_hash(out, "*.topo"), {"gan": file_hash(gan_path)}


def stage_postprocess(cfg):
    src = _require(cfg.get("in"), "--in")
    out = Path(cfg["out"])
    fieldio.write_field(out, postprocess(fieldio.read_field(src), _postproc(cfg)))
    return out, file_hash(out), {"in": file_hash(src)}


def _image_sources(cfg):
    if cfg.get("images"):
        paths = [_require(p, "image") for p in str(cfg["images"]).split(",")]
        return [(p.stem, fieldio.read_field(p)) for p in paths]
    if cfg.get("data"):
        ds = read_dataset(_require(cfg["data"], "--data"))
        samples = [s for s in ds.samples if not s.augmented]
        if int(cfg["limit"]) > 0:
            samples = samples[: int(cfg["limit"])]
        return [(s.id, s.image) for s in samples]
    raise UsageError("validate needs --images or --data")


def stage_validate(cfg):
    model = load_regressor(_require(cfg.get("model"), "--model"))
    mesh = simp.Mesh(int(cfg["nelx"]), int(cfg["nely"]))
    pp = _postproc(cfg)
    out = Path(cfg["out"])
    lines = []
    for name, image in _image_sources(cfg):
        report = validate_sample(image, model, mesh, postproc=pp)
        rec = {"id": name, **report.record()}
        rec.pop("timings")  # wall-clock values would break bit-exact reruns
        lines.append(json.dumps(rec, sort_keys=True))
        log.info("%s iou=%s", name, rec["iou"])
    out.write_text("\n".join(lines) + "\n")
    return out, file_hash(out), {"model": file_hash(cfg["model"])}


def triptych(image, params, rerun, bounds: ParamBounds = ParamBounds(), gap: int = 2) -> np.ndarray:
    """Side-by-side panel: input | parameter bars | SIMP rerun (density units)."""
    h, w = image.shape
    mid = np.zeros((h, w))
    rows = np.array_split(np.arange(h), 3)
    for r, v, (lo, hi) in zip(rows, params.as_tuple(), (bounds.vol_frac, bounds.penal, bounds.r_min)):
        frac = float(np.clip((v - lo) / (hi - lo), 0, 1))
        band = r[len(r) // 4: len(r) - len(r) // 4] if len(r) >= 4 else r
        mid[band, : max(1, int(round(frac * w)))] = 1.0
    sep = np.full((h, gap), 0.5)
    return np.hstack([image, sep, mid, sep, rerun])


def stage_report(cfg):
    model = load_regressor(_require(cfg.get("model"), "--model"))
    src = _require(cfg.get("image"), "--image")
    image = fieldio.read_field(src).astype(np.float64)
    mesh = simp.Mesh(int(cfg["nelx"]), int(cfg["nely"]))
    rep = validate_sample(image, model, mesh, postproc=_postproc(cfg))
    if rep.failed:
        raise TopoganError(f"SIMP rerun failed: {rep.error}")
    rerun = area_resize(rep.result.density, *image.shape)
    p = rep.params
    note = (f"left: input  middle: vol_frac={p.vol_frac:.4f} penal={p.penal:.4f} r_min={p.r_min:.4f}  right: SIMP\n"
            f"iou={rep.iou:.4f} mae={rep.mae:.4f} compliance={rep.compliance:.4f}")
    out = Path(cfg["out"])
    fieldio.write_pgm(out, triptych(image, p, rerun), comment=note)
    print(json.dumps(rep.record() | {"timings": None}))
    return out, file_hash(out), {"model": file_hash(cfg["model"]), "image": file_hash(src)}


def stage_predict(cfg):
    model = load_regressor(_require(cfg.get("model"), "--model"))
    image = fieldio.read_field(_require(cfg.get("image"), "--image"))
    side = model.input_side
    if image.shape != (side, side):
        image = area_resize(image, side)
    print(json.dumps(dataclasses.asdict(predict_params(model, image))))


STAGES = {
    "simp": stage_simp,
    "dataset": stage_dataset,
    "train-regressor": stage_train_regressor,
    "train-gan": stage_train_gan,
    "generate": stage_generate,
    "postprocess": stage_postprocess,
    "validate": stage_validate,
    "report": stage_report,
}


def _bool_flag(p, name, help):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction, default=None,
                   help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topogan", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def stage(name, help):
        p = sub.add_parser(name, help=help, argument_default=None)
        p.add_argument("--config", help="key=value settings file; flags override it")
        return p

    p = stage("simp", "optimize one cantilever")
    for f, t in (("nelx", int), ("nely", int), ("volfrac", float), ("penal", float), ("rmin", float),
                 ("max-iters", int), ("change-tol", float)):
        p.add_argument(f"--{f}", type=t)
    _bool_flag(p, "preview", "also write a PGM preview")
    p.add_argument("--out", required=True)

    p = stage("dataset", "sweep the parameter grid through SIMP")
    p.add_argument("--counts", help="grid points per axis as vol_frac,penal,r_min (default 6,5,5; 14,12,18 full)")
    for f, t in (("nelx", int), ("nely", int), ("seed", int), ("workers", int), ("noise-fraction", float),
                 ("noise-magnitude", float)):
        p.add_argument(f"--{f}", type=t)
    _bool_flag(p, "augment", "append one noisy copy per sample")
    _bool_flag(p, "previews", "write PGM previews")
    p.add_argument("--out", required=True)

    p = stage("train-regressor", "fit the parameter regressor")
    p.add_argument("--data")
    p.add_argument("--profile", choices=sorted(REG_PROFILES))
    for f, t in (("seed", int), ("epochs", int), ("batch-size", int), ("lr", float), ("val-fraction", float)):
        p.add_argument(f"--{f}", type=t)
    p.add_argument("--out", required=True)

    p = stage("predict", "predict (vol_frac, penal, r_min) for one image")
    p.add_argument("--model")
    p.add_argument("--image")

    p = stage("train-gan", "train the WGAN")
    p.add_argument("--data")
    p.add_argument("--profile", choices=["desk", "full"])
    p.add_argument("--loss", choices=["wasserstein", "smoothed"])
    for f, t in (("steps", int), ("seed", int), ("n-critic", int), ("lr", float), ("clip", float),
                 ("batch-size", int), ("latent-dim", int)):
        p.add_argument(f"--{f}", type=t)
    _bool_flag(p, "critic-bn", "batch normalisation in the critic")
    p.add_argument("--out", required=True)

    p = stage("generate", "sample structures from a trained GAN")
    p.add_argument("--gan")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    _bool_flag(p, "previews", "write PGM previews")
    p.add_argument("--out", required=True)

    def pp_flags(p):
        p.add_argument("--threshold", type=float)
        p.add_argument("--kernel", type=int)
        p.add_argument("--sigma", type=float)
        p.add_argument("--border", choices=["reflect", "nearest", "mirror"])

    p = stage("postprocess", "threshold then Gaussian-smooth one image")
    p.add_argument("--in", dest="in")
    pp_flags(p)
    p.add_argument("--out", required=True)

    p = stage("validate", "regressor -> SIMP round trip for images")
    p.add_argument("--model")
    p.add_argument("--images", help="comma-separated .topo files")
    p.add_argument("--data", help="dataset directory (original samples only)")
    p.add_argument("--limit", type=int)
    p.add_argument("--nelx", type=int)
    p.add_argument("--nely", type=int)
    pp_flags(p)
    p.add_argument("--out", required=True)

    p = stage("report", "PGM triptych: input | predicted params | SIMP rerun")
    p.add_argument("--model")
    p.add_argument("--image")
    p.add_argument("--nelx", type=int)
    p.add_argument("--nely", type=int)
    pp_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerun", help="replay a stage from its manifest and compare hashes")
    p.add_argument("manifest")
    p.add_argument("--out", help="write the replayed artifact here instead of the recorded path")
    return parser


def resolve(command: str, args: argparse.Namespace) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    base = RunConfig.load(args.config) if args.config else RunConfig()
    return base.with_defaults(DEFAULTS.get(command, {})).merged(flags)


def run_stage(command: str, cfg: RunConfig) -> tuple[Path, str]:
    artifact, digest, inputs = STAGES[command](cfg)
    write_run_manifest(artifact, command, cfg, digest, inputs)
    return artifact, digest


def rerun(manifest: str, out: str | None) -> int:
    record = read_run_manifest(manifest)
    stage = record["stage"]
    if stage not in STAGES:
        raise ParameterError(f"manifest names unknown stage {stage!r}")
    cfg = RunConfig(record["config"]).merged({"out": out})
    _, digest = run_stage(stage, cfg)
    same = digest == record["output_hash"]
    print(json.dumps({"stage": stage, "expected": record["output_hash"], "actual": digest, "match": same}))
    return 0 if same else 1


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            return rerun(args.manifest, args.out)
        cfg = resolve(args.command, args)
        if args.command == "predict":
            stage_predict(cfg)
            return 0
        artifact, _ = run_stage(args.command, cfg)
        log.info("wrote %s (manifest %s)", artifact, run_manifest_path(artifact))
        return 0
    except UsageError as exc:
        print(f"topogan {args.command}: {exc}", file=sys.stderr)
        return 2
    except (TopoganError, ValueError, OSError) as exc:
        print(f"topogan {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
