"""Round-trip validation, run configuration and artifact provenance."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import itertools
import json
import time
from pathlib import Path

import numpy as np

from topogan import simp
from topogan.dataset import DesignParams, ParamBounds, area_resize
from topogan.errors import DataError, IntegrityError, ParameterError
from topogan.postproc import PostprocConfig, postprocess, threshold
from topogan.regressor import RegressorPrediction, TrainedRegressor, predict_params

RUN_SUFFIX = ".run.json"


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of the nonzero pixels; 1 when both are empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    a, b = a != 0, b != 0
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@dataclasses.dataclass
class ValidationReport:
    raw_prediction: RegressorPrediction
    params: DesignParams
    result: simp.OptimizationResult | None
    iou: float | None
    mae: float | None
    compliance: float | None
    timings: dict[str, float]
    failed: bool = False
    error: str | None = None
    gan_processed: np.ndarray | None = dataclasses.field(default=None, repr=False)
    simp_processed: np.ndarray | None = dataclasses.field(default=None, repr=False)

    def record(self) -> dict:
        """JSON-ready summary (no image payloads)."""
        return {
            "raw_prediction": dataclasses.asdict(self.raw_prediction),
            "params": self.params.as_dict(),
            "iou": self.iou,
            "mae": self.mae,
            "compliance": self.compliance,
            "iterations": None if self.result is None else self.result.iterations,
            "converged": None if self.result is None else self.result.converged,
            "failed": self.failed,
            "error": self.error,
            "timings": self.timings,
        }


def compare_structures(a: np.ndarray, b: np.ndarray, config: PostprocConfig = PostprocConfig()):
    """Post-process both images identically; IoU of material pixels and pixel MAE."""
    pa, pb = postprocess(a, config), postprocess(b, config)
    score = iou(threshold(pa, config.threshold), threshold(pb, config.threshold))
    return score, float(np.mean(np.abs(pa - pb))), pa, pb


def validate_sample(image: np.ndarray, regressor: TrainedRegressor, mesh: simp.Mesh,
                    bc: simp.BoundaryCondition | None = None, postproc: PostprocConfig = PostprocConfig(),
                    bounds: ParamBounds = ParamBounds(), simp_overrides: dict | None = None) -> ValidationReport:
    """Regressor -> clamped params -> SIMP rerun -> comparison with the input image.

    ``image`` is resampled to the regressor input side for prediction; the
    SIMP field is resampled to the image's own shape for comparison.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DataError(f"expected a 2-D image, got {image.shape}")
    timings = {}
    t0 = time.perf_counter()
    side = regressor.input_side
    net_in = image if image.shape == (side, side) else area_resize(image, side)
    raw = predict_params(regressor, net_in)
    params = bounds.clamp(raw.as_params())
    timings["predict"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    try:
        settings = simp.SimpSettings(params.vol_frac, params.penal, params.r_min, **(simp_overrides or {}))
        result = simp.optimize(settings, mesh, bc)
    except Exception as exc:  # reported, not raised
        timings["simp"] = time.perf_counter() - t0
        return ValidationReport(raw, params, None, None, None, None, timings, True, f"{type(exc).__name__}: {exc}")
    timings["simp"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    rerun = area_resize(result.density, *image.shape)
    score, mae, pa, pb = compare_structures(image, rerun, postproc)
    timings["compare"] = time.perf_counter() - t0
    return ValidationReport(raw, params, result, score, mae, result.final_compliance, timings,
                            gan_processed=pa, simp_processed=pb)


def perturbation_corners(params: DesignParams, deltas) -> list[DesignParams]:
    """The 8 sign combinations of params +- deltas."""
    return [DesignParams(*(v + s * d for v, s, d in zip(params.as_tuple(), signs, deltas)))
            for signs in itertools.product((-1, 1), repeat=3)]


def calibration_floor(params: DesignParams, deltas, mesh: simp.Mesh, side: int,
                      bc: simp.BoundaryCondition | None = None, bounds: ParamBounds = ParamBounds(),
                      postproc: PostprocConfig = PostprocConfig(), margin: float = 0.05,
                      reference: np.ndarray | None = None) -> tuple[float, list[float]]:
    """Worst SIMP-vs-SIMP IoU when params move by +-``deltas``, minus ``margin``.

    Perturbed params are clamped to ``bounds`` like any rerun.  ``reference``
    is the unperturbed structure at ``side`` (computed when omitted).
    """
    if reference is None:
        res = simp.optimize(simp.SimpSettings(*params.as_tuple()), mesh, bc)
        reference = area_resize(res.density, side)
    scores = []
    for p in perturbation_corners(params, deltas):
        p = bounds.clamp(p)
        res = simp.optimize(simp.SimpSettings(*p.as_tuple()), mesh, bc)
        s, _, _, _ = compare_structures(reference, area_resize(res.density, side), postproc)
        scores.append(s)
    return min(scores) - margin, scores


# run configuration ---------------------------------------------------------

def _coerce(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    return text


@dataclasses.dataclass
class RunConfig:
    """Flat key=value settings; later layers win over earlier ones."""

    values: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string("[run]\n" + text)
        except configparser.Error as exc:
            raise ParameterError(f"bad config file: {exc}") from exc
        return cls({k.replace("-", "_"): _coerce(v.strip()) for k, v in parser["run"].items()})

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            return cls.from_text(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ParameterError(f"config file {path} not found") from exc

    def merged(self, overrides: dict) -> "RunConfig":
        out = dict(self.values)
        out.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig(out)

    def with_defaults(self, defaults: dict) -> "RunConfig":
        return RunConfig({**defaults, **self.values})

    def get(self, key, default=None):
        return self.values.get(key, default)

    def __getitem__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise ParameterError(f"missing setting {key!r}") from None

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.values.items()))


# provenance ----------------------------------------------------------------

def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def directory_hash(path: str | Path, pattern: str = "*") -> str:
    """sha256 over (relative name, bytes) of files matching ``pattern``, sorted by name."""
    root = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in root.glob(pattern) if p.is_file() and not p.name.endswith(RUN_SUFFIX)):
        h.update(f.relative_to(root).as_posix().encode())
        h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


def run_manifest_path(artifact: str | Path) -> Path:
    artifact = Path(artifact)
    return artifact / ("stage" + RUN_SUFFIX) if artifact.is_dir() else artifact.with_name(artifact.name + RUN_SUFFIX)


def write_run_manifest(artifact: str | Path, stage: str, config: RunConfig, output_hash: str,
                       inputs: dict | None = None, timings: dict | None = None) -> Path:
    path = run_manifest_path(artifact)
    record = {
        "stage": stage,
        "config": config.values,
        "inputs": inputs or {},
        "output": str(artifact),
        "output_hash": output_hash,
        "timings": timings or {},
    }
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return path


def read_run_manifest(path: str | Path) -> dict:
    try:
        record = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ParameterError(f"manifest {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"manifest {path} is not valid JSON: {exc}") from exc
    for key in ("stage", "config", "output_hash"):
        if key not in record:
            raise IntegrityError(f"manifest {path} lacks {key!r}")
    return record
