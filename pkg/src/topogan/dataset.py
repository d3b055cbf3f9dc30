"""Labelled dataset of SIMP-optimised cantilevers.

On disk a dataset is a directory holding ``manifest.jsonl`` (one header
record, then one record per sample) and ``images/<id>.topo`` density files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from topogan import fieldio, simp
from topogan.errors import IntegrityError, ParameterError

log = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
FORMAT_VERSION = 1

FULL_COUNTS = (14, 12, 18)
DESK_COUNTS = (6, 5, 5)


@dataclasses.dataclass(frozen=True)
class DesignParams:
    vol_frac: float
    penal: float
    r_min: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.vol_frac, self.penal, self.r_min)

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class ParamBounds:
    vol_frac: tuple[float, float] = (0.3, 0.8)
    penal: tuple[float, float] = (2.0, 4.0)
    r_min: tuple[float, float] = (1.5, 3.0)
    counts: tuple[int, int, int] = FULL_COUNTS

    def contains(self, p: DesignParams, tol: float = 1e-12) -> bool:
        return all(
            lo - tol <= v <= hi + tol
            for v, (lo, hi) in zip(p.as_tuple(), (self.vol_frac, self.penal, self.r_min))
        )

    def clamp(self, p: DesignParams) -> DesignParams:
        return DesignParams(*(
            float(min(max(v, lo), hi))
            for v, (lo, hi) in zip(p.as_tuple(), (self.vol_frac, self.penal, self.r_min))
        ))

    def as_dict(self) -> dict:
        return {k: list(v) for k, v in dataclasses.asdict(self).items()}


@dataclasses.dataclass
class Sample:
    id: str
    image: np.ndarray
    label: DesignParams
    augmented: bool = False
    source: str | None = None


@dataclasses.dataclass
class Dataset:
    samples: list[Sample]
    metadata: dict = dataclasses.field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([s.label.as_tuple() for s in self.samples], dtype=np.float64)

    def content_hash(self) -> str:
        return content_hash(self.samples)


def content_hash(samples: Iterable[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        h.update(struct.pack("<3d?", *s.label.as_tuple(), s.augmented))
        h.update(fieldio.encode_field(s.image))
    return h.hexdigest()


def parameter_grid(bounds: ParamBounds = ParamBounds()) -> list[DesignParams]:
    """Cartesian grid, endpoints included, vol_frac varying slowest."""
    if len(bounds.counts) != 3 or any(int(c) != c or c < 2 for c in bounds.counts):
        raise ParameterError(f"each axis needs at least 2 points, got counts {bounds.counts}")
    axes = [
        np.linspace(lo, hi, int(n))
        for (lo, hi), n in zip((bounds.vol_frac, bounds.penal, bounds.r_min), bounds.counts)
    ]
    return [
        DesignParams(float(v), float(p), float(r))
        for v in axes[0] for p in axes[1] for r in axes[2]
    ]


def _run_one(args):
    params, mesh, bc, overrides = args
    try:
        settings = simp.SimpSettings(params.vol_frac, params.penal, params.r_min, **overrides)
        res = simp.optimize(settings, mesh, bc)
    except Exception as exc:  # recorded per sample, never fatal for the sweep
        return None, f"{type(exc).__name__}: {exc}"
    return res.density.astype(np.float32), None


def generate_dataset(grid: Sequence[DesignParams], mesh: simp.Mesh, bc: simp.BoundaryCondition | None = None,
                     workers: int = 1, simp_overrides: dict | None = None) -> Dataset:
    """Run SIMP once per grid point; output order follows the grid regardless of ``workers``."""
    if not grid:
        raise ParameterError("parameter grid is empty")
    overrides = dict(simp_overrides or {})
    jobs = [(p, mesh, bc, overrides) for p in grid]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    samples, failures = [], []
    for i, (p, (image, err)) in enumerate(zip(grid, results)):
        sid = f"s{i:05d}"
        if err is not None:
            log.warning("sample %s %s failed: %s", sid, p, err)
            failures.append({"id": sid, "params": p.as_dict(), "error": err})
            continue
        samples.append(Sample(id=sid, image=image, label=p))
    meta = {
        "mesh": {"nelx": mesh.nelx, "nely": mesh.nely},
        "simp_overrides": overrides,
        "failures": failures,
        "warning_count": len(failures),
    }
    return Dataset(samples=samples, metadata=meta)


def augment(dataset: Dataset, noise_fraction: float = 0.01, noise_magnitude: float = 0.2,
            seed: int = 0) -> Dataset:
    """Append one noisy copy of every original sample.

    Each copy has ``ceil(noise_fraction * n_pixels)`` distinct pixels shifted by
    uniform noise in ``[-noise_magnitude, noise_magnitude]``, clipped to [0, 1].
    """
    if not (math.isfinite(noise_fraction) and math.isfinite(noise_magnitude)):
        raise ParameterError("noise parameters must be finite")
    if not 0 < noise_fraction <= 1:
        raise ParameterError(f"noise_fraction must lie in (0, 1], got {noise_fraction}")
    if noise_magnitude < 0:
        raise ParameterError("noise_magnitude must be non-negative")
    rng = np.random.default_rng(seed)
    originals = [s for s in dataset.samples if not s.augmented]
    copies = []
    for s in originals:
        flat = s.image.ravel().astype(np.float32)
        k = math.ceil(noise_fraction * flat.size)
        where = rng.choice(flat.size, size=k, replace=False)
        noise = rng.uniform(-noise_magnitude, noise_magnitude, size=k)
        noisy = flat.copy()
        noisy[where] = np.clip(flat[where] + noise, 0.0, 1.0)
        copies.append(Sample(id=s.id + "a", image=noisy.reshape(s.image.shape), label=s.label,
                             augmented=True, source=s.id))
    meta = dict(dataset.metadata)
    meta["augmentation"] = {"noise_fraction": noise_fraction, "noise_magnitude": noise_magnitude, "seed": seed}
    return Dataset(samples=list(dataset.samples) + copies, metadata=meta)


def area_resize(image: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    """Area-average resampling; exact cell overlaps, so the mean is preserved."""
    width = height if width is None else width
    image = np.asarray(image, dtype=np.float64)

    def weights(n_in, n_out):
        edges_in = np.arange(n_in + 1) / n_in
        edges_out = np.arange(n_out + 1) / n_out
        lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
        hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
        return np.clip(hi - lo, 0, None) * n_out

    return weights(image.shape[0], height) @ image @ weights(image.shape[1], width).T


def split_indices(dataset: Dataset, val_fraction: float = 0.1, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/val split keeping augmented copies with their originals."""
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(dataset.samples):
        groups.setdefault(s.source or s.id, []).append(i)
    keys = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    n_val = max(1, int(round(val_fraction * len(keys)))) if len(keys) > 1 else 0
    val_keys = {keys[i] for i in order[:n_val]}
    train = [i for k in keys if k not in val_keys for i in groups[k]]
    val = [i for k in keys if k in val_keys for i in groups[k]]
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(val), dtype=np.int64)


def write_dataset(dataset: Dataset, path: str | Path, previews: bool = False) -> str:
    """Persist ``dataset`` under directory ``path``; returns the content hash."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    digest = dataset.content_hash()
    header = {
        "record": "header",
        "format": FORMAT_VERSION,
        "count": len(dataset),
        "content_hash": digest,
        **{k: v for k, v in dataset.metadata.items() if k not in ("count", "content_hash")},
    }
    lines = [json.dumps(header, sort_keys=True)]
    for s in dataset.samples:
        rel = f"images/{s.id}.topo"
        fieldio.write_field(root / rel, s.image)
        if previews:
            fieldio.write_pgm(root / "images" / f"{s.id}.pgm", s.image)
        rec = {"record": "sample", "id": s.id, **s.label.as_dict(), "augmented": s.augmented,
               "source": s.source, "image": rel}
        lines.append(json.dumps(rec, sort_keys=True))
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return digest


def read_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    try:
        lines = (root / MANIFEST).read_text().splitlines()
    except FileNotFoundError as exc:
        raise IntegrityError(f"no manifest in {root}") from exc
    try:
        records = [json.loads(line) for line in lines if line.strip()]
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"corrupt manifest: {exc}") from exc
    if not records or records[0].get("record") != "header":
        raise IntegrityError("manifest lacks a header record")
    header, rows = records[0], records[1:]
    if header.get("count") != len(rows):
        raise IntegrityError(f"manifest declares {header.get('count')} samples but lists {len(rows)}")
    samples = []
    seen = set()
    for rec in rows:
        if rec["id"] in seen:
            raise IntegrityError(f"duplicate sample id {rec['id']}")
        seen.add(rec["id"])
        try:
            image = fieldio.read_field(root / rec["image"])
        except FileNotFoundError as exc:
            raise IntegrityError(f"missing image for sample {rec['id']}") from exc
        samples.append(Sample(
            id=rec["id"], image=image,
            label=DesignParams(rec["vol_frac"], rec["penal"], rec["r_min"]),
            augmented=rec["augmented"], source=rec.get("source"),
        ))
    meta = {k: v for k, v in header.items() if k not in ("record", "format", "count", "content_hash")}
    ds = Dataset(samples=samples, metadata=meta)
    if ds.content_hash() != header.get("content_hash"):
        raise IntegrityError("content hash mismatch")
    return ds


def resized(dataset: Dataset, side: int) -> Dataset:
    """Copy of ``dataset`` with every image area-averaged to ``side`` x ``side`` float32."""
    out = [dataclasses.replace(s, image=area_resize(s.image, side).astype(np.float32)) for s in dataset.samples]
    return Dataset(samples=out, metadata=dict(dataset.metadata))
