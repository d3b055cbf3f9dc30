"""Three-headed CNN mapping a structure image to (vol_frac, penal, r_min).

The trunk is three [conv -> ReLU -> maxpool -> batchnorm] blocks.  The
vol_frac head branches off after the trunk, penal after one extension block
and r_min after a second extension block plus extra dense layers, so the
branch depth grows vol_frac < penal < r_min.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np

from topogan.dataset import Dataset, DesignParams, split_indices
from topogan.errors import DataError, SpecError, TrainingError
from topogan.nn import Adam, Model, NetworkSpec, SpecBuilder, load_bundle, mse_loss, save_bundle

log = logging.getLogger(__name__)

HEADS = ("vol_frac", "penal", "r_min")
PUBLISHED_PARAM_COUNT = 1_206_306


@dataclasses.dataclass(frozen=True)
class RegressorProfile:
    input_side: int
    trunk: tuple[int, int, int]
    extension: tuple[int, int]
    ext_pool: int
    head_a_pool: int
    dense_a: int
    dense_b: int
    dense_c: tuple[int, int]


PROFILES = {
    "full": RegressorProfile(120, (16, 32, 64), (64, 128), ext_pool=3, head_a_pool=3,
                             dense_a=64, dense_b=128, dense_c=(240, 64)),
    "desk": RegressorProfile(32, (4, 8, 16), (16, 32), ext_pool=2, head_a_pool=1,
                             dense_a=32, dense_b=32, dense_c=(64, 16)),
}


def build_regressor(input_shape=(120, 120, 1), profile: str | RegressorProfile = "full") -> NetworkSpec:
    prof = PROFILES[profile] if isinstance(profile, str) else profile
    h, w = input_shape[:2]
    if h != w:
        raise SpecError(f"regressor input must be square, got {h}x{w}")
    if h % 8:
        raise SpecError(f"input side {h} is not divisible by 8")
    b = SpecBuilder(tuple(input_shape), name="regressor")
    for i, c in enumerate(prof.trunk, 1):
        b.add("conv2d", f"conv{i}", filters=c, kernel=3)
        b.add("activation", f"relu{i}", fn="relu")
        b.add("maxpool", f"pool{i}", window=2)
        trunk_end = b.add("batchnorm", f"bn{i}")

    if prof.head_a_pool > 1:
        b.branch(trunk_end).add("maxpool", "a_pool", window=prof.head_a_pool)
        b.add("flatten", "a_flat")
    else:
        b.branch(trunk_end).add("flatten", "a_flat")
    b.add("dense", "a_dense", units=prof.dense_a)
    b.add("activation", "a_relu", fn="relu")
    b.add("dense", "vol_frac", units=1)
    b.output()

    b.branch(trunk_end).add("conv2d", "conv4", filters=prof.extension[0], kernel=3)
    b.add("activation", "relu4", fn="relu")
    b.add("maxpool", "pool4", window=prof.ext_pool)
    ext1 = b.add("batchnorm", "bn4")
    b.add("flatten", "b_flat")
    b.add("dense", "b_dense", units=prof.dense_b)
    b.add("activation", "b_relu", fn="relu")
    b.add("dense", "penal", units=1)
    b.output()

    b.branch(ext1).add("conv2d", "conv5", filters=prof.extension[1], kernel=3)
    b.add("activation", "relu5", fn="relu")
    b.add("batchnorm", "bn5")
    b.add("flatten", "c_flat")
    for j, units in enumerate(prof.dense_c, 1):
        b.add("dense", f"c_dense{j}", units=units)
        b.add("activation", f"c_relu{j}", fn="relu")
    b.add("dense", "r_min", units=1)
    b.output()
    return b.build()


@dataclasses.dataclass
class RegressorHyper:
    profile: str = "desk"
    epochs: int = 300
    batch_size: int = 16
    lr: float = 2e-4
    seed: int = 0
    val_fraction: float = 0.1
    # head A learns vol_frac minus the image's mean density instead of vol_frac itself
    vol_frac_residual: bool = True


@dataclasses.dataclass
class TrainedRegressor:
    model: Model
    target_mean: np.ndarray
    target_std: np.ndarray
    history: list[dict]
    hyper: dict
    val_ids: list[str] = dataclasses.field(default_factory=list)

    @property
    def vol_frac_residual(self) -> bool:
        return bool(self.hyper.get("vol_frac_residual", False))

    @property
    def input_side(self) -> int:
        return int(self.model.spec.input_shape[0])


@dataclasses.dataclass(frozen=True)
class RegressorPrediction:
    vol_frac: float
    penal: float
    r_min: float

    def as_params(self) -> DesignParams:
        return DesignParams(self.vol_frac, self.penal, self.r_min)


def _as_batch(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[..., None]
    return images


def _standardized_outputs(model: Model, x: np.ndarray) -> np.ndarray:
    outs, _ = model.forward(x, train=False)
    return np.concatenate(outs, axis=1).astype(np.float64)


def predict_batch(trained: TrainedRegressor, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """(n, 3) raw predictions; no clamping to the training bounds."""
    x = _as_batch(images)
    if x.shape[1:] != tuple(trained.model.spec.input_shape):
        raise DataError(f"image shape {x.shape[1:3]} does not match model input {trained.model.spec.input_shape[:2]}")
    rows = [_standardized_outputs(trained.model, x[i: i + batch_size]) for i in range(0, len(x), batch_size)]
    z = np.concatenate(rows, axis=0) if rows else np.zeros((0, 3))
    pred = z * trained.target_std + trained.target_mean
    if trained.vol_frac_residual:
        pred[:, 0] += _mean_density(x)
    return pred


def _mean_density(x: np.ndarray) -> np.ndarray:
    return x.reshape(len(x), -1).mean(axis=1, dtype=np.float64)


def predict_params(trained: TrainedRegressor, image: np.ndarray) -> RegressorPrediction:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    p = predict_batch(trained, image[None])[0]
    return RegressorPrediction(*(float(v) for v in p))


def _epoch_loss(model, x, z, batch_size=64) -> float:
    total = 0.0
    for i in range(0, len(x), batch_size):
        pred = _standardized_outputs(model, x[i: i + batch_size])
        total += float(np.sum((pred - z[i: i + batch_size]) ** 2))
    return total / (len(x) * 1.0) if len(x) else float("nan")


def train_regressor(dataset: Dataset, hyper: RegressorHyper = RegressorHyper(),
                    spec: NetworkSpec | None = None) -> TrainedRegressor:
    """Adam on the unweighted sum of the three per-head MSE terms (standardised targets).

    With ``vol_frac_residual`` the first target is vol_frac minus the mean
    pixel density, which the volume constraint makes small.

    Recorded losses are that sum averaged over samples, measured in inference
    mode at the end of each epoch; entry 0 is the untrained model.
    """
    x_all = _as_batch(dataset.images())
    y_all = dataset.labels().astype(np.float64)
    if not np.all(np.isfinite(y_all)):
        raise DataError("dataset labels must be finite")
    train_idx, val_idx = split_indices(dataset, hyper.val_fraction, hyper.seed)
    raw_std = None
    if hyper.vol_frac_residual:
        raw_std = y_all[train_idx, 0].std()
        y_all[:, 0] -= _mean_density(x_all)
    side = x_all.shape[1]
    spec = spec or build_regressor((side, side, 1), hyper.profile)
    y_train = y_all[train_idx]
    mean = y_train.mean(axis=0)
    std = y_train.std(axis=0)
    if raw_std is not None:
        # scale the residual like vol_frac itself so near-zero noise stays near zero
        std[0] = raw_std
    std = np.where(std > 0, std, 1.0)
    z_all = ((y_all - mean) / std).astype(np.float32)

    model = Model(spec, seed=hyper.seed)
    opt = Adam(lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed + 1)
    xt, zt = x_all[train_idx], z_all[train_idx]
    xv, zv = x_all[val_idx], z_all[val_idx]
    history = [{"epoch": 0, "train_loss": _epoch_loss(model, xt, zt), "val_loss": _epoch_loss(model, xv, zv)}]
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(xt))
        for i in range(0, len(order), hyper.batch_size):
            batch = order[i: i + hyper.batch_size]
            outs, cache = model.forward(xt[batch], train=True)
            grads_out = []
            for k, out in enumerate(outs):
                _, g = mse_loss(out, zt[batch, k: k + 1])
                grads_out.append(g)
            grads, _ = model.backward(cache, grads_out)
            opt.step(model.parameters(), grads)
        row = {"epoch": epoch, "train_loss": _epoch_loss(model, xt, zt), "val_loss": _epoch_loss(model, xv, zv)}
        if not np.isfinite(row["train_loss"]):
            raise TrainingError(f"regressor diverged at epoch {epoch}")
        history.append(row)
        log.info("epoch %d train %.4f val %.4f", epoch, row["train_loss"], row["val_loss"])
    return TrainedRegressor(
        model=model, target_mean=mean, target_std=std, history=history,
        hyper=dataclasses.asdict(hyper), val_ids=[dataset.samples[i].id for i in val_idx],
    )


def save_regressor(path: str | Path, trained: TrainedRegressor, extra: dict | None = None) -> str:
    meta = {
        "type": "regressor",
        "target_mean": trained.target_mean.tolist(),
        "target_std": trained.target_std.tolist(),
        "history": trained.history,
        "hyper": trained.hyper,
        "val_ids": trained.val_ids,
        **(extra or {}),
    }
    return save_bundle(path, {"regressor": trained.model}, meta)


def load_regressor(path: str | Path) -> TrainedRegressor:
    models, meta = load_bundle(path)
    if meta.get("type") != "regressor" or "regressor" not in models:
        raise DataError(f"{path} is not a regressor checkpoint")
    return TrainedRegressor(
        model=models["regressor"],
        target_mean=np.array(meta["target_mean"]),
        target_std=np.array(meta["target_std"]),
        history=meta["history"],
        hyper=meta["hyper"],
        val_ids=meta.get("val_ids", []),
    )
