"""Weight-clipped Wasserstein GAN for density images.

Critic scores carry the label convention real = -1, fake = +1 as loss
weights, so the critic loss is ``mean(D(fake)) - mean(D(real))`` and the
generator loss is ``-mean(D(fake))``.  The optional ``smoothed`` loss mode
instead regresses critic scores onto the targets -0.9 (real) and +0.9 (fake).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from pathlib import Path

import numpy as np

from topogan.errors import DataError, SpecError, TrainingError
from topogan.nn import Model, NetworkSpec, RMSProp, SpecBuilder, clip_weights, load_bundle, save_bundle
from topogan.nn.losses import smoothed_target_losses, wasserstein_grads, wasserstein_losses

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class GanProfile:
    side: int
    base: int
    projection: int
    gen_channels: tuple[int, ...]
    critic_channels: tuple[int, ...]


PROFILES = {
    "full": GanProfile(120, 15, 128, (128, 64, 32), (32, 64, 128)),
    "desk": GanProfile(32, 4, 64, (64, 32, 16), (16, 32, 64)),
}


@dataclasses.dataclass
class GanConfig:
    profile: str = "desk"
    latent_dim: int = 100
    lr_critic: float = 5e-5
    lr_generator: float = 5e-5
    alpha: float = 0.2
    clip: float = 0.01
    n_critic: int = 1
    smoothing: tuple[float, float] = (-0.9, 0.9)
    loss: str = "wasserstein"
    critic_batchnorm: bool = True
    batch_size: int = 64
    steps: int = 2000

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not self.clip > 0:
            raise ValueError("clip constant must be positive")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.loss not in ("wasserstein", "smoothed"):
            raise ValueError(f"unknown loss mode {self.loss!r}")
        self.smoothing = tuple(self.smoothing)

    @property
    def side(self) -> int:
        return PROFILES[self.profile].side


def _stages(side: int, base: int | None = None) -> tuple[int, int]:
    """(base, k) with side = base * 2**k, preferring the largest k that keeps base >= 4."""
    if base is not None:
        k = 0
        while base * 2 ** k < side:
            k += 1
        if base * 2 ** k != side:
            raise SpecError(f"output side {side} is not {base} * 2^k")
        return base, k
    k = 0
    while side % 2 ** (k + 1) == 0 and side // 2 ** (k + 1) >= 4:
        k += 1
    if k == 0:
        raise SpecError(f"output side {side} cannot be reached by doubling stages")
    return side // 2 ** k, k


def build_generator(config: GanConfig, output_side: int | None = None) -> NetworkSpec:
    """Dense projection to a base x base map, then [upsample -> conv -> BN -> leaky ReLU] stages."""
    prof = PROFILES[config.profile]
    side = prof.side if output_side is None else output_side
    base, k = _stages(side, prof.base if side == prof.side else None)
    chans = list(prof.gen_channels)
    chans = (chans + [chans[-1]] * k)[:k]
    b = SpecBuilder((config.latent_dim,), name="generator")
    b.add("dense", "project", units=base * base * prof.projection)
    b.add("reshape", "to_map", shape=[base, base, prof.projection])
    b.add("batchnorm", "bn0")
    b.add("activation", "act0", fn="leaky_relu", alpha=config.alpha)
    for i, c in enumerate(chans, 1):
        b.add("upsample", f"up{i}", factor=2)
        b.add("conv2d", f"conv{i}", filters=c, kernel=3)
        b.add("batchnorm", f"bn{i}")
        b.add("activation", f"act{i}", fn="leaky_relu", alpha=config.alpha)
    b.add("conv2d", "to_image", filters=1, kernel=3)
    b.add("activation", "density", fn="sigmoid")
    return b.build()


def build_critic(config: GanConfig, input_side: int | None = None) -> NetworkSpec:
    """Strided convs with leaky ReLU (batchnorm optional) down to a tanh scalar."""
    prof = PROFILES[config.profile]
    side = prof.side if input_side is None else input_side
    if side < 8:
        raise SpecError(f"critic input side must be >= 8, got {side}")
    b = SpecBuilder((side, side, 1), name="critic")
    for i, c in enumerate(prof.critic_channels, 1):
        b.add("conv2d", f"conv{i}", filters=c, kernel=4, stride=2)
        if config.critic_batchnorm:
            b.add("batchnorm", f"bn{i}")
        b.add("activation", f"act{i}", fn="leaky_relu", alpha=config.alpha)
    b.add("flatten", "flat")
    b.add("dense", "score", units=1)
    b.add("activation", "range", fn="tanh")
    return b.build()


@dataclasses.dataclass
class TrainedGAN:
    generator: Model
    critic: Model
    history: list[dict]
    config: GanConfig
    seed: int


def _batch(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    return images[..., None] if images.ndim == 3 else images


def _snapshot(gen: Model, critic: Model):
    return ({k: v.copy() for k, v in gen.parameters().items()}, {k: v.copy() for k, v in gen.states().items()},
            {k: v.copy() for k, v in critic.parameters().items()}, {k: v.copy() for k, v in critic.states().items()})


def _restore(snap, config, seed, history) -> TrainedGAN:
    gen = Model(build_generator(config), seed=seed)
    critic = Model(build_critic(config), seed=seed + 1)
    gen.set_parameters(snap[0])
    gen.set_parameters(snap[1], state=True)
    critic.set_parameters(snap[2])
    critic.set_parameters(snap[3], state=True)
    return TrainedGAN(gen, critic, list(history), config, seed)


def train_wgan(images: np.ndarray, config: GanConfig = GanConfig(), seed: int = 0,
               snapshot_every: int = 100) -> TrainedGAN:
    """Alternate ``n_critic`` clipped critic updates with one generator update.

    ``history`` holds one row per generator step with the critic's
    Wasserstein estimate mean(D(real)) - mean(D(fake)) from the last critic
    update of that step.
    """
    x = _batch(images)
    if x.shape[1:] != (config.side, config.side, 1):
        raise DataError(f"images of shape {x.shape[1:3]} do not match the {config.profile} profile side {config.side}")
    if x.min() < 0 or x.max() > 1:
        raise DataError("training images must lie in [0, 1]")
    gen = Model(build_generator(config), seed=seed)
    critic = Model(build_critic(config), seed=seed + 1)
    clip_weights(critic, config.clip)
    opt_g = RMSProp(lr=config.lr_generator)
    opt_d = RMSProp(lr=config.lr_critic)
    rng = np.random.default_rng(seed + 2)
    bs = config.batch_size
    real_t, fake_t = config.smoothing
    history: list[dict] = []
    last_good = _snapshot(gen, critic)

    for step in range(1, config.steps + 1):
        try:
            for _ in range(config.n_critic):
                real = x[rng.integers(0, len(x), size=bs)]
                z = rng.standard_normal((bs, config.latent_dim)).astype(np.float32)
                (fake,), _ = gen.forward(z, train=True)
                (d_real,), c_real = critic.forward(real, train=True)
                (d_fake,), c_fake = critic.forward(fake, train=True)
                if config.loss == "wasserstein":
                    loss_d, _ = wasserstein_losses(d_real, d_fake)
                    g_real, g_fake, _ = wasserstein_grads(d_real, d_fake)
                else:
                    loss_d, _, g_real, g_fake, _ = smoothed_target_losses(d_real, d_fake, real_t, fake_t)
                grads_r, _ = critic.backward(c_real, [g_real])
                grads_f, _ = critic.backward(c_fake, [g_fake])
                opt_d.step(critic.parameters(), {k: grads_r[k] + grads_f[k] for k in grads_r})
                clip_weights(critic, config.clip)
                estimate = float(np.mean(d_real, dtype=np.float64) - np.mean(d_fake, dtype=np.float64))

            z = rng.standard_normal((bs, config.latent_dim)).astype(np.float32)
            (fake,), c_gen = gen.forward(z, train=True)
            (d_fake,), c_crit = critic.forward(fake, train=True)
            if config.loss == "wasserstein":
                _, loss_g = wasserstein_losses(d_fake, d_fake)
                _, _, g_gen = wasserstein_grads(d_fake, d_fake)
            else:
                _, loss_g, _, _, g_gen = smoothed_target_losses(d_fake, d_fake, real_t, fake_t)
            _, dx = critic.backward(c_crit, [g_gen])
            grads_g, _ = gen.backward(c_gen, [dx])
            opt_g.step(gen.parameters(), grads_g)
        except TrainingError as exc:
            err = TrainingError(f"step {step}: {exc}")
            err.last_good = _restore(last_good, config, seed, history)
            raise err from exc
        if not (math.isfinite(loss_d) and math.isfinite(loss_g)):
            err = TrainingError(f"non-finite loss at step {step}")
            err.last_good = _restore(last_good, config, seed, history)
            raise err
        history.append({"step": step, "critic_loss": loss_d, "generator_loss": loss_g, "estimate": estimate})
        if step % snapshot_every == 0:
            last_good = _snapshot(gen, critic)
            log.info("step %d  critic %.5f  gen %.5f  W %.5f", step, loss_d, loss_g, estimate)
    return TrainedGAN(gen, critic, history, config, seed)


def sample_structures(gan: TrainedGAN, n: int, seed: int = 0, batch_size: int = 64) -> list[np.ndarray]:
    """``n`` generated (side, side) images in [0, 1]; deterministic per seed."""
    if n <= 0:
        return []
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, gan.config.latent_dim)).astype(np.float32)
    out = []
    for i in range(0, n, batch_size):
        (imgs,), _ = gan.generator.forward(z[i: i + batch_size], train=False)
        out.extend(np.clip(imgs[..., 0], 0.0, 1.0))
    return out


def critic_estimate(gan: TrainedGAN, real_batch: np.ndarray, fake_batch: np.ndarray) -> float:
    real, fake = _batch(real_batch), _batch(fake_batch)
    if real.shape != fake.shape:
        raise DataError(f"batch shapes differ: {real.shape} vs {fake.shape}")
    if len(real) == 0:
        raise DataError("empty batch")
    d_real = gan.critic(real)
    d_fake = gan.critic(fake)
    return float(np.mean(d_real, dtype=np.float64) - np.mean(d_fake, dtype=np.float64))


def smoothed_trend(history: list[dict], key: str = "estimate", fraction: float = 0.1) -> tuple[float, float]:
    """Mean of ``key`` over the first and last ``fraction`` of steps."""
    vals = np.array([h[key] for h in history], dtype=np.float64)
    n = max(1, int(len(vals) * fraction))
    return float(vals[:n].mean()), float(vals[-n:].mean())


def save_gan(path: str | Path, gan: TrainedGAN, extra: dict | None = None) -> str:
    cfg = dataclasses.asdict(gan.config)
    meta = {"type": "wgan", "config": cfg, "seed": gan.seed, "history": gan.history, **(extra or {})}
    return save_bundle(path, {"generator": gan.generator, "critic": gan.critic}, meta)


def load_gan(path: str | Path) -> TrainedGAN:
    models, meta = load_bundle(path)
    if meta.get("type") != "wgan":
        raise DataError(f"{path} is not a GAN checkpoint")
    return TrainedGAN(models["generator"], models["critic"], meta["history"], GanConfig(**meta["config"]), meta["seed"])
