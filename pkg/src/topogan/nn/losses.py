"""Loss functions returning (value, gradient) pairs."""

from __future__ import annotations

import numpy as np

from topogan.errors import DataError


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DataError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target.astype(pred.dtype, copy=False)
    return float(np.mean(np.square(diff, dtype=np.float64))), 2 * diff / diff.size


def wasserstein_losses(critic_real: np.ndarray, critic_fake: np.ndarray) -> tuple[float, float]:
    """Critic loss mean(fake) - mean(real) and generator loss -mean(fake).

    Equivalent to weighting scores by the labels real = -1, fake = +1.
    """
    real = np.asarray(critic_real, dtype=np.float64).ravel()
    fake = np.asarray(critic_fake, dtype=np.float64).ravel()
    if real.size == 0 or fake.size == 0:
        raise DataError("empty critic batch")
    return float(fake.mean() - real.mean()), float(-fake.mean())


def wasserstein_grads(critic_real, critic_fake) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """d(critic loss)/d(real), d(critic loss)/d(fake), d(generator loss)/d(fake)."""
    nr, nf = np.size(critic_real), np.size(critic_fake)
    dt = np.asarray(critic_real).dtype
    return (
        np.full(np.shape(critic_real), -1.0 / nr, dtype=dt),
        np.full(np.shape(critic_fake), 1.0 / nf, dtype=dt),
        np.full(np.shape(critic_fake), -1.0 / nf, dtype=dt),
    )


def smoothed_target_losses(critic_real, critic_fake, real_target=-0.9, fake_target=0.9):
    """Least-squares alternative: critic regresses scores onto smoothed labels.

    Returns (critic loss, generator loss, d critic/d real, d critic/d fake,
    d generator/d fake); the generator is pulled toward the real target.
    """
    real = np.asarray(critic_real)
    fake = np.asarray(critic_fake)
    if real.size == 0 or fake.size == 0:
        raise DataError("empty critic batch")
    lr, gr = mse_loss(real, np.full_like(real, real_target))
    lf, gf = mse_loss(fake, np.full_like(fake, fake_target))
    lg, gg = mse_loss(fake, np.full_like(fake, real_target))
    return lr + lf, lg, gr, gf, gg
