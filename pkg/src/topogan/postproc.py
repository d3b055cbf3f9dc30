"""Clean-up of generated structures: hard threshold, then Gaussian smoothing."""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import ndimage

from topogan.errors import DataError, ParameterError

BORDER_MODES = {"reflect": "reflect", "nearest": "nearest", "mirror": "mirror"}


@dataclasses.dataclass(frozen=True)
class PostprocConfig:
    threshold: float = 0.5
    kernel_size: int = 5
    sigma: float = 1.0
    border: str = "reflect"

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError(f"threshold must lie in (0, 1), got {self.threshold}")
        _check_kernel(self.kernel_size, self.sigma)
        if self.border not in BORDER_MODES:
            raise ParameterError(f"unknown border mode {self.border!r}")


def _check_kernel(size: int, sigma: float) -> None:
    if int(size) != size or size < 1 or size % 2 == 0:
        raise ParameterError(f"kernel size must be a positive odd integer, got {size}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")


def _finite(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DataError(f"expected a 2-D image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise DataError("image contains non-finite values")
    return image


def threshold(image: np.ndarray, t: float = 0.5) -> np.ndarray:
    """1 where ``image >= t`` (ties go to material), else 0."""
    return (_finite(image) >= t).astype(np.float64)


def gaussian_kernel_1d(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    _check_kernel(size, sigma)
    r = np.arange(size) - size // 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Normalised 2-D kernel, the outer product of the 1-D one."""
    g = gaussian_kernel_1d(size, sigma)
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_smooth(image: np.ndarray, kernel_size: int = 5, sigma: float = 1.0,
                    border: str = "reflect") -> np.ndarray:
    """Separable Gaussian convolution; ``reflect`` mirrors about the edge (edge pixel repeated)."""
    image = _finite(image)
    g = gaussian_kernel_1d(kernel_size, sigma)
    # scipy's "reflect" is the half-sample (edge-repeating) mirror
    out = ndimage.correlate1d(image, g, axis=0, mode=BORDER_MODES[border])
    out = ndimage.correlate1d(out, g, axis=1, mode=BORDER_MODES[border])
    # clamp rounding overshoot so the output stays inside the input range
    return np.clip(out, image.min(), image.max())


def postprocess(image: np.ndarray, config: PostprocConfig = PostprocConfig()) -> np.ndarray:
    return gaussian_smooth(threshold(image, config.threshold), config.kernel_size, config.sigma, config.border)
