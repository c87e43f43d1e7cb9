"""XDoG outline extraction.

Images are float arrays on the [0, 1] scale.  RGB inputs have shape
(H, W, 3); sketches have shape (H, W) with 1 = white, 0 = ink.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

# Rec. 601 luma weights.
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class XDoGParams:
    pre_blur_sigma: float = 0.7
    sigma: float = 0.3
    k: float = 4.5
    tau: float = 0.95
    epsilon: float = 0.0
    phi: float = 1e9

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not self.k > 1:
            raise ValueError(f"k must be > 1, got {self.k}")
        if not self.phi > 0:
            raise ValueError(f"phi must be > 0, got {self.phi}")
        if not self.pre_blur_sigma >= 0:
            raise ValueError(f"pre_blur_sigma must be >= 0, got {self.pre_blur_sigma}")


def _check_image(image):
    image = np.asarray(image)
    if image.ndim not in (2, 3) or image.shape[0] <= 0 or image.shape[1] <= 0:
        raise ValueError(f"invalid image shape {image.shape}")
    return image


def pre_blur(image, sigma):
    """Isotropic Gaussian blur over the spatial axes with reflective borders."""
    image = _check_image(image)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return image.copy()
    sigmas = (sigma, sigma) + (0,) * (image.ndim - 2)
    return gaussian_filter(image.astype(np.float64), sigmas, mode="reflect")


def luminance(image):
    image = _check_image(image)
    if image.ndim == 2:
        return image.astype(np.float64)
    return image[..., :3].astype(np.float64) @ LUMA


def xdog_response(gray, params):
    g1 = gaussian_filter(gray, params.sigma, mode="reflect")
    g2 = gaussian_filter(gray, params.sigma * params.k, mode="reflect")
    return g1 - params.tau * g2


def extract_sketch(image, params=XDoGParams()):
    """Return the XDoG sketch of an RGB (or gray) image in [0, 1]."""
    image = _check_image(image)
    gray = luminance(pre_blur(image, params.pre_blur_sigma))
    u = xdog_response(gray, params)
    out = np.where(
        u >= params.epsilon,
        1.0,
        1.0 + np.tanh(params.phi * np.minimum(u - params.epsilon, 0.0)),
    )
    return np.clip(out, 0.0, 1.0)
