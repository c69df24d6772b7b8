"""Small shared measurement helpers."""

import numpy as np

from .errors import InvalidInputError


def psnr(ref, img, peak: float = 1.0, cap: float = 100.0) -> float:
    """Peak signal-to-noise ratio in dB against a fixed peak, capped.

    The cap keeps exact reconstructions (mse = 0) finite and comparable.
    """
    ref = np.asarray(ref, dtype=np.float64)
    img = np.asarray(img, dtype=np.float64)
    if ref.shape != img.shape:
        raise InvalidInputError(f"shape mismatch {ref.shape} vs {img.shape}")
    mse = float(np.mean((ref - img) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(peak * peak / mse), cap)


def gradient_magnitudes(img) -> np.ndarray:
    """Per-pixel gradient magnitude from forward differences.

    The last row/column fall back to backward differences so the output has
    the image's shape and a checkerboard scores a full 1.0 everywhere.
    """
    img = np.asarray(img, dtype=np.float64)
    gx = np.empty_like(img)
    gy = np.empty_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gx[:, -1] = img[:, -1] - img[:, -2]
    gy[:-1, :] = img[1:, :] - img[:-1, :]
    gy[-1, :] = img[-1, :] - img[-2, :]
    return np.hypot(gx, gy)
