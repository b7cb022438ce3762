"""Spectral preprocessing: homomorphic Butterworth filtering + normalization.

The enhancement runs in the log-intensity domain so multiplicative
illumination becomes additive and can be shaped by a radially symmetric
Butterworth gain in the frequency domain. Spectra are stored DC-centered
so radial distance from the array center is the filter's frequency axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_EPS = 1e-4  # intensity clamp before the log, avoids -inf at true black


@dataclass
class ButterworthParams:
    d0: float = 30.0
    order_n: int = 2
    mode: str = "highpass"  # "lowpass" or "highpass"

    def __post_init__(self):
        if self.d0 <= 0:
            raise ValueError(f"cutoff d0 must be positive, got {self.d0}")
        if self.order_n < 1:
            raise ValueError(f"order_n must be >= 1, got {self.order_n}")
        if self.mode not in ("lowpass", "highpass"):
            raise ValueError(f"mode must be lowpass or highpass, got {self.mode!r}")


@dataclass
class NormalizationParams:
    m0: float = 0.5
    var0: float = 0.04
    var_floor: float = 1e-12

    def __post_init__(self):
        if self.var0 < 0:
            raise ValueError(f"var0 must be >= 0, got {self.var0}")
        if self.var_floor <= 0:
            raise ValueError(f"var_floor must be > 0, got {self.var_floor}")


@dataclass
class PreConfig:
    enabled: bool = True
    butterworth: ButterworthParams = field(default_factory=ButterworthParams)
    normalization: NormalizationParams = field(default_factory=NormalizationParams)
    log_domain: bool = False  # skip the exp after the inverse transform


def dft2(field: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2D DFT, returned DC-centered."""
    return np.fft.fftshift(np.fft.fft2(np.asarray(field, dtype=np.complex128)))


def idft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of dft2 (applies the 1/(HW) factor); complex output."""
    return np.fft.ifft2(np.fft.ifftshift(spectrum))


def butterworth_gain(dist, d0: float, order_n: int):
    """Lowpass gain 1 / (1 + (D/D0)^(2n)) at radial distance D."""
    if d0 <= 0:
        raise ValueError(f"cutoff d0 must be positive, got {d0}")
    return 1.0 / (1.0 + (np.asarray(dist, dtype=np.float64) / d0) ** (2 * order_n))


def butterworth_response(
    params: ButterworthParams, height: int, width: int
) -> np.ndarray:
    """Gain field over a DC-centered spectrum of the given shape."""
    u = np.arange(height, dtype=np.float64) - height // 2
    v = np.arange(width, dtype=np.float64) - width // 2
    dist = np.sqrt(u[:, None] ** 2 + v[None, :] ** 2)
    gain = butterworth_gain(dist, params.d0, params.order_n)
    if params.mode == "highpass":
        gain = 1.0 - gain
    return gain


def _rescale_unit(field: np.ndarray) -> np.ndarray:
    lo, hi = field.min(), field.max()
    if hi == lo:
        return np.full_like(field, 0.5)
    return (field - lo) / (hi - lo)


def homomorphic_enhance(
    image: np.ndarray, params: ButterworthParams, log_domain: bool = False
) -> np.ndarray:
    """Filter the log image spectrally, then rescale the result to [0, 1].

    clamp -> ln -> dft2 -> gain multiply -> idft2 (real part) -> exp ->
    min/max rescale. A constant filtered field maps to the constant 0.5.
    With log_domain=True the exp step is skipped and the rescale applies
    to the filtered log image directly.
    """
    image = np.asarray(image, dtype=np.float64)
    log_img = np.log(np.clip(image, LOG_EPS, 1.0))
    gain = butterworth_response(params, *log_img.shape)
    filtered = idft2(dft2(log_img) * gain).real
    if not log_domain:
        filtered = np.exp(filtered)
    return _rescale_unit(filtered)


def normalize(
    image: np.ndarray, params: NormalizationParams, clip: bool = True
) -> np.ndarray:
    """Shift the image to a desired mean and variance.

    The map is affine in the intensities, so the (pre-clip) output has
    population mean m0 and variance var0 exactly. Images with variance
    below var_floor come back as the constant m0.
    """
    image = np.asarray(image, dtype=np.float64)
    mean = image.mean()
    var = image.var()
    if var < params.var_floor:
        return np.full_like(image, params.m0)
    out = params.m0 + np.sqrt(params.var0 / var) * (image - mean)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out


def preprocess(image: np.ndarray, config: PreConfig) -> np.ndarray:
    """Full preprocessing: enhancement then normalization, unless disabled."""
    if not config.enabled:
        return np.asarray(image, dtype=np.float64)
    enhanced = homomorphic_enhance(image, config.butterworth, config.log_domain)
    return normalize(enhanced, config.normalization)
