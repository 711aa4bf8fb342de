"""Defocused, oversampled Fourier-intensity forward model.

Conventions
-----------
* The object of extent S x S is zero-padded into the top-left corner of an
  N x N grid (N >= 2S) and transformed with the unnormalised forward DFT.
* Spectra are ``fftshift``-ed so DC sits at index ``N // 2``.
* Intensities are scaled by an exposure factor, rounded half away from zero
  and clamped to the sensor cap (4095 for a 12-bit camera).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

CAP_12BIT = 4095
WAVELENGTH_HENE = 632.8e-9
SLM_PITCH = 8e-6
CAMERA_PITCH = 5.86e-6


class OversamplingError(ValueError):
    """DFT grid too small for the object extent."""


@dataclass(frozen=True)
class ComplexField:
    """2-D complex object or spectrum (complex128)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"ComplexField must be 2-D, got shape {arr.shape}")
        arr = arr.astype(np.complex128, copy=False)
        if not np.isfinite(arr).all():
            raise ValueError("ComplexField entries must be finite")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_parts(cls, re, im) -> ComplexField:
        re, im = np.asarray(re, dtype=np.float64), np.asarray(im, dtype=np.float64)
        if re.shape != im.shape:
            raise ValueError("real and imaginary parts must share a shape")
        return cls(re + 1j * im)

    @property
    def re(self) -> np.ndarray:
        return self.data.real

    @property
    def im(self) -> np.ndarray:
        return self.data.imag

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class DefocusKernel:
    """Pure-phase quadratic factor ``exp(j*pi*c*(p^2+q^2)/(lambda*L))``.

    With ``coords="physical"`` the integer grid offsets are multiplied by the
    pixel pitch before squaring; with ``coords="pixel"`` they are used as is
    (the pitch is then ignored).
    """

    wavelength: float
    distance: float
    pitch: float
    curvature: float
    extent: tuple[int, int]
    coords: str
    h: np.ndarray = field(repr=False)

    def params(self) -> dict[str, Any]:
        return {
            "wavelength": self.wavelength, "distance": self.distance, "pitch": self.pitch,
            "curvature": self.curvature, "coords": self.coords,
        }


def _extent2(extent) -> tuple[int, int]:
    if isinstance(extent, (int, np.integer)):
        return int(extent), int(extent)
    h, w = extent
    return int(h), int(w)


def centered_coords(n: int) -> np.ndarray:
    """Integer offsets in ``[-n/2, n/2)``; zero sits at index ``n // 2``."""
    return np.arange(n) - n // 2


def defocus_kernel(wavelength: float, distance: float, pitch: float, curvature: float = 1.0,
                   extent=128, coords: str = "physical") -> DefocusKernel:
    if distance == 0:
        raise ValueError("defocus distance 0 has no kernel; use identity_kernel for the in-focus case")
    if wavelength <= 0 or distance <= 0 or pitch <= 0:
        raise ValueError("wavelength, distance and pitch must be positive")
    if coords not in ("physical", "pixel"):
        raise ValueError(f"coords must be 'physical' or 'pixel', got {coords!r}")
    H, W = _extent2(extent)
    unit = pitch if coords == "physical" else 1.0
    p = centered_coords(H)[:, None] * unit
    q = centered_coords(W)[None, :] * unit
    phase = math.pi * curvature * (p * p + q * q) / (wavelength * distance)
    return DefocusKernel(wavelength, distance, pitch, curvature, (H, W), coords, np.exp(1j * phase))


def identity_kernel(extent) -> DefocusKernel:
    """The in-focus (no defocus) kernel, h == 1."""
    H, W = _extent2(extent)
    return DefocusKernel(0.0, math.inf, 0.0, 0.0, (H, W), "pixel", np.ones((H, W), dtype=np.complex128))


def apply_defocus(x: ComplexField, k: DefocusKernel) -> ComplexField:
    if x.shape != k.h.shape:
        raise ValueError(f"object {x.shape} and kernel {k.h.shape} differ in shape")
    return ComplexField(x.data * k.h)


def oversampled_intensity(x: ComplexField | np.ndarray, dft_size: int) -> np.ndarray:
    """|DFT|^2 of the object zero-padded to ``dft_size`` x ``dft_size``, DC centred."""
    data = x.data if isinstance(x, ComplexField) else np.asarray(x, dtype=np.complex128)
    S = max(data.shape)
    if dft_size < 2 * S:
        raise OversamplingError(f"dft_size {dft_size} < 2 x object extent {S}")
    ft = np.fft.fftshift(np.fft.fft2(data, s=(dft_size, dft_size)))
    return ft.real ** 2 + ft.imag ** 2


def auto_scale(intensity: np.ndarray, cap: int = CAP_12BIT) -> float:
    """Exposure factor mapping the 99th-percentile intensity to ``cap / 8``."""
    ref = float(np.percentile(intensity, 99))
    if ref <= 0:
        ref = float(intensity.max())
    return 1.0 if ref <= 0 else (cap / 8.0) / ref


@dataclass
class IntensityMeasurement:
    """Quantised, saturated camera frame plus how it was produced."""

    values: np.ndarray
    cap: int = CAP_12BIT
    scale: float = 1.0
    object_extent: int | None = None
    dft_size: int | None = None
    crop_extent: int | None = None
    defocus: dict[str, Any] | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError("measurement must be 2-D")
        if v.size and (v.min() < 0 or v.max() > self.cap):
            raise ValueError(f"measurement values must lie in [0, {self.cap}]")
        if self.dft_size is not None:
            if self.crop_extent is not None and self.crop_extent > self.dft_size:
                raise ValueError("crop extent exceeds DFT size")
            if self.object_extent is not None and self.object_extent > self.dft_size // 2:
                raise OversamplingError("object extent exceeds half the DFT size")

    @property
    def saturated(self) -> np.ndarray:
        return self.values >= self.cap

    def physical(self) -> np.ndarray:
        """Intensity in simulation units (undoes the exposure factor)."""
        return self.values.astype(np.float64) / self.scale


def quantize_saturate(intensity: np.ndarray, cap: int = CAP_12BIT, scale: float | None = None,
                      **meta) -> IntensityMeasurement:
    """Scale, round half away from zero and clamp to ``[0, cap]``.

    ``scale=None`` picks :func:`auto_scale`; pass ``scale=1.0`` for raw counts.
    """
    i = np.asarray(intensity, dtype=np.float64)
    if (i < 0).any():
        raise ValueError("intensity must be nonnegative")
    s = auto_scale(i, cap) if scale is None else float(scale)
    if s <= 0:
        raise ValueError("scale must be positive")
    q = np.minimum(np.floor(i * s + 0.5), cap).astype(np.int32)
    return IntensityMeasurement(q, cap=cap, scale=s, **meta)


def center_crop(m: IntensityMeasurement | np.ndarray, k: int) -> np.ndarray:
    """Central ``k`` x ``k`` window; for even sizes DC lands at ``(k/2, k/2)``."""
    arr = m.values if isinstance(m, IntensityMeasurement) else np.asarray(m)
    N = arr.shape[0]
    if arr.shape[0] != arr.shape[1]:
        raise ValueError("center_crop expects a square frame")
    if k > N:
        raise ValueError(f"crop {k} larger than frame {N}")
    if (N - k) % 2:
        raise ValueError(f"frame {N} and crop {k} must share parity")
    o = (N - k) // 2
    return arr[o:o + k, o:o + k]


def measurement_extent(wavelength: float, distance: float, camera_pitch: float, slm_pitch: float) -> float:
    """Unrounded Fourier-plane sample count ``lambda*L / (d*delta_slm)``."""
    if min(wavelength, distance, camera_pitch, slm_pitch) <= 0:
        raise ValueError("all lengths must be positive")
    return wavelength * distance / (camera_pitch * slm_pitch)


def measurement_grid_size(wavelength: float, distance: float, camera_pitch: float, slm_pitch: float) -> int:
    return int(math.floor(measurement_extent(wavelength, distance, camera_pitch, slm_pitch) + 0.5))
