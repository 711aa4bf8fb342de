"""Image-quality metrics, global-phase alignment and per-set aggregation.

Phase images are compared on the shifted representation ``angle(z) + pi``,
which lies in ``[0, 2*pi]``, with peak ``2*pi`` and no circular wrapping.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .optics import ComplexField

PSNR_CAP = 100.0
MSE_FLOOR = 1e-20
TWO_PI = 2.0 * math.pi

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arr(z) -> np.ndarray:
    return z.data if isinstance(z, ComplexField) else np.asarray(z)


def to_mag_phase(re, im) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude and phase in ``[0, 2*pi)``; ``(0, 0)`` maps to phase 0."""
    re, im = np.asarray(re, dtype=np.float64), np.asarray(im, dtype=np.float64)
    if re.shape != im.shape:
        raise ValueError("re and im differ in shape")
    phase = np.mod(np.arctan2(im, re), TWO_PI)
    phase[phase >= TWO_PI] = 0.0
    return np.hypot(re, im), phase


def shifted_phase(z) -> np.ndarray:
    """``angle(z) + pi`` in ``[0, 2*pi]``, the representation used for phase metrics."""
    return np.angle(_arr(z)) + math.pi


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, peak: float = 1.0) -> float:
    """``10*log10(peak^2 / MSE)``, capped at 100 dB when MSE < 1e-20."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    e = mse(a, b)
    if e < MSE_FLOOR:
        return PSNR_CAP
    return 10.0 * math.log10(peak * peak / e)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t * t) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(img, g.size, axis=0)
    rows = windows @ g
    windows = np.lib.stride_tricks.sliding_window_view(rows, g.size, axis=1)
    return windows @ g


def ssim(a, b, peak: float = 1.0) -> float:
    """Single-scale SSIM averaged over all valid 11 x 11 Gaussian windows."""
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs 2-D images of extent >= {SSIM_WINDOW}, got {a.shape}")
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def phase_psnr(xhat, x) -> float:
    return psnr(shifted_phase(xhat), shifted_phase(x), TWO_PI)


def align_global_phase(xhat, x, grid: int = 256) -> tuple[ComplexField, int]:
    """Multiply ``xhat`` by ``exp(j*2*pi*k/grid)`` for the ``k`` maximising phase PSNR.

    Returns the aligned field and ``k``; ties go to the smallest ``k``.
    Recovering ``xhat = x*exp(j*phi)`` yields ``k = grid - phi*grid/(2*pi)``.
    """
    zh, z = np.asarray(_arr(xhat), dtype=np.complex128), np.asarray(_arr(x), dtype=np.complex128)
    if zh.shape != z.shape:
        raise ValueError("shape mismatch")
    if grid < 1:
        raise ValueError("grid must be >= 1")
    ref = shifted_phase(z)
    scores = np.array([psnr(shifted_phase(zh * np.exp(1j * TWO_PI * k / grid)), ref, TWO_PI)
                       for k in range(grid)])
    k = int(np.argmax(scores))
    return ComplexField(zh * np.exp(1j * TWO_PI * k / grid)), k


def aligned_phase_psnr(xhat, x, grid: int = 256) -> float:
    aligned, _ = align_global_phase(xhat, x, grid)
    return phase_psnr(aligned, x)


# -- per-set evaluation ------------------------------------------------------

PHASE_COLUMNS = ("phase_mae", "phase_psnr", "phase_ssim")
MAG_COLUMNS = ("mag_mae", "mag_psnr", "mag_ssim")


def sample_metrics(xhat, x, magnitude: bool = False) -> dict[str, float]:
    ph, pt = shifted_phase(xhat), shifted_phase(x)
    out = {
        "phase_mae": mae(ph, pt),
        "phase_psnr": psnr(ph, pt, TWO_PI),
        "phase_ssim": ssim(ph, pt, TWO_PI) if min(pt.shape) >= SSIM_WINDOW else math.nan,
    }
    if magnitude:
        mh, mt = np.abs(_arr(xhat)), np.abs(_arr(x))
        out.update({
            "mag_mae": mae(mh, mt),
            "mag_psnr": psnr(mh, mt, 1.0),
            "mag_ssim": ssim(mh, mt, 1.0) if min(mt.shape) >= SSIM_WINDOW else math.nan,
        })
    return out


@dataclass
class EvalReport:
    """Per-sample rows plus their means.

    CSV column order: ``id, phase_mae, phase_psnr, phase_ssim``, then the
    magnitude columns when present, then ``shift``. Wall-clock times are kept
    in ``seconds`` but never written to the CSV so it stays byte-stable.
    """

    ids: list[str]
    rows: list[dict[str, float]]
    shifts: list[int | None]
    seconds: list[float] = field(default_factory=list)
    magnitude: bool = False

    @property
    def columns(self) -> tuple[str, ...]:
        return PHASE_COLUMNS + (MAG_COLUMNS if self.magnitude else ())

    @property
    def mean(self) -> dict[str, float]:
        n = len(self.rows)
        return {c: (math.fsum(r[c] for r in self.rows) / n if n else math.nan) for c in self.columns}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("id",) + self.columns + ("shift",))
            for sid, row, shift in zip(self.ids, self.rows, self.shifts):
                w.writerow([sid] + [repr(row[c]) for c in self.columns] + ["" if shift is None else shift])
            m = self.mean
            w.writerow(["MEAN"] + [repr(m[c]) for c in self.columns] + [""])

    @staticmethod
    def read_csv(path) -> tuple[list[dict[str, str]], dict[str, str]]:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        return [r for r in rows if r["id"] != "MEAN"], next(r for r in rows if r["id"] == "MEAN")


def evaluate_set(outputs: Sequence, targets: Sequence, ids: Sequence[str] | None = None,
                 align: bool = False, magnitude: bool = False, grid: int = 256,
                 seconds: Sequence[float] | None = None) -> EvalReport:
    """Metrics for every (output, target) pair and their means.

    ``align=True`` applies global-phase alignment first (the classical-solver
    protocol); network outputs are evaluated unaligned by default.
    """
    if len(outputs) != len(targets):
        raise ValueError(f"{len(outputs)} outputs vs {len(targets)} targets")
    ids = [str(i) for i in range(len(outputs))] if ids is None else list(ids)
    if len(ids) != len(outputs):
        raise ValueError("ids length mismatch")
    rows, shifts = [], []
    for xh, x in zip(outputs, targets):
        shift = None
        if align:
            xh, shift = align_global_phase(xh, x, grid)
        rows.append(sample_metrics(xh, x, magnitude))
        shifts.append(shift)
    return EvalReport(ids, rows, shifts, list(seconds or []), magnitude)


def count_flops(cfg) -> int:
    """2 x multiply-accumulates of FC, conv and attention products at batch 1.

    Normalisation, activation and softmax costs are ignored.
    """
    from .model import layer_plan
    return 2 * sum(layer.macs for layer in layer_plan(cfg))
