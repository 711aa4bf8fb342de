"""Iterative phase-retrieval baselines: GS, HIO and ADMM-TV.

All solvers work on the full N x N intensity frame. The object support is the
top-left S x S block of the padded grid, the same place the forward model puts
the object, so a ground-truth object is an exact fixed point.

Residual traces record, for every iteration, ``|| |F(pad(x_k))| - sqrt(Y) || / ||sqrt(Y)||``
of the constrained estimate produced by that iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .optics import ComplexField, IntensityMeasurement

ALGORITHMS = ("gs", "hio", "admm-tv")
CONSTRAINTS = ("support-only", "unit-modulus", "nonnegative")


@dataclass(frozen=True)
class SolverConfig:
    algorithm: str = "gs"
    max_iters: int = 2000
    trials: int = 3
    beta: float = 0.9
    rho: float = 1.0
    tau_tv: float = 0.01
    support: int = 128
    constraint: str = "support-only"
    seed: int = 0
    mask_saturated: bool = False
    inner_iters: int = 10
    init_magnitude: str = "unit"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"constraint must be one of {CONSTRAINTS}, got {self.constraint!r}")
        if self.max_iters < 1 or self.trials < 1 or self.support < 1 or self.inner_iters < 1:
            raise ValueError("max_iters, trials, support and inner_iters must be >= 1")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.rho <= 0 or self.tau_tv < 0:
            raise ValueError("rho must be > 0 and tau_tv >= 0")
        if self.init_magnitude not in ("unit", "random"):
            raise ValueError("init_magnitude must be 'unit' or 'random'")


@dataclass
class SolverReport:
    reconstruction: ComplexField
    residuals: np.ndarray
    iterations: int
    trial: int = 1
    algorithm: str = "gs"
    primal: np.ndarray | None = None
    dual: np.ndarray | None = None
    score: float | None = None
    candidates: list[float] = field(default_factory=list)

    @property
    def final_residual(self) -> float:
        return float(self.residuals[-1])


class _Problem:
    """Measured magnitudes, support geometry and spatial projection."""

    def __init__(self, Y, cfg: SolverConfig):
        if isinstance(Y, IntensityMeasurement):
            intensity = Y.physical()
            sat = Y.saturated if cfg.mask_saturated else None
        else:
            intensity = np.asarray(Y, dtype=np.float64)
            sat = None
        if intensity.ndim != 2 or intensity.shape[0] != intensity.shape[1]:
            raise ValueError(f"measurement must be square 2-D, got {intensity.shape}")
        if (intensity < 0).any() or not np.isfinite(intensity).all():
            raise ValueError("measurement must be finite and nonnegative")
        if not intensity.any():
            raise ValueError("measurement is identically zero")
        self.N = intensity.shape[0]
        self.S = cfg.support
        if self.N < 2 * self.S:
            raise ValueError(f"support {self.S} violates oversampling for a {self.N} grid")
        # solvers work in FFT order; the stored frame is DC-centred
        self.mag = np.fft.ifftshift(np.sqrt(intensity))
        self.free = None if sat is None else np.fft.ifftshift(sat)
        w = self.mag if self.free is None else self.mag[~self.free]
        self.norm = float(np.linalg.norm(w))
        self.constraint = cfg.constraint

    def pad(self, x: np.ndarray) -> np.ndarray:
        return np.fft.fft2(x, s=(self.N, self.N))

    def crop(self, X: np.ndarray) -> np.ndarray:
        return np.fft.ifft2(X)[: self.S, : self.S]

    def residual(self, X: np.ndarray) -> float:
        d = np.abs(X) - self.mag
        if self.free is not None:
            d = d[~self.free]
        return float(np.linalg.norm(d)) / self.norm

    def fourier_project(self, X: np.ndarray) -> np.ndarray:
        a = np.abs(X)
        phase = np.ones_like(X)
        nz = a > 0
        phase[nz] = X[nz] / a[nz]
        out = self.mag * phase
        if self.free is not None:
            out[self.free] = X[self.free]
        return out

    def spatial_project(self, x: np.ndarray) -> np.ndarray:
        if self.constraint == "support-only":
            return x
        if self.constraint == "nonnegative":
            return np.maximum(x.real, 0.0).astype(np.complex128)
        a = np.abs(x)
        out = np.ones_like(x)
        nz = a > 0
        out[nz] = x[nz] / a[nz]
        return out

    def initial(self, rng: np.random.Generator, magnitude: str) -> np.ndarray:
        S = self.S
        if self.constraint == "nonnegative":
            return rng.uniform(0.0, 1.0, (S, S)).astype(np.complex128)
        mag = np.ones((S, S)) if magnitude == "unit" else rng.uniform(0.0, 1.0, (S, S))
        return mag * np.exp(2j * np.pi * rng.uniform(0.0, 1.0, (S, S)))


def _start(problem: _Problem, cfg: SolverConfig, trial: int, init) -> np.ndarray:
    if init is not None:
        x0 = np.asarray(init.data if isinstance(init, ComplexField) else init, dtype=np.complex128)
        if x0.shape != (problem.S, problem.S):
            raise ValueError(f"init shape {x0.shape} != support {(problem.S, problem.S)}")
        return x0.copy()
    return problem.initial(np.random.default_rng([cfg.seed, trial]), cfg.init_magnitude)


def _gs_run(problem: _Problem, cfg: SolverConfig, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    trace = np.empty(cfg.max_iters)
    X = problem.pad(x)
    for k in range(cfg.max_iters):
        x = problem.spatial_project(problem.crop(problem.fourier_project(X)))
        X = problem.pad(x)
        trace[k] = problem.residual(X)
    return x, trace


def _hio_run(problem: _Problem, cfg: SolverConfig, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # The iterate lives on the whole padded plane: HIO keeps feedback outside the support.
    N, S, beta = problem.N, problem.S, cfg.beta
    inside = np.zeros((N, N), dtype=bool)
    inside[:S, :S] = True
    g = np.zeros((N, N), dtype=np.complex128)
    g[:S, :S] = x
    trace = np.empty(cfg.max_iters)
    est = x
    for k in range(cfg.max_iters):
        gp = np.fft.ifft2(problem.fourier_project(np.fft.fft2(g)))
        if problem.constraint == "nonnegative":
            gp = gp.real.astype(np.complex128)
        proj = np.zeros_like(gp)
        proj[:S, :S] = problem.spatial_project(gp[:S, :S])
        ok = inside & (np.abs(gp - proj) <= 1e-12 * (1.0 + np.abs(gp)))
        g = np.where(ok, gp, g - beta * (gp - proj))
        est = proj[:S, :S]
        trace[k] = problem.residual(problem.pad(est))
    return est, trace


def _tv_grad(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return w[:, 1:] - w[:, :-1], w[1:, :] - w[:-1, :]


def _tv_adjoint(ph: np.ndarray, pv: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    out[:, 1:] += ph
    out[:, :-1] -= ph
    out[1:, :] += pv
    out[:-1, :] -= pv
    return out


def tv_prox(v: np.ndarray, lam: float, iters: int = 10) -> np.ndarray:
    """Anisotropic TV proximal map of a real 2-D array by dual projected gradient.

    Solves ``argmin_w 0.5*||w - v||^2 + lam*TV(w)`` approximately with a fixed
    number of clipped dual steps of size 1/8 (the inverse of ``||D||^2``).
    Complex input is handled per real and imaginary part.
    """
    if np.iscomplexobj(v):
        return tv_prox(v.real, lam, iters) + 1j * tv_prox(v.imag, lam, iters)
    if lam == 0:
        return v.copy()
    ph = np.zeros((v.shape[0], v.shape[1] - 1))
    pv = np.zeros((v.shape[0] - 1, v.shape[1]))
    for _ in range(iters):
        w = v - lam * _tv_adjoint(ph, pv, v.shape)
        gh, gv = _tv_grad(w)
        ph = np.clip(ph + gh / (8.0 * lam), -1.0, 1.0)
        pv = np.clip(pv + gv / (8.0 * lam), -1.0, 1.0)
    return v - lam * _tv_adjoint(ph, pv, v.shape)


def _admm_run(problem: _Problem, cfg: SolverConfig, x: np.ndarray):
    # spatial splitting x = w: x-step is the GS operator, w-step the TV prox
    lam = cfg.tau_tv / cfg.rho
    w, u = x.copy(), np.zeros_like(x)
    n = cfg.max_iters
    trace, primal, dual = np.empty(n), np.empty(n), np.empty(n)
    for k in range(n):
        x = problem.spatial_project(problem.crop(problem.fourier_project(problem.pad(w - u))))
        w_prev = w
        w = tv_prox(x + u, lam, cfg.inner_iters)
        u = u + x - w
        scale = max(float(np.linalg.norm(x)), 1e-300)
        trace[k] = problem.residual(problem.pad(x))
        primal[k] = float(np.linalg.norm(x - w)) / scale
        dual[k] = cfg.rho * float(np.linalg.norm(w - w_prev)) / scale
    return x, trace, primal, dual


def _run_trial(problem: _Problem, cfg: SolverConfig, trial: int, init) -> SolverReport:
    x0 = _start(problem, cfg, trial, init)
    primal = dual = None
    if cfg.algorithm == "gs":
        x, trace = _gs_run(problem, cfg, x0)
    elif cfg.algorithm == "hio":
        x, trace = _hio_run(problem, cfg, x0)
    else:
        x, trace, primal, dual = _admm_run(problem, cfg, x0)
    return SolverReport(ComplexField(x), trace, cfg.max_iters, trial, cfg.algorithm, primal, dual)


def run_trials(Y, cfg: SolverConfig, init=None) -> list[SolverReport]:
    """One report per trial, trial indices starting at 1."""
    problem = _Problem(Y, cfg)
    return [_run_trial(problem, cfg, t, init) for t in range(1, cfg.trials + 1)]


def best_of_trials(reports: Sequence[SolverReport], metric: str = "residual",
                   reference: ComplexField | None = None,
                   score: Callable[[ComplexField, ComplexField], float] | None = None) -> SolverReport:
    """Arg-best report; ties go to the earliest trial.

    ``metric="residual"`` minimises the final residual. ``metric="psnr"``
    maximises ``score(reconstruction, reference)``, which defaults to the
    globally aligned phase PSNR.
    """
    if not reports:
        raise ValueError("best_of_trials needs at least one report")
    if metric == "residual":
        values = [r.final_residual for r in reports]
        best = int(np.argmin(values))
    elif metric in ("psnr", "psnr_vs_reference"):
        if reference is None:
            raise ValueError("psnr selection needs a reference")
        if score is None:
            from .metrics import aligned_phase_psnr as score
        values = [float(score(r.reconstruction, reference)) for r in reports]
        best = int(np.argmax(values))
    else:
        raise ValueError(f"unknown selection metric {metric!r}")
    return replace(reports[best], score=values[best], candidates=values)


def solve(Y, cfg: SolverConfig, init=None, metric: str = "residual",
          reference: ComplexField | None = None) -> SolverReport:
    return best_of_trials(run_trials(Y, cfg, init), metric, reference)


def gs_solve(Y, cfg: SolverConfig = SolverConfig(), init=None) -> SolverReport:
    return solve(Y, replace(cfg, algorithm="gs"), init)


def hio_solve(Y, cfg: SolverConfig = SolverConfig(algorithm="hio"), init=None) -> SolverReport:
    return solve(Y, replace(cfg, algorithm="hio"), init)


def admm_tv_solve(Y, cfg: SolverConfig = SolverConfig(algorithm="admm-tv"), init=None) -> SolverReport:
    return solve(Y, replace(cfg, algorithm="admm-tv"), init)
