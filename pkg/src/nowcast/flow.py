"""Dense optical flow between precipitation frames: Lucas-Kanade and a
DARTS-style spectral solver.

Both methods share the multi-frame linearisation: the temporal derivative is
the least-squares slope of each pixel over the context frames, and spatial
gradients are taken from the mean frame, i.e. at the centre time. For a
pair of frames this is the usual midpoint scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .fields import FieldSequence, MotionField

COND_LIMIT = 1e8


@dataclass(frozen=True)
class FlowConfig:
    method: str = "darts"
    lk_window: int = 15
    lk_smooth_sigma: float = 1.5
    lk_ridge: float = 1e-3
    lk_min_eig: float = 1e-2
    darts_modes: int = 4
    darts_regularization: float = 1e-3
    context_frames: int = 3

    def __post_init__(self):
        if self.method not in ("darts", "lucas_kanade"):
            raise ValueError(f"unknown flow method {self.method!r}")
        if self.lk_window < 3 or self.lk_window % 2 == 0:
            raise ValueError("lk_window must be odd and >= 3")
        if self.darts_modes < 1:
            raise ValueError("darts_modes must be >= 1")
        if self.darts_regularization < 0 or self.lk_ridge < 0 or self.lk_min_eig < 0:
            raise ValueError("regularisation terms must be non-negative")
        if self.context_frames < 2:
            raise ValueError("context_frames must be >= 2")


def _frames_array(frames) -> np.ndarray:
    if isinstance(frames, FieldSequence):
        return frames.to_array().astype(np.float64)
    return np.asarray(frames, dtype=np.float64)


def temporal_slope(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (mean frame, per-pixel least-squares slope per step)."""
    t = np.arange(stack.shape[0], dtype=np.float64)
    t -= t.mean()
    slope = np.tensordot(t, stack, axes=(0, 0)) / np.sum(t * t)
    return stack.mean(axis=0), slope


def lucas_kanade_pixel(tensor, mismatch, ridge: float = 0.0) -> np.ndarray:
    """Solve ``(A^T A + ridge I) d = A^T b`` for one window.

    Returns the zero vector when the regularised system is singular or its
    condition number exceeds 1e8.
    """
    m = np.asarray(tensor, dtype=np.float64) + ridge * np.eye(2)
    eig = np.linalg.eigvalsh(m)
    if eig[0] <= 0 or eig[1] / eig[0] > COND_LIMIT:
        return np.zeros(2)
    return np.linalg.solve(m, np.asarray(mismatch, dtype=np.float64))


def _lk_dense(stack: np.ndarray, cfg: FlowConfig):
    if cfg.lk_smooth_sigma > 0:
        stack = np.stack(
            [ndimage.gaussian_filter(f, cfg.lk_smooth_sigma, mode="nearest") for f in stack]
        )
    mean, it = temporal_slope(stack)
    iy, ix = np.gradient(mean)
    if not (np.any(ix) or np.any(iy)):
        return np.zeros_like(mean), np.zeros_like(mean), True
    box = lambda a: ndimage.uniform_filter(a, cfg.lk_window, mode="nearest") * cfg.lk_window**2
    axx = box(ix * ix) + cfg.lk_ridge
    axy = box(ix * iy)
    ayy = box(iy * iy) + cfg.lk_ridge
    bx = -box(ix * it)
    by = -box(iy * it)
    half_tr = 0.5 * (axx + ayy)
    disc = np.sqrt(np.maximum(half_tr**2 - (axx * ayy - axy * axy), 0.0))
    lo, hi = half_tr - disc, half_tr + disc
    ok = (lo > 0) & (hi <= COND_LIMIT * np.where(lo > 0, lo, 1.0))
    # textureless windows (e.g. the flat interior of a growing cell) would explain
    # brightness change with huge displacements; drop them like a minimum-eigenvalue tracker
    ok &= lo >= cfg.lk_min_eig * float(np.mean(half_tr))
    det = np.where(ok, axx * ayy - axy * axy, 1.0)
    u = np.where(ok, (ayy * bx - axy * by) / det, 0.0)
    v = np.where(ok, (axx * by - axy * bx) / det, 0.0)
    return u, v, False


def fourier_basis(n: int, modes: int) -> np.ndarray:
    """Real trigonometric basis with |kx|, |ky| <= modes, shape (P, n, n)."""
    y, x = np.mgrid[0:n, 0:n].astype(np.float64) * (2 * np.pi / n)
    basis = [np.ones((n, n))]
    for ky, kx in mode_list(modes):
        phase = ky * y + kx * x
        basis.append(np.cos(phase))
        basis.append(np.sin(phase))
    return np.stack(basis)


def mode_list(modes: int) -> list[tuple[int, int]]:
    """Half-plane wavenumbers (ky, kx) excluding the constant mode."""
    return [
        (ky, kx)
        for ky in range(0, modes + 1)
        for kx in range(-modes, modes + 1)
        if not (ky == 0 and kx <= 0)
    ]


def smoothness_weights(modes: int) -> np.ndarray:
    """Per-coefficient ridge weights: 1 + |k|^2, so the ridge prefers smooth flow."""
    w = [1.0]
    for ky, kx in mode_list(modes):
        w += [1.0 + kx * kx + ky * ky] * 2
    return np.array(w)


def darts_coefficients(frames, cfg: FlowConfig):
    """Least-squares flow coefficients in the truncated Fourier basis.

    Minimises ``sum (dX/dt + u dX/dx + v dX/dy)^2 + reg * |W c|^2`` over
    ``u = sum_b c_u[b] phi_b``, ``v = sum_b c_v[b] phi_b``. By Parseval this
    is the same residual as in spectral space. ``W`` grows with |k| (see
    :func:`smoothness_weights`) so unconstrained dry areas take the smoothest
    continuation of the flow over rain. Returns (c_u, c_v, basis,
    degenerate).
    """
    stack = _frames_array(frames)
    n = stack.shape[-1]
    if cfg.darts_modes > n // 2:
        raise ValueError(f"darts_modes={cfg.darts_modes} exceeds Nyquist limit {n // 2}")
    mean, it = temporal_slope(stack)
    # finite differences: spectral derivatives ring at the non-periodic domain edge
    gy, gx = np.gradient(mean)
    basis = fourier_basis(n, cfg.darts_modes)
    p = basis.shape[0]
    phi = basis.reshape(p, -1)
    a = np.concatenate([phi * gx.ravel(), phi * gy.ravel()])  # (2P, n*n)
    ata = a @ a.T
    scale = np.trace(ata) / ata.shape[0]
    if scale <= 1e-12:
        return np.zeros(p), np.zeros(p), basis, True
    rhs = -(a @ it.ravel())
    w = np.tile(smoothness_weights(cfg.darts_modes), 2)
    coef = np.linalg.solve(ata + cfg.darts_regularization * scale * np.diag(w * w), rhs)
    return coef[:p], coef[p:], basis, False


def darts_solve(frames, cfg: FlowConfig) -> MotionField:
    cu, cv, basis, degenerate = darts_coefficients(frames, cfg)
    if degenerate:
        return MotionField.zeros(basis.shape[-1], degenerate=True)
    u = np.tensordot(cu, basis, axes=(0, 0))
    v = np.tensordot(cv, basis, axes=(0, 0))
    return MotionField(u, v)


def estimate_flow(frames, cfg: FlowConfig) -> MotionField:
    """Displacement (pixels per step) carrying the context toward its last frame."""
    stack = _frames_array(frames)
    if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
        raise ValueError(f"frames must be (T, n, n), got {stack.shape}")
    if stack.shape[0] != cfg.context_frames:
        raise ValueError(
            f"flow needs {cfg.context_frames} context frames, got {stack.shape[0]}"
        )
    n = stack.shape[-1]
    if np.all(stack == stack[:1]):
        # identical frames: no temporal signal; flag only when there is no texture either
        flat = bool(np.all(stack == stack.flat[0]))
        return MotionField.zeros(n, degenerate=flat)
    if cfg.method == "darts":
        return darts_solve(stack, cfg)
    u, v, degenerate = _lk_dense(stack, cfg)
    return MotionField(u, v, degenerate)
