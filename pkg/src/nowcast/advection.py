"""Backward semi-Lagrangian warp with bilinear sampling, its exact VJP, and
the extrapolation baseline built on it.

For each output pixel p the frame is sampled at ``p - flow(p)``; source
coordinates are clamped into the grid (border replication) and the result
plus the intensity correction is clamped at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import FieldSequence, IntensityField, MotionField, PrecipField


@dataclass(frozen=True)
class WarpJacobians:
    """Per-pixel local derivatives of the warp.

    ``frame_index`` / ``frame_weight`` have a trailing axis of 4 listing the
    bilinear source pixels (flat indices into the frame) and their weights.
    ``flow`` is (2, ...) holding d out / d u and d out / d v. ``intensity``
    is 1 where the zero clamp is inactive and 0 where it cuts the output.
    """

    frame_index: np.ndarray
    frame_weight: np.ndarray
    flow: np.ndarray
    intensity: np.ndarray


def _sample_geometry(u, v, n):
    rows = np.arange(n, dtype=np.float64)[:, None]
    cols = np.arange(n, dtype=np.float64)[None, :]
    y = rows - v
    x = cols - u
    in_y = (y >= 0) & (y <= n - 1)
    in_x = (x >= 0) & (x <= n - 1)
    y = np.clip(y, 0, n - 1)
    x = np.clip(x, 0, n - 1)
    y0 = np.minimum(np.floor(y), n - 2).astype(np.int64)
    x0 = np.minimum(np.floor(x), n - 2).astype(np.int64)
    return y0, x0, y - y0, x - x0, in_y, in_x


def _corners(frame, y0, x0):
    n = frame.shape[-1]
    flat = frame.reshape(frame.shape[:-2] + (n * n,))
    base = y0 * n + x0
    idx = np.stack([base, base + 1, base + n, base + n + 1], axis=-1)
    if frame.ndim == 2:
        vals = flat[idx]
    else:
        b = frame.shape[0]
        vals = np.take_along_axis(flat, idx.reshape(b, -1), axis=1).reshape(idx.shape)
    return idx, vals


def warp_arrays(u, v, s, frame):
    """Array-level warp; accepts (n, n) or batched (B, n, n) float arrays."""
    u, v, s, frame = (np.asarray(a, dtype=np.float64) for a in (u, v, s, frame))
    if not (u.shape == v.shape == s.shape == frame.shape):
        raise ValueError(f"warp shape mismatch: {u.shape}, {v.shape}, {s.shape}, {frame.shape}")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and np.all(np.isfinite(s))):
        raise ValueError("warp: flow and intensity must be finite")
    n = frame.shape[-1]
    y0, x0, wy, wx, _, _ = _sample_geometry(u, v, n)
    _, c = _corners(frame, y0, x0)
    sample = (
        (1 - wy) * (1 - wx) * c[..., 0]
        + (1 - wy) * wx * c[..., 1]
        + wy * (1 - wx) * c[..., 2]
        + wy * wx * c[..., 3]
    )
    return np.maximum(sample + s, 0.0)


def warp_jacobian_arrays(u, v, s, frame) -> WarpJacobians:
    u, v, s, frame = (np.asarray(a, dtype=np.float64) for a in (u, v, s, frame))
    n = frame.shape[-1]
    y0, x0, wy, wx, in_y, in_x = _sample_geometry(u, v, n)
    idx, c = _corners(frame, y0, x0)
    w = np.stack(
        [(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx], axis=-1
    )
    sample = np.sum(w * c, axis=-1)
    active = (sample + s > 0).astype(np.float64)
    ds_dx = (1 - wy) * (c[..., 1] - c[..., 0]) + wy * (c[..., 3] - c[..., 2])
    ds_dy = (1 - wx) * (c[..., 2] - c[..., 0]) + wx * (c[..., 3] - c[..., 1])
    # x = col - u, y = row - v; clamped coordinates do not move with the flow
    d_u = -ds_dx * in_x * active
    d_v = -ds_dy * in_y * active
    return WarpJacobians(idx, w * active[..., None], np.stack([d_u, d_v]), active)


def warp_vjp_arrays(upstream, u, v, s, frame):
    """Return (grad_u, grad_v, grad_s, grad_frame) for ``sum(upstream * warp)``."""
    g = np.asarray(upstream, dtype=np.float64)
    frame = np.asarray(frame, dtype=np.float64)
    jac = warp_jacobian_arrays(u, v, s, frame)
    grad_u = g * jac.flow[0]
    grad_v = g * jac.flow[1]
    grad_s = g * jac.intensity
    contrib = (g[..., None] * jac.frame_weight)
    n = frame.shape[-1]
    if frame.ndim == 2:
        grad_frame = np.bincount(
            jac.frame_index.ravel(), weights=contrib.ravel(), minlength=n * n
        ).reshape(n, n)
    else:
        b = frame.shape[0]
        offs = (np.arange(b) * n * n)[:, None, None, None]
        grad_frame = np.bincount(
            (jac.frame_index + offs).ravel(), weights=contrib.ravel(), minlength=b * n * n
        ).reshape(frame.shape)
    return grad_u, grad_v, grad_s, grad_frame


def warp(flow: MotionField, intensity: IntensityField, frame: PrecipField) -> PrecipField:
    if not (flow.n == frame.n and intensity.values.shape == frame.values.shape):
        raise ValueError("warp: flow, intensity and frame must share n")
    out = warp_arrays(flow.u, flow.v, intensity.values, frame.values)
    return PrecipField(out, frame.timestamp)


def warp_vjp(upstream, flow: MotionField, intensity: IntensityField, frame: PrecipField):
    """Exact vector-Jacobian product of :func:`warp`.

    Returns ``(grad_flow, grad_intensity, grad_frame)`` where ``grad_flow`` is
    a (2, n, n) array ordered (u, v).
    """
    gu, gv, gs, gf = warp_vjp_arrays(upstream, flow.u, flow.v, intensity.values, frame.values)
    return np.stack([gu, gv]), gs, gf


def extrapolate(frames: FieldSequence, cfg, steps: int) -> list[PrecipField]:
    """Deterministic semi-Lagrangian extrapolation from one estimated flow."""
    from .flow import estimate_flow

    if steps < 1:
        raise ValueError("steps must be >= 1")
    flow = estimate_flow(frames[-cfg.context_frames:], cfg)
    zero = np.zeros((frames.n, frames.n))
    out = []
    current = frames[-1].values.astype(np.float64)
    for k in range(1, steps + 1):
        current = warp_arrays(flow.u, flow.v, zero, current)
        out.append(PrecipField(current, frames[-1].timestamp + k * frames.step_seconds))
    return out
