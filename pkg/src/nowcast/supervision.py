"""Optical-flow supervision targets and the training losses, with exact gradients.

Array-level loss functions take a leading batch axis: motion (B, 2, n, n),
intensity and frames (B, n, n), latent parameters (B, ...). Spatial terms
are means over the cropped interior of every sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .advection import warp_arrays, warp_vjp_arrays
from .fields import FieldSequence, IntensityField, MotionField, PrecipField
from .flow import FlowConfig, estimate_flow

COS_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_int: float = 0.995
    lambda_motion: float = 0.0033
    lambda_cos: float = 0.00165
    lambda_kl: float = 1e-6
    kl_order: str = "posterior_prior"

    def __post_init__(self):
        for name in ("lambda_int", "lambda_motion", "lambda_cos", "lambda_kl"):
            w = getattr(self, name)
            if not np.isfinite(w) or w < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {w}")
        if self.kl_order not in ("posterior_prior", "prior_posterior"):
            raise ValueError(f"unknown kl_order {self.kl_order!r}")


@dataclass(frozen=True)
class SupervisionPair:
    motion_target: MotionField
    intensity_target: IntensityField
    advected_intermediate: PrecipField
    crop_margin: int = 4


@dataclass
class LossResult:
    value: float
    terms: dict[str, float]
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def crop_mask(n: int, margin: int) -> np.ndarray:
    if 2 * margin >= n:
        raise ValueError(f"crop margin {margin} leaves nothing of a {n}-pixel grid")
    m = np.zeros((n, n), dtype=bool)
    m[margin:n - margin, margin:n - margin] = True
    return m


def derive_targets(frames: FieldSequence, cfg: FlowConfig, crop_margin: int = 4) -> SupervisionPair:
    """Motion and intensity targets for the step X0 -> X1 (the last two frames).

    The flow is estimated over the trailing ``cfg.context_frames`` frames,
    X0 is advected with it, and the residual to X1 is the intensity target.
    """
    if len(frames) < max(cfg.context_frames, 2):
        raise ValueError(f"need at least {cfg.context_frames} frames, got {len(frames)}")
    motion = estimate_flow(frames[-cfg.context_frames:], cfg)
    x0, x1 = frames[-2], frames[-1]
    advected = warp_arrays(motion.u, motion.v, np.zeros((x0.n, x0.n)), x0.values)
    intensity = x1.values.astype(np.float64) - advected
    return SupervisionPair(
        motion, IntensityField(intensity), PrecipField(advected, x1.timestamp), crop_margin
    )


# --- individual terms -------------------------------------------------------


def l1_mean(pred, target, mask):
    """Mean |pred - target| over mask cells, with its gradient w.r.t. pred."""
    diff = np.asarray(pred, dtype=np.float64) - target
    w = np.broadcast_to(mask, diff.shape)
    count = w.sum()
    return float(np.sum(np.abs(diff) * w) / count), np.sign(diff) * w / count


def cosine_term_arrays(v, v_hat, mask=None):
    """``1 - mean cosine`` between (..., 2, n, n) vector fields, and d/d v_hat.

    Pixels where both vectors are shorter than 1e-8 are left out of the mean.
    """
    v = np.asarray(v, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if v.shape != v_hat.shape:
        raise ValueError(f"cosine term shape mismatch: {v.shape} vs {v_hat.shape}")
    nv = np.sqrt(np.sum(v * v, axis=-3))
    nh = np.sqrt(np.sum(v_hat * v_hat, axis=-3))
    valid = ~((nv < COS_EPS) & (nh < COS_EPS))
    if mask is not None:
        valid &= np.broadcast_to(mask, valid.shape)
    count = valid.sum()
    if count == 0:
        return 0.0, np.zeros_like(v_hat)
    dot = np.sum(v * v_hat, axis=-3)
    den = nv * nh + COS_EPS
    cos = dot / den
    value = 1.0 - float(np.sum(cos * valid) / count)
    safe_nh = np.where(nh > 0, nh, 1.0)
    dcos = v / den[..., None, :, :] - (
        (dot * nv / (safe_nh * den * den) * (nh > 0))[..., None, :, :] * v_hat
    )
    grad = -dcos * valid[..., None, :, :] / count
    return value, grad


def cosine_term(v: MotionField, v_hat: MotionField) -> float:
    return cosine_term_arrays(v.stack(), v_hat.stack())[0]


def kl_arrays(mu, log_var, order: str = "posterior_prior"):
    """KL between the encoder Gaussian and N(0, I), summed over latent dims.

    Leading axis is the batch; the result is the batch mean. ``order``
    ``posterior_prior`` gives KL(q || p), ``prior_posterior`` KL(p || q).
    Returns (value, d/d mu, d/d log_var).
    """
    mu = np.asarray(mu, dtype=np.float64)
    lv = np.asarray(log_var, dtype=np.float64)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(lv))):
        raise ValueError("latent parameters must be finite")
    b = mu.shape[0] if mu.ndim > 1 else 1
    var = np.exp(lv)
    if order == "posterior_prior":
        per = 0.5 * (mu * mu + var - lv - 1.0)
        g_mu, g_lv = mu, 0.5 * (var - 1.0)
    elif order == "prior_posterior":
        per = 0.5 * ((1.0 + mu * mu) / var + lv - 1.0)
        g_mu, g_lv = mu / var, 0.5 * (1.0 - (1.0 + mu * mu) / var)
    else:
        raise ValueError(f"unknown kl order {order!r}")
    return float(per.sum() / b), g_mu / b, g_lv / b


def kl_divergence(latent, order: str = "posterior_prior") -> float:
    mu = np.asarray(latent.mu)[None]
    return kl_arrays(mu, np.asarray(latent.log_var)[None], order)[0]


# --- composite losses -------------------------------------------------------


def ved_loss_arrays(pred_motion, pred_intensity, target_motion, target_intensity,
                    mu, log_var, w: LossWeights, crop_margin: int = 4) -> LossResult:
    arrays = (pred_motion, pred_intensity, target_motion, target_intensity, mu, log_var)
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise ValueError("ved loss: non-finite input")
    pm = np.asarray(pred_motion, dtype=np.float64)
    if pm.shape != np.shape(target_motion) or np.shape(pred_intensity) != np.shape(target_intensity):
        raise ValueError("ved loss: prediction/target shape mismatch")
    mask = crop_mask(pm.shape[-1], crop_margin)
    l_int, g_int = l1_mean(pred_intensity, target_intensity, mask)
    l_mot, g_mot = l1_mean(pm, target_motion, mask)
    l_cos, g_cos = cosine_term_arrays(target_motion, pm, mask)
    l_kl, g_mu, g_lv = kl_arrays(mu, log_var, w.kl_order)
    value = (w.lambda_int * l_int + w.lambda_motion * l_mot
             + w.lambda_cos * l_cos + w.lambda_kl * l_kl)
    return LossResult(
        value,
        {"int": l_int, "motion": l_mot, "cos": l_cos, "kl": l_kl},
        {
            "motion": w.lambda_motion * g_mot + w.lambda_cos * g_cos,
            "intensity": w.lambda_int * g_int,
            "mu": w.lambda_kl * g_mu,
            "log_var": w.lambda_kl * g_lv,
        },
    )


def loss_ved(pred_motion: MotionField, pred_intensity: IntensityField,
             targets: SupervisionPair, latent, w: LossWeights) -> LossResult:
    """Supervised VED loss for one sample; gradients w.r.t. predictions and latent."""
    res = ved_loss_arrays(
        pred_motion.stack()[None], pred_intensity.values[None],
        targets.motion_target.stack()[None], targets.intensity_target.values[None],
        np.asarray(latent.mu)[None], np.asarray(latent.log_var)[None], w, targets.crop_margin,
    )
    res.grads = {k: g[0] for k, g in res.grads.items()}
    return res


def evolver_loss_arrays(pred_motion, pred_intensity, x_prev, x_next, crop_margin: int = 4) -> LossResult:
    """Teacher-forced l1 between warp(pred, x_prev) and x_next."""
    pm = np.asarray(pred_motion, dtype=np.float64)
    out = warp_arrays(pm[..., 0, :, :], pm[..., 1, :, :], pred_intensity, x_prev)
    mask = crop_mask(out.shape[-1], crop_margin)
    value, g = l1_mean(out, np.asarray(x_next, dtype=np.float64), mask)
    gu, gv, gs, _ = warp_vjp_arrays(g, pm[..., 0, :, :], pm[..., 1, :, :], pred_intensity, x_prev)
    return LossResult(value, {"l1": value}, {"motion": np.stack([gu, gv], axis=-3), "intensity": gs})


def loss_evolver(pred_motion: MotionField, pred_intensity: IntensityField,
                 x_prev: PrecipField, x_next: PrecipField, crop_margin: int = 4) -> LossResult:
    return evolver_loss_arrays(
        pred_motion.stack(), pred_intensity.values, x_prev.values, x_next.values, crop_margin
    )
