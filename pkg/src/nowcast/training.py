"""Two-stage training: the VED against optical-flow targets, then the
evolver against teacher-forced warped frames with the VED frozen."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .dataset import Window
from .flow import FlowConfig
from .model import (ModelConfig, decode_tensors, encode_tensors, evolve_tensors,
                    evolver_names, init_params, tensors, ved_names, warp_tensor)
from .supervision import LossWeights, crop_mask, derive_targets, ved_loss_arrays

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "stage", "lead", "loss", "l_int", "l_motion", "l_cos", "l_kl"]


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``params`` are the last parameters that gave a finite loss."""

    def __init__(self, step: int, params: dict[str, np.ndarray]):
        super().__init__(f"non-finite loss at step {step}; last good parameters kept")
        self.step = step
        self.params = params


@dataclass
class TrainingSet:
    """Stacked windows plus their derived VED targets."""

    context: np.ndarray  # (N, T+1, n, n)
    future: np.ndarray  # (N, H, n, n)
    motion: np.ndarray  # (N, 2, n, n)
    intensity: np.ndarray  # (N, n, n)
    crop_margin: int = 4

    def __len__(self):
        return self.context.shape[0]

    @classmethod
    def from_windows(cls, windows: Sequence[Window], flow_cfg: FlowConfig, crop_margin: int = 4):
        ctx, fut, mot, inten = [], [], [], []
        for w in windows:
            frames = w.context[len(w.context) - (flow_cfg.context_frames - 1):]
            target_window = type(w.context)(frames.frames + (w.future[0],), w.context.step_seconds)
            pair = derive_targets(target_window, flow_cfg, crop_margin)
            ctx.append(w.context.to_array())
            fut.append(np.stack([f.values for f in w.future]))
            mot.append(pair.motion_target.stack())
            inten.append(pair.intensity_target.values)
        return cls(np.stack(ctx).astype(np.float32), np.stack(fut).astype(np.float32),
                   np.stack(mot).astype(np.float32), np.stack(inten).astype(np.float32), crop_margin)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    log: list[dict] = field(default_factory=list)

    def curve(self, stage: str) -> np.ndarray:
        rows = {}
        for r in self.log:
            if r["stage"] == stage:
                rows.setdefault(r["step"], []).append(r["loss"])
        return np.array([np.mean(v) for _, v in sorted(rows.items())])


def write_log_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, LOG_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def fit_normalization(params: dict[str, np.ndarray], data: TrainingSet) -> None:
    """Affine input/output scalings fitted on the training split, stored as parameters."""
    mask = crop_mask(data.context.shape[-1], data.crop_margin)
    x = data.context.astype(np.float64)
    params["norm.input"] = np.array([x.mean(), max(x.std(), 1e-3)], dtype=np.float32)
    m = data.motion.astype(np.float64)[:, :, mask]
    off = m.mean(axis=(0, 2))
    scale = max(float(np.sqrt(np.mean((m - off[None, :, None]) ** 2))), 0.1)
    params["norm.flow"] = np.array([off[0], off[1], scale], dtype=np.float32)
    s = data.intensity.astype(np.float64)[:, mask]
    params["norm.intensity"] = np.array([max(float(s.std()), 0.1)], dtype=np.float32)


def _all_finite(*ts) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in ts)


def _batches(rng: np.random.Generator, size: int, batch: int):
    while True:
        order = rng.permutation(size)
        for i in range(0, size - batch + 1 if size >= batch else 1, batch):
            yield order[i:i + batch]


def _ved_loss_node(motion, intensity, mu, log_var, tm, ti, weights, crop):
    def fwd(m, s, a, b):
        res = ved_loss_arrays(m, s, tm, ti, a, b, weights, crop)
        return res.value, res

    def vjp(g, res):
        gr = res.grads
        return g * gr["motion"], g * gr["intensity"], g * gr["mu"], g * gr["log_var"]

    node = ad.custom("ved_loss", (motion, intensity, mu, log_var), fwd, vjp)
    return node


def train_ved(data: TrainingSet, cfg: ModelConfig, weights: LossWeights = LossWeights(),
              steps: int = 200, batch: int = 8, lr: float = 1e-4, seed: int = 0,
              params: dict[str, np.ndarray] | None = None, log_every: int = 1) -> TrainResult:
    """Stage 1: Adam over the VED loss. Only ``enc.*`` / ``dec.*`` are updated."""
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(cfg, seed)
        fit_normalization(params, data)
    else:
        params = {k: v.copy() for k, v in params.items()}
    names = ved_names(params)
    good = {k: v.copy() for k, v in params.items()}
    state = ad.AdamState()
    rows = []
    batches = _batches(rng, len(data), batch)
    for step in range(1, steps + 1):
        idx = next(batches)
        P = tensors(params, trainable=names)
        with ad.Tape():
            mu, lv, sample = encode_tensors(P, ad.Tensor(data.context[idx]), cfg,
                                            noise=rng.standard_normal((len(idx), cfg.embed_dim,
                                                                       data.context.shape[-1] // cfg.reduc_factor,
                                                                       data.context.shape[-1] // cfg.reduc_factor)),
                                            rng=rng)
            motion, intensity = decode_tensors(P, sample, cfg)
            if not _all_finite(motion, intensity, mu, lv):
                raise TrainingDiverged(step, good)
            loss = _ved_loss_node(motion, intensity, mu, lv, data.motion[idx], data.intensity[idx],
                                  weights, data.crop_margin)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(step, good)
        good = {k: v.copy() for k, v in params.items()}
        ad.backward(loss)
        ad.adam_step(params, {k: P[k].grad for k in names}, state, lr=lr)
        if step % log_every == 0 or step == steps:
            res = ved_loss_arrays(motion.data, intensity.data, data.motion[idx], data.intensity[idx],
                                  mu.data, lv.data, weights, data.crop_margin)
            rows.append({"step": step, "stage": "ved", "lead": 1, "loss": value,
                         "l_int": res.terms["int"], "l_motion": res.terms["motion"],
                         "l_cos": res.terms["cos"], "l_kl": res.terms["kl"]})
    return TrainResult(params, rows)


def latent_means(params, data: TrainingSet, cfg: ModelConfig, chunk: int = 32) -> np.ndarray:
    P = tensors(params)
    out = []
    for i in range(0, len(data), chunk):
        mu, _, _ = encode_tensors(P, ad.Tensor(data.context[i:i + chunk]), cfg)
        out.append(mu.data)
    return np.concatenate(out)


def train_evolver(data: TrainingSet, cfg: ModelConfig, params: dict[str, np.ndarray],
                  steps: int = 200, batch: int = 8, lr: float = 1e-4, seed: int = 0,
                  leads: Sequence[int] | None = None) -> TrainResult:
    """Stage 2: Adam over the teacher-forced warp loss, lead k drawn
    uniformly from 2..horizon per sample. Gradients pass through the frozen
    decoder and the warp; only ``evo.*`` parameters change."""
    if cfg.horizon < 2:
        raise ValueError("evolver training needs horizon >= 2")
    if data.future.shape[1] < cfg.horizon:
        raise ValueError("training windows are shorter than the horizon")
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in params.items()}
    names = evolver_names(params)
    good = {k: v.copy() for k, v in params.items()}
    latents = latent_means(params, data, cfg)
    mask = crop_mask(data.context.shape[-1], data.crop_margin)
    lead_pool = np.arange(2, cfg.horizon + 1) if leads is None else np.asarray(leads)
    state = ad.AdamState()
    rows = []
    batches = _batches(rng, len(data), batch)
    for step in range(1, steps + 1):
        idx = next(batches)
        ks = rng.choice(lead_pool, size=len(idx))
        x_prev = data.future[idx, ks - 2]
        x_next = data.future[idx, ks - 1]
        P = tensors(params, trainable=names)
        with ad.Tape():
            lk = evolve_tensors(P, ad.Tensor(latents[idx]), ks, cfg)
            motion, intensity = decode_tensors(P, lk, cfg)
            if not _all_finite(motion, intensity):
                raise TrainingDiverged(step, good)
            pred = warp_tensor(motion, intensity, x_prev)
            loss = ad.l1_distance(pred, ad.Tensor(x_next), mask)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(step, good)
        good = {k: v.copy() for k, v in params.items()}
        ad.backward(loss)
        ad.adam_step(params, {k: P[k].grad for k in names}, state, lr=lr)
        per = np.abs(pred.data.astype(np.float64) - x_next)[:, mask].mean(axis=1)
        for k in np.unique(ks):
            rows.append({"step": step, "stage": "evolver", "lead": int(k),
                         "loss": float(per[ks == k].mean())})
    return TrainResult(params, rows)
