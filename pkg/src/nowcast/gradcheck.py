"""Finite-difference checks for every hand-written derivative.

Each component draws random 16x16 float64 instances, evaluates a scalar
``sum(upstream * f(inputs))`` and compares the analytic gradient with
central differences element by element. Elements sitting on a kink
(integer sample coordinates, coordinate clamps, the zero clamp, relu or
|.| at zero) are excluded because the one-sided derivatives differ there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import advection
from . import autodiff as ad
from . import supervision
from .model import ModelConfig, decode_tensors, evolve_tensors, init_params, tensors, warp_tensor

H = 1e-5
KINK = 1e-4
TOL = 1e-4
PROBE_TOL = 1e-3
N = 16
INSTANCES = 10


@dataclass
class CheckResult:
    component: str
    max_rel_err: float
    checked: int
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.checked > 0 and self.max_rel_err < self.tol)

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return (f"component={self.component} max_rel_err={self.max_rel_err:.3e} "
                f"checked={self.checked} tol={self.tol:g} status={status}")


def rel_err(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f: Callable[[], np.ndarray], x: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``sum(f())`` w.r.t. every kept element of ``x``
    (mutated in place and restored). Outputs are differenced before summing
    so untouched terms cancel exactly."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    idx = np.arange(flat.size) if keep is None else np.flatnonzero(np.broadcast_to(keep, x.shape))
    for i in idx:
        old = flat[i]
        flat[i] = old + H
        fp = f()
        flat[i] = old - H
        fm = f()
        flat[i] = old
        gflat[i] = np.sum(np.asarray(fp) - np.asarray(fm)) / (2 * H)
    return g


class _Accumulator:
    def __init__(self, name, tol=TOL):
        self.name, self.tol, self.err, self.count = name, tol, 0.0, 0

    def add(self, analytic, numeric, keep=None):
        keep = np.ones(np.shape(analytic), bool) if keep is None else np.broadcast_to(keep, np.shape(analytic))
        if keep.any():
            self.err = max(self.err, float(rel_err(analytic, numeric)[keep].max()))
            self.count += int(keep.sum())

    def result(self):
        return CheckResult(self.name, self.err, self.count, self.tol)


# --- warp -------------------------------------------------------------------


def _warp_instance(rng):
    u = rng.uniform(-4, 4, (N, N))
    v = rng.uniform(-4, 4, (N, N))
    s = rng.uniform(-1, 1, (N, N))
    frame = rng.uniform(0, 2, (N, N))
    return u, v, s, frame


def warp_kinks(u, v, s, frame) -> np.ndarray:
    """Pixels whose output is not smooth in (u, v, s) within +-KINK."""
    n = frame.shape[-1]
    x = np.arange(n)[None, :] - u
    y = np.arange(n)[:, None] - v
    near_int = lambda c: np.abs(c - np.round(c)) < KINK
    near_edge = lambda c: (np.abs(c) < KINK) | (np.abs(c - (n - 1)) < KINK)
    y0, x0, wy, wx, _, _ = advection._sample_geometry(u, v, n)
    _, c = advection._corners(frame, y0, x0)
    sample = (1 - wy) * (1 - wx) * c[..., 0] + (1 - wy) * wx * c[..., 1] \
        + wy * (1 - wx) * c[..., 2] + wy * wx * c[..., 3]
    return near_int(x) | near_int(y) | near_edge(x) | near_edge(y) | (np.abs(sample + s) < KINK)


def check_warp(rng) -> CheckResult:
    acc = _Accumulator("warp")
    for _ in range(INSTANCES):
        u, v, s, frame = _warp_instance(rng)
        g = rng.standard_normal((N, N))
        gu, gv, gs, gf = advection.warp_vjp_arrays(g, u, v, s, frame)
        kinks = warp_kinks(u, v, s, frame)
        f = lambda: g * advection.warp_arrays(u, v, s, frame)
        for x, ga in ((u, gu), (v, gv), (s, gs)):
            acc.add(ga, numeric_grad(f, x, ~kinks), ~kinks)
        # a frame pixel is clean when no kinked output pixel reads it
        y0, x0, *_ = advection._sample_geometry(u, v, N)
        idx, _ = advection._corners(frame, y0, x0)
        dirty = np.zeros(N * N, bool)
        dirty[idx[kinks].ravel()] = True
        clean = ~dirty.reshape(N, N)
        acc.add(gf, numeric_grad(f, frame, clean), clean)
    return acc.result()


# --- autodiff ops -----------------------------------------------------------


def _op_check(name, make_inputs, build, rng, smooth=None):
    """``build(*tensors) -> Tensor``; ``smooth(*arrays) -> list of keep masks`` per input."""
    acc = _Accumulator(name)
    for _ in range(INSTANCES):
        arrays = [np.array(a, dtype=np.float64) for a in make_inputs(rng)]
        out_shape = build(*[ad.Tensor(a) for a in arrays]).shape
        g = rng.standard_normal(out_shape)
        ts = [ad.Tensor(a, requires_grad=True) for a in arrays]
        with ad.Tape():
            out = build(*ts)
            loss = ad.total(ad.mul(out, ad.Tensor(g)))
        ad.backward(loss)
        f = lambda: g * build(*[ad.Tensor(a) for a in arrays]).data
        keeps = smooth(*arrays) if smooth else [None] * len(arrays)
        for a, t, keep in zip(arrays, ts, keeps):
            acc.add(t.grad, numeric_grad(f, a, keep), keep)
    return acc.result()


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 10 * KINK, x + 0.1, x)


def _custom_warp_keep(m, s, x):
    # frame gradients are covered by the warp component
    clean = ~warp_kinks(m[0, 0], m[0, 1], s[0], x[0])
    return [clean[None, None], clean[None], np.zeros(x.shape, bool)]


def autodiff_checks(rng) -> list[CheckResult]:
    sq = lambda r: r.standard_normal((N, N))
    img = lambda r, c=2: r.standard_normal((2, c, N, N))
    ker = lambda r, o=3, c=2, k=3: r.standard_normal((o, c, k, k)) * 0.3
    out = [
        _op_check("ad.add", lambda r: (sq(r), r.standard_normal((1, N))), ad.add, rng),
        _op_check("ad.sub", lambda r: (sq(r), sq(r)), ad.sub, rng),
        _op_check("ad.mul", lambda r: (sq(r), sq(r)), ad.mul, rng),
        _op_check("ad.mul_scalar", lambda r: (sq(r),), lambda a: ad.mul(a, 1.7), rng),
        _op_check("ad.relu", lambda r: (_away_from_zero(r, (N, N)),), ad.relu, rng,
                  smooth=lambda a: [np.abs(a) > KINK]),
        _op_check("ad.sigmoid", lambda r: (sq(r),), ad.sigmoid, rng),
        _op_check("ad.exp", lambda r: (sq(r) * 0.5,), ad.exp, rng),
        _op_check("ad.mean", lambda r: (img(r),), lambda a: ad.mean(a, axis=(2, 3)), rng),
        _op_check("ad.total", lambda r: (sq(r),), ad.total, rng),
        _op_check("ad.l1_distance", lambda r: (sq(r), sq(r)),
                  lambda a, b: ad.l1_distance(a, b, np.arange(N)[:, None] % 3 > 0), rng,
                  smooth=lambda a, b: [np.abs(a - b) > KINK] * 2),
        _op_check("ad.matmul", lambda r: (r.standard_normal((N, 8)), r.standard_normal((8, N))),
                  ad.matmul, rng),
        _op_check("ad.reshape", lambda r: (img(r),), lambda a: ad.reshape(a, (4, N * N)), rng),
        _op_check("ad.take", lambda r: (img(r, 3),), lambda a: ad.take(a, np.s_[:, 1:3, 2:9]), rng),
        _op_check("ad.concat", lambda r: (img(r), img(r, 1)), lambda a, b: ad.concat([a, b], axis=1), rng),
        _op_check("ad.upsample2x", lambda r: (r.standard_normal((2, 2, N // 2, N // 2)),), ad.upsample2x, rng),
        _op_check("ad.conv2d", lambda r: (img(r), ker(r), r.standard_normal(3)), ad.conv2d, rng),
        _op_check("ad.conv2d_stride2", lambda r: (img(r), ker(r), r.standard_normal(3)),
                  lambda x, w, b: ad.conv2d(x, w, b, stride=2), rng),
        _op_check("ad.conv2d_1x1", lambda r: (img(r), ker(r, k=1)), ad.conv2d, rng),
        _op_check("ad.gaussian_sample", lambda r: (sq(r), sq(r) * 0.5),
                  lambda m, lv: ad.gaussian_sample(m, lv, np.random.default_rng(7).standard_normal((N, N))), rng),
        _op_check("ad.dropout", lambda r: (sq(r),),
                  lambda a: ad.dropout(a, 0.3, np.random.default_rng(11)), rng),
        _op_check("ad.custom_warp",
                  lambda r: (r.uniform(-3, 3, (1, 2, N, N)), r.uniform(0.5, 1, (1, N, N)), r.uniform(0, 2, (1, N, N))),
                  warp_tensor, rng,
                  smooth=_custom_warp_keep),
    ]
    return out


# --- losses -----------------------------------------------------------------


def check_ved_loss(rng) -> CheckResult:
    acc = _Accumulator("loss_ved")
    w = supervision.LossWeights(lambda_int=0.7, lambda_motion=0.2, lambda_cos=0.3, lambda_kl=0.1)
    for i in range(INSTANCES):
        order = ("posterior_prior", "prior_posterior")[i % 2]
        wi = supervision.LossWeights(w.lambda_int, w.lambda_motion, w.lambda_cos, w.lambda_kl, order)
        pm, tm = rng.standard_normal((2, 1, 2, N, N))
        pi, ti = rng.standard_normal((2, 1, N, N))
        mu, lv = rng.standard_normal((2, 1, 4, 4, 4)) * 0.5
        res = supervision.ved_loss_arrays(pm, pi, tm, ti, mu, lv, wi, crop_margin=2)
        f = lambda: supervision.ved_loss_arrays(pm, pi, tm, ti, mu, lv, wi, crop_margin=2).value
        acc.add(res.grads["motion"], numeric_grad(f, pm, np.abs(pm - tm) > KINK), np.abs(pm - tm) > KINK)
        acc.add(res.grads["intensity"], numeric_grad(f, pi, np.abs(pi - ti) > KINK), np.abs(pi - ti) > KINK)
        acc.add(res.grads["mu"], numeric_grad(f, mu))
        acc.add(res.grads["log_var"], numeric_grad(f, lv))
    return acc.result()


def check_evolver_loss(rng) -> CheckResult:
    acc = _Accumulator("loss_evolver")
    for _ in range(INSTANCES):
        u, v, s, prev = _warp_instance(rng)
        nxt = rng.uniform(0, 2, (N, N))
        pm = np.stack([u, v])
        res = supervision.evolver_loss_arrays(pm, s, prev, nxt, crop_margin=2)
        f = lambda: supervision.evolver_loss_arrays(pm, s, prev, nxt, crop_margin=2).value
        out = advection.warp_arrays(pm[0], pm[1], s, prev)
        keep = ~warp_kinks(pm[0], pm[1], s, prev) & (np.abs(out - nxt) > KINK)
        acc.add(res.grads["motion"], numeric_grad(f, pm, np.stack([keep, keep])), np.stack([keep, keep]))
        acc.add(res.grads["intensity"], numeric_grad(f, s, keep), keep)
    return acc.result()


# --- end-to-end probe -------------------------------------------------------


def check_end_to_end(rng, probes: int = 5) -> CheckResult:
    """Evolver loss through evolver, decoder and warp vs. finite differences
    on a handful of evolver parameter entries."""
    cfg = ModelConfig(context_frames=2, horizon=4, channels=4, embed_dim=2, reduc_factor=2,
                      dropout=0.0, evolver_depth=1, evolver_dim=4, lead_time_classes=4)
    params = {k: v.astype(np.float64) for k, v in init_params(cfg, int(rng.integers(1 << 30))).items()}
    # move the zero-initialised heads off zero so every path carries gradient
    for k in ("dec.out.w", "evo.proj.w"):
        params[k] = rng.standard_normal(params[k].shape) * 0.3
    params["norm.flow"] = np.array([0.5, -0.3, 1.0])
    latent = rng.standard_normal((2, cfg.embed_dim, N // 2, N // 2))
    prev = rng.uniform(0, 2, (2, N, N))
    nxt = rng.uniform(0, 2, (2, N, N))
    leads = np.array([2, 4])
    mask = supervision.crop_mask(N, 2)

    def loss_value(P):
        lk = evolve_tensors(P, ad.Tensor(latent), leads, cfg)
        m, s = decode_tensors(P, lk, cfg)
        return ad.l1_distance(warp_tensor(m, s, prev), ad.Tensor(nxt), mask)

    names = [k for k in params if k.startswith("evo.")]
    P = tensors(params, trainable=names)
    with ad.Tape():
        loss = loss_value(P)
    ad.backward(loss)
    acc = _Accumulator("end_to_end", PROBE_TOL)
    for name in (names[i] for i in rng.permutation(len(names))[:probes]):
        arr = params[name]
        j = int(rng.integers(arr.size))
        keep = np.zeros(arr.shape, bool)
        keep.reshape(-1)[j] = True
        f = lambda: float(loss_value(tensors(params)).data)
        acc.add(P[name].grad, numeric_grad(f, arr, keep), keep)
    return acc.result()


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [check_warp(rng)]
    results += autodiff_checks(rng)
    results += [check_ved_loss(rng), check_evolver_loss(rng), check_end_to_end(rng)]
    return results
