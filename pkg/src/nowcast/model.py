"""Toy-scale motion/intensity nowcaster.

A variational encoder-decoder maps the context frames to a Gaussian latent
grid and decodes it into a motion field and an intensity correction. A
lead-time-conditioned evolver maps the first latent L1 to the latent of
any later lead k with one parameter set; its trunk is a stack of
conv/channel-mix residual blocks standing in for attention blocks at this
scale. Frames are produced by warping the previous frame with the decoded
fields.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .advection import warp_arrays, warp_vjp_arrays
from .fields import FieldSequence, IntensityField, MotionField, PrecipField

WEIGHTS_MAGIC = b"TPNW"
WEIGHTS_VERSION = 1


class WeightsError(ValueError):
    """Malformed TPNW bytes."""


class WeightsMismatch(WeightsError):
    """Well-formed weights that do not fit the requested configuration."""


@dataclass(frozen=True)
class ModelConfig:
    context_frames: int = 4
    horizon: int = 18
    channels: int = 128
    embed_dim: int = 4
    reduc_factor: int = 4
    dropout: float = 0.2
    evolver_depth: int = 4
    evolver_dim: int = 64
    lead_time_classes: int = 18
    logvar_init: float = -6.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.reduc_factor not in (2, 4, 8):
            raise ValueError("reduc_factor must be 2, 4 or 8")
        if self.context_frames < 1 or self.channels < 1 or self.embed_dim < 1:
            raise ValueError("context_frames, channels and embed_dim must be positive")
        if self.lead_time_classes < self.horizon:
            raise ValueError("lead_time_classes must cover the horizon")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def stages(self) -> int:
        return int(np.log2(self.reduc_factor))

    def check_grid(self, n: int):
        if n % self.reduc_factor:
            raise ValueError(f"reduc_factor {self.reduc_factor} does not divide n={n}")


@dataclass
class LatentState:
    mu: np.ndarray
    log_var: np.ndarray
    sample: np.ndarray

    def __post_init__(self):
        if not (self.mu.shape == self.log_var.shape == self.sample.shape):
            raise ValueError("latent mu/log_var/sample must share a shape")

    @property
    def embed_dim(self) -> int:
        return self.mu.shape[-3]

    @property
    def side(self) -> int:
        return self.mu.shape[-1]


# --- parameters -------------------------------------------------------------

VED_PREFIXES = ("enc.", "dec.")
EVOLVER_PREFIX = "evo."
NORM_KEYS = ("norm.input", "norm.flow", "norm.intensity")


def _conv_init(rng, out_c, in_c, k, gain=2.0):
    std = np.sqrt(gain / (in_c * k * k))
    return (rng.standard_normal((out_c, in_c, k, k)) * std).astype(np.float32)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh parameters. The decoder output layer and evolver projection
    start at zero, so an untrained model predicts zero motion and intensity
    and the evolver starts as the identity map on L1."""
    rng = np.random.default_rng(seed)
    ch, e, d = cfg.channels, cfg.embed_dim, cfg.evolver_dim
    z = lambda *s: np.zeros(s, dtype=np.float32)
    p: dict[str, np.ndarray] = {}
    p["enc.in.w"], p["enc.in.b"] = _conv_init(rng, ch, cfg.context_frames, 3), z(ch)
    for i in range(cfg.stages):
        p[f"enc.down{i}.w"], p[f"enc.down{i}.b"] = _conv_init(rng, ch, ch, 3), z(ch)
    p["enc.mu.w"], p["enc.mu.b"] = _conv_init(rng, e, ch, 3, gain=1.0), z(e)
    p["enc.logvar.w"] = (_conv_init(rng, e, ch, 3, gain=1.0) * 0.01).astype(np.float32)
    p["enc.logvar.b"] = np.full(e, cfg.logvar_init, dtype=np.float32)
    p["dec.in.w"], p["dec.in.b"] = _conv_init(rng, ch, e, 3), z(ch)
    for i in range(cfg.stages):
        p[f"dec.up{i}.w"], p[f"dec.up{i}.b"] = _conv_init(rng, ch, ch, 3), z(ch)
    p["dec.out.w"], p["dec.out.b"] = z(3, ch, 3, 3), z(3)
    p["evo.embed.w"] = (rng.standard_normal((cfg.lead_time_classes, d)) * 0.1).astype(np.float32)
    p["evo.embed.b"] = z(d)
    p["evo.lift.w"], p["evo.lift.b"] = _conv_init(rng, d, e, 1, gain=1.0), z(d)
    for i in range(cfg.evolver_depth):
        p[f"evo.block{i}.conv.w"], p[f"evo.block{i}.conv.b"] = _conv_init(rng, d, d, 3), z(d)
        p[f"evo.block{i}.mix.w"] = (_conv_init(rng, d, d, 1, gain=1.0) * 0.1).astype(np.float32)
        p[f"evo.block{i}.mix.b"] = z(d)
    p["evo.proj.w"], p["evo.proj.b"] = z(e, d, 1, 1), z(e)
    # affine normalisation: input (offset, scale); flow (offset_u, offset_v, scale); intensity (scale)
    p["norm.input"] = np.array([0.0, 1.0], dtype=np.float32)
    p["norm.flow"] = np.array([0.0, 0.0, 1.0], dtype=np.float32)
    p["norm.intensity"] = np.array([1.0], dtype=np.float32)
    return p


def ved_names(params) -> list[str]:
    return [k for k in params if k.startswith(VED_PREFIXES)]


def evolver_names(params) -> list[str]:
    return [k for k in params if k.startswith(EVOLVER_PREFIX)]


# --- forward passes on tensors -----------------------------------------------


def encode_tensors(P: dict, x: ad.Tensor, cfg: ModelConfig, noise=None, rng=None):
    """x: (B, T+1, n, n) raw rain rates. Returns (mu, log_var, sample) tensors."""
    off, scale = (float(v) for v in P["norm.input"].data)
    h = ad.mul(ad.sub(x, off), 1.0 / scale)
    h = ad.relu(ad.conv2d(h, P["enc.in.w"], P["enc.in.b"]))
    h = ad.dropout(h, cfg.dropout, rng)
    for i in range(cfg.stages):
        h = ad.relu(ad.conv2d(h, P[f"enc.down{i}.w"], P[f"enc.down{i}.b"], stride=2))
        h = ad.dropout(h, cfg.dropout, rng)
    mu = ad.conv2d(h, P["enc.mu.w"], P["enc.mu.b"])
    log_var = ad.conv2d(h, P["enc.logvar.w"], P["enc.logvar.b"])
    if noise is None:
        noise = np.zeros(mu.shape, dtype=mu.dtype)
    return mu, log_var, ad.gaussian_sample(mu, log_var, noise)


def decode_tensors(P: dict, latent: ad.Tensor, cfg: ModelConfig):
    """latent (B, E, m, m) -> (motion (B, 2, n, n), intensity (B, n, n))."""
    h = ad.relu(ad.conv2d(latent, P["dec.in.w"], P["dec.in.b"]))
    for i in range(cfg.stages):
        h = ad.relu(ad.conv2d(ad.upsample2x(h), P[f"dec.up{i}.w"], P[f"dec.up{i}.b"]))
    out = ad.conv2d(h, P["dec.out.w"], P["dec.out.b"])
    fu, fv, fscale = (float(v) for v in P["norm.flow"].data)
    iscale = float(P["norm.intensity"].data[0])
    b, _, n, _ = out.shape
    offset = np.array([fu, fv], dtype=out.dtype).reshape(1, 2, 1, 1)
    motion = ad.add(ad.mul(ad.take(out, np.s_[:, 0:2]), fscale), offset)
    intensity = ad.reshape(ad.mul(ad.take(out, np.s_[:, 2:3]), iscale), (b, n, n))
    return motion, intensity


def one_hot(leads, classes: int, dtype=np.float32) -> np.ndarray:
    leads = np.atleast_1d(np.asarray(leads, dtype=np.int64))
    if np.any(leads < 1) or np.any(leads > classes):
        raise ValueError(f"lead index out of range 1..{classes}: {leads}")
    out = np.zeros((leads.size, classes), dtype=dtype)
    out[np.arange(leads.size), leads - 1] = 1
    return out


def evolve_tensors(P: dict, latent1: ad.Tensor, leads, cfg: ModelConfig) -> ad.Tensor:
    """L_k = L_1 + f(L_1 + embed(one_hot(k))); one network for every lead."""
    leads = np.atleast_1d(leads)
    if np.any(leads < 2) or np.any(leads > cfg.horizon):
        raise ValueError(f"evolver lead must be in 2..{cfg.horizon}, got {leads}")
    b = latent1.shape[0]
    if leads.size == 1 and b > 1:
        leads = np.repeat(leads, b)
    emb = ad.add(ad.matmul(ad.Tensor(one_hot(leads, cfg.lead_time_classes, latent1.dtype)),
                           P["evo.embed.w"]), P["evo.embed.b"])
    h = ad.conv2d(latent1, P["evo.lift.w"], P["evo.lift.b"])
    h = ad.add(h, ad.reshape(emb, (b, cfg.evolver_dim, 1, 1)))
    for i in range(cfg.evolver_depth):
        a = ad.relu(ad.conv2d(h, P[f"evo.block{i}.conv.w"], P[f"evo.block{i}.conv.b"]))
        h = ad.add(h, ad.conv2d(a, P[f"evo.block{i}.mix.w"], P[f"evo.block{i}.mix.b"]))
    return ad.add(latent1, ad.conv2d(h, P["evo.proj.w"], P["evo.proj.b"]))


def warp_tensor(motion: ad.Tensor, intensity: ad.Tensor, frame) -> ad.Tensor:
    """The advection warp as a tape node, delegating to the array-level VJP."""
    frame_t = frame if isinstance(frame, ad.Tensor) else ad.Tensor(np.asarray(frame), dtype=motion.dtype)

    def fwd(m, s, x):
        m64 = m.astype(np.float64)
        return warp_arrays(m64[:, 0], m64[:, 1], s, x), (m64, s, x)

    def vjp(g, ctx):
        m64, s, x = ctx
        gu, gv, gs, gx = warp_vjp_arrays(g, m64[:, 0], m64[:, 1], s, x)
        return np.stack([gu, gv], axis=1), gs, gx

    return ad.custom("warp", (motion, intensity, frame_t), fwd, vjp)


def tensors(params: dict[str, np.ndarray], trainable=()) -> dict[str, ad.Tensor]:
    trainable = set(trainable)
    return {k: ad.Tensor(v, requires_grad=k in trainable, name=k) for k, v in params.items()}


# --- field-level API --------------------------------------------------------


def _context_array(frames, cfg: ModelConfig) -> np.ndarray:
    arr = frames.to_array() if isinstance(frames, FieldSequence) else np.asarray(frames, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[1] != cfg.context_frames:
        raise ValueError(f"model expects {cfg.context_frames} context frames, got {arr.shape[1]}")
    cfg.check_grid(arr.shape[-1])
    return arr.astype(np.float32)


def ved_encode(params, frames, cfg: ModelConfig, noise=None) -> LatentState:
    x = _context_array(frames, cfg)
    P = tensors(params)
    mu, lv, sample = encode_tensors(P, ad.Tensor(x), cfg, noise=noise)
    squeeze = isinstance(frames, FieldSequence)
    pick = (lambda t: t.data[0]) if squeeze else (lambda t: t.data)
    return LatentState(pick(mu), pick(lv), pick(sample))


def ved_decode(params, latent: LatentState, cfg: ModelConfig):
    sample = latent.sample
    single = sample.ndim == 3
    P = tensors(params)
    m, s = decode_tensors(P, ad.Tensor(sample[None] if single else sample), cfg)
    if single:
        return MotionField(m.data[0, 0], m.data[0, 1]), IntensityField(s.data[0])
    return m.data, s.data


def evolve(params, latent1: LatentState, k: int, cfg: ModelConfig) -> LatentState:
    if not 2 <= k <= cfg.horizon:
        raise ValueError(f"lead k={k} outside 2..{cfg.horizon}")
    single = latent1.mu.ndim == 3
    base = latent1.mu[None] if single else latent1.mu
    out = evolve_tensors(tensors(params), ad.Tensor(base), k, cfg).data
    out = out[0] if single else out
    return LatentState(out, latent1.log_var, out)


@dataclass
class Nowcast:
    frames: list[PrecipField]
    motions: list[MotionField]
    intensities: list[IntensityField]


def nowcast(params, frames: FieldSequence, cfg: ModelConfig) -> Nowcast:
    """Recursive rollout: each lead warps the previous *predicted* frame."""
    if params is None:
        raise WeightsMismatch("no trained weights loaded")
    check_params(params, cfg)
    latent1 = ved_encode(params, frames, cfg)
    prev = frames[-1].values.astype(np.float64)
    t0, step = frames[-1].timestamp, frames.step_seconds
    out = Nowcast([], [], [])
    for k in range(1, cfg.horizon + 1):
        latent = latent1 if k == 1 else evolve(params, latent1, k, cfg)
        motion, intensity = ved_decode(params, latent, cfg)
        prev = warp_arrays(motion.u, motion.v, intensity.values, prev)
        out.frames.append(PrecipField(prev, t0 + k * step))
        out.motions.append(motion)
        out.intensities.append(intensity)
    return out


def check_params(params, cfg: ModelConfig) -> None:
    ref = init_params(cfg)
    for k, v in ref.items():
        if k not in params:
            raise WeightsMismatch(f"weights missing parameter {k}")
        if params[k].shape != v.shape:
            raise WeightsMismatch(f"parameter {k}: shape {params[k].shape} != config {v.shape}")


# --- TPNW weight container --------------------------------------------------
# "TPNW" | u32 version | u32 config length | config (utf-8 key=value lines)
# | u32 parameter count | per parameter: u16 name length, name (utf-8),
# u8 ndim, ndim x u32 dims, float32 LE data


def config_text(cfg: ModelConfig) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)!r}\n" for f in fields(cfg))


def parse_config_text(text: str) -> ModelConfig:
    kinds = {f.name: f.type for f in fields(ModelConfig)}
    kw = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key not in kinds:
            raise WeightsError(f"unknown model config key {key!r}")
        kw[key] = float(value) if kinds[key] in ("float", float) else int(value)
    return ModelConfig(**kw)


def encode_weights(params: dict[str, np.ndarray], cfg: ModelConfig) -> bytes:
    text = config_text(cfg).encode()
    parts = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(text)), text,
             struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_weights(buf: bytes):
    def need(pos, size, what):
        if pos + size > len(buf):
            raise WeightsError(f"truncated {what} at byte offset {pos}")

    need(0, 4, "magic")
    if buf[:4] != WEIGHTS_MAGIC:
        raise WeightsError(f"bad magic {buf[:4]!r} at byte offset 0")
    need(4, 8, "header")
    version, clen = struct.unpack_from("<II", buf, 4)
    if version != WEIGHTS_VERSION:
        raise WeightsError(f"unsupported weights version {version} at byte offset 4")
    need(12, clen + 4, "config")
    cfg = parse_config_text(buf[12:12 + clen].decode())
    pos = 12 + clen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = {}
    for _ in range(count):
        need(pos, 2, "parameter name")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, nlen + 1, "parameter name")
        name = buf[pos:pos + nlen].decode()
        ndim = buf[pos + nlen]
        pos += nlen + 1
        need(pos, 4 * ndim, f"shape of {name}")
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) * 4
        need(pos, size, f"data of {name}")
        params[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
    if pos != len(buf):
        raise WeightsError(f"{len(buf) - pos} trailing bytes at byte offset {pos}")
    return params, cfg


def save_weights(params, cfg: ModelConfig, path) -> None:
    Path(path).write_bytes(encode_weights(params, cfg))


def load_weights(path):
    return decode_weights(Path(path).read_bytes())
