"""Conditional diffusion prior over root trajectories.

The denoiser predicts the clean trajectory x0 directly; the noise estimate that
DDIM needs is recovered from it algebraically. Conditioning is the per-frame
root-relative joint positions, linearly encoded and concatenated per frame
with the embedded noisy trajectory.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from . import tensor as T
from .body_model import FOOT_JOINTS
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray       # T values, index t - 1
    alpha_bar: np.ndarray   # T + 1 values, alpha_bar[0] = 1

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep {t.tolist()} outside 1..{self.T}")


def build_schedule(T: int = 1000, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("need at least 2 diffusion steps")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T)
    elif kind == "cosine":
        s = 0.008
        x = np.arange(T + 1) / T
        f = np.cos((x + s) / (1 + s) * np.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; use 'linear' or 'cosine'")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(betas, alpha_bar)


def _ab(schedule: NoiseSchedule, t, like: np.ndarray) -> np.ndarray:
    a = schedule.alpha_bar[np.asarray(t)]
    return np.reshape(a, np.shape(a) + (1,) * (like.ndim - np.ndim(a)))


def q_sample(r0, t, eps, schedule: NoiseSchedule):
    """r_t = sqrt(ab_t) r0 + sqrt(1 - ab_t) eps; ``t`` is an int or a per-batch array."""
    schedule.check_t(t)
    r0 = np.asarray(r0, dtype=np.float64)
    ab = _ab(schedule, t, r0)
    return np.sqrt(ab) * r0 + np.sqrt(1.0 - ab) * np.asarray(eps)


def predict_x0(rt, t, eps_hat, schedule: NoiseSchedule):
    rt = np.asarray(rt, dtype=np.float64)
    ab = _ab(schedule, t, rt)
    return (rt - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def eps_from_x0(rt, t, x0_hat, schedule: NoiseSchedule):
    """Noise implied by an x0 estimate (inverse of :func:`predict_x0`)."""
    rt = np.asarray(rt, dtype=np.float64)
    ab = _ab(schedule, t, rt)
    return (rt - np.sqrt(ab) * np.asarray(x0_hat)) / np.sqrt(1.0 - ab)


def ddim_step(rt, t, t_prev, eps_hat, schedule: NoiseSchedule, sigma: float = 0.0, z=None):
    if np.any(np.asarray(t_prev) >= np.asarray(t)):
        raise ValueError("t_prev must be smaller than t")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    ab_prev = _ab(schedule, t_prev, np.asarray(rt))
    var = 1.0 - ab_prev - sigma**2
    if np.any(var < -1e-15):
        raise ValueError(f"sigma {sigma} too large for step {t}->{t_prev}: 1 - ab_prev - sigma^2 = {np.min(var):.3e}")
    x0 = predict_x0(rt, t, eps_hat, schedule)
    out = np.sqrt(ab_prev) * x0 + np.sqrt(np.maximum(var, 0.0)) * np.asarray(eps_hat)
    if sigma > 0:
        if z is None:
            raise ValueError("z is required when sigma > 0")
        out = out + sigma * np.asarray(z)
    return out


def ddpm_step(rt, t: int, eps_hat, schedule: NoiseSchedule, z):
    """Ancestral step with sigma_t^2 = beta_t."""
    schedule.check_t(t)
    b = schedule.beta(t)
    ab = schedule.alpha_bar[t]
    mean = (np.asarray(rt) - b / np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(1.0 - b)
    return mean + np.sqrt(b) * np.asarray(z)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced descending timesteps ending at T, e.g. T=1000, steps=100 -> 1000, 990, ..., 10."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in 1..{T}")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)
    return ts


# ---------------------------------------------------------------- network

@dataclass
class DenoiserConfig:
    layers: int = 12
    heads: int = 8
    width: int = 128
    ff_mult: int = 2
    skip: bool = True
    pos_enc: bool = True
    n_joints: int = 24
    concat: str = "feature"   # or "sequence": condition frames appended along time
    condition: bool = True    # False zeroes the pose condition (unconditional ablation)


    def __post_init__(self):
        if self.layers % 2:
            raise ValueError("layers must be even so skip connections pair up")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.concat not in ("feature", "sequence"):
            raise ValueError(f"concat must be 'feature' or 'sequence', got {self.concat!r}")


def sinusoidal(positions, dim: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freq = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = positions[..., None] * freq
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class ConditionEncoder(nn.Module):
    """Flatten each frame's joints and map them linearly to the model width."""

    def __init__(self, n_joints: int, width: int, rng):
        self.proj = nn.Linear(3 * n_joints, width, rng)

    def forward(self, p):
        p = T.as_tensor(p)
        *lead, n, j, _ = p.shape
        return self.proj(p.reshape(*lead, n, 3 * j))


class TrajDenoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        D = cfg.width
        self.encoder = ConditionEncoder(cfg.n_joints, D, rng)
        self.embed_r = nn.Linear(3, D, rng)
        self.fuse = nn.Linear((3 if cfg.concat == "feature" else 2) * D, D, rng)
        self.blocks = [nn.PreNormBlock(D, cfg.heads, cfg.ff_mult * D, rng) for _ in range(cfg.layers)]
        half = cfg.layers // 2
        self.skips = [nn.Linear(2 * D, D, rng) for _ in range(half)] if cfg.skip else []
        self.ln_out = nn.LayerNorm(D)
        self.head = nn.Linear(D, 3, rng, init_scale=0.1)

    def encode(self, p):
        if not self.cfg.condition:
            shape = np.shape(p)[:-2] + (self.cfg.width,)
            return Tensor(np.zeros(shape))
        return self.encoder(p)

    def forward(self, rt, t, c) -> Tensor:
        """x0 estimate for noisy trajectories ``rt`` (B, N, 3) at timesteps ``t`` (B,)."""
        rt = T.as_tensor(rt)
        c = T.as_tensor(c)
        B, N = rt.shape[0], rt.shape[1]
        D = self.cfg.width
        temb = np.broadcast_to(sinusoidal(np.asarray(t).reshape(B), D)[:, None, :], (B, N, D))
        if self.cfg.concat == "feature":
            h = self.fuse(T.concat([self.embed_r(rt), c, Tensor(temb)], axis=-1))
        else:
            h = T.concat([self.fuse(T.concat([self.embed_r(rt), Tensor(temb)], axis=-1)), c], axis=-2)
        if self.cfg.pos_enc:
            h = h + sinusoidal(np.arange(h.shape[-2]), D)
        half = self.cfg.layers // 2
        saved = []
        for i, blk in enumerate(self.blocks):
            if self.cfg.skip and i >= half:
                h = self.skips[i - half](T.concat([h, saved[self.cfg.layers - 1 - i]], axis=-1))
            h = blk(h)
            if i < half:
                saved.append(h)
        if self.cfg.concat == "sequence":
            h = T.slice_axis(h, 0, N, axis=-2)
        return self.head(self.ln_out(h))


# ---------------------------------------------------------------- data transforms

@dataclass(frozen=True)
class TrajNormalizer:
    """Anchor the first frame's ground position at the origin and rescale."""

    scale: float = 1.0

    def forward(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        anchor = np.zeros_like(r[..., :1, :])
        anchor[..., 0, 0] = r[..., 0, 0]
        anchor[..., 0, 2] = r[..., 0, 2]
        return (r - anchor) / self.scale, anchor

    def inverse(self, x: np.ndarray, anchor: np.ndarray | float = 0.0) -> np.ndarray:
        return x * self.scale + anchor


# ---------------------------------------------------------------- sampling

def sample(model: TrajDenoiser, p, steps: int = 100, schedule: NoiseSchedule | None = None,
           seed: int = 0, c=None, normalizer: TrajNormalizer | None = None, x0_fn=None) -> np.ndarray:
    """DDIM (sigma = 0) from seeded Gaussian noise, conditioned on joints ``p`` (B, N, 24, 3).

    Returns trajectories (B, N, 3) in the model's normalized frame scaled back by
    ``normalizer`` (anchored at the origin). ``x0_fn(rt, t) -> x0`` replaces the
    network, e.g. with an oracle.
    """
    schedule = schedule or build_schedule()
    p = None if p is None else np.asarray(p, dtype=np.float64)
    single = p is not None and p.ndim == 3
    if single:
        p = p[None]
    if c is None and x0_fn is None:
        with no_grad():
            c = model.encode(p).data
    B = p.shape[0] if p is not None else np.shape(c)[0]
    N = p.shape[1] if p is not None else np.shape(c)[1]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, N, 3))
    ts = ddim_timesteps(schedule.T, steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        tb = np.full(B, t)
        if x0_fn is not None:
            x0 = np.asarray(x0_fn(x, tb))
        else:
            with no_grad():
                x0 = model(x, tb, c).data
        if t_prev == 0:
            x = x0
            break
        eps = eps_from_x0(x, tb, x0, schedule)
        x = ddim_step(x, tb, np.full(B, t_prev), eps, schedule)
    out = x if normalizer is None else normalizer.inverse(x)
    return out[0] if single else out


# ---------------------------------------------------------------- losses

def foot_contacts(heights, v_thresh: float = 0.005) -> np.ndarray:
    """1 where the per-frame change of foot height is below ``v_thresh``: (N, F) -> (N-1, F)."""
    if v_thresh <= 0:
        raise ValueError("v_thresh must be positive")
    y = np.asarray(heights, dtype=np.float64)
    return (np.abs(np.diff(y, axis=-2)) < v_thresh).astype(np.int64)


def foot_slide_loss(feet: Tensor, contacts) -> Tensor:
    """(1/(N-1)) sum_i ||x_{i+1} - x_i|| f_i, averaged over feet and batch.

    ``feet`` is (..., N, F, 3) and ``contacts`` (..., N-1, F).
    """
    n = feet.shape[-3]
    d = T.slice_axis(feet, 1, n, axis=-3) - T.slice_axis(feet, 0, n - 1, axis=-3)
    gated = T.norm(d) * np.asarray(contacts, dtype=np.float64)
    return T.mean(T.tsum(gated, axis=-2), axis=None) * (1.0 / (n - 1))


@dataclass
class TrajLoss:
    total: Tensor
    simple: float
    foot: float


def traj_loss(x0_hat, r0, feet_local, contacts, lam_foot: float = 0.1, delta: float = 1.0,
              scale: float = 1.0, apply_to: str = "feet") -> TrajLoss:
    """Huber reconstruction plus contact-gated foot slide.

    ``feet_local`` holds foot joints relative to the root (..., N, F, 3) in meters;
    predicted feet are ``x0_hat * scale + feet_local``. With ``apply_to='root'``
    the slide term acts on the trajectory itself.
    """
    x0_hat = T.as_tensor(x0_hat)
    simple = T.huber(x0_hat - np.asarray(r0), delta)
    total = simple
    foot_val = 0.0
    if lam_foot:
        root_m = T.scale(x0_hat, scale)
        if apply_to == "feet":
            feet = T.reshape(root_m, (*root_m.shape[:-1], 1, 3)) + np.asarray(feet_local)
        elif apply_to == "root":
            feet = T.reshape(root_m, (*root_m.shape[:-1], 1, 3))
            contacts = np.asarray(contacts).max(axis=-1, keepdims=True)
        else:
            raise ValueError(f"apply_to must be 'feet' or 'root', got {apply_to!r}")
        lf = foot_slide_loss(feet, contacts)
        foot_val = float(lf.data)
        total = total + T.scale(lf, lam_foot)
    return TrajLoss(total, float(simple.data), foot_val)


# ---------------------------------------------------------------- training

@dataclass
class TrajTrainConfig:
    steps: int = 400
    batch: int = 32
    lr: float = 1e-3
    optimizer: str = "rmsprop"
    lam_foot: float = 0.1
    huber_delta: float = 1.0
    T: int = 1000
    schedule: str = "linear"
    traj_scale: float = 1.0
    v_thresh: float = 0.005
    contacts: str = "detect"   # or "dataset"
    foot_target: str = "feet"
    seed: int = 0
    model: DenoiserConfig = field(default_factory=DenoiserConfig)

    def to_dict(self) -> dict:
        return asdict(self)


class DivergenceError(RuntimeError):
    pass


def prepare_batch(seqs, normalizer: TrajNormalizer, v_thresh: float, contacts_mode: str):
    r = np.stack([s.r for s in seqs])
    p = np.stack([s.p for s in seqs])
    r0, _ = normalizer.forward(r)
    feet_local = p[:, :, list(FOOT_JOINTS), :]
    if contacts_mode == "dataset" and all(s.contacts is not None for s in seqs):
        f = np.stack([s.contacts for s in seqs])
    else:
        heights = feet_local[..., 1] + r[:, :, None, 1]
        f = foot_contacts(heights, v_thresh)
    return r0, p, feet_local, f


def train_denoiser(dataset, cfg: TrajTrainConfig, model: TrajDenoiser | None = None,
                   optimizer=None, start_step: int = 0, callback=None):
    """Gradient training of the x0 denoiser; returns (model, optimizer, history rows).

    History rows are (step, total, simple, foot). Deterministic for a fixed
    config seed, including when resumed from ``start_step`` with saved state.
    """
    schedule = build_schedule(cfg.T, cfg.schedule)
    model = model or TrajDenoiser(cfg.model, seed=cfg.seed)
    params = model.parameters()
    optimizer = optimizer or nn.make_optimizer(cfg.optimizer, params, cfg.lr)
    normalizer = TrajNormalizer(cfg.traj_scale)
    history = []
    n = len(dataset)
    for step in range(start_step, cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        idx = rng.choice(n, size=min(cfg.batch, n), replace=False)
        r0, p, feet_local, f = prepare_batch([dataset[i] for i in idx], normalizer, cfg.v_thresh, cfg.contacts)
        t = rng.integers(1, cfg.T + 1, size=len(idx))
        eps = rng.standard_normal(r0.shape)
        rt = q_sample(r0, t, eps, schedule)
        try:
            x0 = model(rt, t, model.encode(p))
            loss = traj_loss(x0, r0, feet_local, f, cfg.lam_foot, cfg.huber_delta, cfg.traj_scale, cfg.foot_target)
            val = float(loss.total.data)
        except T.NonFiniteError:
            val = float("nan")
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite loss at step {step} (batch indices {idx[:8].tolist()}...)")
        model.zero_grad()
        T.backward(loss.total)
        optimizer.step()
        history.append((step, val, loss.simple, loss.foot))
        if callback is not None:
            callback(step, loss)
        if step % 50 == 0:
            log.info("traj step %d loss %.5f (simple %.5f foot %.5f)", step, val, loss.simple, loss.foot)
    return model, optimizer, history
