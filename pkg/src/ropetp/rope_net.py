"""Hierarchical part-attention regressor for body parameters.

Pipeline per batch of feature scenes:

1. A per-level 1x1 convolution turns V_x into J_x + 1 logits per pixel.
   Channel 0 is background; channels 1..J_x are the part attention maps.
2. HAGT pools V_x into one token per part with a spatial softmax of each
   part channel.
3. ISL concatenates the whole-body token onto every part token, projects to
   width 128 and runs two self-attention blocks per level.
4. ICL expands the Inter and FulCo tokens to 24 joint rows and runs three
   rotated cross-attentions (FulCo queries Inter keys over Indep values, and
   so on around the cycle).
5. The head concatenates the three attended rows per joint and regresses a
   rot6d rotation per joint, plus camera and shape from the joint-mean.

There are no learned per-joint embeddings, so the per-joint path is
equivariant to a consistent relabelling of joints.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import body_model as bm
from . import nn
from . import tensor as T
from .camera import project
from .hierarchy import LEVELS, PART_COUNTS, PartitionTable, default_partition, expand_to_joints
from .synth_data import apply_occluder
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
CAM_PRIOR = np.array([0.43, 0.5, 0.113])   # centred camera used by the synthetic scenes
TOKEN_LEVELS = ("Indep", "Inter", "FulCo")


@dataclass
class RopeConfig:
    channels: int = 64
    width: int = 128
    heads: int = 4
    ff: int = 256
    head_hidden: int = 256
    isl_layers: int = 2
    att_drop_epoch: int = 10
    att_init: float = 16.0   # init scale of the part-attention conv; sharp logits break joint symmetry
    w_smpl: float = 1.0
    w_3d: float = 1.0
    w_2d: float = 1.0
    w_att: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RopeOutput:
    theta: Tensor             # (B, 24, 6)
    beta: Tensor              # (B, 10)
    cam: Tensor               # (B, 3)
    att_logits: dict          # level -> (B, H, W, J_x + 1)
    icl_weights: dict = field(default_factory=dict)


# ---------------------------------------------------------------- HAGT

def tokenize_hagt(att, V):
    """Part tokens from attention logits (..., H, W, J) and features (..., H, W, C) -> (..., J, C).

    Each part channel is softmaxed over the H*W positions and used to average V.
    """
    if tuple(att.shape[-3:-1]) != tuple(V.shape[-3:-1]) or tuple(att.shape[:-3]) != tuple(V.shape[:-3]):
        raise T.ShapeError(f"attention {tuple(att.shape)} and features {tuple(V.shape)} do not conform")
    if not isinstance(att, Tensor) and not isinstance(V, Tensor):
        a = np.asarray(att, dtype=np.float64)
        v = np.asarray(V, dtype=np.float64)
        lead, (H, W, J) = a.shape[:-3], a.shape[-3:]
        a = a.reshape(*lead, H * W, J)
        a = np.exp(a - a.max(axis=-2, keepdims=True))
        a /= a.sum(axis=-2, keepdims=True)
        return np.swapaxes(a, -1, -2) @ v.reshape(*lead, H * W, v.shape[-1])
    att, V = T.as_tensor(att), T.as_tensor(V)
    *lead, H, W, J = att.shape
    C = V.shape[-1]
    w = T.softmax(att.reshape(*lead, H * W, J), axis=-2)
    return T.matmul(T.transpose(w, (*range(len(lead)), len(lead) + 1, len(lead))), V.reshape(*lead, H * W, C))


class PartAttention(nn.Module):
    """1x1 convolution from features to background + part logits.

    With a standard init the logits are nearly flat, so every part token starts
    as the same spatial mean and the joints cannot be told apart. A large
    ``init_scale`` gives sharp, distinct initial maps.
    """

    def __init__(self, channels: int, parts: int, rng, init_scale: float = 1.0):
        self.conv = nn.Linear(channels, parts + 1, rng, init_scale=init_scale)

    def forward(self, V):
        return self.conv(V)


# ---------------------------------------------------------------- ISL / ICL

class ISLLevel(nn.Module):
    def __init__(self, channels: int, cfg: RopeConfig, rng):
        self.proj = nn.Linear(2 * channels, cfg.width, rng)
        self.blocks = [nn.EncoderBlock(cfg.width, cfg.heads, cfg.ff, rng) for _ in range(cfg.isl_layers)]

    def forward(self, tokens, whobo):
        tokens, whobo = T.as_tensor(tokens), T.as_tensor(whobo)
        ref = T.broadcast_to(whobo, (*tokens.shape[:-1], whobo.shape[-1]))
        h = self.proj(T.concat([tokens, ref], axis=-1))
        for blk in self.blocks:
            h = blk(h)
        return h


class ISL(nn.Module):
    """Self-attention refinement of each level's tokens, sharing the whole-body token."""

    def __init__(self, channels: int, cfg: RopeConfig, rng):
        self.levels = {lvl: ISLLevel(channels, cfg, rng) for lvl in TOKEN_LEVELS}

    def forward(self, tokens: dict, whobo) -> dict:
        """``whobo`` is the (..., 1, C) whole-body token."""
        if whobo is None:
            raise ValueError("ISL needs the whole-body token")
        return {lvl: self.levels[lvl](tokens[lvl], whobo) for lvl in TOKEN_LEVELS}


class ICL(nn.Module):
    """Rotated cross-attention across the three part levels at joint resolution."""

    # output level -> (query level, key level); values come from the output level
    PAIRING = {"Indep": ("FulCo", "Inter"), "Inter": ("Indep", "FulCo"), "FulCo": ("Inter", "Indep")}

    def __init__(self, width: int, rng, d_k: int = 128, d_v: int = 128):
        self.d_k = d_k
        self.q = {lvl: nn.Linear(width, d_k, rng) for lvl in TOKEN_LEVELS}
        self.k = {lvl: nn.Linear(width, d_k, rng) for lvl in TOKEN_LEVELS}
        self.v = {lvl: nn.Linear(width, d_v, rng) for lvl in TOKEN_LEVELS}
        self.last_weights: dict[str, np.ndarray] = {}

    def forward(self, feats: dict, table: PartitionTable) -> dict:
        rows = {
            "Indep": T.as_tensor(feats["Indep"]),
            "Inter": expand_to_joints(T.as_tensor(feats["Inter"]), "Inter", table),
            "FulCo": expand_to_joints(T.as_tensor(feats["FulCo"]), "FulCo", table),
        }
        out = {}
        for lvl, (ql, kl) in self.PAIRING.items():
            ctx, w = nn.attention(self.q[ql](rows[ql]), self.k[kl](rows[kl]), self.v[lvl](rows[lvl]))
            self.last_weights[lvl] = w.data
            out[lvl] = ctx
        return out


# ---------------------------------------------------------------- regression head

class ParamHead(nn.Module):
    def __init__(self, d_mix: int, hidden: int, rng):
        self.ln = nn.LayerNorm(d_mix)
        self.pose = nn.MLP(d_mix, hidden, 6, rng)
        self.cam = nn.MLP(d_mix, hidden, 3, rng)
        self.shape = nn.MLP(d_mix, hidden, bm.NUM_BETAS, rng)
        for mlp, bias in ((self.pose, IDENTITY_6D), (self.cam, CAM_PRIOR)):
            mlp.fc2.weight.data *= 0.1
            mlp.fc2.bias.data = bias.copy()
        self.shape.fc2.weight.data *= 0.1

    def forward(self, mix):
        h = self.ln(mix)
        theta = self.pose(h)
        pooled = T.mean(h, axis=-2)
        return theta, self.cam(pooled), self.shape(pooled)


def regress_params(attended: dict, head: ParamHead):
    """(theta (..., 24, 6), cam (..., 3), beta (..., 10)) from the three attended 24-row matrices."""
    shapes = {tuple(T.as_tensor(attended[l]).shape[:-1]) for l in TOKEN_LEVELS}
    if len(shapes) != 1 or next(iter(shapes))[-1] != bm.NUM_JOINTS:
        raise T.ShapeError(f"attended rows must share a (..., 24) prefix, got {sorted(shapes)}")
    mix = T.concat([T.as_tensor(attended[l]) for l in TOKEN_LEVELS], axis=-1)
    return head(mix)


# ---------------------------------------------------------------- networks

def _stack_level(scenes, level: str) -> np.ndarray:
    return np.stack([s.features[level] for s in scenes])


class RopeNet(nn.Module):
    """Full model: per-level attention, HAGT, ISL, ICL and the parameter head."""

    levels = LEVELS

    def __init__(self, cfg: RopeConfig | None = None, table: PartitionTable | None = None, seed: int = 0):
        self.cfg = cfg = cfg or RopeConfig()
        self.table = table or default_partition()
        rng = np.random.default_rng(seed)
        self.att = {lvl: PartAttention(cfg.channels, PART_COUNTS[lvl], rng, cfg.att_init) for lvl in LEVELS}
        self.isl = ISL(cfg.channels, cfg, rng)
        self.icl = ICL(cfg.width, rng, d_k=cfg.width, d_v=cfg.width)
        self.head = ParamHead(3 * cfg.width, cfg.head_hidden, rng)

    def tokens(self, feats: dict):
        logits, tokens = {}, {}
        for lvl in LEVELS:
            V = T.as_tensor(feats[lvl])
            logits[lvl] = self.att[lvl](V)
            part_logits = T.slice_axis(logits[lvl], 1, PART_COUNTS[lvl] + 1)
            tokens[lvl] = tokenize_hagt(part_logits, V)
        return logits, tokens

    def from_tokens(self, tokens: dict, table: PartitionTable | None = None):
        table = table or self.table
        refined = self.isl(tokens, tokens["WhoBo"])
        attended = self.icl(refined, table)
        return regress_params(attended, self.head)

    def forward(self, feats: dict) -> RopeOutput:
        """``feats`` maps level -> (B, H, W, C) array or Tensor."""
        logits, tokens = self.tokens(feats)
        theta, cam, beta = self.from_tokens(tokens)
        return RopeOutput(theta, beta, cam, logits, dict(self.icl.last_weights))


class IndepOnlyNet(nn.Module):
    """Ablation: joint-level tokens only, each regressed independently (no ISL, ICL or WhoBo)."""

    levels = ("Indep",)

    def __init__(self, cfg: RopeConfig | None = None, table: PartitionTable | None = None, seed: int = 0):
        self.cfg = cfg = cfg or RopeConfig()
        self.table = table or default_partition()
        rng = np.random.default_rng(seed)
        self.att = {"Indep": PartAttention(cfg.channels, PART_COUNTS["Indep"], rng, cfg.att_init)}
        self.proj = nn.Linear(cfg.channels, cfg.width, rng)
        self.head = ParamHead(cfg.width, cfg.head_hidden, rng)

    def forward(self, feats: dict) -> RopeOutput:
        V = T.as_tensor(feats["Indep"])
        logits = self.att["Indep"](V)
        tok = tokenize_hagt(T.slice_axis(logits, 1, PART_COUNTS["Indep"] + 1), V)
        theta, cam, beta = self.head(self.proj(tok))
        return RopeOutput(theta, beta, cam, {"Indep": logits})


def make_model(kind: str, cfg: RopeConfig | None = None, table=None, seed: int = 0):
    if kind == "rope":
        return RopeNet(cfg, table, seed)
    if kind == "indep":
        return IndepOnlyNet(cfg, table, seed)
    raise ValueError(f"unknown model kind {kind!r}; use 'rope' or 'indep'")


# ---------------------------------------------------------------- loss

@dataclass
class RopeLoss:
    total: Tensor
    smpl: float
    j3d: float
    j2d: float
    att: float


@dataclass
class RopeBatch:
    feats: dict          # level -> (B, H, W, C)
    masks: dict          # level -> (B, H, W) int
    theta: np.ndarray
    beta: np.ndarray
    cam: np.ndarray
    j3d: np.ndarray
    j2d: np.ndarray

    @classmethod
    def from_samples(cls, samples, levels=LEVELS) -> "RopeBatch":
        return cls(
            feats={l: _stack_level([s.scene for s in samples], l) for l in levels},
            masks={l: np.stack([s.masks[l] for s in samples]) for l in levels},
            theta=np.stack([s.theta for s in samples]),
            beta=np.stack([s.beta for s in samples]),
            cam=np.stack([s.cam for s in samples]),
            j3d=np.stack([s.j3d for s in samples]),
            j2d=np.stack([s.j2d for s in samples]),
        )


def predict_joints(out: RopeOutput, body: bm.BodyTemplate | None = None):
    """3D joints from the predicted pose and shape, and their 2D projections."""
    body = body or bm.default_template()
    j3d = bm.body_forward(body, out.theta, out.beta).joints
    return j3d, project(j3d, out.cam)


def _sq_frob(d: Tensor) -> Tensor:
    """Squared Frobenius norm per sample, averaged over the batch."""
    flat = d.reshape(d.shape[0], -1)
    return T.mean(T.tsum(flat * flat, axis=-1))


def rope_loss(out: RopeOutput, batch: RopeBatch, epoch: int, cfg: RopeConfig | None = None,
              body: bm.BodyTemplate | None = None) -> RopeLoss:
    """L_SMPL + L_3D + L_2D + L_Att with per-term weights; L_Att is skipped from ``att_drop_epoch``."""
    cfg = cfg or RopeConfig()
    j3d, j2d = predict_joints(out, body)
    l_smpl = _sq_frob(out.theta - batch.theta) + _sq_frob(out.beta - batch.beta)
    l_3d = _sq_frob(j3d - batch.j3d)
    l_2d = _sq_frob(j2d - batch.j2d)
    total = T.scale(l_smpl, cfg.w_smpl) + T.scale(l_3d, cfg.w_3d) + T.scale(l_2d, cfg.w_2d)
    att_val = 0.0
    if epoch < cfg.att_drop_epoch and cfg.w_att:
        l_att = attention_loss(out.att_logits, batch.masks)
        att_val = float(l_att.data)
        total = total + T.scale(l_att, cfg.w_att)
    return RopeLoss(total, float(l_smpl.data), float(l_3d.data), float(l_2d.data), att_val)


def attention_loss(att_logits: dict, masks: dict) -> Tensor:
    """Per-pixel cross-entropy of the background+parts class softmax, averaged over levels."""
    terms = []
    for lvl, logits in att_logits.items():
        if lvl not in masks:
            raise ValueError(f"no segmentation mask for level {lvl}")
        m = np.asarray(masks[lvl])
        logits = T.as_tensor(logits)
        if m.shape != logits.shape[:-1]:
            raise T.ShapeError(f"{lvl} mask shape {m.shape} does not match logits {logits.shape}")
        if m.min() < 0 or m.max() > logits.shape[-1] - 1:
            raise ValueError(f"{lvl} mask labels outside 0..{logits.shape[-1] - 1}")
        terms.append(T.cross_entropy(logits, m, axis=-1))
    if not terms:
        raise ValueError("no attention levels to supervise")
    return T.scale(sum(terms[1:], terms[0]), 1.0 / len(terms))


# ---------------------------------------------------------------- training

@dataclass
class RopeTrainConfig:
    steps: int = 300
    batch: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    occlusion_aug: float = 0.0   # chance that a training scene gets a random quarter-area occluder
    model: str = "rope"
    seed: int = 0
    net: RopeConfig = field(default_factory=RopeConfig)

    def to_dict(self) -> dict:
        return asdict(self)


class DivergenceError(RuntimeError):
    pass


@dataclass
class RopeHistory:
    rows: list            # (step, total, smpl, 3d, 2d, att)

    @property
    def total(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def smoothed(self, alpha: float = 0.1) -> np.ndarray:
        """Exponential moving average followed by a running minimum (monotone non-increasing)."""
        tot = self.total
        if tot.size == 0:
            return tot
        ema = np.empty_like(tot)
        acc = tot[0]
        for i, v in enumerate(tot):
            acc = (1 - alpha) * acc + alpha * v
            ema[i] = acc
        return np.minimum.accumulate(ema)

    def to_csv(self) -> str:
        lines = ["step,total,L_SMPL,L_3D,L_2D,L_Att"]
        lines += [f"{s},{t!r},{a!r},{b!r},{c!r},{d!r}" for s, t, a, b, c, d in self.rows]
        return "\n".join(lines) + "\n"


def batch_indices(n: int, batch: int, step: int, seed: int) -> np.ndarray:
    """Sorted sample indices for ``step``; deterministic in (seed, step)."""
    rng = np.random.default_rng([seed, step])
    return np.sort(rng.choice(n, size=min(batch, n), replace=False))


def occlude_batch(samples, prob: float, seed: int, step: int):
    """Zero a random (H/2) x (W/2) block in each sample with probability ``prob``.

    Deterministic in (seed, step), so resumed runs see the same occluders.
    """
    if prob <= 0:
        return samples
    rng = np.random.default_rng([seed, step, 1])
    out = []
    for s in samples:
        H, W = s.scene.height, s.scene.width
        h, w = H // 2, W // 2
        r, c = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
        if rng.uniform() < prob:
            s = replace(s, scene=apply_occluder(s.scene, (r, c, r + h, c + w)))
        out.append(s)
    return out


def train_rope_toy(dataset, cfg: RopeTrainConfig | None = None, model=None, optimizer=None,
                   start_step: int = 0, body=None, callback=None):
    """Train on a list of SceneSamples; returns (model, optimizer, RopeHistory).

    An epoch is ``ceil(len(dataset) / batch)`` steps; the attention term is
    dropped from epoch ``net.att_drop_epoch`` onward.
    """
    cfg = cfg or RopeTrainConfig()
    if not dataset:
        raise ValueError("empty dataset")
    model = model or make_model(cfg.model, cfg.net, seed=cfg.seed)
    optimizer = optimizer or nn.make_optimizer(cfg.optimizer, model.parameters(), cfg.lr)
    per_epoch = -(-len(dataset) // cfg.batch)
    rows = []
    for step in range(start_step, cfg.steps):
        idx = batch_indices(len(dataset), cfg.batch, step, cfg.seed)
        picked = occlude_batch([dataset[i] for i in idx], cfg.occlusion_aug, cfg.seed, step)
        batch = RopeBatch.from_samples(picked, model.levels)
        try:
            out = model(batch.feats)
            loss = rope_loss(out, batch, step // per_epoch, cfg.net, body)
            val = float(loss.total.data)
        except T.NonFiniteError:
            val = float("nan")
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite loss at step {step}, batch indices {idx.tolist()}")
        model.zero_grad()
        T.backward(loss.total)
        optimizer.step()
        rows.append((step, val, loss.smpl, loss.j3d, loss.j2d, loss.att))
        if callback is not None:
            callback(step, loss)
        if step % 50 == 0:
            log.info("rope step %d loss %.5f", step, val)
    return model, optimizer, RopeHistory(rows)


def predict(model, scenes, body=None, batch: int = 64):
    """Evaluate without gradients; returns (theta, beta, cam, j3d) numpy arrays."""
    outs = []
    with no_grad():
        for i in range(0, len(scenes), batch):
            chunk = scenes[i:i + batch]
            feats = {l: _stack_level(chunk, l) for l in model.levels}
            out = model(feats)
            j3d, _ = predict_joints(out, body)
            outs.append((out.theta.data, out.beta.data, out.cam.data, j3d.data))
    return tuple(np.concatenate(parts) for parts in zip(*outs))
