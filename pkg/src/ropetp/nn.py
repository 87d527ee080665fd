"""Small layer library and optimizers on top of :mod:`ropetp.tensor`."""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_VERSION = 1


class Module:
    """Parameter container; attributes holding Tensors or Modules are discovered."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"checkpoint mismatch for {k}: expected shape {p.shape}, found {arr.shape}")
            p.data = arr.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, init_scale: float = 1.0):
        bound = init_scale / np.sqrt(d_in)
        self.weight = param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Two linear layers with a GELU between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the second-to-last axis."""
    d = q.shape[-1]
    w = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d)), axis=-1)
    return T.matmul(w, v), w


class MultiHeadSelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)
        self.last_weights: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(*lead, n, 3, h, d // h)
        nl = len(lead)
        # -> (3, *lead, h, n, d/h)
        qkv = T.transpose(qkv, (nl + 1, *range(nl), nl + 2, nl, nl + 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        ctx, w = attention(q, k, v)
        self.last_weights = w.data
        ctx = T.transpose(ctx, (*range(nl), nl + 1, nl, nl + 2)).reshape(*lead, n, d)
        return self.out(ctx)


class EncoderBlock(Module):
    """Post-norm transformer block: LN(x + MHSA(x)) then LN(x + FFN(x))."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.attn = MultiHeadSelfAttention(d, heads, rng)
        self.ln1 = LayerNorm(d)
        self.ff = MLP(d, d_ff, d, rng)
        self.ln2 = LayerNorm(d)

    def forward(self, x):
        x = self.ln1(x + self.attn(x))
        return self.ln2(x + self.ff(x))


class PreNormBlock(Module):
    """Pre-norm transformer block, used where depth makes post-norm brittle."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = MLP(d, d_ff, d, rng)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))


# ---------------------------------------------------------------- optimizers

class RMSProp:
    """Momentum-free adaptive step: divide by a running RMS of the gradient."""

    def __init__(self, params, lr: float = 1e-3, alpha: float = 0.99, eps: float = 1e-8, clip: float | None = 1.0):
        self.params = list(params)
        self.lr, self.alpha, self.eps, self.clip = lr, alpha, eps, clip
        self.sq = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        self.t += 1
        corr = 1.0 - self.alpha**self.t
        for p, g, s in zip(self.params, grads, self.sq):
            s *= self.alpha
            s += (1.0 - self.alpha) * g * g
            p.data = p.data - self.lr * g / (np.sqrt(s / corr) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        st = {f"sq.{i}": s.copy() for i, s in enumerate(self.sq)}
        st["t"] = np.array(self.t, dtype=np.float64)
        return st

    def load_state(self, st: dict[str, np.ndarray]) -> None:
        self.sq = [np.array(st[f"sq.{i}"], dtype=np.float64) for i in range(len(self.params))]
        self.t = int(np.asarray(st["t"]).item())


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = 1.0):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, betas[0], betas[1], eps, clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        st = {f"m.{i}": m.copy() for i, m in enumerate(self.m)}
        st.update({f"v.{i}": v.copy() for i, v in enumerate(self.v)})
        st["t"] = np.array(self.t, dtype=np.float64)
        return st

    def load_state(self, st: dict[str, np.ndarray]) -> None:
        n = len(self.params)
        self.m = [np.array(st[f"m.{i}"], dtype=np.float64) for i in range(n)]
        self.v = [np.array(st[f"v.{i}"], dtype=np.float64) for i in range(n)]
        self.t = int(np.asarray(st["t"]).item())


OPTIMIZERS = {"rmsprop": RMSProp, "adam": Adam}


def make_optimizer(kind: str, params, lr: float, **kw):
    try:
        cls = OPTIMIZERS[kind]
    except KeyError:
        raise ValueError(f"unknown optimizer {kind!r}") from None
    return cls(params, lr=lr, **kw)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: Module, meta: dict | None = None, optimizer=None) -> None:
    """Write weights (and optimizer state) as an .npz blob with a JSON shape manifest."""
    Path(path).write_bytes(checkpoint_bytes(model, meta, optimizer))


def checkpoint_bytes(model: Module, meta: dict | None = None, optimizer=None) -> bytes:
    state = model.state_dict()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "meta": meta or {},
    }
    arrays = {f"w/{k}": v for k, v in state.items()}
    if optimizer is not None:
        arrays.update({f"opt/{k}": v for k, v in optimizer.state().items()})
    arrays["manifest"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    return _npz_bytes(arrays)


def _npz_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    # fixed zip timestamps keep checkpoints byte-reproducible
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            item = io.BytesIO()
            np.lib.format.write_array(item, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), item.getvalue())
    return buf.getvalue()


def load_checkpoint(path, model: Module | None = None, optimizer=None) -> dict:
    with np.load(path) as z:
        manifest = json.loads(bytes(z["manifest"]).decode())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        weights = {k[2:]: z[k] for k in z.files if k.startswith("w/")}
        opt = {k[4:]: z[k] for k in z.files if k.startswith("opt/")}
    if model is not None:
        model.load_state_dict(weights)
    if optimizer is not None and opt:
        optimizer.load_state(opt)
    return {"manifest": manifest, "weights": weights, "optimizer": opt}
