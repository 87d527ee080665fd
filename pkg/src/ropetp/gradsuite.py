"""Finite-difference gradient checks over every differentiable op and both end-to-end losses.

Each case is a scalar function of one input array plus a generator of random
evaluation points. Element-wise and shape ops are contracted with a fixed
random weight so that every output coordinate contributes to the gradient.
"""
from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import body_model as bm
from . import camera, nn, rope_net, synth_data, traj_diffusion
from . import tensor as T
from .tensor import Tensor, grad_check


@dataclass
class GradCase:
    name: str
    fn: Callable[[Tensor], Tensor]
    point: Callable[[np.random.Generator], np.ndarray]
    max_coords: int | None = None   # check a random subset when the input is large


@dataclass
class GradReport:
    name: str
    max_error: float
    points: int
    kinks: int
    seconds: float

    def passed(self, tol: float) -> bool:
        return self.max_error < tol


def _tag(name: str) -> int:
    return zlib.crc32(name.encode())


def _contract(shape, seed):
    w = np.random.default_rng(seed).normal(size=shape)
    return lambda y: T.tsum(y * w)


def _unary(name, op, domain=(-2.0, 2.0), shape=(3, 4)):
    c = _contract(shape, _tag(name))
    return GradCase(name, lambda x: c(op(x)), lambda r: r.uniform(*domain, size=shape))


def _binary(name, op, shape_a, shape_b, out_shape, side, domain_b=(-2.0, 2.0)):
    rng = np.random.default_rng(_tag(name))
    other_a = rng.normal(size=shape_a)
    other_b = rng.uniform(*domain_b, size=shape_b)
    c = _contract(out_shape, _tag(name) + 1)
    if side == 0:
        return GradCase(name, lambda x: c(op(x, Tensor(other_b))), lambda r: r.normal(size=shape_a))
    return GradCase(name, lambda x: c(op(Tensor(other_a), x)), lambda r: r.uniform(*domain_b, size=shape_b))


def core_cases() -> list[GradCase]:
    s = (3, 4)
    cases = [
        _binary("add[a]", T.add, s, (4,), s, 0),
        _binary("add[b]", T.add, s, (4,), s, 1),
        _binary("sub[b]", T.sub, s, s, s, 1),
        _binary("mul[a]", T.mul, s, s, s, 0),
        _binary("mul[b]", T.mul, s, (1, 4), s, 1),
        _binary("div[a]", T.div, s, s, s, 0, domain_b=(0.5, 2.0)),
        _binary("div[b]", T.div, s, s, s, 1, domain_b=(0.5, 2.0)),
        _binary("matmul[a]", T.matmul, (2, 3, 4), (4, 5), (2, 3, 5), 0),
        _binary("matmul[b]", T.matmul, (2, 3, 4), (4, 5), (2, 3, 5), 1),
        _binary("matmul_batched[a]", T.matmul, (2, 3, 4), (2, 4, 5), (2, 3, 5), 0),
        _binary("matmul_batched[b]", T.matmul, (2, 3, 4), (2, 4, 5), (2, 3, 5), 1),
        _binary("cross3[a]", T.cross3, (4, 3), (4, 3), (4, 3), 0),
        _binary("cross3[b]", T.cross3, (4, 3), (4, 3), (4, 3), 1),
        _unary("scale", lambda x: T.scale(x, -1.7)),
        _unary("neg", T.neg),
        _unary("power", lambda x: T.power(x, 2.5), (0.5, 2.0)),
        _unary("exp", T.exp),
        _unary("log", T.log, (0.2, 3.0)),
        _unary("sqrt", T.sqrt, (0.2, 3.0)),
        _unary("tanh", T.tanh),
        _unary("sin", T.sin),
        _unary("cos", T.cos),
        _unary("relu", T.relu),
        _unary("gelu", T.gelu, (-4.0, 4.0)),
        GradCase("transpose", lambda x: _contract((4, 2, 3), 4)(T.transpose(x, (2, 0, 1))),
                 lambda r: r.normal(size=(2, 3, 4))),
        GradCase("reshape", lambda x: _contract((6, 2), 5)(T.reshape(x, (6, 2))), lambda r: r.normal(size=(3, 4))),
        GradCase("concat", lambda x: _contract((3, 7), 6)(T.concat([x, T.scale(x, 2.0)[:, :3]], axis=1)),
                 lambda r: r.normal(size=(3, 4))),
        GradCase("stack", lambda x: _contract((2, 3, 4), 7)(T.stack([x, T.sin(x)], axis=0)),
                 lambda r: r.normal(size=(3, 4))),
        GradCase("getitem", lambda x: _contract((5, 4), 8)(x[np.array([0, 2, 2, 1, 0])]),
                 lambda r: r.normal(size=(3, 4))),
        GradCase("slice_axis", lambda x: _contract((3, 2), 9)(T.slice_axis(x, 1, 3, axis=1)),
                 lambda r: r.normal(size=(3, 4))),
        GradCase("broadcast_to", lambda x: _contract((2, 3, 4), 10)(T.broadcast_to(x, (2, 3, 4))),
                 lambda r: r.normal(size=(3, 4))),
        GradCase("sum", lambda x: _contract((3,), 11)(T.tsum(x, axis=1)), lambda r: r.normal(size=(3, 4))),
        GradCase("mean", lambda x: _contract((4,), 12)(T.mean(x, axis=0)), lambda r: r.normal(size=(3, 4))),
        _unary("softmax", lambda x: T.softmax(x, axis=-1)),
        _unary("softmax_axis0", lambda x: T.softmax(x, axis=0)),
        _unary("log_softmax", lambda x: T.log_softmax(x, axis=-1)),
        _unary("layer_norm", lambda x: T.layer_norm(x, np.linspace(0.5, 1.5, 4), np.arange(4.0))),
        GradCase("norm", lambda x: _contract((3,), 13)(T.norm(x, axis=-1)), lambda r: r.normal(size=(3, 4))),
        GradCase("huber", lambda x: T.huber(x, 1.0), lambda r: r.normal(scale=1.5, size=(3, 4))),
        GradCase("cross_entropy", lambda x: T.cross_entropy(x, np.array([0, 3, 1]), axis=-1),
                 lambda r: r.normal(size=(3, 4))),
    ]
    return cases


def model_cases() -> list[GradCase]:
    body = bm.default_template()
    cases = []

    beta = np.random.default_rng(1).normal(size=10) * 0.5
    c_joints = _contract((24, 3), 20)
    cases.append(GradCase(
        "rot6d_to_rotmat", lambda x: _contract((5, 3, 3), 21)(bm.rot6d_to_rotmat(x)),
        lambda r: r.normal(size=(5, 6)),
    ))
    cases.append(GradCase(
        "body_forward[pose]", lambda x: c_joints(bm.body_forward(body, x, beta).joints),
        lambda r: bm.rotmat_to_rot6d(bm.axis_angle_to_rotmat(r.normal(scale=0.5, size=(24, 3)))) + r.normal(scale=0.05, size=(24, 6)),
        max_coords=24,
    ))
    pose = bm.rotmat_to_rot6d(bm.axis_angle_to_rotmat(np.random.default_rng(2).normal(scale=0.4, size=(24, 3))))
    cases.append(GradCase(
        "body_forward[betas]", lambda x: c_joints(bm.body_forward(body, pose, x).joints),
        lambda r: r.normal(size=10),
    ))
    pts = np.random.default_rng(3).normal(size=(6, 3))
    cases.append(GradCase("project[cam]", lambda x: _contract((6, 2), 22)(camera.project(pts, x)),
                          lambda r: np.array([r.uniform(0.3, 1.0), r.normal(), r.normal()])))
    cases.append(GradCase("project[points]", lambda x: _contract((6, 2), 23)(camera.project(x, np.array([0.7, 0.1, -0.2]))),
                          lambda r: r.normal(size=(6, 3))))
    V = np.random.default_rng(4).normal(size=(5, 4, 3))
    cases.append(GradCase("tokenize_hagt[att]", lambda x: _contract((2, 3), 24)(rope_net.tokenize_hagt(x, V)),
                          lambda r: r.normal(size=(5, 4, 2))))
    A = np.random.default_rng(5).normal(size=(5, 4, 2))
    cases.append(GradCase("tokenize_hagt[V]", lambda x: _contract((2, 3), 25)(rope_net.tokenize_hagt(A, x)),
                          lambda r: r.normal(size=(5, 4, 3))))
    kv = np.random.default_rng(6).normal(size=(2, 5, 4))
    cases.append(GradCase("attention[q]", lambda x: _contract((2, 3, 4), 26)(nn.attention(x, Tensor(kv), Tensor(kv))[0]),
                          lambda r: r.normal(size=(2, 3, 4))))
    q = np.random.default_rng(7).normal(size=(2, 3, 4))
    cases.append(GradCase("attention[k]", lambda x: _contract((2, 3, 4), 27)(nn.attention(Tensor(q), x, Tensor(kv))[0]),
                          lambda r: r.normal(size=(2, 5, 4))))
    return cases


def tiny_rope_setup(seed: int = 0):
    """A small Rope network and one 8x8 scene with 8 channels."""
    spec = synth_data.SceneSpec(height=8, width=8, channels=8, noise=0.05, seed=seed)
    rng = np.random.default_rng(seed)
    theta, beta, cam = synth_data.sample_body_params(rng)
    sample = synth_data.gen_feature_scene(spec, theta, beta, cam)
    cfg = rope_net.RopeConfig(channels=8, width=16, heads=2, ff=16, head_hidden=16)
    model = rope_net.RopeNet(cfg, seed=seed)
    return model, cfg, rope_net.RopeBatch.from_samples([sample])


def end_to_end_cases() -> list[GradCase]:
    model, cfg, batch = tiny_rope_setup()
    levels = list(batch.feats)
    sizes = [batch.feats[l].size for l in levels]
    shapes = [batch.feats[l].shape for l in levels]
    base = np.concatenate([batch.feats[l].ravel() for l in levels])

    def rope_fn(x):
        feats, off = {}, 0
        for l, n, sh in zip(levels, sizes, shapes):
            feats[l] = T.reshape(T.slice_axis(x, off, off + n, axis=0), sh)
            off += n
        return rope_net.rope_loss(model(feats), batch, epoch=0, cfg=cfg).total

    weight = model.icl.q["FulCo"].weight

    cases = [GradCase("rope_loss[features]", rope_fn, lambda r: base + r.normal(scale=0.05, size=base.shape), max_coords=12)]
    cases.append(_param_case("rope_loss[icl weight]", model, weight,
                             lambda: rope_net.rope_loss(model(batch.feats), batch, epoch=0, cfg=cfg).total))

    dcfg = traj_diffusion.DenoiserConfig(layers=2, heads=2, width=8)
    den = traj_diffusion.TrajDenoiser(dcfg, seed=0)
    seq, contacts = synth_data.gen_locomotion(synth_data.GaitSpec(n_frames=6))
    r0, _ = traj_diffusion.TrajNormalizer().forward(seq.r[None])
    p = seq.p[None]
    feet_local = p[:, :, list(bm.FOOT_JOINTS), :]
    sched = traj_diffusion.build_schedule(100)
    t = np.array([40])
    c = den.encode(p).data

    def traj_fn(x):
        x0 = den(x, t, c)
        return traj_diffusion.traj_loss(x0, r0, feet_local, contacts[None], lam_foot=0.1).total

    cases.append(GradCase(
        "traj_loss[r_t]", traj_fn,
        lambda r: traj_diffusion.q_sample(r0, t, r.standard_normal(r0.shape), sched), max_coords=12,
    ))
    cases.append(_param_case("traj_loss[fuse weight]", den, den.fuse.weight,
                             lambda: traj_diffusion.traj_loss(den(traj_diffusion.q_sample(r0, t, np.ones_like(r0) * 0.3, sched), t, den.encode(p)),
                                                              r0, feet_local, contacts[None]).total))
    return cases


def _param_case(name, model, weight: Tensor, loss_fn) -> GradCase:
    """Check d loss / d ``weight`` by temporarily substituting the probe tensor."""
    owner, attr = _find_owner(model, weight)
    base = weight.data.copy()

    def fn(x):
        setattr(owner, attr, x)
        try:
            return loss_fn()
        finally:
            setattr(owner, attr, weight)

    return GradCase(name, fn, lambda r: base + r.normal(scale=0.01, size=base.shape), max_coords=12)


def _find_owner(module, target):
    for v in vars(module).values():
        mods = []
        if isinstance(v, nn.Module):
            mods = [v]
        elif isinstance(v, (list, tuple)):
            mods = [m for m in v if isinstance(m, nn.Module)]
        elif isinstance(v, dict):
            mods = [m for m in v.values() if isinstance(m, nn.Module)]
        for m in mods:
            for k, val in vars(m).items():
                if val is target:
                    return m, k
            found = _find_owner(m, target)
            if found:
                return found
    return None


def all_cases() -> list[GradCase]:
    return core_cases() + model_cases() + end_to_end_cases()


def run_suite(cases=None, points: int = 10, seed: int = 0, step: float = 1e-6) -> list[GradReport]:
    cases = all_cases() if cases is None else cases
    reports = []
    for i, case in enumerate(cases):
        rng = np.random.default_rng([seed, i])
        worst, kinks = 0.0, 0
        t0 = time.perf_counter()
        for _ in range(points):
            x = case.point(rng)
            coords = None
            if case.max_coords is not None and x.size > case.max_coords:
                flat = rng.choice(x.size, size=case.max_coords, replace=False)
                coords = [np.unravel_index(k, x.shape) for k in flat]
            res = grad_check(case.fn, x, step=step, coords=coords)
            worst = max(worst, float(res))
            kinks += len(res.kinks)
        reports.append(GradReport(case.name, worst, points, kinks, time.perf_counter() - t0))
    return reports
