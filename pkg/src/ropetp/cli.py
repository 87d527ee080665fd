"""Command-line harness: ``ropetp <command> --config run.toml --seed 0 --out runs/a``.

Commands are pure functions of (config, input files, seed). Every output
directory gets a ``manifest.json`` with the config hash and file digests; the
manifest is the only file carrying a timestamp.

Exit codes: 0 ok, 1 usage error, 2 validation failure or divergence.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import camera, gradsuite, metrics, nn, rope_net, synth_data, traj_diffusion
from .hierarchy import PartitionTable, default_partition

log = logging.getLogger("ropetp")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2

DEFAULTS: dict = {
    "seed": 0,
    "paths": {},
    "gen": {"motion": 100, "scenes": 100, "n_frames": 60, "fps": 30.0,
            "height": 16, "width": 16, "channels": 64, "noise": 0.05},
    "traj": {"steps": 400, "batch": 32, "lr": 1e-3, "optimizer": "rmsprop", "lam_foot": 0.1,
             "T": 1000, "schedule": "linear", "model": {}},
    "rope": {"steps": 300, "batch": 16, "lr": 1e-3, "optimizer": "adam", "model": "rope",
             "net": {"att_drop_epoch": 10}},
    "sample": {"steps": 100, "limit": None},
    "eval": {},
    "occmap": {"index": 0, "occluder": [8, 8], "stride": 2},
    "gradcheck": {"points": 10, "tol": 1e-5},
}


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None, seed: int | None) -> dict:
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"config file not found: {p}")
        text = p.read_text()
        try:
            doc = tomllib.loads(text) if p.suffix.lower() == ".toml" else json.loads(text)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
            raise ValidationError(f"cannot parse config {p}: {e}") from None
        if "seed" not in doc and seed is None:
            raise ValidationError(f"config {p} has no 'seed' and --seed was not given")
    cfg = _merge(DEFAULTS, doc)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int):
        raise ValidationError(f"seed must be an integer, got {cfg['seed']!r}")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _require(cfg: dict, key: str) -> Path:
    val = cfg["paths"].get(key)
    if not val:
        raise ValidationError(f"config paths.{key} is required for this command")
    p = Path(val)
    if not p.exists():
        raise ValidationError(f"paths.{key} does not exist: {p}")
    return p


def _partition(cfg: dict) -> PartitionTable:
    doc = cfg.get("partition")
    if not doc:
        return default_partition()
    try:
        return PartitionTable.from_json(doc)
    except (KeyError, ValueError) as e:
        raise ValidationError(f"invalid partition table: {e}") from None


def _dataclass_from(cls, doc: dict, where: str):
    names = {f.name for f in fields(cls)}
    bad = sorted(set(doc) - names)
    if bad:
        raise ValidationError(f"unknown keys in {where}: {bad}")
    return cls(**doc)


# ---------------------------------------------------------------- outputs

class Outputs:
    """Collects written files so the manifest can list their digests."""

    def __init__(self, root: Path, cfg: dict, command: str):
        self.root = root
        self.cfg = cfg
        self.command = command
        self.hash = config_hash(cfg)
        self.files: dict[str, str] = {}
        try:
            root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ValidationError(f"cannot create output directory {root}: {e}") from None

    def write_bytes(self, name: str, data: bytes) -> Path:
        path = self.root / name
        try:
            path.write_bytes(data)
        except OSError as e:
            raise ValidationError(f"cannot write {path}: {e}") from None
        self.files[name] = hashlib.sha256(data).hexdigest()
        return path

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode())

    def write_report(self, stem: str, rows: list[dict], summary: dict | None = None) -> None:
        """Same content as CSV (one row per record) and JSON (with the config hash)."""
        buf = io.StringIO()
        cols = list(rows[0]) if rows else []
        w = csv.DictWriter(buf, fieldnames=["config_hash"] + cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"config_hash": self.hash, **{k: _fmt(v) for k, v in r.items()}})
        self.write_text(f"{stem}.csv", buf.getvalue())
        doc = {"config_hash": self.hash, "command": self.command, "rows": rows, "summary": summary or {}}
        self.write_text(f"{stem}.json", json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def manifest(self) -> None:
        doc = {
            "command": self.command,
            "version": __version__,
            "config_hash": self.hash,
            "config": self.cfg,
            "outputs": dict(sorted(self.files.items())),
            "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        (self.root / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not JSON serializable: {type(v)}")


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: dict, out: Outputs) -> int:
    g = cfg["gen"]
    seed = cfg["seed"]
    table = _partition(cfg)
    if g["motion"]:
        seqs = synth_data.gen_gait_dataset(int(g["motion"]), seed, int(g["n_frames"]), float(g["fps"]))
        out.write_text("motion.jsonl", synth_data.dataset_text(seqs))
    if g["scenes"]:
        spec = synth_data.SceneSpec(int(g["height"]), int(g["width"]), int(g["channels"]), float(g["noise"]))
        scenes = synth_data.gen_scene_dataset(int(g["scenes"]), seed + 1, spec, table=table)
        out.write_text("scenes.jsonl", synth_data.dataset_text(scenes))
    return EXIT_OK


def _load(path: Path, kind: str):
    try:
        items = synth_data.load_dataset(path)
    except synth_data.SchemaError as e:
        raise ValidationError(f"{path}: {e}") from None
    want = synth_data.MotionSequence if kind == "motion" else synth_data.SceneSample
    if not items or not all(isinstance(it, want) for it in items):
        raise ValidationError(f"{path}: expected a non-empty {kind} dataset")
    return items


def _traj_config(cfg: dict) -> traj_diffusion.TrajTrainConfig:
    doc = dict(cfg["traj"])
    model = _dataclass_from(traj_diffusion.DenoiserConfig, doc.pop("model", {}), "traj.model")
    doc.pop("resume", None)
    tc = _dataclass_from(traj_diffusion.TrajTrainConfig, {**doc, "seed": cfg["seed"]}, "traj")
    tc.model = model
    return tc


def _rope_config(cfg: dict) -> rope_net.RopeTrainConfig:
    doc = dict(cfg["rope"])
    net = _dataclass_from(rope_net.RopeConfig, doc.pop("net", {}), "rope.net")
    doc.pop("resume", None)
    rc = _dataclass_from(rope_net.RopeTrainConfig, {**doc, "seed": cfg["seed"]}, "rope")
    rc.net = net
    return rc


def _resume(path, model, optimizer, kind: str) -> int:
    if path is None:
        return 0
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"resume checkpoint not found: {p}")
    try:
        ck = nn.load_checkpoint(p, model, optimizer)
    except ValueError as e:
        raise ValidationError(f"{p}: {e}") from None
    meta = ck["manifest"]["meta"]
    if meta.get("kind") != kind:
        raise ValidationError(f"{p}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
    return int(meta["step"])


def cmd_train_traj(cfg: dict, out: Outputs, resume=None) -> int:
    data = _load(_require(cfg, "motion"), "motion")
    tc = _traj_config(cfg)
    model = traj_diffusion.TrajDenoiser(tc.model, seed=tc.seed)
    opt = nn.make_optimizer(tc.optimizer, model.parameters(), tc.lr)
    start = _resume(resume, model, opt, "traj")
    try:
        model, opt, hist = traj_diffusion.train_denoiser(data, tc, model, opt, start_step=start)
    except traj_diffusion.DivergenceError as e:
        raise ValidationError(f"training diverged: {e}") from None
    meta = {"kind": "traj", "step": tc.steps, "config": tc.to_dict(), "config_hash": out.hash}
    out.write_bytes("traj.ckpt", nn.checkpoint_bytes(model, meta, opt))
    lines = ["step,total,L_simple,L_foot"] + [f"{s},{a!r},{b!r},{c!r}" for s, a, b, c in hist]
    out.write_text("traj_loss.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_train_rope(cfg: dict, out: Outputs, resume=None) -> int:
    data = _load(_require(cfg, "scenes"), "scene")
    rc = _rope_config(cfg)
    model = rope_net.make_model(rc.model, rc.net, _partition(cfg), seed=rc.seed)
    opt = nn.make_optimizer(rc.optimizer, model.parameters(), rc.lr)
    start = _resume(resume, model, opt, "rope")
    try:
        model, opt, hist = rope_net.train_rope_toy(data, rc, model, opt, start_step=start)
    except rope_net.DivergenceError as e:
        raise ValidationError(f"training diverged: {e}") from None
    meta = {"kind": "rope", "step": rc.steps, "config": rc.to_dict(), "config_hash": out.hash}
    out.write_bytes("rope.ckpt", nn.checkpoint_bytes(model, meta, opt))
    out.write_text("rope_loss.csv", hist.to_csv())
    return EXIT_OK


def _load_model(path: Path, kind: str, table=None):
    try:
        ck = nn.load_checkpoint(path)
    except (ValueError, OSError, KeyError) as e:
        raise ValidationError(f"{path}: unreadable checkpoint ({e})") from None
    meta = ck["manifest"]["meta"]
    if meta.get("kind") != kind:
        raise ValidationError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
    conf = meta["config"]
    if kind == "traj":
        model = traj_diffusion.TrajDenoiser(traj_diffusion.DenoiserConfig(**conf["model"]))
        extra = conf
    else:
        net = rope_net.RopeConfig(**conf["net"])
        model = rope_net.make_model(conf["model"], net, table)
        extra = conf
    try:
        model.load_state_dict(ck["weights"])
    except ValueError as e:
        raise ValidationError(f"{path}: {e}") from None
    return model, extra


def cmd_sample(cfg: dict, out: Outputs) -> int:
    data = _load(_require(cfg, "motion"), "motion")
    model, conf = _load_model(_require(cfg, "traj_ckpt"), "traj")
    limit = cfg["sample"].get("limit")
    data = data[:limit] if limit else data
    schedule = traj_diffusion.build_schedule(conf["T"], conf["schedule"])
    norm = traj_diffusion.TrajNormalizer(conf["traj_scale"])
    p = np.stack([s.p for s in data])
    r = traj_diffusion.sample(model, p, steps=int(cfg["sample"]["steps"]), schedule=schedule,
                              seed=cfg["seed"], normalizer=norm)
    seqs = [synth_data.MotionSequence(r=ri, p=s.p, fps=s.fps, contacts=s.contacts) for ri, s in zip(r, data)]
    out.write_text("samples.jsonl", synth_data.dataset_text(seqs))
    rows = [{"index": i, "wa_mpjpe": metrics.wa_mpjpe(s.world_joints(), g.world_joints())}
            for i, (s, g) in enumerate(zip(seqs, data))]
    out.write_report("sample_report", rows, {"mean_wa_mpjpe": float(np.mean([x["wa_mpjpe"] for x in rows]))})
    return EXIT_OK


def cmd_eval(cfg: dict, out: Outputs) -> int:
    e = cfg["eval"]
    rows = []
    summary = {}
    if cfg["paths"].get("pred_motion"):
        pred = _load(_require(cfg, "pred_motion"), "motion")
        gt = _load(_require(cfg, "motion"), "motion")
        if len(pred) != len(gt):
            raise ValidationError(f"prediction has {len(pred)} sequences, ground truth {len(gt)}")
        for i, (a, b) in enumerate(zip(pred, gt)):
            pa, ga = a.world_joints(), b.world_joints()
            if pa.shape != ga.shape:
                raise ValidationError(f"sequence {i}: expected shape {ga.shape}, found {pa.shape}")
            rows.append({"kind": "motion", "index": i, "mpjpe": metrics.mpjpe(a.p, b.p),
                         "w_mpjpe": metrics.w_mpjpe(pa, ga), "wa_mpjpe": metrics.wa_mpjpe(pa, ga)})
    if cfg["paths"].get("rope_ckpt") or cfg["paths"].get("pred_scenes"):
        gt = _load(_require(cfg, "scenes"), "scene")
        if cfg["paths"].get("pred_scenes"):
            pred = _load(_require(cfg, "pred_scenes"), "scene")
            j3d = np.stack([s.j3d for s in pred])
        else:
            model, _ = _load_model(_require(cfg, "rope_ckpt"), "rope", _partition(cfg))
            j3d = rope_net.predict(model, [s.scene for s in gt])[3]
        g3d = np.stack([s.j3d for s in gt])
        if j3d.shape != g3d.shape:
            raise ValidationError(f"expected joints of shape {g3d.shape}, found {j3d.shape}")
        for i in range(len(gt)):
            rows.append({"kind": "scene", "index": i, "mpjpe": metrics.mpjpe(j3d[i], g3d[i]),
                         "pa_mpjpe": metrics.pa_mpjpe(j3d[i], g3d[i])})
    if not rows:
        raise ValidationError("eval needs paths.pred_motion + paths.motion, or paths.scenes with a rope checkpoint")
    for kind in ("motion", "scene"):
        sub = [r for r in rows if r["kind"] == kind]
        if sub:
            keys = [k for k in sub[0] if k not in ("kind", "index")]
            summary[kind] = {k: float(np.mean([r[k] for r in sub])) for k in keys}
    # rows of both kinds share one table, absent metrics left blank
    cols = ["kind", "index", "mpjpe", "pa_mpjpe", "w_mpjpe", "wa_mpjpe"]
    out.write_report("eval", [{c: r.get(c, "") for c in cols} for r in rows], summary)
    return EXIT_OK


def cmd_occmap(cfg: dict, out: Outputs) -> int:
    o = cfg["occmap"]
    table = _partition(cfg)
    data = _load(_require(cfg, "scenes"), "scene")
    model, _ = _load_model(_require(cfg, "rope_ckpt"), "rope", table)
    idx = int(o["index"])
    if not 0 <= idx < len(data):
        raise ValidationError(f"occmap.index {idx} outside dataset of {len(data)} scenes")
    sample = data[idx]
    grid = metrics.occlusion_sensitivity_map(
        lambda sc: rope_net.predict(model, [sc])[3][0], sample.scene, sample.j3d,
        tuple(o["occluder"]), int(o["stride"]),
    )
    rows = [{"row": a, "col": b, "max_joint_error_mm": float(grid[a, b])}
            for a in range(grid.shape[0]) for b in range(grid.shape[1])]
    out.write_report("occmap", rows, {"grid": grid, "max": float(grid.max()), "mean": float(grid.mean())})
    out.write_text("occmap_grid.json", camera.mask_json(grid))
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Outputs, cases=None) -> int:
    g = cfg["gradcheck"]
    tol = float(g["tol"])
    reports = gradsuite.run_suite(cases, points=int(g["points"]), seed=cfg["seed"])
    rows = [{"op": r.name, "max_rel_error": r.max_error, "points": r.points, "kinks": r.kinks,
             "passed": r.passed(tol)} for r in reports]
    failed = [r["op"] for r in rows if not r["passed"]]
    out.write_report("gradcheck", rows, {"tol": tol, "failed": failed})
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['op']:28s} {r['max_rel_error']:.3e}")
    return EXIT_FAIL if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-traj": cmd_train_traj,
    "train-rope": cmd_train_rope,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "occmap": cmd_occmap,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ropetp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML or JSON run config")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", required=True, help="output directory (created if missing)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name.startswith("train-"):
            sp.add_argument("--resume", help="checkpoint to continue from")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        out = Outputs(Path(args.out), cfg, args.command)
        fn = COMMANDS[args.command]
        kwargs = {"resume": args.resume} if args.command.startswith("train-") else {}
        code = fn(cfg, out, **kwargs)
        out.manifest()
        return code
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
