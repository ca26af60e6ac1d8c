"""hoflow command line: gen, refine, gradcheck, metrics.

All numerics come from a JSON config file; flags only pick the config,
paths and seed. Exit codes: 0 success, 1 check failed, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .geometry import InvalidPoseError, ProjectionError
from .harness import (GenerationError, SequenceFormatError, default_camera, default_trajectory,
                      frame_errors, generate_sequence, load_sequence, pck_curve, save_sequence,
                      write_metrics_csv, write_pck_csv)
from .losses import LossWeights
from .optimize import (Annotation, RefineConfig, check_gradient, fd_steps, grad, ho_loss,
                       photo_objective, sparse_protocol)
from .scene import NUM_PARAMS, PARAM_NAMES, SceneParams, natural_units, scene_forward, scene_mesh

log = logging.getLogger("hoflow")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    frames: int = 30
    image_size: int = 128
    focal: float = 128.0
    weights: dict = field(default_factory=dict)
    refine: dict = field(default_factory=dict)
    ratio: float = 0.2
    pck_thresholds_mm: list = field(default_factory=lambda: [float(t) for t in range(0, 55, 5)])
    gradcheck_configs: int = 20
    gradcheck_eps: float = 1e-4
    gradcheck_tolerance: float = 1e-3
    gradcheck_losses: list = field(default_factory=lambda: ["photo", "ho"])
    # test hook: scale one analytic derivative so the check must fail
    gradcheck_break: bool = False

    def __post_init__(self):
        if self.frames < 2:
            raise ConfigError("frames must be at least 2")
        if self.image_size < 16 or self.focal <= 0:
            raise ConfigError("image_size must be >= 16 and focal positive")
        if not 0 < self.ratio <= 1:
            raise ConfigError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.gradcheck_configs < 1 or self.gradcheck_eps <= 0 or self.gradcheck_tolerance <= 0:
            raise ConfigError("gradcheck settings must be positive")
        bad = set(self.gradcheck_losses) - {"photo", "ho", "zero"}
        if bad:
            raise ConfigError(f"unknown gradcheck losses {sorted(bad)}")
        t = np.asarray(self.pck_thresholds_mm, dtype=np.float64)
        if t.size == 0 or np.any(np.diff(t) < 0):
            raise ConfigError("pck_thresholds_mm must be a nonempty ascending list")
        try:
            self.loss_weights()
            self.refine_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.weights)

    def refine_config(self) -> RefineConfig:
        opts = dict(self.refine)
        if "dofs" in opts and opts["dofs"] is not None:
            opts["dofs"] = tuple(opts["dofs"])
        return RefineConfig(weights=self.loss_weights(), **opts)

    def camera(self):
        return default_camera(self.image_size, self.focal)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"missing required flag(s): {', '.join('--' + m for m in missing)}")


def _write_params(out: Path, params: list) -> None:
    (out / "params").mkdir(parents=True, exist_ok=True)
    for t, p in enumerate(params):
        (out / "params" / f"{t:05d}.json").write_text(p.to_json())


def _read_params(d: Path) -> list:
    files = sorted((d / "params").glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no parameter files in {d / 'params'}")
    return [SceneParams.from_json(f.read_text()) for f in files]


def cmd_generate(cfg: RunConfig, out) -> Path:
    cam = cfg.camera()
    seq = generate_sequence(default_trajectory(cam, cfg.seed, cfg.frames), cfg.seed, cam)
    path = save_sequence(seq, out)
    print(f"wrote {len(seq)} frames to {path}")
    return path


def cmd_refine(cfg: RunConfig, seq_dir, out) -> Path:
    seq = load_sequence(seq_dir)
    cam, models = seq.camera, seq.models
    frames = []
    for t, (img, p) in enumerate(seq.frames):
        frames.append((img, Annotation.from_params(p, models, cam) if p is not None else None))
    gt = seq.params if all(p is not None for p in seq.params) else None
    res = sparse_protocol(frames, cfg.ratio, models, cam, cfg.refine_config(), ground_truth=gt)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_params(out, res.params)
    write_metrics_csv(out / "report.csv", res.rows)
    print(f"{len(res.keyframes)} keyframes of {len(frames)} frames; report at {out / 'report.csv'}")
    return out / "report.csv"


def _gradcheck_scene(cfg: RunConfig, index: int):
    """One random non-degenerate configuration: a frame pair of a generated
    sequence with the target parameters perturbed away from truth."""
    cam = cfg.camera()
    seed = cfg.seed + index % 5
    seq = generate_sequence(default_trajectory(cam, seed, cfg.frames), seed, cam)
    rng = np.random.default_rng([cfg.seed, index])
    r = int(rng.integers(0, cfg.frames - 1))
    k = int(rng.integers(1, min(4, cfg.frames - 1 - r) + 1))
    x = seq.params[r + k].numpy() + rng.normal(0.0, 0.05, NUM_PARAMS) * natural_units(cam.focal)
    return seq, r, k, SceneParams.from_vector(x)


def cmd_gradcheck(cfg: RunConfig) -> bool:
    """Reverse-mode vs central differences over all 37 coordinates. The
    photometric loss is checked on its active smooth piece (mask, bilinear
    cells and L1 signs frozen at the evaluation point)."""
    steps = fd_steps(cfg.focal, cfg.gradcheck_eps)
    ok = True
    print(f"{'config':>6} {'loss':>5} {'worst':>10} {'rel_err':>10}  result")
    for i in range(cfg.gradcheck_configs):
        seq, r, k, params = _gradcheck_scene(cfg, i)
        cam, models = seq.camera, seq.models
        for name in cfg.gradcheck_losses:
            if name == "photo":
                ref = scene_mesh(*scene_forward(seq.params[r], models, cam)[:2]).detach()
                obj = photo_objective(seq.images[r], ref, seq.images[r + k], models, cam,
                                      replace(cfg.refine_config(), regularize=True))
                piece = obj(params)[1].piece
                fn = lambda q, obj=obj, piece=piece: obj(q, piece=piece)[0]
            elif name == "ho":
                ann = Annotation.from_params(seq.params[r + k], models, cam)
                fn = lambda q, ann=ann: ho_loss(q, ann, models, cam, cfg.loss_weights())
            else:
                fn = lambda q: q.vector().sum() * 0.0 + 1.0
            analytic = None
            if cfg.gradcheck_break:
                analytic = grad(fn, params)
                analytic[0] = analytic[0] * 1.01 + 1e-6
            gc = check_gradient(fn, params, steps, cfg.gradcheck_tolerance, analytic=analytic)
            j = int(np.argmax(gc.rel_error))
            print(f"{i:>6} {name:>5} {PARAM_NAMES[j]:>10} {gc.rel_error[j]:>10.2e}  "
                  f"{'PASS' if gc.passed else 'FAIL'}")
            ok &= gc.passed
    print("gradcheck", "PASS" if ok else "FAIL")
    return ok


def cmd_metrics(cfg: RunConfig, pred_dir, seq_dir, out) -> tuple[Path, Path]:
    seq = load_sequence(seq_dir)
    pred = _read_params(Path(pred_dir))
    gt = seq.params
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predicted frames but {len(gt)} ground-truth frames")
    if any(p is None for p in gt):
        raise SequenceFormatError("ground-truth sequence lacks parameters")
    rows = []
    for t, (p, g) in enumerate(zip(pred, gt)):
        rows.append({"frame": t, **frame_errors(p, g, seq.models, seq.camera)})
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", rows)
    th = np.asarray(cfg.pck_thresholds_mm, dtype=np.float64)
    write_pck_csv(out / "pck_hand.csv", th, pck_curve([r["hand_mepe_mm"] for r in rows], th))
    write_pck_csv(out / "pck_object.csv", th, pck_curve([r["obj_corner_mm"] for r in rows], th))
    means = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "frame"}
    for k, v in means.items():
        print(f"{k:>18} {v:10.4f}")
    return out / "metrics.csv", out / "pck_hand.csv"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hoflow", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("gen", "generate a synthetic sequence"),
                        ("refine", "sparse-keyframe photometric refinement"),
                        ("gradcheck", "finite-difference gradient check"),
                        ("metrics", "evaluate predictions against ground truth")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if name != "gradcheck":
            p.add_argument("--out", help="output directory")
        if name in ("refine", "metrics"):
            p.add_argument("--seq", help="sequence directory")
        if name == "metrics":
            p.add_argument("--pred", help="prediction directory (params/*.json)")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "gen":
            _require(args, "out")
            cmd_generate(cfg, args.out)
        elif args.command == "refine":
            _require(args, "seq", "out")
            cmd_refine(cfg, args.seq, args.out)
        elif args.command == "gradcheck":
            return EXIT_OK if cmd_gradcheck(cfg) else EXIT_FAIL
        elif args.command == "metrics":
            _require(args, "seq", "pred", "out")
            cmd_metrics(cfg, args.pred, args.seq, args.out)
    except (ConfigError, OSError, SequenceFormatError, GenerationError, ValueError,
            InvalidPoseError, ProjectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
