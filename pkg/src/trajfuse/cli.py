"""``trajfuse`` command line: synth / train / predict / eval / ablate / gradcheck / render.

Exit codes: 0 ok, 1 usage, 2 data, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from pathlib import Path

import numpy as np

from .evaluation import (
    DEFAULT_VARIANTS,
    evaluate_baseline,
    evaluate_model,
    format_tables,
    render_pose_svg,
    run_ablation,
    write_tables_csv,
)
from .gradcheck import SMALL_CONFIG, run_gradcheck
from .motion import (
    MotionDataError,
    MotionSequence,
    default_skeleton,
    downsample,
    generate_synthetic,
    load_mocap_csv,
    random_synth_params,
    window_dataset,
    write_mocap_csv,
)
from .network import CheckpointError, ModelConfig, load_checkpoint, predict
from .optim import AdamHyper
from .tensor import NonFiniteError, ShapeError
from .training import TrainConfig, assert_disjoint, make_frame_weights, train

log = logging.getLogger("trajfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "out": "runs/latest",
    "model.t_in": 10,
    "model.t_out": 10,
    "model.hidden": 64,
    "model.depth": 11,
    "model.slope": 0.2,
    "model.dropout": 0.1,
    "model.fusion": "temporal-fusion",
    "train.steps": 1000,
    "train.batch": 16,
    "train.lr": 1e-4,
    "train.tail_len": 0,
    "train.tail_weight": 0.2,
    "train.checkpoint_every": 0,
    "data.path": None,
    "data.downsample": 1,
    "data.stride": 1,
    "data.eval_sequences": "",
    "synth.sequences": 8,
    "synth.joints": 17,
    "synth.duration": 50,
    "synth.fps": 25.0,
    "synth.amplitude": 60.0,
    "synth.noise": 0.0,
    "eval.horizons": "80,160,320,400",
    "eval.checkpoint": None,
    "ablate.variants": ",".join(DEFAULT_VARIANTS),
    "ablate.eval_sequences": 2,
    "ablate.max_seconds": None,
    "render.frames": "0",
    "render.sequence": None,
    "render.pred": None,
    "render.plane": "xz",
    "gradcheck.per_group": 6,
}

# flag dest -> dotted config key
FLAG_KEYS = {
    "seed": "seed", "out": "out",
    "t_in": "model.t_in", "t_out": "model.t_out", "hidden": "model.hidden", "depth": "model.depth",
    "slope": "model.slope", "dropout": "model.dropout", "fusion": "model.fusion",
    "steps": "train.steps", "batch": "train.batch", "lr": "train.lr",
    "tail_len": "train.tail_len", "tail_weight": "train.tail_weight",
    "checkpoint_every": "train.checkpoint_every",
    "data": "data.path", "downsample": "data.downsample", "stride": "data.stride",
    "eval_sequences": "data.eval_sequences",
    "sequences": "synth.sequences", "joints": "synth.joints", "duration": "synth.duration",
    "fps": "synth.fps", "amplitude": "synth.amplitude", "noise": "synth.noise",
    "horizons": "eval.horizons", "checkpoint": "eval.checkpoint",
    "variants": "ablate.variants", "ablate_eval": "ablate.eval_sequences",
    "max_seconds": "ablate.max_seconds",
    "frames": "render.frames", "sequence": "render.sequence", "pred": "render.pred",
    "plane": "render.plane", "per_group": "gradcheck.per_group",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def sub_seed(seed: int, name: str) -> int:
    """Independent named stream derived from the single --seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with flat dotted keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    model = _Parser(add_help=False)
    model.add_argument("--t-in", type=int)
    model.add_argument("--t-out", type=int)
    model.add_argument("--depth", type=int)
    model.add_argument("--hidden", type=int)
    model.add_argument("--slope", type=float)
    model.add_argument("--dropout", type=float)
    model.add_argument("--fusion")

    fit = _Parser(add_help=False)
    fit.add_argument("--steps", type=int)
    fit.add_argument("--batch", type=int)
    fit.add_argument("--lr", type=float)
    fit.add_argument("--tail-len", type=int)
    fit.add_argument("--tail-weight", type=float)

    data = _Parser(add_help=False)
    data.add_argument("--data", help="mocap CSV path")
    data.add_argument("--downsample", type=int)
    data.add_argument("--stride", type=int)

    p = _Parser(prog="trajfuse", description=__doc__.splitlines()[0])
    subs = p.add_subparsers(dest="command", parser_class=_Parser)

    s = subs.add_parser("synth", parents=[common], help="write synthetic periodic motion as mocap CSV")
    for flag, typ in (("--sequences", int), ("--joints", int), ("--duration", int),
                      ("--fps", float), ("--amplitude", float), ("--noise", float)):
        s.add_argument(flag, type=typ)

    s = subs.add_parser("train", parents=[common, model, fit, data], help="train and write checkpoint + logs")
    s.add_argument("--eval-sequences", help="comma-separated sequence ids held out of training")
    s.add_argument("--checkpoint-every", type=int)

    s = subs.add_parser("predict", parents=[common, data], help="predict the frames after each sequence")
    s.add_argument("--checkpoint")

    s = subs.add_parser("eval", parents=[common, data], help="horizon MPJPE table for a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--horizons")

    s = subs.add_parser("ablate", parents=[common, model, fit, data], help="depth / fusion ablation")
    s.add_argument("--variants", help="comma list of tst-<depth> and fusion modes")
    s.add_argument("--horizons")
    s.add_argument("--ablate-eval", type=int, help="number of held-out sequences")
    s.add_argument("--max-seconds", type=float, help="per-variant training time budget")
    for flag, typ in (("--sequences", int), ("--joints", int), ("--duration", int), ("--noise", float)):
        s.add_argument(flag, type=typ)

    s = subs.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    s.add_argument("--per-group", type=int)

    s = subs.add_parser("render", parents=[common, data], help="SVG stick figures")
    s.add_argument("--frames", help="comma-separated frame indices")
    s.add_argument("--sequence")
    s.add_argument("--pred", help="second mocap CSV drawn in red")
    s.add_argument("--plane")
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as e:
            raise MotionDataError(f"cannot read config {args.config}: {e.strerror or e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config {args.config} is not valid JSON: {e}") from e
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _csv_list(text, cast=str) -> list:
    if text in (None, ""):
        return []
    try:
        return [cast(t.strip()) for t in str(text).split(",") if t.strip()]
    except ValueError as e:
        raise UsageError(f"bad list {text!r}: {e}") from e


def _load(path) -> tuple[list[MotionSequence], object]:
    if not path:
        raise UsageError("--data is required")
    if not Path(path).is_file():
        raise MotionDataError(f"dataset not found: {path}")
    return load_mocap_csv(path)


def _windows(cfg: dict, seqs: list[MotionSequence], t_in: int, t_out: int):
    wins = []
    for s in seqs:
        s = downsample(s, int(cfg["data.downsample"]))
        if s.n_frames >= t_in + t_out:
            wins += window_dataset(s, t_in, t_out, int(cfg["data.stride"]))
        else:
            log.warning("sequence %s too short (%d frames), skipped", s.seq_id, s.n_frames)
    if not wins:
        raise MotionDataError(f"no sequence has the {t_in + t_out} frames a window needs")
    return wins


def _model_config(cfg: dict, n_joints: int) -> ModelConfig:
    try:
        return ModelConfig(n_joints=n_joints, t_in=int(cfg["model.t_in"]), t_out=int(cfg["model.t_out"]),
                           hidden=int(cfg["model.hidden"]), slope=float(cfg["model.slope"]),
                           dropout=float(cfg["model.dropout"]), seed=sub_seed(int(cfg["seed"]), "init"),
                           depth=int(cfg["model.depth"]), fusion=str(cfg["model.fusion"]))
    except ValueError as e:
        raise UsageError(str(e)) from e


def _train_config(cfg: dict, t_out: int, ckpt: Path | None) -> TrainConfig:
    try:
        weights = make_frame_weights(t_out, int(cfg["train.tail_len"]), float(cfg["train.tail_weight"]))
        return TrainConfig(steps=int(cfg["train.steps"]), batch_size=int(cfg["train.batch"]),
                           hyper=AdamHyper(lr=float(cfg["train.lr"])), frame_weights=weights,
                           shuffle_seed=sub_seed(int(cfg["seed"]), "shuffle"),
                           dropout_seed=sub_seed(int(cfg["seed"]), "dropout"),
                           checkpoint_every=int(cfg["train.checkpoint_every"]),
                           checkpoint_path=str(ckpt) if ckpt else None)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _synth_sequences(cfg: dict, count: int, joints: int, duration: int, tag: str) -> list[MotionSequence]:
    seed = sub_seed(int(cfg["seed"]), tag)
    sk = default_skeleton(joints)
    seqs = []
    for i in range(count):
        sp = random_synth_params(sk, seed=seed + i, duration=duration, fps=float(cfg["synth.fps"]),
                                 amplitude_mm=float(cfg["synth.amplitude"]),
                                 noise_std=float(cfg["synth.noise"]), seq_id=f"s{i}")
        seqs.append(generate_synthetic(sp))
    return seqs


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, cfg: dict) -> None:
    (out / "run_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg):
    joints = int(cfg["synth.joints"])
    if joints < 1 or int(cfg["synth.sequences"]) < 1:
        raise UsageError("--joints and --sequences must be positive")
    seqs = _synth_sequences(cfg, int(cfg["synth.sequences"]), joints, int(cfg["synth.duration"]), "synth")
    out = _out_dir(cfg)
    write_mocap_csv(out / "synth.csv", seqs, default_skeleton(joints))
    _write_run_config(out, cfg)
    print(out / "synth.csv")


def cmd_train(cfg):
    seqs, _ = _load(cfg["data.path"])
    mcfg = _model_config(cfg, seqs[0].n_joints)
    held_ids = set(_csv_list(cfg["data.eval_sequences"]))
    wins = _windows(cfg, [s for s in seqs if s.seq_id not in held_ids], mcfg.t_in, mcfg.t_out)
    out = _out_dir(cfg)
    _write_run_config(out, cfg)
    params, tlog = train(mcfg, wins, _train_config(cfg, mcfg.t_out, out / "model.ckpt"))
    tlog.write_csv(out / "trainlog.csv")
    tlog.write_csv(out / "loss_trace.csv", timing=False)
    print(f"final loss {tlog.losses[-1]!r} after {len(tlog.losses)} steps -> {out / 'model.ckpt'}")
    held = [s for s in seqs if s.seq_id in held_ids]
    if held:
        horizons = _csv_list(cfg["eval.horizons"], float)
        held_w = _windows(cfg, held, mcfg.t_in, mcfg.t_out)
        assert_disjoint(wins, held_w)
        fps = downsample(held[0], int(cfg["data.downsample"])).fps
        table = evaluate_model(params, held_w, horizons, fps, label="model")
        print(format_tables([table]))


def _checkpoint(cfg):
    path = cfg["eval.checkpoint"]
    if not path:
        raise UsageError("--checkpoint is required")
    return load_checkpoint(path)


def cmd_predict(cfg):
    params = _checkpoint(cfg)
    mcfg = params.config
    seqs, skeleton = _load(cfg["data.path"])
    outs = []
    for s in seqs:
        s = downsample(s, int(cfg["data.downsample"]))
        if s.n_joints != mcfg.n_joints:
            raise MotionDataError(f"sequence {s.seq_id!r} has {s.n_joints} joints, model expects {mcfg.n_joints}")
        if s.n_frames < mcfg.t_in:
            raise MotionDataError(f"sequence {s.seq_id!r} has {s.n_frames} frames, model needs {mcfg.t_in}")
        outs.append(MotionSequence(predict(params, s.frames[-mcfg.t_in :]), s.fps, s.seq_id))
    out = _out_dir(cfg)
    write_mocap_csv(out / "predicted.csv", outs, skeleton)
    _write_run_config(out, cfg)
    print(out / "predicted.csv")


def cmd_eval(cfg):
    params = _checkpoint(cfg)
    mcfg = params.config
    seqs, _ = _load(cfg["data.path"])
    if seqs[0].n_joints != mcfg.n_joints:
        raise MotionDataError(f"data has {seqs[0].n_joints} joints, model expects {mcfg.n_joints}")
    wins = _windows(cfg, seqs, mcfg.t_in, mcfg.t_out)
    fps = downsample(seqs[0], int(cfg["data.downsample"])).fps
    horizons = _csv_list(cfg["eval.horizons"], float)
    try:
        tables = [evaluate_model(params, wins, horizons, fps, label="model")]
        tables += [evaluate_baseline(k, wins, horizons, fps) for k in ("zero-velocity", "constant-velocity")]
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = _out_dir(cfg)
    write_tables_csv(out / "eval.csv", tables)
    _write_run_config(out, cfg)
    print(format_tables(tables))


def cmd_ablate(cfg):
    n_eval = int(cfg["ablate.eval_sequences"])
    if cfg["data.path"]:
        seqs, _ = _load(cfg["data.path"])
    else:
        seqs = _synth_sequences(cfg, int(cfg["synth.sequences"]) + n_eval, int(cfg["synth.joints"]),
                                int(cfg["synth.duration"]), "ablate")
    if not 0 < n_eval < len(seqs):
        raise UsageError(f"need 0 < held-out sequences < {len(seqs)}, got {n_eval}")
    held_ids = {s.seq_id for s in seqs[-n_eval:]}
    base = _model_config(cfg, seqs[0].n_joints)
    train_w = _windows(cfg, [s for s in seqs if s.seq_id not in held_ids], base.t_in, base.t_out)
    eval_w = _windows(cfg, [s for s in seqs if s.seq_id in held_ids], base.t_in, base.t_out)
    assert_disjoint(train_w, eval_w)
    fps = downsample(seqs[0], int(cfg["data.downsample"])).fps
    variants = _csv_list(cfg["ablate.variants"])
    budget = cfg["ablate.max_seconds"]
    out = _out_dir(cfg)
    _write_run_config(out, cfg)
    try:
        report = run_ablation(train_w, eval_w, variants, base, _train_config(cfg, base.t_out, None),
                              _csv_list(cfg["eval.horizons"], float), fps,
                              max_seconds=float(budget) if budget is not None else None,
                              progress=lambda v: log.info("ablation variant %s", v))
    except ValueError as e:
        raise UsageError(str(e)) from e
    report.write_csv(out / "ablation.csv")
    text = report.to_text()
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_gradcheck(cfg):
    report = run_gradcheck(SMALL_CONFIG, seed=int(cfg["seed"]), per_group=int(cfg["gradcheck.per_group"]))
    for name, err in report.errors.items():
        print(f"{name:20s} max_rel_err={err:.3e} ({report.checked[name]} entries)")
    print(f"max relative error {report.max_error:.3e}")
    if report.max_error >= 1e-3:
        raise NonFiniteError(f"gradient check failed: {report.max_error:.3e} >= 1e-3")


def cmd_render(cfg):
    seqs, skeleton = _load(cfg["data.path"])
    sid = cfg["render.sequence"]
    seq = seqs[0] if sid is None else next((s for s in seqs if s.seq_id == sid), None)
    if seq is None:
        raise MotionDataError(f"sequence {sid!r} not in {cfg['data.path']}")
    pred = None
    if cfg["render.pred"]:
        pseqs, _ = _load(cfg["render.pred"])
        pred = next((s for s in pseqs if s.seq_id == seq.seq_id), pseqs[0])
    frames = _csv_list(cfg["render.frames"], int)
    out = _out_dir(cfg)
    try:
        render_pose_svg(seq, skeleton, frames, out / "pose.svg", pred=pred, plane=cfg["render.plane"])
    except (IndexError, ValueError) as e:
        raise UsageError(str(e)) from e
    print(out / "pose.svg")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "render": cmd_render}


def _setup_logging():
    level = os.environ.get("TRAJFUSE_LOG", "error").lower()
    logging.basicConfig(level={"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (MotionDataError, CheckpointError, ShapeError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
