"""Command-line surface: data generation, flow estimation, train, predict, eval.

Exit codes: 0 success, 1 usage error, 2 data/format/config error,
3 numeric error.  Every failure prints a single ``error:`` line to
stderr.  Commands are deterministic given their inputs and --seed.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import (
    SyntheticConfig,
    decode_semantic,
    generate_synthetic_clip,
    list_frame_files,
    load_sequence_dir,
    load_sidecar_flows,
    make_training_tuples,
    write_pgm,
    write_ppm,
)
from .errors import ConfigError, DataError, FlowcastError, NumericError
from .flow import FlowField, estimate_flow_horn_schunck, flow_to_color, write_flo
from .losses import LossWeights
from .model import _frame_to_intensity, rollout
from .train import EvalSequence, TrainConfig, evaluate, train, write_train_log


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="flowcast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic moving-shapes clip")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--frames", type=int, default=10, help="number of frames to render")
    p.add_argument("--shapes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("rgb", "semantic"), default="rgb")
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--background", choices=("constant", "gradient"), default="constant")
    p.add_argument("--speed", type=int, default=1, help="max per-axis speed in px/frame")
    p.add_argument("--static", action="store_true", help="zero velocities (static scene)")

    p = sub.add_parser("estimate-flow", help="Horn-Schunck flow for consecutive frames")
    p.add_argument("--frames", required=True, help="directory of .ppm frames")
    p.add_argument("--out", required=True, help="directory for .flo files")
    p.add_argument("--smoothness", type=float, default=0.01)
    p.add_argument("--iters", type=int, default=200)

    p = sub.add_parser("train", help="train the predictor on a frame directory")
    p.add_argument("--data", required=True, help="directory of frames (+ optional .flo sidecars)")
    p.add_argument("--config", default=None, help="key = value configuration file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--steps", type=int, default=None, help="override config steps")
    p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("predict", help="roll the model out from the last frames of a directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", required=True, help="directory holding at least N frames")
    p.add_argument("--k", type=int, default=1, help="number of rollout steps")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--viz", action="store_true", help="also write flow colorings")
    p.add_argument("--flow-source", choices=("model", "estimate"), default="model")

    p = sub.add_parser("eval", help="PSNR/SSIM report for k-step rollouts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="sequence directory, or directory of sequence subdirectories")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--out", required=True, help="metrics CSV path")
    return parser


# ---- config files ------------------------------------------------------------

_CONFIG_KEYS = {
    "steps": int,
    "batch_size": int,
    "seed": int,
    "lambda_of": float,
    "lambda_st": float,
    "alpha": float,
    "mode": str,
    "n_input": int,
    "num_classes": int,
    "channel_scale": Fraction,
    "checkpoint_interval": int,
    "eval_interval": int,
    "flow_source": str,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "adam_epsilon": float,
    "clip_norm": float,
    "hs_smoothness": float,
    "hs_iterations": int,
    "width": int,
    "height": int,
    "frame_stride": int,
}


def parse_config_file(path) -> dict:
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return values


def _train_config(options: dict) -> TrainConfig:
    weights = LossWeights(
        lambda_of=options.pop("lambda_of", 1.0),
        lambda_st=options.pop("lambda_st", 1.0),
        alpha=options.pop("alpha", 1.0),
        mode=options.get("mode", "rgb"),
    )
    fields = {k: v for k, v in options.items() if k in TrainConfig.__dataclass_fields__}
    try:
        return TrainConfig(weights=weights, **fields)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---- commands ----------------------------------------------------------------


def _frame_name(index: int, mode: str) -> str:
    return f"{index + 1:06d}." + ("pgm" if mode == "semantic" else "ppm")


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = SyntheticConfig(
        width=args.width,
        height=args.height,
        num_shapes=args.shapes,
        speed_range=(0, 0) if args.static else (1, args.speed),
        background=args.background,
        seed=args.seed,
        mode=args.mode,
        num_classes=args.num_classes if args.mode == "semantic" else 0,
    )
    frames, flows = generate_synthetic_clip(config, total_frames=args.frames)
    for t in range(frames.shape[0]):
        name = out / _frame_name(t, args.mode)
        if args.mode == "semantic":
            write_pgm(name, decode_semantic(frames[t]))
        else:
            write_ppm(name, frames[t])
        if t < flows.shape[0]:
            write_flo(FlowField.from_array(flows[t]), name.with_suffix(".flo"))
    print(f"wrote {frames.shape[0]} frames and {flows.shape[0]} flows to {out}")
    return 0


def cmd_estimate_flow(args) -> int:
    frames_dir = Path(args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = list_frame_files(frames_dir, "rgb")
    if len(files) < 2:
        raise DataError(f"{frames_dir}: need at least two frames")
    frames = load_sequence_dir(frames_dir)
    count = 0
    for t in range(frames.shape[0] - 1):
        flow = estimate_flow_horn_schunck(
            _frame_to_intensity(frames[t]),
            _frame_to_intensity(frames[t + 1]),
            smoothness=args.smoothness,
            iterations=args.iters,
        )
        write_flo(flow, out / files[t].with_suffix(".flo").name)
        count += 1
    print(f"wrote {count} flow files to {out}")
    return 0


def _load_clip(data_dir, mode: str, num_classes: int, resize_to, frame_stride: int,
               hs_smoothness: float, hs_iterations: int, use_sidecars: bool = True):
    """Frames plus flows for one sequence directory; estimates missing flows."""
    frames = load_sequence_dir(
        data_dir, resize_to=resize_to, frame_stride=frame_stride,
        mode=mode, num_classes=num_classes,
    )
    flows = load_sidecar_flows(data_dir, mode, frame_stride) if use_sidecars else None
    if flows is not None and resize_to is not None and flows.shape[2:] != frames.shape[2:]:
        flows = None  # sidecars rendered at native size no longer apply
    if flows is None:
        flows = np.stack(
            [
                estimate_flow_horn_schunck(
                    _frame_to_intensity(frames[t]),
                    _frame_to_intensity(frames[t + 1]),
                    smoothness=hs_smoothness,
                    iterations=hs_iterations,
                ).to_array()
                for t in range(frames.shape[0] - 1)
            ]
        )
    return frames, flows


def cmd_train(args) -> int:
    options = parse_config_file(args.config) if args.config else {}
    if args.steps is not None:
        options["steps"] = args.steps
    if args.seed is not None:
        options["seed"] = args.seed
    resize_to = None
    if "width" in options or "height" in options:
        if not ("width" in options and "height" in options):
            raise ConfigError("width and height must be configured together")
        resize_to = (options["width"], options["height"])
    frame_stride = options.pop("frame_stride", 1)
    config = _train_config({k: v for k, v in options.items() if k not in ("width", "height")})

    frames, flows = _load_clip(
        args.data, config.mode, config.num_classes, resize_to, frame_stride,
        config.hs_smoothness, config.hs_iterations,
        use_sidecars=config.flow_source == "dataset",
    )
    if config.flow_source == "horn_schunck":
        # the loader already estimated every flow with these parameters
        config = replace(config, flow_source="dataset")
    samples = make_training_tuples(frames, flows, config.n_input)
    if not samples:
        raise DataError(
            f"{args.data}: {frames.shape[0]} frames cannot form a window of {config.n_input + 1}"
        )

    result = train(samples, config, checkpoint_path=args.out)
    log_path = args.log if args.log else str(args.out) + ".log.csv"
    write_train_log(result.log, log_path)
    print(f"trained {config.steps} steps; checkpoint {args.out}, log {log_path}")
    return 0


def _detect_mode(frames_dir) -> str:
    if list_frame_files(frames_dir, "rgb"):
        return "rgb"
    if list_frame_files(frames_dir, "semantic"):
        return "semantic"
    raise DataError(f"{frames_dir}: no .ppm or .pgm frames found")


def cmd_predict(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    cfg = params.config
    if _detect_mode(args.frames) != cfg.mode:
        raise DataError(
            f"{args.frames}: frame type does not match checkpoint mode {cfg.mode!r}"
        )
    frames, flows = _load_clip(
        args.frames, cfg.mode, cfg.num_classes, None, 1,
        hs_smoothness=0.01, hs_iterations=200,
    )
    n = cfg.n_input
    if frames.shape[0] < n:
        raise DataError(f"{args.frames}: need at least {n} frames, found {frames.shape[0]}")
    window_frames = frames[None, -n:]
    window_flows = flows[-(n - 1):].reshape(1, 2 * (n - 1), *frames.shape[2:])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    predictions, step_flows = rollout(
        window_frames, window_flows, params, args.k, args.flow_source, return_flows=True
    )
    for j, prediction in enumerate(predictions):
        name = out / _frame_name(j, cfg.mode)
        if cfg.mode == "semantic":
            write_pgm(name, decode_semantic(prediction.data[0]))
        else:
            write_ppm(name, prediction.data[0])
        if args.viz:
            coloring = flow_to_color(FlowField.from_array(step_flows[j][0]))
            write_ppm(out / f"flow_{j + 1:06d}.ppm", coloring.data)
    print(f"wrote {args.k} predicted frames to {out}")
    return 0


def cmd_eval(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    cfg = params.config
    data = Path(args.data)
    subdirs = sorted(d for d in data.iterdir() if d.is_dir()) if data.is_dir() else []
    seq_dirs = subdirs if subdirs else [data]
    sequences = []
    for d in seq_dirs:
        frames, flows = _load_clip(d, cfg.mode, cfg.num_classes, None, 1,
                                   hs_smoothness=0.01, hs_iterations=200)
        sequences.append(EvalSequence(sequence_id=d.name, frames=frames, flows=flows))
    report = evaluate(sequences, params, rollout_k=args.k)
    report.to_csv(args.out)
    print(
        f"evaluated {len(sequences)} sequences x {args.k} steps: "
        f"mean psnr {report.mean_psnr:.4f} dB, mean ssim {report.mean_ssim:.6f}"
    )
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "estimate-flow": cmd_estimate_flow,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FlowcastError as exc:  # data, format, config, shape errors
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
