"""Command-line entry points: synth, train, eval, infer, monitor, bench.

Every command takes ``--seed`` as its only source of randomness and writes
a ``*.config.json`` echo of its fully resolved settings next to each
artifact it produces. Commands exit with status 0 on success and 1 on any
error (argument errors exit with 2, as argparse does).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import statistics
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentConfig, augment_sample
from .data import (DatasetManifest, generate_synthetic, iter_records, write_dataset)
from .network import (VARIANTS, NetworkConfig, build_model, count_flops, count_params,
                      load_weights, save_weights, strip_for_inference)
from .stream import (WarningPolicy, directory_source, record_source, run_monitor,
                     synthetic_source)
from .train import FREEZE_POLICIES, TrainConfig, eval_input, evaluate, train

log = logging.getLogger("drowsy3d")

# desk-scale defaults; the published 224 / 1.4 configuration stays reachable by flag
DESK_SPATIAL = 96
DESK_MULTIPLIER = 0.35
DESK_FRAMES = 10


class CommandError(RuntimeError):
    """A command could not run; the message is shown to the operator."""


@dataclass
class RunConfig:
    """Everything needed to repeat a command."""

    command: str
    seed: int
    argv: list[str]
    version: str = __version__
    network: dict | None = None
    train: dict | None = None
    augment: dict | None = None
    policy: dict | None = None
    paths: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _echo_path(artifact: Path) -> Path:
    artifact = Path(artifact)
    if artifact.is_dir():
        return artifact / "run_config.json"
    return artifact.with_name(artifact.name + ".config.json")


def _guard(paths, force: bool):
    for p in paths:
        if Path(p).exists() and not force:
            raise CommandError(f"{p} exists; pass --force to overwrite")


def _run_config(args, **sections) -> RunConfig:
    return RunConfig(command=args.command, seed=args.seed, argv=list(args.argv), **sections)


def _load_dataset(manifest_path):
    manifest = DatasetManifest.read(manifest_path)
    records = manifest.load()
    if not records:
        raise CommandError(f"{manifest_path} lists no records")
    return records


# ----------------------------------------------------------------------
# synth
# ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    records_path, manifest_path = out / "records.ddr", out / "manifest.tsv"
    _guard([records_path, manifest_path], args.force)
    out.mkdir(parents=True, exist_ok=True)
    records = generate_synthetic(args.count, args.seed, args.frames, args.height, args.width)
    manifest = write_dataset(records, records_path, args.split)
    # store the record path relative to the manifest so the set can be moved
    manifest.entries = [dataclasses.replace(e, path=records_path.name) for e in manifest.entries]
    manifest.write(manifest_path)
    _run_config(args, paths={"records": str(records_path), "manifest": str(manifest_path)},
                extra={"count": args.count, "frames": args.frames, "height": args.height,
                       "width": args.width, "split": args.split}).write(_echo_path(out))
    drowsy = sum(r.label for r in records)
    print(f"records\t{len(records)}\ndrowsy\t{drowsy}\nalert\t{len(records) - drowsy}\n"
          f"manifest\t{manifest_path}")
    return 0


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    preset = TrainConfig.finetune if args.finetune else TrainConfig.pretrain
    kw = {"lr_initial": args.lr, "lr_min": args.lr_min, "momentum": args.momentum,
          "weight_decay": args.wd, "decay_factor": args.decay_factor,
          "decay_every": args.decay_every, "batch_size": args.batch_size,
          "freeze_policy": args.freeze, "max_steps": args.steps, "eval_every": args.eval_every}
    return preset(**{k: v for k, v in kw.items() if v is not None})


def cmd_train(args) -> int:
    out = Path(args.out)
    history_path = out.with_name(out.name + ".history.tsv")
    _guard([out, history_path], args.force)
    data = _load_dataset(args.manifest)
    eval_data = _load_dataset(args.eval_manifest) if args.eval_manifest else None
    config = _train_config(args)
    if args.init:
        model = load_weights(args.init)
        net = model.config
    else:
        net = NetworkConfig(args.variant, args.multiplier, args.frames, args.spatial)
        model = build_model(net, seed=args.seed)
    augment_fn, aug = None, None
    if args.augment:
        aug = AugmentConfig(output_size=net.spatial, window=net.frames)
        augment_fn = lambda rec, rng: augment_sample(rec.clip, aug, rng)  # noqa: E731
    short = [i for i, r in enumerate(data) if r.geometry[0] < net.frames]
    if short:
        raise CommandError(f"record {short[0]} has fewer than {net.frames} frames")

    with open(history_path, "w") as hist:
        hist.write("step\tlr\tloss\teval_accuracy\n")

        def on_eval(row):
            hist.write(row.line() + "\n")
            hist.flush()
            print(row.line(), flush=True)

        train(model, data, config, augment_fn, seed=args.seed, eval_dataset=eval_data,
              on_eval=on_eval)
    save_weights(model, out)
    _run_config(args, network=dataclasses.asdict(net), train=dataclasses.asdict(config),
                augment=dataclasses.asdict(aug) if aug else None,
                paths={"manifest": str(args.manifest), "eval_manifest": args.eval_manifest,
                       "init": args.init, "weights": str(out), "history": str(history_path)}
                ).write(_echo_path(out))
    print(f"weights\t{out}")
    return 0


# ----------------------------------------------------------------------
# eval / infer
# ----------------------------------------------------------------------


def _inference_model(path):
    try:
        return strip_for_inference(load_weights(path))
    except FileNotFoundError as exc:
        raise CommandError(f"weight file not found: {path}") from exc


def cmd_eval(args) -> int:
    model = _inference_model(args.weights)
    data = _load_dataset(args.manifest)
    acc = evaluate(model, data)
    correct = round(acc * len(data))
    print(f"accuracy\t{acc:.4f}\ncorrect\t{correct}\nsamples\t{len(data)}")
    return 0


def cmd_infer(args) -> int:
    model = _inference_model(args.weights)
    cfg = model.config
    n = 0
    for i, rec in enumerate(iter_records(args.records)):
        frames = rec.geometry[0]
        for start in range(0, frames - cfg.frames + 1, cfg.frames):
            window = dataclasses.replace(rec, frames=rec.frames[start:start + cfg.frames])
            x = eval_input(window, cfg.spatial, cfg.frames)[None]
            prob = float(model.predict_proba(x)[0])
            print(f"{i}\t{start + 1}-{start + cfg.frames}\t{prob:.6f}")
            n += 1
    if n == 0:
        raise CommandError(f"no record in {args.records} holds {cfg.frames} frames")
    return 0


# ----------------------------------------------------------------------
# monitor
# ----------------------------------------------------------------------


def _source(args, spatial):
    if args.source == "synthetic":
        return synthetic_source(args.seed, spatial, args.fps, args.drowsy_share,
                                height=240, width=320)
    p = Path(args.source)
    if p.is_dir():
        return directory_source(p, args.fps, loop=args.loop)
    if p.is_file():
        return record_source(p, args.fps, loop=args.loop)
    raise CommandError(f"frame source {args.source} not found")


def cmd_monitor(args) -> int:
    model = _inference_model(args.weights)
    policy = WarningPolicy(args.threshold, emit_low=args.demo)
    events = open(args.events, "w") if args.events else None

    def sink(line):
        print(line, flush=True)
        if events:
            events.write(line + "\n")

    stop = threading.Event()
    try:
        summary = run_monitor(_source(args, model.config.spatial), model, policy, sink, stop,
                              duration=args.duration)
    except KeyboardInterrupt:
        stop.set()
        raise
    finally:
        if events:
            events.close()
    sys.stdout.write(summary.report())
    for name, ok in summary.checks(args.fps if args.source == "synthetic" else None).items():
        print(f"{name}\t{'yes' if ok else 'no'}")
    if args.events:
        _run_config(args, network=dataclasses.asdict(model.config),
                    policy=dataclasses.asdict(policy),
                    paths={"weights": args.weights, "source": args.source,
                           "events": args.events},
                    extra={"fps": args.fps, "duration": args.duration}
                    ).write(_echo_path(Path(args.events)))
    if summary.error:
        raise CommandError(summary.error)
    return 0


# ----------------------------------------------------------------------
# bench
# ----------------------------------------------------------------------


def time_forward(model, reps: int = 20, warmup: int = 5, seed: int = 0) -> list[float]:
    """Wall-clock seconds of single-sample forward passes."""
    rng = np.random.default_rng(seed)
    x = rng.random((1,) + model.config.input_shape).astype(np.float32)
    for _ in range(warmup):
        model.forward(x)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        model.forward(x)
        times.append(time.perf_counter() - t0)
    return times


def cmd_bench(args) -> int:
    rows = []
    header = ["variant", "multiplier", "frames", "spatial", "params", "macs"]
    if args.reps:
        header += ["latency_median_ms", "latency_std_ms", "reps"]
    out = Path(args.out) if args.out else None
    if out:
        _guard([out], args.force)
    print("\t".join(header))
    for variant in args.variants:
        for mult in args.multipliers:
            for frames in args.frames:
                cfg = NetworkConfig(variant, mult, frames, args.spatial)
                model = build_model(cfg, seed=args.seed)
                row = [variant, f"{mult:g}", str(frames), str(args.spatial),
                       str(count_params(model)), str(count_flops(model))]
                if args.reps:
                    ms = [1000 * t for t in time_forward(strip_for_inference(model), args.reps,
                                                         args.warmup, args.seed)]
                    std = statistics.stdev(ms) if len(ms) > 1 else 0.0
                    row += [f"{statistics.median(ms):.2f}", f"{std:.2f}", str(args.reps)]
                rows.append(row)
                print("\t".join(row), flush=True)
    if out:
        out.write_text("\t".join(header) + "\n" + "".join("\t".join(r) + "\n" for r in rows))
        _run_config(args, paths={"table": str(out)},
                    extra={"variants": args.variants, "multipliers": args.multipliers,
                           "frames": args.frames, "spatial": args.spatial,
                           "reps": args.reps, "warmup": args.warmup}).write(_echo_path(out))
    return 0


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------


def _network_flags(p):
    p.add_argument("--variant", choices=VARIANTS, default="ours_early")
    p.add_argument("--multiplier", type=float, default=DESK_MULTIPLIER,
                   help=f"depth multiplier (default {DESK_MULTIPLIER})")
    p.add_argument("--spatial", type=int, default=DESK_SPATIAL,
                   help=f"input height and width (default {DESK_SPATIAL})")
    p.add_argument("--frames", type=int, default=DESK_FRAMES)


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="drowsy3d", description=__doc__.splitlines()[0])
    root.add_argument("--version", action="version", version=__version__)
    root.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic record set")
    p.add_argument("count", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model on a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--eval-manifest", help="held-out set for the history's accuracy column")
    _network_flags(p)
    p.add_argument("--init", help="start from this weight file (network flags are ignored)")
    p.add_argument("--finetune", action="store_true",
                   help="fine-tune preset: --lr 0.005 --wd 1e-7 unless given explicitly")
    p.add_argument("--lr", type=float, help="initial learning rate (default 0.01)")
    p.add_argument("--lr-min", type=float, help="learning-rate floor (default 0.0001)")
    p.add_argument("--momentum", type=float, help="default 0.9")
    p.add_argument("--wd", type=float, help="weight decay (default 4e-5)")
    p.add_argument("--decay-factor", type=float)
    p.add_argument("--decay-every", type=int, help="steps per decay (default two epochs)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--steps", type=int, help="optimizer steps (default 1000)")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--freeze", choices=FREEZE_POLICIES)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True,
                   help="random window, flip, brightness and crop (default on)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy on a manifest")
    p.add_argument("weights")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="drowsy probability per window")
    p.add_argument("weights")
    p.add_argument("records", help="record file; clips are cut into model-length windows")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("monitor", parents=[common], help="real-time warning loop")
    p.add_argument("weights")
    p.add_argument("--source", default="synthetic",
                   help="'synthetic', a record file, or a directory of frames")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--duration", type=float, help="seconds to run (default: until source ends)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--demo", action="store_true", help="also emit OK events")
    p.add_argument("--loop", action="store_true", help="replay file sources forever")
    p.add_argument("--drowsy-share", type=float, default=0.5,
                   help="share of drowsy clips in the synthetic source")
    p.add_argument("--events", help="also write events to this file")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("bench", parents=[common], help="parameters, MACs and latency")
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=["ours_early"])
    p.add_argument("--multipliers", nargs="+", type=float, default=[0.35, 0.75, 1.4])
    p.add_argument("--frames", nargs="+", type=int, default=[10])
    p.add_argument("--spatial", type=int, default=224)
    p.add_argument("--reps", type=int, default=20, help="timed repetitions; 0 skips timing")
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--out", help="also write the table to this file")
    p.set_defaults(func=cmd_bench)
    return root


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # every failure becomes a message and a nonzero exit
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
