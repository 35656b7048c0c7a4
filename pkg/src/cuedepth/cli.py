"""Command-line entry point: ``cuedepth {train,grad-check,render-synth,eval}``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from cuedepth import gradcheck
from cuedepth.config import TrainConfig
from cuedepth.evalmetrics import evaluate_model, evaluate_odometry, write_report
from cuedepth.kittidata import KittiRawDataset, read_split_file
from cuedepth.networks import JointDepthNet, load_checkpoint
from cuedepth.synthdata import SceneSpec, SynthDirDataset, random_scene, render_pair, write_rendered_set
from cuedepth.trainer import train, train_two_phase

logger = logging.getLogger("cuedepth")


def _train(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    if args.two_phase:
        checkpoint, runlog = train_two_phase(cfg)
    else:
        checkpoint, runlog = train(cfg, resume=args.resume)
    logger.info("Finished %d steps; last checkpoint %s", runlog.last_step, checkpoint)
    return 0


def _grad_check(args) -> int:
    names = sorted(gradcheck.COMPONENTS) if args.component == "all" else [args.component]
    failed = False
    for name in names:
        error = gradcheck.grad_check(name, seed=args.seed, step=args.step)
        status = "ok" if error < args.tolerance else "FAILED"
        failed |= error >= args.tolerance
        print(f"{gradcheck.resolve(name):20s} {error:.3e} {status}")
    return 1 if failed else 0


def _render_synth(args) -> int:
    spec = json.loads(Path(args.spec).read_text())
    if "scenes" in spec:
        scenes = [SceneSpec.from_dict(s) for s in spec["scenes"]]
    else:
        options = spec.get("random", {})
        resolution = tuple(options.get("resolution", (64, 64)))
        seed = options.get("seed", 0)
        scenes = [random_scene(seed + i, resolution) for i in range(options.get("count", 10))]
    pairs = [render_pair(scene) for scene in scenes]
    write_rendered_set(pairs, args.out)
    return 0


def _eval(args) -> int:
    manifest, states = load_checkpoint(args.ckpt)
    cfg = TrainConfig.from_dict(manifest["config"])
    model = JointDepthNet(cfg.net)
    model.load_state_dict(states["model"])
    model.idce_active = manifest.get("phase") == "joint" and model.idce is not None

    if cfg.dataset == "synth":
        if args.data is None:
            raise ValueError("Evaluating a synthetic model needs --data pointing at a rendered set.")
        ids = [line.strip() for line in Path(args.split).read_text().splitlines() if line.strip()] if args.split else None
        samples = SynthDirDataset(args.data, ids, cfg.net.num_scales)
    else:
        root = args.data or cfg.data_path
        if root is None or args.split is None:
            raise ValueError("KITTI evaluation needs --split and a data root.")
        samples = KittiRawDataset(
            root,
            read_split_file(args.split),
            cfg.net.input_resolution,
            roles=("prev",),
            num_scales=cfg.net.num_scales,
            is_train=False,
            gt_dir=args.gt,
        )
    report, records = evaluate_model(
        model,
        (samples[i] for i in range(len(samples))),
        cap=args.cap,
        eigen_crop=args.eigen_crop,
        median_scaling=not args.no_median_scaling,
        dump_dir=args.dump_depth,
    )
    print(report.row())
    if args.out:
        write_report(args.out, report, records)
    if args.odometry:
        mean, std = evaluate_odometry(model, (samples[i] for i in range(len(samples))))
        print(f"ate_5frame: {mean:.4f} +- {std:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cuedepth", description=__doc__)
    parser.add_argument("--log-level", default="INFO")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train", help="Train one phase from a JSON configuration.")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--two-phase", action="store_true", help="Run both phases back to back.")
    p.set_defaults(handler=_train)

    p = commands.add_parser("grad-check", help="Finite-difference check of a component.")
    p.add_argument("--component", required=True, help="Registered name, alias or 'all'.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(handler=_grad_check)

    p = commands.add_parser("render-synth", help="Render synthetic pairs to a directory.")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_render_synth)

    p = commands.add_parser("eval", help="Evaluate a checkpoint's depth and, optionally, pose predictions.")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--cap", type=float, default=80.0)
    p.add_argument("--eigen-crop", action="store_true")
    p.add_argument("--no-median-scaling", action="store_true")
    p.add_argument("--dump-depth", default=None)
    p.add_argument("--odometry", action="store_true", help="Also score consecutive frames by the 5-frame ATE.")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.handler(args)
    except (ValueError, FileNotFoundError) as err:
        logger.error("%s", err)
        return 2


if __name__ == "__main__":
    sys.exit(main())
