#!/usr/bin/env python3
"""
Panoptic Mapping Engine command line
    replay       replay a dataset into a labeled mesh, with metrics when GT is present
    gen-scene    render a synthetic scene description into a dataset
    eval         score an exported mesh against a dataset's ground truth
    mesh-export  replay a dataset and export the labeled mesh only
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

import config
from config_manager import RunConfig, RunConfigManager
from services.dataset_store import load_json, save_json
from services.panoptic_evaluator import evaluate_mesh, format_text_report
from services.ply_store import load_ply
from services.replay_executor import open_dataset, run_replay
from services.synthetic_world import scene_from_dict, write_dataset
from utils.errors import ConfigError, PanopticError

logger = logging.getLogger(__name__)


def setup_logging(command: str, output_dir: Optional[str] = None):
    """Console logging, plus <output_dir>/logs/<command>.log when an output directory is known"""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if output_dir:
        log_dir = os.path.join(output_dir, "logs")
        os.makedirs(log_dir, exist_ok=True)
        handlers.append(logging.FileHandler(os.path.join(log_dir, f"{command}.log"), encoding="utf-8"))
    logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT, handlers=handlers, force=True)


def _run_config(args) -> RunConfig:
    manager = RunConfigManager()
    cfg = manager.load_config(args.config) if args.config else RunConfig()
    cfg = manager.apply_overrides(cfg, dataset=args.dataset, output_dir=args.out, seed=args.seed,
                                  frames=args.frames, no_crf=getattr(args, "no_crf", False),
                                  max_blocks=getattr(args, "max_blocks", None))
    if not cfg.dataset:
        raise ConfigError("no dataset given (use --dataset or set 'dataset' in the config)")
    return cfg


def cmd_replay(args) -> int:
    cfg = _run_config(args)
    setup_logging("replay", cfg.output_dir)
    logger.info(f"=== {config.APP_TITLE} {config.VERSION}: replay ===")
    report = run_replay(cfg)
    metrics = report["metrics"]
    summary = f"PQ={metrics['all']['pq']} mIoU={report['semantic_miou']}" if metrics else "no ground truth"
    print(f"Replayed {report['frames_processed']} frames "
          f"({len(report['frames_skipped'])} skipped) into {cfg.output_dir}: {summary}")
    return 0


def cmd_mesh_export(args) -> int:
    cfg = _run_config(args)
    setup_logging("mesh-export", cfg.output_dir)
    report = run_replay(cfg, evaluate=False)
    print(f"Exported {report['mesh']['vertices']} vertices to "
          f"{os.path.join(cfg.output_dir, config.OUTPUT_FILES['mesh'])}")
    return 0


def cmd_gen_scene(args) -> int:
    setup_logging("gen-scene", args.out)
    data = load_json(args.spec)
    if args.seed is not None:
        data["seed"] = args.seed
    spec = scene_from_dict(data)
    frames = write_dataset(spec, args.out, frames=args.frames, density=args.density)
    print(f"Wrote {frames} frames of '{spec.name}' to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    setup_logging("eval", args.out)
    dataset = open_dataset(cfg.dataset, cfg.seed)
    if not dataset.has_ground_truth:
        raise ConfigError(f"dataset {cfg.dataset} has no gt_points.ply")
    mesh = load_ply(args.mesh)
    report = evaluate_mesh(mesh, dataset.load_ground_truth(), dataset.schema,
                           cfg.evaluation, cfg.map.voxel_size)
    if args.out:
        save_json(os.path.join(args.out, config.OUTPUT_FILES["metrics_json"]), report)
    print(format_text_report(report), end="")
    return 0


def _add_run_flags(parser: argparse.ArgumentParser, crf_flags: bool = True):
    parser.add_argument("--config", help="run configuration JSON")
    parser.add_argument("--dataset", help="dataset directory or scene JSON (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, help="noise seed when the dataset is a scene JSON")
    parser.add_argument("--frames", type=int, help="replay at most N frames")
    if crf_flags:
        parser.add_argument("--no-crf", action="store_true", help="disable map regularization")
        parser.add_argument("--max-blocks", type=int, help="maximum blocks per CRF submap")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panoptic_cli", description=config.APP_DESCRIPTION)
    parser.add_argument("--version", action="version", version=f"%(prog)s {config.VERSION}")
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    replay = commands.add_parser("replay", help="replay a dataset into a labeled mesh")
    _add_run_flags(replay)
    replay.set_defaults(handler=cmd_replay)

    export = commands.add_parser("mesh-export", help="replay a dataset and export the mesh only")
    _add_run_flags(export)
    export.set_defaults(handler=cmd_mesh_export)

    gen = commands.add_parser("gen-scene", help="render a synthetic scene into a dataset")
    gen.add_argument("--spec", required=True, help="scene description JSON")
    gen.add_argument("--out", required=True, help="dataset directory to write")
    gen.add_argument("--seed", type=int, help="noise seed (overrides the scene file)")
    gen.add_argument("--frames", type=int, help="render only the first N poses")
    gen.add_argument("--density", type=float, default=2000.0, help="GT samples per square meter")
    gen.set_defaults(handler=cmd_gen_scene)

    evaluate = commands.add_parser("eval", help="score a mesh against dataset ground truth")
    evaluate.add_argument("--mesh", required=True, help="mesh PLY written by replay")
    _add_run_flags(evaluate, crf_flags=False)
    evaluate.set_defaults(handler=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (PanopticError, OSError, ValueError) as e:
        logger.debug("Command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
