#!/usr/bin/env python3
"""
Desk-scale benchmark runner
    crf          PQ/SQ/RQ with and without regularization over several seeds
    division     divided fast inference vs whole-map exhaustive inference
    fast-brute   sparse-kernel vs exhaustive mean-field on individual submaps
    sweep        regularization time and agreement against max_blocks
Results go to <out>/*.csv plus a summary.json.
"""
import argparse
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import config
from config_manager import RunConfig, RunConfigManager
from services.crf_regularizer import (CrfConfig, build_submap, divide_map, mean_field_brute,
                                      mean_field_fast, regularize)
from services.dataset_store import load_json, save_json
from services.instance_tracker import TrackingConfig, render_reference_labels, track_labels
from services.panoptic_frontend import fuse_panoptic
from services.mesh_extractor import extract_mesh
from services.panoptic_evaluator import evaluate_mesh
from services.replay_executor import ReplayExecutor
from services.synthetic_world import render_frame, scene_from_dict, write_dataset
from services.tsdf_integrator import IntegrationConfig, integrate_frame
from services.volumetric_map import VolumetricMap

logger = logging.getLogger(__name__)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_SCENE = os.path.join(ROOT, "data", "scenes", "noisy_loop.json")
SWEEP_VALUES = [1, 5, 10, 25, 50, 100]


def build_map(scene: Dict, voxel_size: float, block_side: int, frames: int) -> VolumetricMap:
    """Integrate the first frames of a scene directly from the renderer"""
    spec = scene_from_dict(scene)
    volume = VolumetricMap(voxel_size, block_side)
    tracking, integration = TrackingConfig(), IntegrationConfig()
    for index, pose in enumerate(spec.poses[:frames]):
        rendered = render_frame(spec, pose, frame_index=index)
        raw = fuse_panoptic(rendered.segmentation, spec.schema)
        reference = render_reference_labels(volume, rendered.camera)
        resolved, _ = track_labels(raw, reference, volume, tracking)
        integrate_frame(volume, rendered.camera, resolved, integration)
    logger.info(f"Built map: {volume.block_count} blocks from {min(frames, len(spec.poses))} frames")
    return volume


def _node_flat(volume: VolumetricMap) -> np.ndarray:
    """Flat indices of every CRF node in the map"""
    return build_submap(volume, volume.observed_blocks()).flat


def _timed_regularize(volume: VolumetricMap, cfg: CrfConfig):
    start = time.perf_counter()
    stats = regularize(volume, cfg)
    return stats, time.perf_counter() - start


def _evaluate_current(executor: ReplayExecutor) -> Dict:
    """Mesh the executor's live map and score it against the dataset's ground truth"""
    cfg = executor.cfg
    mesh = extract_mesh(executor.state.volume, executor.state.registry, cfg.meshing.min_corner_weight)
    metrics = evaluate_mesh(mesh, executor.dataset.load_ground_truth(), executor.dataset.schema,
                            cfg.evaluation, cfg.map.voxel_size)
    return metrics["panoptic"]["all"]


def crf_ablation(scene: Dict, seeds: Sequence[int], frames: int, voxel_size: float) -> pd.DataFrame:
    """Integrate each seed once, then score the map before and after regularization"""
    rows = []
    manager = RunConfigManager()
    for seed in seeds:
        with tempfile.TemporaryDirectory() as tmp:
            dataset = os.path.join(tmp, "dataset")
            write_dataset(scene_from_dict(dict(scene, seed=seed)), dataset, frames=frames)
            cfg = manager.from_dict({
                "dataset": dataset,
                "output_dir": os.path.join(tmp, "run"),
                "map": {"voxel_size": voxel_size},
                "schedule": {"regularize_every": 0, "enable_crf": False},
            })
            executor = ReplayExecutor(cfg)
            plain = executor.run()["metrics"]["all"]
            executor.regularize()
            regularized = _evaluate_current(executor)
            for enable_crf, metrics in ((False, plain), (True, regularized)):
                rows.append({"seed": seed, "crf": enable_crf, "pq": metrics["pq"],
                             "sq": metrics["sq"], "rq": metrics["rq"]})
            logger.info(f"seed {seed}: PQ {plain['pq']:.4f} -> {regularized['pq']:.4f}")
    return pd.DataFrame(rows)


def summarize_ablation(results: pd.DataFrame) -> Dict:
    pivot = results.pivot(index="seed", columns="crf", values=["pq", "sq", "rq"])
    delta = {name: float((pivot[(name, True)] - pivot[(name, False)]).mean()) for name in ("pq", "sq", "rq")}
    return {"mean_delta": delta, "seeds": int(len(pivot))}


def division_agreement(volume: VolumetricMap, cfg: CrfConfig, max_blocks: int) -> Dict:
    """Divided fast inference against exhaustive inference over the whole map"""
    whole = volume.copy()
    whole_cfg = replace(cfg, inference="brute", max_blocks_per_submap=max(volume.block_count, 1),
                        brute_force_max_nodes=sys.maxsize)
    _, whole_seconds = _timed_regularize(whole, whole_cfg)

    divided = volume.copy()
    _, divided_seconds = _timed_regularize(divided, replace(cfg, max_blocks_per_submap=max_blocks))

    flat = _node_flat(volume)
    agree = float(np.mean(whole.flat_view("label")[flat] == divided.flat_view("label")[flat])) if len(flat) else 1.0
    return {
        "blocks": volume.block_count,
        "nodes": int(len(flat)),
        "agreement": agree,
        "whole_seconds": whole_seconds,
        "divided_seconds": divided_seconds,
        "speedup": whole_seconds / divided_seconds if divided_seconds > 0 else float("inf"),
    }


def fast_vs_brute(volume: VolumetricMap, cfg: CrfConfig, count: int = 20,
                  max_nodes: int = 5000) -> pd.DataFrame:
    """Label agreement of the two inference paths on individual submaps"""
    rows = []
    for group in divide_map(volume, cfg.max_blocks_per_submap):
        submap = build_submap(volume, group)
        if submap.n_labels < 2 or submap.n_nodes > max_nodes:
            continue
        fast = mean_field_fast(submap, cfg)
        brute = mean_field_brute(submap, cfg)
        rows.append({"blocks": len(group), "nodes": submap.n_nodes, "labels": submap.n_labels,
                     "agreement": float(np.mean(fast == brute))})
        if len(rows) >= count:
            break
    return pd.DataFrame(rows, columns=["blocks", "nodes", "labels", "agreement"])


def max_blocks_sweep(volume: VolumetricMap, cfg: CrfConfig, values: Sequence[int]) -> pd.DataFrame:
    """Time and agreement with whole-map fast inference per submap size cap"""
    reference = volume.copy()
    regularize(reference, replace(cfg, max_blocks_per_submap=max(volume.block_count, 1)))
    flat = _node_flat(volume)
    rows = []
    for max_blocks in values:
        trial = volume.copy()
        stats, seconds = _timed_regularize(trial, replace(cfg, max_blocks_per_submap=max_blocks))
        agree = float(np.mean(trial.flat_view("label")[flat] == reference.flat_view("label")[flat])) if len(flat) else 1.0
        rows.append({"max_blocks": max_blocks, "submaps": stats.submaps, "seconds": seconds,
                     "agreement": agree})
    return pd.DataFrame(rows)


def generate_summary_report(summary: Dict):
    """Print a summary of every benchmark that ran"""
    print(f"\n{'=' * 60}")
    print("BENCHMARK SUMMARY")
    print('=' * 60)
    if "crf" in summary:
        delta = summary["crf"]["mean_delta"]
        print(f"CRF ablation over {summary['crf']['seeds']} seeds: "
              f"dPQ={delta['pq']:+.4f} dSQ={delta['sq']:+.4f} dRQ={delta['rq']:+.4f}")
    if "division" in summary:
        d = summary["division"]
        print(f"Map division: {d['blocks']} blocks, {d['nodes']} nodes, "
              f"agreement {d['agreement']:.3f}, speedup {d['speedup']:.1f}x")
    if "fast_brute" in summary:
        f = summary["fast_brute"]
        print(f"Fast vs exhaustive: {f['submaps']} submaps, mean agreement {f['mean_agreement']:.3f}, "
              f"min {f['min_agreement']:.3f}")
    if "sweep" in summary:
        print("max_blocks sweep:")
        print(pd.DataFrame(summary["sweep"]).to_string(index=False))


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Desk-scale benchmarks")
    parser.add_argument("benchmarks", nargs="*", default=["crf", "division", "fast-brute", "sweep"],
                        choices=["crf", "division", "fast-brute", "sweep"])
    parser.add_argument("--scene", default=DEFAULT_SCENE)
    parser.add_argument("--out", default="out/benchmarks")
    parser.add_argument("--seeds", type=int, default=10)
    parser.add_argument("--frames", type=int, default=30)
    parser.add_argument("--voxel-size", type=float, default=0.05)
    parser.add_argument("--division-voxel-size", type=float, default=0.08)
    parser.add_argument("--division-block-side", type=int, default=4)
    parser.add_argument("--max-blocks", type=int, default=25)
    args = parser.parse_args(argv)

    logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
    os.makedirs(args.out, exist_ok=True)
    scene = load_json(args.scene)
    crf_cfg = RunConfig().crf
    summary: Dict = {}

    if "crf" in args.benchmarks:
        results = crf_ablation(scene, range(args.seeds), args.frames, args.voxel_size)
        results.to_csv(os.path.join(args.out, "crf_ablation.csv"), index=False)
        summary["crf"] = summarize_ablation(results)

    if {"division", "fast-brute", "sweep"} & set(args.benchmarks):
        volume = build_map(scene, args.division_voxel_size, args.division_block_side, args.frames)
        if "division" in args.benchmarks:
            summary["division"] = division_agreement(volume, crf_cfg, args.max_blocks)
        if "fast-brute" in args.benchmarks:
            table = fast_vs_brute(volume, replace(crf_cfg, max_blocks_per_submap=args.max_blocks))
            table.to_csv(os.path.join(args.out, "fast_vs_brute.csv"), index=False)
            summary["fast_brute"] = {
                "submaps": int(len(table)),
                "mean_agreement": float(table["agreement"].mean()) if len(table) else 1.0,
                "min_agreement": float(table["agreement"].min()) if len(table) else 1.0,
            }
        if "sweep" in args.benchmarks:
            table = max_blocks_sweep(volume, crf_cfg, SWEEP_VALUES)
            table.to_csv(os.path.join(args.out, "max_blocks_sweep.csv"), index=False)
            summary["sweep"] = table.to_dict(orient="records")

    save_json(os.path.join(args.out, "summary.json"), summary)
    generate_summary_report(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
