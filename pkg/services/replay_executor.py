"""
Replay Executor Service
Replays a recorded dataset through the mapping pipeline: label fusion,
reference rendering, tracking, integration and probability integration per
frame; scheduled regularization and meshing; final mesh, timing and metrics.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import plotly.graph_objects as go

import config
from config_manager import RunConfig
from services.crf_regularizer import regularize
from services.dataset_store import FrameDataset, save_json
from services.instance_registry import InstanceRegistry, integrate_thing_probabilities
from services.instance_tracker import render_reference_labels, summarize_tracking, track_labels
from services.mesh_extractor import LabeledMesh, extract_mesh
from services.panoptic_evaluator import evaluate_mesh, format_text_report
from services.panoptic_frontend import fuse_panoptic
from services.ply_store import export_ply, sidecar_path, write_sidecar
from services.synthetic_world import SceneDataset
from services.tsdf_integrator import integrate_frame
from services.volumetric_map import VolumetricMap
from utils.errors import FrameError
from utils.geometry import CameraFrame
from utils.stage_timer import StageTimer

logger = logging.getLogger(__name__)


@dataclass
class ReplayState:
    """Live map state of a replay"""
    volume: VolumetricMap
    registry: InstanceRegistry = field(default_factory=InstanceRegistry)
    frames_processed: int = 0
    frames_skipped: List[int] = field(default_factory=list)
    last_camera: Optional[CameraFrame] = None
    regularization_runs: List[Dict] = field(default_factory=list)
    tracking_totals: Dict[str, float] = field(default_factory=lambda: {"matched": 0, "created": 0})
    integration_totals: Dict[str, int] = field(default_factory=lambda: {"observations": 0, "labels_replaced": 0})


class ReplayExecutor:
    """Run a configured replay and write its outputs"""

    def __init__(self, cfg: RunConfig, evaluate: bool = True):
        self.cfg = cfg
        self.evaluate = evaluate
        self.timer = StageTimer(config.PIPELINE_STAGES)
        self.dataset: Optional[Union[FrameDataset, SceneDataset]] = None
        self.state: Optional[ReplayState] = None
        self.mesh: Optional[LabeledMesh] = None

    def _new_map(self) -> VolumetricMap:
        truncation = self.cfg.integration.truncation
        return VolumetricMap(self.cfg.map.voxel_size, self.cfg.map.block_side,
                             truncation if truncation is not None else 4.0 * self.cfg.map.voxel_size)

    def process_frame(self, index: int) -> bool:
        """Run the per-frame stages; False when the frame was skipped"""
        state, cfg, timer = self.state, self.cfg, self.timer
        try:
            with timer.measure("load"):
                cam, segmentation = self.dataset.load_frame(index)
        except FrameError as e:
            logger.warning(f"Skipping {e}")
            state.frames_skipped.append(index)
            return False

        schema = self.dataset.schema
        with timer.measure("label_fusion"):
            raw = fuse_panoptic(segmentation, schema)
        with timer.measure("reference_generation"):
            reference = render_reference_labels(state.volume, cam)
        with timer.measure("tracking"):
            resolved, assignment = track_labels(raw, reference, state.volume, cfg.tracking)
        tracking = summarize_tracking(raw, reference, assignment)
        state.tracking_totals["matched"] += tracking.matched
        state.tracking_totals["created"] += tracking.created
        with timer.measure("integration"):
            integration = integrate_frame(state.volume, cam, resolved, cfg.integration)
        state.integration_totals["observations"] += integration.observations
        state.integration_totals["labels_replaced"] += integration.labels_replaced
        with timer.measure("probability_integration"):
            integrate_thing_probabilities(state.registry, assignment, segmentation)

        state.frames_processed += 1
        state.last_camera = cam
        logger.debug(f"Frame {index}: {tracking.matched} matched, {tracking.created} new instances, "
                     f"{integration.voxels_updated} voxels updated")
        return True

    def _run_schedule(self, step: int):
        schedule = self.cfg.schedule
        if schedule.enable_crf and schedule.regularize_every and step % schedule.regularize_every == 0:
            self.regularize()
        if schedule.mesh_every and step % schedule.mesh_every == 0:
            with self.timer.measure("meshing"):
                mesh = extract_mesh(self.state.volume, self.state.registry, self.cfg.meshing.min_corner_weight)
            logger.info(f"Scheduled mesh after frame step {step}: {mesh.n_vertices} vertices")

    def regularize(self):
        with self.timer.measure("regularization"):
            stats = regularize(self.state.volume, self.cfg.crf, camera=self.state.last_camera)
        self.state.regularization_runs.append(stats.to_dict())

    def run(self) -> Dict:
        """Replay every frame, then write the mesh, sidecar, timing and metrics"""
        cfg = self.cfg
        self.dataset = open_dataset(cfg.dataset, cfg.seed)
        self.state = ReplayState(self._new_map())
        os.makedirs(cfg.output_dir, exist_ok=True)

        total = self.dataset.frame_count
        if cfg.max_frames is not None:
            total = min(total, cfg.max_frames)
        logger.info(f"Replaying {total} frames from {cfg.dataset}")

        for index in range(total):
            self.process_frame(index)
            self._run_schedule(index + 1)

        if cfg.schedule.enable_crf and cfg.schedule.final_regularization and self.state.frames_processed:
            logger.info("Final regularization pass")
            self.regularize()

        with self.timer.measure("meshing"):
            self.mesh = extract_mesh(self.state.volume, self.state.registry, cfg.meshing.min_corner_weight)
        return self._write_outputs(total)

    def _write_outputs(self, total: int) -> Dict:
        cfg, state, schema = self.cfg, self.state, self.dataset.schema
        out = cfg.output_dir
        mesh_path = os.path.join(out, config.OUTPUT_FILES["mesh"])
        export_ply(self.mesh, mesh_path, schema)
        write_sidecar(self.mesh, sidecar_path(mesh_path), schema)

        metrics = None
        if self.evaluate and self.dataset.has_ground_truth:
            metrics = evaluate_mesh(self.mesh, self.dataset.load_ground_truth(), schema,
                                    cfg.evaluation, cfg.map.voxel_size)
            save_json(os.path.join(out, config.OUTPUT_FILES["metrics_json"]), metrics)
            with open(os.path.join(out, config.OUTPUT_FILES["metrics_text"]), "w", encoding="utf-8") as f:
                f.write(format_text_report(metrics))

        timing = self.timer.to_frame()
        timing.to_csv(os.path.join(out, config.OUTPUT_FILES["timing_csv"]), index=False)
        write_timing_chart(timing, os.path.join(out, config.OUTPUT_FILES["timing_chart"]))

        report = {
            "dataset": cfg.dataset,
            "seed": cfg.seed,
            "frames_requested": total,
            "frames_processed": state.frames_processed,
            "frames_skipped": state.frames_skipped,
            "blocks": state.volume.block_count,
            "memory_bytes": state.volume.memory_bytes,
            "instances_allocated": state.volume.next_instance_id - 1,
            "instances_registered": len(state.registry),
            "tracking": state.tracking_totals,
            "integration": state.integration_totals,
            "regularization": {
                "runs": len(state.regularization_runs),
                "labels_changed": sum(r["labels_changed"] for r in state.regularization_runs),
                "label_count_convention": "per_submap",
                "last": state.regularization_runs[-1] if state.regularization_runs else None,
            },
            "mesh": {"vertices": self.mesh.n_vertices, "triangles": self.mesh.n_triangles},
            "metrics": metrics["panoptic"] if metrics else None,
            "semantic_miou": metrics["semantic"]["mean_iou"] if metrics else None,
            "timing_ms": {row.stage: round(row.total_ms, 3) for row in timing.itertuples()},
            "config": cfg.to_dict(),
        }
        save_json(os.path.join(out, config.OUTPUT_FILES["report"]), report)
        logger.info(f"Replay finished: {state.frames_processed} frames, {len(state.frames_skipped)} skipped, "
                    f"{self.mesh.n_vertices} mesh vertices")
        return report


def write_timing_chart(timing, path: str):
    """Bar chart of total milliseconds per pipeline stage"""
    fig = go.Figure(go.Bar(x=timing["stage"], y=timing["total_ms"],
                           text=timing["calls"], hovertemplate="%{x}: %{y:.1f} ms (%{text} calls)"))
    fig.update_layout(title="Per-stage processing time", xaxis_title="Stage",
                      yaxis_title="Total time (ms)", template="plotly_white")
    fig.write_html(path, include_plotlyjs="cdn")


def run_replay(cfg: RunConfig, evaluate: bool = True) -> Dict:
    """Replay the configured dataset and return the run report"""
    return ReplayExecutor(cfg, evaluate).run()


def open_dataset(path: str, seed: Optional[int] = None) -> Union[FrameDataset, SceneDataset]:
    """A dataset directory, or a scene description JSON rendered on the fly under the run seed"""
    if os.path.isfile(path) and path.endswith(".json"):
        dataset = SceneDataset.from_file(path, seed)
        logger.info(f"Rendering scene '{dataset.spec.name}' on the fly with seed {dataset.spec.seed}")
        return dataset
    if seed is not None:
        logger.warning(f"Seed {seed} has no effect on the pre-rendered dataset {path}")
    return FrameDataset(path)
