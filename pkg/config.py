"""
Configuration settings for the Panoptic Mapping Engine
"""
import os
from typing import Dict
from dotenv import load_dotenv

load_dotenv()

# Logging
LOG_LEVEL = os.getenv("PANOPTIC_LOG_LEVEL", "INFO").upper()
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

# Application Settings
APP_TITLE = "Panoptic Mapping Engine"
APP_DESCRIPTION = "Online volumetric panoptic mapping with label tracking and CRF regularization"
VERSION = "1.0.0"

# Volumetric map (voxel size 0.024 m, 16^3 voxels per block)
MAP_CONFIG = {
    "voxel_size": 0.024,
    "block_side": 16,
}

# Raycasting integration
INTEGRATION_CONFIG = {
    "truncation": None,  # None = 4 x voxel_size
    "behind_truncation": None,  # None = same as truncation
    "max_ray_length": 5.0,
    "weight_mode": "quadric",
}

# Panoptic label tracking
TRACKING_CONFIG = {
    "iou_threshold": 0.25,
}

# Fully connected CRF
CRF_CONFIG = {
    "w1": 10.0,
    "w2": 15.0,
    "theta_alpha": 0.05,
    "theta_beta": 20.0,
    "iterations": 5,
    "max_blocks_per_submap": 25,
    "kernel_radius_sigmas": 3.0,
    "brute_force_max_nodes": 20000,
    "frustum_only": False,
    "workers": 1,
    "inference": "fast",
}

# Mesh extraction
MESH_CONFIG = {
    "min_corner_weight": 0.0,
}

# Vertex level evaluation
EVALUATION_CONFIG = {
    "association_radius": None,  # None = 2 x voxel_size
    "min_vertices": 100,
    "coverage_only": False,
}

# Replay schedule, counted in frames
SCHEDULE_CONFIG = {
    "regularize_every": 10,
    "mesh_every": 0,
    "final_regularization": True,
    "enable_crf": True,
}

# Files written into the run output directory
OUTPUT_FILES = {
    "mesh": "mesh.ply",
    "sidecar": "mesh.instances.txt",
    "metrics_json": "metrics.json",
    "metrics_text": "metrics.txt",
    "timing_csv": "timing.csv",
    "timing_chart": "timing.html",
    "report": "report.json",
}

# Stage names used in timing reports, in pipeline order
PIPELINE_STAGES = [
    "load",
    "label_fusion",
    "reference_generation",
    "tracking",
    "integration",
    "probability_integration",
    "regularization",
    "meshing",
]


def get_default_sections() -> Dict[str, Dict]:
    """Return a fresh copy of all default config sections"""
    return {
        "map": dict(MAP_CONFIG),
        "integration": dict(INTEGRATION_CONFIG),
        "tracking": dict(TRACKING_CONFIG),
        "crf": dict(CRF_CONFIG),
        "meshing": dict(MESH_CONFIG),
        "evaluation": dict(EVALUATION_CONFIG),
        "schedule": dict(SCHEDULE_CONFIG),
    }
