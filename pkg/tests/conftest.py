"""
Shared fixtures: a small label schema and a compact synthetic scene
"""
import copy
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from services.synthetic_world import scene_from_dict
from services.volumetric_map import LabelSchema, VolumetricMap

FLOOR, WALL, BALL, CRATE = 1, 2, 11, 12

TINY_SCENE = {
    "name": "tiny",
    "seed": 3,
    "classes": {"stuff": {"1": "floor", "2": "wall"}, "things": {"11": "ball", "12": "crate"}},
    "extents": [[-1.0, -1.0, 0.0], [1.0, 1.0, 1.0]],
    "planes": [
        {"origin": [-1.0, -1.0, 0.0], "u": [2.0, 0.0, 0.0], "v": [0.0, 2.0, 0.0], "class": 1,
         "color": [150, 140, 120]},
        {"origin": [-1.0, -1.0, 0.0], "u": [2.0, 0.0, 0.0], "v": [0.0, 0.0, 1.0], "class": 2,
         "color": [200, 200, 190]},
    ],
    "spheres": [
        {"center": [0.25, 0.2, 0.2], "radius": 0.2, "class": 11, "instance": 1, "color": [220, 60, 60]},
    ],
    "boxes": [
        {"center": [-0.25, -0.2, 0.15], "half_size": [0.15, 0.15, 0.15], "class": 12, "instance": 2,
         "color": [60, 120, 200]},
    ],
    "camera": {"width": 80, "height": 60, "fx": 70.0, "fy": 70.0, "cx": 39.5, "cy": 29.5},
    "trajectory": {"type": "orbit", "center": [0.0, 0.0, 0.0], "target": [0.0, 0.0, 0.15],
                   "radius": 0.85, "height": 0.8, "frames": 16, "loops": 1.0},
}


@pytest.fixture
def schema():
    return LabelSchema({FLOOR: "floor", WALL: "wall"}, {BALL: "ball", CRATE: "crate"})


@pytest.fixture
def tiny_scene_dict():
    return copy.deepcopy(TINY_SCENE)


@pytest.fixture
def tiny_scene(tiny_scene_dict):
    return scene_from_dict(tiny_scene_dict)


@pytest.fixture
def small_map():
    return VolumetricMap(voxel_size=0.05, block_side=8)
