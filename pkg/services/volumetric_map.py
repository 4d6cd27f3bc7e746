"""
Spatially hashed TSDF volumetric map
Label schema, panoptic label codes, voxel blocks and world <-> voxel transforms
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from utils.errors import InputError, MapResourceError

logger = logging.getLogger(__name__)

BlockIndex = Tuple[int, int, int]

UNKNOWN_CODE = 0

# Grid-aligned inputs (0.384 / 0.024) must not fall one voxel short after division
_SNAP_DECIMALS = 9

# Integer rows packed into one int64 key while the packed range stays below this
_MAX_PACKED_RANGE = 2.0 ** 62


def unique_rows(rows: np.ndarray, return_inverse: bool = False):
    """np.unique(rows, axis=0) for integer rows, computed on packed scalar keys.

    Rows are shifted to start at zero and raveled in C order, so the packed
    keys sort exactly like the rows do lexicographically.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.ndim != 2:
        raise InputError(f"unique_rows needs a 2D array, got shape {rows.shape}")
    if len(rows) == 0:
        return (rows.copy(), np.empty(0, dtype=np.int64)) if return_inverse else rows.copy()
    low = rows.min(axis=0)
    dims = tuple(int(v) for v in rows.max(axis=0) - low + 1)
    if np.prod(np.asarray(dims, dtype=np.float64)) >= _MAX_PACKED_RANGE:
        if return_inverse:
            unique, inverse = np.unique(rows, axis=0, return_inverse=True)
            return unique, inverse.reshape(-1)
        return np.unique(rows, axis=0)
    keys = np.ravel_multi_index(tuple((rows - low).T), dims)
    if return_inverse:
        unique_keys, inverse = np.unique(keys, return_inverse=True)
    else:
        unique_keys = np.unique(keys)
    unique = np.column_stack(np.unravel_index(unique_keys, dims)).astype(np.int64) + low
    if return_inverse:
        return unique, inverse.reshape(-1)
    return unique


@dataclass(frozen=True)
class PanopticLabel:
    """Stuff class, map/frame instance ID, or unknown.

    Arrays store labels as integer codes: 0 = Unknown, +z = Instance(z),
    -c = Stuff(c). Class IDs and instance IDs are both >= 1.
    """
    kind: str
    value: int = 0

    @classmethod
    def stuff(cls, class_id: int) -> "PanopticLabel":
        if class_id < 1:
            raise InputError(f"stuff class IDs are positive, got {class_id}")
        return cls("stuff", int(class_id))

    @classmethod
    def instance(cls, instance_id: int) -> "PanopticLabel":
        if instance_id < 1:
            raise InputError(f"instance IDs are positive, got {instance_id}")
        return cls("instance", int(instance_id))

    @classmethod
    def unknown(cls) -> "PanopticLabel":
        return cls("unknown", 0)

    @classmethod
    def from_code(cls, code: int) -> "PanopticLabel":
        code = int(code)
        if code > 0:
            return cls("instance", code)
        if code < 0:
            return cls("stuff", -code)
        return cls("unknown", 0)

    @property
    def code(self) -> int:
        if self.kind == "instance":
            return self.value
        if self.kind == "stuff":
            return -self.value
        return UNKNOWN_CODE

    @property
    def is_unknown(self) -> bool:
        return self.kind == "unknown"

    def __str__(self):
        if self.kind == "unknown":
            return "Unknown"
        return f"{self.kind.capitalize()}({self.value})"


def stuff_code(class_id) -> np.ndarray:
    return -np.asarray(class_id, dtype=np.int64)


@dataclass
class LabelSchema:
    """Disjoint stuff and thing class sets with display names"""
    stuff_classes: Dict[int, str]
    thing_classes: Dict[int, str]

    def __post_init__(self):
        self.stuff_classes = {int(k): str(v) for k, v in self.stuff_classes.items()}
        self.thing_classes = {int(k): str(v) for k, v in self.thing_classes.items()}
        overlap = set(self.stuff_classes) & set(self.thing_classes)
        if overlap:
            raise InputError(f"classes cannot be both stuff and thing: {sorted(overlap)}")
        if any(c < 1 for c in list(self.stuff_classes) + list(self.thing_classes)):
            raise InputError("class IDs must be positive (0 is reserved for void)")

    @property
    def stuff_ids(self) -> List[int]:
        return sorted(self.stuff_classes)

    @property
    def thing_ids(self) -> List[int]:
        return sorted(self.thing_classes)

    @property
    def class_ids(self) -> List[int]:
        return sorted(list(self.stuff_classes) + list(self.thing_classes))

    def is_stuff(self, class_id: int) -> bool:
        return int(class_id) in self.stuff_classes

    def is_thing(self, class_id: int) -> bool:
        return int(class_id) in self.thing_classes

    def class_name(self, class_id: int) -> str:
        class_id = int(class_id)
        return self.stuff_classes.get(class_id) or self.thing_classes.get(class_id) or "unknown"

    def to_dict(self) -> Dict:
        return {
            "stuff": {str(k): v for k, v in sorted(self.stuff_classes.items())},
            "things": {str(k): v for k, v in sorted(self.thing_classes.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "LabelSchema":
        try:
            return cls(stuff_classes=data["stuff"], thing_classes=data["things"])
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"invalid label schema: {e}") from e


@dataclass
class Voxel:
    """Snapshot of one voxel's state"""
    tsdf: float
    weight_d: float
    color: Tuple[float, float, float]
    label: PanopticLabel
    weight_l: float


class VoxelBlock:
    """View of one B^3 block inside the map's pooled storage.

    Voxel arrays are indexed [x, y, z]; the flat order is row-major,
    linear = (x * B + y) * B + z.
    """

    def __init__(self, index: BlockIndex, slot: int, owner: "VolumetricMap"):
        self.index = index
        self.slot = slot
        self._owner = owner

    def _view(self, pool: np.ndarray) -> np.ndarray:
        side = self._owner.block_side
        return pool[self.slot].reshape((side, side, side) + pool.shape[2:])

    @property
    def tsdf(self) -> np.ndarray:
        return self._view(self._owner.tsdf)

    @property
    def weight_d(self) -> np.ndarray:
        return self._view(self._owner.weight_d)

    @property
    def color(self) -> np.ndarray:
        return self._view(self._owner.color)

    @property
    def label(self) -> np.ndarray:
        return self._view(self._owner.label)

    @property
    def weight_l(self) -> np.ndarray:
        return self._view(self._owner.weight_l)

    def voxel(self, x: int, y: int, z: int) -> Voxel:
        return Voxel(
            tsdf=float(self.tsdf[x, y, z]),
            weight_d=float(self.weight_d[x, y, z]),
            color=tuple(float(c) for c in self.color[x, y, z]),
            label=PanopticLabel.from_code(self.label[x, y, z]),
            weight_l=float(self.weight_l[x, y, z]),
        )

    def is_observed(self) -> bool:
        return bool(np.any(self._owner.weight_d[self.slot] > 0))


class VolumetricMap:
    """Hash table of voxel blocks keyed by integer block index"""

    INITIAL_CAPACITY = 64

    def __init__(self, voxel_size: float = 0.024, block_side: int = 16,
                 truncation: Optional[float] = None):
        if voxel_size <= 0:
            raise InputError("voxel_size must be positive")
        if block_side < 1:
            raise InputError("block_side must be at least 1")
        self.voxel_size = float(voxel_size)
        self.block_side = int(block_side)
        self.truncation = float(truncation) if truncation is not None else 4.0 * self.voxel_size
        if self.truncation <= self.voxel_size:
            raise InputError("truncation must exceed voxel_size")
        self.blocks: Dict[BlockIndex, VoxelBlock] = {}
        self.next_instance_id = 1
        self._capacity = 0
        self.tsdf = np.empty((0, self.voxels_per_block))
        self.weight_d = np.empty((0, self.voxels_per_block))
        self.color = np.empty((0, self.voxels_per_block, 3))
        self.label = np.empty((0, self.voxels_per_block), dtype=np.int64)
        self.weight_l = np.empty((0, self.voxels_per_block))

    @property
    def voxels_per_block(self) -> int:
        return self.block_side ** 3

    @property
    def block_size(self) -> float:
        """Block edge length in meters"""
        return self.voxel_size * self.block_side

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    @property
    def memory_bytes(self) -> int:
        per_voxel = (self.tsdf.itemsize + self.weight_d.itemsize + 3 * self.color.itemsize
                     + self.label.itemsize + self.weight_l.itemsize)
        return self.block_count * self.voxels_per_block * per_voxel

    # Coordinate transforms -------------------------------------------------

    def world_to_global(self, points: np.ndarray) -> np.ndarray:
        """Global integer voxel coordinates floor(p / voxel_size) for Nx3 points.

        p / voxel_size is rounded to 9 decimals before the floor. A point
        within 1e-9 voxel below a voxel face therefore lands in the voxel
        above it: p = -1e-12 maps to voxel 0, not -1.
        """
        scaled = np.round(np.asarray(points, dtype=np.float64) / self.voxel_size, _SNAP_DECIMALS)
        return np.floor(scaled).astype(np.int64)

    def split_global(self, global_voxels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Split global voxel coordinates into (block index, intra-block index)"""
        global_voxels = np.asarray(global_voxels, dtype=np.int64)
        return (np.floor_divide(global_voxels, self.block_side),
                np.mod(global_voxels, self.block_side))

    def world_to_voxel(self, point) -> Tuple[BlockIndex, BlockIndex]:
        """Block index and intra-block voxel index of the voxel containing point"""
        global_voxel = self.world_to_global(np.asarray(point, dtype=np.float64).reshape(1, 3))
        block, local = self.split_global(global_voxel)
        return tuple(int(v) for v in block[0]), tuple(int(v) for v in local[0])

    def voxel_to_world(self, block_index, voxel_index) -> np.ndarray:
        """Center of the voxel in meters"""
        global_voxel = (np.asarray(block_index, dtype=np.int64) * self.block_side
                        + np.asarray(voxel_index, dtype=np.int64))
        return (global_voxel + 0.5) * self.voxel_size

    def global_to_world(self, global_voxels: np.ndarray) -> np.ndarray:
        return (np.asarray(global_voxels, dtype=np.float64) + 0.5) * self.voxel_size

    # Block storage ---------------------------------------------------------

    def _grow(self, needed: int):
        new_capacity = max(self.INITIAL_CAPACITY, self._capacity)
        while new_capacity < needed:
            new_capacity *= 2
        extra = new_capacity - self._capacity
        n = self.voxels_per_block
        try:
            self.tsdf = np.concatenate([self.tsdf, np.full((extra, n), self.truncation)])
            self.weight_d = np.concatenate([self.weight_d, np.zeros((extra, n))])
            self.color = np.concatenate([self.color, np.zeros((extra, n, 3))])
            self.label = np.concatenate([self.label, np.zeros((extra, n), dtype=np.int64)])
            self.weight_l = np.concatenate([self.weight_l, np.zeros((extra, n))])
        except MemoryError as e:
            raise MapResourceError(
                f"could not grow block pool to {new_capacity} blocks") from e
        logger.debug(f"Block pool grown to {new_capacity} blocks")
        self._capacity = new_capacity

    def get_or_allocate_block(self, block_index) -> VoxelBlock:
        """Return the block at block_index, inserting an unobserved one if absent"""
        key = tuple(int(v) for v in block_index)
        block = self.blocks.get(key)
        if block is not None:
            return block
        slot = len(self.blocks)
        if slot >= self._capacity:
            self._grow(slot + 1)
        block = VoxelBlock(key, slot, self)
        self.blocks[key] = block
        return block

    def get_block(self, block_index) -> Optional[VoxelBlock]:
        return self.blocks.get(tuple(int(v) for v in block_index))

    def allocate_blocks(self, block_indices: np.ndarray) -> np.ndarray:
        """Allocate every listed block and return their slots (row-aligned)"""
        block_indices = np.asarray(block_indices, dtype=np.int64).reshape(-1, 3)
        if len(block_indices) == 0:
            return np.empty(0, dtype=np.int64)
        unique, inverse = unique_rows(block_indices, return_inverse=True)
        slots = np.array([self.get_or_allocate_block(idx).slot for idx in unique], dtype=np.int64)
        return slots[inverse]

    def lookup_slots(self, block_indices: np.ndarray) -> np.ndarray:
        """Slots of the listed blocks, -1 where a block is not allocated"""
        block_indices = np.asarray(block_indices, dtype=np.int64).reshape(-1, 3)
        if len(block_indices) == 0 or not self.blocks:
            return np.full(len(block_indices), -1, dtype=np.int64)
        unique, inverse = unique_rows(block_indices, return_inverse=True)
        slots = np.full(len(unique), -1, dtype=np.int64)
        for i, idx in enumerate(unique):
            block = self.blocks.get(tuple(int(v) for v in idx))
            if block is not None:
                slots[i] = block.slot
        return slots[inverse]

    def flat_indices(self, global_voxels: np.ndarray, allocate: bool = False) -> np.ndarray:
        """Indices into the flattened pools for global voxel coordinates, -1 if unallocated"""
        block_idx, local = self.split_global(global_voxels)
        slots = self.allocate_blocks(block_idx) if allocate else self.lookup_slots(block_idx)
        side = self.block_side
        linear = (local[:, 0] * side + local[:, 1]) * side + local[:, 2]
        return np.where(slots >= 0, slots * self.voxels_per_block + linear, -1)

    def flat_view(self, name: str) -> np.ndarray:
        """Pool array reshaped to one row per voxel (shares memory)"""
        pool = getattr(self, name)
        return pool.reshape((-1,) + pool.shape[2:])

    def block_global_coords(self, block: VoxelBlock) -> np.ndarray:
        """Global voxel coordinates of every voxel in the block, in flat order"""
        side = self.block_side
        grid = np.stack(np.meshgrid(np.arange(side), np.arange(side), np.arange(side),
                                    indexing="ij"), axis=-1).reshape(-1, 3)
        return grid + np.asarray(block.index, dtype=np.int64) * side

    def observed_blocks(self) -> List[BlockIndex]:
        """Indices of blocks holding at least one observed voxel, ascending"""
        return sorted(idx for idx, block in self.blocks.items() if block.is_observed())

    def iter_blocks(self) -> Iterable[VoxelBlock]:
        for key in sorted(self.blocks):
            yield self.blocks[key]

    # Instances ---------------------------------------------------------------

    def allocate_instance_id(self) -> int:
        """Return a fresh map-wide instance ID (1, 2, 3, ...)"""
        instance_id = self.next_instance_id
        self.next_instance_id += 1
        return instance_id

    def copy(self) -> "VolumetricMap":
        """Independent snapshot of the map"""
        clone = VolumetricMap(self.voxel_size, self.block_side, self.truncation)
        clone.next_instance_id = self.next_instance_id
        clone._capacity = self._capacity
        clone.tsdf = self.tsdf.copy()
        clone.weight_d = self.weight_d.copy()
        clone.color = self.color.copy()
        clone.label = self.label.copy()
        clone.weight_l = self.weight_l.copy()
        clone.blocks = {key: VoxelBlock(key, block.slot, clone) for key, block in self.blocks.items()}
        return clone
