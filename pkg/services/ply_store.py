"""
Binary PLY storage for labeled meshes and labeled point sets
Vertices carry x, y, z (double), red, green, blue (uchar), panoptic_id and
class_id (int). panoptic_id: 0 = unknown, 1..K = stuff classes in ascending
class ID order, K + z = instance z. The stuff class list is written as a
header comment so files decode without the label schema.
"""
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.mesh_extractor import LabeledMesh
from services.panoptic_evaluator import LabeledPointSet
from services.volumetric_map import LabelSchema
from utils.errors import InputError

logger = logging.getLogger(__name__)

VERTEX_DTYPE = np.dtype([
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("panoptic_id", "<i4"), ("class_id", "<i4"),
])
FACE_DTYPE = np.dtype([("count", "u1"), ("vertex_indices", "<i4", (3,))])
STUFF_COMMENT = "stuff_classes"


def encode_panoptic_ids(labels: np.ndarray, stuff_ids: Sequence[int]) -> np.ndarray:
    """Label codes -> panoptic_id values"""
    labels = np.asarray(labels, dtype=np.int64)
    stuff = np.asarray(sorted(stuff_ids), dtype=np.int64)
    ids = np.zeros(len(labels), dtype=np.int64)
    instance = labels > 0
    ids[instance] = len(stuff) + labels[instance]
    is_stuff = labels < 0
    if len(stuff) and np.any(is_stuff):
        classes = -labels[is_stuff]
        rank = np.searchsorted(stuff, classes)
        known = (rank < len(stuff)) & (stuff[np.minimum(rank, len(stuff) - 1)] == classes)
        ids[np.flatnonzero(is_stuff)[known]] = rank[known] + 1
    return ids


def decode_panoptic_ids(ids: np.ndarray, stuff_ids: Sequence[int]) -> np.ndarray:
    """panoptic_id values -> label codes"""
    ids = np.asarray(ids, dtype=np.int64)
    stuff = np.asarray(sorted(stuff_ids), dtype=np.int64)
    k = len(stuff)
    labels = np.zeros(len(ids), dtype=np.int64)
    is_stuff = (ids >= 1) & (ids <= k)
    labels[is_stuff] = -stuff[ids[is_stuff] - 1]
    labels[ids > k] = ids[ids > k] - k
    return labels


def _header(n_vertices: int, n_faces: Optional[int], stuff_ids: Sequence[int]) -> bytes:
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"comment {STUFF_COMMENT} " + " ".join(str(int(c)) for c in sorted(stuff_ids)),
        f"element vertex {n_vertices}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property int panoptic_id",
        "property int class_id",
    ]
    if n_faces is not None:
        lines += [f"element face {n_faces}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _vertex_records(points: np.ndarray, colors: np.ndarray, panoptic_ids: np.ndarray,
                    class_ids: np.ndarray) -> np.ndarray:
    records = np.zeros(len(points), dtype=VERTEX_DTYPE)
    records["x"], records["y"], records["z"] = points[:, 0], points[:, 1], points[:, 2]
    records["red"], records["green"], records["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    records["panoptic_id"] = panoptic_ids
    records["class_id"] = class_ids
    return records


def _write_atomic(path: str, chunks: List[bytes]):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        for chunk in chunks:
            f.write(chunk)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def export_ply(mesh: LabeledMesh, path: str, schema: LabelSchema):
    """Write the mesh as binary little-endian PLY"""
    mesh.validate()
    records = _vertex_records(mesh.vertices, mesh.colors,
                              encode_panoptic_ids(mesh.labels, schema.stuff_ids), mesh.class_ids)
    faces = np.zeros(mesh.n_triangles, dtype=FACE_DTYPE)
    faces["count"] = 3
    faces["vertex_indices"] = mesh.triangles
    _write_atomic(path, [_header(mesh.n_vertices, mesh.n_triangles, schema.stuff_ids),
                         records.tobytes(), faces.tobytes()])
    logger.info(f"Wrote {path} ({mesh.n_vertices} vertices, {mesh.n_triangles} faces)")


def _read_ply(path: str) -> Tuple[Dict[str, int], List[int], bytes]:
    with open(path, "rb") as f:
        data = f.read()
    marker = b"end_header\n"
    end = data.find(marker)
    if not data.startswith(b"ply\n") or end < 0:
        raise InputError(f"{path} is not a PLY file")
    counts: Dict[str, int] = {}
    stuff_ids: List[int] = []
    for line in data[:end].decode("ascii").splitlines():
        parts = line.split()
        if parts[:1] == ["format"] and parts[1] != "binary_little_endian":
            raise InputError(f"{path}: unsupported PLY format {parts[1]}")
        if parts[:1] == ["element"]:
            counts[parts[1]] = int(parts[2])
        if parts[:2] == ["comment", STUFF_COMMENT]:
            stuff_ids = [int(v) for v in parts[2:]]
    return counts, stuff_ids, data[end + len(marker):]


def _decode_vertices(path: str, body: bytes, n_vertices: int) -> np.ndarray:
    size = n_vertices * VERTEX_DTYPE.itemsize
    if len(body) < size:
        raise InputError(f"{path}: truncated vertex data")
    return np.frombuffer(body[:size], dtype=VERTEX_DTYPE)


def load_ply(path: str) -> LabeledMesh:
    """Read a mesh written by export_ply (sidecar probabilities are picked up when present)"""
    counts, stuff_ids, body = _read_ply(path)
    n_vertices, n_faces = counts.get("vertex", 0), counts.get("face", 0)
    vertices = _decode_vertices(path, body, n_vertices)
    face_bytes = body[n_vertices * VERTEX_DTYPE.itemsize:]
    if len(face_bytes) < n_faces * FACE_DTYPE.itemsize:
        raise InputError(f"{path}: truncated face data")
    faces = np.frombuffer(face_bytes[:n_faces * FACE_DTYPE.itemsize], dtype=FACE_DTYPE)
    if n_faces and np.any(faces["count"] != 3):
        raise InputError(f"{path}: only triangle faces are supported")

    labels = decode_panoptic_ids(vertices["panoptic_id"], stuff_ids)
    class_ids = vertices["class_id"].astype(np.int64)
    instance_classes = {int(z): (int(c), 0.0) for z, c in zip(labels, class_ids) if z > 0}
    sidecar = sidecar_path(path)
    if os.path.exists(sidecar):
        instance_classes.update(read_sidecar(sidecar))
    return LabeledMesh(
        vertices=np.column_stack([vertices["x"], vertices["y"], vertices["z"]]),
        triangles=faces["vertex_indices"].astype(np.int64).reshape(-1, 3),
        colors=np.column_stack([vertices["red"], vertices["green"], vertices["blue"]]).astype(np.uint8),
        labels=labels,
        class_ids=class_ids,
        instance_classes=instance_classes,
    )


def sidecar_path(mesh_path: str) -> str:
    root, _ = os.path.splitext(mesh_path)
    return root + ".instances.txt"


def write_sidecar(mesh: LabeledMesh, path: str, schema: LabelSchema):
    """One row per panoptic_id present: panoptic_id kind id class_id class_name probability"""
    ids = encode_panoptic_ids(mesh.labels, schema.stuff_ids)
    rows = ["# panoptic_id kind id class_id class_name probability"]
    for code in sorted(set(int(v) for v in mesh.labels), key=lambda c: (c > 0, abs(c))):
        panoptic_id = int(ids[np.flatnonzero(mesh.labels == code)[0]])
        if code > 0:
            class_id, probability = mesh.instance_classes.get(code, (0, 0.0))
            kind, ident = "instance", code
        elif code < 0:
            class_id, probability, kind, ident = -code, 1.0, "stuff", -code
        else:
            class_id, probability, kind, ident = 0, 0.0, "unknown", 0
        name = schema.class_name(class_id) if class_id else "unknown"
        rows.append(f"{panoptic_id} {kind} {ident} {class_id} {name.replace(' ', '_')} {probability:.6f}")
    _write_atomic(path, [("\n".join(rows) + "\n").encode("utf-8")])


def read_sidecar(path: str) -> Dict[int, Tuple[int, float]]:
    """Instance rows of a sidecar file as {instance: (class_id, probability)}"""
    restored = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[1] == "instance":
                restored[int(parts[2])] = (int(parts[3]), float(parts[5]))
    return restored


def save_point_set(points: LabeledPointSet, path: str, schema: LabelSchema):
    """Vertex-only PLY of a labeled point set (ground truth samples)"""
    colors = points.colors if points.colors is not None else np.zeros((len(points), 3), dtype=np.uint8)
    records = _vertex_records(points.points, colors,
                              encode_panoptic_ids(points.labels, schema.stuff_ids), points.class_ids)
    _write_atomic(path, [_header(len(points), None, schema.stuff_ids), records.tobytes()])


def load_point_set(path: str) -> LabeledPointSet:
    counts, stuff_ids, body = _read_ply(path)
    vertices = _decode_vertices(path, body, counts.get("vertex", 0))
    return LabeledPointSet(
        points=np.column_stack([vertices["x"], vertices["y"], vertices["z"]]),
        labels=decode_panoptic_ids(vertices["panoptic_id"], stuff_ids),
        class_ids=vertices["class_id"].astype(np.int64),
        colors=np.column_stack([vertices["red"], vertices["green"], vertices["blue"]]).astype(np.uint8),
    )
