"""Bit-exact readers/writers for volumes, depth images, meshes and
trajectories.

Formats:
  * volumes  — MetaImage-style text header + little-endian raw payload,
               x index fastest (single .mha-style file, ElementDataFile
               = LOCAL; external payload files are accepted on read)
  * depth    — binary PGM, P5 / maxval 65535, big-endian 16-bit samples,
               value = round(depth_mm * 32), 0 = invalid
  * meshes   — ASCII PLY, per-vertex x y z nx ny nz, triangular faces
  * poses    — JSON Lines, one object per frame

All writers are deterministic: identical inputs give identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import DepthImage
from .core import RigidPose, SegmentationVolume, VoxelVolume
from .tsdf import TriangleMesh

DEPTH_QUANT = 32.0  # PGM stores round(depth_mm * 32): 1/32 mm steps


class FileFormatError(Exception):
    """Base class for parse/serialisation failures."""


class HeaderFormatError(FileFormatError):
    pass


class PayloadLengthError(FileFormatError):
    pass


class UnsupportedElementTypeError(FileFormatError):
    pass


ELEMENT_TYPES = {
    "MET_UCHAR": np.uint8,
    "MET_SHORT": np.int16,
    "MET_FLOAT": np.float32,
}
ELEMENT_NAMES = {np.dtype(v): k for k, v in ELEMENT_TYPES.items()}

_HEADER_KEYS = ("NDims", "DimSize", "ElementSpacing", "Offset",
                "ElementType", "ElementDataFile")


def _fmt_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_volume(vol: VoxelVolume, path) -> None:
    """Write a volume as header + LOCAL raw payload in one file."""
    path = Path(path)
    dims = vol.dims
    header = (
        f"NDims = 3\n"
        f"DimSize = {dims[0]} {dims[1]} {dims[2]}\n"
        f"ElementSpacing = {_fmt_floats(vol.spacing)}\n"
        f"Offset = {_fmt_floats(vol.origin)}\n"
        f"ElementType = {ELEMENT_NAMES[vol.data.dtype]}\n"
        f"ElementDataFile = LOCAL\n"
    )
    # file payload is x-fastest; data is indexed [ix, iy, iz]
    payload = np.ascontiguousarray(vol.data.transpose(2, 1, 0))
    payload = payload.astype(payload.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload.tobytes())


def read_volume(path, segmentation: bool = False) -> VoxelVolume:
    """Parse a volume file; raises distinct errors for malformed headers,
    payload length mismatches and unsupported element types."""
    path = Path(path)
    raw = path.read_bytes()
    fields = {}
    offset = 0
    while True:
        eol = raw.find(b"\n", offset)
        if eol < 0:
            raise HeaderFormatError(f"{path.name}: malformed header: "
                                    "no ElementDataFile line")
        line = raw[offset:eol].decode("ascii", errors="replace")
        offset = eol + 1
        if "=" not in line:
            raise HeaderFormatError(f"{path.name}: malformed header line: {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        fields[key] = value
        if key == "ElementDataFile":
            break

    for key in _HEADER_KEYS:
        if key not in fields:
            raise HeaderFormatError(f"{path.name}: malformed header: missing {key}")
    if fields["NDims"].strip() != "3":
        raise HeaderFormatError(f"{path.name}: NDims must be 3")
    try:
        dims = tuple(int(t) for t in fields["DimSize"].split())
        spacing = tuple(float(t) for t in fields["ElementSpacing"].split())
        origin = tuple(float(t) for t in fields["Offset"].split())
    except ValueError as exc:
        raise HeaderFormatError(f"{path.name}: malformed header: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise HeaderFormatError(f"{path.name}: header fields must have 3 entries")

    type_name = fields["ElementType"]
    if type_name not in ELEMENT_TYPES:
        raise UnsupportedElementTypeError(
            f"{path.name}: unsupported element type {type_name}")
    dtype = np.dtype(ELEMENT_TYPES[type_name]).newbyteorder("<")

    data_file = fields["ElementDataFile"]
    if data_file == "LOCAL":
        payload = raw[offset:]
    else:
        payload = (path.parent / data_file).read_bytes()

    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise PayloadLengthError(
            f"{path.name}: payload length mismatch: expected {expected} bytes, "
            f"got {len(payload)}")

    arr = np.frombuffer(payload, dtype=dtype).reshape(dims[2], dims[1], dims[0])
    arr = np.ascontiguousarray(arr.transpose(2, 1, 0)).astype(dtype.newbyteorder("="))
    cls = SegmentationVolume if segmentation else VoxelVolume
    return cls(arr, spacing, origin)


# --- PGM --------------------------------------------------------------------

def write_depth_pgm(d: DepthImage, path) -> None:
    """16-bit big-endian PGM; samples are depth_mm * 32, rounded half up."""
    stored = np.floor(d.depth.astype(np.float64) * DEPTH_QUANT + 0.5)
    stored = np.clip(stored, 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{d.width} {d.height}\n65535\n".encode("ascii"))
        f.write(stored.tobytes())


def write_gray_pgm(image: np.ndarray, path) -> None:
    """8-bit PGM for slice exports."""
    img = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def _read_pgm_tokens(raw: bytes, path: Path):
    """PGM header tokens, skipping whitespace and # comments."""
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(raw):
        c = raw[i:i + 1]
        if c.isspace():
            i += 1
        elif c == b"#":
            i = raw.find(b"\n", i)
            if i < 0:
                break
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    if len(tokens) < 4:
        raise HeaderFormatError(f"{path.name}: truncated PGM header")
    return tokens, i + 1  # single whitespace byte after maxval


def read_depth_pgm(path) -> DepthImage:
    path = Path(path)
    raw = path.read_bytes()
    tokens, data_start = _read_pgm_tokens(raw, path)
    if tokens[0] != b"P5":
        raise HeaderFormatError(f"{path.name}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:4])
    if maxval != 65535:
        raise HeaderFormatError(f"{path.name}: depth PGM must have maxval 65535")
    payload = raw[data_start:]
    expected = width * height * 2
    if len(payload) != expected:
        raise PayloadLengthError(
            f"{path.name}: payload length mismatch: expected {expected} bytes, "
            f"got {len(payload)}")
    stored = np.frombuffer(payload, dtype=">u2").reshape(height, width)
    return DepthImage((stored.astype(np.float64) / DEPTH_QUANT).astype(np.float32))


# --- PLY --------------------------------------------------------------------

def write_mesh_ply(mesh: TriangleMesh, path) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        "property float nx",
        "property float ny",
        "property float nz",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for v, n in zip(mesh.vertices, mesh.normals):
        lines.append(" ".join(repr(float(x)) for x in (*v, *n)))
    for t in mesh.triangles:
        lines.append(f"3 {int(t[0])} {int(t[1])} {int(t[2])}")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))


def read_mesh_ply(path) -> TriangleMesh:
    path = Path(path)
    lines = path.read_text(encoding="ascii").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise HeaderFormatError(f"{path.name}: not a PLY file")
    n_vert = n_face = None
    body = None
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        elif parts[:1] == ["end_header"]:
            body = i
            break
    if body is None or n_vert is None or n_face is None:
        raise HeaderFormatError(f"{path.name}: incomplete PLY header")

    verts = np.zeros((n_vert, 3))
    normals = np.zeros((n_vert, 3))
    for k in range(n_vert):
        parts = lines[body + k].split()
        if len(parts) < 6:
            raise FileFormatError(
                f"{path.name}: line {body + k + 1}: vertex needs 6 values")
        verts[k] = [float(p) for p in parts[:3]]
        normals[k] = [float(p) for p in parts[3:6]]
    tris = np.zeros((n_face, 3), np.int64)
    for k in range(n_face):
        parts = lines[body + n_vert + k].split()
        if len(parts) != 4 or parts[0] != "3":
            raise FileFormatError(
                f"{path.name}: line {body + n_vert + k + 1}: "
                "faces must be triangles")
        tris[k] = [int(p) for p in parts[1:4]]
    return TriangleMesh(verts, normals, tris)


# --- trajectories -----------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryEntry:
    frame: int
    status: str  # "tracked" | "lost"
    pose: RigidPose
    inlier_ratio: float
    mean_residual_mm: float

    def __post_init__(self):
        if self.status not in ("tracked", "lost"):
            raise ValueError(f"bad status {self.status!r}")


def write_trajectory(entries, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        for e in entries:
            record = {
                "frame": int(e.frame),
                "status": e.status,
                "rotation": [float(x) for x in e.pose.rotation.ravel()],
                "translation_mm": [float(x) for x in e.pose.translation],
                "inlier_ratio": float(e.inlier_ratio),
                "mean_residual_mm": float(e.mean_residual_mm),
            }
            f.write(json.dumps(record) + "\n")


def read_trajectory(path) -> list[TrajectoryEntry]:
    path = Path(path)
    entries = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FileFormatError(
                    f"{path.name}: line {lineno}: invalid JSON ({exc.msg} "
                    f"at column {exc.colno})") from exc
            for key in ("frame", "status", "rotation", "translation_mm"):
                if key not in obj:
                    raise FileFormatError(
                        f"{path.name}: line {lineno}: missing key {key!r}")
            rot = obj["rotation"]
            if not isinstance(rot, list) or len(rot) != 9:
                raise FileFormatError(
                    f"{path.name}: line {lineno}: rotation must have 9 entries")
            tr = obj["translation_mm"]
            if not isinstance(tr, list) or len(tr) != 3:
                raise FileFormatError(
                    f"{path.name}: line {lineno}: translation_mm must have "
                    "3 entries")
            if obj["status"] not in ("tracked", "lost"):
                raise FileFormatError(
                    f"{path.name}: line {lineno}: status must be tracked|lost")
            try:
                pose = RigidPose(np.array(rot, dtype=np.float64).reshape(3, 3),
                                 np.array(tr, dtype=np.float64))
            except ValueError as exc:
                raise FileFormatError(
                    f"{path.name}: line {lineno}: {exc}") from exc
            entries.append(TrajectoryEntry(
                frame=int(obj["frame"]),
                status=obj["status"],
                pose=pose,
                inlier_ratio=float(obj.get("inlier_ratio", 0.0)),
                mean_residual_mm=float(obj.get("mean_residual_mm", 0.0))))
    return entries
