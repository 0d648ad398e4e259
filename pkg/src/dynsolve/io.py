"""Binary raster formats, trajectory files and the dataset directory layout.

Layout of a dataset directory::

    intrinsics.txt          fx fy cx cy width height      (full resolution, one line)
    manifest.txt            key = value lines (frames, width, height, lowres_factor, edges ...)
    poses_gt.txt            optional trajectory
    disp_rel/%06d.pfm       relative (affine-invariant) disparity, low resolution
    disp_abs/%06d.pfm       metric disparity, low resolution
    motion/%06d.pfm         static-probability map (1 = static), low resolution
    flow/low/%06d_%06d.flo  flow displacement i -> j, low resolution
    conf/%06d_%06d.pfm      confidence for the low resolution flow
    flow/full/%06d_%06d.flo optional full resolution flow (depth refinement)
    full/disp_rel, full/disp_abs, full/motion   optional full resolution priors

Flow files store displacements ``target - source`` in pixels.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, DimensionMismatch, LayoutError, TruncatedFile
from .geometry import Intrinsics, RigidTransform

FLO_MAGIC = 202021.25
LOWRES_FACTOR = 8


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def write_pfm(path, data):
    """Single-channel little-endian PFM; rows are stored bottom-to-top."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise DimensionMismatch(f"PFM raster must be 2-D and non-empty, got shape {a.shape}")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(np.flipud(a)).astype("<f4").tobytes())


def _read_line(f):
    line = f.readline()
    if not line:
        raise TruncatedFile("unexpected end of PFM header")
    return line.decode("ascii", errors="replace").strip()


def read_pfm(path, expected_shape=None):
    with open(path, "rb") as f:
        magic = _read_line(f)
        if magic not in ("Pf", "PF"):
            raise BadMagic(f"{path}: not a PFM file (header {magic!r})")
        channels = 3 if magic == "PF" else 1
        dims = _read_line(f).split()
        if len(dims) != 2:
            raise TruncatedFile(f"{path}: malformed dimension line")
        w, h = int(dims[0]), int(dims[1])
        if w <= 0 or h <= 0:
            raise DimensionMismatch(f"{path}: empty raster {w}x{h}")
        scale = float(_read_line(f))
        endian = "<" if scale < 0 else ">"
        count = w * h * channels
        buf = f.read(4 * count)
    if len(buf) < 4 * count:
        raise TruncatedFile(f"{path}: expected {4 * count} data bytes, found {len(buf)}")
    a = np.frombuffer(buf, dtype=endian + "f4").reshape((h, w, channels) if channels == 3 else (h, w))
    a = np.flipud(a).astype(np.float32)
    if expected_shape is not None and a.shape[:2] != tuple(expected_shape):
        raise DimensionMismatch(f"{path}: shape {a.shape[:2]} != expected {tuple(expected_shape)}")
    return a


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

def write_flo(path, flow):
    a = np.asarray(flow, dtype=np.float32)
    if a.ndim != 3 or a.shape[2] != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise DimensionMismatch(f"flow must be (H, W, 2) and non-empty, got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(np.ascontiguousarray(a).astype("<f4").tobytes())


def read_flo(path, expected_shape=None):
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) < 12:
            raise TruncatedFile(f"{path}: header too short")
        magic, w, h = struct.unpack("<fii", header)
        if magic != np.float32(FLO_MAGIC):
            raise BadMagic(f"{path}: bad .flo magic {magic}")
        if w <= 0 or h <= 0:
            raise DimensionMismatch(f"{path}: empty flow {w}x{h}")
        buf = f.read(8 * w * h)
    if len(buf) < 8 * w * h:
        raise TruncatedFile(f"{path}: expected {8 * w * h} data bytes, found {len(buf)}")
    a = np.frombuffer(buf, dtype="<f4").reshape(h, w, 2).astype(np.float32)
    if expected_shape is not None and a.shape[:2] != tuple(expected_shape):
        raise DimensionMismatch(f"{path}: shape {a.shape[:2]} != expected {tuple(expected_shape)}")
    return a


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------

def write_trajectory(path, poses, indices=None):
    """One line per frame: ``index tx ty tz qx qy qz qw`` (world -> camera)."""
    indices = range(len(poses)) if indices is None else indices
    with open(path, "w") as f:
        for idx, T in zip(indices, poses):
            w, x, y, z = T.quat
            tx, ty, tz = T.translation
            f.write(f"{idx:d} {tx:.17g} {ty:.17g} {tz:.17g} {x:.17g} {y:.17g} {z:.17g} {w:.17g}\n")


def read_trajectory(path):
    indices, poses = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            vals = [float(p) for p in parts[1:]]
            q = np.array([vals[6], vals[3], vals[4], vals[5]])
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise ValueError(f"{path}:{lineno}: quaternion not normalized")
            indices.append(int(parts[0]))
            poses.append(RigidTransform(q, vals[:3]))
    return indices, poses


def write_intrinsics(path, K: Intrinsics):
    with open(path, "w") as f:
        f.write(f"{K.fx:.17g} {K.fy:.17g} {K.cx:.17g} {K.cy:.17g} {K.width:d} {K.height:d}\n")


def read_intrinsics(path):
    with open(path) as f:
        parts = f.read().split()
    if len(parts) != 6:
        raise LayoutError(f"{path}: expected 'fx fy cx cy width height'")
    fx, fy, cx, cy = (float(p) for p in parts[:4])
    return Intrinsics(fx, fy, cx, cy, int(parts[4]), int(parts[5]))


def write_keyvalue(path, items):
    with open(path, "w") as f:
        for k, v in items.items():
            f.write(f"{k} = {format_value(v)}\n")


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(float(v))          # shortest string that round-trips
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def read_keyvalue(path):
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------

def frame_name(i):
    return f"{i:06d}"


def pair_name(i, j):
    return f"{i:06d}_{j:06d}"


@dataclass
class Dataset:
    """In-memory view of a dataset directory (low-res arrays always loaded)."""

    intrinsics: Intrinsics
    n_frames: int
    edges: list
    disp_rel: np.ndarray
    disp_abs: np.ndarray
    motion: np.ndarray
    flows: dict
    confidences: dict
    lowres_factor: int = LOWRES_FACTOR
    poses_gt: list | None = None
    full_edges: list = field(default_factory=list)
    full_flows: dict = field(default_factory=dict)
    full_disp_rel: np.ndarray | None = None
    full_disp_abs: np.ndarray | None = None
    full_motion: np.ndarray | None = None
    root: str | None = None

    @property
    def low_intrinsics(self):
        return self.intrinsics.scaled(self.lowres_factor)

    @property
    def low_shape(self):
        K = self.low_intrinsics
        return (K.height, K.width)


def write_dataset(root, ds: Dataset):
    os.makedirs(root, exist_ok=True)
    for sub in ("disp_rel", "disp_abs", "motion", "conf", "flow/low"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    write_intrinsics(os.path.join(root, "intrinsics.txt"), ds.intrinsics)
    K = ds.low_intrinsics
    manifest = {
        "frames": ds.n_frames,
        "width": ds.intrinsics.width,
        "height": ds.intrinsics.height,
        "lowres_factor": ds.lowres_factor,
        "lowres_width": K.width,
        "lowres_height": K.height,
        "edges": ";".join(f"{i}-{j}" for i, j in ds.edges),
        "full_edges": ";".join(f"{i}-{j}" for i, j in ds.full_edges),
        "full_resolution": bool(ds.full_disp_rel is not None),
    }
    write_keyvalue(os.path.join(root, "manifest.txt"), manifest)
    if ds.poses_gt is not None:
        write_trajectory(os.path.join(root, "poses_gt.txt"), ds.poses_gt)
    for i in range(ds.n_frames):
        write_pfm(os.path.join(root, "disp_rel", frame_name(i) + ".pfm"), ds.disp_rel[i])
        write_pfm(os.path.join(root, "disp_abs", frame_name(i) + ".pfm"), ds.disp_abs[i])
        write_pfm(os.path.join(root, "motion", frame_name(i) + ".pfm"), ds.motion[i])
    for i, j in ds.edges:
        write_flo(os.path.join(root, "flow", "low", pair_name(i, j) + ".flo"), ds.flows[(i, j)])
        write_pfm(os.path.join(root, "conf", pair_name(i, j) + ".pfm"), ds.confidences[(i, j)])
    if ds.full_disp_rel is not None:
        for sub in ("full/disp_rel", "full/disp_abs", "full/motion", "flow/full"):
            os.makedirs(os.path.join(root, sub), exist_ok=True)
        for i in range(ds.n_frames):
            write_pfm(os.path.join(root, "full", "disp_rel", frame_name(i) + ".pfm"), ds.full_disp_rel[i])
            write_pfm(os.path.join(root, "full", "disp_abs", frame_name(i) + ".pfm"), ds.full_disp_abs[i])
            write_pfm(os.path.join(root, "full", "motion", frame_name(i) + ".pfm"), ds.full_motion[i])
        for i, j in ds.full_edges:
            write_flo(os.path.join(root, "flow", "full", pair_name(i, j) + ".flo"), ds.full_flows[(i, j)])


def _parse_edges(text):
    text = text.strip()
    if not text:
        return []
    return [tuple(int(x) for x in e.split("-")) for e in text.split(";")]


def _require(path):
    if not os.path.isfile(path):
        raise LayoutError(f"missing file: {path}")
    return path


def read_dataset(root, full_resolution=False) -> Dataset:
    K = read_intrinsics(_require(os.path.join(root, "intrinsics.txt")))
    man = read_keyvalue(_require(os.path.join(root, "manifest.txt")))
    n = int(man["frames"])
    factor = int(man.get("lowres_factor", LOWRES_FACTOR))
    if (int(man["width"]), int(man["height"])) != (K.width, K.height):
        raise LayoutError(f"{root}: manifest resolution disagrees with intrinsics.txt")
    Kl = K.scaled(factor)
    shape = (Kl.height, Kl.width)
    edges = _parse_edges(man.get("edges", ""))

    def stack(sub, shp):
        return np.stack([read_pfm(_require(os.path.join(root, sub, frame_name(i) + ".pfm")), shp)
                         for i in range(n)]).astype(np.float64)

    ds = Dataset(
        intrinsics=K, n_frames=n, edges=edges,
        disp_rel=stack("disp_rel", shape), disp_abs=stack("disp_abs", shape), motion=stack("motion", shape),
        flows={}, confidences={}, lowres_factor=factor, root=root,
    )
    for i, j in edges:
        ds.flows[(i, j)] = read_flo(_require(os.path.join(root, "flow", "low", pair_name(i, j) + ".flo")),
                                    shape).astype(np.float64)
        ds.confidences[(i, j)] = read_pfm(_require(os.path.join(root, "conf", pair_name(i, j) + ".pfm")),
                                          shape).astype(np.float64)
    gt = os.path.join(root, "poses_gt.txt")
    if os.path.isfile(gt):
        ds.poses_gt = read_trajectory(gt)[1]
    if full_resolution:
        if man.get("full_resolution", "false") != "true":
            raise LayoutError(f"{root}: dataset has no full-resolution data")
        fshape = (K.height, K.width)
        ds.full_disp_rel = stack("full/disp_rel", fshape)
        ds.full_disp_abs = stack("full/disp_abs", fshape)
        ds.full_motion = stack("full/motion", fshape)
        ds.full_edges = _parse_edges(man.get("full_edges", ""))
        for i, j in ds.full_edges:
            ds.full_flows[(i, j)] = read_flo(
                _require(os.path.join(root, "flow", "full", pair_name(i, j) + ".flo")), fshape).astype(np.float64)
    return ds
