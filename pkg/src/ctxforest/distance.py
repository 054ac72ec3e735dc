"""Signed distance maps to bone surfaces and distances to bone landmarks."""

import csv

import numpy as np

from . import _kernels
from .errors import FileFormatError, ValidationError
from .volume import LabelVolume, Volume

BONE_NAMES = ("femur", "tibia", "patella")
BONE_IDS = {"femur": 1, "tibia": 2, "patella": 3}

_LANDMARK_FIELDS = ["bone", "index", "x_mm", "y_mm", "z_mm"]


class LandmarkSet:
    """Per-bone ordered landmark points in world coordinates (mm).

    ``points[bone]`` is an [K, 3] float64 array; index ``zeta`` into that
    array identifies the same anatomical location across subjects.
    """

    def __init__(self, points):
        self.points = {}
        for bone in BONE_NAMES:
            if bone not in points:
                raise ValidationError(f"missing landmarks for bone '{bone}'")
            arr = np.asarray(points[bone], dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
                raise ValidationError(f"landmarks for '{bone}' must be a non-empty [K, 3] array")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite landmark coordinate for '{bone}'")
            self.points[bone] = arr
        extra = set(points) - set(BONE_NAMES)
        if extra:
            raise ValidationError(f"unknown bone names in landmarks: {sorted(extra)}")

    def count(self, bone):
        return self.points[bone].shape[0]

    @property
    def counts(self):
        return tuple(self.points[b].shape[0] for b in BONE_NAMES)


def save_landmarks(path, landmarks):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_LANDMARK_FIELDS)
        for bone in BONE_NAMES:
            pts = landmarks.points[bone]
            for i in range(pts.shape[0]):
                writer.writerow([bone, i, repr(float(pts[i, 0])),
                                 repr(float(pts[i, 1])), repr(float(pts[i, 2]))])


def load_landmarks(path):
    rows = {bone: {} for bone in BONE_NAMES}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError(f"{path}: empty landmark file") from None
        if header != _LANDMARK_FIELDS:
            raise FileFormatError(f"{path}: expected header {','.join(_LANDMARK_FIELDS)}")
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise FileFormatError(f"{path}:{ln}: expected 5 fields")
            bone, idx_s, xs, ys, zs = row
            if bone not in rows:
                raise FileFormatError(f"{path}:{ln}: unknown bone '{bone}'")
            try:
                idx = int(idx_s)
                pt = (float(xs), float(ys), float(zs))
            except ValueError:
                raise FileFormatError(f"{path}:{ln}: malformed numeric field") from None
            if idx in rows[bone]:
                raise FileFormatError(f"{path}:{ln}: duplicate index {idx} for '{bone}'")
            rows[bone][idx] = pt
    points = {}
    for bone in BONE_NAMES:
        idxs = sorted(rows[bone])
        if idxs != list(range(len(idxs))):
            raise FileFormatError(f"{path}: indices for '{bone}' must be contiguous from 0")
        points[bone] = np.array([rows[bone][i] for i in idxs], dtype=np.float64)
    return LandmarkSet(points)


def signed_distance_transform(mask, geometry):
    """Signed Euclidean distance (mm) from voxel centers to the boundary
    of ``mask``: negative inside, positive outside.

    ``mask`` is a flat boolean/uint8 array on the grid described by
    ``geometry`` (any object with dims/spacing). Distances are measured
    between voxel centers, so the zero level sits between the outermost
    mask voxels and their background neighbours.
    """
    m = np.asarray(mask, dtype=np.uint8).reshape(-1)
    if m.size != geometry.n_voxels:
        raise ValidationError("mask size does not match geometry")
    n_in = int(m.sum())
    if n_in == 0 or n_in == m.size:
        raise ValidationError("degenerate mask: needs both foreground and background voxels")
    nx, ny, nz = geometry.dims
    sx, sy, sz = geometry.spacing
    d_out = _kernels.impl.edt_squared(m, nx, ny, nz, sx, sy, sz)
    d_in = _kernels.impl.edt_squared(1 - m, nx, ny, nz, sx, sy, sz)
    return (np.sqrt(d_out) - np.sqrt(d_in)).astype(np.float32)


def bone_distance_maps(bone_mask):
    """Per-bone signed distance maps from a bone label volume.

    Returns a dict bone name -> flat float32 array. Raises when a bone
    label is absent or bones overlap (labels are mutually exclusive by
    construction of the volume, so only absence can fail here).
    """
    if not isinstance(bone_mask, LabelVolume):
        raise ValidationError("bone_mask must be a LabelVolume")
    out = {}
    for bone, bid in BONE_IDS.items():
        m = bone_mask.labels == bid
        if not m.any():
            raise ValidationError(f"bone mask contains no '{bone}' voxels")
        out[bone] = signed_distance_transform(m, bone_mask)
    return out


def distance_to_landmark(geometry, landmarks, bone, zeta):
    """Euclidean distance (mm) from every voxel center to landmark
    ``zeta`` of ``bone``. Returns a flat float32 array."""
    pts = landmarks.points[bone]
    if not 0 <= zeta < pts.shape[0]:
        raise ValidationError(f"landmark index {zeta} out of range for '{bone}'")
    z = pts[zeta]
    nx, ny, nz = geometry.dims
    idx = np.arange(geometry.n_voxels, dtype=np.int64)
    ix = idx % nx
    iy = (idx // nx) % ny
    iz = idx // (nx * ny)
    ox, oy, oz = geometry.origin
    sx, sy, sz = geometry.spacing
    dx = (ox + ix * sx) - z[0]
    dy = (oy + iy * sy) - z[1]
    dz = (oz + iz * sz) - z[2]
    return np.sqrt((dx * dx + dy * dy) + dz * dz).astype(np.float32)


def extract_band(dist_maps, tau_in, tau_out):
    """Linear indices of voxels within the band of interest: within
    ``tau_in`` mm inside or ``tau_out`` mm outside of any bone surface."""
    if tau_in < 0 or tau_out < 0:
        raise ValidationError("band widths must be non-negative")
    keep = None
    for bone in BONE_NAMES:
        d = dist_maps[bone]
        m = (d >= -tau_in) & (d <= tau_out)
        keep = m if keep is None else (keep | m)
    idx = np.nonzero(keep)[0].astype(np.int64)
    if idx.size == 0:
        raise ValidationError("band of interest is empty")
    return idx
