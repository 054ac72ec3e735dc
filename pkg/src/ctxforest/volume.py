"""Dense 3D grid types, geometry transforms, file I/O and image operators.

Storage order is row-major with x fastest: linear index
``i = ix + nx*(iy + ny*iz)``. Scalar volumes are float32, label volumes
uint8. Both are immutable after construction and safe to share across
threads.

On-disk format is a two-file MetaImage-style layout: a plain-text header
(``NDims``, ``DimSize``, ``ElementSpacing``, ``Offset``, ``ElementType``,
``ElementDataFile``) plus a raw little-endian payload.
"""

import os

import numpy as np

from .errors import FileFormatError, ValidationError

_HEADER_KEYS = ("NDims", "DimSize", "ElementSpacing", "Offset", "ElementType", "ElementDataFile")
_ELEMENT_TYPES = {"FLOAT32": np.dtype("<f4"), "UINT8": np.dtype("<u1")}


def _check_geometry(dims, spacing, origin):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(float(o) for o in origin)
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise ValidationError("dims, spacing and origin must have 3 components")
    if any(d < 1 for d in dims):
        raise ValidationError(f"voxel counts must be positive, got {dims}")
    if any(s <= 0 for s in spacing):
        raise ValidationError(f"spacing components must be > 0, got {spacing}")
    if not all(np.isfinite(spacing)) or not all(np.isfinite(origin)):
        raise ValidationError("spacing and origin must be finite")
    return dims, spacing, origin


class Volume:
    """Dense scalar grid with anisotropic spacing (mm) and world origin."""

    def __init__(self, dims, spacing, origin, data):
        self.dims, self.spacing, self.origin = _check_geometry(dims, spacing, origin)
        nx, ny, nz = self.dims
        data = np.ascontiguousarray(data, dtype=np.float32).reshape(-1)
        if data.size != nx * ny * nz:
            raise ValidationError(
                f"data length mismatch: header declares {nx * ny * nz} voxels, got {data.size}"
            )
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume data contains NaN or Inf")
        data.flags.writeable = False
        self.data = data

    @property
    def n_voxels(self):
        nx, ny, nz = self.dims
        return nx * ny * nz

    def as_3d(self):
        """View of the data as (nx, ny, nz) with x fastest in memory."""
        return self.data.reshape(self.dims, order="F")

    def same_geometry(self, other):
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )

    def like(self, data):
        """New Volume with this geometry and the given data."""
        return Volume(self.dims, self.spacing, self.origin, data)


class LabelVolume:
    """Dense categorical grid; every stored label must appear in the palette."""

    def __init__(self, dims, spacing, origin, labels, palette):
        self.dims, self.spacing, self.origin = _check_geometry(dims, spacing, origin)
        nx, ny, nz = self.dims
        labels = np.ascontiguousarray(labels, dtype=np.uint8).reshape(-1)
        if labels.size != nx * ny * nz:
            raise ValidationError(
                f"data length mismatch: header declares {nx * ny * nz} voxels, got {labels.size}"
            )
        self.palette = {int(k): str(v) for k, v in palette.items()}
        present = np.unique(labels)
        missing = [int(v) for v in present if int(v) not in self.palette]
        if missing:
            raise ValidationError(f"labels {missing} not present in palette {sorted(self.palette)}")
        labels.flags.writeable = False
        self.labels = labels

    @property
    def n_voxels(self):
        nx, ny, nz = self.dims
        return nx * ny * nz

    def as_3d(self):
        return self.labels.reshape(self.dims, order="F")

    def same_geometry(self, other):
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )


def require_same_geometry(a, b, what="volumes"):
    if not a.same_geometry(b):
        raise ValidationError(
            f"geometry mismatch between {what}: "
            f"{a.dims}/{a.spacing}/{a.origin} vs {b.dims}/{b.spacing}/{b.origin}"
        )


# ---------------------------------------------------------------------------
# voxel/world transforms

def voxel_to_world(v, index):
    """World coordinate (mm) of a voxel center: origin + index*spacing."""
    ix, iy, iz = (int(c) for c in index)
    nx, ny, nz = v.dims
    if not (0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz):
        raise ValidationError(f"voxel index {(ix, iy, iz)} outside dims {v.dims}")
    return tuple(v.origin[a] + (ix, iy, iz)[a] * v.spacing[a] for a in range(3))


def world_to_voxel(v, point):
    """Nearest voxel index for a world point.

    Returns (index, clamped): indices outside the grid after rounding are
    clamped to the nearest boundary voxel and flagged, never wrapped.
    """
    idx = []
    clamped = False
    for a in range(3):
        raw = int(np.floor((float(point[a]) - v.origin[a]) / v.spacing[a] + 0.5))
        hi = v.dims[a] - 1
        if raw < 0 or raw > hi:
            clamped = True
            raw = min(max(raw, 0), hi)
        idx.append(raw)
    return tuple(idx), clamped


# ---------------------------------------------------------------------------
# image operators

def gradient_magnitude(v):
    """Per-voxel gradient magnitude, central differences scaled by spacing.

    Interior voxels use central differences (1/(2*spacing)); faces use
    one-sided differences so linear ramps stay exact to the edge.
    """
    if any(d < 2 for d in v.dims):
        raise ValidationError(f"gradient undefined for axis of extent 1, dims {v.dims}")
    f = v.as_3d().astype(np.float64)
    gx, gy, gz = np.gradient(f, *v.spacing, edge_order=1)
    mag = np.sqrt(gx * gx + gy * gy + gz * gz)
    return v.like(mag.reshape(-1, order="F"))


# ---------------------------------------------------------------------------
# I/O

def _format_float(x):
    return repr(float(x))


def _write_pair(lines, key, value):
    lines.append(f"{key} = {value}")


def _header_path_pair(path):
    base, _ = os.path.splitext(path)
    return path, base + ".raw"


def _save(path, dims, spacing, origin, flat, element_type):
    header_path, raw_path = _header_path_pair(path)
    lines = []
    _write_pair(lines, "NDims", "3")
    _write_pair(lines, "DimSize", " ".join(str(d) for d in dims))
    _write_pair(lines, "ElementSpacing", " ".join(_format_float(s) for s in spacing))
    _write_pair(lines, "Offset", " ".join(_format_float(o) for o in origin))
    _write_pair(lines, "ElementType", element_type)
    _write_pair(lines, "ElementDataFile", os.path.basename(raw_path))
    with open(header_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(raw_path, "wb") as f:
        f.write(np.asarray(flat, dtype=_ELEMENT_TYPES[element_type]).tobytes())


def save_volume(v, path):
    _save(path, v.dims, v.spacing, v.origin, v.data, "FLOAT32")


def save_label_volume(lv, path):
    _save(path, lv.dims, lv.spacing, lv.origin, lv.labels, "UINT8")


def _parse_header(path):
    fields = {}
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise FileFormatError(f"cannot read header {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise FileFormatError(f"{path}:{lineno}: malformed header line {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _HEADER_KEYS:
            raise FileFormatError(f"{path}:{lineno}: unknown header key {key!r}")
        fields[key] = value.strip()
    for key in _HEADER_KEYS:
        if key not in fields:
            raise FileFormatError(f"{path}: missing header key {key!r}")
    if fields["NDims"] != "3":
        raise FileFormatError(f"{path}: NDims must be 3, got {fields['NDims']!r}")
    if fields["ElementType"] not in _ELEMENT_TYPES:
        raise FileFormatError(f"{path}: unsupported element type {fields['ElementType']!r}")
    try:
        dims = tuple(int(t) for t in fields["DimSize"].split())
        spacing = tuple(float(t) for t in fields["ElementSpacing"].split())
        origin = tuple(float(t) for t in fields["Offset"].split())
    except ValueError as e:
        raise FileFormatError(f"{path}: malformed header value: {e}") from e
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise FileFormatError(f"{path}: DimSize/ElementSpacing/Offset must have 3 entries")
    return dims, spacing, origin, fields["ElementType"], fields["ElementDataFile"]


def _load_raw(header_path, data_file, dims, dtype):
    raw_path = os.path.join(os.path.dirname(os.path.abspath(header_path)), data_file)
    try:
        with open(raw_path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise FileFormatError(f"cannot read payload {raw_path}: {e}") from e
    n = dims[0] * dims[1] * dims[2]
    if len(payload) != n * dtype.itemsize:
        raise FileFormatError(
            f"{header_path}: data length mismatch: header declares {n} elements "
            f"({n * dtype.itemsize} bytes), payload has {len(payload)} bytes"
        )
    return np.frombuffer(payload, dtype=dtype)


def load_volume(path):
    dims, spacing, origin, etype, data_file = _parse_header(path)
    if etype != "FLOAT32":
        raise FileFormatError(f"{path}: expected FLOAT32 volume, got {etype}")
    flat = _load_raw(path, data_file, dims, _ELEMENT_TYPES[etype])
    try:
        return Volume(dims, spacing, origin, flat)
    except ValidationError as e:
        raise FileFormatError(f"{path}: {e}") from e


def load_label_volume(path, palette=None):
    """Load a UINT8 label grid. Palette defaults to naming present labels."""
    dims, spacing, origin, etype, data_file = _parse_header(path)
    if etype != "UINT8":
        raise FileFormatError(f"{path}: expected UINT8 label volume, got {etype}")
    flat = _load_raw(path, data_file, dims, _ELEMENT_TYPES[etype])
    if palette is None:
        palette = {int(v): f"label{int(v)}" for v in np.unique(flat)}
    try:
        return LabelVolume(dims, spacing, origin, flat, palette)
    except ValidationError as e:
        raise FileFormatError(f"{path}: {e}") from e
