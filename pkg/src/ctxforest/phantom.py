"""Deterministic synthetic knee-like phantoms.

Three ellipsoidal "bones" (femur above, tibia below, patella anterior)
carry thin cartilage shells on the surface sectors that face each other.
Intensities are tissue-dependent means plus Gaussian noise under a
smooth multiplicative bias field, so classes overlap in intensity and
the spatial features have to do real work.
"""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .distance import BONE_NAMES, LandmarkSet, bone_distance_maps, save_landmarks
from .errors import FileFormatError, ValidationError
from .features import BONE_PALETTE, CLASS_PALETTE
from .util import substream
from .volume import LabelVolume, Volume, save_label_volume, save_volume

# tissue intensity model (bone interior dark, cartilage brightest,
# muscle-like background in between; cartilage/background overlap)
_MEAN_BG, _MEAN_BONE, _MEAN_CART = 100.0, 40.0, 120.0
_STD_SCALE_BG, _STD_SCALE_BONE, _STD_SCALE_CART = 1.0, 0.5, 1.0

_MAX_SHELL_MM = 6.0


@dataclass
class PhantomSpec:
    seed: int = 0
    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    # femur, tibia, patella ellipsoids (world mm)
    centers_mm: tuple = ((32.0, 36.0, 47.0), (32.0, 36.0, 14.0), (32.0, 12.0, 44.0))
    radii_mm: tuple = ((16.0, 11.0, 12.0), (15.0, 12.0, 10.0), (8.0, 6.5, 9.0))
    # outward directions of the cartilage-bearing sector
    facing: tuple = ((0.0, -0.35, -1.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0))
    subject_jitter_mm: float = 1.5
    radius_jitter_mm: float = 1.0
    scan_jitter_mm: float = 0.5
    shell_mm: tuple = (2.2, 3.6)
    coverage: float = 0.32
    landmarks_per_bone: int = 64
    noise_std: float = 20.0
    bias_amplitude: float = 0.1

    def validate(self):
        if len(self.dims) != 3 or any(int(d) < 8 for d in self.dims):
            raise ValidationError("dims must be three counts >= 8")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError("spacing must be positive")
        if len(self.centers_mm) != 3 or len(self.radii_mm) != 3 or len(self.facing) != 3:
            raise ValidationError("need exactly three bones")
        for r in self.radii_mm:
            if any(x <= 0 for x in r):
                raise ValidationError("radii must be positive")
        t_min, t_max = self.shell_mm
        if not 0 < t_min <= t_max <= _MAX_SHELL_MM:
            raise ValidationError(f"shell thickness must satisfy 0 < min <= max <= {_MAX_SHELL_MM}")
        if not 0 < self.coverage <= 1:
            raise ValidationError("coverage must be in (0, 1]")
        if self.subject_jitter_mm < 0 or self.radius_jitter_mm < 0 or self.scan_jitter_mm < 0:
            raise ValidationError("jitter ranges must be non-negative")
        if self.landmarks_per_bone < 4:
            raise ValidationError("need at least 4 landmarks per bone")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")
        if not 0 <= self.bias_amplitude < 1:
            raise ValidationError("bias_amplitude must be in [0, 1)")
        return self


def _fibonacci_directions(k):
    """k near-uniform unit directions; index i is the registered
    correspondence key across subjects."""
    i = np.arange(k, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / k
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _world_grid(spec):
    nx, ny, nz = (int(d) for d in spec.dims)
    idx = np.arange(nx * ny * nz, dtype=np.int64)
    ix = idx % nx
    iy = (idx // nx) % ny
    iz = idx // (nx * ny)
    sx, sy, sz = spec.spacing
    return ix * sx, iy * sy, iz * sz


def _bone_geometry(spec, subject_id, scan_id):
    """Jittered ellipsoid centers/radii for one scan. Subject jitter is
    shared by both scans of a subject; scan jitter is smaller and
    per-scan."""
    rs = substream(spec.seed, "phantom", "subject", subject_id)
    centers = np.array(spec.centers_mm, dtype=np.float64)
    radii = np.array(spec.radii_mm, dtype=np.float64)
    centers = centers + rs.uniform(-spec.subject_jitter_mm, spec.subject_jitter_mm, (3, 3))
    radii = radii + rs.uniform(-spec.radius_jitter_mm, spec.radius_jitter_mm, (3, 3))
    rv = substream(spec.seed, "phantom", "subject", subject_id, "scan", scan_id)
    centers = centers + rv.uniform(-spec.scan_jitter_mm, spec.scan_jitter_mm, (3, 3))
    if np.any(radii <= 0):
        raise ValidationError("jitter produced a non-positive radius")
    return centers, radii


def generate_phantom(spec, subject_id, scan_id=0):
    """Build one phantom scan: (intensity, bone_mask, landmarks, gt).
    Deterministic given (spec.seed, subject_id, scan_id)."""
    spec.validate()
    dims = tuple(int(d) for d in spec.dims)
    spacing = tuple(float(s) for s in spec.spacing)
    origin = (0.0, 0.0, 0.0)
    n_vox = dims[0] * dims[1] * dims[2]
    centers, radii = _bone_geometry(spec, subject_id, scan_id)

    wx, wy, wz = _world_grid(spec)
    bone_lab = np.zeros(n_vox, dtype=np.uint8)
    claims = np.zeros(n_vox, dtype=np.int8)
    for b in range(3):
        q = (((wx - centers[b, 0]) / radii[b, 0]) ** 2
             + ((wy - centers[b, 1]) / radii[b, 1]) ** 2
             + ((wz - centers[b, 2]) / radii[b, 2]) ** 2)
        inside = q <= 1.0
        claims += inside
        bone_lab[inside] = b + 1
    if np.any(claims > 1):
        raise ValidationError("spec produces intersecting bones")
    bone_mask = LabelVolume(dims, spacing, origin, bone_lab, palette=dict(BONE_PALETTE))

    dist = bone_distance_maps(bone_mask)
    t_min, t_max = spec.shell_mm
    cos_max = 1.0 - 2.0 * spec.coverage
    gt_lab = np.zeros(n_vox, dtype=np.uint8)
    best_d = np.full(n_vox, np.inf)
    for b, bone in enumerate(BONE_NAMES):
        d = dist[bone].astype(np.float64)
        # sector test in ellipsoid parameter space
        px = (wx - centers[b, 0]) / radii[b, 0]
        py = (wy - centers[b, 1]) / radii[b, 1]
        pz = (wz - centers[b, 2]) / radii[b, 2]
        norm = np.sqrt(px * px + py * py + pz * pz)
        norm[norm == 0] = 1.0
        f = np.asarray(spec.facing[b], dtype=np.float64)
        f = f / np.linalg.norm(f)
        cos = (px * f[0] + py * f[1] + pz * f[2]) / norm
        frac = np.clip((cos - cos_max) / max(1.0 - cos_max, 1e-12), 0.0, 1.0)
        thick = t_min + (t_max - t_min) * frac
        shell = (d > 0) & (d <= thick) & (cos >= cos_max)
        # overlapping shell claims go to the nearest bone
        take = shell & (d < best_d)
        gt_lab[take] = b + 1
        best_d[take] = d[take]
    gt = LabelVolume(dims, spacing, origin, gt_lab, palette=dict(CLASS_PALETTE))

    dirs = _fibonacci_directions(spec.landmarks_per_bone)
    landmarks = LandmarkSet({bone: centers[b] + dirs * radii[b]
                             for b, bone in enumerate(BONE_NAMES)})

    rv = substream(spec.seed, "phantom", "intensity", subject_id, "scan", scan_id)
    mean = np.full(n_vox, _MEAN_BG)
    std = np.full(n_vox, _STD_SCALE_BG * spec.noise_std)
    mean[bone_lab > 0] = _MEAN_BONE
    std[bone_lab > 0] = _STD_SCALE_BONE * spec.noise_std
    mean[gt_lab > 0] = _MEAN_CART
    std[gt_lab > 0] = _STD_SCALE_CART * spec.noise_std
    intensity = mean + std * rv.standard_normal(n_vox)
    if spec.bias_amplitude > 0:
        freqs = rv.uniform(0.5, 1.5, size=3)
        phases = rv.uniform(0.0, 2.0 * math.pi, size=3)
        ext = [dims[a] * spacing[a] for a in range(3)]
        waves = (np.cos(2 * math.pi * freqs[0] * wx / ext[0] + phases[0])
                 + np.cos(2 * math.pi * freqs[1] * wy / ext[1] + phases[1])
                 + np.cos(2 * math.pi * freqs[2] * wz / ext[2] + phases[2]))
        intensity = intensity * (1.0 + spec.bias_amplitude * waves / 3.0)
    vol = Volume(dims, spacing, origin, intensity.astype(np.float32))
    return vol, bone_mask, landmarks, gt


# ---------------------------------------------------------------------------
# dataset + manifest

_MANIFEST_FIELDS = ["subject_id", "volume_path", "bone_mask_path",
                    "landmarks_path", "gt_path"]


@dataclass
class ManifestRow:
    subject_id: int
    volume_path: str
    bone_mask_path: str
    landmarks_path: str
    gt_path: str


def save_manifest(path, rows):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.subject_id,
                        os.path.relpath(r.volume_path, base),
                        os.path.relpath(r.bone_mask_path, base),
                        os.path.relpath(r.landmarks_path, base),
                        os.path.relpath(r.gt_path, base)])


def load_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError(f"{path}: empty manifest") from None
        if header != _MANIFEST_FIELDS:
            raise FileFormatError(f"{path}: expected header {','.join(_MANIFEST_FIELDS)}")
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise FileFormatError(f"{path}:{ln}: expected 5 fields")
            try:
                sid = int(row[0])
            except ValueError:
                raise FileFormatError(f"{path}:{ln}: bad subject id {row[0]!r}") from None
            rows.append(ManifestRow(sid, *(os.path.join(base, p) for p in row[1:])))
    if not rows:
        raise FileFormatError(f"{path}: manifest has no rows")
    return rows


def generate_dataset(spec, n_subjects, out_dir, volumes_per_subject=2):
    """Write a phantom dataset (volumes, bone masks, landmark files,
    ground truth) plus its manifest. Returns the manifest rows."""
    spec.validate()
    if n_subjects < 1:
        raise ValidationError("n_subjects must be >= 1")
    if volumes_per_subject < 1:
        raise ValidationError("volumes_per_subject must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for sid in range(n_subjects):
        for scan in range(volumes_per_subject):
            vol, bone_mask, landmarks, gt = generate_phantom(spec, sid, scan)
            stem = os.path.join(out_dir, f"s{sid:03d}_v{scan}")
            paths = (f"{stem}_int.mhd", f"{stem}_bone.mhd",
                     f"{stem}_landmarks.csv", f"{stem}_gt.mhd")
            save_volume(vol, paths[0])
            save_label_volume(bone_mask, paths[1])
            save_landmarks(paths[2], landmarks)
            save_label_volume(gt, paths[3])
            rows.append(ManifestRow(sid, *paths))
    manifest_path = os.path.join(out_dir, "manifest.csv")
    save_manifest(manifest_path, rows)
    return rows
