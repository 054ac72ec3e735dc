"""Voxel feature algebra: descriptors, sampling, and evaluation contexts.

A feature descriptor names one scalar measurement at a voxel. The
seventeen kinds split into intensity/gradient lookups, signed bone
distances and their pairwise sums/differences, distances to individual
bone landmarks, relative-shift intensity differences, and (from the
second cascade pass on) class probability lookups and relative-shift
probability differences.
"""

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import _kernels
from .distance import BONE_NAMES, bone_distance_maps, extract_band
from .errors import ValidationError
from .util import check_fields
from .volume import LabelVolume, gradient_magnitude, require_same_geometry

CLASS_NAMES = ("background", "femoral_cartilage", "tibial_cartilage", "patellar_cartilage")
CLASS_PALETTE = {i: n for i, n in enumerate(CLASS_NAMES)}
BONE_PALETTE = {0: "background", 1: "femur", 2: "tibia", 3: "patella"}
N_CLASSES = 4


class FeatureKind(IntEnum):
    INTENSITY = 0
    GRAD_MAG = 1
    DIST_F = 2
    DIST_T = 3
    DIST_P = 4
    SUM_FT = 5
    DIFF_FT = 6
    SUM_FP = 7
    DIFF_FP = 8
    DIST_LANDMARK = 9
    RSID = 10
    PROB_F = 11
    PROB_T = 12
    PROB_P = 13
    RSPD_F = 14
    RSPD_T = 15
    RSPD_P = 16


_SHIFT_KINDS = frozenset({FeatureKind.RSID, FeatureKind.RSPD_F,
                          FeatureKind.RSPD_T, FeatureKind.RSPD_P})
_PROB_KINDS = frozenset({FeatureKind.PROB_F, FeatureKind.PROB_T, FeatureKind.PROB_P,
                         FeatureKind.RSPD_F, FeatureKind.RSPD_T, FeatureKind.RSPD_P})
FIRST_PASS_KINDS = tuple(k for k in FeatureKind if k not in _PROB_KINDS)
LATER_PASS_KINDS = tuple(FeatureKind)


@dataclass(frozen=True)
class FeatureDescriptor:
    """One sampled feature: a kind plus its parameters.

    ``u_mm`` is the world-space shift for relative-shift kinds, ``bone``
    and ``zeta`` select a landmark for DIST_LANDMARK. Unused parameters
    stay at their neutral defaults so descriptors round-trip through
    fixed-width arrays.
    """

    kind: FeatureKind
    u_mm: tuple = (0.0, 0.0, 0.0)
    bone: int = 0
    zeta: int = 0

    def __post_init__(self):
        if self.kind in _SHIFT_KINDS:
            if len(self.u_mm) != 3:
                raise ValidationError("shift features need a 3-vector u_mm")
        elif self.kind == FeatureKind.DIST_LANDMARK:
            if self.bone not in (1, 2, 3):
                raise ValidationError("landmark features need bone in {1, 2, 3}")
            if self.zeta < 0:
                raise ValidationError("landmark index must be non-negative")


@dataclass
class FeatureConfig:
    """Sampling parameters for the per-node candidate feature pool."""

    pool_size: int = 100
    r_max_mm: float = 30.0
    band_tau_in_mm: float = 2.0
    band_tau_out_mm: float = 10.0
    seed: int = 0
    use_landmarks: bool = True  # ablation switch: drop DIST_LANDMARK from pools

    def validate(self):
        if self.pool_size < 1:
            raise ValidationError("pool_size must be >= 1")
        if self.r_max_mm <= 0:
            raise ValidationError("r_max_mm must be positive")
        if self.band_tau_in_mm < 0 or self.band_tau_out_mm < 0:
            raise ValidationError("band widths must be non-negative")
        return self

    def to_dict(self):
        return {"pool_size": self.pool_size, "r_max_mm": self.r_max_mm,
                "band_tau_in_mm": self.band_tau_in_mm,
                "band_tau_out_mm": self.band_tau_out_mm, "seed": self.seed,
                "use_landmarks": self.use_landmarks}

    @classmethod
    def from_dict(cls, d):
        check_fields(cls, d, "feature config")
        return cls(**d).validate()


def legal_kinds(pass_index, use_landmarks=True):
    """Feature kinds available at cascade pass ``pass_index`` (0-based).
    Probability-dependent kinds need a previous pass to supply maps."""
    kinds = LATER_PASS_KINDS if pass_index > 0 else FIRST_PASS_KINDS
    if not use_landmarks:
        kinds = tuple(k for k in kinds if k != FeatureKind.DIST_LANDMARK)
    return kinds


def sample_feature_pool(rng, cfg, pass_index, landmark_counts):
    """Draw ``cfg.pool_size`` descriptors, kind first, then parameters.

    The kind is uniform over the kinds legal at this pass; shift
    components are uniform in [-r_max, +r_max] mm per axis; landmark
    features pick a bone uniformly and then an index uniform over that
    bone's landmarks."""
    kinds = legal_kinds(pass_index, cfg.use_landmarks)
    pool = []
    for _ in range(cfg.pool_size):
        kind = FeatureKind(kinds[int(rng.integers(len(kinds)))])
        u = (0.0, 0.0, 0.0)
        bone = 0
        zeta = 0
        if kind in _SHIFT_KINDS:
            u = tuple(float(x) for x in rng.uniform(-cfg.r_max_mm, cfg.r_max_mm, size=3))
        elif kind == FeatureKind.DIST_LANDMARK:
            bone = int(rng.integers(3)) + 1
            zeta = int(rng.integers(landmark_counts[bone - 1]))
        pool.append(FeatureDescriptor(kind, u, bone, zeta))
    return pool


def descriptors_to_arrays(pool):
    """Pack descriptors into the parallel arrays the kernels consume."""
    n = len(pool)
    kind = np.empty(n, dtype=np.int8)
    u = np.zeros((n, 3), dtype=np.float64)
    bone = np.zeros(n, dtype=np.int8)
    zeta = np.zeros(n, dtype=np.int32)
    for i, d in enumerate(pool):
        kind[i] = int(d.kind)
        u[i] = d.u_mm
        bone[i] = d.bone
        zeta[i] = d.zeta
    return kind, u, bone, zeta


def arrays_to_descriptors(kind, u, bone, zeta):
    return [FeatureDescriptor(FeatureKind(int(kind[i])),
                              (float(u[i, 0]), float(u[i, 1]), float(u[i, 2])),
                              int(bone[i]), int(zeta[i]))
            for i in range(len(kind))]


class FeatureContext:
    """Precomputed per-volume channels needed to evaluate features.

    Channels: intensity, gradient magnitude, three signed bone distances,
    and three cartilage probability maps (zero until a cascade pass
    supplies them). Holds the band-of-interest indices as well.
    """

    def __init__(self, volume, bone_mask, landmarks, cfg):
        require_same_geometry(volume, bone_mask, "bone mask")
        cfg.validate()
        self.volume = volume
        self.landmarks = landmarks
        self.cfg = cfg
        dist = bone_distance_maps(bone_mask)
        self.channels = np.zeros((8, volume.n_voxels), dtype=np.float32)
        self.channels[0] = volume.data
        self.channels[1] = gradient_magnitude(volume).data
        for b, bone in enumerate(BONE_NAMES):
            self.channels[2 + b] = dist[bone]
        self.band = extract_band(dist, cfg.band_tau_in_mm, cfg.band_tau_out_mm)

    def set_probabilities(self, probs):
        """Install cartilage probability maps [3, n_voxels] from a
        previous cascade pass (femoral, tibial, patellar order)."""
        probs = np.asarray(probs, dtype=np.float32)
        if probs.shape != (3, self.volume.n_voxels):
            raise ValidationError("probability maps must be [3, n_voxels]")
        self.channels[5:8] = probs

    def clear_probabilities(self):
        self.channels[5:8] = 0.0


class ContextPack:
    """Several FeatureContexts flattened into kernel-ready arrays."""

    def __init__(self, contexts):
        if not contexts:
            raise ValidationError("need at least one context")
        self.contexts = list(contexts)
        nv = len(self.contexts)
        sizes = [c.volume.n_voxels for c in self.contexts]
        self.vol_off = np.zeros(nv, dtype=np.int64)
        self.vol_off[1:] = np.cumsum(sizes[:-1])
        self.vol_dims = np.array([c.volume.dims for c in self.contexts], dtype=np.int32)
        self.vol_spacing = np.array([c.volume.spacing for c in self.contexts], dtype=np.float64)
        self.vol_origin = np.array([c.volume.origin for c in self.contexts], dtype=np.float64)
        counts0 = self.contexts[0].landmarks.counts
        lm_pts = []
        lm_off = np.zeros((nv, 4), dtype=np.int64)
        total = 0
        for v, c in enumerate(self.contexts):
            if c.landmarks.counts != counts0:
                raise ValidationError("all volumes must share landmark counts per bone")
            for b, bone in enumerate(BONE_NAMES):
                lm_off[v, b] = total
                lm_pts.append(c.landmarks.points[bone])
                total += c.landmarks.points[bone].shape[0]
            lm_off[v, 3] = total
        self.lm_pts = np.ascontiguousarray(np.concatenate(lm_pts, axis=0))
        self.lm_off = lm_off
        self.chans = np.ascontiguousarray(
            np.concatenate([c.channels for c in self.contexts], axis=1))
        self.landmark_counts = counts0

    def kernel_args(self):
        return (self.chans, self.vol_off, self.vol_dims, self.vol_spacing,
                self.vol_origin, self.lm_pts, self.lm_off)

    def refresh_probabilities(self):
        """Copy each context's probability channels back into the pack
        (call after set_probabilities on the member contexts)."""
        for v, c in enumerate(self.contexts):
            o = self.vol_off[v]
            self.chans[5:8, o:o + c.volume.n_voxels] = c.channels[5:8]


def evaluate_feature(pack, descriptor, vol, idx):
    """Evaluate one descriptor at linear voxel indices of one pack
    member. Returns float32 values (reference path for tests and small
    probes; training uses the kernel pool evaluation directly)."""
    kind, u, bone, zeta = descriptors_to_arrays([descriptor])
    idx = np.asarray(idx, dtype=np.int64)
    vols = np.full(idx.shape, vol, dtype=np.int32)
    vals = _kernels.impl.eval_descriptors(*pack.kernel_args(), kind, u, bone, zeta,
                                          vols, idx)
    return vals[0]


def sample_training_voxels(rng, context, gt, per_class_cap):
    """Pick up to ``per_class_cap`` band voxels per class, uniformly
    without replacement, from one labelled volume. Returns (idx, lab)."""
    if not isinstance(gt, LabelVolume):
        raise ValidationError("ground truth must be a LabelVolume")
    require_same_geometry(context.volume, gt, "ground truth")
    band = context.band
    labs = gt.labels[band]
    idx_parts = []
    lab_parts = []
    for c in range(N_CLASSES):
        pool = band[labs == c]
        if pool.size == 0:
            continue
        take = min(per_class_cap, pool.size)
        sel = rng.choice(pool.size, size=take, replace=False)
        sel.sort()
        idx_parts.append(pool[sel])
        lab_parts.append(np.full(take, c, dtype=np.int8))
    idx = np.concatenate(idx_parts)
    lab = np.concatenate(lab_parts)
    return idx, lab
