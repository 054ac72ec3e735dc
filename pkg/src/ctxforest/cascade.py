"""Iterative cascades of forests with semantic context.

The first pass classifies from image and distance features alone. Every
later pass re-trains with the previous pass's cartilage probability maps
installed as extra channels, unlocking the probability and
relative-shift-probability features.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FileFormatError, ValidationError
from .features import ContextPack, N_CLASSES, sample_training_voxels
from .forest import forest_from_bytes, forest_to_bytes, train_forest
from .util import check_fields, substream

_MAGIC = b"SCFCASC"
_VERSION = 1


@dataclass
class CascadeConfig:
    num_passes: int = 2
    samples_per_class_per_volume: int = 4000
    cross_context: bool = False

    def validate(self):
        if self.num_passes < 1:
            raise ValidationError("num_passes must be >= 1")
        if self.samples_per_class_per_volume < 1:
            raise ValidationError("samples_per_class_per_volume must be >= 1")
        return self

    def to_dict(self):
        return {"num_passes": self.num_passes,
                "samples_per_class_per_volume": self.samples_per_class_per_volume,
                "cross_context": self.cross_context}

    @classmethod
    def from_dict(cls, d):
        check_fields(cls, d, "cascade config")
        return cls(**d).validate()


class CascadeModel:
    """One trained forest per pass, in pass order."""

    def __init__(self, forests, cfg, meta=None):
        if not forests:
            raise ValidationError("cascade needs at least one pass")
        for k, f in enumerate(forests):
            if f.pass_index != k:
                raise ValidationError("forest pass indices must be 0..num_passes-1")
        self.forests = list(forests)
        self.cfg = cfg
        self.meta = dict(meta or {})

    @property
    def num_passes(self):
        return len(self.forests)

    def feature_frequency(self):
        """Per-pass histogram over feature kinds at internal nodes."""
        return np.stack([f.kind_histogram() for f in self.forests])


def cartilage_probability_maps(posterior, band, n_voxels):
    """Expand band posteriors [n_band, 4] to full-volume cartilage
    probability channels [3, n_voxels] (zero outside the band)."""
    maps = np.zeros((3, n_voxels), dtype=np.float32)
    for c in (1, 2, 3):
        maps[c - 1, band] = posterior[:, c]
    return maps


def _install_pass_maps(pack, forest, volumes=None, threads=None):
    vols = range(len(pack.contexts)) if volumes is None else volumes
    for v in vols:
        ctx = pack.contexts[v]
        post = forest.predict(pack, v, ctx.band)
        ctx.set_probabilities(cartilage_probability_maps(post, ctx.band,
                                                         ctx.volume.n_voxels))
    pack.refresh_probabilities()


def train_cascade(contexts, gts, cascade_cfg, forest_cfg, feat_cfg, threads=None):
    """Train a cascade on labelled volumes.

    Training voxels are drawn once per volume (class-balanced up to the
    per-class cap) and reused by every pass. Later passes train against
    probability maps produced by the shipped previous-pass forest on the
    training volumes themselves; with ``cross_context`` the maps come
    from two half-trained forests instead so no volume sees context from
    a forest trained on itself.
    """
    cascade_cfg.validate()
    forest_cfg.validate()
    feat_cfg.validate()
    if len(contexts) != len(gts):
        raise ValidationError("need one ground-truth label volume per context")
    pack = ContextPack(contexts)
    s_vol = []
    s_idx = []
    s_lab = []
    for v, (ctx, gt) in enumerate(zip(contexts, gts)):
        rng = substream(feat_cfg.seed, "samples", v)
        idx, lab = sample_training_voxels(rng, ctx, gt,
                                          cascade_cfg.samples_per_class_per_volume)
        s_vol.append(np.full(idx.size, v, dtype=np.int32))
        s_idx.append(idx)
        s_lab.append(lab)
    s_vol = np.concatenate(s_vol)
    s_idx = np.concatenate(s_idx)
    s_lab = np.concatenate(s_lab)

    for ctx in contexts:
        ctx.clear_probabilities()
    pack.refresh_probabilities()

    forests = []
    for k in range(cascade_cfg.num_passes):
        if k > 0:
            if cascade_cfg.cross_context and len(contexts) >= 2:
                _install_cross_context(pack, s_vol, s_idx, s_lab, forests[-1],
                                       forest_cfg, feat_cfg, k - 1, threads)
            else:
                _install_pass_maps(pack, forests[-1], threads=threads)
        forests.append(train_forest(pack, s_vol, s_idx, s_lab, forest_cfg,
                                    feat_cfg, pass_index=k, threads=threads))
    meta = {"training_spacing": [float(s) for s in contexts[0].volume.spacing]}
    return CascadeModel(forests, cascade_cfg, meta=meta)


def _install_cross_context(pack, s_vol, s_idx, s_lab, shipped, forest_cfg,
                           feat_cfg, pass_index, threads):
    """Two-fold context maps: each half of the training volumes gets its
    maps from a forest trained only on the other half."""
    nv = len(pack.contexts)
    half_a = list(range(nv // 2))
    half_b = list(range(nv // 2, nv))
    for train_half, pred_half, tag in ((half_a, half_b, "xa"), (half_b, half_a, "xb")):
        keep = np.isin(s_vol, train_half)
        f = train_forest(pack, s_vol[keep], s_idx[keep], s_lab[keep],
                         forest_cfg, feat_cfg, pass_index=pass_index,
                         threads=threads, seed_tag=("xctx", tag))
        for v in pred_half:
            ctx = pack.contexts[v]
            post = f.predict(pack, v, ctx.band)
            ctx.set_probabilities(cartilage_probability_maps(
                post, ctx.band, ctx.volume.n_voxels))
    pack.refresh_probabilities()


def infer_cascade_passes(model, context, threads=None):
    """Run every pass on one volume, returning each pass's band
    posterior [n_band, N_CLASSES] in pass order. ``context.band`` maps
    rows to voxels; its probability channels hold the last installed
    maps afterwards."""
    context.clear_probabilities()
    pack = ContextPack([context])
    posts = []
    for k, forest in enumerate(model.forests):
        if k > 0:
            context.set_probabilities(cartilage_probability_maps(
                posts[-1], context.band, context.volume.n_voxels))
            pack.refresh_probabilities()
        posts.append(forest.predict(pack, 0, context.band))
    return posts


def infer_cascade(model, context, threads=None):
    """Final-pass band posterior for one volume."""
    return infer_cascade_passes(model, context, threads=threads)[-1]


def argmax_labels(posterior, band, n_voxels):
    """Hard labels from band posteriors; everything off-band is
    background."""
    lab = np.zeros(n_voxels, dtype=np.uint8)
    lab[band] = np.argmax(posterior, axis=1).astype(np.uint8)
    return lab


# ---------------------------------------------------------------------------
# serialization

def cascade_to_bytes(model):
    header = json.dumps({"format": "scfcasc", "n_classes": N_CLASSES,
                         "cascade_config": model.cfg.to_dict(),
                         "num_forests": model.num_passes, "meta": model.meta},
                        sort_keys=True, separators=(",", ":")).encode()
    out = [_MAGIC, struct.pack("<I", _VERSION), struct.pack("<Q", len(header)), header]
    for f in model.forests:
        blob = forest_to_bytes(f)
        out.append(struct.pack("<Q", len(blob)))
        out.append(blob)
    return b"".join(out)


def cascade_from_bytes(buf, what="cascade model"):
    if buf[:7] != _MAGIC:
        raise FileFormatError(f"{what}: bad magic, not a cascade model")
    (version,) = struct.unpack_from("<I", buf, 7)
    if version != _VERSION:
        raise FileFormatError(f"{what}: unsupported cascade version {version}")
    (hlen,) = struct.unpack_from("<Q", buf, 11)
    try:
        header = json.loads(buf[19:19 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FileFormatError(f"{what}: corrupt header: {e}") from None
    if header.get("format") != "scfcasc":
        raise FileFormatError(f"{what}: unrecognized header")
    try:
        cfg = CascadeConfig.from_dict(header["cascade_config"])
        n_forests = int(header["num_forests"])
    except (KeyError, TypeError) as e:
        raise FileFormatError(f"{what}: incomplete header: {e}") from None
    off = 19 + hlen
    forests = []
    for i in range(n_forests):
        if off + 8 > len(buf):
            raise FileFormatError(f"{what}: truncated cascade")
        (blen,) = struct.unpack_from("<Q", buf, off)
        off += 8
        if off + blen > len(buf):
            raise FileFormatError(f"{what}: truncated forest blob {i}")
        forests.append(forest_from_bytes(buf[off:off + blen],
                                         what=f"{what} (pass {i})"))
        off += blen
    if off != len(buf):
        raise FileFormatError(f"{what}: trailing bytes")
    if cfg.num_passes != len(forests):
        raise FileFormatError(f"{what}: num_passes disagrees with stored forests")
    return CascadeModel(forests, cfg, meta=header.get("meta", {}))


def save_cascade(path, model):
    with open(path, "wb") as fh:
        fh.write(cascade_to_bytes(model))


def load_cascade(path):
    with open(path, "rb") as fh:
        return cascade_from_bytes(fh.read(), what=str(path))
