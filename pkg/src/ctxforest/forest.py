"""Random classification forests over sampled voxel features.

Split search, feature evaluation, and traversal live in the backend
kernels; this module drives training (bagging, per-node candidate
pools, recursion) and owns the on-disk model format.
"""

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import FileFormatError, ValidationError
from .features import (FeatureConfig, N_CLASSES, descriptors_to_arrays,
                       sample_feature_pool)
from .util import check_fields, parallel_map, substream

_MAGIC = b"SCFMODEL"
_VERSION = 1

_LOG_TABLE_CACHE = {}


def log_table(n):
    """table[i] = ln(i) for i in [0, n], with table[0] = 0 so that
    c*table[c] is the x*ln(x) entropy term. Built with math.log so both
    backends read identical doubles."""
    size = _LOG_TABLE_CACHE.get("size", 0)
    if n + 1 > size:
        tab = np.zeros(n + 1, dtype=np.float64)
        for i in range(1, n + 1):
            tab[i] = math.log(i)
        _LOG_TABLE_CACHE["size"] = n + 1
        _LOG_TABLE_CACHE["table"] = tab
    return _LOG_TABLE_CACHE["table"]


@dataclass
class ForestConfig:
    num_trees: int = 60
    max_depth: int = 18
    thresholds_per_feature: int = 10
    min_samples_leaf: int = 1
    min_samples_split: int = 2
    bagging_fraction: float = 0.66
    bootstrap: bool = True
    laplace_alpha: float = 1.0

    def validate(self):
        if self.num_trees < 1:
            raise ValidationError("num_trees must be >= 1")
        if self.max_depth < 1:
            raise ValidationError("max_depth must be >= 1")
        if self.thresholds_per_feature < 1:
            raise ValidationError("thresholds_per_feature must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValidationError("min_samples_leaf must be >= 1")
        if self.min_samples_split < 2 * self.min_samples_leaf:
            raise ValidationError("min_samples_split must be >= 2*min_samples_leaf")
        if not 0.0 < self.bagging_fraction <= 1.0:
            raise ValidationError("bagging_fraction must be in (0, 1]")
        if self.laplace_alpha <= 0:
            raise ValidationError("laplace_alpha must be positive")
        return self

    def to_dict(self):
        return {"num_trees": self.num_trees, "max_depth": self.max_depth,
                "thresholds_per_feature": self.thresholds_per_feature,
                "min_samples_leaf": self.min_samples_leaf,
                "min_samples_split": self.min_samples_split,
                "bagging_fraction": self.bagging_fraction,
                "bootstrap": self.bootstrap, "laplace_alpha": self.laplace_alpha}

    @classmethod
    def from_dict(cls, d):
        check_fields(cls, d, "forest config")
        return cls(**d).validate()


class Tree:
    """Flat-array decision tree. Internal nodes carry a descriptor and a
    threshold (value <= thr goes left); leaves have kind -1 and store
    their posterior row index in ``left``. Children always come after
    their parent, so an ascending scan visits parents first."""

    __slots__ = ("kind", "u", "bone", "zeta", "thr", "left", "right", "leaf_post")

    def __init__(self, kind, u, bone, zeta, thr, left, right, leaf_post):
        self.kind = kind
        self.u = u
        self.bone = bone
        self.zeta = zeta
        self.thr = thr
        self.left = left
        self.right = right
        self.leaf_post = leaf_post

    @property
    def n_nodes(self):
        return len(self.kind)

    @property
    def n_leaves(self):
        return len(self.leaf_post)


class _TreeBuilder:
    def __init__(self):
        self.kind = []
        self.u = []
        self.bone = []
        self.zeta = []
        self.thr = []
        self.left = []
        self.right = []
        self.leaf_post = []

    def add_node(self):
        self.kind.append(0)
        self.u.append((0.0, 0.0, 0.0))
        self.bone.append(0)
        self.zeta.append(0)
        self.thr.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        return len(self.kind) - 1

    def set_leaf(self, node, post):
        self.kind[node] = -1
        self.left[node] = len(self.leaf_post)
        self.leaf_post.append(post)

    def set_split(self, node, desc_arrays, d, thr, left, right):
        kind, u, bone, zeta = desc_arrays
        self.kind[node] = int(kind[d])
        self.u[node] = (float(u[d, 0]), float(u[d, 1]), float(u[d, 2]))
        self.bone[node] = int(bone[d])
        self.zeta[node] = int(zeta[d])
        self.thr[node] = float(thr)
        self.left[node] = left
        self.right[node] = right

    def build(self):
        return Tree(np.array(self.kind, dtype=np.int8),
                    np.array(self.u, dtype=np.float64),
                    np.array(self.bone, dtype=np.int8),
                    np.array(self.zeta, dtype=np.int32),
                    np.array(self.thr, dtype=np.float64),
                    np.array(self.left, dtype=np.int32),
                    np.array(self.right, dtype=np.int32),
                    np.array(self.leaf_post, dtype=np.float64).reshape(-1, N_CLASSES))


def _leaf_posterior(labs, alpha):
    counts = np.bincount(labs, minlength=N_CLASSES).astype(np.float64)
    return (counts + alpha) / (labs.size + alpha * N_CLASSES)


def train_tree(pack, s_vol, s_idx, s_lab, cfg, feat_cfg, pass_index, rng):
    """Grow one tree on (volume, voxel, label) samples.

    Bagging happens here: the tree trains on ``bagging_fraction`` of the
    samples drawn with (or without) replacement from its own stream.
    Candidate descriptor pools and threshold fractions are redrawn at
    every node from the same stream, so a (seed, tree) pair fully
    determines the tree.
    """
    n = len(s_lab)
    n_bag = max(1, int(round(cfg.bagging_fraction * n)))
    if cfg.bootstrap:
        bag = rng.integers(n, size=n_bag)
    else:
        bag = rng.permutation(n)[:n_bag]
    bag.sort()
    s_vol = np.ascontiguousarray(s_vol[bag], dtype=np.int32)
    s_idx = np.ascontiguousarray(s_idx[bag], dtype=np.int64)
    s_lab = np.ascontiguousarray(s_lab[bag], dtype=np.int8)

    tab = log_table(n_bag)
    pk = pack.kernel_args()
    b = _TreeBuilder()
    root = b.add_node()
    stack = [(root, np.arange(n_bag, dtype=np.int64), 0)]
    while stack:
        node, ids, depth = stack.pop()
        labs = s_lab[ids]
        if (depth >= cfg.max_depth or ids.size < cfg.min_samples_split
                or labs.min() == labs.max()):
            b.set_leaf(node, _leaf_posterior(labs, cfg.laplace_alpha))
            continue
        pool = sample_feature_pool(rng, feat_cfg, pass_index, pack.landmark_counts)
        desc = descriptors_to_arrays(pool)
        frac = rng.uniform(0.0, 1.0, size=(feat_cfg.pool_size, cfg.thresholds_per_feature))
        res = _kernels.impl.node_split(*pk, *desc, s_vol, s_idx, s_lab,
                                       ids, frac, cfg.min_samples_leaf,
                                       N_CLASSES, tab)
        if res is None:
            b.set_leaf(node, _leaf_posterior(labs, cfg.laplace_alpha))
            continue
        d, thr, _gain, go_left = res
        lnode = b.add_node()
        rnode = b.add_node()
        b.set_split(node, desc, d, thr, lnode, rnode)
        # push right first so the left subtree is laid out first
        stack.append((rnode, ids[~go_left], depth + 1))
        stack.append((lnode, ids[go_left], depth + 1))
    return b.build()


class RandomForest:
    def __init__(self, trees, cfg, feat_cfg, pass_index):
        if not trees:
            raise ValidationError("forest needs at least one tree")
        self.trees = list(trees)
        self.cfg = cfg
        self.feat_cfg = feat_cfg
        self.pass_index = pass_index

    @property
    def num_trees(self):
        return len(self.trees)

    def predict(self, pack, vol, idx):
        """Mean leaf posterior [n, N_CLASSES] over all trees at linear
        voxel indices ``idx`` of pack member ``vol``."""
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        pk = pack.kernel_args()
        out = np.zeros((idx.size, N_CLASSES), dtype=np.float64)
        for t in self.trees:
            _kernels.impl.predict_tree(*pk, vol, idx, t.kind, t.u, t.bone,
                                       t.zeta, t.thr, t.left, t.right,
                                       t.leaf_post, out)
        out /= self.num_trees
        return out

    def kind_histogram(self):
        """How often each feature kind got chosen at internal nodes."""
        counts = np.zeros(17, dtype=np.int64)
        for t in self.trees:
            internal = t.kind[t.kind >= 0]
            counts += np.bincount(internal, minlength=17)
        return counts


def train_forest(pack, s_vol, s_idx, s_lab, cfg, feat_cfg, pass_index=0,
                 threads=None, seed_tag=()):
    """Train ``cfg.num_trees`` trees. Each tree gets an independent RNG
    stream keyed by (feature seed, pass, tag, tree), so results do not
    depend on thread scheduling."""
    cfg.validate()
    feat_cfg.validate()
    if len(s_vol) != len(s_idx) or len(s_idx) != len(s_lab):
        raise ValidationError("sample arrays must have equal length")
    if len(s_lab) < cfg.min_samples_split:
        raise ValidationError("not enough training samples")
    s_vol = np.ascontiguousarray(s_vol, dtype=np.int32)
    s_idx = np.ascontiguousarray(s_idx, dtype=np.int64)
    s_lab = np.ascontiguousarray(s_lab, dtype=np.int8)
    if s_lab.min() < 0 or s_lab.max() >= N_CLASSES:
        raise ValidationError("labels out of range")

    def one(t):
        rng = substream(feat_cfg.seed, "pass", pass_index, *seed_tag, "tree", t)
        return train_tree(pack, s_vol, s_idx, s_lab, cfg, feat_cfg, pass_index, rng)

    trees = parallel_map(one, range(cfg.num_trees), threads=threads)
    return RandomForest(trees, cfg, feat_cfg, pass_index)


# ---------------------------------------------------------------------------
# serialization

_TREE_FIELDS = (("kind", "<i1"), ("bone", "<i1"), ("zeta", "<i4"),
                ("left", "<i4"), ("right", "<i4"), ("thr", "<f8"),
                ("u", "<f8"), ("leaf_post", "<f8"))


def _tree_blob(tree):
    parts = []
    for name, dt in _TREE_FIELDS:
        parts.append(np.ascontiguousarray(getattr(tree, name)).astype(dt).tobytes())
    return b"".join(parts)


def _tree_from_blob(buf, off, n_nodes, n_leaves):
    shapes = {"kind": n_nodes, "bone": n_nodes, "zeta": n_nodes, "left": n_nodes,
              "right": n_nodes, "thr": n_nodes, "u": 3 * n_nodes,
              "leaf_post": N_CLASSES * n_leaves}
    vals = {}
    for name, dt in _TREE_FIELDS:
        count = shapes[name]
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=off)
        off += arr.nbytes
        vals[name] = arr.copy()
    native = {"kind": np.int8, "bone": np.int8, "zeta": np.int32, "left": np.int32,
              "right": np.int32, "thr": np.float64, "u": np.float64,
              "leaf_post": np.float64}
    for name in vals:
        vals[name] = vals[name].astype(native[name])
    vals["u"] = vals["u"].reshape(n_nodes, 3)
    vals["leaf_post"] = vals["leaf_post"].reshape(n_leaves, N_CLASSES)
    return Tree(**vals), off


def forest_header(forest):
    return {"format": "scfmodel", "n_classes": N_CLASSES,
            "pass_index": forest.pass_index,
            "forest_config": forest.cfg.to_dict(),
            "feature_config": forest.feat_cfg.to_dict(),
            "trees": [{"n_nodes": t.n_nodes, "n_leaves": t.n_leaves}
                      for t in forest.trees]}


def forest_to_bytes(forest):
    header = json.dumps(forest_header(forest), sort_keys=True,
                        separators=(",", ":")).encode()
    out = [_MAGIC, struct.pack("<I", _VERSION), struct.pack("<Q", len(header)), header]
    for t in forest.trees:
        out.append(_tree_blob(t))
    return b"".join(out)


def forest_from_bytes(buf, what="forest model"):
    if buf[:8] != _MAGIC:
        raise FileFormatError(f"{what}: bad magic, not a forest model")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != _VERSION:
        raise FileFormatError(f"{what}: unsupported model version {version}")
    (hlen,) = struct.unpack_from("<Q", buf, 12)
    try:
        header = json.loads(buf[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FileFormatError(f"{what}: corrupt header: {e}") from None
    if header.get("format") != "scfmodel" or header.get("n_classes") != N_CLASSES:
        raise FileFormatError(f"{what}: unrecognized header")
    try:
        cfg = ForestConfig.from_dict(header["forest_config"])
        feat_cfg = FeatureConfig.from_dict(header["feature_config"])
        tree_meta = header["trees"]
        pass_index = int(header["pass_index"])
    except (KeyError, TypeError) as e:
        raise FileFormatError(f"{what}: incomplete header: {e}") from None
    off = 20 + hlen
    trees = []
    for meta in tree_meta:
        tree, off = _tree_from_blob(buf, off, int(meta["n_nodes"]), int(meta["n_leaves"]))
        trees.append(tree)
    if off != len(buf):
        raise FileFormatError(f"{what}: trailing bytes after last tree")
    return RandomForest(trees, cfg, feat_cfg, pass_index)


def save_forest(path, forest):
    with open(path, "wb") as fh:
        fh.write(forest_to_bytes(forest))


def load_forest(path):
    with open(path, "rb") as fh:
        return forest_from_bytes(fh.read(), what=str(path))
