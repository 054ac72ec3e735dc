"""Multi-label MRF refinement of cascade probabilities via graph cuts.

Energy over labelings L of the band of interest:

    E(L) = sum_x D_x(L(x)) + sum_{x~y} V_xy(L(x), L(y))

with D_x(l) = -lambda*ln(max(P_l(x), p_floor)) and V a contrast-weighted
Potts pair term over the 6-neighborhood. Minimized by cycling
alpha-expansion moves, each reduced to a binary min-cut.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ValidationError
from .features import N_CLASSES
from .util import check_fields
from .volume import LabelVolume

# exp() overflow guard for the positive-exponent smoothness variant
_EXP_CLAMP = 700.0


@dataclass
class EnergyParams:
    lam: float = 1.5
    sigma: float = 30.0
    p_floor: float = 1e-6
    paper_literal_smoothness: bool = False  # positive exponent variant

    def validate(self):
        if self.lam <= 0:
            raise ValidationError("lambda must be positive")
        if self.sigma <= 0:
            raise ValidationError("sigma must be positive")
        if not 0.0 < self.p_floor < 1.0:
            raise ValidationError("p_floor must be in (0, 1)")
        return self

    def to_dict(self):
        return {"lambda": self.lam, "sigma": self.sigma, "p_floor": self.p_floor,
                "paper_literal_smoothness": self.paper_literal_smoothness}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        check_fields(cls, d, "energy params")
        return cls(**d).validate()


# ---------------------------------------------------------------------------
# energy terms

def _clamped_probs(probs, i, params):
    pf = float(probs[0][i]) if isinstance(probs, (tuple, list)) else float(probs[0, i])
    pt = float(probs[1][i]) if isinstance(probs, (tuple, list)) else float(probs[1, i])
    pp = float(probs[2][i]) if isinstance(probs, (tuple, list)) else float(probs[2, i])
    pbg = min(max(1.0 - pf - pt - pp, params.p_floor), 1.0)
    return (pbg, max(pf, params.p_floor), max(pt, params.p_floor),
            max(pp, params.p_floor))


def data_term(probs, i, l, params):
    """-lambda*ln P_l at linear voxel index ``i``. ``probs`` holds the
    cartilage probability maps (femoral, tibial, patellar); background is
    their complement, clamped to [p_floor, 1]."""
    if not 0 <= l < N_CLASSES:
        raise ValidationError(f"label {l} out of range")
    return -params.lam * math.log(_clamped_probs(probs, i, params)[l])


def data_matrix(probs, band, params):
    """Data term for every band voxel and label, [n_band, 4] float64."""
    pf = np.asarray(probs[0], dtype=np.float64)[band]
    pt = np.asarray(probs[1], dtype=np.float64)[band]
    pp = np.asarray(probs[2], dtype=np.float64)[band]
    pbg = np.clip(1.0 - pf - pt - pp, params.p_floor, 1.0)
    cols = np.stack([pbg, np.maximum(pf, params.p_floor),
                     np.maximum(pt, params.p_floor),
                     np.maximum(pp, params.p_floor)], axis=1)
    return -params.lam * np.log(cols)


def _contrast_weight(di, dist_mm, params):
    """Pair weight for unlike labels: exp of the intensity contrast term,
    scaled by the inverse inter-voxel distance to respect anisotropy."""
    e = (di * di) / (2.0 * params.sigma * params.sigma)
    if not params.paper_literal_smoothness:
        e = -e
    return np.exp(np.minimum(e, _EXP_CLAMP)) / dist_mm


def smoothness_term(vol, i, j, l_i, l_j, params):
    """V(i, j) for 6-neighbor voxel indices (integer triples)."""
    diff = [abs(a - b) for a, b in zip(i, j)]
    if sorted(diff) != [0, 0, 1]:
        raise ValidationError("smoothness term defined for 6-neighbors only")
    if l_i == l_j:
        return 0.0
    axis = diff.index(1)
    nx, ny, _nz = vol.dims
    li = i[0] + nx * (i[1] + ny * i[2])
    lj = j[0] + nx * (j[1] + ny * j[2])
    di = float(vol.data[li]) - float(vol.data[lj])
    return float(_contrast_weight(np.float64(di), vol.spacing[axis], params))


# ---------------------------------------------------------------------------
# max flow on explicit networks

class FlowNetwork:
    """Directed-arc flow network with implicit source/sink terminals.

    Interior nodes are 0..n-1; terminal capacities attach per node via
    add_terminal. Internally the solver consolidates antiparallel
    terminal arcs, so the reported flow adds the bypassed constant back.
    """

    def __init__(self, n_nodes):
        if n_nodes < 1:
            raise ValidationError("network needs at least one node")
        self.n = n_nodes
        self.cap_s = np.zeros(n_nodes, dtype=np.float64)
        self.cap_t = np.zeros(n_nodes, dtype=np.float64)
        self.arcs = []  # (i, j, cap_ij, cap_ji)

    def _check_node(self, i):
        if not 0 <= i < self.n:
            raise ValidationError(f"node {i} out of range")

    def _check_cap(self, c):
        if not (c >= 0 and math.isfinite(c)):
            raise ValidationError("capacities must be finite and non-negative")

    def add_terminal(self, i, cap_source, cap_sink):
        self._check_node(i)
        self._check_cap(cap_source)
        self._check_cap(cap_sink)
        self.cap_s[i] += cap_source
        self.cap_t[i] += cap_sink

    def add_edge(self, i, j, cap, rev_cap=0.0):
        self._check_node(i)
        self._check_node(j)
        if i == j:
            raise ValidationError("self-loops not allowed")
        self._check_cap(cap)
        self._check_cap(rev_cap)
        self.arcs.append((i, j, float(cap), float(rev_cap)))

    def csr(self):
        """CSR residual-arc arrays (first, head, rev, cap); every edge
        contributes a residual-paired arc couple."""
        n = self.n
        m = 2 * len(self.arcs)
        deg = np.zeros(n + 1, dtype=np.int64)
        for i, j, _c, _rc in self.arcs:
            deg[i + 1] += 1
            deg[j + 1] += 1
        first = np.cumsum(deg)
        head = np.zeros(m, dtype=np.int32)
        rev = np.zeros(m, dtype=np.int32)
        cap = np.zeros(m, dtype=np.float64)
        cursor = first[:-1].copy()
        for i, j, c, rc in self.arcs:
            a = cursor[i]
            cursor[i] += 1
            b = cursor[j]
            cursor[j] += 1
            head[a] = j
            head[b] = i
            rev[a] = b
            rev[b] = a
            cap[a] = c
            cap[b] = rc
        return first, head, rev, cap


def max_flow(net):
    """Solve the network; returns (flow, source_side) where source_side
    is a boolean array over interior nodes (True = source component of
    the canonical minimal cut). Cross-checks flow against the cut value
    it induces before returning."""
    base = np.minimum(net.cap_s, net.cap_t).sum()
    tr_cap = net.cap_s - net.cap_t
    first, head, rev, cap = net.csr()
    flow, src_side = _kernels.impl.maxflow_csr(tr_cap, first, head, rev, cap.copy())
    flow = float(flow + base)
    src = src_side.astype(bool)
    # strong duality audit on the original capacities
    cut = float(net.cap_t[src].sum() + net.cap_s[~src].sum())
    for i, j, c, rc in net.arcs:
        if src[i] and not src[j]:
            cut += c
        elif src[j] and not src[i]:
            cut += rc
    if abs(cut - flow) > 1e-6 * (1.0 + abs(flow)):
        raise ValidationError(f"max-flow/min-cut mismatch: flow={flow!r} cut={cut!r}")
    return flow, src


# ---------------------------------------------------------------------------
# alpha expansion

class _BandGraph:
    """Static structure shared by all expansion moves on one volume:
    band indexing, interior neighbor pairs, band/off-band boundary pairs
    (off-band labels are fixed background), contrast weights, and the CSR
    skeleton of the move graph."""

    def __init__(self, vol, band, params):
        n_vox = vol.n_voxels
        if band.size == 0:
            raise ValidationError("band of interest is empty")
        self.band = band
        self.node_of = np.full(n_vox, -1, dtype=np.int64)
        self.node_of[band] = np.arange(band.size)
        in_band = self.node_of >= 0

        nx, ny, nz = vol.dims
        data = vol.data.astype(np.float64)
        pairs_i = []
        pairs_j = []
        pairs_w = []
        bnd_i = []
        bnd_w = []
        bnd_nbr = []
        idx = np.arange(n_vox, dtype=np.int64)
        ix = idx % nx
        iy = (idx // nx) % ny
        iz = idx // (nx * ny)
        for axis, stride, coord, extent in ((0, 1, ix, nx), (1, nx, iy, ny),
                                            (2, nx * ny, iz, nz)):
            if extent < 2:
                continue
            a = idx[coord < extent - 1]
            b = a + stride
            w = _contrast_weight(data[a] - data[b], vol.spacing[axis], params)
            both = in_band[a] & in_band[b]
            pairs_i.append(self.node_of[a[both]])
            pairs_j.append(self.node_of[b[both]])
            pairs_w.append(w[both])
            for this, other in ((a, b), (b, a)):
                only = in_band[this] & ~in_band[other]
                bnd_i.append(self.node_of[this[only]])
                bnd_w.append(w[only])
                bnd_nbr.append(other[only])
        self.pi = np.concatenate(pairs_i) if pairs_i else np.zeros(0, np.int64)
        self.pj = np.concatenate(pairs_j) if pairs_j else np.zeros(0, np.int64)
        self.pw = np.concatenate(pairs_w) if pairs_w else np.zeros(0, np.float64)
        self.bi = np.concatenate(bnd_i) if bnd_i else np.zeros(0, np.int64)
        self.bw = np.concatenate(bnd_w) if bnd_w else np.zeros(0, np.float64)
        self.bnbr = np.concatenate(bnd_nbr) if bnd_nbr else np.zeros(0, np.int64)

        # CSR skeleton: pair k owns arc slots fwd[k] (pi->pj) and rev;
        # arcs grouped by tail node via a stable sort
        n = band.size
        kp = self.pi.size
        m = 2 * kp
        deg = np.bincount(np.concatenate([self.pi, self.pj]), minlength=n)
        self.first = np.zeros(n + 1, dtype=np.int64)
        self.first[1:] = np.cumsum(deg)
        tails = np.concatenate([self.pi, self.pj])
        heads = np.concatenate([self.pj, self.pi])
        order = np.argsort(tails, kind="stable")
        pos = np.empty(m, dtype=np.int64)
        pos[order] = np.arange(m)
        self.head = heads[order].astype(np.int32)
        rev_orig = np.concatenate([np.arange(kp) + kp, np.arange(kp)])
        self.rev = pos[rev_orig[order]].astype(np.int32)
        self.arc_fwd = pos[:kp]
        self.arc_rev = pos[kp:]

    def energy(self, dmat, lab):
        """Band-restricted energy of band labels ``lab`` (audit path)."""
        e = dmat[np.arange(lab.size), lab].sum()
        e += (self.pw * (lab[self.pi] != lab[self.pj])).sum()
        e += (self.bw * (lab[self.bi] != 0)).sum()
        return float(e)

    def move_cut(self, dmat, lab, alpha):
        """Solve one alpha-expansion move; returns proposed band labels."""
        n = lab.size
        tcost0 = dmat[np.arange(n), lab].copy()
        tcost1 = dmat[:, alpha].copy()
        tcost0 += np.bincount(self.bi, weights=self.bw * (lab[self.bi] != 0),
                              minlength=n)
        tcost1 += np.bincount(self.bi, weights=self.bw * (alpha != 0),
                              minlength=n)
        li = lab[self.pi]
        lj = lab[self.pj]
        a_term = self.pw * (li != lj)
        b_term = self.pw * (li != alpha)
        c_term = self.pw * (alpha != lj)
        tcost1 += np.bincount(self.pi, weights=c_term - a_term, minlength=n)
        tcost1 += np.bincount(self.pj, weights=-c_term, minlength=n)
        p_cap = b_term + c_term - a_term
        cap = np.zeros(self.head.size, dtype=np.float64)
        cap[self.arc_fwd] = p_cap
        tr_cap = tcost1 - tcost0
        _flow, src_side = _kernels.impl.maxflow_csr(tr_cap, self.first, self.head,
                                                    self.rev, cap)
        return np.where(src_side.astype(bool), lab,
                        np.uint8(alpha)).astype(np.uint8)


def alpha_expansion(probs, vol, band, init, params, trace=None):
    """Minimize the band energy by cyclic expansion moves.

    ``probs`` are full-volume cartilage probability maps [3, n_voxels];
    ``init`` is the warm-start labeling (background outside the band).
    Each move is accepted only if the audited energy strictly decreases;
    iteration stops after a full label cycle without an accepted move.
    Appends (cycle, alpha, energy) rows to ``trace`` if given.
    """
    params.validate()
    if not isinstance(init, LabelVolume):
        raise ValidationError("init must be a LabelVolume")
    band = np.asarray(band, dtype=np.int64)
    off_band = np.ones(vol.n_voxels, dtype=bool)
    off_band[band] = False
    if np.any(init.labels[off_band] != 0):
        raise ValidationError("init labels outside the band must be background")

    g = _BandGraph(vol, band, params)
    dmat = data_matrix(probs, band, params)
    lab = init.labels[band].astype(np.uint8)
    energy = g.energy(dmat, lab)
    if trace is not None:
        trace.append((0, -1, energy))
    cycle = 0
    while True:
        cycle += 1
        accepted = False
        for alpha in range(N_CLASSES):
            cand = g.move_cut(dmat, lab, alpha)
            e_cand = g.energy(dmat, cand)
            assert e_cand <= energy + 1e-9 * (1.0 + abs(energy)), \
                "expansion move increased energy"
            if e_cand < energy:
                lab = cand
                energy = e_cand
                accepted = True
            if trace is not None:
                trace.append((cycle, alpha, energy))
        if not accepted:
            break
    out = np.zeros(vol.n_voxels, dtype=np.uint8)
    out[band] = lab
    return LabelVolume(vol.dims, vol.spacing, vol.origin, out,
                       palette=init.palette)


def energy_of_labeling(label_vol, probs, vol, band, params):
    """Audit energy of an arbitrary labeling: data terms over band
    voxels plus pair terms over 6-neighbor pairs touching the band."""
    params.validate()
    band = np.asarray(band, dtype=np.int64)
    g = _BandGraph(vol, band, params)
    dmat = data_matrix(probs, band, params)
    lab_full = label_vol.labels
    lab = lab_full[band]
    e = dmat[np.arange(lab.size), lab].sum()
    e += (g.pw * (lab[g.pi] != lab[g.pj])).sum()
    e += (g.bw * (lab[g.bi] != lab_full[g.bnbr])).sum()
    return float(e)


def refine(posterior, context, params, trace=None):
    """Graph-cuts refinement of cascade band posteriors for one volume.
    Returns the refined LabelVolume; appends energy-trace rows if
    ``trace`` is given."""
    from .cascade import argmax_labels
    from .features import CLASS_PALETTE

    band = context.band
    vol = context.volume
    probs = np.zeros((3, vol.n_voxels), dtype=np.float64)
    for c in (1, 2, 3):
        probs[c - 1, band] = posterior[:, c]
    init_lab = argmax_labels(posterior, band, vol.n_voxels)
    init = LabelVolume(vol.dims, vol.spacing, vol.origin, init_lab,
                       palette=dict(CLASS_PALETTE))
    return alpha_expansion(probs, vol, band, init, params, trace=trace)


def format_trace(trace):
    """Plain-text audit log lines for a refinement energy trace."""
    lines = ["cycle alpha energy"]
    for cycle, alpha, energy in trace:
        name = "init" if alpha < 0 else str(alpha)
        lines.append(f"{cycle} {name} {energy!r}")
    return "\n".join(lines) + "\n"
