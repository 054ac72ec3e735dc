"""Pure numpy/Python kernels (fallback backend).

Arithmetic is arranged to match the compiled backend bit-for-bit where
practical: feature values are computed in float64 and stored as float32,
per-class sums use a fixed left-to-right order, and log factors come from
a shared lookup table instead of vectorized transcendentals.
"""

from collections import deque

import numpy as np

# feature kind codes (shared with the compiled backend and the model format)
K_INTENSITY = 0
K_GRADMAG = 1
K_DIST_F = 2
K_DIST_T = 3
K_DIST_P = 4
K_SUM_FT = 5
K_DIFF_FT = 6
K_SUM_FP = 7
K_DIFF_FP = 8
K_DIST_LANDMARK = 9
K_RSID = 10
K_PROB_F = 11
K_PROB_T = 12
K_PROB_P = 13
K_RSPD_F = 14
K_RSPD_T = 15
K_RSPD_P = 16

# channel slots in a context pack
CH_I, CH_G, CH_DF, CH_DT, CH_DP, CH_PF, CH_PT, CH_PP = range(8)

_DIRECT_CHANNEL = {
    K_INTENSITY: CH_I,
    K_GRADMAG: CH_G,
    K_DIST_F: CH_DF,
    K_DIST_T: CH_DT,
    K_DIST_P: CH_DP,
    K_PROB_F: CH_PF,
    K_PROB_T: CH_PT,
    K_PROB_P: CH_PP,
}
_SHIFT_CHANNEL = {
    K_RSID: CH_I,
    K_RSPD_F: CH_PF,
    K_RSPD_T: CH_PT,
    K_RSPD_P: CH_PP,
}

GAIN_EPS = 1e-9


# ---------------------------------------------------------------------------
# exact squared Euclidean distance transform (separable, anisotropic)

def edt_squared(src, nx, ny, nz, sx, sy, sz):
    """Squared distance (mm^2) from every voxel center to the nearest
    source voxel center. ``src`` is a flat uint8 mask, x fastest."""
    g = np.where(src.astype(bool), 0.0, np.inf)
    g = g.reshape((nx, ny, nz), order="F")
    for axis, h in ((0, sx), (1, sy), (2, sz)):
        g = _dt_axis(g, axis, float(h))
    return np.ascontiguousarray(g.reshape(-1, order="F"))


def _dt_axis(g, axis, h):
    # out[.., x] = min_q g[.., q] + ((x-q)*h)^2, evaluated as a dense min
    # over the per-row cost matrix (exact; the compiled backend computes
    # the same dense minima row by row, so the results agree bitwise).
    arr = np.ascontiguousarray(np.moveaxis(g, axis, -1))
    n = arr.shape[-1]
    rows = arr.reshape(-1, n)
    q = np.arange(n, dtype=np.float64)
    d = (q[:, None] - q[None, :]) * h
    cost = d * d  # cost[x, q]
    out = np.empty_like(rows)
    chunk = max(1, 4_000_000 // (n * n + 1))
    for r0 in range(0, rows.shape[0], chunk):
        blk = rows[r0:r0 + chunk]
        out[r0:r0 + chunk] = (blk[:, None, :] + cost[None, :, :]).min(axis=2)
    return np.moveaxis(out.reshape(arr.shape), -1, axis)


# ---------------------------------------------------------------------------
# feature evaluation over a context pack

def _decompose(idxs, nx, ny, nz):
    ix = idxs % nx
    rest = idxs // nx
    iy = rest % ny
    iz = rest // ny
    return ix, iy, iz


def _eval_one(chans, vol_off, vol_dims, vol_spacing, vol_origin, lm_pts, lm_off,
              kind, u, bone, zeta, vols, idxs):
    """float32 values of one descriptor at (volume, linear index) pairs."""
    kind = int(kind)
    off = vol_off[vols]
    pos = off + idxs
    if kind in _DIRECT_CHANNEL:
        return chans[_DIRECT_CHANNEL[kind], pos].copy()
    if kind in (K_SUM_FT, K_DIFF_FT, K_SUM_FP, K_DIFF_FP):
        a = chans[CH_DF, pos].astype(np.float64)
        other = CH_DT if kind in (K_SUM_FT, K_DIFF_FT) else CH_DP
        b = chans[other, pos].astype(np.float64)
        v = a + b if kind in (K_SUM_FT, K_SUM_FP) else a - b
        return v.astype(np.float32)
    nx = vol_dims[vols, 0].astype(np.int64)
    ny = vol_dims[vols, 1].astype(np.int64)
    nz = vol_dims[vols, 2].astype(np.int64)
    ix, iy, iz = _decompose(idxs, nx, ny, nz)
    if kind == K_DIST_LANDMARK:
        sx = vol_spacing[vols, 0]
        sy = vol_spacing[vols, 1]
        sz = vol_spacing[vols, 2]
        wx = vol_origin[vols, 0] + ix * sx
        wy = vol_origin[vols, 1] + iy * sy
        wz = vol_origin[vols, 2] + iz * sz
        base = lm_off[vols, bone - 1] + zeta
        dx = wx - lm_pts[base, 0]
        dy = wy - lm_pts[base, 1]
        dz = wz - lm_pts[base, 2]
        return np.sqrt((dx * dx + dy * dy) + dz * dz).astype(np.float32)
    if kind in _SHIFT_CHANNEL:
        ch = _SHIFT_CHANNEL[kind]
        jx = np.clip(ix + np.floor(u[0] / vol_spacing[vols, 0] + 0.5).astype(np.int64), 0, nx - 1)
        jy = np.clip(iy + np.floor(u[1] / vol_spacing[vols, 1] + 0.5).astype(np.int64), 0, ny - 1)
        jz = np.clip(iz + np.floor(u[2] / vol_spacing[vols, 2] + 0.5).astype(np.int64), 0, nz - 1)
        jpos = off + (jx + nx * (jy + ny * jz))
        v = chans[ch, jpos].astype(np.float64) - chans[ch, pos].astype(np.float64)
        return v.astype(np.float32)
    raise ValueError(f"unknown feature kind code {kind}")


def eval_descriptors(chans, vol_off, vol_dims, vol_spacing, vol_origin, lm_pts, lm_off,
                     d_kind, d_u, d_bone, d_zeta, vols, idxs):
    """float32 matrix [n_descriptors, n_samples] of feature values."""
    out = np.empty((len(d_kind), len(idxs)), dtype=np.float32)
    for d in range(len(d_kind)):
        out[d] = _eval_one(chans, vol_off, vol_dims, vol_spacing, vol_origin,
                           lm_pts, lm_off, d_kind[d], d_u[d], int(d_bone[d]),
                           int(d_zeta[d]), vols, idxs)
    return out


# ---------------------------------------------------------------------------
# best-split search for one tree node

def node_split(chans, vol_off, vol_dims, vol_spacing, vol_origin, lm_pts, lm_off,
               d_kind, d_u, d_bone, d_zeta,
               s_vol, s_idx, s_lab, node_ids, frac, min_leaf, n_classes, log_table):
    """Evaluate the candidate pool on the node samples and pick the
    (descriptor, threshold) pair with maximal information gain.

    Candidates are scanned in draw order; the first strict improvement
    wins, so ties resolve to the earliest-sampled candidate. Returns
    (desc_index, threshold, gain_nats, go_left) or None when no candidate
    achieves positive gain with both children >= min_leaf.
    """
    vols = s_vol[node_ids]
    idxs = s_idx[node_ids]
    labs = s_lab[node_ids]
    k = len(node_ids)
    onehot = (labs[:, None] == np.arange(n_classes, dtype=labs.dtype)[None, :])
    parent_counts = onehot.sum(axis=0).astype(np.int64)
    parent_term = k * log_table[k]
    for c in range(n_classes):
        parent_term -= parent_counts[c] * log_table[parent_counts[c]]
    onehot_f = onehot.astype(np.float64)

    n_thr = frac.shape[1]
    best_d = -1
    best_thr = 0.0
    best_proxy = GAIN_EPS
    for d in range(len(d_kind)):
        vals = _eval_one(chans, vol_off, vol_dims, vol_spacing, vol_origin,
                         lm_pts, lm_off, d_kind[d], d_u[d], int(d_bone[d]),
                         int(d_zeta[d]), vols, idxs)
        vmin = float(vals.min())
        vmax = float(vals.max())
        if vmin == vmax:
            continue
        thr = vmin + frac[d] * (vmax - vmin)
        left = vals[:, None] <= thr[None, :]
        cl = left.astype(np.float64).T @ onehot_f  # [n_thr, n_classes], exact counts
        cli = cl.astype(np.int64)
        nl = cli.sum(axis=1)
        nr = k - nl
        for t in range(n_thr):
            if nl[t] < min_leaf or nr[t] < min_leaf:
                continue
            lterm = nl[t] * log_table[nl[t]]
            rterm = nr[t] * log_table[nr[t]]
            for c in range(n_classes):
                lc = cli[t, c]
                rc = parent_counts[c] - lc
                lterm -= lc * log_table[lc]
                rterm -= rc * log_table[rc]
            proxy = parent_term - lterm
            proxy = proxy - rterm
            if proxy > best_proxy:
                best_proxy = proxy
                best_d = d
                best_thr = float(thr[t])
    if best_d < 0:
        return None
    vals = _eval_one(chans, vol_off, vol_dims, vol_spacing, vol_origin,
                     lm_pts, lm_off, d_kind[best_d], d_u[best_d],
                     int(d_bone[best_d]), int(d_zeta[best_d]), vols, idxs)
    go_left = (vals <= best_thr)
    return best_d, best_thr, best_proxy / k, go_left


# ---------------------------------------------------------------------------
# decision tree traversal

def predict_tree(chans, vol_off, vol_dims, vol_spacing, vol_origin, lm_pts, lm_off,
                 vol, band_idx, n_kind, n_u, n_bone, n_zeta, n_thr, n_left, n_right,
                 leaf_post, out):
    """Route every band voxel of one volume through one tree, adding the
    reached leaf posterior into ``out`` [n_voxels, n_classes]."""
    n = len(band_idx)
    assign = np.zeros(n, dtype=np.int64)
    vols = np.full(n, vol, dtype=np.int32)
    # children are created after their parent, so ascending node order
    # visits parents first
    for node in range(len(n_kind)):
        mask = assign == node
        if not mask.any():
            continue
        ids = np.nonzero(mask)[0]
        if n_kind[node] < 0:
            out[ids] += leaf_post[n_left[node]]
            assign[ids] = -1
        else:
            vals = _eval_one(chans, vol_off, vol_dims, vol_spacing, vol_origin,
                             lm_pts, lm_off, n_kind[node], n_u[node],
                             int(n_bone[node]), int(n_zeta[node]),
                             vols[ids], band_idx[ids])
            go = vals <= n_thr[node]
            assign[ids[go]] = n_left[node]
            assign[ids[~go]] = n_right[node]


# ---------------------------------------------------------------------------
# max-flow / min-cut (two-tree augmenting-path search on residual arcs)

_FREE, _S, _T = 0, 1, 2
_P_NONE, _P_TERM, _P_ORPHAN = -3, -1, -2


def maxflow_csr(tr_cap, first, head, rev, cap):
    """Max flow on a consolidated-terminal network.

    ``tr_cap[i] > 0`` is residual source->i capacity, ``< 0`` residual
    i->sink. Arcs are given residual-paired in CSR order. Mutates
    ``tr_cap`` and ``cap`` (pass copies). Returns (flow, source_side)
    where source_side marks nodes reachable from the source in the final
    residual network (the canonical minimal cut).
    """
    n = len(tr_cap)
    tree = np.zeros(n, dtype=np.int8)
    parc = np.full(n, _P_NONE, dtype=np.int64)
    in_active = np.zeros(n, dtype=bool)
    active = deque()

    def push(i):
        if not in_active[i]:
            in_active[i] = True
            active.append(i)

    for i in range(n):
        if tr_cap[i] > 0:
            tree[i] = _S
            parc[i] = _P_TERM
            push(i)
        elif tr_cap[i] < 0:
            tree[i] = _T
            parc[i] = _P_TERM
            push(i)

    def rooted(j):
        while parc[j] >= 0:
            j = head[parc[j]]
        return parc[j] == _P_TERM

    def grow():
        while active:
            i = active.popleft()
            in_active[i] = False
            ti = tree[i]
            if ti == _FREE:
                continue
            for a in range(first[i], first[i + 1]):
                j = head[a]
                if ti == _S:
                    if cap[a] <= 0:
                        continue
                    if tree[j] == _FREE:
                        tree[j] = _S
                        parc[j] = rev[a]
                        push(j)
                    elif tree[j] == _T:
                        in_active[i] = True
                        active.appendleft(i)
                        return a
                else:
                    if cap[rev[a]] <= 0:
                        continue
                    if tree[j] == _FREE:
                        tree[j] = _T
                        parc[j] = rev[a]
                        push(j)
                    elif tree[j] == _S:
                        in_active[i] = True
                        active.appendleft(i)
                        return rev[a]
        return -1

    def augment(ca):
        u = head[rev[ca]]
        v = head[ca]
        b = cap[ca]
        i = u
        while parc[i] >= 0:
            b = min(b, cap[rev[parc[i]]])
            i = head[parc[i]]
        b = min(b, tr_cap[i])
        j = v
        while parc[j] >= 0:
            b = min(b, cap[parc[j]])
            j = head[parc[j]]
        b = min(b, -tr_cap[j])

        orphans = deque()
        cap[ca] -= b
        cap[rev[ca]] += b
        i = u
        while parc[i] >= 0:
            pa = parc[i]
            cap[pa] += b
            cap[rev[pa]] -= b
            nxt = head[pa]
            if cap[rev[pa]] <= 0:
                parc[i] = _P_ORPHAN
                orphans.append(i)
            i = nxt
        tr_cap[i] -= b
        if tr_cap[i] <= 0:
            parc[i] = _P_ORPHAN
            orphans.append(i)
        j = v
        while parc[j] >= 0:
            pa = parc[j]
            cap[pa] -= b
            cap[rev[pa]] += b
            nxt = head[pa]
            if cap[pa] <= 0:
                parc[j] = _P_ORPHAN
                orphans.append(j)
            j = nxt
        tr_cap[j] += b
        if tr_cap[j] >= 0:
            parc[j] = _P_ORPHAN
            orphans.append(j)
        return b, orphans

    def adopt(orphans):
        while orphans:
            i = orphans.popleft()
            ti = tree[i]
            if ti == _S and tr_cap[i] > 0:
                parc[i] = _P_TERM
                continue
            if ti == _T and tr_cap[i] < 0:
                parc[i] = _P_TERM
                continue
            adopted = False
            for a in range(first[i], first[i + 1]):
                j = head[a]
                if tree[j] != ti:
                    continue
                r = cap[rev[a]] if ti == _S else cap[a]
                if r <= 0:
                    continue
                if rooted(j):
                    parc[i] = a
                    adopted = True
                    break
            if adopted:
                continue
            for a in range(first[i], first[i + 1]):
                j = head[a]
                if tree[j] != ti:
                    continue
                r = cap[rev[a]] if ti == _S else cap[a]
                if r > 0:
                    push(j)
                pj = parc[j]
                if pj >= 0 and head[pj] == i:
                    parc[j] = _P_ORPHAN
                    orphans.append(j)
            tree[i] = _FREE
            parc[i] = _P_NONE

    flow = 0.0
    while True:
        ca = grow()
        if ca < 0:
            break
        b, orphans = augment(ca)
        flow += b
        adopt(orphans)

    src_side = np.zeros(n, dtype=np.uint8)
    bfs = deque()
    for i in range(n):
        if tr_cap[i] > 0:
            src_side[i] = 1
            bfs.append(i)
    while bfs:
        i = bfs.popleft()
        for a in range(first[i], first[i + 1]):
            j = head[a]
            if cap[a] > 0 and not src_side[j]:
                src_side[j] = 1
                bfs.append(j)
    return flow, src_side
