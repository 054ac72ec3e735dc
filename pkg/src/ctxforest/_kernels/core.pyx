# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Arithmetic mirrors the pure backend operation for
operation (float64 intermediates cast to float32 for feature values,
fixed summation orders, shared log table, dense per-axis distance
minima) so both backends agree bitwise on identical inputs."""

from libc.math cimport floor, sqrt
from libc.stdlib cimport calloc, free, malloc
from libc.string cimport memset

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef double INF = float("inf")
cdef double GAIN_EPS = 1e-9

cdef int K_INTENSITY = 0
cdef int K_GRADMAG = 1
cdef int K_DIST_F = 2
cdef int K_DIST_T = 3
cdef int K_DIST_P = 4
cdef int K_SUM_FT = 5
cdef int K_DIFF_FT = 6
cdef int K_SUM_FP = 7
cdef int K_DIFF_FP = 8
cdef int K_DIST_LANDMARK = 9
cdef int K_RSID = 10
cdef int K_PROB_F = 11
cdef int K_PROB_T = 12
cdef int K_PROB_P = 13
cdef int K_RSPD_F = 14
cdef int K_RSPD_T = 15
cdef int K_RSPD_P = 16


# ---------------------------------------------------------------------------
# exact squared Euclidean distance transform (separable, anisotropic)

cdef void _dt_row(double* f, double* out, int n, double h) nogil:
    # out[x] = min_q f[q] + ((x-q)*h)^2; the dense min matches the pure
    # backend value for value (the minimum is order-independent)
    cdef int x, q
    cdef double m, t, val
    for x in range(n):
        m = INF
        for q in range(n):
            if f[q] == INF:
                continue
            t = (x - q) * h
            val = f[q] + t * t
            if val < m:
                m = val
        out[x] = m


def edt_squared(src, long long nx, long long ny, long long nz,
                double sx, double sy, double sz):
    """Squared distance (mm^2) from every voxel center to the nearest
    source voxel center. ``src`` is a flat uint8 mask, x fastest."""
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] m = np.ascontiguousarray(src, dtype=np.uint8)
    cdef long long n_vox = nx * ny * nz
    cdef cnp.ndarray[cnp.float64_t, ndim=1] g = np.empty(n_vox, dtype=np.float64)
    cdef double[:] gv = g
    cdef unsigned char[:] mv = m
    cdef long long i
    for i in range(n_vox):
        gv[i] = 0.0 if mv[i] else INF

    cdef int nmax = <int>max(nx, max(ny, nz))
    cdef double* f = <double*>malloc(nmax * sizeof(double))
    cdef double* out = <double*>malloc(nmax * sizeof(double))
    if f == NULL or out == NULL:
        free(f); free(out)
        raise MemoryError()
    cdef long long iy, iz, ix, base, stride
    cdef int n, x
    try:
        # x axis
        n = <int>nx
        stride = 1
        for iz in range(nz):
            for iy in range(ny):
                base = nx * (iy + ny * iz)
                for x in range(n):
                    f[x] = gv[base + x * stride]
                _dt_row(f, out, n, sx)
                for x in range(n):
                    gv[base + x * stride] = out[x]
        # y axis
        n = <int>ny
        stride = nx
        for iz in range(nz):
            for ix in range(nx):
                base = ix + nx * ny * iz
                for x in range(n):
                    f[x] = gv[base + x * stride]
                _dt_row(f, out, n, sy)
                for x in range(n):
                    gv[base + x * stride] = out[x]
        # z axis
        n = <int>nz
        stride = nx * ny
        for iy in range(ny):
            for ix in range(nx):
                base = ix + nx * iy
                for x in range(n):
                    f[x] = gv[base + x * stride]
                _dt_row(f, out, n, sz)
                for x in range(n):
                    gv[base + x * stride] = out[x]
    finally:
        free(f); free(out)
    return g


# ---------------------------------------------------------------------------
# feature evaluation over a context pack

cdef inline double _feval(float[:, ::1] chans, long long[:] vol_off,
                          int[:, ::1] vol_dims, double[:, ::1] vol_spacing,
                          double[:, ::1] vol_origin, double[:, ::1] lm_pts,
                          long long[:, ::1] lm_off,
                          int kind, double u0, double u1, double u2,
                          int bone, int zeta, int v, long long idx) nogil:
    """One descriptor at one (volume, linear index); returns the value
    after the float32 cast the pure backend applies."""
    cdef long long off = vol_off[v]
    cdef long long pos = off + idx
    cdef long long nx, ny, nz, ix, iy, iz, rest, jx, jy, jz, jpos, base
    cdef double a, b, val, wx, wy, wz, dx, dy, dz
    cdef int ch

    if kind == K_INTENSITY:
        return chans[0, pos]
    if kind == K_GRADMAG:
        return chans[1, pos]
    if kind == K_DIST_F:
        return chans[2, pos]
    if kind == K_DIST_T:
        return chans[3, pos]
    if kind == K_DIST_P:
        return chans[4, pos]
    if kind == K_PROB_F:
        return chans[5, pos]
    if kind == K_PROB_T:
        return chans[6, pos]
    if kind == K_PROB_P:
        return chans[7, pos]
    if kind == K_SUM_FT or kind == K_DIFF_FT or kind == K_SUM_FP or kind == K_DIFF_FP:
        a = <double>chans[2, pos]
        if kind == K_SUM_FT or kind == K_DIFF_FT:
            b = <double>chans[3, pos]
        else:
            b = <double>chans[4, pos]
        if kind == K_SUM_FT or kind == K_SUM_FP:
            val = a + b
        else:
            val = a - b
        return <float>val

    nx = vol_dims[v, 0]
    ny = vol_dims[v, 1]
    nz = vol_dims[v, 2]
    ix = idx % nx
    rest = idx // nx
    iy = rest % ny
    iz = rest // ny

    if kind == K_DIST_LANDMARK:
        wx = vol_origin[v, 0] + ix * vol_spacing[v, 0]
        wy = vol_origin[v, 1] + iy * vol_spacing[v, 1]
        wz = vol_origin[v, 2] + iz * vol_spacing[v, 2]
        base = lm_off[v, bone - 1] + zeta
        dx = wx - lm_pts[base, 0]
        dy = wy - lm_pts[base, 1]
        dz = wz - lm_pts[base, 2]
        val = sqrt((dx * dx + dy * dy) + dz * dz)
        return <float>val

    # relative-shift kinds
    if kind == K_RSID:
        ch = 0
    elif kind == K_RSPD_F:
        ch = 5
    elif kind == K_RSPD_T:
        ch = 6
    else:
        ch = 7
    jx = ix + <long long>floor(u0 / vol_spacing[v, 0] + 0.5)
    jy = iy + <long long>floor(u1 / vol_spacing[v, 1] + 0.5)
    jz = iz + <long long>floor(u2 / vol_spacing[v, 2] + 0.5)
    if jx < 0:
        jx = 0
    elif jx > nx - 1:
        jx = nx - 1
    if jy < 0:
        jy = 0
    elif jy > ny - 1:
        jy = ny - 1
    if jz < 0:
        jz = 0
    elif jz > nz - 1:
        jz = nz - 1
    jpos = off + (jx + nx * (jy + ny * jz))
    val = <double>chans[ch, jpos] - <double>chans[ch, pos]
    return <float>val


def eval_descriptors(float[:, ::1] chans, long long[:] vol_off, int[:, ::1] vol_dims,
                     double[:, ::1] vol_spacing, double[:, ::1] vol_origin,
                     double[:, ::1] lm_pts, long long[:, ::1] lm_off,
                     signed char[:] d_kind, double[:, ::1] d_u, signed char[:] d_bone,
                     int[:] d_zeta, int[:] vols, long long[:] idxs):
    """float32 matrix [n_descriptors, n_samples] of feature values."""
    cdef Py_ssize_t nd = d_kind.shape[0]
    cdef Py_ssize_t n = idxs.shape[0]
    out_arr = np.empty((nd, n), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef Py_ssize_t d, s
    for d in range(nd):
        for s in range(n):
            out[d, s] = <float>_feval(chans, vol_off, vol_dims, vol_spacing,
                                      vol_origin, lm_pts, lm_off, d_kind[d],
                                      d_u[d, 0], d_u[d, 1], d_u[d, 2],
                                      d_bone[d], d_zeta[d], vols[s], idxs[s])
    return out_arr


# ---------------------------------------------------------------------------
# best-split search for one tree node

def node_split(float[:, ::1] chans, long long[:] vol_off, int[:, ::1] vol_dims,
               double[:, ::1] vol_spacing, double[:, ::1] vol_origin,
               double[:, ::1] lm_pts, long long[:, ::1] lm_off,
               signed char[:] d_kind, double[:, ::1] d_u, signed char[:] d_bone,
               int[:] d_zeta, int[:] s_vol, long long[:] s_idx, signed char[:] s_lab,
               long long[:] node_ids, double[:, ::1] frac, long long min_leaf,
               int n_classes, double[:] log_table):
    """Evaluate the candidate pool on the node samples and pick the
    (descriptor, threshold) pair with maximal information gain.

    Candidates are scanned in draw order; the first strict improvement
    wins, so ties resolve to the earliest-sampled candidate. Returns
    (desc_index, threshold, gain_nats, go_left) or None when no candidate
    achieves positive gain with both children >= min_leaf.
    """
    cdef Py_ssize_t k = node_ids.shape[0]
    cdef Py_ssize_t nd = d_kind.shape[0]
    cdef Py_ssize_t n_thr = frac.shape[1]
    cdef Py_ssize_t d, s, t
    cdef int c
    cdef long long sid

    cdef float* vals = <float*>malloc(k * sizeof(float))
    cdef signed char* labs = <signed char*>malloc(k * sizeof(signed char))
    cdef long long* pc = <long long*>calloc(n_classes, sizeof(long long))
    cdef long long* cnt = <long long*>malloc(n_classes * sizeof(long long))
    if vals == NULL or labs == NULL or pc == NULL or cnt == NULL:
        free(vals); free(labs); free(pc); free(cnt)
        raise MemoryError()

    cdef double parent_term, lterm, rterm, proxy, thr, vmin, vmax, best_thr, best_proxy
    cdef float vf, fmin, fmax
    cdef long long nl, nr, lc, rc
    cdef Py_ssize_t best_d = -1
    cdef unsigned char[:] go
    fmin = 0.0
    fmax = 0.0
    best_thr = 0.0
    best_proxy = GAIN_EPS

    try:
        for s in range(k):
            sid = node_ids[s]
            labs[s] = s_lab[sid]
            pc[labs[s]] += 1
        parent_term = k * log_table[k]
        for c in range(n_classes):
            parent_term -= pc[c] * log_table[pc[c]]

        for d in range(nd):
            for s in range(k):
                sid = node_ids[s]
                vf = <float>_feval(chans, vol_off, vol_dims, vol_spacing,
                                   vol_origin, lm_pts, lm_off, d_kind[d],
                                   d_u[d, 0], d_u[d, 1], d_u[d, 2],
                                   d_bone[d], d_zeta[d], s_vol[sid], s_idx[sid])
                vals[s] = vf
                if s == 0 or vf < fmin:
                    fmin = vf
                if s == 0 or vf > fmax:
                    fmax = vf
            if fmin == fmax:
                continue
            vmin = <double>fmin
            vmax = <double>fmax
            for t in range(n_thr):
                thr = vmin + frac[d, t] * (vmax - vmin)
                memset(cnt, 0, n_classes * sizeof(long long))
                nl = 0
                for s in range(k):
                    if (<double>vals[s]) <= thr:
                        cnt[labs[s]] += 1
                        nl += 1
                nr = k - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                lterm = nl * log_table[nl]
                rterm = nr * log_table[nr]
                for c in range(n_classes):
                    lc = cnt[c]
                    rc = pc[c] - lc
                    lterm -= lc * log_table[lc]
                    rterm -= rc * log_table[rc]
                proxy = parent_term - lterm
                proxy = proxy - rterm
                if proxy > best_proxy:
                    best_proxy = proxy
                    best_d = d
                    best_thr = thr

        if best_d < 0:
            return None

        go_arr = np.zeros(k, dtype=bool)
        go = go_arr.view(np.uint8)
        for s in range(k):
            sid = node_ids[s]
            vf = <float>_feval(chans, vol_off, vol_dims, vol_spacing, vol_origin,
                               lm_pts, lm_off, d_kind[best_d],
                               d_u[best_d, 0], d_u[best_d, 1], d_u[best_d, 2],
                               d_bone[best_d], d_zeta[best_d], s_vol[sid], s_idx[sid])
            go[s] = 1 if (<double>vf) <= best_thr else 0
        return best_d, best_thr, best_proxy / k, go_arr
    finally:
        free(vals); free(labs); free(pc); free(cnt)


# ---------------------------------------------------------------------------
# decision tree traversal

def predict_tree(float[:, ::1] chans, long long[:] vol_off, int[:, ::1] vol_dims,
                 double[:, ::1] vol_spacing, double[:, ::1] vol_origin,
                 double[:, ::1] lm_pts, long long[:, ::1] lm_off,
                 int vol, long long[:] band_idx,
                 signed char[:] n_kind, double[:, ::1] n_u, signed char[:] n_bone,
                 int[:] n_zeta, double[:] n_thr, int[:] n_left, int[:] n_right,
                 double[:, ::1] leaf_post, double[:, ::1] out):
    """Route every band voxel of one volume through one tree, adding the
    reached leaf posterior into ``out`` [n_voxels, n_classes]."""
    cdef Py_ssize_t n = band_idx.shape[0]
    cdef Py_ssize_t n_classes = leaf_post.shape[1]
    cdef Py_ssize_t s, c
    cdef int node, lrow
    cdef double val
    cdef long long idx
    for s in range(n):
        idx = band_idx[s]
        node = 0
        while n_kind[node] >= 0:
            val = _feval(chans, vol_off, vol_dims, vol_spacing, vol_origin,
                         lm_pts, lm_off, n_kind[node], n_u[node, 0], n_u[node, 1],
                         n_u[node, 2], n_bone[node], n_zeta[node], vol, idx)
            if val <= n_thr[node]:
                node = n_left[node]
            else:
                node = n_right[node]
        lrow = n_left[node]
        for c in range(n_classes):
            out[s, c] += leaf_post[lrow, c]


# ---------------------------------------------------------------------------
# max-flow / min-cut (two-tree augmenting-path search on residual arcs)

cdef int T_FREE = 0
cdef int T_S = 1
cdef int T_T = 2
cdef long long P_NONE = -3
cdef long long P_TERM = -1
cdef long long P_ORPHAN = -2


cdef struct Ring:
    long long* buf
    long long cap
    long long head
    long long count


cdef inline void ring_push_back(Ring* r, long long x) nogil:
    r.buf[(r.head + r.count) % r.cap] = x
    r.count += 1


cdef inline void ring_push_front(Ring* r, long long x) nogil:
    r.head = (r.head - 1 + r.cap) % r.cap
    r.buf[r.head] = x
    r.count += 1


cdef inline long long ring_pop_front(Ring* r) nogil:
    cdef long long x = r.buf[r.head]
    r.head = (r.head + 1) % r.cap
    r.count -= 1
    return x


cdef inline int _rooted(long long j, long long* parc, int[:] head) nogil:
    while parc[j] >= 0:
        j = head[parc[j]]
    return 1 if parc[j] == P_TERM else 0


def maxflow_csr(double[:] tr_cap, long long[:] first, int[:] head, int[:] rev,
                double[:] cap):
    """Max flow on a consolidated-terminal network.

    ``tr_cap[i] > 0`` is residual source->i capacity, ``< 0`` residual
    i->sink. Arcs are given residual-paired in CSR order. Mutates
    ``tr_cap`` and ``cap`` (pass copies). Returns (flow, source_side)
    where source_side marks nodes reachable from the source in the final
    residual network (the canonical minimal cut).
    """
    cdef long long n = tr_cap.shape[0]
    cdef signed char* tree = <signed char*>calloc(n, sizeof(signed char))
    cdef long long* parc = <long long*>malloc(n * sizeof(long long))
    cdef unsigned char* in_active = <unsigned char*>calloc(n, sizeof(unsigned char))
    cdef Ring active
    cdef Ring orphans
    active.buf = <long long*>malloc((n + 1) * sizeof(long long))
    active.cap = n + 1
    active.head = 0
    active.count = 0
    orphans.buf = <long long*>malloc((n + 1) * sizeof(long long))
    orphans.cap = n + 1
    orphans.head = 0
    orphans.count = 0
    if tree == NULL or parc == NULL or in_active == NULL or \
            active.buf == NULL or orphans.buf == NULL:
        free(tree); free(parc); free(in_active); free(active.buf); free(orphans.buf)
        raise MemoryError()

    cdef long long i, j, u, v, a, ca, pa, nxt, pj
    cdef int ti, adopted
    cdef double b, flow
    flow = 0.0

    for i in range(n):
        parc[i] = P_NONE
        if tr_cap[i] > 0:
            tree[i] = T_S
            parc[i] = P_TERM
            in_active[i] = 1
            ring_push_back(&active, i)
        elif tr_cap[i] < 0:
            tree[i] = T_T
            parc[i] = P_TERM
            in_active[i] = 1
            ring_push_back(&active, i)

    while True:
        # growth: find a connecting arc between the two search trees
        ca = -1
        while active.count > 0:
            i = ring_pop_front(&active)
            in_active[i] = 0
            ti = tree[i]
            if ti == T_FREE:
                continue
            for a in range(first[i], first[i + 1]):
                j = head[a]
                if ti == T_S:
                    if cap[a] <= 0:
                        continue
                    if tree[j] == T_FREE:
                        tree[j] = T_S
                        parc[j] = rev[a]
                        if not in_active[j]:
                            in_active[j] = 1
                            ring_push_back(&active, j)
                    elif tree[j] == T_T:
                        in_active[i] = 1
                        ring_push_front(&active, i)
                        ca = a
                        break
                else:
                    if cap[rev[a]] <= 0:
                        continue
                    if tree[j] == T_FREE:
                        tree[j] = T_T
                        parc[j] = rev[a]
                        if not in_active[j]:
                            in_active[j] = 1
                            ring_push_back(&active, j)
                    elif tree[j] == T_S:
                        in_active[i] = 1
                        ring_push_front(&active, i)
                        ca = rev[a]
                        break
            if ca >= 0:
                break
        if ca < 0:
            break

        # augment: bottleneck along source path + connecting arc + sink path
        u = head[rev[ca]]
        v = head[ca]
        b = cap[ca]
        i = u
        while parc[i] >= 0:
            if cap[rev[parc[i]]] < b:
                b = cap[rev[parc[i]]]
            i = head[parc[i]]
        if tr_cap[i] < b:
            b = tr_cap[i]
        j = v
        while parc[j] >= 0:
            if cap[parc[j]] < b:
                b = cap[parc[j]]
            j = head[parc[j]]
        if -tr_cap[j] < b:
            b = -tr_cap[j]

        cap[ca] -= b
        cap[rev[ca]] += b
        i = u
        while parc[i] >= 0:
            pa = parc[i]
            cap[pa] += b
            cap[rev[pa]] -= b
            nxt = head[pa]
            if cap[rev[pa]] <= 0:
                parc[i] = P_ORPHAN
                ring_push_back(&orphans, i)
            i = nxt
        tr_cap[i] -= b
        if tr_cap[i] <= 0:
            parc[i] = P_ORPHAN
            ring_push_back(&orphans, i)
        j = v
        while parc[j] >= 0:
            pa = parc[j]
            cap[pa] -= b
            cap[rev[pa]] += b
            nxt = head[pa]
            if cap[pa] <= 0:
                parc[j] = P_ORPHAN
                ring_push_back(&orphans, j)
            j = nxt
        tr_cap[j] += b
        if tr_cap[j] >= 0:
            parc[j] = P_ORPHAN
            ring_push_back(&orphans, j)
        flow += b

        # adoption: reattach or free every orphaned node
        while orphans.count > 0:
            i = ring_pop_front(&orphans)
            ti = tree[i]
            if ti == T_S and tr_cap[i] > 0:
                parc[i] = P_TERM
                continue
            if ti == T_T and tr_cap[i] < 0:
                parc[i] = P_TERM
                continue
            adopted = 0
            for a in range(first[i], first[i + 1]):
                j = head[a]
                if tree[j] != ti:
                    continue
                if ti == T_S:
                    if cap[rev[a]] <= 0:
                        continue
                else:
                    if cap[a] <= 0:
                        continue
                if _rooted(j, parc, head):
                    parc[i] = a
                    adopted = 1
                    break
            if adopted:
                continue
            for a in range(first[i], first[i + 1]):
                j = head[a]
                if tree[j] != ti:
                    continue
                if ti == T_S:
                    if cap[rev[a]] > 0 and not in_active[j]:
                        in_active[j] = 1
                        ring_push_back(&active, j)
                else:
                    if cap[a] > 0 and not in_active[j]:
                        in_active[j] = 1
                        ring_push_back(&active, j)
                pj = parc[j]
                if pj >= 0 and head[pj] == i:
                    parc[j] = P_ORPHAN
                    ring_push_back(&orphans, j)
            tree[i] = T_FREE
            parc[i] = P_NONE

    # canonical partition: residual reachability from the source
    src_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[:] src_side = src_arr
    active.head = 0
    active.count = 0
    for i in range(n):
        if tr_cap[i] > 0:
            src_side[i] = 1
            ring_push_back(&active, i)
    while active.count > 0:
        i = ring_pop_front(&active)
        for a in range(first[i], first[i + 1]):
            j = head[a]
            if cap[a] > 0 and not src_side[j]:
                src_side[j] = 1
                ring_push_back(&active, j)
    free(tree); free(parc); free(in_active); free(active.buf); free(orphans.buf)
    return flow, src_arr
