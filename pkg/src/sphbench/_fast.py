"""Compiled pair loops for the solver.

Each function mirrors a vectorized routine in :mod:`sphbench.sph` or
:mod:`sphbench.neighbors` and is tested against it. Edges from
:class:`PairSearch` are grouped by receiver, so accumulations touch one
output row at a time.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_EDGES_PER_PARTICLE = 64


@njit(cache=True)
def _cell_coords(x, lo, cell, nc):
    n, dim = x.shape
    out = np.empty((n, dim), np.int64)
    for i in range(n):
        for a in range(dim):
            c = int(np.floor((x[i, a] - lo[a]) / cell[a]))
            if c < 0:
                c = 0
            elif c >= nc[a]:
                c = nc[a] - 1
            out[i, a] = c
    return out


@njit(cache=True)
def _pairs(x, lengths, periodic, lo, cell, nc, cutoff, fluid, use_filter, capacity):
    n, dim = x.shape
    coords = _cell_coords(x, lo, cell, nc)
    stride = np.ones(dim, np.int64)
    for a in range(dim - 2, -1, -1):
        stride[a] = stride[a + 1] * nc[a + 1]
    ncells = stride[0] * nc[0]
    lin = np.zeros(n, np.int64)
    for i in range(n):
        for a in range(dim):
            lin[i] += coords[i, a] * stride[a]
    start = np.zeros(ncells + 1, np.int64)
    for i in range(n):
        start[lin[i] + 1] += 1
    for c in range(ncells):
        start[c + 1] += start[c]
    order = np.empty(n, np.int64)
    fill = start[:-1].copy()
    for i in range(n):
        order[fill[lin[i]]] = i
        fill[lin[i]] += 1
    # cell-sorted copies for locality
    xs = np.empty((n, dim))
    fs = np.empty(n, np.bool_)
    for s in range(n):
        for a in range(dim):
            xs[s, a] = x[order[s], a]
        fs[s] = fluid[order[s]] if use_filter else True

    noff = 3**dim
    offs = np.empty((noff, dim), np.int64)
    for k in range(noff):
        t = k
        for a in range(dim):
            offs[k, a] = t % 3 - 1
            t //= 3
    # with >= 3 cells a wrapped neighbor cell fixes the image shift;
    # fewer cells need the general minimum-image formula
    exact_shift = True
    for a in range(dim):
        if periodic[a] and nc[a] < 3:
            exact_shift = False

    recv = np.empty(capacity, np.int64)
    send = np.empty(capacity, np.int64)
    disp = np.empty((capacity, dim))
    dist = np.empty(capacity)
    e = 0
    seen = np.full(ncells, -1, np.int64)
    shift = np.zeros(dim)
    xi = np.empty(dim)
    dvec = np.empty(dim)
    for si in range(n):
        i = order[si]
        for a in range(dim):
            xi[a] = xs[si, a]
        fi = fs[si]
        for k in range(noff):
            c = 0
            valid = True
            for a in range(dim):
                q = coords[i, a] + offs[k, a]
                shift[a] = 0.0
                if q < 0:
                    if not periodic[a]:
                        valid = False
                        break
                    q += nc[a]
                    shift[a] = lengths[a]
                elif q >= nc[a]:
                    if not periodic[a]:
                        valid = False
                        break
                    q -= nc[a]
                    shift[a] = -lengths[a]
                c += q * stride[a]
            # small periodic grids can map two offsets onto one cell
            if not valid or seen[c] == si:
                continue
            seen[c] = si
            for sj in range(start[c], start[c + 1]):
                if sj == si:
                    continue
                if not (fi or fs[sj]):
                    continue
                r2 = 0.0
                for a in range(dim):
                    da = xi[a] - xs[sj, a]
                    if exact_shift:
                        da += shift[a]
                    elif periodic[a]:
                        L = lengths[a]
                        da -= L * np.floor(da / L + 0.5)
                    dvec[a] = da
                    r2 += da * da
                # compare distances, not squares, to round like the numpy path
                r = np.sqrt(r2)
                if r > cutoff:
                    continue
                if e >= capacity:
                    return recv, send, disp, dist, -1
                recv[e] = i
                send[e] = order[sj]
                for a in range(dim):
                    disp[e, a] = dvec[a]
                dist[e] = r
                e += 1
    return recv, send, disp, dist, e


@njit(cache=True)
def _filter(x, cand_r, cand_s, lengths, periodic, cutoff):
    m = cand_r.shape[0]
    dim = x.shape[1]
    recv = np.empty(m, np.int64)
    send = np.empty(m, np.int64)
    disp = np.empty((m, dim))
    dist = np.empty(m)
    half = 0.5 * lengths
    dvec = np.empty(dim)
    k = 0
    for e in range(m):
        i, j = cand_r[e], cand_s[e]
        r2 = 0.0
        for a in range(dim):
            da = x[i, a] - x[j, a]
            # same result as da - L floor(da/L + 1/2) for |da| < 3L/2
            if periodic[a]:
                if da >= half[a]:
                    da -= lengths[a]
                elif da < -half[a]:
                    da += lengths[a]
            dvec[a] = da
            r2 += da * da
        r = np.sqrt(r2)
        if r <= cutoff:
            recv[k] = i
            send[k] = j
            for a in range(dim):
                disp[k, a] = dvec[a]
            dist[k] = r
            k += 1
    return recv[:k], send[:k], disp[:k], dist[:k]


@njit(cache=True)
def _max_shift2(x, ref, lengths, periodic):
    n, dim = x.shape
    best = 0.0
    for i in range(n):
        r2 = 0.0
        for a in range(dim):
            da = x[i, a] - ref[i, a]
            if periodic[a]:
                L = lengths[a]
                da -= L * np.floor(da / L + 0.5)
            r2 += da * da
        if r2 > best:
            best = r2
    return best


class PairSearch:
    """Exact fixed-radius search with an optional Verlet skin.

    Candidates within ``cutoff + skin`` are rebuilt with a cell grid once any
    particle has moved more than ``skin / 2``; every call then re-measures the
    candidates and keeps those within ``cutoff``. Wall-wall pairs are skipped
    when ``fluid`` is given, matching the solver's pair filter. Edges come out
    grouped by receiver.
    """

    def __init__(self, lengths, periodic, cutoff, fluid=None, skin=0.0):
        self.lengths = np.asarray(lengths, dtype=np.float64)
        self.periodic = np.asarray(periodic, dtype=np.bool_)
        self.cutoff = float(cutoff)
        self.skin = float(skin)
        self.fluid = np.ones(0, np.bool_) if fluid is None else np.asarray(fluid, np.bool_)
        self.use_filter = fluid is not None
        self.capacity = 0
        self.rebuilds = 0
        self._ref = None
        self._cand = None

    def _search(self, x, cutoff):
        n = x.shape[0]
        lo = np.where(self.periodic, 0.0, x.min(axis=0) if n else 0.0)
        span = np.where(self.periodic, self.lengths, (x.max(axis=0) - lo) if n else 1.0)
        nc = np.maximum(np.floor(span / cutoff).astype(np.int64), 1)
        # non-periodic spans may be zero (all particles on a plane)
        cell = np.where(span > 0, span / nc, 1.0)
        if self.capacity == 0:
            self.capacity = max(_EDGES_PER_PARTICLE * n, 16)
        while True:
            r, s, d, dist, e = _pairs(
                x, self.lengths, self.periodic, lo, cell, nc, cutoff,
                self.fluid, self.use_filter, self.capacity,
            )
            if e >= 0:
                return r[:e], s[:e], d[:e], dist[:e]
            self.capacity *= 2

    def __call__(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        if self.skin <= 0:
            return self._search(x, self.cutoff)
        stale = (
            self._ref is None
            or self._ref.shape != x.shape
            or _max_shift2(x, self._ref, self.lengths, self.periodic) > (0.5 * self.skin) ** 2
        )
        if stale:
            r, s, _, _ = self._search(x, self.cutoff + self.skin)
            self._cand = (r.copy(), s.copy())
            self._ref = x.copy()
            self.rebuilds += 1
        return _filter(x, self._cand[0], self._cand[1], self.lengths, self.periodic, self.cutoff)


@njit(cache=True)
def kernel_arrays(r, h, sigma):
    """Quintic ``W`` and ``(dW/dr) / r`` per edge (zero ``(dW/dr)/r`` at r = 0)."""
    m = r.shape[0]
    w = np.empty(m)
    f = np.empty(m)
    for e in range(m):
        q = r[e] / h
        t3 = max(3.0 - q, 0.0)
        t2 = max(2.0 - q, 0.0)
        t1 = max(1.0 - q, 0.0)
        p3 = t3 * t3 * t3 * t3
        p2 = t2 * t2 * t2 * t2
        p1 = t1 * t1 * t1 * t1
        w[e] = sigma * (p3 * t3 - 6.0 * p2 * t2 + 15.0 * p1 * t1)
        if r[e] > 0:
            f[e] = sigma / h * (-5.0) * (p3 - 6.0 * p2 + 15.0 * p1) / r[e]
        else:
            f[e] = 0.0
    return w, f


@njit(cache=True)
def density_summation(recv, send, w, masses, w0):
    rho = masses * w0
    for e in range(recv.shape[0]):
        rho[recv[e]] += masses[send[e]] * w[e]
    return rho


@njit(cache=True)
def density_rate(recv, send, disp, f, masses, rho, v):
    n, dim = v.shape
    out = np.zeros(n)
    for e in range(recv.shape[0]):
        i, j = recv[e], send[e]
        dot = 0.0
        for a in range(dim):
            dot += (v[i, a] - v[j, a]) * disp[e, a]
        out[i] += masses[j] / rho[j] * dot * f[e]
    return rho * out


@njit(cache=True)
def wall_sums(recv, send, disp, w, wall, fluid, v, p, force, use_force):
    n, dim = v.shape
    wsum = np.zeros(n)
    vsum = np.zeros((n, dim))
    psum = np.zeros(n)
    for e in range(recv.shape[0]):
        i, j = recv[e], send[e]
        if not (wall[i] and fluid[j]):
            continue
        we = w[e]
        wsum[i] += we
        for a in range(dim):
            vsum[i, a] += v[j, a] * we
        extra = 0.0
        if use_force:
            for a in range(dim):
                extra += force[j, a] * disp[e, a]
        psum[i] += (p[j] + extra) * we
    return wsum, vsum, psum


@njit(cache=True)
def background(recv, send, disp, f, masses, rho, fluid, p_b):
    n = masses.shape[0]
    dim = disp.shape[1]
    acc = np.zeros((n, dim))
    for e in range(recv.shape[0]):
        i, j = recv[e], send[e]
        if not fluid[i]:
            continue
        vi = masses[i] / rho[i]
        vj = masses[j] / rho[j]
        c = -p_b * (vi * vi + vj * vj) * f[e] / masses[i]
        for a in range(dim):
            acc[i, a] += c * disp[e, a]
    return acc


@njit(cache=True)
def momentum(recv, send, disp, r, f, fluid, rho, p, masses, v,
             nu, alpha, c0, h, transport, use_transport):
    n, dim = v.shape
    acc = np.zeros((n, dim))
    stress = np.zeros((n, dim, dim))
    if use_transport:
        for i in range(n):
            if fluid[i]:
                for a in range(dim):
                    for b in range(dim):
                        stress[i, a, b] = rho[i] * v[i, a] * (transport[i, b] - v[i, b])
    pair = np.empty(dim)
    vij = np.empty(dim)
    for e in range(recv.shape[0]):
        i, j = recv[e], send[e]
        if not fluid[i]:
            continue
        ri, rj = rho[i], rho[j]
        vol_i = masses[i] / ri
        vol_j = masses[j] / rj
        vol2 = vol_i * vol_i + vol_j * vol_j
        p_ij = (rj * p[i] + ri * p[j]) / (ri + rj)
        fe = f[e]
        for a in range(dim):
            vij[a] = v[i, a] - v[j, a]
            pair[a] = -p_ij * fe * disp[e, a]
        if nu > 0:
            eta = 2.0 * nu * ri * rj / (ri + rj)
            for a in range(dim):
                pair[a] += eta * fe * vij[a]
        if use_transport:
            for a in range(dim):
                row = 0.0
                for b in range(dim):
                    row += (stress[i, a, b] + stress[j, a, b]) * fe * disp[e, b]
                pair[a] += 0.5 * row
        scale = vol2 / masses[i]
        for a in range(dim):
            acc[i, a] += scale * pair[a]
        if alpha > 0:
            vr = 0.0
            for a in range(dim):
                vr += vij[a] * disp[e, a]
            if vr < 0:
                re = r[e]
                mu = h * vr / (re * re + 0.01 * h * h)
                pi_ij = -alpha * c0 * mu / (0.5 * (ri + rj))
                for a in range(dim):
                    acc[i, a] -= masses[j] * pi_ij * fe * disp[e, a]
    return acc
