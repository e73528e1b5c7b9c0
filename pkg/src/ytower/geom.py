"""Batched representation of unstable curve pieces.

A *piece* is one connected sub-arc of an unstable leaf, tracked together
with the base-measure interval it came from.  Pieces live in struct-of-array
pools so that pushing tens of thousands of them forward by the map is a few
vector operations per step.

Model conventions (d_u = 1):

* the base measure of a piece is carried by the monotone node profile
  ``b`` (base mass coordinate) against the image arc coordinate ``s``;
  both are piecewise linear between nodes, so every mass/arc query below is
  closed-form on the node data;
* cat-map pieces are straight segments with uniform density: two nodes;
* solenoid pieces keep nodes along the base angle; fiber positions and leaf
  slopes evolve by the one-step recursion of the skew product, and the base
  angle of the left endpoint is exact (integer grid), so long builds never
  collapse onto the dyadic fixed point.
"""

from __future__ import annotations

import numpy as np

from .errors import ResourceBudgetError
from .maps import MapModel, MostlyContracting, Solenoid, TorusAutomorphism
from .util import ANGLE_MOD, double_angles, angles_to_float, angles_from_float

_MOD_HI = np.uint64(ANGLE_MOD >> 64)
_MOD_LO = np.uint64(ANGLE_MOD & ((1 << 64) - 1))


def angle_add_float(hi, lo, delta):
    """Exact-grid addition of float offsets in [0, 2) to integer angles.

    The offsets are snapped to the grid (error ~2^-114, far below every
    geometric scale); returns (hi, lo, wrapped) with ``wrapped`` the integer
    number of whole turns removed (0 or 1).
    """
    delta = np.asarray(delta, dtype=np.float64)
    turns = np.floor(delta).astype(np.uint64)
    frac = delta - np.floor(delta)
    dhi_f = np.floor(frac * 2.0 ** 62)
    dlo = np.floor((frac * 2.0 ** 62 - dhi_f) * 2.0 ** 64).astype(np.uint64)
    dhi = dhi_f.astype(np.uint64)
    lo2 = (lo + dlo) & np.uint64(0xFFFFFFFFFFFFFFFF)
    carry = (lo2 < lo).astype(np.uint64)
    hi2 = hi + dhi + carry
    ge = (hi2 > _MOD_HI) | ((hi2 == _MOD_HI) & (lo2 >= _MOD_LO))
    borrow = (lo2 < _MOD_LO) & ge
    lo3 = np.where(ge, (lo2 - _MOD_LO) & np.uint64(0xFFFFFFFFFFFFFFFF), lo2)
    hi3 = np.where(ge, hi2 - _MOD_HI - borrow.astype(np.uint64), hi2)
    return hi3, lo3, ge.astype(np.int64) + turns.astype(np.int64)

_TWO_PI = 2.0 * np.pi


def _segmented_cumsum(values, starts, counts):
    """Cumulative sum restarting at each segment. values flat, segments by
    (starts, counts); returns array of same shape."""
    out = np.cumsum(values)
    offsets = np.repeat(out[starts] - values[starts], counts)
    return out - offsets


class PieceBatch:
    """Common interface of the per-map pools."""

    map: MapModel
    n: int

    def lengths(self) -> np.ndarray:
        raise NotImplementedError

    def masses(self) -> np.ndarray:
        raise NotImplementedError

    def push(self) -> None:
        """Advance every piece one step of the map."""
        raise NotImplementedError

    def split_at_arcs(self, idx: int, arcs) -> list:
        raise NotImplementedError


# ----------------------------------------------------------------------
# cat map: straight segments, uniform density
# ----------------------------------------------------------------------

class CatBatch(PieceBatch):
    """Pieces are straight segments along the global unstable direction.

    anchor  -- ambient position of the arc-0 endpoint (torus chart, [0,1)^2)
    length  -- current arc length
    base_lo, base_hi -- base-measure interval (mass = hi - lo)
    """

    def __init__(self, map_: TorusAutomorphism, anchor, length, base_lo, base_hi):
        self.map = map_
        self.anchor = np.atleast_2d(np.asarray(anchor, dtype=np.float64)).copy()
        self.length = np.atleast_1d(np.asarray(length, dtype=np.float64)).copy()
        self.base_lo = np.atleast_1d(np.asarray(base_lo, dtype=np.float64)).copy()
        self.base_hi = np.atleast_1d(np.asarray(base_hi, dtype=np.float64)).copy()

    @property
    def n(self):
        return self.length.size

    def lengths(self):
        return self.length

    def masses(self):
        return self.base_hi - self.base_lo

    def push(self):
        self.anchor = np.mod(self.anchor @ self.map.matrix.T, 1.0)
        self.length = self.length * self.map.expansion

    def point_at_arc(self, idx, s):
        s = np.asarray(s, dtype=np.float64)
        return np.mod(self.anchor[idx] + s[..., None] * self.map.dir_u, 1.0)

    def points_at_arcs(self, idxs, s):
        """Vectorized: one arc position per listed piece."""
        s = np.asarray(s, dtype=np.float64)
        return np.mod(self.anchor[idxs] + s[:, None] * self.map.dir_u, 1.0)

    def base_of_arc(self, idx, s):
        f = np.asarray(s) / self.length[idx]
        return self.base_lo[idx] + f * (self.base_hi[idx] - self.base_lo[idx])

    def arc_of_base(self, idx, b):
        f = (np.asarray(b) - self.base_lo[idx]) / (self.base_hi[idx] - self.base_lo[idx])
        return f * self.length[idx]

    def boundary_densities(self):
        rho = (self.base_hi - self.base_lo) / self.length
        return rho, rho

    def take(self, keep):
        return CatBatch(self.map, self.anchor[keep], self.length[keep],
                        self.base_lo[keep], self.base_hi[keep])

    def extend(self, other: "CatBatch"):
        self.anchor = np.concatenate([self.anchor, other.anchor])
        self.length = np.concatenate([self.length, other.length])
        self.base_lo = np.concatenate([self.base_lo, other.base_lo])
        self.base_hi = np.concatenate([self.base_hi, other.base_hi])

    def split_many(self, cut_s, cut_pid):
        """Split pieces at the flat interior arc positions ``cut_s`` (owner
        piece per cut in ``cut_pid``; cuts sorted within each piece).

        Returns (new_batch, parent): all pieces of the batch, piece-major and
        arc-ordered, with ``parent`` the originating index of each new piece.
        """
        cut_s = np.asarray(cut_s, dtype=np.float64)
        cut_pid = np.asarray(cut_pid, dtype=np.int64)
        if cut_s.size:
            corder = np.lexsort((cut_s, cut_pid))
            cut_s, cut_pid = cut_s[corder], cut_pid[corder]
        ncuts = np.bincount(cut_pid, minlength=self.n)
        nsub = ncuts + 1
        total = int(nsub.sum())
        parent = np.repeat(np.arange(self.n), nsub)
        # edge arc positions: per piece [0, cuts..., L]
        first = np.concatenate([[0], np.cumsum(nsub)[:-1]])
        lefts = np.zeros(total)
        rights = np.empty(total)
        pos = np.arange(total) - first[parent]          # sub index within piece
        cut_first = np.concatenate([[0], np.cumsum(ncuts)[:-1]])
        has_left_cut = pos > 0
        lefts[has_left_cut] = cut_s[cut_first[parent[has_left_cut]]
                                    + pos[has_left_cut] - 1]
        has_right_cut = pos < ncuts[parent]
        rights[~has_right_cut] = self.length[parent[~has_right_cut]]
        rights[has_right_cut] = cut_s[cut_first[parent[has_right_cut]]
                                      + pos[has_right_cut]]
        frac_l = lefts / np.maximum(self.length[parent], 1e-300)
        frac_r = rights / np.maximum(self.length[parent], 1e-300)
        span = self.base_hi[parent] - self.base_lo[parent]
        new = CatBatch(self.map,
                       np.mod(self.anchor[parent] + lefts[:, None] * self.map.dir_u, 1.0),
                       rights - lefts,
                       self.base_lo[parent] + frac_l * span,
                       self.base_lo[parent] + frac_r * span)
        return new, parent

    def split_pieces(self, idx, cut_arcs):
        """Sub-pieces of the pieces ``idx`` cut at given interior arc
        positions; other pieces are dropped."""
        cut_s = np.concatenate([np.asarray(c, dtype=np.float64) for c in cut_arcs]) \
            if cut_arcs else np.empty(0)
        cut_pid = np.concatenate([np.full(len(c), i) for i, c in zip(idx, cut_arcs)]) \
            if cut_arcs else np.empty(0, dtype=np.int64)
        new, parent = self.split_many(cut_s, cut_pid)
        keep = np.isin(parent, np.asarray(idx))
        return new.take(np.nonzero(keep)[0])

    def node_view(self, idx):
        """(arc positions, base values, ambient points) of the PL nodes."""
        s = np.array([0.0, self.length[idx]])
        b = np.array([self.base_lo[idx], self.base_hi[idx]])
        pts = self.point_at_arc(idx, s)
        return s, b, pts

    def curvatures(self):
        return np.zeros(self.n)

    def unstable_coords(self, idxs, s):
        """Coordinate along the unstable axis of points at the arc positions
        (continuous lift: anchor coordinate + s)."""
        base = self.anchor[idxs] @ self.map.dir_u
        return base + np.asarray(s)


# ----------------------------------------------------------------------
# solenoid family: leaf arcs with node pools
# ----------------------------------------------------------------------

class SolenoidBatch(PieceBatch):
    """Pieces are arcs of unstable leaves of the solenoid family.

    Piece table:
      t_hi, t_lo   -- exact integer base angle of the left endpoint
      width        -- base-angle extent (float, < 1)
      phases       -- (n, K) leaf phase vectors
      start, count -- node pool slices
    Node pools (flat):
      u  -- base-angle offset from the left endpoint
      b  -- base mass coordinate (monotone)
      z  -- fiber position (complex)
      g  -- leaf slope dzeta/dt (complex)
    """

    #: refinement cap: target max arc length of a PL segment
    SEG_ARC_CAP = 0.02
    #: hard ceiling on pool size
    NODE_BUDGET = 6_000_000

    def __init__(self, map_: Solenoid, t_hi, t_lo, width, phases,
                 start, count, u, b, z, g):
        self._s_cache = None
        self.map = map_
        self.t_hi = np.atleast_1d(t_hi).astype(np.uint64)
        self.t_lo = np.atleast_1d(t_lo).astype(np.uint64)
        self.width = np.atleast_1d(np.asarray(width, dtype=np.float64)).copy()
        self.phases = np.atleast_2d(np.asarray(phases, dtype=np.float64)).copy()
        self.start = np.atleast_1d(start).astype(np.int64)
        self.count = np.atleast_1d(count).astype(np.int64)
        self.u = np.asarray(u, dtype=np.float64).copy()
        self.b = np.asarray(b, dtype=np.float64).copy()
        self.z = np.asarray(z, dtype=np.complex128).copy()
        self.g = np.asarray(g, dtype=np.complex128).copy()

    # -- construction -----------------------------------------------------
    @classmethod
    def from_leaf(cls, map_: Solenoid, phases, t_center: float, half_width: float,
                  base_lo: float, base_hi: float, nodes: int = 33):
        """One piece spanning base angles [t_center - hw, t_center + hw]."""
        t0 = (t_center - half_width) % 1.0
        hi, lo = angles_from_float(np.array([t0]))
        width = 2.0 * half_width
        u = np.linspace(0.0, width, nodes)
        t = t0 + u
        z = map_.leaf_value(phases, t)
        g = _leaf_slope_series(map_, phases, t)
        b = np.linspace(base_lo, base_hi, nodes)  # uniform in t at depth 0
        return cls(map_, hi, lo, np.array([width]), phases[None, :],
                   np.array([0]), np.array([nodes]), u, b, z, g)

    @property
    def n(self):
        return self.width.size

    def t_left(self):
        return angles_to_float(self.t_hi, self.t_lo)

    def node_t(self):
        """Base angles of all nodes (flat pool, continuous lift per piece)."""
        tl = np.repeat(self.t_left(), self.count)
        return tl + self.u

    def seg_arc(self):
        """Arc length of each node gap (last entry of each piece is 0)."""
        du = np.empty_like(self.u)
        du[:-1] = self.u[1:] - self.u[:-1]
        ends = self.start + self.count - 1
        du[ends] = 0.0
        stretch = np.sqrt(1.0 + np.abs(self.g) ** 2)
        mid = np.empty_like(du)
        mid[:-1] = 0.5 * (stretch[:-1] + stretch[1:])
        mid[ends] = 0.0
        return du * mid

    def node_s(self):
        """Arc coordinate of every node from its piece's left endpoint."""
        if self._s_cache is not None and self._s_cache.size == self.u.size:
            return self._s_cache
        seg = self.seg_arc()
        s = np.zeros_like(seg)
        s[1:] = seg[:-1]
        self._s_cache = _segmented_cumsum(s, self.start, self.count)
        return self._s_cache

    def lengths(self):
        s = self.node_s()
        ends = self.start + self.count - 1
        return s[ends]

    def masses(self):
        ends = self.start + self.count - 1
        return self.b[ends] - self.b[self.start]

    def base_bounds(self):
        ends = self.start + self.count - 1
        return self.b[self.start].copy(), self.b[ends].copy()

    # -- dynamics ----------------------------------------------------------
    def push(self):
        m = self.map
        t = self.node_t()
        phi = m.fiber_factor(t)
        dphi = m._dphi(t)
        e = np.exp(1j * _TWO_PI * t)
        z_new = phi * self.z + 0.5 * e
        g_new = 0.5 * (dphi * self.z + phi * self.g + 1j * np.pi * e)
        self._s_cache = None
        self.z = z_new
        self.g = g_new
        self.u = 2.0 * self.u
        self.width = 2.0 * self.width
        hi, lo, wrapped = double_angles(self.t_hi, self.t_lo)
        self.t_hi, self.t_lo = hi, lo
        # wrapped pieces lost an integer from their left endpoint; phases of
        # the pushed leaf absorb it
        k = np.arange(1, self.phases.shape[1] + 1)
        rolled = np.empty_like(self.phases)
        rolled[:, 0] = 0.0
        rolled[:, 1:] = self.phases[:, :-1]
        # the stored angle was reduced by `wrapped`; backward angles keep
        # their true values, so every phase gains wrapped / 2^k
        shift = wrapped.astype(np.float64)[:, None] / 2.0 ** k
        self.phases = np.mod(rolled + shift, 1.0)
        self._refine()

    def _refine(self):
        """Insert midpoints into node gaps whose arc length exceeds the cap."""
        for _ in range(4):
            seg = self.seg_arc()
            too_long = seg > self.SEG_ARC_CAP
            if not too_long.any():
                return
            if self.u.size + int(too_long.sum()) > self.NODE_BUDGET:
                raise ResourceBudgetError(
                    f"node budget {self.NODE_BUDGET} exceeded")
            self._insert_midpoints(np.nonzero(too_long)[0])

    def _insert_midpoints(self, gap_idx):
        # cubic Hermite from the gap's endpoint values and slopes; the
        # interpolation error is O(h^4) and is contracted by the fiber
        # factor under subsequent iterations
        self._s_cache = None
        piece_of_node = np.repeat(np.arange(self.n), self.count)
        new_u = 0.5 * (self.u[gap_idx] + self.u[gap_idx + 1])
        new_b = 0.5 * (self.b[gap_idx] + self.b[gap_idx + 1])
        pid = piece_of_node[gap_idx]
        h = self.u[gap_idx + 1] - self.u[gap_idx]
        z0, z1 = self.z[gap_idx], self.z[gap_idx + 1]
        g0, g1 = self.g[gap_idx], self.g[gap_idx + 1]
        new_z = 0.5 * (z0 + z1) + 0.125 * h * (g0 - g1)
        new_g = 1.5 * (z1 - z0) / np.maximum(h, 1e-300) - 0.25 * (g0 + g1)

        n_old = self.u.size
        m = gap_idx.size
        total = n_old + m
        # an insert at gap g sits between old nodes g and g+1
        before = np.searchsorted(gap_idx, np.arange(n_old), side="left")
        old_pos = np.arange(n_old) + before
        ins_pos = gap_idx + 1 + np.arange(m)
        u2 = np.empty(total)
        b2 = np.empty(total)
        z2 = np.empty(total, dtype=np.complex128)
        g2 = np.empty(total, dtype=np.complex128)
        for arr, old, new in ((u2, self.u, new_u), (b2, self.b, new_b),
                              (z2, self.z, new_z), (g2, self.g, new_g)):
            arr[old_pos] = old
            arr[ins_pos] = new
        self.u, self.b, self.z, self.g = u2, b2, z2, g2
        added = np.bincount(pid, minlength=self.n)
        self.count = self.count + added
        self.start = np.concatenate([[0], np.cumsum(self.count)[:-1]])

    # -- queries -------------------------------------------------------
    def _piece_nodes(self, idx):
        a, c = self.start[idx], self.count[idx]
        return slice(a, a + c)

    def node_view(self, idx):
        sl = self._piece_nodes(idx)
        s_all = self.node_s()
        t = self.t_left()[idx] + self.u[sl]
        pts = np.stack([np.mod(t, 1.0), self.z[sl].real, self.z[sl].imag], axis=-1)
        return s_all[sl], self.b[sl].copy(), pts

    def base_of_arc(self, idx, s):
        sl = self._piece_nodes(idx)
        nodes_s = self.node_s()[sl]
        return np.interp(np.asarray(s, dtype=np.float64), nodes_s, self.b[sl])

    def arc_of_base(self, idx, bq):
        sl = self._piece_nodes(idx)
        nodes_s = self.node_s()[sl]
        return np.interp(np.asarray(bq, dtype=np.float64), self.b[sl], nodes_s)

    def u_of_arc(self, idx, s):
        sl = self._piece_nodes(idx)
        nodes_s = self.node_s()[sl]
        return np.interp(np.asarray(s, dtype=np.float64), nodes_s, self.u[sl])

    def arc_of_u(self, idx, uq):
        sl = self._piece_nodes(idx)
        nodes_s = self.node_s()[sl]
        return np.interp(np.asarray(uq, dtype=np.float64), self.u[sl], nodes_s)

    def point_at_arc(self, idx, s):
        sl = self._piece_nodes(idx)
        nodes_s = self.node_s()[sl]
        s = np.asarray(s, dtype=np.float64)
        u = np.interp(s, nodes_s, self.u[sl])
        t = self.t_left()[idx] + u
        z = self.map.leaf_value(self.phases[idx], t)
        return np.stack([np.mod(t, 1.0), np.real(z), np.imag(z)], axis=-1)

    def boundary_densities(self):
        """Mass density w.r.t. arc at the left and right ends of each piece."""
        s = self.node_s()
        first = self.start
        second = self.start + 1
        ends = self.start + self.count - 1
        before = ends - 1
        left = (self.b[second] - self.b[first]) / np.maximum(s[second] - s[first], 1e-300)
        right = (self.b[ends] - self.b[before]) / np.maximum(s[ends] - s[before], 1e-300)
        return left, right

    def curvatures(self):
        """Max discrete curvature over node triples, per piece."""
        t = self.node_t()
        pts = np.stack([t, self.z.real, self.z.imag], axis=-1)
        out = np.zeros(self.n)
        for i in range(self.n):
            sl = self._piece_nodes(i)
            p = pts[sl]
            if p.shape[0] >= 3:
                out[i] = polyline_max_curvature(p)
        return out

    def take(self, keep):
        keep = np.asarray(keep, dtype=np.int64)
        counts = self.count[keep]
        if keep.size:
            starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
            node_idx = np.repeat(self.start[keep] - starts, counts) \
                + np.arange(int(counts.sum()))
        else:
            starts = np.empty(0, dtype=np.int64)
            node_idx = np.empty(0, dtype=np.int64)
        return SolenoidBatch(self.map, self.t_hi[keep], self.t_lo[keep],
                             self.width[keep], self.phases[keep],
                             starts, counts, self.u[node_idx], self.b[node_idx],
                             self.z[node_idx], self.g[node_idx])

    def extend(self, other: "SolenoidBatch"):
        off = self.u.size
        self.t_hi = np.concatenate([self.t_hi, other.t_hi])
        self.t_lo = np.concatenate([self.t_lo, other.t_lo])
        self.width = np.concatenate([self.width, other.width])
        self.phases = np.concatenate([self.phases, other.phases])
        self.start = np.concatenate([self.start, other.start + off])
        self.count = np.concatenate([self.count, other.count])
        self.u = np.concatenate([self.u, other.u])
        self.b = np.concatenate([self.b, other.b])
        self.z = np.concatenate([self.z, other.z])
        self.g = np.concatenate([self.g, other.g])

    def split_many(self, cut_s, cut_pid):
        """Split pieces at flat interior arc positions (sorted within each
        piece).  Returns (new_batch, parent), piece-major and arc-ordered.

        Sub-pieces are re-anchored on the exact angle grid at their left
        endpoint (snap error ~2^-114); cut nodes carry Hermite fiber and
        slope values from the surrounding node gap.
        """
        cut_s = np.asarray(cut_s, dtype=np.float64)
        cut_pid = np.asarray(cut_pid, dtype=np.int64)
        if cut_s.size:
            corder = np.lexsort((cut_s, cut_pid))
            cut_s, cut_pid = cut_s[corder], cut_pid[corder]
        s_all = self.node_s()
        piece_of_node = np.repeat(np.arange(self.n), self.count)

        lengths = s_all[self.start + self.count - 1]
        glob_off = np.concatenate([[0.0], np.cumsum(lengths + 1.0)[:-1]])
        glob = s_all + glob_off[piece_of_node]
        cut_glob = cut_s + glob_off[cut_pid]
        u_c = np.interp(cut_glob, glob, self.u)
        b_c = np.interp(cut_glob, glob, self.b)
        if cut_s.size:
            z_c, g_c = _hermite_eval(self.u, self.z, self.g, glob, cut_glob,
                                     u_q=u_c)
        else:
            z_c = np.empty(0, dtype=np.complex128)
            g_c = np.empty(0, dtype=np.complex128)

        # merge the sorted node and (doubled) cut records without sorting
        n_old = self.u.size
        n_cut = cut_s.size
        total = n_old + 2 * n_cut
        cuts_before = np.searchsorted(cut_glob, glob, side="left")
        old_pos = np.arange(n_old) + 2 * cuts_before
        nodes_before = np.searchsorted(glob, cut_glob, side="left")
        end_pos = nodes_before + 2 * np.arange(n_cut)
        start_pos = end_pos + 1

        rec_u = np.empty(total)
        rec_b = np.empty(total)
        rec_z = np.empty(total, dtype=np.complex128)
        rec_g = np.empty(total, dtype=np.complex128)
        rec_pid = np.empty(total, dtype=np.int64)
        for arr, old, cut in ((rec_u, self.u, u_c), (rec_b, self.b, b_c),
                              (rec_z, self.z, z_c), (rec_g, self.g, g_c)):
            arr[old_pos] = old
            arr[end_pos] = cut
            arr[start_pos] = cut
        rec_pid[old_pos] = piece_of_node
        rec_pid[end_pos] = cut_pid
        rec_pid[start_pos] = cut_pid

        new_start_mask = np.zeros(total, dtype=bool)
        new_start_mask[old_pos[self.start]] = True
        new_start_mask[start_pos] = True
        starts = np.nonzero(new_start_mask)[0]
        counts = np.diff(np.concatenate([starts, [total]]))
        parent = rec_pid[starts]

        u_left = rec_u[starts]
        hi, lo, wraps = angle_add_float(self.t_hi[parent], self.t_lo[parent],
                                        u_left)
        k = np.arange(1, self.phases.shape[1] + 1)
        phases = np.mod(self.phases[parent] + wraps[:, None] / 2.0 ** k, 1.0)
        new_u = rec_u - np.repeat(u_left, counts)
        ends = starts + counts - 1
        new = SolenoidBatch.__new__(SolenoidBatch)
        new._s_cache = None
        new.map = self.map
        new.t_hi, new.t_lo = hi, lo
        new.width = rec_u[ends] - u_left
        new.phases = phases
        new.start = starts.astype(np.int64)
        new.count = counts.astype(np.int64)
        new.u, new.b, new.z, new.g = new_u, rec_b, rec_z, rec_g
        return new, parent

    def split_pieces(self, idx, cut_arcs):
        """Sub-pieces of pieces idx cut at the given interior arc positions;
        other pieces are dropped."""
        cut_s = np.concatenate([np.asarray(c, dtype=np.float64) for c in cut_arcs]) \
            if cut_arcs else np.empty(0)
        cut_pid = np.concatenate([np.full(len(c), i) for i, c in zip(idx, cut_arcs)]) \
            if cut_arcs else np.empty(0, dtype=np.int64)
        new, parent = self.split_many(cut_s, cut_pid)
        keep = np.isin(parent, np.asarray(idx))
        return new.take(np.nonzero(keep)[0])

    def fiber_values(self, idx, t_query):
        """Leaf fiber positions over given base angles (continuous lift)."""
        return _leaf_value_rows(self.map, self.phases[idx], np.asarray(t_query))

    def _u_glob(self):
        off = np.concatenate([[0.0], np.cumsum(self.width + 1.0)[:-1]])
        return self.u + np.repeat(off, self.count), off

    def eval_at_u(self, pid, u_q):
        """(z, g) at base offsets u_q inside pieces pid (Hermite on nodes)."""
        gu, off = self._u_glob()
        u_q = np.asarray(u_q, dtype=np.float64)
        return _hermite_eval(self.u, self.z, self.g, gu, u_q + off[pid],
                             u_q=u_q)

    def u_of_arcs_flat(self, pid, arcs):
        """Base offsets of arc positions, vectorized over (piece, arc)."""
        s_all = self.node_s()
        lengths = s_all[self.start + self.count - 1]
        glob_off = np.concatenate([[0.0], np.cumsum(lengths + 1.0)[:-1]])
        glob = s_all + np.repeat(glob_off, self.count)
        return np.interp(np.asarray(arcs) + glob_off[pid], glob, self.u)


# ----------------------------------------------------------------------
# leaf series helpers (exact evaluation for fresh nodes)
# ----------------------------------------------------------------------

def _leaf_value_rows(map_: Solenoid, phases, t):
    return map_.leaf_value(phases, t)


def _leaf_slope_series(map_: Solenoid, phases, t):
    """Analytic leaf slope; uniform case in closed form, else central diff."""
    if isinstance(map_, MostlyContracting):
        h = 2.0 ** -26
        return (map_.leaf_value(phases, t + h) - map_.leaf_value(phases, t - h)) / (2 * h)
    t = np.asarray(t, dtype=np.float64)
    phases = np.asarray(phases, dtype=np.float64)
    k = np.arange(1, phases.shape[-1] + 1)
    tk = t[..., None] / 2.0 ** k + phases
    w = map_.lambda_c ** np.arange(phases.shape[-1]) / 2.0 ** k
    return 1j * np.pi * np.sum(w * np.exp(1j * _TWO_PI * tk), axis=-1)


def _leaf_slope_rows(map_: Solenoid, phases, t):
    return _leaf_slope_series(map_, phases, t)


def _hermite_eval(u, z, g, glob, q_glob, u_q=None):
    """Cubic Hermite values and slopes at query positions on the global
    node coordinate (monotone ``glob`` aligned with u, z, g); the Hermite
    parameter is the base offset u (g = dz/du)."""
    j = np.clip(np.searchsorted(glob, q_glob, side="right") - 1, 0,
                glob.size - 2)
    h = u[j + 1] - u[j]
    h = np.where(h <= 0, 1e-300, h)
    if u_q is None:
        u_q = np.interp(q_glob, glob, u)
    x = np.clip((u_q - u[j]) / h, 0.0, 1.0)
    h00 = (1 + 2 * x) * (1 - x) ** 2
    h10 = x * (1 - x) ** 2
    h01 = x * x * (3 - 2 * x)
    h11 = x * x * (x - 1)
    zq = h00 * z[j] + h10 * h * g[j] + h01 * z[j + 1] + h11 * h * g[j + 1]
    d00 = 6 * x * (x - 1)
    d10 = (1 - x) * (1 - 3 * x)
    d01 = -d00
    d11 = x * (3 * x - 2)
    gq = (d00 * z[j] + d01 * z[j + 1]) / h + d10 * g[j] + d11 * g[j + 1]
    return zq, gq


def polyline_max_curvature(points: np.ndarray) -> float:
    """Max reciprocal circumradius over consecutive vertex triples."""
    p, q, r = points[:-2], points[1:-1], points[2:]
    a = np.linalg.norm(q - p, axis=-1)
    b = np.linalg.norm(r - q, axis=-1)
    c = np.linalg.norm(r - p, axis=-1)
    cross = np.cross(q - p, r - q)
    if cross.ndim > 1:
        area2 = np.linalg.norm(cross, axis=-1)
    else:
        area2 = np.abs(cross)
    denom = a * b * c
    keep = denom > 0
    if not keep.any():
        return 0.0
    return float(np.max(2.0 * area2[keep] / denom[keep]))


def make_batch(map_: MapModel, **kwargs) -> PieceBatch:
    if isinstance(map_, TorusAutomorphism):
        return CatBatch(map_, **kwargs)
    if isinstance(map_, Solenoid):
        return SolenoidBatch(map_, **kwargs)
    raise TypeError(f"no batch support for {map_!r}")


def plan_cuts(lengths, keep_threshold, spacing):
    """Cut positions for pieces longer than the keep threshold.

    Long pieces are divided into ceil(L/spacing) equal sub-arcs.  The cut
    count ceil(L/spacing) - 1 never exceeds L/spacing, so the summed cut
    density stays below mass/spacing -- the same bound an offset-optimized
    cut family realizes -- while every sub-arc length lands in
    (spacing/2, spacing], with no degenerate pieces.

    Returns (cut_s, cut_pid) flat arrays.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    idx = np.nonzero(lengths > keep_threshold * (1.0 + 1e-12))[0]
    if idx.size == 0:
        return np.empty(0), np.empty(0, dtype=np.int64)
    L = lengths[idx]
    n_sub = np.ceil(L / spacing * (1.0 - 1e-12)).astype(np.int64)
    n_sub = np.maximum(n_sub, 2)
    m = n_sub - 1
    pid = np.repeat(idx, m)
    first = np.concatenate([[0], np.cumsum(m)[:-1]])
    k = np.arange(int(m.sum())) - np.repeat(first, m) + 1
    cut_s = k * np.repeat(L / n_sub, m)
    return cut_s, pid
