"""Measured unstable disks (d_u = 1 curves) with tracked open components.

An :class:`UnstableCurve` owns one geometric piece per tracked component and
remembers the reference mass of the originating disk; a
:class:`ComponentSet` is the matching list of disjoint open base-parameter
intervals at some depth.  All mass/arc queries are closed-form on the
piecewise-linear node profiles of the pieces, so the boundary-mass statistic
(the sup over eps of near-boundary mass over eps) is computed exactly rather
than by sampling eps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (DomainError, NotInComponentError, PreconditionError,
                     UndefinedStatisticError)
from .geom import CatBatch, SolenoidBatch, polyline_max_curvature
from .maps import MapModel, Solenoid, TorusAutomorphism


@dataclass
class ComponentSet:
    """Disjoint open subintervals of the base parameter, at depth n."""
    intervals: np.ndarray   # (m, 2), sorted, pairwise disjoint
    depth: int

    def __post_init__(self):
        iv = np.atleast_2d(np.asarray(self.intervals, dtype=np.float64))
        if iv.size and not (np.all(iv[:, 1] > iv[:, 0])
                            and np.all(iv[1:, 0] >= iv[:-1, 1] - 1e-15)):
            raise PreconditionError("intervals must be positive and disjoint")
        self.intervals = iv

    @property
    def count(self):
        return self.intervals.shape[0]

    def total_mass(self):
        return float(np.sum(self.intervals[:, 1] - self.intervals[:, 0]))

    def locate(self, s: float) -> int:
        iv = self.intervals
        hit = np.nonzero((iv[:, 0] < s) & (s < iv[:, 1]))[0]
        if hit.size == 0:
            raise NotInComponentError(f"base parameter {s} is in no component")
        return int(hit[0])


class UnstableCurve:
    """A parameterized unstable disk tracked over finitely many components.

    batch       -- per-component geometry (one piece per component, in order)
    mass_total  -- reference mass m(gamma) of the originating disk
    depth       -- iterates applied since the originating disk
    """

    def __init__(self, map_: MapModel, batch, mass_total: float, depth: int = 0):
        self.map = map_
        self.batch = batch
        self.mass_total = float(mass_total)
        self.depth = int(depth)

    # -- constructors ----------------------------------------------------
    @classmethod
    def cat_segment(cls, map_: TorusAutomorphism, anchor, length: float):
        """Fresh straight unstable segment; base parameter = arc length."""
        batch = CatBatch(map_, np.asarray(anchor, dtype=np.float64)[None, :],
                         [length], [0.0], [length])
        return cls(map_, batch, mass_total=length, depth=0)

    @classmethod
    def leaf_arc(cls, map_: Solenoid, x, arc_radius: float, nodes: int = 65):
        """Fresh arc of the unstable leaf through x, given arc-length radius.

        The base parameter is arc length at depth 0, so the reference measure
        is Lebesgue on the curve.
        """
        phases = map_.leaf_at(x)
        t0 = float(np.asarray(x)[0]) % 1.0
        # base-angle half width from the local stretch, then trim to the
        # requested arc radius using the measured profile
        zp = map_.leaf_slope(phases, np.array(t0))
        local = float(np.hypot(1.0, np.abs(zp)))
        hw = 1.25 * arc_radius / local
        batch = SolenoidBatch.from_leaf(map_, phases, t0, hw, 0.0, 1.0, nodes=nodes)
        s = batch.node_s()
        mid = batch.arc_of_u(0, np.array([hw]))[0]
        lo_s, hi_s = mid - arc_radius, mid + arc_radius
        piece = batch.split_pieces([0], [np.array([max(lo_s, 1e-12),
                                                   min(hi_s, s[-1] - 1e-12)])])
        take = piece.take(np.array([1]))
        # re-parameterize: base = arc length at depth 0
        take.b = take.node_s() + 0.0
        return cls(map_, take, mass_total=float(take.node_s()[-1]), depth=0)

    # -- views -----------------------------------------------------------
    @property
    def n_components(self):
        return self.batch.n

    def components(self) -> ComponentSet:
        if isinstance(self.batch, CatBatch):
            iv = np.stack([self.batch.base_lo, self.batch.base_hi], axis=1)
        else:
            lo, hi = self.batch.base_bounds()
            iv = np.stack([lo, hi], axis=1)
        return ComponentSet(iv, self.depth)

    def lengths(self):
        return self.batch.lengths()

    def masses(self):
        return self.batch.masses()

    def copy(self):
        keep = np.arange(self.n_components)
        return UnstableCurve(self.map, self.batch.take(keep),
                             self.mass_total, self.depth)

    def vertices(self, idx: int):
        """(arc, base, ambient points) of the PL nodes of one component."""
        return self.batch.node_view(idx)

    def to_csv(self, path):
        """Debug dump: base_param, ambient coordinates, density."""
        rows = ["base_param," + ",".join(f"x{i}" for i in range(self.map.dim))
                + ",density"]
        for i in range(self.n_components):
            s, b, pts = self.vertices(i)
            rho = np.gradient(b, np.maximum(s, 0.0)) if s.size > 2 else \
                np.full(s.size, (b[-1] - b[0]) / max(s[-1], 1e-300))
            for j in range(s.size):
                coords = ",".join(repr(float(c)) for c in pts[j])
                rows.append(f"{b[j]!r},{coords},{rho[j]!r}")
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")


# ----------------------------------------------------------------------
# operations
# ----------------------------------------------------------------------

def admissibility_check(curve: UnstableCurve, delta0: float, L: float):
    """Check every component: arc diameter <= delta0, discrete curvature <= L.

    Returns (ok, diagnostics); diagnostics name the violated clause and the
    worst offending component.
    """
    if curve.n_components == 0:
        raise PreconditionError("empty curve")
    lengths = curve.lengths()
    curv = curve.batch.curvatures()
    diag = {"max_diameter": float(lengths.max()),
            "max_curvature": float(curv.max()) if curv.size else 0.0,
            "violations": []}
    if diag["max_diameter"] > delta0 * (1 + 1e-12):
        diag["violations"].append(
            f"diameter {diag['max_diameter']:.6g} > delta0 {delta0:.6g}")
    if diag["max_curvature"] > L * (1 + 1e-9) + 1e-12:
        diag["violations"].append(
            f"curvature {diag['max_curvature']:.6g} > L {L:.6g}")
    return (not diag["violations"]), diag


def curvature_estimate(curve: UnstableCurve) -> float:
    """Max discrete curvature (reciprocal circumradius over node triples)."""
    total = 0.0
    for i in range(curve.n_components):
        _, _, pts = curve.vertices(i)
        if pts.shape[0] >= 3:
            total = max(total, polyline_max_curvature(pts))
    return total


def boundary_distance(curve: UnstableCurve, components: ComponentSet,
                      s: float) -> float:
    """Arc distance from the depth-n image of base point s to the nearer
    endpoint of its component's image."""
    idx = components.locate(s)
    arc = float(curve.batch.arc_of_base(idx, np.array([s]))[0])
    length = float(curve.lengths()[idx])
    return min(arc, length - arc)


def flat_profiles(curve: UnstableCurve):
    """Flat PL node data over all components.

    Returns (s, b, starts, counts): arc and base coordinates of every node
    (arc restarting at 0 per component) and the component slices.
    """
    batch = curve.batch
    if isinstance(batch, CatBatch):
        n = batch.n
        s = np.zeros(2 * n)
        s[1::2] = batch.length
        b = np.empty(2 * n)
        b[0::2] = batch.base_lo
        b[1::2] = batch.base_hi
        starts = 2 * np.arange(n)
        counts = np.full(n, 2)
        return s, b, starts, counts
    s = batch.node_s()
    return s, batch.b.copy(), batch.start.copy(), batch.count.copy()


def _boundary_mass_events(s, b, starts, counts):
    """Slope events of the total near-boundary mass M(eps) over all
    components; returns (eps0_slope, event_eps, event_dslope)."""
    ends = starts + counts - 1
    lengths = s[ends]
    halves = 0.5 * lengths

    ds = np.diff(s)
    db = np.diff(b)
    seg_valid = np.ones(ds.size, dtype=bool)
    seg_valid[ends[:-1]] = False          # gaps between components
    rho = np.where(seg_valid, db / np.maximum(ds, 1e-300), 0.0)

    piece_of_node = np.repeat(np.arange(starts.size), counts)
    eps0 = float(np.sum(rho[starts]) + np.sum(rho[ends - 1]))

    # internal nodes: slope change when the left traversal passes s_j and
    # the right traversal passes L - s_j
    node_idx = np.arange(s.size)
    internal = (node_idx != starts[piece_of_node]) & \
               (node_idx != ends[piece_of_node])
    j = node_idx[internal]
    pj = piece_of_node[j]
    sj = s[j]
    Lj = lengths[pj]
    left_ok = sj < halves[pj]
    right_ok = (Lj - sj) < halves[pj]
    ev_eps = [sj[left_ok], (Lj - sj)[right_ok]]
    ev_ds = [(rho[j] - rho[j - 1])[left_ok], (rho[j - 1] - rho[j])[right_ok]]

    # stop events at eps = half (both traversals)
    glob = s + np.repeat(np.concatenate([[0.0], np.cumsum(lengths + 1.0)[:-1]]),
                         counts)
    half_glob = halves + glob[starts]
    jl = np.clip(np.searchsorted(glob, half_glob, side="left") - 1, 0, rho.size - 1)
    jr = np.clip(np.searchsorted(glob, half_glob, side="right") - 1, 0, rho.size - 1)
    ev_eps += [halves, halves]
    ev_ds += [-rho[jl], -rho[jr]]

    return eps0, np.concatenate(ev_eps), np.concatenate(ev_ds)


def near_boundary_mass(curve: UnstableCurve, eps: float) -> float:
    """Exact mass of points whose image lies within arc distance eps of its
    component's image boundary."""
    s, b, starts, counts = flat_profiles(curve)
    ends = starts + counts - 1
    lengths = s[ends]
    e = np.minimum(eps, 0.5 * lengths)
    glob_off = np.concatenate([[0.0], np.cumsum(lengths + 1.0)[:-1]])
    glob = s + np.repeat(glob_off, counts)
    left = np.interp(glob[starts] + e, glob, b) - b[starts]
    right = b[ends] - np.interp(glob[ends] - e, glob, b)
    return float(np.sum(left) + np.sum(right))


def z_sup_flat(s, b, starts, counts, ref_mass: float) -> float:
    """Exact sup_{eps>0} M(eps)/(eps*ref_mass) from flat PL node profiles.

    The near-boundary mass M is piecewise linear in eps, so the supremum is
    attained either in the eps -> 0 limit or at a slope breakpoint; both are
    evaluated in closed form.
    """
    if ref_mass <= 0:
        raise UndefinedStatisticError("zero reference mass")
    eps0, ev_eps, ev_ds = _boundary_mass_events(s, b, starts, counts)
    best = eps0 / ref_mass
    if ev_eps.size:
        order = np.argsort(ev_eps, kind="stable")
        ev_eps = ev_eps[order]
        ev_ds = ev_ds[order]
        eps_u, idx = np.unique(ev_eps, return_index=True)
        dslope = np.add.reduceat(ev_ds, idx)
        gaps = np.diff(np.concatenate([[0.0], eps_u]))
        slopes = eps0 + np.concatenate([[0.0], np.cumsum(dslope)[:-1]])
        mass_at = np.cumsum(slopes * gaps)
        pos = eps_u > 0
        if pos.any():
            best = max(best, float(np.max(mass_at[pos] / eps_u[pos])) / ref_mass)
    return float(best)


def z_statistic(curve: UnstableCurve, components: ComponentSet | None = None) -> float:
    """Exact boundary-mass statistic sup_{eps>0} m{r < eps} / (eps * m(gamma))."""
    if curve.mass_total <= 0:
        raise UndefinedStatisticError("curve has zero reference mass")
    if curve.n_components == 0:
        raise UndefinedStatisticError("no components")
    s, b, starts, counts = flat_profiles(curve)
    return z_sup_flat(s, b, starts, counts, curve.mass_total)


def iterate_components(map_: MapModel, curve: UnstableCurve,
                       components: ComponentSet, steps: int):
    """Push every component forward by f^steps, refining the node profiles
    adaptively; base parameters are preserved."""
    if steps < 0:
        raise DomainError("steps must be >= 0")
    out = curve.copy()
    for _ in range(steps):
        out.batch.push()
    out.depth = curve.depth + steps
    return out, ComponentSet(components.intervals.copy(), out.depth)
