"""Product-structure rectangles over a net of attractor points.

A canonical rectangle sits over a short arc of the unstable leaf through its
center: its points are the intersections of the stable disks through that
arc with nearby unstable leaves.  For the built-in maps both families are
closed-form (straight stable lines on the torus; vertical fiber disks for
the solenoids), so brackets, stable distances, overshadowing and u-crossing
tests reduce to explicit geometry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .curves import ComponentSet, UnstableCurve
from .errors import (ConfigurationError, ContainmentError, NoBracketError,
                     NoIntersectionError, PreconditionError, SamplingError)
from .filtration import build_filtration
from .maps import MapModel, Solenoid, TorusAutomorphism


# ----------------------------------------------------------------------
# brackets and stable distances
# ----------------------------------------------------------------------

def bracket(map_: MapModel, x, y, reach: float = 0.25):
    """The local product [x, y]: intersection of the stable disk of x with
    the unstable disk of y (nearest torus lift; ambient chart point)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if isinstance(map_, TorusAutomorphism):
        d = y - x
        d -= np.round(d)
        # solve x + a*dir_s = y' + b*dir_u
        M = np.column_stack([map_.dir_s, -map_.dir_u])
        a, bb = np.linalg.solve(M, d)
        if abs(a) > reach or abs(bb) > reach:
            raise NoBracketError(f"disks of reach {reach} do not intersect")
        return x + a * map_.dir_s
    if isinstance(map_, Solenoid):
        # stable disk of x is its fiber; the unstable leaf of y crosses it
        # at base angle t_x
        dt = (y[0] - x[0]) % 1.0
        dt = min(dt, 1.0 - dt)
        if dt > reach:
            raise NoBracketError("base angles too far apart")
        phases = map_.leaf_at(y)
        # evaluate the leaf of y at t_x using the nearest lift
        t_q = y[0] + ((x[0] - y[0] + 0.5) % 1.0 - 0.5)
        z = complex(map_.leaf_value(phases, np.array(t_q)))
        if abs(z - complex(x[1], x[2])) > reach:
            raise NoBracketError("fiber distance exceeds reach")
        return np.array([x[0] % 1.0, z.real, z.imag])
    raise PreconditionError(f"no bracket geometry for {map_.name}")


def s_distance_point(map_: MapModel, x, curve: UnstableCurve,
                     reach: float) -> float:
    """Distance along the stable disk of x to its intersection with the
    curve; NoIntersectionError when the stable disk misses the curve."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(map_, TorusAutomorphism):
        for i in range(curve.n_components):
            lo = curve.batch.anchor[i]
            L = curve.batch.length[i]
            # unstable coordinates of x relative to the piece anchor
            d = x - lo
            d -= np.round(d)
            u = float(d @ map_.dir_u)
            s = float(d @ map_.dir_s)
            if 0.0 <= u <= L and abs(s) <= reach:
                return abs(s)
        raise NoIntersectionError("stable segment misses the curve")
    if isinstance(map_, Solenoid):
        for i in range(curve.n_components):
            tl = curve.batch.t_left()[i]
            w = curve.batch.width[i]
            dt = (x[0] - tl) % 1.0
            if dt <= w:
                z = complex(curve.batch.fiber_values(i, np.array(tl + dt)))
                dist = abs(z - complex(x[1], x[2]))
                if dist <= reach:
                    return dist
                raise NoIntersectionError("fiber disk too small to reach leaf")
        raise NoIntersectionError("fiber misses the curve's base window")
    raise PreconditionError(f"no stable geometry for {map_.name}")


def overshadows(map_: MapModel, curve: UnstableCurve, other: UnstableCurve,
                reach: float, samples: int = 33):
    """True when every stable disk through ``curve`` meets ``other``;
    second return is the sampled sup of the stable distances."""
    worst = 0.0
    for i in range(curve.n_components):
        L = curve.batch.length[i] if hasattr(curve.batch, "length") \
            else curve.lengths()[i]
        for s in np.linspace(0.0, float(L), samples):
            x = curve.batch.point_at_arc(i, np.array([s]))[0]
            try:
                worst = max(worst, s_distance_point(map_, x, other, reach))
            except NoIntersectionError:
                return False, float("inf")
    return True, worst


# ----------------------------------------------------------------------
# rectangles
# ----------------------------------------------------------------------

@dataclass
class Rectangle:
    """Canonical rectangle over the unstable arc through its center.

    base_curve   -- the central unstable arc (radius delta1/3 in arc length)
    base_levels  -- nested base approximant of the transverse Cantor set
    stable_radius (delta1), cs_width (delta2), depth of the approximant
    """
    center: np.ndarray
    base_curve: UnstableCurve
    base_levels: ComponentSet
    stable_radius: float
    cs_width: float
    depth: int
    index: int = -1

    def base_mass(self) -> float:
        return self.base_curve.mass_total

    def unstable_window(self, map_: MapModel):
        """Map-specific coordinates of the base arc extent."""
        if isinstance(map_, TorusAutomorphism):
            a = self.base_curve.batch.anchor[0]
            L = float(self.base_curve.batch.length[0])
            return a, L
        tl = float(self.base_curve.batch.t_left()[0])
        w = float(self.base_curve.batch.width[0])
        return tl, w


def _embed(map_: MapModel, pts):
    """Metric embedding used for nearest-center queries.

    Torus points go to a periodic KD-tree directly; solenoid points use the
    chord embedding of the base circle, which distorts base distances by at
    most a factor pi/2 on the scales involved (queries use an inflated
    radius and re-check with the true metric)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if isinstance(map_, TorusAutomorphism):
        return np.mod(pts, 1.0)
    ang = 2.0 * np.pi * pts[:, 0]
    return np.column_stack([np.cos(ang) / (2 * np.pi), np.sin(ang) / (2 * np.pi),
                            pts[:, 1], pts[:, 2]])


@dataclass
class RectangleNet:
    map: MapModel
    centers: np.ndarray                 # (p, dim)
    delta3: float
    delta1: float
    delta2: float
    rect_depth: int
    center_leaves: np.ndarray | None = None   # (p, K) for solenoids
    _rect_cache: dict = field(default_factory=dict)
    _tree: object = None

    @property
    def size(self):
        return self.centers.shape[0]

    # -- spatial queries ------------------------------------------------
    def _build_tree(self):
        from scipy.spatial import cKDTree
        if isinstance(self.map, TorusAutomorphism):
            self._tree = cKDTree(_embed(self.map, self.centers), boxsize=1.0)
        else:
            self._tree = cKDTree(_embed(self.map, self.centers))

    def nearest_many(self, pts, radius=None):
        """Vectorized nearest centers: (indices, distances); index -1 where
        no center lies within ``radius`` (default delta3).

        Distances are measured in the net's query embedding (exact for the
        torus; the solenoid's base-chord embedding agrees with the
        Riemannian metric to ~1e-4 relative at net scales).
        """
        if radius is None:
            radius = self.delta3
        if self._tree is None:
            self._build_tree()
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        dist, idx = self._tree.query(_embed(self.map, pts),
                                     distance_upper_bound=radius)
        found = np.isfinite(dist)
        out_i = np.where(found, idx, -1).astype(np.int64)
        out_d = np.where(found, dist, np.inf)
        return out_i, out_d

    def nearest_center(self, pt, radius=None):
        i, d = self.nearest_many(np.asarray(pt)[None, :], radius)
        return int(i[0]), float(d[0])

    def rectangle(self, i: int) -> Rectangle:
        if i not in self._rect_cache:
            t_range = None
            if self.center_leaves is not None:
                win = self.window_arrays()
                t_range = (win["tlo"][i], win["w"][i])
            self._rect_cache[i] = canonical_rectangle(
                self.map, self.centers[i], self.rect_depth, self.delta1,
                self.delta2, leaf_phases=None if self.center_leaves is None
                else self.center_leaves[i], index=i, t_range=t_range)
        return self._rect_cache[i]

    def window_arrays(self):
        """Per-center unstable windows of the canonical rectangles.

        Torus: {"anchor": (p,2), "len": scalar}.  Solenoids: {"tlo": (p,),
        "w": (p,), "tq": (p,5), "zq": (p,5)} -- base window and fiber samples
        of the central leaf, with window arc length 2*delta1/3.
        """
        if getattr(self, "_windows", None) is not None:
            return self._windows
        radius = self.delta1 / 3.0
        if isinstance(self.map, TorusAutomorphism):
            anchors = np.mod(self.centers - radius * self.map.dir_u, 1.0)
            self._windows = {"anchor": anchors, "len": 2.0 * radius}
            return self._windows
        ph = self.center_leaves
        t_z = self.centers[:, 0]
        # local stretch at the center, one correction pass on the arc length
        hw = np.full(self.size, radius)
        for _ in range(3):
            tq = t_z[:, None] + np.linspace(-1.0, 1.0, 7) * hw[:, None]
            h = 2.0 ** -24
            zp = (self.map.leaf_value(ph[:, None, :], tq + h)
                  - self.map.leaf_value(ph[:, None, :], tq - h)) / (2 * h)
            stretch = np.sqrt(1.0 + np.abs(zp) ** 2)
            arc = np.trapezoid(stretch, dx=2.0 / 6.0, axis=1) * hw  # over 2*hw
            hw *= 2.0 * radius / np.maximum(arc, 1e-300)
        tlo = t_z - hw
        tq = tlo[:, None] + np.linspace(0.0, 1.0, 5) * (2 * hw)[:, None]
        zq = self.map.leaf_value(ph[:, None, :], tq)
        self._windows = {"tlo": tlo, "w": 2.0 * hw, "tq": tq, "zq": zq}
        return self._windows

    def to_json(self, path):
        data = {
            "map": self.map.name,
            "delta1": self.delta1, "delta2": self.delta2, "delta3": self.delta3,
            "rect_depth": self.rect_depth,
            "centers": [[float(v) for v in c] for c in self.centers],
            "rectangles": {
                str(i): [[float(a), float(b)]
                         for a, b in self._rect_cache[i].base_levels.intervals]
                for i in sorted(self._rect_cache)
            },
        }
        with open(path, "w") as fh:
            json.dump(data, fh, sort_keys=True, indent=1)


def canonical_rectangle(map_: MapModel, z, depth: int, delta1_val: float,
                        delta2_val: float, leaf_phases=None, index=-1,
                        t_range=None) -> Rectangle:
    """Rectangle over the unstable arc of arc-radius delta1/3 through z,
    with the transverse base approximated to the given filtration depth."""
    if depth < 0:
        raise PreconditionError("depth must be >= 0")
    z = np.asarray(z, dtype=np.float64)
    radius = delta1_val / 3.0
    if isinstance(map_, TorusAutomorphism):
        anchor = np.mod(z - radius * map_.dir_u, 1.0)
        base = UnstableCurve.cat_segment(map_, anchor, 2.0 * radius)
    elif t_range is not None:
        base = _leaf_arc_t_range(map_, leaf_phases, t_range[0], t_range[1])
    else:
        if leaf_phases is None:
            base = UnstableCurve.leaf_arc(map_, z, radius)
        else:
            base = _leaf_arc_from_phases(map_, leaf_phases, z, radius)
    # base approximant: filtration levels have full measure, so only the cut
    # positions depend on the depth; a shallow depth is recorded
    delta0_local = 6.0 * delta1_val   # local admissibility scale for the arc
    if depth > 0:
        filt = build_filtration(map_, base, min(depth, 8), delta0_local,
                                keep_levels=True)
        levels = ComponentSet(filt.levels[-1].intervals, depth)
    else:
        levels = base.components()
    return Rectangle(center=z, base_curve=base, base_levels=levels,
                     stable_radius=delta1_val, cs_width=delta2_val,
                     depth=depth, index=index)


def _leaf_arc_t_range(map_: Solenoid, phases, tlo: float, width: float,
                      nodes: int = 33):
    """Leaf arc over an explicit base-angle window [tlo, tlo+width]."""
    from .geom import SolenoidBatch
    batch = SolenoidBatch.from_leaf(map_, np.asarray(phases),
                                    (tlo + width / 2.0) % 1.0, width / 2.0,
                                    0.0, 1.0, nodes=nodes)
    batch.b = batch.node_s() + 0.0
    return UnstableCurve(map_, batch, float(batch.node_s()[-1]), 0)


def _leaf_arc_from_phases(map_: Solenoid, phases, z, arc_radius):
    from .geom import SolenoidBatch
    t0 = float(z[0]) % 1.0
    zp = map_.leaf_slope(np.asarray(phases), np.array(t0))
    local = float(np.hypot(1.0, np.abs(zp)))
    hw = 1.25 * arc_radius / local
    batch = SolenoidBatch.from_leaf(map_, np.asarray(phases), t0, hw, 0.0, 1.0,
                                    nodes=33)
    s = batch.node_s()
    mid = batch.arc_of_u(0, np.array([hw]))[0]
    lo_s, hi_s = mid - arc_radius, mid + arc_radius
    piece = batch.split_pieces([0], [np.array([max(lo_s, 1e-12),
                                               min(hi_s, s[-1] - 1e-12)])])
    take = piece.take(np.array([1]))
    take.b = take.node_s() + 0.0
    return UnstableCurve(map_, take, float(take.node_s()[-1]), 0)


@dataclass
class SubrectangleRef:
    """Restriction of a rectangle to the stable disks through a base subset."""
    rectangle: Rectangle
    base: np.ndarray      # (m, 2) intervals in the rectangle's base parameter


def s_subrectangle(rect: Rectangle, base_intervals) -> SubrectangleRef:
    iv = np.atleast_2d(np.asarray(base_intervals, dtype=np.float64))
    if iv.size:
        lo = rect.base_curve.components().intervals[0, 0]
        hi = rect.base_curve.components().intervals[-1, 1]
        if iv[:, 0].min() < lo - 1e-12 or iv[:, 1].max() > hi + 1e-12:
            raise ContainmentError("base subset escapes the rectangle base")
    return SubrectangleRef(rect, iv)


# ----------------------------------------------------------------------
# u-crossing
# ----------------------------------------------------------------------

def crossing_margins(map_: MapModel, curve: UnstableCurve, piece_idx: int,
                     target: Rectangle):
    """(covers, d_s, extend_left, extend_right) of one curve piece against
    the target's unstable window.

    covers is true when the piece's stable-direction projection covers the
    whole window; d_s is the sup of the stable offsets over the window;
    extend_* are the unstable-direction margins beyond the window.
    """
    if isinstance(map_, TorusAutomorphism):
        a, L_t = target.unstable_window(map_)
        lo = curve.batch.anchor[piece_idx]
        L = float(curve.batch.length[piece_idx])
        d = a - lo
        d -= np.round(d)
        u0 = float(d @ map_.dir_u)          # window start in piece arc coords
        off = float(d @ map_.dir_s)
        return (u0 >= 0.0 and u0 + L_t <= L), abs(off), u0, L - (u0 + L_t)
    tl_t, w_t = target.unstable_window(map_)
    tl = float(curve.batch.t_left()[piece_idx])
    w = float(curve.batch.width[piece_idx])
    dt = (tl_t - tl) % 1.0
    covers = dt <= w and (dt + w_t) <= w
    if not covers:
        return False, float("inf"), 0.0, 0.0
    tq = tl + dt + np.linspace(0.0, w_t, 9)
    z_piece = curve.batch.fiber_values(piece_idx, tq)
    z_targ = target.base_curve.batch.fiber_values(0, tq - dt - tl
                                                  + target.base_curve.batch.t_left()[0])
    d_s = float(np.max(np.abs(z_piece - z_targ)))
    # unstable margins in arc length
    sa = curve.batch.arc_of_u(piece_idx, np.array([dt, dt + w_t]))
    return True, d_s, float(sa[0]), float(curve.lengths()[piece_idx] - sa[1])


def u_crossing_test(map_: MapModel, curve: UnstableCurve, piece_idx: int,
                    target: Rectangle, eta: float = 0.0) -> bool:
    """True when the piece's image overshadows the target's base arc with
    stable distance <= delta2 and extends beyond it on both sides."""
    covers, d_s, ml, mr = crossing_margins(map_, curve, piece_idx, target)
    return bool(covers and d_s <= target.cs_width * (1 + 1e-9)
                and ml > eta and mr > eta)


# ----------------------------------------------------------------------
# net construction
# ----------------------------------------------------------------------

def c1_probe(map_: MapModel, delta1_val: float, delta2_val: float,
             samples: int = 400, seed: int = 0) -> float:
    """Largest c1 in {1, 1/2, 1/4, ...} such that sampled center pairs at
    distance < c1*delta2 overshadow each other's half arcs with stable
    distance <= delta2."""
    if samples < 100:
        raise PreconditionError("need at least 100 samples")
    if isinstance(map_, TorusAutomorphism):
        pts = map_.sample_attractor(samples, seed=seed)
        leaves = [None] * samples
    else:
        pts, leaves = map_.sample_attractor(samples, seed=seed, with_leaves=True)
    for c1 in (1.0, 0.5, 0.25, 0.125, 0.0625):
        ok = True
        rng = np.random.default_rng(seed + 1)
        for _ in range(samples):
            i, j = rng.integers(0, samples, 2)
            z, zp = pts[i], pts[j]
            # displace zp toward z to force d < c1*delta2
            d = map_.distance(z, zp)
            if d >= c1 * delta2_val:
                continue
            big = _arc(map_, z, delta1_val, leaves[i])
            small = _arc(map_, zp, delta1_val / 2.0, leaves[j])
            good, ds = overshadows(map_, small, big, reach=2 * delta1_val,
                                   samples=9)
            if not good or ds > delta2_val:
                ok = False
                break
        if ok:
            return c1
    raise ConfigurationError("no c1 in the probe grid verified; delta2 too large")


def _arc(map_, z, radius, phases):
    if isinstance(map_, TorusAutomorphism):
        anchor = np.mod(np.asarray(z) - radius * map_.dir_u, 1.0)
        return UnstableCurve.cat_segment(map_, anchor, 2 * radius)
    if phases is None:
        return UnstableCurve.leaf_arc(map_, z, radius)
    return _leaf_arc_from_phases(map_, phases, np.asarray(z), radius)


def build_net(map_: MapModel, delta3_val: float, budget: int,
              delta1_val: float, delta2_val: float, rect_depth: int = 4,
              seed: int = 0, burn_in: int = 10_000) -> RectangleNet:
    """Greedy net over a long attractor orbit: a sample becomes a center
    when no existing center is within delta3 of it.

    The pass is chunked for speed but replicates the sequential greedy
    exactly: each chunk is filtered against committed centers with a
    KD-tree, and the survivors are resolved against each other in orbit
    order.
    """
    from scipy.spatial import cKDTree
    if budget < 1:
        raise PreconditionError("budget must be >= 1")
    if isinstance(map_, TorusAutomorphism):
        pts = map_.sample_attractor(budget, seed=seed, burn_in=burn_in)
        leaves = None
    else:
        pts, leaves = map_.sample_attractor(budget, seed=seed,
                                            burn_in=burn_in, with_leaves=True)
    if pts.size == 0:
        raise SamplingError("empty attractor sample")

    periodic = isinstance(map_, TorusAutomorphism)
    emb_all = _embed(map_, pts)
    accepted = [0]
    committed = 1          # prefix of ``accepted`` covered by the tree
    tree = None
    chunk = 1024
    for lo in range(1, budget, chunk):
        hi = min(lo + chunk, budget)
        block = np.arange(lo, hi)
        recent = len(accepted) - committed
        if tree is None or recent > 4096:
            tree = cKDTree(emb_all[np.array(accepted)],
                           boxsize=1.0 if periodic else None)
            committed = len(accepted)
            recent = 0
        d, _ = tree.query(emb_all[block], distance_upper_bound=delta3_val)
        near = np.isfinite(d)
        if recent:
            # brute-force check against centers newer than the tree
            e_new = emb_all[np.array(accepted[committed:])]
            diff = emb_all[block][:, None, :] - e_new[None, :, :]
            if periodic:
                diff -= np.round(diff)
            dmin = np.min(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
            near |= dmin <= delta3_val ** 2
        survivors = block[~near]
        # sequential resolution within the chunk keeps the pass equivalent
        # to a pointwise greedy scan in orbit order
        if survivors.size:
            e = emb_all[survivors]
            diff = e[:, None, :] - e[None, :, :]
            if periodic:
                diff -= np.round(diff)
            adj = np.einsum("ijk,ijk->ij", diff, diff) <= delta3_val ** 2
            blocked = np.zeros(survivors.size, dtype=bool)
            for r in range(survivors.size):
                if not blocked[r]:
                    accepted.append(int(survivors[r]))
                    blocked |= adj[r]
    idx = np.array(accepted)
    net = RectangleNet(map_, pts[idx].copy(), delta3_val, delta1_val,
                       delta2_val, rect_depth,
                       None if leaves is None else leaves[idx].copy())
    return net


def net_coverage(net: RectangleNet, samples: int = 100_000, seed: int = 1):
    """Fraction of a fresh orbit sample within delta3 of some center."""
    pts = net.map.sample_attractor(samples, seed=seed)
    idx, _ = net.nearest_many(pts)
    return float(np.mean(idx >= 0))