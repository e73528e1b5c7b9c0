"""Refinement of the auxiliary partitions into a single-base inducing scheme.

Given partitions of several canonical rectangles whose elements return onto
rectangles of the same family, the return system is the positive-mass
strongly connected, outward-closed family of the element -> target graph.
One rectangle becomes the base; cylinders are tracked under the return map
until their image crosses the base, accumulating stopping times

    S_j(x) = S_{j-1}(f^tau x) + S_1(x),   tau* = S_{k},

where k is the first level whose image is a u-subset of the base.

Two representations are used: exact breadth-first enumeration of the top
levels (cylinder masses partition their parents exactly) and a weighted
path population for the deep tail, resampled mass-proportionally, which the
(rectangle, element) -> child-fraction tables drive.  Child fractions are
the normalized element masses of the target's partition; the holonomy
density correction (a relative few-permille effect under the distortion
bounds) is folded into the reported resolution deficit.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSystemError, PreconditionError
from .partition import BuildResult
from .rectangles import RectangleNet
from .util import loglinear_fit, weighted_tail


@dataclass
class ReturnSystem:
    net: RectangleNet
    family: list                      # rectangle indices (net order)
    partitions: dict                  # rect -> BuildResult
    excluded_mass: float              # element mass dropped by restriction
    graph_mass: dict                  # (i, j) -> transition mass

    def tables(self):
        """Per-rectangle child tables: (mass fractions, taus, targets,
        resolved fraction)."""
        out = {}
        for r in self.family:
            res = self.partitions[r]
            masses = res.element_masses()
            taus = res.element_taus()
            targets = np.array([e.target for e in res.elements], dtype=np.int64)
            keep = np.isin(targets, self.family)
            resolved = float(masses[keep].sum()) / res.total_mass
            out[r] = {
                "frac": masses[keep] / max(masses[keep].sum(), 1e-300),
                "tau": taus[keep],
                "target": targets[keep],
                "resolved": resolved,
                "elements": [e for e, k in zip(res.elements, keep) if k],
            }
        return out


def select_subfamily(net: RectangleNet, partitions: dict) -> ReturnSystem:
    """Outward-closed strongly connected positive-mass rectangle family.

    Builds the element -> rectangle transition graph at element granularity
    and extracts a sink strongly-connected component of maximal mass; its
    rectangles' partitions are restricted to in-family elements.
    """
    hosts = sorted(partitions)
    edges = {}
    node_mass = {}
    for r in hosts:
        res = partitions[r]
        node_mass[r] = float(res.element_masses().sum()) if res.elements else 0.0
        for e in res.elements:
            edges[(r, e.target)] = edges.get((r, e.target), 0.0) + e.mass
    # Tarjan-free SCC via repeated closure (graphs here are tiny)
    import itertools
    nodes = sorted(set(hosts) | {j for _, j in edges})
    succ = {i: set() for i in nodes}
    for (i, j), m in edges.items():
        if m > 0:
            succ[i].add(j)
    # strongly connected components by label propagation
    def reach(start):
        seen = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for v in succ.get(u, ()):
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return seen
    fwd = {u: reach(u) for u in nodes}
    sccs = []
    assigned = set()
    for u in nodes:
        if u in assigned:
            continue
        comp = {v for v in fwd[u] if u in fwd.get(v, set())}
        sccs.append(sorted(comp))
        assigned |= comp
    # sink components: no edges leaving the component
    best = None
    for comp in sccs:
        cs = set(comp)
        if any(v not in cs for u in comp for v in succ.get(u, ())):
            continue
        if not all(u in partitions for u in comp):
            continue
        mass = sum(node_mass.get(u, 0.0) for u in comp)
        if mass <= 0:
            continue
        if best is None or mass > best[0]:
            best = (mass, comp)
    if best is None:
        raise DegenerateSystemError(
            "no positive-mass outward-closed strongly connected family")
    family = best[1]
    excluded = 0.0
    for r in family:
        for e in partitions[r].elements:
            if e.target not in family:
                excluded += e.mass
    gmass = {k: v for k, v in edges.items()
             if k[0] in family and k[1] in family}
    return ReturnSystem(net=net, family=list(family),
                        partitions={r: partitions[r] for r in family},
                        excluded_mass=excluded, graph_mass=gmass)


def strong_connectivity_certificate(system: ReturnSystem) -> bool:
    """Positive-mass path between every ordered rectangle pair."""
    fam = system.family
    succ = {i: {j for (a, j), m in system.graph_mass.items()
                if a == i and m > 0} for i in fam}
    for i in fam:
        seen = {i}
        stack = [i]
        while stack:
            u = stack.pop()
            for v in succ.get(u, ()):
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        if set(fam) - seen:
            return False
    return True


def choose_base(system: ReturnSystem) -> int:
    """Smallest-index rectangle with positive partition mass."""
    for r in sorted(system.family):
        if system.partitions[r].elements:
            return r
    raise DegenerateSystemError("no rectangle with positive mass")


@dataclass
class RefinedElement:
    k: int
    tau_star: int
    s_list: tuple          # S_1 < ... < S_k
    path: tuple            # (rect, element index) per level
    mass: float

    def recursion_holds(self) -> bool:
        inc = np.diff(np.concatenate([[0], np.array(self.s_list)]))
        return bool(np.all(inc > 0)) and self.tau_star == self.s_list[-1]


@dataclass
class RefineResult:
    base: int
    total_mass: float
    refined: list             # RefinedElement records (weighted sample)
    leftover_alive: float     # mass alive past depth_max
    leftover_unresolved: float
    depth_max: int
    level_stats: list         # per level: (at_risk, stopped, n_cylinders)
    increments: list          # (level, tau_increment, mass)

    @property
    def leftover(self):
        return self.leftover_alive + self.leftover_unresolved

    def tau_star_tail(self, n_max: int):
        taus = np.array([r.tau_star for r in self.refined])
        masses = np.array([r.mass for r in self.refined])
        taus = np.concatenate([taus, [n_max + 1]])
        masses = np.concatenate([masses, [self.leftover]])
        return weighted_tail(taus, masses, n_max)


def refine(system: ReturnSystem, base: int, depth_max: int = 40,
           population: int = 20_000, seed: int = 0) -> RefineResult:
    """Stopping-time refinement by a weighted path population.

    Cylinders are tracked as weighted paths through the family's element
    tables; a cylinder stops and is emitted when its level's return targets
    the base rectangle (its image is then a u-subset of the base by the
    Markov property of the auxiliary partitions).  Mass alive past
    depth_max, plus the mass falling into unresolved parts of the
    partitions, is leftover.
    """
    if depth_max < 1:
        raise PreconditionError("depth_max must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=[21, base]))
    tables = system.tables()
    base_total = system.partitions[base].total_mass

    n = population
    weight = np.full(n, base_total / n)
    S = np.zeros(n, dtype=np.int64)
    # per-particle chains as object arrays of linked tuples
    s_chain = np.empty(n, dtype=object)
    s_chain[:] = None
    p_chain = np.empty(n, dtype=object)
    p_chain[:] = None
    rect = np.full(n, base, dtype=np.int64)
    alive = np.ones(n, dtype=bool)

    refined: list[RefinedElement] = []
    leftover_unresolved = 0.0
    level_stats = []
    increments = []

    for level in range(1, depth_max + 1):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        at_risk = float(weight[idx].sum())
        stopped_mass = 0.0
        # group by current rectangle for vectorized draws
        for r in sorted(set(rect[idx].tolist())):
            sub = idx[rect[idx] == r]
            tab = tables[r]
            if tab["frac"].size == 0:
                leftover_unresolved += float(weight[sub].sum())
                alive[sub] = False
                continue
            # unresolved fraction of this rectangle's partition
            res = tab["resolved"]
            u = rng.random(sub.size)
            lost = u >= res
            if lost.any():
                leftover_unresolved += float(weight[sub[lost]].sum())
                alive[sub[lost]] = False
                sub = sub[~lost]
            if sub.size == 0:
                continue
            draws = rng.choice(tab["frac"].size, size=sub.size,
                               p=tab["frac"])
            inc = tab["tau"][draws]
            S[sub] += inc
            for j, d, i_inc in zip(sub, draws, inc):
                s_chain[j] = (s_chain[j], int(S[j]))
                p_chain[j] = (p_chain[j], (int(r), int(d)))
                increments.append((level, int(i_inc), float(weight[j])))
            tgt = tab["target"][draws]
            stop = tgt == base
            for j in sub[stop]:
                refined.append(RefinedElement(
                    k=level, tau_star=int(S[j]),
                    s_list=_unwind(s_chain[j]), path=_unwind(p_chain[j]),
                    mass=float(weight[j])))
            stopped_mass += float(weight[sub[stop]].sum())
            alive[sub[stop]] = False
            rect[sub[~stop]] = tgt[~stop]
        level_stats.append((at_risk, stopped_mass, int(idx.size)))

    leftover_alive = float(weight[alive].sum())
    return RefineResult(base=base, total_mass=base_total, refined=refined,
                        leftover_alive=leftover_alive,
                        leftover_unresolved=leftover_unresolved,
                        depth_max=depth_max, level_stats=level_stats,
                        increments=increments)


def _unwind(chain):
    out = []
    while chain is not None:
        chain, v = chain
        out.append(v)
    return tuple(reversed(out))


def enumerate_cylinders(system: ReturnSystem, base: int, levels: int,
                        max_nodes: int = 200_000):
    """Exact breadth-first cylinder tables for the top levels.

    Returns per level a dict with arrays (mass, S, rect, stopped); cylinder
    masses at each level partition their parents exactly (fractions are the
    normalized element masses), which the partition-property test checks.
    """
    tables = system.tables()
    base_total = system.partitions[base].total_mass
    cur = {"mass": np.array([base_total]), "S": np.array([0]),
           "rect": np.array([base]), "stopped": np.array([False])}
    out = []
    max_branch = max((tab["frac"].size for tab in tables.values()), default=0)
    for _ in range(levels):
        if cur["mass"].size * max(max_branch, 1) > max_nodes:
            break
        masses, Ss, rects, stops = [], [], [], []
        for m, S0, r in zip(cur["mass"], cur["S"], cur["rect"]):
            tab = tables[int(r)]
            if tab["frac"].size == 0:
                continue
            w = m * tab["frac"] * tab["resolved"]
            masses.append(w)
            Ss.append(S0 + tab["tau"])
            rects.append(tab["target"])
            stops.append(tab["target"] == base)
        if not masses:
            break
        nxt = {"mass": np.concatenate(masses), "S": np.concatenate(Ss),
               "rect": np.concatenate(rects), "stopped": np.concatenate(stops)}
        out.append(nxt)
        keep = ~nxt["stopped"]
        cur = {k: v[keep] for k, v in nxt.items()}
        if cur["mass"].size > max_nodes:
            break
    return out


def verify_tail_conditions(result: RefineResult, min_cylinders: int = 10):
    """Per-level stop fractions and increment tail fit.

    Returns (epsilon2, per_level, increment_fit): epsilon2 is the minimum
    stop fraction over levels with enough cylinders; the increment fit is
    the log-linear tail fit of the pooled stopping-time increments.
    """
    fracs = []
    per_level = []
    for j, (at_risk, stopped, ncyl) in enumerate(result.level_stats, start=1):
        frac = stopped / at_risk if at_risk > 0 else 0.0
        per_level.append((j, at_risk, stopped, ncyl, frac))
        if ncyl >= min_cylinders and at_risk > 0:
            fracs.append(frac)
        elif ncyl < min_cylinders:
            warnings.warn(f"level {j}: only {ncyl} cylinders", stacklevel=2)
    eps2 = min(fracs) if fracs else 0.0
    inc = np.array([(i, w) for _, i, w in result.increments])
    if inc.size:
        n_max = int(inc[:, 0].max())
        tail = weighted_tail(inc[:, 0].astype(np.int64), inc[:, 1], n_max)
        total = tail[0] if tail[0] > 0 else 1.0
        # fit over the well-populated range (below it the path sample is
        # dominated by a handful of atoms)
        floor = max(inc[:, 1].min() * 30.0, total * 1e-6)
        good = tail > floor
        fit = loglinear_fit(np.arange(n_max + 1)[good], tail[good])
    else:
        fit = (0.0, 1.0, 0.0)
    return eps2, per_level, fit


def tail_fit_star(result: RefineResult, fit_from: int, n_max: int):
    """Exact tau* tail masses and the log-linear fit over the range above
    the truncation floor."""
    from .partition import TailReport
    tail = result.tau_star_tail(n_max)
    n = np.arange(n_max + 1)
    win = (n >= fit_from) & (tail > max(3.0 * result.leftover, 0.0))
    if win.sum() < 5:
        win = (n >= fit_from) & (tail > 0)
    C, theta, r2 = loglinear_fit(n[win], tail[win])
    return TailReport(n=n, mass=tail, C=C, theta=theta, r2=r2,
                      leftover=result.leftover, total=result.total_mass)


def refined_to_json(result: RefineResult, path):
    data = {
        "base": result.base,
        "depth_max": result.depth_max,
        "leftover_alive": result.leftover_alive,
        "leftover_unresolved": result.leftover_unresolved,
        "elements": [
            {"k": r.k, "tau_star": r.tau_star,
             "S": list(r.s_list), "mass": r.mass}
            for r in result.refined[:20000]
        ],
    }
    with open(path, "w") as fh:
        json.dump(data, fh, sort_keys=True, indent=1)
