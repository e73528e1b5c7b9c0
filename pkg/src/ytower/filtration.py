"""Nested filtrations of unstable disks with controlled boundary-mass growth.

The construction alternates a slicing pass (components whose current image
is too long are divided into equal sub-arcs) with one forward iterate of the
map.  The slicing thresholds are chosen so every level stays admissible and
the boundary-mass statistic obeys the one-step recursion

    Z_n <= alpha * Z_{n-1} + beta / delta0,   alpha = lambda, beta = 4,

whose iterate is the level bound checked by the acceptance suite.  The
derived quantities:

    n0        first depth at which Z_n provably falls below beta_bar/delta0,
    delta1    the clearance delta0/(2*beta_bar) giving the half-mass interior
              property at depths >= n0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .curves import (ComponentSet, UnstableCurve, iterate_components,
                     near_boundary_mass, z_statistic)
from .errors import DomainError, PreconditionError
from .geom import plan_cuts
from .maps import MapModel


def slicing_constants(map_: MapModel, delta0: float):
    """(alpha, beta, keep_threshold, spacing) for the slicing recursion.

    beta = 4 * d_u^{3/2} = 4.  The keep threshold and the cut spacing are
    delta0 * min(lambda, 1/E_max) and delta0 * min(lambda/sqrt(2), 1/E_max):
    with uniform expansion (E_max = 1/lambda, as for the linear torus map)
    these are the classical delta0*lambda and delta0*lambda/sqrt(2); with
    variable expansion the 1/E_max cap keeps every image admissible, and the
    cut-density arithmetic still lands below beta = 4 because
    2 * lambda * E_max <= 4 for every built-in map.
    """
    alpha = map_.lam
    beta = 4.0 * map_.d_u ** 1.5
    keep = delta0 * map_.keep_threshold_factor()
    spacing = delta0 * map_.slice_spacing_factor()
    return alpha, beta, keep, spacing


def n0_threshold(Z0: float, alpha: float, beta: float, delta0: float) -> int:
    """Depth after which the boundary-mass statistic is <= beta_bar/delta0.

    n0 = max(0, ceil(a*log(Z0) + b)) with a = -1/log(alpha) and
    b = max(0, log(delta0*(1-alpha)/beta)/log(alpha)); natural logs.
    """
    if Z0 <= 0:
        raise DomainError("Z0 must be positive")
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    a = -1.0 / np.log(alpha)
    b = max(0.0, np.log(delta0 * (1.0 - alpha) / beta) / np.log(alpha))
    return max(0, int(np.ceil(a * np.log(Z0) + b)))


def ab_constants(alpha: float, beta: float, delta0: float):
    a = -1.0 / np.log(alpha)
    b = max(0.0, np.log(delta0 * (1.0 - alpha) / beta) / np.log(alpha))
    return float(a), float(b)


def delta1(delta0: float, alpha: float, beta: float) -> float:
    """Interior clearance delta0 / (2 * beta_bar), beta_bar = 2*beta/(1-alpha).

    This is the largest clearance for which the bound Z_n <= beta_bar/delta0
    forces at least half of the mass to sit deeper than the clearance from
    the image boundary: (beta_bar/delta0) * delta1 = 1/2 identically.
    """
    if delta0 <= 0 or beta <= 0 or not 0 < alpha < 1:
        raise DomainError("need delta0, beta > 0 and alpha in (0,1)")
    beta_bar = 2.0 * beta / (1.0 - alpha)
    return delta0 / (2.0 * beta_bar)


@dataclass
class FiltrationConstants:
    alpha: float
    beta: float
    beta_bar: float
    delta0: float
    delta1: float
    a: float
    b: float
    n0: int


@dataclass
class Filtration:
    """Recorded levels of one filtration build."""
    base_mass: float
    constants: FiltrationConstants
    z_values: list = field(default_factory=list)        # Z_n per level
    bound_rhs: list = field(default_factory=list)       # recursion bound per level
    counts: list = field(default_factory=list)
    interior: list = field(default_factory=list)        # fraction > delta1
    levels: list | None = None                          # ComponentSets if kept
    final_curve: UnstableCurve | None = None
    final_components: ComponentSet | None = None

    @property
    def depth(self):
        return len(self.z_values) - 1


def refine_step(map_: MapModel, curve: UnstableCurve, components: ComponentSet,
                delta0: float):
    """One slicing pass at the current depth.

    Components whose image is longer than the keep threshold are divided
    into equal sub-arcs no longer than the cut spacing; short components
    pass through whole.  Cut points carry no mass, so the level keeps full
    measure.  Returns the refreshed (curve, components) pair.
    """
    _, _, keep, spacing = slicing_constants(map_, delta0)
    cut_s, pid = plan_cuts(curve.lengths(), keep, spacing)
    batch, _parent = curve.batch.split_many(cut_s, pid)
    out = UnstableCurve(map_, batch, curve.mass_total, curve.depth)
    return out, out.components()


def build_filtration(map_: MapModel, curve: UnstableCurve, n_max: int,
                     delta0: float, keep_levels: bool = False) -> Filtration:
    """Build the filtration to depth n_max, recording the level statistics.

    Level n consists of components whose depth-n images are admissible; the
    statistics recorded per level are exact on the node profiles: the
    boundary-mass statistic Z_n, the recursion bound, the component count,
    and the clearance fraction used by the interior property.
    """
    if n_max < 0:
        raise PreconditionError("n_max must be >= 0")
    alpha, beta, _, _ = slicing_constants(map_, delta0)
    z0 = z_statistic(curve)
    a, b = ab_constants(alpha, beta, delta0)
    consts = FiltrationConstants(
        alpha=alpha, beta=beta, beta_bar=2.0 * beta / (1.0 - alpha),
        delta0=delta0, delta1=delta1(delta0, alpha, beta),
        a=a, b=b, n0=n0_threshold(z0, alpha, beta, delta0))
    filt = Filtration(base_mass=curve.mass_total, constants=consts,
                      levels=[] if keep_levels else None)

    comps = curve.components()
    d1 = consts.delta1
    geom_sum = 0.0

    def record(cur, cc, n):
        nonlocal geom_sum
        zn = z_statistic(cur)
        filt.z_values.append(zn)
        filt.bound_rhs.append(alpha ** n * z0 + (beta / delta0) * geom_sum)
        filt.counts.append(cur.n_components)
        nm = near_boundary_mass(cur, d1)
        filt.interior.append(1.0 - nm / cur.mass_total)
        if filt.levels is not None:
            filt.levels.append(ComponentSet(cc.intervals.copy(), n))

    record(curve, comps, 0)
    for n in range(1, n_max + 1):
        geom_sum += alpha ** (n - 1)
        curve, comps = refine_step(map_, curve, comps, delta0)
        curve, comps = iterate_components(map_, curve, comps, 1)
        record(curve, comps, n)
    filt.final_curve = curve
    filt.final_components = comps
    return filt


def interior_fraction(filt: Filtration, n: int) -> float:
    """Fraction of level-n mass at image arc distance > delta1 from its
    component's boundary (recorded exactly at build time)."""
    if n > filt.depth:
        raise PreconditionError(f"level {n} beyond recorded depth {filt.depth}")
    return filt.interior[n]


def filtration_to_csv(filt: Filtration, path):
    rows = ["n,component_count,Z_n,bound_rhs,interior_fraction"]
    for n in range(filt.depth + 1):
        rows.append(f"{n},{filt.counts[n]},{filt.z_values[n]!r},"
                    f"{filt.bound_rhs[n]!r},{filt.interior[n]!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
