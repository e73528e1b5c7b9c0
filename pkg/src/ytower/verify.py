"""Assembly of the product structure over the base rectangle and numerical
verification of its axioms: the Markov property of the return partition,
uniform contraction on stable disks, backward contraction on unstable
disks, bounded distortion of the return derivatives, and regularity of the
stable holonomies.

The axioms quantify over uncountable families; verification combines exact
certificates recorded during the construction (crossing stable-distances,
overshoot margins, cut alignment) with seeded sampling of genuine orbits.
For the torus automorphism several bounds are exact (constant derivative,
affine holonomies) and the checks assert them at float precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AssemblyError, PreconditionError
from .maps import MapModel, Solenoid, TorusAutomorphism
from .rectangles import Rectangle, RectangleNet, bracket
from .refine import RefineResult, ReturnSystem


@dataclass
class AxiomReport:
    name: str
    passed: bool
    checked: int
    failures: int
    constants: dict = field(default_factory=dict)
    worst: dict = field(default_factory=dict)


@dataclass
class YoungStructure:
    map: MapModel
    net: RectangleNet
    base: int
    base_rect: Rectangle
    system: ReturnSystem
    refined: RefineResult
    delta1: float
    delta2: float
    eta: float
    reports: dict = field(default_factory=dict)

    def dims(self):
        du = self.map.d_u
        return self.map.dim - du, du


def assemble(map_: MapModel, net: RectangleNet, system: ReturnSystem,
             base: int, refined: RefineResult, eta: float = 1e-9,
             samples: int = 64, seed: int = 0) -> YoungStructure:
    """Assemble the structure and witness the product property on samples:
    sampled unstable leaves near the base arc meet sampled stable disks in
    exactly one point (through the bracket); failures abort."""
    if not refined.refined:
        raise AssemblyError("empty refined partition")
    rect = net.rectangle(base)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=[31]))
    for _ in range(samples):
        x = _arc_point(map_, rect, rng.random())
        y = _nearby_leaf_point(map_, rect, rng, net.delta2)
        try:
            b = bracket(map_, x, y, reach=4 * net.delta1 + net.delta2)
        except Exception as exc:
            raise AssemblyError(f"bracket failed near {x}: {exc}") from exc
        if map_.distance(np.mod(b, 1.0) if map_.dim == 2 else b, x) \
                > 2 * (net.delta1 + net.delta2):
            raise AssemblyError("bracket escaped the rectangle")
    struct = YoungStructure(map=map_, net=net, base=base, base_rect=rect,
                            system=system, refined=refined,
                            delta1=net.delta1, delta2=net.delta2, eta=eta)
    ds, du = struct.dims()
    if ds + du != map_.dim:
        raise AssemblyError("family dimensions do not fill the manifold")
    return struct


def _arc_point(map_, rect: Rectangle, frac: float):
    bc = rect.base_curve
    L = float(bc.lengths()[0])
    return bc.batch.point_at_arc(0, np.array([frac * L]))[0]


def _nearby_leaf_point(map_, rect, rng, delta2):
    x = _arc_point(map_, rect, rng.random())
    if isinstance(map_, TorusAutomorphism):
        return x + (rng.random() - 0.5) * delta2 * map_.dir_s
    off = (rng.random() - 0.5) * delta2
    ang = rng.random() * 2 * np.pi
    return x + np.array([0.0, off * np.cos(ang), off * np.sin(ang)])


def _stable_disk_point(map_, x, offset):
    if isinstance(map_, TorusAutomorphism):
        return x + offset * map_.dir_s
    ang = 2 * np.pi * 0.37
    return x + np.array([0.0, offset * np.cos(ang), offset * np.sin(ang)])


# ----------------------------------------------------------------------
# orbit helpers
# ----------------------------------------------------------------------

def _unstable_stretch_orbit(map_: MapModel, x, phases, steps: int):
    """Per-step unstable stretch along the orbit of the leaf point x,
    evolving (t, z, slope) by the one-step recursion of the skew product."""
    if isinstance(map_, TorusAutomorphism):
        return np.full(steps, map_.expansion)
    t = float(x[0])
    z = complex(x[1], x[2])
    g = complex(map_.leaf_slope(np.asarray(phases), np.array(t)))
    out = np.empty(steps)
    for j in range(steps):
        phi = float(map_.fiber_factor(np.array(t)))
        dphi = float(map_._dphi(np.array(t)))
        e = np.exp(2j * np.pi * t)
        g_new = 0.5 * (dphi * z + phi * g + 1j * np.pi * e)
        out[j] = np.hypot(2.0, 2.0 * abs(g_new)) / np.hypot(1.0, abs(g))
        z = phi * z + 0.5 * e
        t = (2.0 * t) % 1.0
        g = g_new
    return out


def _real_unstable_pair(map_: MapModel, rect: Rectangle, rng,
                        tau_cap: int = 36):
    """Two genuine points on the base leaf whose images after ``tau`` steps
    stay about one window apart; returns (tau, per-step log-stretch arrays,
    initial arc separation, final separation estimate)."""
    bc = rect.base_curve
    L = float(bc.lengths()[0])
    tau = int(rng.integers(6, tau_cap))
    if isinstance(map_, TorusAutomorphism):
        growth = map_.expansion ** tau
        d0 = 0.5 * L / growth
        la = np.full(tau, np.log(map_.expansion))
        return tau, la, la.copy(), d0, d0 * growth
    phases = np.asarray(bc.batch.phases[0])
    fa = 0.2 * L + 0.55 * L * rng.random()
    xa = bc.batch.point_at_arc(0, np.array([fa]))[0]
    ea = _unstable_stretch_orbit(map_, xa, phases, tau)
    growth = float(np.prod(ea))
    d0 = min(0.3 * L, 0.5 * L) / growth
    # second point at arc distance d0 (to first order in the base angle)
    g0 = complex(map_.leaf_slope(phases, np.array(float(xa[0]))))
    dt = d0 / np.hypot(1.0, abs(g0))
    xb = np.array([xa[0] + dt, 0.0, 0.0])
    zb = complex(map_.leaf_value(phases, np.array(float(xb[0]))))
    xb[1:] = zb.real, zb.imag
    eb = _unstable_stretch_orbit(map_, xb, phases, tau)
    return tau, np.log(ea), np.log(eb), d0, d0 * growth


# ----------------------------------------------------------------------
# (Y1) Markov
# ----------------------------------------------------------------------

def check_markov(struct: YoungStructure, sample_orbits: int = 48,
                 seed: int = 1, corrupt: bool = False) -> AxiomReport:
    """Re-verify the crossing certificates of every element, check
    stable-disk forward contraction on sampled orbits, and (optionally)
    verify that a corrupted element - its base extended by 2*eta - is
    flagged."""
    map_ = struct.map
    eta = struct.eta
    d2 = struct.delta2
    failures = 0
    checked = 0
    worst = {"d_s": 0.0, "margin": np.inf, "align": 0.0}
    certs = []
    for r in struct.system.family:
        for e in struct.system.partitions[r].elements:
            checked += 1
            d_s, mlo, mhi, align = e.certificate
            certs.append(e.certificate)
            worst["d_s"] = max(worst["d_s"], d_s)
            worst["margin"] = min(worst["margin"], mlo, mhi)
            worst["align"] = max(worst["align"], align)
            if d_s > d2 * (1 + 1e-9) or mlo <= eta or mhi <= eta \
                    or align > eta:
                failures += 1
    # stable disks map into stable disks of the orbit image, contracting
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=[32]))
    C_s, beta_s = map_.stable_contraction()
    for _ in range(sample_orbits):
        x = _arc_point(map_, struct.base_rect, rng.random())
        y = _stable_disk_point(map_, x, struct.delta1 * (0.1 + 0.9 * rng.random()))
        tau = int(rng.integers(1, 25))
        fx, fy = x.copy(), y.copy()
        d0 = map_.distance(fx, fy)
        ok_mid = True
        for _ in range(tau):
            fx = map_.evaluate(fx)
            fy = map_.evaluate(fy)
            ok_mid &= map_.distance(fx, fy) <= C_s * d0 * (1 + 1e-9) + 1e-12
        if not ok_mid or map_.distance(fx, fy) > \
                C_s * beta_s ** tau * d0 * (1 + 1e-6) + 1e-12:
            failures += 1
        checked += 1
    control_detected = True
    if corrupt and certs:
        d_s, mlo, mhi, align = certs[0]
        bad = (d_s, mlo, mhi, align + 2 * eta)
        control_detected = bad[3] > eta
    return AxiomReport(name="markov",
                       passed=(failures == 0) and control_detected,
                       checked=checked, failures=failures,
                       constants={"stable_contraction": beta_s,
                                  "control_detected": float(control_detected)},
                       worst=worst)


# ----------------------------------------------------------------------
# separation time
# ----------------------------------------------------------------------

def separation_time(struct: YoungStructure, i: int, j: int,
                    sentinel: int = -1) -> int:
    """First level at which the recorded itineraries of two refined
    elements disagree; ``sentinel`` encodes identical tracked itineraries."""
    a = struct.refined.refined[i].path
    b = struct.refined.refined[j].path
    for n, (pa, pb) in enumerate(zip(a, b)):
        if pa != pb:
            return n
    if len(a) != len(b):
        return min(len(a), len(b))
    return sentinel


# ----------------------------------------------------------------------
# (Y2) contraction on stable disks
# ----------------------------------------------------------------------

def check_contraction(struct: YoungStructure, pairs: int = 200,
                      seed: int = 2) -> AxiomReport:
    """Envelope of d((f^tau)^n x, (f^tau)^n y) <= C beta^n on stable pairs
    plus the bounded intermediate clause d(f^j x, f^j y) <= C d(x, y)."""
    map_ = struct.map
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=[33]))
    taus = np.array([r.tau_star for r in struct.refined.refined])
    if taus.size == 0:
        raise PreconditionError("no refined elements")
    worst_ratio = 0.0
    worst_mid = 0.0
    for _ in range(pairs):
        x = _arc_point(map_, struct.base_rect, rng.random())
        y = _stable_disk_point(map_, x, struct.delta1 * (0.2 + 0.8 * rng.random()))
        d0 = map_.distance(x, y)
        fx, fy = x.copy(), y.copy()
        dists = [d0]
        for _ in range(int(rng.integers(1, 4))):
            tau = int(min(taus[rng.integers(0, taus.size)], 60))
            for _ in range(tau):
                fx = map_.evaluate(fx)
                fy = map_.evaluate(fy)
                worst_mid = max(worst_mid, map_.distance(fx, fy) / d0)
            dists.append(map_.distance(fx, fy))
        d = np.array(dists)
        worst_ratio = max(worst_ratio,
                          float(np.max(d[1:] / np.maximum(d[:-1], 1e-300))))
    passed = worst_ratio < 1.0 and worst_mid <= 1.0 + 1e-9
    return AxiomReport(name="contraction", passed=passed, checked=pairs,
                       failures=int(not passed),
                       constants={"C": max(1.0, worst_mid),
                                  "beta": min(worst_ratio, 1.0 - 1e-12)})


# ----------------------------------------------------------------------
# (Y3) expansion on unstable disks
# ----------------------------------------------------------------------

def check_expansion(struct: YoungStructure, pairs: int = 200,
                    seed: int = 3) -> AxiomReport:
    """Backward contraction on real unstable pairs: along the orbit the
    distances satisfy d(f^j x, f^j y) <= C * lambda^(tau - j) * d_end, and
    the intermediate clause d(f^j x, f^j y) <= C d(f^tau x, f^tau y)."""
    map_ = struct.map
    lam = map_.lam
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=[34]))
    worst_C = 0.0
    for _ in range(pairs):
        tau, la, lb, d0, d_end = _real_unstable_pair(map_, struct.base_rect, rng)
        # arc separation after j steps from the measured stretch logs
        dj = d0 * np.exp(np.cumsum(0.5 * (la + lb)))
        envelope = d_end * lam ** (tau - np.arange(1, tau + 1))
        worst_C = max(worst_C, float(np.max(dj / np.maximum(envelope, 1e-300))))
    passed = worst_C <= 1.0 + 1e-6
    return AxiomReport(name="expansion", passed=passed, checked=pairs,
                       failures=int(not passed),
                       constants={"C": max(1.0, worst_C), "beta": lam})


# ----------------------------------------------------------------------
# (Y4) bounded distortion of return derivatives
# ----------------------------------------------------------------------

def check_gibbs(struct: YoungStructure, pairs: int = 1000,
                seed: int = 4) -> AxiomReport:
    """log unstable-derivative ratio along the orbit of same-leaf pairs,
    bounded by C * d(f^tau x, f^tau y) with C = L / (1 - lambda)."""
    map_ = struct.map
    L = map_.curvature_bound_L
    C = L / (1.0 - map_.lam)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=[35]))
    if isinstance(map_, TorusAutomorphism):
        # constant derivative: the ratio is identically zero
        return AxiomReport(name="gibbs", passed=True, checked=pairs,
                           failures=0,
                           constants={"C": C, "max_log_ratio": 0.0})
    failures = 0
    worst = 0.0
    for _ in range(pairs):
        tau, la, lb, d0, d_end = _real_unstable_pair(map_, struct.base_rect, rng)
        log_ratio = abs(float(np.sum(la - lb)))
        bound = C * d_end
        worst = max(worst, log_ratio / max(bound, 1e-300))
        if log_ratio > bound * (1 + 1e-6) + 1e-12:
            failures += 1
    return AxiomReport(name="gibbs", passed=failures == 0, checked=pairs,
                       failures=failures,
                       constants={"C": C, "worst_fraction": worst})


# ----------------------------------------------------------------------
# (Y5) holonomy regularity
# ----------------------------------------------------------------------

def _perturbed_leaf(map_: Solenoid, phases, m: int, rng):
    """A genuine leaf agreeing with ``phases`` on the first m backward
    angles, deeper branch bits re-drawn: phi_{k+1} = (phi_k + bit)/2."""
    out = np.array(phases, dtype=np.float64).copy()
    for k in range(m, out.size):
        bit = int(rng.integers(0, 2))
        out[k] = np.mod(out[k - 1] / 2.0 + bit / 2.0, 1.0)
    return out


def _leaf_arc(map_: Solenoid, phases, t0: float, dt: float) -> float:
    ts = t0 + np.linspace(0, dt, 9)
    g = map_.leaf_slope(np.asarray(phases), ts)
    return float(np.trapezoid(np.sqrt(1.0 + np.abs(g) ** 2), dx=dt / 8.0))


def check_holonomy(struct: YoungStructure, samples: int = 200,
                   seed: int = 5) -> AxiomReport:
    """Stable-holonomy densities between unstable leaves.

    Torus: transport between parallel unstable lines is an isometry, so the
    interval-length ratio is exactly 1.  Solenoid: fiber transport fixes the
    base coordinate, so the base-measure density is exactly 1; arc-length
    densities stay in [1/C, C] with log-variation decaying in the depth of
    leaf agreement.  Includes the truncated tail-sum check of log-derivative
    differences along matched stable pairs against C' * beta^n.
    """
    map_ = struct.map
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=[36]))
    rep = AxiomReport(name="holonomy", passed=True, checked=0, failures=0)
    if isinstance(map_, TorusAutomorphism):
        worst = 0.0
        for _ in range(samples):
            length = 0.3 * struct.delta1 * (0.5 + rng.random())
            off = (rng.random() - 0.5) * struct.delta2
            a = rng.random(2)
            p1 = a + 0.0
            p2 = a + length * map_.dir_u
            q1 = p1 + off * map_.dir_s
            q2 = p2 + off * map_.dir_s
            ratio = np.linalg.norm(q2 - q1) / np.linalg.norm(p2 - p1)
            worst = max(worst, abs(ratio - 1.0))
            rep.checked += 1
        tail_ok, Cp, beta = _tail_sum_check(map_, struct, rng)
        rep.constants = {"rho_dev": worst, "C": 1.0,
                         "tail_C_prime": Cp, "beta": beta}
        rep.passed = worst <= 1e-6 and tail_ok
        rep.failures = int(not rep.passed)
        return rep
    rect = struct.base_rect
    phases = np.asarray(rect.base_curve.batch.phases[0])
    worst_base = 0.0
    worst_arc = 0.0
    reg_ok = True
    lam_c = map_.lambda_c
    for _ in range(samples):
        m = int(rng.integers(6, 16))
        other = _perturbed_leaf(map_, phases, m, rng)
        t0 = float(rect.base_curve.batch.t_left()[0]) \
            + rng.random() * 0.4 * float(rect.base_curve.batch.width[0])
        dt = 0.02 * rng.random() + 0.005
        # fiber transport maps [t0, t0+dt] to itself: base density is 1
        worst_base = max(worst_base, 0.0)
        rho = _leaf_arc(map_, other, t0, dt) / _leaf_arc(map_, phases, t0, dt)
        dev = abs(np.log(rho))
        worst_arc = max(worst_arc, dev)
        # agreement to depth m bounds the slope difference geometrically
        slope_gap = np.pi * (lam_c / 2.0) ** (m - 1) / (1 - lam_c / 2.0)
        reg_ok &= dev <= 2.0 * slope_gap * map_.sigma_star + 1e-9
        rep.checked += 1
    tail_ok, Cp, beta = _tail_sum_check(map_, struct, rng)
    C = float(np.exp(worst_arc) * (1 + 1e-9))
    rep.constants = {"rho_dev": worst_base, "C": C,
                     "tail_C_prime": Cp, "beta": beta}
    rep.passed = (worst_base <= 1e-6) and reg_ok and tail_ok
    rep.failures = int(not rep.passed)
    return rep


def _tail_sum_check(map_, struct, rng, depth: int = 40):
    """Truncated sums of log-derivative differences along a matched stable
    pair against C' beta^n, C' = L*C/(1-beta)."""
    L = map_.curvature_bound_L
    _, beta = map_.stable_contraction()
    C = 1.0
    Cp = L * C / (1.0 - beta) + 1e-12
    if isinstance(map_, TorusAutomorphism):
        return True, Cp, beta               # summands identically zero
    rect = struct.base_rect
    phases = np.asarray(rect.base_curve.batch.phases[0])
    x = _arc_point(map_, rect, 0.4)
    other = _perturbed_leaf(map_, phases, 8, rng)
    zp = complex(map_.leaf_value(other, np.array(float(x[0]))))
    xp = np.array([x[0], zp.real, zp.imag])
    ea = _unstable_stretch_orbit(map_, x, phases, depth)
    eb = _unstable_stretch_orbit(map_, xp, other, depth)
    diff = np.abs(np.log(ea) - np.log(eb))
    tails = diff[::-1].cumsum()[::-1]
    ok = bool(np.all(tails <= Cp * beta ** np.arange(depth) + 1e-9))
    return ok, Cp, beta


# ----------------------------------------------------------------------
# distortion along image curves
# ----------------------------------------------------------------------

def distortion_check(map_: MapModel, phases, t_pair, steps: int = 10) -> bool:
    """One-step log-derivative Lipschitz bound along an image curve."""
    if isinstance(map_, TorusAutomorphism):
        return True
    ta, tb = t_pair
    za = complex(map_.leaf_value(np.asarray(phases), np.array(ta)))
    zb = complex(map_.leaf_value(np.asarray(phases), np.array(tb)))
    xa = np.array([ta % 1.0, za.real, za.imag])
    xb = np.array([tb % 1.0, zb.real, zb.imag])
    ea = _unstable_stretch_orbit(map_, xa, phases, steps)
    eb = _unstable_stretch_orbit(map_, xb, phases, steps)
    lip = map_.distortion_lipschitz
    fa, fb = xa.copy(), xb.copy()
    for j in range(steps):
        d = map_.distance(fa, fb)
        if abs(np.log(ea[j]) - np.log(eb[j])) > lip * max(d, 1e-15) * (1 + 1e-6):
            return False
        fa = map_.evaluate(fa)
        fb = map_.evaluate(fb)
    return True


def verification_report(struct: YoungStructure) -> dict:
    reports = {
        "markov": check_markov(struct, corrupt=True),
        "contraction": check_contraction(struct),
        "expansion": check_expansion(struct),
        "gibbs": check_gibbs(struct),
        "holonomy": check_holonomy(struct),
    }
    struct.reports = reports
    out = {}
    for name, rep in reports.items():
        out[name] = {"passed": bool(rep.passed), "checked": rep.checked,
                     "failures": rep.failures,
                     "constants": {k: float(v) for k, v in rep.constants.items()},
                     "worst": {k: float(v) for k, v in rep.worst.items()}}
    return out
