"""Concrete partially hyperbolic maps: evaluation, derivatives, invariant
directions, stable disks, and the hyperbolicity constants the construction
needs.

Three built-in families:

* ``linear-cat``     -- the toral automorphism [[2,1],[1,1]] on T^2;
* ``solenoid``       -- angle doubling with fiber map z -> lc*z + e^{2 pi i t}/2
                        on the solid torus S^1 x D^2;
* ``mostly-contracting`` -- solenoid variant whose fiber factor
                        lc*(1 + kappa*cos 2 pi t) varies with the base point.

Points are float arrays: (x, y) in [0,1)^2 for the torus, (t, Re z, Im z)
for the solid torus.  For the solenoid family the base angle of tracked
objects is kept on the exact integer grid of :mod:`ytower.util` wherever
long orbits matter; the float API here is for pointwise queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, UnsupportedMapError

SQRT5 = np.sqrt(5.0)

#: number of backward terms kept when reconstructing an unstable leaf
LEAF_DEPTH = 28


@dataclass
class StableDisk:
    """Closed-form local stable disk descriptor.

    kind = "segment": straight segment center + s*direction, |s| <= radius.
    kind = "fiber":   disk {t} x B(z, radius) in a fiber of the solid torus.
    """
    kind: str
    center: np.ndarray
    radius: float
    direction: np.ndarray | None = None

    def point(self, s: float) -> np.ndarray:
        if self.kind != "segment":
            raise UnsupportedMapError("parameterized points only for segment disks")
        return self.center + s * self.direction


class MapModel:
    """Base interface; all operations are pure and instances are immutable."""

    name: str
    dim: int
    d_u: int = 1
    lam: float            # partial hyperbolicity constant, 0 < lam < 1
    curvature_bound_L: float
    domain: str
    parameters: dict

    # -- core dynamics -------------------------------------------------
    def evaluate(self, x):
        raise NotImplementedError

    def evaluate_many(self, X):
        return np.array([self.evaluate(x) for x in np.asarray(X)])

    def tangent_action(self, x, v):
        raise NotImplementedError

    def unstable_direction(self, x):
        raise NotImplementedError

    def unstable_expansion(self, x):
        """Stretch factor of Df at x along the unstable leaf direction."""
        u = self.unstable_direction(x)
        return float(np.linalg.norm(self.tangent_action(x, u)))

    def stable_disk(self, x, radius) -> StableDisk:
        raise UnsupportedMapError(f"{self.name} has no analytic stable family")

    def cs_norm(self, x) -> float:
        """||Df|E^cs|| at x."""
        raise NotImplementedError

    def cs_lyapunov_estimate(self, x, n: int) -> float:
        """(1/n) log ||Df^n|E^cs||, accumulated as a running log-sum."""
        if n < 1:
            raise DomainError("n must be >= 1")
        acc = 0.0
        y = np.asarray(x, dtype=np.float64)
        for _ in range(n):
            acc += np.log(self.cs_norm(y))
            y = self.evaluate(y)
        return acc / n

    # -- geometry helpers ----------------------------------------------
    def distance(self, x, y) -> float:
        raise NotImplementedError

    def expansion_bounds(self):
        """Provable (E_min, E_max) for the stretch along unstable leaves."""
        raise NotImplementedError

    def stable_contraction(self):
        """(C, beta) with diam(f^n(disk)) <= C * beta^n * diam(disk)."""
        raise NotImplementedError

    def sample_attractor(self, n, seed=0, burn_in=10_000):
        raise NotImplementedError

    def min_splitting_angle_sin(self) -> float:
        """sin of the minimum angle between E^cs and E^uu (the constant c')."""
        raise NotImplementedError

    # derived slicing constants (d_u = 1); see filtration module
    def keep_threshold_factor(self) -> float:
        """Components of current length <= factor * delta0 stay whole."""
        e_min, e_max = self.expansion_bounds()
        return min(self.lam, 1.0 / e_max)

    def slice_spacing_factor(self) -> float:
        """Cut spacing = factor * delta0; images of pieces stay admissible."""
        e_min, e_max = self.expansion_bounds()
        return min(self.lam / np.sqrt(2.0), 1.0 / e_max)


# ----------------------------------------------------------------------
# linear-cat
# ----------------------------------------------------------------------

class TorusAutomorphism(MapModel):
    """The hyperbolic toral automorphism [[2,1],[1,1]] on T^2."""

    def __init__(self):
        self.name = "linear-cat"
        self.dim = 2
        self.domain = "torus T^2"
        self.parameters = {}
        self.matrix = np.array([[2.0, 1.0], [1.0, 1.0]])
        self.inv_matrix = np.array([[1.0, -1.0], [-1.0, 2.0]])
        self.expansion = (3.0 + SQRT5) / 2.0
        self.contraction = (3.0 - SQRT5) / 2.0
        self.lam = self.contraction            # = 1/expansion = 2/(3+sqrt5)
        self.curvature_bound_L = 0.0
        self.distortion_lipschitz = 0.0        # derivative is constant
        self.slope_u = (SQRT5 - 1.0) / 2.0
        self.slope_s = -(SQRT5 + 1.0) / 2.0
        self.dir_u = np.array([1.0, self.slope_u]) / np.hypot(1.0, self.slope_u)
        self.dir_s = np.array([1.0, self.slope_s]) / np.hypot(1.0, self.slope_s)

    def evaluate(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (2,) or not np.all(np.isfinite(x)):
            raise DomainError(f"not a torus point: {x!r}")
        return np.mod(self.matrix @ x, 1.0)

    def evaluate_many(self, X):
        return np.mod(np.asarray(X, dtype=np.float64) @ self.matrix.T, 1.0)

    def tangent_action(self, x, v):
        return self.matrix @ np.asarray(v, dtype=np.float64)

    def unstable_direction(self, x):
        return self.dir_u

    def unstable_expansion(self, x):
        return self.expansion

    def stable_disk(self, x, radius) -> StableDisk:
        return StableDisk("segment", np.asarray(x, dtype=np.float64),
                          float(radius), self.dir_s)

    def cs_norm(self, x):
        return self.contraction

    def cs_lyapunov_estimate(self, x, n):
        if n < 1:
            raise DomainError("n must be >= 1")
        return float(np.log(self.contraction))

    def distance(self, x, y):
        d = np.abs(np.asarray(x) - np.asarray(y))
        d = np.minimum(d, 1.0 - d)
        return float(np.hypot(d[..., 0], d[..., 1]))

    def expansion_bounds(self):
        return self.expansion, self.expansion

    def stable_contraction(self):
        return 1.0, self.contraction

    def min_splitting_angle_sin(self):
        return 1.0   # symmetric matrix: orthogonal eigendirections

    def sample_attractor(self, n, seed=0, burn_in=10_000):
        # the attractor is all of T^2; run parallel orbits for speed
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                           spawn_key=[3]))
        width = min(4096, n)
        steps = burn_in + (n + width - 1) // width
        x = rng.random((width, 2))
        out = np.empty((n, 2))
        filled = 0
        for j in range(steps):
            x = np.mod(x @ self.matrix.T, 1.0)
            if j >= burn_in and filled < n:
                take = min(width, n - filled)
                out[filled:filled + take] = x[:take]
                filled += take
        return out

    # arc-length coordinates along unstable lines (used by the curve batch)
    def unstable_coord(self, x):
        """Arc-length coordinate of x along its unstable line (mod nothing)."""
        return float(np.dot(np.asarray(x), self.dir_u))

    def stable_offset(self, x, y):
        """Signed stable-direction offset from the unstable line of x to y,
        using the nearest torus lift of y."""
        dx = np.asarray(y, dtype=np.float64) - np.asarray(x, dtype=np.float64)
        dx -= np.round(dx)
        return float(np.dot(dx, self.dir_s))


# ----------------------------------------------------------------------
# solenoid family
# ----------------------------------------------------------------------

def _leaf_bounds(phi_max: float):
    """Invariant slope window and expansion bounds for leaves of the
    skew product (t, z) -> (2t, phi(t) z + e^{2 pi i t}/2).

    The slope map is s -> (phi*s + pi*i*e^{2 pi i t})/2, so slopes of
    attractor leaves live in [sig_min, sig_star] with sig_star the fixed
    point of the modulus recursion.  Expansion of a tangent (1, s) is
    ||(2, phi*s + pi*i*e)|| / ||(1, s)||; extremizing over the window gives
    provable bounds covering every attractor leaf.
    """
    sig_star = np.pi / (2.0 - phi_max)
    sig_min = (np.pi - phi_max * sig_star) / 2.0
    e_min = 2.0 * np.sqrt((1.0 + sig_min ** 2) / (1.0 + sig_star ** 2))
    e_max = 2.0 * np.sqrt((1.0 + sig_star ** 2) / (1.0 + sig_min ** 2))
    return sig_min, sig_star, e_min, e_max


class Solenoid(MapModel):
    """Angle doubling over S^1 with uniformly contracting fiber map."""

    def __init__(self, lambda_c: float = 0.25):
        if not 0.0 < lambda_c < 0.5:
            raise ConfigurationError("lambda_c must lie in (0, 1/2)")
        self.name = "solenoid"
        self.dim = 3
        self.domain = "solid torus S^1 x D^2"
        self.parameters = {"lambda_c": lambda_c}
        self.lambda_c = lambda_c
        self._init_constants(phi_max=lambda_c)

    # fiber contraction factor; overridden by the nonuniform variant
    def fiber_factor(self, t):
        return self.lambda_c * np.ones_like(np.asarray(t, dtype=np.float64))

    def _init_constants(self, phi_max):
        self.phi_max = phi_max
        sig_min, sig_star, e_min, e_max = _leaf_bounds(phi_max)
        self.sigma_min = sig_min
        self.sigma_star = sig_star
        self._e_bounds = (e_min, e_max)
        # lam must dominate 1/expansion on every leaf; the cone bound is the
        # provable choice (the naive 1/2 + small margin fails: expansion on
        # actual leaves drops measurably below 2)
        self.lam = (1.0 + 1e-9) / e_min
        # |zeta''| bound for the leaf parameterization, dominating curvature
        z2 = (np.pi ** 2 / 2.0) / (1.0 - phi_max / 4.0)
        kappa = self.parameters.get("kappa", 0.0)
        z2 *= 1.0 + 2.0 * kappa          # slack for fiber-factor derivatives
        self._zpp_bound = z2
        # Lipschitz constant of log(unstable stretch) in arc length
        lip_t = 0.5 * (0.5 * (phi_max * z2 + 2.0 * np.pi ** 2) + z2)
        lip = lip_t / np.sqrt(1.0 + sig_min ** 2)
        self.distortion_lipschitz = lip * (1.0 + 2.0 * kappa)
        self.curvature_bound_L = max(z2, self.distortion_lipschitz)

    # -- point dynamics -------------------------------------------------
    @staticmethod
    def _split(x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (3,) or not np.all(np.isfinite(x)):
            raise DomainError(f"not a solid-torus point: {x!r}")
        return float(x[0]) % 1.0, complex(x[1], x[2])

    @staticmethod
    def _join(t, z):
        return np.array([t % 1.0, z.real, z.imag])

    def evaluate(self, x):
        t, z = self._split(x)
        phi = float(self.fiber_factor(t))
        return self._join(2.0 * t, phi * z + 0.5 * np.exp(2j * np.pi * t))

    def evaluate_many(self, X):
        X = np.asarray(X, dtype=np.float64)
        t = np.mod(X[..., 0], 1.0)
        z = X[..., 1] + 1j * X[..., 2]
        phi = self.fiber_factor(t)
        zn = phi * z + 0.5 * np.exp(2j * np.pi * t)
        return np.stack([np.mod(2.0 * t, 1.0), zn.real, zn.imag], axis=-1)

    def _dphi(self, t):
        return np.zeros_like(np.asarray(t, dtype=np.float64))

    def tangent_action(self, x, v):
        t, z = self._split(x)
        v = np.asarray(v, dtype=np.float64)
        vt = v[0]
        vz = complex(v[1], v[2])
        phi = float(self.fiber_factor(t))
        dphi = float(self._dphi(t))
        wz = phi * vz + (dphi * z + 1j * np.pi * np.exp(2j * np.pi * t)) * vt
        return np.array([2.0 * vt, wz.real, wz.imag])

    def inverse(self, x):
        """Inverse on a neighbourhood of the attractor (branch by fiber size)."""
        t, z = self._split(x)
        best = None
        for tp in (t / 2.0, (t + 1.0) / 2.0):
            phi = float(self.fiber_factor(tp))
            zp = (z - 0.5 * np.exp(2j * np.pi * tp)) / phi
            if best is None or abs(zp) < abs(best[1]):
                best = (tp, zp)
        return self._join(*best)

    # -- leaves ----------------------------------------------------------
    def leaf_from_history(self, t_hist):
        """Leaf phase vector from backward base angles t_{-1}, t_{-2}, ...

        phases[k-1] = t_{-k} - t/2^k (mod 1), so that along the leaf the
        k-th preimage of base angle u is u/2^k + phases[k-1].
        """
        t_hist = np.asarray(t_hist, dtype=np.float64)
        t = (2.0 * t_hist[0]) % 1.0
        k = np.arange(1, t_hist.size + 1)
        return np.mod(t_hist - t / 2.0 ** k, 1.0)

    def leaf_at(self, x, depth: int = LEAF_DEPTH):
        """Phase vector of the attractor leaf through x (backward branching)."""
        hist = []
        y = np.asarray(x, dtype=np.float64)
        for _ in range(depth):
            y = self.inverse(y)
            hist.append(y[0])
        return self.leaf_from_history(np.array(hist))

    def leaf_value(self, phases, t):
        """Fiber coordinate zeta(t) of the leaf over base angle(s) t."""
        t = np.asarray(t, dtype=np.float64)
        phases = np.asarray(phases, dtype=np.float64)
        k = np.arange(1, phases.shape[-1] + 1)
        tk = t[..., None] / 2.0 ** k + phases          # backward angles
        weights = self._leaf_weights(tk)
        return 0.5 * np.sum(weights * np.exp(2j * np.pi * tk), axis=-1)

    def _leaf_weights(self, tk):
        # prod_{j<k} phi(t_{-j}); uniform case is lambda_c^{k-1}
        k = np.arange(tk.shape[-1])
        return self.lambda_c ** k

    def leaf_slope(self, phases, t):
        """d zeta / dt along the leaf (complex), vectorized over t."""
        t = np.asarray(t, dtype=np.float64)
        h = 2.0 ** -26
        return (self.leaf_value(phases, t + h) - self.leaf_value(phases, t - h)) / (2.0 * h)

    def leaf_push(self, phases, wrap: int = 0):
        """Phase vector of the forward image leaf.

        ``wrap`` is the integer subtracted from 2t when the pushed base
        angle is reduced mod 1; it shifts every backward angle accordingly.
        """
        out = np.empty_like(phases)
        out[0] = 0.0
        out[1:] = phases[:-1]
        if wrap:
            k = np.arange(1, phases.size + 1)
            out = np.mod(out - wrap / 2.0 ** k, 1.0)
        return out

    def unstable_direction(self, x):
        t, _ = self._split(x)
        phases = self.leaf_at(x)
        zp = complex(self.leaf_slope(phases, np.array(t)))
        v = np.array([1.0, zp.real, zp.imag])
        return v / np.linalg.norm(v)

    def stable_disk(self, x, radius) -> StableDisk:
        return StableDisk("fiber", np.asarray(x, dtype=np.float64), float(radius))

    def cs_norm(self, x):
        t, _ = self._split(x)
        return abs(float(self.fiber_factor(t)))

    def distance(self, x, y):
        x = np.asarray(x); y = np.asarray(y)
        dt = abs(float(x[0] - y[0])) % 1.0
        dt = min(dt, 1.0 - dt)
        dz = np.hypot(x[1] - y[1], x[2] - y[2])
        return float(np.hypot(dt, dz))

    def expansion_bounds(self):
        return self._e_bounds

    def stable_contraction(self):
        return 1.0, self.phi_max

    def min_splitting_angle_sin(self):
        # fiber plane vs leaf tangent (1, zeta'): sin = 1/||(1, zeta')||
        return 1.0 / np.sqrt(1.0 + self.sigma_star ** 2)

    def sample_attractor(self, n, seed=0, burn_in=10_000, with_leaves=False):
        """Orbit sample of the attractor with exact base angles.

        Returns points (n, 3); with ``with_leaves`` also the per-point leaf
        phase vectors (n, LEAF_DEPTH), reconstructed from the orbit history.
        """
        from .util import angles_from_float, angles_to_float, double_angles
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                           spawn_key=[3]))
        width = int(min(2048, max(1, n // 16 + 1)))
        per = (n + width - 1) // width
        hi, lo = angles_from_float(rng.random(width))
        z = np.zeros(width, dtype=np.complex128)
        K = LEAF_DEPTH
        hist = np.zeros((K + 1, width))
        pts = np.empty((n, 3))
        leaves = np.empty((n, K)) if with_leaves else None
        filled = 0
        for j in range(burn_in + per):
            t = angles_to_float(hi, lo)
            hist = np.roll(hist, 1, axis=0)
            hist[0] = t
            z = self.fiber_factor(t) * z + 0.5 * np.exp(2j * np.pi * t)
            hi, lo, _ = double_angles(hi, lo)
            if j >= burn_in and j > K and filled < n:
                take = min(width, n - filled)
                tt = angles_to_float(hi, lo)[:take]
                pts[filled:filled + take, 0] = tt
                pts[filled:filled + take, 1] = z.real[:take]
                pts[filled:filled + take, 2] = z.imag[:take]
                if with_leaves:
                    k = np.arange(1, K + 1)
                    ph = np.mod(hist[:K, :take].T - tt[:, None] / 2.0 ** k, 1.0)
                    leaves[filled:filled + take] = ph
                filled += take
        if with_leaves:
            return pts, leaves
        return pts


class MostlyContracting(Solenoid):
    """Solenoid with base-dependent fiber contraction lc*(1+kappa*cos 2 pi t).

    Accepted only when the empirical centre-stable Lyapunov probe along a
    Lebesgue-typical fiber sample is negative.
    """

    def __init__(self, lambda_c: float = 0.25, kappa: float = 0.15,
                 h3_samples: int = 50_000):
        if not 0.0 < lambda_c < 0.5:
            raise ConfigurationError("lambda_c must lie in (0, 1/2)")
        if not 0.0 <= kappa < 1.0:
            raise ConfigurationError("kappa must lie in [0, 1)")
        self.name = "mostly-contracting"
        self.dim = 3
        self.domain = "solid torus S^1 x D^2"
        self.parameters = {"lambda_c": lambda_c, "kappa": kappa}
        self.lambda_c = lambda_c
        self.kappa = kappa
        self._init_constants(phi_max=lambda_c * (1.0 + kappa))
        est = self._h3_probe(h3_samples)
        if est >= 0.0:
            raise ConfigurationError(
                f"(lambda_c={lambda_c}, kappa={kappa}) fails the negative "
                f"centre-stable exponent probe: estimate {est:.4f} >= 0")
        self.h3_estimate = est

    def fiber_factor(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.lambda_c * (1.0 + self.kappa * np.cos(2.0 * np.pi * t))

    def _dphi(self, t):
        t = np.asarray(t, dtype=np.float64)
        return -2.0 * np.pi * self.lambda_c * self.kappa * np.sin(2.0 * np.pi * t)

    def _leaf_weights(self, tk):
        # cumulative products of phi along the backward angles
        phi = self.fiber_factor(tk)
        w = np.ones_like(phi)
        w[..., 1:] = np.cumprod(phi[..., :-1], axis=-1)
        return w

    def _h3_probe(self, n: int) -> float:
        """Mean of log phi along a Lebesgue-typical exact-angle orbit."""
        from .util import angles_from_float, angles_to_float, double_angles
        hi, lo = angles_from_float(np.array([0.237590193201337]))
        acc = 0.0
        block = np.empty(1024)
        done = 0
        while done < n:
            take = min(1024, n - done)
            for i in range(take):
                block[i] = angles_to_float(hi, lo)[0]
                hi, lo, _ = double_angles(hi, lo)
            acc += float(np.sum(np.log(self.fiber_factor(block[:take]))))
            done += take
        return acc / n


_REGISTRY = {
    "linear-cat": TorusAutomorphism,
    "solenoid": Solenoid,
    "mostly-contracting": MostlyContracting,
}


def get_map(name: str, **params) -> MapModel:
    try:
        cls = _REGISTRY[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown map {name!r}; choose from {sorted(_REGISTRY)}") from None
    return cls(**params)
