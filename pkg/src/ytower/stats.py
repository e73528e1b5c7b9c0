"""Empirical statistics of the built-in maps along typical orbits: time
averages, correlation decay, the variance of normalized Birkhoff sums, a
central-limit check, and large-deviation rate estimates.

Sampling follows the physical-measure convention: long orbits from
Lebesgue-random seeds after a burn-in.  Everything is seeded and batched;
identical inputs reproduce identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sstats

from .errors import DomainError, PreconditionError
from .maps import MapModel, Solenoid, TorusAutomorphism
from .util import angles_from_float, angles_to_float, double_angles, stage_rng


@dataclass
class Observable:
    name: str
    fn: object                 # point array (n, dim) -> values (n,)
    holder_exponent: float = 1.0


def default_observables(map_: MapModel):
    if isinstance(map_, TorusAutomorphism):
        return {
            "cos_x": Observable("cos_x", lambda p: np.cos(2 * np.pi * p[..., 0])),
            "cos_y": Observable("cos_y", lambda p: np.cos(2 * np.pi * p[..., 1])),
            "dist": Observable("dist", lambda p: np.hypot(
                np.minimum(np.abs(p[..., 0] - 0.31), 1 - np.abs(p[..., 0] - 0.31)),
                np.minimum(np.abs(p[..., 1] - 0.57), 1 - np.abs(p[..., 1] - 0.57)))),
        }
    return {
        "cos_t": Observable("cos_t", lambda p: np.cos(2 * np.pi * p[..., 0])),
        "abs_z": Observable("abs_z", lambda p: np.hypot(p[..., 1], p[..., 2])),
        "dist": Observable("dist", lambda p: np.sqrt(
            np.minimum(np.abs(p[..., 0] - 0.31), 1 - np.abs(p[..., 0] - 0.31)) ** 2
            + (p[..., 1] - 0.2) ** 2 + p[..., 2] ** 2)),
    }


class _OrbitBatch:
    """W parallel orbits advanced in lock step (exact base angles for the
    solenoid family)."""

    def __init__(self, map_: MapModel, width: int, rng, burn_in: int):
        self.map = map_
        if isinstance(map_, TorusAutomorphism):
            self.x = rng.random((width, 2))
        else:
            self.hi, self.lo = angles_from_float(rng.random(width))
            self.z = np.zeros(width, dtype=np.complex128)
        for _ in range(burn_in):
            self.step()

    def step(self):
        m = self.map
        if isinstance(m, TorusAutomorphism):
            self.x = np.mod(self.x @ m.matrix.T, 1.0)
        else:
            t = angles_to_float(self.hi, self.lo)
            self.z = m.fiber_factor(t) * self.z + 0.5 * np.exp(2j * np.pi * t)
            self.hi, self.lo, _ = double_angles(self.hi, self.lo)

    def points(self):
        if isinstance(self.map, TorusAutomorphism):
            return self.x
        t = angles_to_float(self.hi, self.lo)
        return np.stack([t, self.z.real, self.z.imag], axis=-1)


def _orbit_series(map_, obs: Observable, width: int, length: int, rng,
                  burn_in: int = 2000):
    """(width, length) observable values along parallel orbits."""
    batch = _OrbitBatch(map_, width, rng, burn_in)
    out = np.empty((width, length))
    for j in range(length):
        out[:, j] = obs.fn(batch.points())
        batch.step()
    return out


def birkhoff_average(map_: MapModel, obs: Observable, n: int,
                     seed: int = 0, burn_in: int = 2000) -> float:
    """Time average along one Lebesgue-random orbit after burn-in."""
    if n < 10 ** 3:
        raise PreconditionError("n must be >= 1e3")
    rng = stage_rng(seed, "birkhoff")
    vals = _orbit_series(map_, obs, 1, n, rng, burn_in)
    return float(vals.mean())


def correlation(map_: MapModel, phi: Observable, psi: Observable,
                n_list, samples: int = 400, seed: int = 0,
                segment: int = 256):
    """Batched empirical correlations |E[phi(f^n x) psi(x)] - E phi E psi|
    with jackknife errors over independent orbit segments.

    Returns arrays (estimates, errors) over n_list.
    """
    n_list = np.asarray(list(n_list), dtype=np.int64)
    if n_list.size == 0:
        raise PreconditionError("n_list must be nonempty")
    rng = stage_rng(seed, "correlation")
    length = int(n_list.max()) + segment
    width = samples
    a = _orbit_series(map_, phi, width, length, rng)
    b = _orbit_series(map_, psi, width, length, rng)
    mean_phi = a.mean()
    mean_psi = b.mean()
    est = np.empty(n_list.size)
    err = np.empty(n_list.size)
    for i, n in enumerate(n_list):
        prods = (a[:, n:n + segment] * b[:, :segment]).mean(axis=1) \
            - mean_phi * mean_psi
        est[i] = prods.mean()
        err[i] = prods.std(ddof=1) / np.sqrt(width)
    return est, err


def variance(map_: MapModel, phi: Observable, n: int, samples: int = 1000,
             seed: int = 0):
    """Normalized second moment of centered length-n Birkhoff sums over
    independent blocks; returns (sigma2, doubling_diagnostic)."""
    if n < 10 ** 3 or samples < 10 ** 3:
        raise PreconditionError("need n, samples >= 1e3")
    rng = stage_rng(seed, "variance")
    vals = _orbit_series(map_, phi, samples, 2 * n, rng)
    mu = vals.mean()
    s_n = (vals[:, :n] - mu).sum(axis=1)
    s_2n = (vals - mu).sum(axis=1)
    v_n = float(np.mean(s_n ** 2) / n)
    v_2n = float(np.mean(s_2n ** 2) / (2 * n))
    return v_n, {"n": v_n, "2n": v_2n,
                 "rel_change": abs(v_2n - v_n) / max(v_n, 1e-300)}


def coboundary_observable(map_: MapModel, psi: Observable) -> Observable:
    """phi = psi o f - psi (telescoping Birkhoff sums)."""
    def fn(p):
        return psi.fn(map_.evaluate_many(p)) - psi.fn(p)
    return Observable(f"cob_{psi.name}", fn, psi.holder_exponent)


def clt_test(map_: MapModel, phi: Observable, block_n: int = 1000,
             samples: int = 10_000, seed: int = 0):
    """Kolmogorov-Smirnov distance between normalized block sums and the
    normal law with the measured variance.

    Returns (ks_distance, sigma, degenerate_flag).
    """
    if samples < 10 ** 4:
        raise PreconditionError("need >= 1e4 samples")
    rng = stage_rng(seed, "clt")
    width = 512
    blocks = []
    mu_acc = []
    need = samples
    while need > 0:
        vals = _orbit_series(map_, phi, width, block_n, rng, burn_in=500)
        mu_acc.append(vals.mean())
        blocks.append(vals.sum(axis=1))
        need -= width
    s = np.concatenate(blocks)[:samples]
    mu = float(np.mean(mu_acc))
    norm = (s - block_n * mu) / np.sqrt(block_n)
    sigma = float(norm.std(ddof=1))
    if sigma <= 1e-9:
        return 1.0, sigma, True
    ks = float(sstats.kstest(norm, "norm", args=(0.0, sigma)).statistic)
    return ks, sigma, False


def large_deviations(map_: MapModel, phi: Observable, eps: float,
                     n_list, samples: int = 4000, seed: int = 0):
    """Empirical rates -(1/n) log P(|S_n/n - mu| > eps) across n_list.

    Zero empirical counts are censored: the reported rate is the lower
    bound from a half-count.  Returns list of dicts.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    rng = stage_rng(seed, "ldp")
    n_list = sorted(int(n) for n in n_list)
    width = 500
    out = []
    vals = _orbit_series(map_, phi, min(samples, 4000), max(n_list), rng)
    mu = vals.mean()
    for n in n_list:
        means = vals[:, :n].mean(axis=1)
        count = int(np.sum(np.abs(means - mu) > eps))
        total = means.size
        censored = count == 0
        p = max(count, 0.5) / total
        out.append({"n": n, "count": count, "total": total,
                    "rate": float(-np.log(p) / n), "censored": censored})
    return out


def stats_csv_rows(name, rows):
    lines = [f"# {name}", "n,estimate,error"]
    for r in rows:
        lines.append(",".join(repr(float(x)) for x in r))
    return "\n".join(lines) + "\n"
