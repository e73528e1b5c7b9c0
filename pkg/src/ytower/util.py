"""Small shared helpers: seeding, log-linear tail fits, exact base angles.

Base angles on the circle are kept as integers modulo a fixed large odd
denominator ``ANGLE_MOD``.  Angle doubling is then an exact permutation
(2 is invertible mod an odd number), which avoids the collapse of float
orbits onto the fixed point 0: every float is a dyadic rational, and a
dyadic rational reaches 0 after at most 53 doublings.
"""

from __future__ import annotations

import numpy as np

from .errors import FitUndefinedError

# 2^126 - 3 is odd; doubling mod ANGLE_MOD never degenerates.
ANGLE_MOD = (1 << 126) - 3
_ANGLE_SCALE = float(ANGLE_MOD)

_H64 = 1 << 64
_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def angle_from_float(t: float) -> int:
    """Snap a float angle in [0, 1) to the exact integer grid."""
    return int(round((t % 1.0) * _ANGLE_SCALE)) % ANGLE_MOD


def angle_to_float(k: int) -> float:
    return k / _ANGLE_SCALE


def split_u64(k):
    """Integer angle(s) -> (hi, lo) uint64 pair arrays."""
    k = np.asarray(k, dtype=object)
    hi = np.array([int(v) >> 64 for v in k.ravel()], dtype=np.uint64).reshape(k.shape)
    lo = np.array([int(v) & (_H64 - 1) for v in k.ravel()], dtype=np.uint64).reshape(k.shape)
    return hi, lo


def join_u64(hi, lo):
    hi = np.asarray(hi, dtype=np.uint64)
    lo = np.asarray(lo, dtype=np.uint64)
    out = np.empty(hi.shape, dtype=object)
    flat_hi, flat_lo = hi.ravel(), lo.ravel()
    flat = out.ravel()
    for i in range(flat.size):
        flat[i] = (int(flat_hi[i]) << 64) | int(flat_lo[i])
    return out


def double_angles(hi, lo):
    """Exact (hi, lo) <- 2*(hi, lo) mod ANGLE_MOD, vectorized.

    Inputs must already be reduced mod ANGLE_MOD (so 2k < 2*ANGLE_MOD and a
    single conditional subtraction reduces).  Returns (hi, lo, wrapped) where
    ``wrapped`` flags entries that were reduced (crossed the circle seam).
    """
    one = np.uint64(1)
    s63 = np.uint64(63)
    carry = lo >> s63
    lo2 = (lo << one) & _M64
    hi2 = ((hi << one) & _M64) | carry

    mod_hi = np.uint64(ANGLE_MOD >> 64)
    mod_lo = np.uint64(ANGLE_MOD & (_H64 - 1))
    ge = (hi2 > mod_hi) | ((hi2 == mod_hi) & (lo2 >= mod_lo))
    borrow = (lo2 < mod_lo) & ge
    lo3 = np.where(ge, (lo2 - mod_lo) & _M64, lo2)
    hi3 = np.where(ge, hi2 - mod_hi - borrow.astype(np.uint64), hi2)
    return hi3, lo3, ge


def angles_to_float(hi, lo):
    return (np.asarray(hi, dtype=np.float64) * float(_H64)
            + np.asarray(lo, dtype=np.float64)) / _ANGLE_SCALE


def angles_from_float(t):
    """Vectorized snap of float angles in [0,1) to (hi, lo) pairs."""
    t = np.mod(np.asarray(t, dtype=np.float64), 1.0)
    ks = [int(round(v * _ANGLE_SCALE)) % ANGLE_MOD for v in t.ravel()]
    hi = np.array([k >> 64 for k in ks], dtype=np.uint64).reshape(t.shape)
    lo = np.array([k & (_H64 - 1) for k in ks], dtype=np.uint64).reshape(t.shape)
    return hi, lo


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Deterministic per-stage generator from one global seed.

    The stage label is folded in through SeedSequence spawn keys, so partial
    reruns of later stages see exactly the RNG stream of a monolithic run.
    """
    key = [ord(c) for c in stage]
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def loglinear_fit(n, mass, min_bins: int = 5):
    """Least squares fit of log(mass) against n.

    Returns (C, theta, r2): the model is mass ~ C * theta^n.  Bins with
    nonpositive mass are dropped.  Raises FitUndefinedError when fewer than
    ``min_bins`` usable bins remain.
    """
    n = np.asarray(n, dtype=np.float64)
    mass = np.asarray(mass, dtype=np.float64)
    keep = mass > 0
    if int(keep.sum()) < min_bins:
        raise FitUndefinedError(f"only {int(keep.sum())} nonzero bins, need {min_bins}")
    x, y = n[keep], np.log(mass[keep])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float(np.dot(resid, resid))
    ss_tot = float(np.dot(y - y.mean(), y - y.mean()))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(np.exp(intercept)), float(np.exp(slope)), float(r2)


def weighted_tail(values, weights, n_max: int):
    """Exact tail masses m{value > n} for n = 0..n_max from weighted atoms."""
    values = np.asarray(values)
    weights = np.asarray(weights, dtype=np.float64)
    hist = np.zeros(n_max + 2, dtype=np.float64)
    clipped = np.minimum(values, n_max + 1).astype(np.int64)
    np.add.at(hist, clipped, weights)
    # tail[n] = sum of weights with value > n
    total = hist.sum()
    cum = np.cumsum(hist)
    tail = total - cum
    return tail[: n_max + 1]


def fsum(values) -> float:
    """Deterministic compensated sum."""
    import math
    return math.fsum(values)


class SystematicResampler:
    """Mass-conserving population control for interval particles.

    Particles with weight >= threshold are kept as-is; the light remainder
    is systematically subsampled to the remaining slot budget, survivors
    reweighted to a common value so the total weight is conserved exactly
    (up to float addition order).
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def choose(self, weights: np.ndarray, budget: int):
        """Return (keep_indices, new_weights_for_kept)."""
        m = weights.size
        if m <= budget:
            return np.arange(m), weights
        order = np.argsort(weights)[::-1]
        sorted_w = weights[order]
        # big particles occupy slots while their weight exceeds the average
        # weight of what a slot would carry from the rest
        csum = np.cumsum(sorted_w)
        total = csum[-1]
        n_big = 0
        for i in range(min(budget, m)):
            rest = total - (csum[i - 1] if i > 0 else 0.0)
            slots_left = budget - i
            if sorted_w[i] * slots_left >= rest:
                n_big = i + 1
            else:
                break
        n_big = min(n_big, budget - 1)
        big = order[:n_big]
        light = order[n_big:]
        light_w = weights[light]
        light_total = float(light_w.sum())
        k = budget - n_big
        if light_total <= 0.0 or k <= 0:
            return big, weights[big]
        # systematic sampling over the light mass
        positions = (self.rng.random() + np.arange(k)) / k * light_total
        cum = np.cumsum(light_w)
        picks = np.searchsorted(cum, positions, side="right")
        picks = np.unique(np.minimum(picks, light_w.size - 1))
        chosen = light[picks]
        new_w = np.full(picks.size, light_total / k)
        # duplicates collapsed: spread the lost slots' weight over survivors
        if picks.size < k:
            new_w *= k / picks.size
        keep = np.concatenate([big, chosen])
        w_out = np.concatenate([weights[big], new_w])
        return keep, w_out
