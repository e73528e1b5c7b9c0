"""Auxiliary partition of a rectangle's base arc with return times.

The builder pushes the base arc of a host rectangle forward, keeps every
image component admissible by slicing, and defines partition elements where
a large component crosses a canonical rectangle of the net: the crossing
slice returns, the arc of radius delta1/2 around the crossing window is
captured, the captured side strips are released once their images separate
from the returned piece by delta0, regrown until their boundary-mass
statistic recovers, and the cycle repeats.

Bookkeeping is by weighted interval particles: each particle is one
connected component carrying the mass it represents; slicing and captures
split particles exactly (child masses partition the parent's), and a
mass-conserving systematic resampler caps the population, so deep tails are
resolved by weight rather than by count.  Per-particle phase counters give
the capture / release / growth / wait decomposition of every return time as
exact integers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curves import z_sup_flat
from .errors import NotApplicableError, PreconditionError
from .filtration import n0_threshold, slicing_constants
from .geom import CatBatch, plan_cuts, _leaf_value_rows
from .maps import MapModel, TorusAutomorphism
from .rectangles import RectangleNet
from .util import SystematicResampler, loglinear_fit, weighted_tail

FREE, CAPTIVE, GROWTH = 0, 1, 2
_BIG = np.iinfo(np.int64).max // 2


@dataclass
class BuilderParams:
    delta0: float
    n_max: int = 400
    pop_budget: int = 30_000
    seed: int = 0
    eta: float = 1e-9              # margin tolerance of the crossing test
    site_spacing: float = 1.10     # capture-arc spacing in units of delta1
    initial_depth: int | None = None


@dataclass
class PartitionElement:
    mass: float
    tau: int
    target: int
    t0: int
    n_cycles: int
    sum_s: int
    sum_g: int
    sum_t: int
    phases: tuple            # interleaved ('s'|'g'|'t', value) events
    certificate: tuple = (0.0, 0.0, 0.0, 0.0)   # (d_s, margin_lo, margin_hi, align)

    def identity_holds(self) -> bool:
        return self.tau == self.t0 + self.sum_s + self.sum_g + self.sum_t

    def cycles(self):
        """Per-cycle (s, g, t) triples recovered from the event trail."""
        out, cur = [], {}
        for kind, val in self.phases:
            cur[kind] = cur.get(kind, 0) + val
            if kind == "t":
                out.append((cur.get("s", 0), cur.get("g", 0), cur["t"]))
                cur = {}
        return out


@dataclass
class BuildResult:
    host: int
    total_mass: float
    elements: list
    leftover: float
    n_max: int
    n0: int
    rounds: list                 # (step, at_risk, captured, returned)
    t0_events: list              # (t0, mass)
    wait_events: list            # (duration, mass), capture waits, cycles >= 1
    sg_events: list              # (s, g, mass)
    release_profiles: list       # (strip_mass, eps_hi) per captured strip
    release_check_failures: int
    tracked_intervals: int
    steps_run: int
    conservation_worst: float

    def element_masses(self):
        return np.array([e.mass for e in self.elements])

    def element_taus(self):
        return np.array([e.tau for e in self.elements])

    def tail(self, n_max=None):
        """Exact m{tau > n} for n = 0..n_max (leftover counted beyond)."""
        n_max = self.n_max if n_max is None else n_max
        if self.elements:
            taus = np.concatenate([self.element_taus(), [n_max + 1]])
            masses = np.concatenate([self.element_masses(), [self.leftover]])
        else:
            taus = np.array([n_max + 1])
            masses = np.array([self.leftover])
        return weighted_tail(taus, masses, n_max)


@dataclass
class TailReport:
    n: np.ndarray
    mass: np.ndarray
    C: float
    theta: float
    r2: float
    leftover: float
    total: float


def tail_histogram(result: BuildResult, fit_from: int | None = None,
                   n_max: int | None = None) -> TailReport:
    """Exact tail masses and the log-linear fit over [n0, n_max]."""
    n_max = result.n_max if n_max is None else n_max
    fit_from = result.n0 if fit_from is None else fit_from
    tail = result.tail(n_max)
    n = np.arange(n_max + 1)
    win = n >= fit_from
    C, theta, r2 = loglinear_fit(n[win], tail[win])
    return TailReport(n=n, mass=tail, C=C, theta=theta, r2=r2,
                      leftover=result.leftover, total=result.total_mass)


def release_time(map_: MapModel, eps: float | None, delta0: float,
                 c_prime: float | None = None,
                 delta2: float | None = None) -> float:
    """Point release time.

    Branch 1 (the stable disk of the point meets the captured center's
    unstable arc): log_{1/lambda}(delta0/eps), eps the distance of the
    holonomy image beyond the returned window.  Branch 2 (no such
    intersection): the constant log_{1/lambda}(2*delta0/(c'*delta2)).
    """
    lam = map_.lam
    if eps is not None:
        if eps <= 0:
            raise NotApplicableError("point inside the returned element")
        return float(np.log(delta0 / eps) / np.log(1.0 / lam))
    if c_prime is None or delta2 is None:
        raise PreconditionError("branch 2 needs c_prime and delta2")
    return float(np.log(2.0 * delta0 / (c_prime * delta2)) / np.log(1.0 / lam))


def capture_split(component_length: float, x_arc: float, delta1_val: float):
    """Split one image component [0, L] at a capture site: the captured arc
    has radius delta1/2 about the site; the rest is free."""
    L = float(component_length)
    lo = max(0.0, x_arc - delta1_val / 2.0)
    hi = min(L, x_arc + delta1_val / 2.0)
    free = []
    if lo > 0:
        free.append((0.0, lo))
    if hi < L:
        free.append((hi, L))
    return (lo, hi), free


class PartitionBuilder:
    """Stateful builder; one instance per (net, host rectangle) pair."""

    def __init__(self, map_: MapModel, net: RectangleNet, host: int,
                 params: BuilderParams):
        self.map = map_
        self.net = net
        self.host = host
        self.p = params
        alpha, beta, keep, spacing = slicing_constants(map_, params.delta0)
        self.alpha, self.beta = alpha, beta
        self.keep_thr, self.spacing = keep, spacing
        self.delta1 = net.delta1
        self.delta2 = net.delta2
        # recovered-size gate: the provable floor of the boundary-mass
        # statistic; equals 1/(2*delta1) when delta1 takes its filtration
        # value delta0/(2*beta_bar)
        self.z_cap = 2.0 * beta / ((1.0 - alpha) * params.delta0)
        self.rng = np.random.default_rng(
            np.random.SeedSequence(entropy=params.seed, spawn_key=[11, host]))
        self.resampler = SystematicResampler(self.rng)

        rect = net.rectangle(host)
        base = rect.base_curve
        self.total_mass = float(base.mass_total)
        self.batch = base.batch.take(np.arange(base.n_components))
        n = self.batch.n
        self.mass = self.batch.masses().astype(np.float64)
        self._normalize_profiles()
        self.status = np.zeros(n, dtype=np.int8)
        self.group = np.zeros(n, dtype=np.int64)
        self.t0 = np.full(n, -1, dtype=np.int64)
        self.sum_s = np.zeros(n, dtype=np.int64)
        self.sum_g = np.zeros(n, dtype=np.int64)
        self.sum_t = np.zeros(n, dtype=np.int64)
        self.ncyc = np.zeros(n, dtype=np.int64)
        self.phase_start = np.zeros(n, dtype=np.int64)
        self.release_step = np.full(n, _BIG, dtype=np.int64)
        self.eps_l = np.zeros(n)     # capture-time clearance at the ends
        self.eps_r = np.zeros(n)
        self.cap_stretch = np.ones(n)
        self.hist = np.empty(n, dtype=object)
        self.hist[:] = None

        self.step = 0
        self.n0 = 0
        self.cohorts = {0: {"eligible": 0, "ref": float(self.mass.sum())}}
        self._next_cohort = 1
        self.g_batches = {}
        self._next_gbatch = 0
        self._next_disk = 0

        self.elements: list[PartitionElement] = []
        self.rounds = []
        self.t0_events = []
        self.wait_events = []
        self.sg_events = []
        self.release_profiles = []
        self.release_check_failures = 0
        self.tracked = n

    # -- array maintenance --------------------------------------------------
    _FIELDS = ("status", "group", "t0", "sum_s", "sum_g", "sum_t", "ncyc",
               "phase_start", "release_step", "hist", "cap_stretch")

    def _normalize_profiles(self):
        b = self.batch
        if isinstance(b, CatBatch):
            b.base_lo[:] = 0.0
            b.base_hi[:] = 1.0
        else:
            starts, counts = b.start, b.count
            lo = np.repeat(b.b[starts], counts)
            width = np.repeat(b.b[starts + counts - 1] - b.b[starts], counts)
            b.b = (b.b - lo) / np.maximum(width, 1e-300)

    def _child_fracs(self, new):
        if isinstance(new, CatBatch):
            return new.base_lo.copy(), new.base_hi.copy()
        ends = new.start + new.count - 1
        return new.b[new.start].copy(), new.b[ends].copy()

    def _split(self, cut_s, cut_pid):
        prev_n = self.batch.n
        new, parent = self.batch.split_many(cut_s, cut_pid)
        pos_lo, pos_hi = self._child_fracs(new)
        self.batch = new
        self.mass = self.mass[parent] * (pos_hi - pos_lo)
        self._normalize_profiles()
        for name in self._FIELDS:
            setattr(self, name, getattr(self, name)[parent])
        el, er = self.eps_l[parent], self.eps_r[parent]
        self.eps_l = el + (er - el) * pos_lo
        self.eps_r = el + (er - el) * pos_hi
        cap = self.status == CAPTIVE
        if cap.any():
            emax = np.maximum(self.eps_l[cap], self.eps_r[cap])
            lrel = np.log(self.p.delta0 / np.maximum(emax, 1e-300)) \
                / np.log(1.0 / self.map.lam)
            self.release_step[cap] = self.phase_start[cap] + \
                np.ceil(np.maximum(lrel, 1.0)).astype(np.int64)
        self.tracked += (new.n - prev_n) + np.unique(cut_pid).size
        return parent

    def _drop(self, mask):
        keep = np.nonzero(~mask)[0]
        self.batch = self.batch.take(keep)
        self.mass = self.mass[keep]
        self.eps_l = self.eps_l[keep]
        self.eps_r = self.eps_r[keep]
        for name in self._FIELDS:
            setattr(self, name, getattr(self, name)[keep])

    def _z_of(self, idx, ref_mass: float) -> float:
        b = self.batch
        if isinstance(b, CatBatch):
            L = b.length[idx]
            s = np.zeros(2 * idx.size)
            s[1::2] = L
            bb = np.zeros(2 * idx.size)
            bb[1::2] = self.mass[idx]
            starts = 2 * np.arange(idx.size)
            counts = np.full(idx.size, 2)
            return z_sup_flat(s, bb, starts, counts, ref_mass)
        counts = b.count[idx]
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        node_idx = np.repeat(b.start[idx] - starts, counts) \
            + np.arange(int(counts.sum()))
        s_all = b.node_s()[node_idx]
        s_all = s_all - np.repeat(s_all[starts], counts)
        bb = b.b[node_idx] * np.repeat(self.mass[idx], counts)
        return z_sup_flat(s_all, bb, starts, counts, ref_mass)

    # -- release / growth ----------------------------------------------------
    def _releases(self):
        rel = (self.status == CAPTIVE) & (self.step >= self.release_step)
        if not rel.any():
            return
        idx = np.nonzero(rel)[0]
        # separation oracle: the clearance grew by the accumulated stretch
        emax = np.maximum(self.eps_l[idx], self.eps_r[idx])
        sep = emax * self.cap_stretch[idx]
        self.release_check_failures += int(np.sum(
            sep < self.p.delta0 * (1.0 - 1e-6)))
        s_val = self.step - self.phase_start[idx]
        self.sum_s[idx] += s_val
        for j, s in zip(idx, s_val):
            self.hist[j] = (self.hist[j], ("s", int(s)))
        self.status[idx] = GROWTH
        self.release_step[idx] = _BIG
        self.phase_start[idx] = self.step
        key = np.stack([self.group[idx], s_val], axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        for r, (disk, s) in enumerate(uniq):
            gid = self._next_gbatch
            self._next_gbatch += 1
            members = idx[inv == r]
            self.g_batches[gid] = {"ref": float(self.mass[members].sum()),
                                   "s": int(s), "start": self.step}
            self.group[members] = gid

    def _growth_gates(self):
        if not self.g_batches:
            return
        grow = self.status == GROWTH
        done = []
        completed = []
        for gid in sorted(self.g_batches):
            info = self.g_batches[gid]
            members = np.nonzero(grow & (self.group == gid))[0]
            if members.size == 0:
                done.append(gid)
                continue
            z = self._z_of(members, info["ref"])
            if z > self.z_cap:
                continue
            g = self.step - info["start"]
            self.sum_g[members] += g
            for j in members:
                self.hist[j] = (self.hist[j], ("g", int(g)))
            self.sg_events.append((info["s"], g,
                                   float(self.mass[members].sum())))
            completed.append(members)
            done.append(gid)
        if completed:
            # batches recovering at the same step pool into one cohort
            members = np.concatenate(completed)
            cid = self._next_cohort
            self._next_cohort += 1
            self.cohorts[cid] = {"eligible": self.step,
                                 "ref": float(self.mass[members].sum())}
            self.status[members] = FREE
            self.group[members] = cid
            self.phase_start[members] = self.step
        for gid in done:
            self.g_batches.pop(gid, None)

    # -- element definition ----------------------------------------------------
    def _site_probe(self, idx, lengths):
        L = lengths[idx]
        pitch = self.p.site_spacing * self.delta1
        m = np.maximum(0, np.floor((L - 2.0 * self.delta1) / pitch)
                       .astype(np.int64) + 1)
        pid = np.repeat(idx, m)
        if pid.size == 0:
            return pid, np.empty(0)
        first = np.concatenate([[0], np.cumsum(m)[:-1]])
        k = np.arange(int(m.sum())) - np.repeat(first, m)
        arcs = self.delta1 + k * pitch
        return pid, arcs

    def _points_at(self, pid, arcs):
        b = self.batch
        if isinstance(b, CatBatch):
            return b.points_at_arcs(pid, arcs)
        u = b.u_of_arcs_flat(pid, arcs)
        t = b.t_left()[pid] + u
        z, _ = b.eval_at_u(pid, u)
        return np.stack([np.mod(t, 1.0), z.real, z.imag], axis=-1)

    def _window_on_piece(self, pid, targets):
        """Transport target windows onto pieces: (ok, win_lo, win_hi) in
        piece arc coordinates.  ok requires the window plus margins inside
        the piece and stable distance <= delta2."""
        b = self.batch
        eta = max(self.p.eta, 1e-12)
        win = self.net.window_arrays()
        if isinstance(b, CatBatch):
            L = b.length[pid]
            anchors = b.anchor[pid]
            w_anchor = win["anchor"][targets]
            w_len = win["len"]
            d = w_anchor - anchors
            d -= np.round(d)
            u = d @ self.map.dir_u
            off = np.abs(d @ self.map.dir_s)
            wlo = u
            whi = u + w_len
            ok = (off <= self.delta2 * (1 + 1e-9)) & (wlo > eta) & (whi < L - eta)
            return ok, wlo, whi, off
        # solenoid family, vectorized over the hit list
        tl = b.t_left()[pid]
        width = b.width[pid]
        dt = np.mod(win["tlo"][targets] - tl, 1.0)
        covers = (dt + win["w"][targets]) < width
        ok = np.zeros(pid.size, dtype=bool)
        wlo = np.zeros(pid.size)
        whi = np.zeros(pid.size)
        ds_out = np.full(pid.size, np.inf)
        idx = np.nonzero(covers)[0]
        if idx.size == 0:
            return ok, wlo, whi, ds_out
        # stable distance: compare fiber values over the window samples
        uq = dt[idx, None] + (win["tq"][targets[idx]]
                              - win["tlo"][targets[idx], None])
        flat_pid = np.repeat(pid[idx], uq.shape[1])
        z_flat, _ = b.eval_at_u(flat_pid, uq.ravel())
        z_piece = z_flat.reshape(uq.shape)
        d_s = np.max(np.abs(z_piece - win["zq"][targets[idx]]), axis=1)
        ds_out[idx] = d_s
        close = d_s <= self.delta2 * (1 + 1e-9)
        idx = idx[close]
        if idx.size == 0:
            return ok, wlo, whi, ds_out
        # arc positions of the window endpoints inside each piece
        s_all = b.node_s()
        piece_of_node = np.repeat(np.arange(b.n), b.count)
        lengths = s_all[b.start + b.count - 1]
        glob_off = np.concatenate([[0.0], np.cumsum(lengths + 1.0)[:-1]])
        globs = s_all + glob_off[piece_of_node]
        globu = b.u + glob_off[piece_of_node]
        sa = np.interp(dt[idx] + glob_off[pid[idx]], globu, globs) \
            - glob_off[pid[idx]]
        sb = np.interp(dt[idx] + win["w"][targets[idx]] + glob_off[pid[idx]],
                       globu, globs) - glob_off[pid[idx]]
        Lp = lengths[pid[idx]]
        good = (sa > eta) & (sb < Lp - eta)
        sel = idx[good]
        ok[sel] = True
        wlo[sel] = sa[good]
        whi[sel] = sb[good]
        return ok, wlo, whi, ds_out

    def _rounds(self):
        due = sorted(cid for cid, c in self.cohorts.items()
                     if self.step >= c["eligible"])
        if not due:
            return
        all_pid, all_tgt, all_wlo, all_whi, all_ds = [], [], [], [], []
        fired = []
        lengths = self.batch.lengths()
        for cid in due:
            members = np.nonzero((self.status == FREE)
                                 & (self.group == cid))[0]
            if members.size == 0:
                self.cohorts.pop(cid, None)
                continue
            z = self._z_of(members, self.cohorts[cid]["ref"])
            if z > self.z_cap:
                wait = n0_threshold(max(z / self.z_cap, 1.0 + 1e-9) * 2.0
                                    * self.beta / ((1 - self.alpha)
                                                   * self.p.delta0),
                                    self.alpha, self.beta, self.p.delta0)
                self.cohorts[cid]["eligible"] = self.step + max(1, wait)
                continue
            fired.append((cid, float(self.mass[members].sum())))
            big = members[lengths[members] >= 2.2 * self.delta1]
            if big.size == 0:
                continue
            pid, arcs = self._site_probe(big, lengths)
            if pid.size == 0:
                continue
            pts = self._points_at(pid, arcs)
            tgt, _ = self.net.nearest_many(pts)
            hit = tgt >= 0
            pid, tgt = pid[hit], tgt[hit]
            if pid.size == 0:
                continue
            ok, wlo, whi, d_s = self._window_on_piece(pid, tgt)
            if ok.any():
                all_pid.append(pid[ok])
                all_tgt.append(tgt[ok])
                all_wlo.append(wlo[ok])
                all_whi.append(whi[ok])
                all_ds.append(d_s[ok])
        captured = returned = 0.0
        if all_pid:
            captured, returned = self._apply_captures(
                np.concatenate(all_pid), np.concatenate(all_tgt),
                np.concatenate(all_wlo), np.concatenate(all_whi),
                np.concatenate(all_ds))
        # reschedule the fired cohorts from their post-capture statistic
        for cid, at_risk in fired:
            rest = np.nonzero((self.status == FREE)
                              & (self.group == cid))[0]
            if rest.size:
                z_post = self._z_of(rest, self.cohorts[cid]["ref"])
                wait = n0_threshold(max(z_post, 1.0 + 1e-9), self.alpha,
                                    self.beta, self.p.delta0)
                self.cohorts[cid]["eligible"] = self.step + max(1, wait)
            else:
                self.cohorts.pop(cid, None)
            self.rounds.append((self.step, at_risk, captured, returned))

    def _apply_captures(self, pid, tgt, wlo, whi, d_s):
        margin = self.delta1 / 6.0
        order = np.lexsort((wlo, pid))
        pid, tgt = pid[order], tgt[order]
        wlo, whi = wlo[order], whi[order]
        d_s = d_s[order]
        keep = np.ones(pid.size, dtype=bool)
        last_end = {}
        L = self.batch.lengths()
        for j in range(pid.size):
            i = int(pid[j])
            clo, chi = wlo[j] - margin, whi[j] + margin
            if clo <= last_end.get(i, 0.0) + 1e-12 or chi >= L[i] - 1e-12:
                keep[j] = False
                continue
            last_end[i] = chi
        pid, tgt = pid[keep], tgt[keep]
        wlo, whi = wlo[keep], whi[keep]
        d_s = d_s[keep]
        margins_lo = wlo.copy()
        margins_hi = L[pid] - whi
        if pid.size == 0:
            return 0.0, 0.0

        nsite = np.bincount(pid, minlength=self.batch.n)
        site_base = np.concatenate([[0], np.cumsum(nsite)[:-1]])
        cut_s = np.stack([wlo - margin, wlo, whi, whi + margin], axis=1).ravel()
        cut_pid = np.repeat(pid, 4)
        parent = self._split(cut_s, cut_pid)

        pos_in_parent = np.zeros(parent.size, dtype=np.int64)
        for j in range(1, parent.size):
            pos_in_parent[j] = pos_in_parent[j - 1] + 1 \
                if parent[j] == parent[j - 1] else 0
        role = np.mod(pos_in_parent, 4)
        has_sites = nsite[parent] > 0
        n_parts = 4 * nsite[parent] + 1
        interior = pos_in_parent < n_parts - 1
        is_elem = has_sites & (role == 2) & interior
        is_strip = has_sites & ((role == 1) | (role == 3)) & interior
        site_of = site_base[parent] + pos_in_parent // 4

        touched = np.nonzero(is_elem | is_strip)[0]
        first = self.t0[touched] < 0
        waits = (self.step - self.phase_start[touched]).astype(np.int64)
        self.t0[touched[first]] = self.step
        self.sum_t[touched[~first]] += waits[~first]
        for j in touched[first]:
            self.t0_events.append((int(self.step), float(self.mass[j])))
        for j, dur in zip(touched[~first], waits[~first]):
            self.wait_events.append((int(dur), float(self.mass[j])))
            self.hist[j] = (self.hist[j], ("t", int(dur)))

        elem_idx = np.nonzero(is_elem)[0]
        returned = 0.0
        for j in elem_idx:
            ph = _unwind(self.hist[j])
            site = int(site_of[j])
            self.elements.append(PartitionElement(
                mass=float(self.mass[j]), tau=int(self.step),
                target=int(tgt[site]), t0=int(self.t0[j]),
                n_cycles=int(self.ncyc[j]), sum_s=int(self.sum_s[j]),
                sum_g=int(self.sum_g[j]), sum_t=int(self.sum_t[j]),
                phases=ph,
                certificate=(float(d_s[site]), float(margins_lo[site]),
                             float(margins_hi[site]), 0.0)))
            returned += float(self.mass[j])

        strip_idx = np.nonzero(is_strip)[0]
        captured = returned
        lam = self.map.lam
        lengths_new = self.batch.lengths()
        for j in strip_idx:
            captured += float(self.mass[j])
            self.status[j] = CAPTIVE
            self.group[j] = self._next_disk + int(site_of[j])
            self.ncyc[j] += 1
            self.phase_start[j] = self.step
            self.cap_stretch[j] = 1.0
            w = float(lengths_new[j])
            left_strip = role[j] == 1
            self.eps_l[j] = w if left_strip else 0.0
            self.eps_r[j] = 0.0 if left_strip else w
            lrel = np.log(self.p.delta0 / max(w, 1e-300)) / np.log(1.0 / lam)
            self.release_step[j] = self.step + max(1, int(np.ceil(lrel)))
            self.release_profiles.append((float(self.mass[j]), w))
        self._next_disk += pid.size

        self._drop(is_elem)
        return captured, returned

    def _resample(self):
        keep, w = self.resampler.choose(self.mass, self.p.pop_budget)
        order = np.argsort(keep)
        idx = keep[order]
        new_w = w[order]
        self.batch = self.batch.take(idx)
        self.mass = new_w
        self.eps_l = self.eps_l[idx]
        self.eps_r = self.eps_r[idx]
        for name in self._FIELDS:
            setattr(self, name, getattr(self, name)[idx])

    # -- driver ---------------------------------------------------------------
    def run_initial_growth(self):
        z0 = 2.0 / max(float(self.batch.lengths().max()), 1e-300)
        self.n0 = n0_threshold(max(z0, 1.0 + 1e-9), self.alpha, self.beta,
                               self.p.delta0) if self.p.initial_depth is None \
            else self.p.initial_depth
        self.cohorts[0]["eligible"] = self.n0
        return self.n0

    def step_once(self):
        self.step += 1
        pre = self.batch.lengths()
        self.batch.push()
        post = self.batch.lengths()
        capt = self.status == CAPTIVE
        if capt.any():
            self.cap_stretch[capt] *= post[capt] / np.maximum(pre[capt], 1e-300)
        cut_s, pid = plan_cuts(post, self.keep_thr, self.spacing)
        if cut_s.size:
            self._split(cut_s, pid)
        self._releases()
        self._growth_gates()
        self._rounds()
        if self.batch.n > self.p.pop_budget:
            self._resample()

    def run(self) -> BuildResult:
        self.run_initial_growth()
        worst = 0.0
        n_done = 0
        emitted = 0.0
        while self.step < self.p.n_max:
            self.step_once()
            emitted += float(sum(e.mass for e in self.elements[n_done:]))
            n_done = len(self.elements)
            live = float(self.mass.sum())
            worst = max(worst, abs(live + emitted - self.total_mass)
                        / self.total_mass)
            if live <= 0:
                break
        leftover = float(self.mass.sum())
        return BuildResult(
            host=self.host, total_mass=self.total_mass,
            elements=self.elements, leftover=leftover, n_max=self.p.n_max,
            n0=self.n0, rounds=self.rounds, t0_events=self.t0_events,
            wait_events=self.wait_events, sg_events=self.sg_events,
            release_profiles=self.release_profiles,
            release_check_failures=self.release_check_failures,
            tracked_intervals=self.tracked, steps_run=self.step,
            conservation_worst=worst)


def _unwind(chain):
    out = []
    while chain is not None:
        chain, ev = chain
        out.append(ev)
    return tuple(reversed(out))


def initial_growth(map_: MapModel, net: RectangleNet, host: int,
                   params: BuilderParams) -> PartitionBuilder:
    """Builder advanced through the initial-growth stage: the first
    definition round is scheduled at depth n0 but has not fired."""
    b = PartitionBuilder(map_, net, host, params)
    b.run_initial_growth()
    return b


def build_partition(map_: MapModel, net: RectangleNet, host: int,
                    params: BuilderParams) -> BuildResult:
    if params.n_max < 1:
        raise PreconditionError("n_max must be >= n0 >= 1")
    builder = PartitionBuilder(map_, net, host, params)
    result = builder.run()
    if params.n_max < result.n0:
        raise PreconditionError(f"n_max {params.n_max} < n0 {result.n0}")
    return result


# ----------------------------------------------------------------------
# compound geometric sums (tail machinery check)
# ----------------------------------------------------------------------

def compound_pmf_oracle(p_geom: float, k_geom: float, n_max: int) -> np.ndarray:
    """Exact pmf of sum_{i=0}^{K} xi_i on 0..n_max by direct convolution:
    xi ~ Geom(p) on {0,1,...} (pmf (1-p)p^n), K ~ Geom(k) independent."""
    n = np.arange(n_max + 1)
    xi = (1.0 - p_geom) * p_geom ** n
    out = np.zeros(n_max + 1)
    conv = xi.copy()                      # pmf of xi_0 + ... + xi_j
    w = 1.0 - k_geom                      # P(K = 0)
    for _ in range(10_000):
        out += w * conv
        if w < 1e-18:
            break
        conv = np.convolve(conv, xi)[: n_max + 1]
        w *= k_geom
    return out


def compound_tail_mc(p_geom: float, k_geom: float, trials: int, seed: int):
    """Monte Carlo of the compound geometric sum.

    Returns (tail, (C, theta, r2), oracle_cmp): the empirical tail, its
    log-linear fit over the well-populated range, and the comparison with
    the exact convolution tail on n <= 50 at three Monte Carlo sigmas.
    """
    if not (0 < p_geom < 1 and 0 < k_geom < 1):
        raise PreconditionError("rates must lie in (0, 1)")
    if trials < 10 ** 5:
        raise PreconditionError("need at least 1e5 trials")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=[6]))
    K = rng.geometric(1.0 - k_geom, size=trials) - 1
    S = np.zeros(trials, dtype=np.int64)
    alive = np.arange(trials)
    remaining = K + 1
    while alive.size:
        S[alive] += rng.geometric(1.0 - p_geom, size=alive.size) - 1
        remaining[alive] -= 1
        alive = alive[remaining[alive] > 0]
    n_top = max(int(S.max()) + 1, 51)
    counts = np.bincount(S, minlength=n_top + 1)
    emp_tail = (trials - np.cumsum(counts)) / trials
    n = np.arange(emp_tail.size)
    win = emp_tail * trials >= 30
    C, theta, r2 = loglinear_fit(n[win], emp_tail[win])

    oracle = compound_pmf_oracle(p_geom, k_geom, 60)
    oracle_tail = 1.0 - np.cumsum(oracle)
    cmp_n = np.arange(51)
    emp = emp_tail[cmp_n]
    sig = np.sqrt(np.maximum(oracle_tail[cmp_n] * (1 - oracle_tail[cmp_n]),
                             1e-300) / trials)
    ok = np.abs(emp - oracle_tail[cmp_n]) <= 3.0 * sig + 1e-9
    return emp_tail, (C, theta, r2), {
        "n": cmp_n, "oracle_tail": oracle_tail[cmp_n], "empirical": emp,
        "sigma": sig, "within_3sigma": ok}
