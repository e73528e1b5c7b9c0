"""Pipeline orchestration: net -> filtrate -> partition -> refine -> verify
-> stats -> report, with a plain-text configuration, deterministic
per-stage seeding, and resumable stage artifacts.

Determinism contract: identical configuration and seed reproduce the
report files (report.json, tails.csv, axioms.json, stats/*.csv) byte for
byte; wall-clock timings go to a separate sidecar (timings.json), and the
report carries deterministic work counters instead.
"""

from __future__ import annotations

import json
import os
import pickle
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import ConfigurationError
from .filtration import ab_constants, delta1 as delta1_of, n0_threshold
from .maps import MapModel, get_map
from .partition import BuilderParams, build_partition, tail_histogram
from .rectangles import build_net, c1_probe, net_coverage
from .refine import (choose_base, refine, select_subfamily,
                     strong_connectivity_certificate, tail_fit_star,
                     verify_tail_conditions)
from .stats import (clt_test, coboundary_observable, correlation,
                    default_observables, large_deviations, variance)
from .verify import assemble, verification_report

STAGES = ("net", "filtrate", "partition", "refine", "verify", "stats",
          "report")

_DEFAULTS = {
    "map": "linear-cat",
    "lambda_c": 0.25,
    "kappa": 0.15,
    "delta0": 0.6,
    "delta1": "auto",          # auto = delta0 / (2 beta_bar)
    "delta2": "auto",          # auto = delta1 / 4
    "delta3": "auto",          # auto = c1 * delta2 (probed)
    "net_budget": 30000,
    "rect_depth": 4,
    "n_max": 2000,
    "pop_budget": 3000,
    "refine_depth": 40,
    "refine_population": 20000,
    "leftover_budget": 1e-4,
    "stats_block": 1000,
    "stats_samples": 10000,
    "seed": 0,
    "workers": 1,
    "plots": 0,
    "stages": "all",
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = dict(_DEFAULTS)
        merged.update(self.values)
        self.values = merged
        if self.stages_list() != list(STAGES[: len(self.stages_list())]):
            raise ConfigurationError("stages must form a prefix of "
                                     + "->".join(STAGES))
        for key in ("delta0",):
            if float(self.values[key]) <= 0:
                raise ConfigurationError(f"{key} must be positive")

    @classmethod
    def from_file(cls, path):
        vals = {}
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigurationError(f"bad config line: {line!r}")
                k, v = (s.strip() for s in line.split("=", 1))
                vals[k] = _coerce(v)
        return cls(vals)

    def stages_list(self):
        s = self.values["stages"]
        if s == "all":
            return list(STAGES)
        return [x.strip() for x in s.split(",") if x.strip()]

    def __getitem__(self, k):
        return self.values[k]

    def echo(self):
        return {k: self.values[k] for k in sorted(self.values)}


def _coerce(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


@dataclass
class RunReport:
    data: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_plain(self.data), sort_keys=True, indent=1)


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


class Pipeline:
    """Stage runner with on-disk artifacts for resumability."""

    def __init__(self, config: RunConfig, out_dir: str):
        self.cfg = config
        self.out = out_dir
        os.makedirs(out_dir, exist_ok=True)
        os.makedirs(os.path.join(out_dir, "stats"), exist_ok=True)
        self.timings = {}
        self.counters = {}
        self.report = RunReport({"schema_version": "1",
                                 "config": config.echo(),
                                 "versions": {"package": __version__,
                                              "numpy": np.__version__}})

    # -- artifact helpers -------------------------------------------------
    def _art(self, stage):
        return os.path.join(self.out, f"stage_{stage}.pkl")

    def _have(self, stage):
        return os.path.exists(self._art(stage))

    def _save(self, stage, obj):
        with open(self._art(stage), "wb") as fh:
            pickle.dump(obj, fh)

    def _load(self, stage):
        with open(self._art(stage), "rb") as fh:
            return pickle.load(fh)

    def _map(self) -> MapModel:
        name = self.cfg["map"]
        if name == "linear-cat":
            return get_map(name)
        if name == "solenoid":
            return get_map(name, lambda_c=float(self.cfg["lambda_c"]))
        return get_map(name, lambda_c=float(self.cfg["lambda_c"]),
                       kappa=float(self.cfg["kappa"]))

    def derived_constants(self, map_: MapModel):
        d0 = float(self.cfg["delta0"])
        alpha, beta = map_.lam, 4.0 * map_.d_u ** 1.5
        d1 = self.cfg["delta1"]
        d1 = delta1_of(d0, alpha, beta) if d1 == "auto" else float(d1)
        d2 = self.cfg["delta2"]
        d2 = d1 / 4.0 if d2 == "auto" else float(d2)
        a, b = ab_constants(alpha, beta, d0)
        return {"lambda": map_.lam, "L": map_.curvature_bound_L,
                "alpha": alpha, "beta": beta,
                "beta_bar": 2 * beta / (1 - alpha),
                "delta0": d0, "delta1": d1, "delta2": d2,
                "a": a, "b": b}

    # -- stages ------------------------------------------------------------
    def run(self, stages=None):
        requested = stages or self.cfg.stages_list()
        t_all = time.time()
        for stage in requested:
            if stage == "report":
                self.emit_reports()
                continue
            t0 = time.time()
            getattr(self, f"stage_{stage.replace('-', '_')}")()
            self.timings[stage] = time.time() - t0
        self.timings["total"] = time.time() - t_all
        with open(os.path.join(self.out, "timings.json"), "w") as fh:
            json.dump(self.timings, fh, sort_keys=True, indent=1)
        return self.report

    def stage_net(self):
        if self._have("net"):
            art = self._load("net")
            self.report.data.update(art["report"])
            return
        map_ = self._map()
        consts = self.derived_constants(map_)
        d3 = self.cfg["delta3"]
        if d3 == "auto":
            c1 = c1_probe(map_, consts["delta1"], consts["delta2"],
                          samples=150, seed=int(self.cfg["seed"]))
            d3 = c1 * consts["delta2"]
        else:
            c1 = None
            d3 = float(d3)
        net = build_net(map_, d3, int(self.cfg["net_budget"]),
                        consts["delta1"], consts["delta2"],
                        rect_depth=int(self.cfg["rect_depth"]),
                        seed=int(self.cfg["seed"]))
        cov = net_coverage(net, samples=20000, seed=int(self.cfg["seed"]) + 1)
        consts["delta3"] = d3
        consts["c1"] = c1
        rep = {"constants": consts,
               "net": {"centers": net.size, "delta3": d3, "coverage": cov}}
        self.report.data.update(rep)
        self.counters["net_centers"] = net.size
        self._save("net", {"net": net, "consts": consts, "report": rep})

    def stage_filtrate(self):
        if self._have("filtrate"):
            self.report.data.update(self._load("filtrate")["report"])
            return
        from .curves import UnstableCurve
        from .filtration import build_filtration, filtration_to_csv
        art = self._load("net")
        map_, consts = self._map(), art["consts"]
        base = art["net"].rectangle(0).base_curve
        filt = build_filtration(map_, base, consts_n0(map_, base, consts) + 3,
                                consts["delta0"])
        filtration_to_csv(filt, os.path.join(self.out, "filtration.csv"))
        ok = all(z <= r * (1 + 1e-9) for z, r in
                 zip(filt.z_values, filt.bound_rhs))
        rep = {"filtration": {"depth": filt.depth, "n0": filt.constants.n0,
                              "recursion_ok": ok,
                              "final_components": filt.counts[-1],
                              "interior_at_n0": filt.interior[
                                  min(filt.constants.n0, filt.depth)]}}
        self.report.data.update(rep)
        self._save("filtrate", {"report": rep})

    def stage_partition(self):
        if self._have("partition"):
            self.report.data.update(self._load("partition")["report"])
            return
        art = self._load("net")
        map_ = self._map()
        net = art["net"]
        params = BuilderParams(delta0=float(self.cfg["delta0"]),
                               n_max=int(self.cfg["n_max"]),
                               pop_budget=int(self.cfg["pop_budget"]),
                               seed=int(self.cfg["seed"]))
        parts = {}
        for r in range(net.size):
            parts[r] = build_partition(map_, net, r, params)
        host = 0
        res = parts[host]
        fit = None
        try:
            tr = tail_histogram(res)
            fit = {"C": tr.C, "theta": tr.theta, "r2": tr.r2}
        except Exception:
            fit = None
        elements_json(res, os.path.join(self.out, "elements.json"))
        tail_csv(res, os.path.join(self.out, "partition_tail.csv"))
        rep = {"partition": {
            "hosts": len(parts), "n0": res.n0,
            "elements": len(res.elements),
            "leftover_fraction": res.leftover / res.total_mass,
            "tracked_intervals": res.tracked_intervals,
            "identity_ok": all(e.identity_holds() for e in res.elements),
            "tail_fit": fit}}
        self.report.data.update(rep)
        self.counters["partition_elements"] = len(res.elements)
        self._save("partition", {"parts": parts, "report": rep})

    def stage_refine(self):
        if self._have("refine"):
            self.report.data.update(self._load("refine")["report"])
            return
        net = self._load("net")["net"]
        parts = self._load("partition")["parts"]
        system = select_subfamily(net, parts)
        base = choose_base(system)
        result = refine(system, base,
                        depth_max=int(self.cfg["refine_depth"]),
                        population=int(self.cfg["refine_population"]),
                        seed=int(self.cfg["seed"]))
        eps2, per_level, inc_fit = verify_tail_conditions(result)
        taus = [r.tau_star for r in result.refined] or [1]
        fit = tail_fit_star(result, fit_from=parts[base].n0,
                            n_max=max(taus))
        star_csv(fit, os.path.join(self.out, "star_tail.csv"))
        rep = {"refine": {
            "family": list(map(int, system.family)), "base": int(base),
            "strongly_connected": strong_connectivity_certificate(system),
            "epsilon2": eps2,
            "refined_elements": len(result.refined),
            "leftover": result.leftover / result.total_mass,
            "recursion_ok": all(r.recursion_holds() for r in result.refined),
            "tail_fit_star": {"C": fit.C, "theta": fit.theta, "r2": fit.r2},
            "increment_fit": {"C": inc_fit[0], "theta": inc_fit[1],
                              "r2": inc_fit[2]},
            "gcd_tau_star": int(np.gcd.reduce(
                np.array([r.tau_star for r in result.refined],
                         dtype=np.int64))) if result.refined else 0}}
        self.report.data.update(rep)
        self._save("refine", {"system": system, "base": base,
                              "result": result, "report": rep})

    def stage_verify(self):
        if self._have("verify"):
            self.report.data.update(self._load("verify")["report"])
            return
        net = self._load("net")["net"]
        art = self._load("refine")
        map_ = self._map()
        struct = assemble(map_, net, art["system"], art["base"],
                          art["result"], seed=int(self.cfg["seed"]))
        axioms = verification_report(struct)
        with open(os.path.join(self.out, "axioms.json"), "w") as fh:
            fh.write(json.dumps(_plain(axioms), sort_keys=True, indent=1))
        rep = {"axioms": axioms}
        self.report.data.update(rep)
        self._save("verify", {"report": rep})

    def stage_stats(self):
        if self._have("stats"):
            self.report.data.update(self._load("stats")["report"])
            return
        map_ = self._map()
        seed = int(self.cfg["seed"])
        obs = default_observables(map_)
        phi = next(iter(obs.values()))
        n_list = [1, 2, 4, 8, 16]
        est, err = correlation(map_, phi, phi, n_list, samples=200, seed=seed)
        sigma2, doubling = variance(map_, phi, 1000, samples=1000, seed=seed)
        ks, sigma, degenerate = clt_test(
            map_, phi, block_n=int(self.cfg["stats_block"]),
            samples=int(self.cfg["stats_samples"]), seed=seed)
        ld = large_deviations(map_, phi, 0.1, [100, 200, 400], seed=seed)
        with open(os.path.join(self.out, "stats", "correlation.csv"), "w") as fh:
            fh.write("n,estimate,error\n" + "\n".join(
                f"{n},{e!r},{s!r}" for n, e, s in zip(n_list, est, err)) + "\n")
        with open(os.path.join(self.out, "stats", "ldp.csv"), "w") as fh:
            fh.write("n,estimate,error\n" + "\n".join(
                f"{r['n']},{r['rate']!r},{int(r['censored'])}" for r in ld)
                + "\n")
        rep = {"stats": {"observable": phi.name,
                         "correlation": {str(n): [float(e), float(s)]
                                         for n, e, s in zip(n_list, est, err)},
                         "sigma2": sigma2, "sigma2_doubling": doubling,
                         "clt_ks": ks, "clt_sigma": sigma,
                         "clt_degenerate": degenerate,
                         "ldp": ld}}
        self.report.data.update(rep)
        self._save("stats", {"report": rep})

    def emit_reports(self):
        self.report.data["counters"] = dict(sorted(self.counters.items()))
        path = os.path.join(self.out, "report.json")
        with open(path, "w") as fh:
            fh.write(self.report.to_json())
        if int(self.cfg["plots"]):
            self._plots()
        return path

    def _plots(self):
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            return
        tail_path = os.path.join(self.out, "partition_tail.csv")
        if os.path.exists(tail_path):
            data = np.genfromtxt(tail_path, delimiter=",", names=True)
            fig, ax = plt.subplots()
            ax.semilogy(data["n"], np.maximum(data["mass"], 1e-300))
            ax.set_xlabel("n")
            ax.set_ylabel("tail mass")
            fig.savefig(os.path.join(self.out, "tail.svg"),
                        metadata={"Date": None})
            plt.close(fig)


def consts_n0(map_, base_curve, consts) -> int:
    from .curves import z_statistic
    z0 = z_statistic(base_curve)
    return n0_threshold(max(z0, 1 + 1e-9), consts["alpha"], consts["beta"],
                        consts["delta0"])


def elements_json(result, path):
    data = [{"mass": e.mass, "tau": e.tau, "target": e.target,
             "t0": e.t0, "phases": list(map(list, e.phases))}
            for e in result.elements[:50000]]
    with open(path, "w") as fh:
        json.dump(_plain(data), fh, sort_keys=True)


def tail_csv(result, path, fit=None):
    tail = result.tail()
    rows = ["n,mass,log_mass,fit_value"]
    try:
        rep = tail_histogram(result)
        fitted = rep.C * rep.theta ** np.arange(tail.size)
    except Exception:
        fitted = np.full(tail.size, np.nan)
    for n, m in enumerate(tail):
        lm = np.log(m) if m > 0 else -np.inf
        rows.append(f"{n},{m!r},{lm!r},{fitted[n]!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


def star_csv(fit, path):
    rows = ["n,mass,log_mass,fit_value"]
    fitted = fit.C * fit.theta ** fit.n
    for n, m, f in zip(fit.n, fit.mass, fitted):
        lm = np.log(m) if m > 0 else -np.inf
        rows.append(f"{n},{m!r},{lm!r},{f!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


def run_pipeline(config: RunConfig, out_dir: str, stages=None) -> RunReport:
    pipe = Pipeline(config, out_dir)
    return pipe.run(stages)
