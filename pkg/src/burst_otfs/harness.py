"""Seeded Monte Carlo scenarios, runtime measurement and result tables.

Seeding: every random draw of a trial comes from a Philox stream keyed by
``(base_seed, trial_index, stream)``.  The channel and pilot streams ignore
the sweep value, so one trial sees the same physical channel at every SNR,
pilot length or array size; the noise stream also mixes in the sweep value.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
import zlib
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
import yaml

from . import baselines as bl
from .model import (
    ChannelRealization,
    ClusterSpec,
    Path,
    SystemConfig,
    array_response,
    channel_from_coefficients,
    draw_cluster_channel,
    full_channel_matrix,
    generate_pilot,
    make_rng,
    nmse,
    random_paths,
    received_at_snr,
)
from .vbi import HyperParams, run_solver

log = logging.getLogger(__name__)

METHODS = ("ls", "l1", "ogvbi", "vector_ogvbi", "fast_vbi", "proposed")
ITERATIVE = ("ogvbi", "vector_ogvbi", "fast_vbi", "proposed")
METRICS = ("nmse", "runtime_s", "iterations", "support_energy_fraction")
SWEEP_AXES = ("snr_db", "L", "N_BS", "N_tau", "iterations")
STREAMS = {"channel": 1, "pilot": 2, "noise": 3}


# ---------------------------------------------------------------- config


def load_defaults() -> dict:
    text = resources.files(__package__).joinpath("defaults.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


@dataclass(frozen=True)
class PathSpec:
    aoa_deg: float
    delay_tap: int
    doppler_hz: float
    gain: complex | None = None  # None: drawn CN(0, 1/P)


@dataclass
class ScenarioConfig:
    name: str = "custom"
    system: SystemConfig = field(default_factory=SystemConfig)
    channel: ClusterSpec | tuple = field(default_factory=ClusterSpec)
    sweep_axis: str = "snr_db"
    sweep_values: tuple = (10.0,)
    methods: tuple = METHODS
    trials: int = 50
    base_seed: int = 0
    snr_db: float = 10.0
    solver: HyperParams = field(default_factory=HyperParams)
    baseline_max_iters: int = 60

    def __post_init__(self):
        self.sweep_values = tuple(self.sweep_values)
        self.methods = tuple(self.methods)
        if self.sweep_axis not in SWEEP_AXES:
            raise ValueError(f"sweep axis must be one of {SWEEP_AXES}")
        if not self.sweep_values:
            raise ValueError("empty sweep")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.methods:
            raise ValueError("no methods selected")
        bad = [m for m in self.methods if m not in METHODS and m != "oracle"]
        if bad:
            raise ValueError(f"unknown methods {bad}")
        if not isinstance(self.channel, ClusterSpec):
            self.channel = tuple(p if isinstance(p, PathSpec) else PathSpec(**p) for p in self.channel)

    def at(self, value):
        """``(system, snr_db, solver, baseline_iters)`` at one sweep value."""
        cfg, snr, hyper, it_b = self.system, self.snr_db, self.solver, self.baseline_max_iters
        ax = self.sweep_axis
        if ax == "snr_db":
            snr = float(value)
        elif ax in ("L", "N_BS", "N_tau"):
            cfg = cfg.replace(**{ax: int(value)})
        elif ax == "iterations":
            hyper = hyper.replace(max_iters=int(value))
            it_b = int(value)
        return cfg, snr, hyper, it_b


def _check_keys(d, allowed, where):
    extra = set(d) - set(allowed)
    if extra:
        raise ValueError(f"unknown keys in {where}: {sorted(extra)}")


SCENARIO_KEYS = ("name", "system", "channel", "paths", "sweep", "snr_db", "methods", "trials", "base_seed",
                 "solver", "baseline_max_iters")


def scenario_from_dict(d: dict, defaults: dict | None = None) -> ScenarioConfig:
    """Build a scenario from the documented config schema; defaults fill the gaps."""
    defaults = load_defaults() if defaults is None else defaults
    _check_keys(d, SCENARIO_KEYS, "scenario")
    sys_d = dict(defaults["system"])
    _check_keys(d.get("system", {}), sys_d, "system")
    sys_d.update(d.get("system", {}))
    if "paths" in d and "channel" in d:
        raise ValueError("give either channel (clusters) or paths, not both")
    if "paths" in d:
        paths = []
        for p in d["paths"]:
            _check_keys(p, PathSpec.__dataclass_fields__, "paths")
            p = dict(p)
            if p.get("gain") is not None:
                g = p["gain"]
                p["gain"] = complex(g[0], g[1]) if isinstance(g, (list, tuple)) else complex(g)
            paths.append(PathSpec(**p))
        channel = tuple(paths)
    else:
        ch_d = dict(defaults["channel"])
        _check_keys(d.get("channel", {}), ch_d, "channel")
        ch_d.update(d.get("channel", {}))
        ch_d["aoa_range_deg"] = tuple(ch_d["aoa_range_deg"])
        ch_d["delay_taps"] = tuple(ch_d["delay_taps"])
        channel = ClusterSpec(**ch_d)
    sol_d = dict(defaults["solver"])
    _check_keys(d.get("solver", {}), HyperParams.__dataclass_fields__, "solver")
    sol_d.update(d.get("solver", {}))
    sweep = d.get("sweep", {"axis": "snr_db", "values": [d.get("snr_db", defaults["snr_db"])]})
    _check_keys(sweep, ("axis", "values"), "sweep")
    return ScenarioConfig(
        name=d.get("name", "custom"),
        system=SystemConfig(**sys_d),
        channel=channel,
        sweep_axis=sweep["axis"],
        sweep_values=tuple(sweep["values"]),
        methods=tuple(d.get("methods", defaults["methods"])),
        trials=int(d.get("trials", defaults["trials"])),
        base_seed=int(d.get("base_seed", defaults["base_seed"])),
        snr_db=float(d.get("snr_db", defaults["snr_db"])),
        solver=HyperParams(**sol_d),
        baseline_max_iters=int(d.get("baseline_max_iters", defaults["baseline_max_iters"])),
    )


def load_scenario(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        d = yaml.safe_load(fh) or {}
    if not isinstance(d, dict):
        raise ValueError("config must be a mapping")
    return scenario_from_dict(d)


def figure_scenario(figure: str, trials=None, base_seed=None, methods=None, full=False) -> ScenarioConfig:
    """Preset for the SNR (2a), pilot-length (2b) and array-size (2c) sweeps."""
    dfl = load_defaults()
    if figure not in dfl["figures"]:
        raise ValueError(f"unknown figure {figure!r}; choose from {sorted(dfl['figures'])}")
    fig = dfl["figures"][figure]
    d = {
        "name": f"fig{figure}",
        "system": fig.get("system", {}),
        "sweep": {"axis": fig["axis"], "values": fig["values"]},
        "snr_db": fig.get("snr_db", dfl["snr_db"]),
        "trials": trials or (dfl["full_trials"] if full else dfl["trials"]),
        "base_seed": dfl["base_seed"] if base_seed is None else base_seed,
    }
    if methods:
        d["methods"] = list(methods)
    return scenario_from_dict(d, dfl)


# ---------------------------------------------------------------- results


@dataclass
class ResultRow:
    scenario: str
    method: str
    sweep_value: float
    metric: str
    value: float
    trials: int
    seed: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        self.value = float(self.value)
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite {self.metric} for {self.method}")

    def key(self):
        return (self.scenario, self.method, float(self.sweep_value), self.metric, self.seed)


def sweep_key(value) -> int:
    return zlib.crc32(repr(float(value)).encode())


def trial_seed(base_seed: int, trial_index: int, stream: str, sweep_value=None) -> np.random.SeedSequence:
    """Pure function of ``(base_seed, trial_index, stream[, sweep_value])``."""
    words = [int(base_seed) & 0xFFFFFFFF, int(trial_index), STREAMS[stream]]
    if sweep_value is not None:
        words.append(sweep_key(sweep_value))
    return np.random.SeedSequence(words)


@dataclass
class TrialData:
    cfg: SystemConfig
    channel: ChannelRealization
    x: np.ndarray
    Y: np.ndarray
    sigma2: float
    snr_db: float
    H: np.ndarray


def realize_channel(spec, cfg: SystemConfig, seed) -> ChannelRealization:
    if isinstance(spec, ClusterSpec):
        return draw_cluster_channel(cfg, spec, seed)
    rng = make_rng(seed)
    aoas = np.deg2rad([p.aoa_deg for p in spec])
    drawn = random_paths(aoas, cfg, rng, delay_taps=(1, cfg.N_tau))
    paths = []
    for p, q in zip(spec, drawn.paths):
        paths.append(Path(q.gain if p.gain is None else complex(p.gain), float(np.deg2rad(p.aoa_deg)),
                          int(p.delay_tap), float(cfg.hz_to_kappa(p.doppler_hz))))
    return ChannelRealization(paths).check(cfg)


def trial_data(scenario: ScenarioConfig, sweep_value, trial_index: int) -> TrialData:
    cfg, snr, _, _ = scenario.at(sweep_value)
    channel = realize_channel(scenario.channel, cfg, trial_seed(scenario.base_seed, trial_index, "channel"))
    x = generate_pilot(cfg, trial_seed(scenario.base_seed, trial_index, "pilot")).x
    rb = received_at_snr(channel, x, cfg, snr, trial_seed(scenario.base_seed, trial_index, "noise", sweep_value))
    return TrialData(cfg, channel, x, rb.Y, rb.sigma2, snr, full_channel_matrix(channel, cfg))


def run_method(method: str, data: TrialData, hyper: HyperParams, baseline_iters: int, callback=None,
               fixed_iters=False):
    """Run one estimator on a trial; ``fixed_iters`` disables early stopping."""
    cfg, Y, x = data.cfg, data.Y, data.x
    tol_b = 1e-300 if fixed_iters else 1e-6
    if fixed_iters:
        hyper = hyper.replace(tol=1e-300)
    if method == "ls":
        return bl.ls_estimate(Y, x, cfg, bl.oracle_kappa(data.channel, cfg))
    if method == "l1":
        return bl.l1_estimate(Y, x, cfg, bl.oracle_kappa(data.channel, cfg), data.sigma2)
    if method == "ogvbi":
        return bl.ogvbi_estimate(Y, x, cfg, c=hyper.c, d=hyper.d, max_iters=baseline_iters, tol=tol_b,
                                 callback=callback)
    if method == "vector_ogvbi":
        return bl.vector_ogvbi_estimate(Y, x, cfg, c=hyper.c, d=hyper.d, max_iters=baseline_iters, tol=tol_b,
                                        callback=callback)
    if method == "fast_vbi":
        return run_solver(Y, x, cfg, hyper.replace(prior_mode="iid"), callback=callback)
    if method == "proposed":
        return run_solver(Y, x, cfg, hyper.replace(prior_mode="hybrid"), callback=callback)
    if method == "oracle":
        return OracleResult(data.H)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class OracleResult:
    """Harness self-test: hands back the true channel."""

    H_hat: np.ndarray
    iters: int = 0
    diagnostics: dict = field(default_factory=dict)
    free_energy_trace: list = field(default_factory=list)


def _method_metadata(method, res, data: TrialData):
    diag = getattr(res, "diagnostics", {}) or {}
    meta = {"oracle_kappa": method in ("ls", "l1"), "snr_db": data.snr_db}
    if "reconstruction" in diag:
        meta["reconstruction"] = diag["reconstruction"]
    if method in ("fast_vbi", "proposed"):
        meta["free_energy_trace_length"] = len(res.free_energy_trace)
        meta["refinement"] = bool(diag.get("refinement", False))
        meta["converged"] = bool(res.converged)
    return meta


def run_trial(scenario: ScenarioConfig, sweep_value, trial_index: int) -> list:
    """All selected methods on one seeded draw; a failing method does not abort the trial."""
    data = trial_data(scenario, sweep_value, trial_index)
    _, _, hyper, it_b = scenario.at(sweep_value)
    rows = []
    for method in scenario.methods:
        t0 = time.perf_counter()
        try:
            res = run_method(method, data, hyper, it_b)
        except (ArithmeticError, np.linalg.LinAlgError, MemoryError, ValueError) as exc:
            log.warning("%s failed on trial %d at %s=%s: %s", method, trial_index, scenario.sweep_axis,
                        sweep_value, exc)
            rows.append(ResultRow(scenario.name, method, sweep_value, "iterations", 0, 1, trial_index,
                                  {"error": f"{type(exc).__name__}: {exc}"}))
            continue
        elapsed = time.perf_counter() - t0
        meta = _method_metadata(method, res, data)
        for metric, value in (("nmse", nmse([data.H], [res.H_hat])), ("runtime_s", elapsed),
                              ("iterations", res.iters)):
            rows.append(ResultRow(scenario.name, method, sweep_value, metric, value, 1, trial_index, dict(meta)))
    return rows


def _aggregate(scenario, raw):
    groups = {}
    for r in raw:
        if "error" in r.metadata:
            continue
        groups.setdefault((r.method, float(r.sweep_value), r.metric), []).append(r)
    out = []
    for (method, sv, metric), rs in groups.items():
        vals = [r.value for r in rs]
        meta = {k: v for k, v in rs[0].metadata.items() if k in ("oracle_kappa", "reconstruction", "refinement")}
        meta["per_trial"] = vals
        meta["failures"] = sum(1 for r in raw if r.method == method and float(r.sweep_value) == sv
                               and "error" in r.metadata)
        meta["sweep_axis"] = scenario.sweep_axis
        meta["system"] = asdict(scenario.at(sv)[0])
        out.append(ResultRow(scenario.name, method, sv, metric, float(np.mean(vals)), len(vals),
                             scenario.base_seed, meta))
    return sorted(out, key=lambda r: (METHODS.index(r.method) if r.method in METHODS else 99, r.sweep_value,
                                      METRICS.index(r.metric)))


def run_sweep(scenario: ScenarioConfig, progress=None) -> list:
    """Trial-averaged rows for every (method, sweep value, metric)."""
    raw = []
    for sv in scenario.sweep_values:
        for i in range(scenario.trials):
            raw.extend(run_trial(scenario, sv, i))
            if progress is not None:
                progress(sv, i)
    return _aggregate(scenario, raw)


def table_value(rows, method, sweep_value, metric="nmse"):
    for r in rows:
        if r.method == method and float(r.sweep_value) == float(sweep_value) and r.metric == metric:
            return r.value
    raise KeyError((method, sweep_value, metric))


# ---------------------------------------------------------------- runtime


def measure_runtime(scenario: ScenarioConfig, repeats=3, caps=None) -> list:
    """Median wall time per method and ``N_tau`` at fixed iteration counts.

    A two-iteration warm-up precedes the timed repeats.  Rows carry the
    per-iteration time in the metadata.
    """
    if scenario.sweep_axis != "N_tau":
        raise ValueError("runtime measurement sweeps N_tau")
    if repeats < 3:
        raise ValueError("need at least 3 repeats")
    caps = {"proposed": 80, "default": 60} if caps is None else caps
    rows = []
    for sv in scenario.sweep_values:
        data = trial_data(scenario, sv, 0)
        _, _, hyper, _ = scenario.at(sv)
        for method in scenario.methods:
            cap = caps.get(method, caps["default"])
            h = hyper.replace(max_iters=cap)
            run_method(method, data, h.replace(max_iters=2), 2, fixed_iters=True)
            times, iters = [], []
            for _ in range(repeats):
                t0 = time.perf_counter()
                res = run_method(method, data, h, cap, fixed_iters=True)
                times.append(time.perf_counter() - t0)
                iters.append(res.iters)
            med = statistics.median(times)
            rows.append(ResultRow(scenario.name, method, sv, "runtime_s", med, repeats, scenario.base_seed,
                                  {"times": times, "iterations": iters[0],
                                   "per_iteration_s": med / max(iters[0], 1)}))
    return rows


def runtime_scenario(values=None, methods=None, base_seed=None) -> ScenarioConfig:
    dfl = load_defaults()
    d = {"name": "runtime", "sweep": {"axis": "N_tau", "values": values or dfl["runtime"]["values"]},
         "trials": 1, "base_seed": dfl["base_seed"] if base_seed is None else base_seed}
    if methods:
        d["methods"] = list(methods)
    return scenario_from_dict(d, dfl)


# ---------------------------------------------------------------- support recovery


def angular_profile(U):
    """Per-grid-point modulus ``sum_n |U[m, n]|``."""
    return np.sum(np.abs(U), axis=1)


def support_energy_fraction(U, theta, true_aoas, window=math.radians(1.0)):
    """Share of ``sum_n |U[m, n]|^2`` on grid points within ``window`` of a true AoA."""
    energy = np.sum(np.abs(U) ** 2, axis=1)
    total = energy.sum()
    if total <= 0:
        return 0.0
    near = np.min(np.abs(np.subtract.outer(theta, np.asarray(true_aoas))), axis=1) <= window + 1e-12
    return float(energy[near].sum() / total)


def local_maxima(profile, theta, floor=0.01):
    """Grid angles whose profile value beats both angular neighbours and ``floor * max``."""
    order = np.argsort(theta)
    p = np.asarray(profile)[order]
    th = np.asarray(theta)[order]
    padded = np.r_[-np.inf, p, -np.inf]
    is_max = (p >= padded[:-2]) & (p >= padded[2:]) & (p > floor * p.max())
    return th[is_max]


def aoas_with_peak(profile, theta, true_aoas, window=math.radians(1.0)):
    peaks = local_maxima(profile, theta)
    return [bool(peaks.size and np.min(np.abs(peaks - a)) <= window + 1e-12) for a in true_aoas]


def support_setup(simulation: str):
    """``(system, snr_db, solver, true_aoas_rad)`` for an angular support study."""
    dfl = load_defaults()
    sim = dfl["support"].get(str(simulation))
    if sim is None:
        raise ValueError(f"unknown simulation {simulation!r}; choose from {sorted(dfl['support'])}")
    aoas = [a for b in sim["bursts_deg"] for a in b] + list(sim["isolated_deg"])
    return SystemConfig(**dfl["system"]), float(sim["snr_db"]), HyperParams(**dfl["solver"]), np.deg2rad(aoas)


def support_recovery_report(simulation: str, trials=20, base_seed=None, methods=("proposed", "fast_vbi")):
    """Angular support study with fixed AoAs and random gains, delays and Dopplers.

    Returns ``(rows, profiles)``; ``profiles[method]`` lists per-trial
    ``(theta, modulus)`` pairs and the rows hold per-trial
    ``support_energy_fraction`` values (seed = trial index) plus, for
    every trial, whether all true AoAs have a nearby profile peak.
    """
    cfg, snr, hyper, aoas = support_setup(simulation)
    base_seed = load_defaults()["base_seed"] if base_seed is None else base_seed
    name = f"sim{simulation}"
    rows, profiles = [], {m: [] for m in methods}
    for i in range(trials):
        channel = random_paths(aoas, cfg, make_rng(trial_seed(base_seed, i, "channel")))
        x = generate_pilot(cfg, trial_seed(base_seed, i, "pilot")).x
        rb = received_at_snr(channel, x, cfg, snr, trial_seed(base_seed, i, "noise", snr))
        for m in methods:
            mode = "hybrid" if m == "proposed" else "iid"
            res = run_solver(rb.Y, x, cfg, hyper.replace(prior_mode=mode))
            prof = angular_profile(res.U)
            profiles[m].append((res.theta_refined, prof))
            hits = aoas_with_peak(prof, res.theta_refined, aoas)
            rows.append(ResultRow(name, m, snr, "support_energy_fraction",
                                  support_energy_fraction(res.U, res.theta_refined, aoas), 1, i,
                                  {"all_aoas_peaked": all(hits), "aoas_peaked": hits,
                                   "prior": mode, "true_aoas_deg": np.rad2deg(aoas).round(6).tolist()}))
    return rows, profiles


# ---------------------------------------------------------------- convergence


def nmse_trace(method, data: TrialData, hyper, cap):
    """NMSE after every iteration of an iterative method, padded to ``cap``."""
    cfg = data.cfg
    trace = []
    if method in ("fast_vbi", "proposed"):
        def cb(it, state, dico):
            trace.append(nmse([data.H], [channel_from_coefficients(state.coefficients(), dico.A, dico.kappa, cfg.L)]))
    elif method == "ogvbi":
        def cb(it, C, theta):
            U, kappa, A, _ = bl.ogvbi_reconstruct(C, theta, data.x, cfg)
            trace.append(nmse([data.H], [channel_from_coefficients(U, A, kappa, cfg.L)]))
    elif method == "vector_ogvbi":
        def cb(it, U, theta, dk):
            A, _ = array_response(theta, cfg)
            trace.append(nmse([data.H], [channel_from_coefficients(U, A, dk, cfg.L)]))
    else:
        raise ValueError(f"{method} is not iterative")
    run_method(method, data, hyper.replace(max_iters=cap), cap, callback=cb)
    return trace + [trace[-1]] * (cap - len(trace))


def settle_iteration(trace, rel=0.05):
    """First (1-based) iteration from which NMSE stays within ``rel`` of the final value."""
    final = trace[-1]
    ok = np.abs(np.asarray(trace) - final) <= rel * abs(final)
    bad = np.flatnonzero(~ok)
    return 1 if bad.size == 0 else int(bad[-1]) + 2


def convergence_report(snrs=(0, 10, 20), trials=5, base_seed=None, methods=ITERATIVE, caps=None):
    """Trial-averaged NMSE traces and the iteration where each settles within 5% of its end value."""
    caps = {"proposed": 80, "default": 60} if caps is None else caps
    dfl = load_defaults()
    sc = scenario_from_dict({"name": "convergence", "sweep": {"axis": "snr_db", "values": list(snrs)},
                             "trials": trials, "methods": list(methods),
                             "base_seed": dfl["base_seed"] if base_seed is None else base_seed}, dfl)
    report = {}
    for snr in snrs:
        for m in methods:
            cap = caps.get(m, caps["default"])
            traces = []
            for i in range(trials):
                data = trial_data(sc, snr, i)
                traces.append(nmse_trace(m, data, sc.solver, cap))
            mean = np.mean(traces, axis=0)
            report[(m, snr)] = {"trace": mean.tolist(), "settled_at": settle_iteration(mean), "cap": cap}
    return report


# ---------------------------------------------------------------- output


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating, float)):
        return float(o)
    if isinstance(o, complex):
        return [o.real, o.imag]
    return o


CSV_HEADER = ("scenario", "method", "sweep_value", "metric", "value", "trials", "seed")


def render_results(rows, fmt="csv") -> str:
    if not rows:
        raise ValueError("no result rows to write")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r.scenario, r.method, repr(float(r.sweep_value)), r.metric, repr(float(r.value)),
                        r.trials, r.seed])
        return buf.getvalue()
    if fmt == "json":
        defaults = load_defaults()
        doc = {"defaults": {k: defaults[k] for k in ("system", "channel", "solver", "full_trials")},
               "rows": [_jsonable(asdict(r)) for r in rows]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def emit_results(rows, path, fmt="csv"):
    """Write rows as CSV or JSON; nothing is created for an empty table."""
    text = render_results(rows, fmt)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path
