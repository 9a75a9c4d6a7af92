"""Experiment harness: sweeps, solves, exact evaluation, simulation, CSV output.

Each sweep point builds the exact model with every setup count allowed,
solves the requested MDP methods, lifts their policies to concrete states
and evaluates all policies exactly on that model. With a positive event
budget every policy is also simulated once per seed.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregation import (LevelScheme, build_level_scheme, build_multilevel_ctmdp,
                          build_uniform_agg_ctmdp, u_probs)
from .basic import build_basic_ctmdp
from .params import SystemParams
from .policies import default_threshold, lift_aggregated_policy, threshold_table
from .simulator import CSV_FIELDS, simulate
from .solver import (complexity_ratio, count_state_actions, evaluate_policy, action_slot_count,
                     relative_value_iteration)

log = logging.getLogger(__name__)

SWEEP_KEYS = {"c_perf": "c_perf", "lambda": "lam", "lam": "lam", "gamma": "gamma"}
METHODS = ("basic", "multilevel", "uniform", "bulk", "staggered")
# reported size reduction at C = Q = 100
REFERENCE_RATIOS = {50: 32.0, 20: 3125.0, 10: 100000.0}

EXACT_FIELDS = ("sweep", "value", "policy_name", "L", "model_gain", "EW", "EP", "ER")
SOLVER_FIELDS = ("sweep", "value", "policy_name", "L", "gain", "iterations", "state_count",
                 "action_count")
TIMING_FIELDS = ("sweep", "value", "policy_name", "L", "wallclock")


@dataclass
class ExperimentSpec:
    base: SystemParams
    sweep: str = "c_perf"
    values: list = field(default_factory=lambda: [50.0])
    methods: list = field(default_factory=lambda: list(METHODS))
    levels: list = field(default_factory=lambda: [10])
    uniform_levels: list | None = None
    seeds: list = field(default_factory=lambda: [0])
    horizon_events: int = 0
    output_dir: Path = Path("results")
    k: int = 1
    tol: float = 1e-8

    def __post_init__(self) -> None:
        if self.sweep not in SWEEP_KEYS:
            raise ValueError(f"sweep must be one of {sorted(SWEEP_KEYS)}, got {self.sweep!r}")
        if not self.values:
            raise ValueError("sweep list is empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if self.uniform_levels is None:
            self.uniform_levels = list(self.levels)
        for L in list(self.levels) + list(self.uniform_levels):
            if self.base.C % L:
                raise ValueError(f"level count {L} does not divide C={self.base.C}")
        self.output_dir = Path(self.output_dir)

    def point(self, value) -> SystemParams:
        return self.base.with_(**{SWEEP_KEYS[self.sweep]: float(value)})

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        base = SystemParams(**d.pop("params"))
        sweep = d.pop("sweep", {"param": "c_perf", "values": [base.c_perf]})
        return cls(base=base, sweep=sweep["param"], values=list(sweep["values"]),
                   methods=d.pop("methods", list(METHODS)), levels=d.pop("levels", [10]),
                   uniform_levels=d.pop("uniform_levels", None), seeds=d.pop("seeds", [0]),
                   horizon_events=int(d.pop("events", 0)),
                   output_dir=Path(d.pop("out", "results")), k=int(d.pop("k", 1)),
                   tol=float(d.pop("tol", 1e-8)))


@dataclass
class ExperimentReport:
    output_dir: Path
    files: dict
    exact_rows: list
    sim_rows: list
    solver_rows: list


class _Writer:
    """Serialised CSV writer that flushes every row, so a crash keeps partial results."""

    def __init__(self, path: Path, fields) -> None:
        self.fh = path.open("w", newline="")
        self.w = csv.DictWriter(self.fh, fieldnames=list(fields))
        self.w.writeheader()
        self.rows: list[dict] = []

    def write(self, row: dict) -> None:
        self.w.writerow({k: _fmt(v) for k, v in row.items()})
        self.fh.flush()
        self.rows.append(row)

    def close(self) -> None:
        self.fh.close()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _mdp_policies(spec: ExperimentSpec, params: SystemParams):
    """Yield (name, L, concrete table, solver row extras) for the MDP methods."""
    for m in spec.methods:
        if m == "basic":
            jobs = [("basic", None, lambda: build_basic_ctmdp(params))]
        elif m == "multilevel":
            jobs = [("multilevel", L, lambda L=L: build_multilevel_ctmdp(params, L))
                    for L in spec.levels]
        elif m == "uniform":
            jobs = [("uniform", L, lambda L=L: build_uniform_agg_ctmdp(params, L))
                    for L in spec.uniform_levels]
        else:
            continue
        for name, L, make in jobs:
            t0 = time.perf_counter()
            model = make()
            res = relative_value_iteration(model, tol=spec.tol)
            table = res.policy if name == "basic" else lift_aggregated_policy(res.policy, model, params)
            yield name, L, table, {
                "gain": res.gain, "iterations": res.iterations, "state_count": model.n_states,
                "action_count": model.n_pairs,
            }, time.perf_counter() - t0


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    out = spec.output_dir
    out.mkdir(parents=True, exist_ok=True)
    files = {k: out / f"{k}.csv" for k in ("exact", "solver", "simulation", "timing")}
    w_exact = _Writer(files["exact"], EXACT_FIELDS)
    w_solver = _Writer(files["solver"], SOLVER_FIELDS)
    w_sim = _Writer(files["simulation"], CSV_FIELDS)
    w_time = _Writer(files["timing"], TIMING_FIELDS)
    try:
        for value in spec.values:
            params = spec.point(value)
            key = {"sweep": spec.sweep, "value": float(value)}
            try:
                full = build_basic_ctmdp(params, full_actions=True)
                policies = []
                for name, L, table, srow, wall in _mdp_policies(spec, params):
                    tag = {**key, "policy_name": name, "L": "" if L is None else L}
                    w_solver.write({**tag, **srow})
                    w_time.write({**tag, "wallclock": wall})
                    policies.append((name, L, table, srow["gain"]))
                cfg = default_threshold(params, spec.k)
                for name in ("bulk", "staggered"):
                    if name in spec.methods:
                        policies.append((name, None, threshold_table(name, params, cfg), math.nan))
                for name, L, table, gain in policies:
                    ev = evaluate_policy(full, table)
                    w_exact.write({**key, "policy_name": name, "L": "" if L is None else L,
                                   "model_gain": gain, "EW": ev.E_W, "EP": ev.E_P, "ER": ev.gain})
                    if spec.horizon_events > 0:
                        for seed in spec.seeds:
                            sm = simulate(params, table, spec.horizon_events, seed=int(seed))
                            w_sim.write(sm.to_row(params, name, L, seed))
            except Exception as exc:
                raise RuntimeError(f"sweep point {spec.sweep}={value}: {exc}") from exc
    finally:
        for w in (w_exact, w_solver, w_sim, w_time):
            w.close()
    files["plot"] = write_gnuplot(spec, out)
    return ExperimentReport(out, files, w_exact.rows, w_sim.rows, w_solver.rows)


def write_gnuplot(spec: ExperimentSpec, out: Path) -> Path:
    """Script plotting EW, EP and ER of every policy against the sweep value."""
    names = []
    for m in spec.methods:
        if m == "multilevel":
            names += [("multilevel", L) for L in spec.levels]
        elif m == "uniform":
            names += [("uniform", L) for L in spec.uniform_levels]
        else:
            names.append((m, ""))
    lines = [
        "# gnuplot script; run from this directory with: gnuplot plots.gp",
        "set datafile separator ','",
        "set terminal pngcairo size 1400,420",
        f"set xlabel '{spec.sweep}'",
        "set key outside",
    ]
    if spec.sweep == "c_perf":
        lines.append("set logscale x")
    for col, label in ((6, "EW"), (7, "EP"), (8, "ER")):
        lines.append(f"set output '{label}.png'")
        lines.append(f"set ylabel '{label}'")
        parts = []
        for name, L in names:
            cond = f'(strcol(3) eq "{name}" && strcol(4) eq "{L}")'
            title = f"{name} L={L}" if L != "" else name
            parts.append(f"'exact.csv' every ::1 using ({cond} ? $2 : 1/0):{col} "
                         f"with linespoints title '{title}'")
        lines.append("plot " + ", \\\n     ".join(parts))
    path = out / "plots.gp"
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------- validation

@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    expected: str
    actual: str


@dataclass
class ValidationReport:
    checks: list
    ratios: list

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def format(self) -> str:
        out = []
        for c in self.checks:
            out.append(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: expected {c.expected}, got {c.actual}")
        if self.ratios:
            out.append("L    complexity-ratio  closed-form-ratio  (C/L)^5")
            for r in self.ratios:
                out.append(f"{r['L']:<4} {r['complexity_ratio']:>16.1f}  {r['closed_form_ratio']:>17.1f}"
                           f"  {r['scale']:>9.1f}")
        return "\n".join(out)


def collapse_deviation(params: SystemParams, scheme: LevelScheme | None = None) -> dict:
    """Largest rate/reward gap between the exact model and a K_B = K_I = 1 level model.

    Exact rows are mapped into level coordinates before comparison. Also
    returns the gap restricted to levels holding a single concrete state and
    the difference of optimal gains.
    """
    if scheme is None:
        scheme = build_level_scheme(params, params.C)
    if scheme.K_B != 1 or scheme.K_I != 1:
        raise ValueError(f"collapse needs K_B = K_I = 1, got {scheme.K_B}, {scheme.K_I}")
    basic = build_basic_ctmdp(params)
    ml = build_multilevel_ctmdp(params, scheme.L, scheme=scheme)
    cell = {}
    b_vals: dict = {}
    i_vals: dict = {}
    for b, i in basic.states.tolist():
        S = scheme.level_of(b, i)
        cell[(b, i)] = S
        b_vals.setdefault(S.B, set()).add(b)
        i_vals.setdefault(S.I, set()).add(i)
    # a level is single-valued when both of its coordinate ranges are
    single = {S for S in cell.values() if len(b_vals[S.B]) == 1 and len(i_vals[S.I]) == 1}
    worst = worst_single = 0.0
    for k, (b, i) in enumerate(basic.states.tolist()):
        S = cell[(b, i)]
        for a in basic.action_set((b, i)):
            mapped: dict = {}
            for t, r in basic.row((b, i), a).items():
                T = cell[t]
                mapped[T] = mapped.get(T, 0.0) + r
            if a in ml.action_set(S):
                agg = ml.row(S, a)
                dev = max(abs(mapped.get(T, 0.0) - agg.get(T, 0.0)) for T in set(mapped) | set(agg))
                dev = max(dev, abs(basic.rewards[basic.pair_index((b, i), a)]
                                   - ml.rewards[ml.pair_index(S, a)]))
            else:
                dev = math.inf
            worst = max(worst, dev)
            if S in single:
                worst_single = max(worst_single, dev)
    g_basic = relative_value_iteration(basic, tol=1e-10).gain
    g_ml = relative_value_iteration(ml, tol=1e-10).gain
    merged = {"busy": sorted(B for B, v in b_vals.items() if len(v) > 1),
              "iw": sorted(I for I, v in i_vals.items() if len(v) > 1)}
    return {"max_dev": worst, "max_dev_single": worst_single, "gain_basic": g_basic,
            "gain_multilevel": g_ml, "gain_gap": abs(g_basic - g_ml), "merged_levels": merged}


def bd_stationary(birth: float, death: float, K: int) -> np.ndarray:
    """Stationary vector of a K-state birth-death chain by a dense null-space solve."""
    G = np.zeros((K, K))
    for k in range(K - 1):
        G[k, k + 1] = birth
        G[k + 1, k] = death
    G -= np.diag(G.sum(axis=1))
    A = np.vstack([G.T, np.ones(K)])
    rhs = np.zeros(K + 1)
    rhs[-1] = 1.0
    return np.linalg.lstsq(A, rhs, rcond=None)[0]


def boundary_probability_gap(n: int = 200, seed: int = 0) -> float:
    """Worst gap between closed-form boundary probabilities and a direct solve."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        N_B = rng.uniform(0, 60)
        A = int(rng.integers(0, 6))
        K = int(rng.integers(1, 13))
        lam, mu, gam = rng.uniform(0.1, 50, size=3)
        birth = mu * N_B + gam * A * K
        pi = bd_stationary(birth, lam, K)
        lo, hi = u_probs(birth / lam, K)
        if K == 1:
            # a single meta-state is both boundaries
            worst = max(worst, abs(lo - 1.0), abs(hi - 1.0))
        else:
            worst = max(worst, abs(lo - pi[0]), abs(hi - pi[-1]))
    return worst


def validate(params: SystemParams, L_list=(50, 20, 10)) -> ValidationReport:
    checks = []
    col = collapse_deviation(params)
    checks.append(Check("collapse rows at L=C", col["max_dev"] < 1e-10, "< 1e-10",
                        f"{col['max_dev']:.3e} (single-state levels {col['max_dev_single']:.3e}, "
                        f"merged levels {col['merged_levels']})"))
    checks.append(Check("collapse gain at L=C", col["gain_gap"] < 1e-6, "< 1e-6",
                        f"{col['gain_gap']:.3e}"))
    full = collapse_deviation(params, singleton_scheme(params))
    checks.append(Check("collapse with C+1 single-state busy levels", full["max_dev"] < 1e-10
                        and full["gain_gap"] < 1e-6, "rows < 1e-10, gain < 1e-6",
                        f"rows {full['max_dev']:.3e}, gain {full['gain_gap']:.3e}"))
    cnt = count_state_actions("basic", params)
    checks.append(Check("exact-model action count", cnt.n_pairs_slots == action_slot_count(params.C, params.Q),
                        str(action_slot_count(params.C, params.Q)), str(cnt.n_pairs_slots)))
    ratios = []
    for L in L_list:
        c = count_state_actions("multilevel", params, L)
        checks.append(Check(f"level-model size bound L={L}",
                            c.n_states <= c.closed_states and c.n_pairs_slots <= c.closed_pairs,
                            f"|S|<={c.closed_states:.0f}, sum|A|<={c.closed_pairs:.0f}",
                            f"|S|={c.n_states}, sum|A|={c.n_pairs_slots}"))
        r = complexity_ratio(params, L)
        ratios.append(r)
        if params.C == params.Q == 100 and L in REFERENCE_RATIOS:
            ref = REFERENCE_RATIOS[L]
            checks.append(Check(f"size reduction L={L}", ref / 4 <= r["complexity_ratio"] <= ref * 4,
                                f"{ref:g} within x4", f"{r['complexity_ratio']:.1f}"))
    worst = boundary_probability_gap()
    checks.append(Check("boundary probabilities vs birth-death solve", worst < 1e-9, "< 1e-9",
                        f"{worst:.3e}"))
    return ValidationReport(checks, ratios)


def singleton_scheme(params: SystemParams) -> LevelScheme:
    """C+1 busy levels and I/W levels up to C: every level is one concrete value."""
    C = params.C
    return LevelScheme(C=C, Q=params.Q, L=C + 1, K_B=1, K_I=1, beta_lo=0, beta_hi=C + 1,
                       endpoints=tuple(range(C + 1)) + (C + 1,), neg_levels=params.Q)


def load_config(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
