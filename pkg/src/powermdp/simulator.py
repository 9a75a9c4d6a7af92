"""Discrete-event simulation of the server farm under a stationary policy.

Events come from an exponential race between arrivals (lambda), service
completions (mu per busy server) and setup completions (gamma per setup
server). After each event the policy sees (b, i) and the setup/idle counts
are adjusted on the spot. Randomness comes from numpy's PCG64 generator,
so a seed fixes the output bit for bit.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .basic import enumerate_states
from .params import SystemParams

log = logging.getLogger(__name__)

MIN_EVENTS = 10_000
CHUNK = 1 << 16

CSV_FIELDS = ("lambda", "mu", "gamma", "C", "Q", "c_perf", "policy_name", "L", "seed",
              "events", "EW", "EP", "ER", "drop_frac", "ci_EW", "ci_EP", "ci_ER")


class PolicyError(ValueError):
    pass


@dataclass
class SimState:
    busy: int = 0
    idle: int = 0
    setup: int = 0
    queue: int = 0
    clock: float = 0.0

    @property
    def i(self) -> int:
        return self.idle if self.queue == 0 else -self.queue


@dataclass(frozen=True)
class SimMetrics:
    mean_wait_count: float
    mean_power: float
    mean_reward: float
    drop_fraction: float
    ci_EW: float
    ci_EP: float
    ci_ER: float
    se_EW: float
    se_EP: float
    se_ER: float
    events: int
    sim_time: float
    arrivals: int
    drops: int

    def to_row(self, params: SystemParams, policy_name: str, L, seed) -> dict:
        return {
            "lambda": params.lam, "mu": params.mu, "gamma": params.gamma, "C": params.C,
            "Q": params.Q, "c_perf": params.c_perf, "policy_name": policy_name,
            "L": "" if L is None else L, "seed": seed, "events": self.events,
            "EW": self.mean_wait_count, "EP": self.mean_power, "ER": self.mean_reward,
            "drop_frac": self.drop_fraction, "ci_EW": self.ci_EW, "ci_EP": self.ci_EP,
            "ci_ER": self.ci_ER,
        }

    def as_dict(self) -> dict:
        return asdict(self)


def _table_lookup(policy, params: SystemParams) -> list[list[int]]:
    """Dense [b][i + Q] action table, checked for feasibility once up front."""
    C, Q = params.C, params.Q
    states = enumerate_states(params)
    if callable(policy):
        acts = [int(policy(b, i)) for b, i in states]
    else:
        acts = [int(a) for a in np.asarray(policy).tolist()]
        if len(acts) != len(states):
            raise PolicyError(f"policy table has {len(acts)} entries, expected {len(states)}")
    table = [[0] * (Q + C + 1) for _ in range(C + 1)]
    for (b, i), a in zip(states, acts):
        ip = max(i, 0)
        if not -ip <= a <= C - b - ip:
            raise PolicyError(f"policy returned infeasible action {a} in state ({b}, {i})")
        table[b][i + Q] = a
    return table


def simulate(params: SystemParams, policy: Callable[[int, int], int] | np.ndarray,
             horizon_events: int = 1_000_000, seed: int = 0, warmup_fraction: float = 0.1,
             n_batches: int = 32, accounting: str = "epoch",
             check_invariants: bool = False) -> SimMetrics:
    """Simulate ``horizon_events`` events starting from an empty, all-off farm.

    ``policy`` is either a callable (b, i) -> action or a table over the
    canonical state order. With ``accounting="epoch"`` idle power over a
    sojourn is charged at the idle count seen by the decision (before any
    shutdown), matching the MDP cost; ``"physical"`` charges the idle count
    left after the command.
    """
    if horizon_events < MIN_EVENTS:
        raise ValueError(f"horizon_events must be at least {MIN_EVENTS}")
    if not 0.0 <= warmup_fraction < 1.0:
        raise ValueError("warmup_fraction must lie in [0, 1)")
    if accounting not in ("epoch", "physical"):
        raise ValueError(f"unknown accounting mode {accounting!r}")
    table = _table_lookup(policy, params)
    C, Q = params.C, params.Q
    lam, mu, gam = params.lam, params.mu, params.gamma
    cw, cpw, cst = params.c_perf, params.c_power, params.c_power_setup
    physical = accounting == "physical"

    warm = int(horizon_events * warmup_fraction)
    measured = horizon_events - warm
    if measured < n_batches:
        raise ValueError("too few measured events for the batch count")
    batch_len = measured // n_batches
    b_time = np.zeros(n_batches)
    b_wait = np.zeros(n_batches)
    b_power = np.zeros(n_batches)

    rng = np.random.Generator(np.random.PCG64(seed))
    busy = idle = setup = queue = 0
    # the decision at t = 0
    a = table[0][Q]
    setup = a if a >= 0 else 0
    cost_idle = idle
    if a < 0:
        idle += a
    if physical:
        cost_idle = idle

    clock = 0.0
    arrivals = drops = 0
    acc_t = acc_w = acc_p = 0.0
    batch = 0
    in_batch = 0
    n = 0
    while n < horizon_events:
        exps = rng.standard_exponential(CHUNK).tolist()
        unis = rng.random(CHUNK).tolist()
        for k in range(CHUNK):
            if n >= horizon_events:
                break
            r_srv = busy * mu
            r_set = setup * gam
            total = lam + r_srv + r_set
            dt = exps[k] / total
            if n >= warm:
                acc_t += dt
                acc_w += queue * dt
                acc_p += (cpw * cost_idle + cst * setup) * dt
            clock += dt
            u = unis[k] * total
            counted = n >= warm
            if u < lam:
                if counted:
                    arrivals += 1
                if idle > 0:
                    idle -= 1
                    busy += 1
                elif queue < Q:
                    queue += 1
                elif counted:
                    drops += 1
            elif u < lam + r_srv:
                if queue > 0:
                    queue -= 1          # the freed server takes the head-of-line job
                else:
                    busy -= 1
                    idle += 1
            else:
                setup -= 1
                if queue > 0:
                    queue -= 1
                    busy += 1
                else:
                    idle += 1
            i = idle if queue == 0 else -queue
            a = table[busy][i + Q]
            cost_idle = idle
            if a >= 0:
                setup = a
            else:
                setup = 0
                idle += a
            if physical:
                cost_idle = idle
            if check_invariants:
                assert busy + idle + setup <= C and min(busy, idle, setup, queue) >= 0
                assert not (idle > 0 and queue > 0) and queue <= Q
            n += 1
            if counted:
                in_batch += 1
                if in_batch == batch_len and batch < n_batches:
                    b_time[batch], b_wait[batch], b_power[batch] = acc_t, acc_w, acc_p
                    batch += 1
                    in_batch = 0
                    acc_t = acc_w = acc_p = 0.0
    # leftover events (measured % n_batches) fold into the last batch
    if acc_t > 0:
        b_time[-1] += acc_t
        b_wait[-1] += acc_w
        b_power[-1] += acc_p

    T = b_time.sum()
    EW = b_wait.sum() / T
    EP = b_power.sum() / T
    ER = -(cw * EW + EP)
    mw, mp = b_wait / b_time, b_power / b_time
    mr = -(cw * mw + mp)
    tq = float(stats.t.ppf(0.975, n_batches - 1))
    se = [float(np.std(x, ddof=1) / np.sqrt(n_batches)) for x in (mw, mp, mr)]
    return SimMetrics(
        mean_wait_count=float(EW), mean_power=float(EP), mean_reward=float(ER),
        drop_fraction=drops / arrivals if arrivals else 0.0,
        ci_EW=tq * se[0], ci_EP=tq * se[1], ci_ER=tq * se[2],
        se_EW=se[0], se_EP=se[1], se_ER=se[2],
        events=horizon_events, sim_time=clock, arrivals=arrivals, drops=drops,
    )
