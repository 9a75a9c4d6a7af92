"""Multi-level aggregation of the exact model, plus the uniform baseline.

Busy counts are grouped into L levels sized from a Poisson confidence
interval around rho; I/W values are grouped into blocks of K_I = C/L.
Inside a level the busy count is treated as Poisson(rho) restricted to the
level, and the I/W value as a birth-death chain with birth rate
mu*N_B + gamma*A+*K_I and death rate lambda. Level-to-level rates then only
depend on the probabilities of sitting on a level boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .basic import build_basic_ctmdp, state_index
from .model import CtmdpModel, assemble
from .numerics import poisson_logpmf_range, poisson_quantile
from .params import SystemParams

ETA_ONE_TOL = 1e-9


class ConfigError(ValueError):
    pass


class AggState(NamedTuple):
    B: int
    I: int


@dataclass(frozen=True)
class LevelScheme:
    C: int
    Q: int
    L: int
    K_B: int
    K_I: int
    beta_lo: int
    beta_hi: int
    endpoints: tuple[int, ...]
    neg_levels: int
    q_lo: int = 0
    q_hi: int = 0

    @property
    def top_level(self) -> int:
        return self.L - 1

    def busy_range(self, B: int) -> tuple[int, int]:
        """Inclusive busy-count range of level B (edge levels absorb the tails)."""
        return self.endpoints[B], self.endpoints[B + 1] - 1

    def busy_level(self, b):
        inner = np.asarray(self.endpoints[1:self.L])
        return np.searchsorted(inner, b, side="right")

    def iw_level(self, i):
        lvl = np.floor_divide(i, self.K_I)
        return np.clip(lvl, -self.neg_levels, self.L - 1)

    def level_of(self, b: int, i: int) -> AggState:
        return AggState(int(self.busy_level(b)), int(self.iw_level(i)))

    def lower_busy(self, B: int) -> int:
        return self.endpoints[B]

    def feasible(self, B: int, I: int) -> bool:
        return self.endpoints[B] + max(I, 0) * self.K_I <= self.C


@dataclass(frozen=True)
class UniformScheme:
    """Equal-width grid used by the uniform aggregation baseline."""

    C: int
    Q: int
    L: int
    K: int
    neg_levels: int
    endpoints: tuple[int, ...] = field(default=())

    @property
    def K_I(self) -> int:
        return self.K

    @property
    def top_level(self) -> int:
        # b = C (and i = C) sit in a cell of their own when K > 1
        return self.C // self.K

    def busy_level(self, b):
        return np.floor_divide(b, self.K)

    def iw_level(self, i):
        return np.maximum(np.floor_divide(i, self.K), -self.neg_levels)

    def level_of(self, b: int, i: int) -> AggState:
        return AggState(int(self.busy_level(b)), int(self.iw_level(i)))

    def lower_busy(self, B: int) -> int:
        return B * self.K

    def feasible(self, B: int, I: int) -> bool:
        return B * self.K + max(I, 0) * self.K <= self.C


@dataclass(frozen=True)
class BoundaryStats:
    p_lo: float
    p_hi: float
    N_B: float
    N_B_minus: float


def _level_size(C: int, L: int, allow_rounding: bool) -> int:
    if L < 1 or int(L) != L:
        raise ConfigError(f"level count must be a positive integer, got {L!r}")
    if C % L:
        if not allow_rounding:
            raise ConfigError(f"L={L} does not divide C={C}; pass allow_rounding=True "
                              "to use K_I = ceil(C/L)")
        return -(-C // L)
    return C // L


def build_level_scheme(params: SystemParams, L: int, allow_rounding: bool = False) -> LevelScheme:
    if L < 2:
        raise ConfigError("the multi-level model needs at least two levels")
    K_I = _level_size(params.C, L, allow_rounding)
    rho = params.rho
    q_lo = poisson_quantile(params.epsilon / 2, rho)
    q_hi = poisson_quantile(1 - params.epsilon / 2, rho)
    # level size is the confidence-interval width split over L levels, rounded up
    K_B = max(1, math.ceil((q_hi - q_lo) / L))
    beta_lo = max(0, math.floor(rho - K_B * L / 2))
    beta_hi = math.ceil(rho + K_B * L / 2)
    # keep the top endpoint inside {0..C}; the interval then slides down
    beta_lo = min(beta_lo, params.C - (L - 1) * K_B)
    if beta_lo < 0:
        raise ConfigError(f"{L} busy levels of size {K_B} do not fit in C={params.C}")
    endpoints = (0,) + tuple(B * K_B + beta_lo for B in range(1, L)) + (params.C + 1,)
    neg_levels = -(-params.Q // K_I)
    return LevelScheme(C=params.C, Q=params.Q, L=L, K_B=K_B, K_I=K_I,
                       beta_lo=beta_lo, beta_hi=beta_hi, endpoints=endpoints,
                       neg_levels=neg_levels, q_lo=q_lo, q_hi=q_hi)


def boundary_stats(B: int, scheme: LevelScheme, params: SystemParams) -> BoundaryStats:
    """Boundary probabilities and conditional means of busy level B.

    All ratios are formed in log-space, so levels far in the tail do not
    underflow to 0/0.
    """
    if not 0 <= B < scheme.L:
        raise IndexError(f"busy level {B} outside 0..{scheme.L - 1}")
    lo, hi = scheme.busy_range(B)
    logf = poisson_logpmf_range(lo, hi, params.rho)
    logD = logsumexp(logf)
    if not np.isfinite(logD):
        raise FloatingPointError(f"level {B} carries no probability mass")
    w = np.exp(logf - logD)
    x = np.arange(lo, hi + 1)
    return BoundaryStats(p_lo=float(w[0]), p_hi=float(w[-1]),
                         N_B=float(np.dot(x, w)), N_B_minus=float(np.dot(x[1:], w[1:])))


def eta(A: int, K_I: int, stats: BoundaryStats, params: SystemParams) -> float:
    """Birth/death ratio of the I/W birth-death chain inside a level."""
    return (params.mu * stats.N_B + max(A, 0) * K_I * params.gamma) / params.lam


def u_probs(e: float, K_I: int) -> tuple[float, float]:
    """Probabilities of the lowest and highest I/W value inside a level."""
    if K_I == 1:
        return 1.0, 1.0
    if e == 0.0:
        return 1.0, 0.0
    if abs(e - 1.0) < ETA_ONE_TOL:
        return 1.0 / K_I, 1.0 / K_I
    d = e - 1.0
    if e < 1.0:
        # log1p keeps precision next to 1; log is exact enough elsewhere
        log_e = math.log1p(d) if d > -0.5 else math.log(e)
        u_lo = -d / -math.expm1(K_I * log_e)
        return u_lo, math.exp((K_I - 1) * math.log(e)) * u_lo
    # written in t = 1/eta so nothing overflows for large eta
    t = 1.0 / e
    u_hi = (1.0 - t) / -math.expm1(K_I * math.log(t))
    return math.exp((K_I - 1) * math.log(t)) * u_hi, u_hi


def i_bar(I: int, e: float, K_I: int, u_lo: float) -> float:
    """Expected I/W value of level I under the birth-death weights."""
    if K_I == 1 or e == 0.0:
        return float(I * K_I)
    k = np.arange(K_I)
    w = np.exp(math.log(u_lo) + k * math.log(e))
    return float(np.dot(I * K_I + k, w))


class HRates(NamedTuple):
    up_stay: float      # B+1, I
    down_stay: float    # B-1, I
    stay_up: float      # B, I+1
    stay_down: float    # B, I-1
    up_up: float        # B+1, I+1
    up_down: float      # B+1, I-1
    down_up: float      # B-1, I+1


# (dB, dI) for each field of HRates, same order
H_MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1))


def h_rates(S: tuple[int, int], A_plus: int, scheme, stats: BoundaryStats,
            params: SystemParams, shifted_level: int | None = None,
            queue_at_zero: bool = True) -> HRates:
    """Level transition rates out of S under the setup part A+ of an action.

    ``shifted_level`` is the I/W level after idle servers are switched off
    (I + A-). With ``queue_at_zero`` an arrival that finds the I/W value at
    0 joins the queue instead of occupying a server, as in the exact model;
    set it to False for the bare case expressions.
    """
    B, I = S
    K_I = scheme.K_I
    lam, mu, gam = params.lam, params.mu, params.gamma
    e = eta(A_plus, K_I, stats, params)
    u_lo, u_hi = u_probs(e, K_I)
    p_lo, p_hi = stats.p_lo, stats.p_hi
    setup = gam * A_plus * K_I
    U_B = scheme.lower_busy(B)
    if I >= 0:
        lvl = I if shifted_level is None else shifted_level
        up_down = lam * p_hi * u_lo
        stay_down = (1 - p_hi) * lam * u_lo
        if queue_at_zero and lvl == 0:
            stay_down, up_down = lam * u_lo, 0.0
        return HRates(
            up_stay=lam * p_hi * (1 - u_lo),
            down_stay=mu * U_B * p_lo * (1 - u_hi),
            stay_up=u_hi * (setup + (1 - p_lo) * mu * stats.N_B_minus),
            stay_down=stay_down,
            up_up=0.0,
            up_down=up_down,
            down_up=U_B * mu * p_lo * u_hi,
        )
    return HRates(
        up_stay=setup * p_hi * (1 - u_hi),
        down_stay=0.0,
        stay_up=u_hi * (mu * stats.N_B + (1 - p_hi) * setup),
        stay_down=lam * u_lo,
        up_up=setup * p_hi * u_hi,
        up_down=0.0,
        down_up=0.0,
    )


def agg_states(scheme) -> list[AggState]:
    """Level pairs that contain at least one feasible concrete state."""
    out = []
    top = scheme.top_level + 1
    for I in range(-scheme.neg_levels, top):
        for B in range(top):
            if scheme.feasible(B, I):
                out.append(AggState(B, I))
    return out


def agg_action_set(S: tuple[int, int], scheme, mode: str = "all") -> list[int]:
    """{-I+, ..., 0} plus the bulk level action.

    ``mode="bulk_when_waiting"`` keeps only the bulk action on waiting-job levels.
    """
    B, I = S
    ip = max(I, 0)
    bulk = (scheme.C - scheme.lower_busy(B) - ip * scheme.K_I) // scheme.K_I
    if mode == "bulk_when_waiting" and I < 0 and bulk > 0:
        return [bulk]
    if mode not in ("all", "bulk_when_waiting"):
        raise ConfigError(f"unknown action mode {mode!r}")
    acts = list(range(-ip, 1))
    if bulk > 0:
        acts.append(bulk)
    return acts


def _clip_target(B: int, I: int, scheme) -> tuple[int, int]:
    B = min(max(B, 0), scheme.L - 1)
    I = min(max(I, -scheme.neg_levels), scheme.L - 1)
    if not scheme.feasible(B, I):
        I = (scheme.C - scheme.lower_busy(B)) // scheme.K_I
    return B, I


def build_multilevel_ctmdp(params: SystemParams, L: int, allow_rounding: bool = False,
                           action_mode: str = "all", queue_at_zero: bool = True,
                           scheme: LevelScheme | None = None) -> CtmdpModel:
    scheme = scheme or build_level_scheme(params, L, allow_rounding)
    states = agg_states(scheme)
    index = {s: k for k, s in enumerate(states)}
    stats = [boundary_stats(B, scheme, params) for B in range(scheme.L)]
    K_I = scheme.K_I
    sa_state, sa_action, wait, power = [], [], [], []
    e_pair, e_target, e_rate = [], [], []
    for k, S in enumerate(states):
        B, I = S
        st = stats[B]
        for A in agg_action_set(S, scheme, action_mode):
            pair = len(sa_state)
            a_plus, a_minus = max(A, 0), min(A, 0)
            e = eta(a_plus, K_I, st, params)
            u_lo, _ = u_probs(e, K_I)
            ibar = i_bar(I, e, K_I, u_lo)
            h = h_rates(S, a_plus, scheme, st, params, shifted_level=I + a_minus,
                        queue_at_zero=queue_at_zero)
            for (dB, dI), rate in zip(H_MOVES, h):
                if rate > 0:
                    tgt = _clip_target(B + dB, I + a_minus + dI, scheme)
                    e_pair.append(pair)
                    e_target.append(index[tgt])
                    e_rate.append(rate)
            sa_state.append(k)
            sa_action.append(A)
            wait.append(max(-ibar, 0.0))
            power.append(params.c_power * max(ibar, 0.0) + params.c_power_setup * K_I * a_plus)
    start = index[_clip_target(*scheme.level_of(0, 0), scheme)]
    return assemble(
        "multilevel", np.array(states), sa_state, sa_action, e_pair, e_target, e_rate,
        wait, power, params.c_perf,
        meta={"params": params, "scheme": scheme, "start": start,
              "coord_names": ("state_B", "state_I"), "action_mode": action_mode},
    )


def build_uniform_scheme(params: SystemParams, L_u: int) -> UniformScheme:
    K = _level_size(params.C, L_u, False)
    return UniformScheme(C=params.C, Q=params.Q, L=L_u, K=K, neg_levels=-(-params.Q // K))


def build_uniform_agg_ctmdp(params: SystemParams, L_u: int,
                            normalization: str = "mean") -> CtmdpModel:
    """Uniform state aggregation: meta rates and rewards are cell averages.

    Each cell holds the concrete states with b in [BK, BK+K-1] and i in
    [IK, IK+K-1]; b = C and i = C fall in cells of their own. Action A
    is applied as a = A*K, capped per source state at its bulk action.

    ``normalization="mean"`` averages over the existing source states and
    sums over target cells. ``"scaled"`` divides by K^4 for rates and K^2 for
    rewards, counting absent concrete states as zeros.
    """
    if normalization not in ("mean", "scaled"):
        raise ConfigError(f"unknown normalization {normalization!r}")
    scheme = build_uniform_scheme(params, L_u)
    K, C = scheme.K, params.C
    full = build_basic_ctmdp(params, full_actions=True)
    cb, ci = full.states[:, 0], full.states[:, 1]
    cell_B = scheme.busy_level(cb)
    cell_I = scheme.iw_level(ci)
    states = agg_states(scheme)
    index = {s: k for k, s in enumerate(states)}
    cell_code = np.array([index[(int(B), int(I))] for B, I in zip(cell_B, cell_I)])
    members: dict[int, np.ndarray] = {}
    order = np.argsort(cell_code, kind="stable")
    bounds = np.searchsorted(cell_code[order], np.arange(len(states) + 1))
    for k in range(len(states)):
        members[k] = order[bounds[k]:bounds[k + 1]]

    src_psi = full.psi
    sa_state, sa_action, wait, power, psi = [], [], [], [], []
    e_pair, e_target, e_rate = [], [], []
    for k, S in enumerate(states):
        B, I = S
        src = members[k]
        sb, si = cb[src], ci[src]
        sip = np.maximum(si, 0)
        for A in agg_action_set(S, scheme):
            a = np.full(len(src), A * K)
            if A > 0:
                a = np.minimum(a, C - sb - sip)
            else:
                a = np.maximum(a, -sip)
            pairs = full.sa_ptr[src] + (a + sip)
            if normalization == "mean":
                rate_den, rew_den = len(src), len(src)
            else:
                rate_den, rew_den = K**4, K**2
            lo, hi = full.row_ptr[pairs], full.row_ptr[pairs + 1]
            ent = np.concatenate([np.arange(x, y) for x, y in zip(lo, hi)])
            pair = len(sa_state)
            e_pair.append(np.full(len(ent), pair))
            e_target.append(cell_code[full.targets[ent]])
            e_rate.append(full.rates[ent] / rate_den)
            total = full.rates[ent].sum() / rate_den
            # rewards are averaged directly; wait/power are rescaled so that
            # -(c_perf*wait + power)/psi reproduces that average
            sa_state.append(k)
            sa_action.append(A)
            psi.append(total)
            wait.append(total * np.sum(full.wait[pairs] / src_psi[pairs]) / rew_den)
            power.append(total * np.sum(full.power[pairs] / src_psi[pairs]) / rew_den)
    start = index[scheme.level_of(0, 0)]
    return assemble(
        "uniform", np.array(states), sa_state, sa_action,
        np.concatenate(e_pair), np.concatenate(e_target), np.concatenate(e_rate),
        wait, power, params.c_perf, psi=psi,
        meta={"params": params, "scheme": scheme, "start": start,
              "coord_names": ("state_B", "state_I"), "normalization": normalization},
    )


def basic_index(params: SystemParams):
    """(b, i) -> index map for the exact model, vectorised."""
    return lambda b, i: state_index(b, i, params.C, params.Q)
