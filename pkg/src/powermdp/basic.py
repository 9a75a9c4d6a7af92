"""Exact power-management CTMDP over concrete states (b, i).

b is the number of busy servers; i is the number of idle servers when
i >= 0 and minus the number of waiting jobs when i < 0. An action a >= 0
holds exactly a servers in setup; a < 0 switches off |a| idle servers.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .model import CtmdpModel, ModelTooLarge, assemble
from .params import SystemParams

DEFAULT_MAX_STATES = 10**7


class State(NamedTuple):
    b: int
    i: int


class InvalidAction(ValueError):
    pass


def state_count(C: int, Q: int) -> int:
    return (Q + 1) * (C + 1) + C * (C + 1) // 2


def enumerate_states(params: SystemParams) -> list[State]:
    """All feasible (b, i), ordered by i then b."""
    C, Q = params.C, params.Q
    out = [State(b, i) for i in range(-Q, 1) for b in range(C + 1)]
    out += [State(b, i) for i in range(1, C + 1) for b in range(C - i + 1)]
    return out


def state_index(b, i, C: int, Q: int):
    """Position of (b, i) in :func:`enumerate_states` (works on arrays)."""
    b = np.asarray(b, dtype=np.int64)
    i = np.asarray(i, dtype=np.int64)
    neg = (i + Q) * (C + 1) + b
    j = i - 1
    pos = (Q + 1) * (C + 1) + j * (C + 1) - (j * (j + 1)) // 2 + b
    return np.where(i <= 0, neg, pos)


def is_feasible(s: tuple[int, int], params: SystemParams) -> bool:
    b, i = s
    if not (0 <= b <= params.C and -params.Q <= i <= params.C):
        return False
    return i <= 0 or b + i <= params.C


def action_set(s: tuple[int, int], params: SystemParams, full: bool = False) -> list[int]:
    """{-i+, ..., 0} plus the bulk action C - b - i+.

    With ``full=True`` every setup count up to the bulk action is allowed,
    which fixed threshold policies need.
    """
    b, i = s
    ip = max(i, 0)
    bulk = params.C - b - ip
    if full:
        return list(range(-ip, bulk + 1))
    acts = list(range(-ip, 1))
    if bulk > 0:
        acts.append(bulk)
    return acts


def psi(s: tuple[int, int], a: int, params: SystemParams) -> float:
    b, _ = s
    return max(a, 0) * params.gamma + b * params.mu + params.lam


def reward(s: tuple[int, int], a: int, params: SystemParams) -> float:
    b, i = s
    penalty = (params.c_perf * max(-i, 0) + params.c_power * max(i, 0)
               + params.c_power_setup * max(a, 0))
    return -penalty / psi(s, a, params)


def rate_row(s: tuple[int, int], a: int, params: SystemParams,
             full: bool = False) -> dict[State, float]:
    """Transition rates out of (s, a); entries sharing a target are summed."""
    b, i = s
    if not is_feasible(s, params) or a not in action_set(s, params, full=full):
        raise InvalidAction(f"action {a} is not available in state {tuple(s)}")
    lam, mu, gam, Q = params.lam, params.mu, params.gamma, params.Q
    out: dict[State, float] = {}

    def add(t: tuple[int, int], r: float) -> None:
        if r > 0:
            t = State(*t)
            out[t] = out.get(t, 0.0) + r

    if a < 0:
        if i + a > 0:
            add((b + 1, i + a - 1), lam)
        else:
            add((b, -1), lam)
        if b > 0:
            add((b - 1, i + a + 1), b * mu)
        return out

    if i > 0:
        add((b + 1, i - 1), lam)
    if -Q < i <= 0:
        add((b, i - 1), lam)
    if i == -Q:
        add((b, i), lam)
    if i >= 0:
        add((b - 1, i + 1), b * mu)
        add((b, i + 1), a * gam)
    else:
        add((b, i + 1), b * mu)
        add((b + 1, i + 1), a * gam)
    return out


def build_basic_ctmdp(params: SystemParams, full_actions: bool = False,
                      max_states: int = DEFAULT_MAX_STATES) -> CtmdpModel:
    """Vectorised assembly of the exact model.

    ``full_actions`` switches from the bulk-reduced action sets to every
    setup count in {-i+, ..., C - b - i+}.
    """
    C, Q = params.C, params.Q
    n = state_count(C, Q)
    if n > max_states:
        raise ModelTooLarge(f"{n} states exceeds the cap of {max_states}")
    st = np.array(enumerate_states(params), dtype=np.int64)
    b, i = st[:, 0], st[:, 1]
    ip = np.maximum(i, 0)
    bulk = C - b - ip
    if full_actions:
        counts = ip + 1 + bulk
    else:
        counts = ip + 1 + (bulk > 0)
    m = int(counts.sum())
    sa_state = np.repeat(np.arange(n), counts)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(m) - np.repeat(start, counts)
    sb, si, sip, sbulk = b[sa_state], i[sa_state], ip[sa_state], bulk[sa_state]
    act = rank - sip
    if not full_actions:
        act = np.where(rank > sip, sbulk, act)
    ap = np.maximum(act, 0)

    lam, mu, gam = params.lam, params.mu, params.gamma
    pairs, tb, ti, rt = [], [], [], []

    def emit(mask, nb, ni, rate):
        idx = np.flatnonzero(mask)
        pairs.append(idx)
        tb.append(np.asarray(nb)[idx] if np.ndim(nb) else np.full(len(idx), nb))
        ti.append(np.asarray(ni)[idx] if np.ndim(ni) else np.full(len(idx), ni))
        r = np.broadcast_to(np.asarray(rate, dtype=float), (m,))
        rt.append(r[idx])

    neg = act < 0
    pos = ~neg
    # shutdown of idle servers
    emit(neg & (si + act > 0), sb + 1, si + act - 1, lam)
    emit(neg & (si + act == 0), sb, -1, lam)
    emit(neg & (sb > 0), sb - 1, si + act + 1, sb * mu)
    # setup count held at a >= 0
    emit(pos & (si > 0), sb + 1, si - 1, lam)
    emit(pos & (si > -Q) & (si <= 0), sb, si - 1, lam)
    emit(pos & (si == -Q), sb, si, lam)
    emit(pos & (si >= 0) & (sb > 0), sb - 1, si + 1, sb * mu)
    emit(pos & (si < 0) & (sb > 0), sb, si + 1, sb * mu)
    emit(pos & (si >= 0) & (ap > 0), sb, si + 1, ap * gam)
    emit(pos & (si < 0) & (ap > 0), sb + 1, si + 1, ap * gam)

    entry_pair = np.concatenate(pairs)
    entry_target = state_index(np.concatenate(tb), np.concatenate(ti), C, Q)
    entry_rate = np.concatenate(rt)
    wait = np.maximum(-si, 0).astype(float)
    power = params.c_power * sip + params.c_power_setup * ap
    psi_arr = ap * gam + sb * mu + lam
    return assemble(
        "basic_full" if full_actions else "basic",
        st, sa_state, act, entry_pair, entry_target, entry_rate,
        wait, power, params.c_perf, psi=psi_arr,
        meta={"params": params, "full_actions": full_actions,
              "coord_names": ("state_b", "state_i")},
    )
