"""Average-reward solution and exact policy evaluation.

Continuous-time models are uniformized with a constant c above every
output rate, turning gains per step into gains per unit time by a factor
c. Relative value iteration then runs on sparse matrices; a stationary
policy is evaluated by solving pi Q = 0 on its recurrent class.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve

from .basic import build_basic_ctmdp, state_count, state_index
from .aggregation import agg_action_set, agg_states, build_level_scheme
from .model import CtmdpModel
from .params import SystemParams

log = logging.getLogger(__name__)

DIRECT_SOLVE_LIMIT = 200_000


class NotConverged(RuntimeError):
    pass


class MultichainError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Dtmdp:
    P: sparse.csr_matrix     # pairs x states
    rewards: np.ndarray      # per step
    sa_ptr: np.ndarray
    actions: np.ndarray
    c: float


@dataclass(frozen=True, eq=False)
class SolveResult:
    gain: float
    bias: np.ndarray
    policy: np.ndarray       # action value per state
    iterations: int
    span: float
    converged: bool


@dataclass(frozen=True, eq=False)
class EvalResult:
    gain: float
    E_W: float
    E_P: float
    pi: np.ndarray
    closed_class: np.ndarray
    residual: float

    @property
    def E_R(self) -> float:
        return self.gain


def _entry_pairs(model: CtmdpModel) -> np.ndarray:
    return np.repeat(np.arange(model.n_pairs), np.diff(model.row_ptr))


def uniformize(model: CtmdpModel, margin: float = 1.01) -> Dtmdp:
    """Discrete-time equivalent with constant c = margin * max off-loop rate."""
    if margin <= 1.0:
        raise ValueError("margin must exceed 1 so every state keeps a self-loop")
    ep = _entry_pairs(model)
    src = model.sa_state[ep]
    off = model.targets != src
    out_rate = np.bincount(ep[off], weights=model.rates[off], minlength=model.n_pairs)
    top = float(out_rate.max()) if model.n_pairs else 0.0
    c = margin * (top if top > 0 else float(model.psi.max()))
    diag = 1.0 - out_rate / c
    rows = np.concatenate([ep[off], np.arange(model.n_pairs)])
    cols = np.concatenate([model.targets[off], model.sa_state])
    vals = np.concatenate([model.rates[off] / c, diag])
    P = sparse.csr_matrix((vals, (rows, cols)), shape=(model.n_pairs, model.n_states))
    return Dtmdp(P=P, rewards=-model.penalty_rate() / c, sa_ptr=model.sa_ptr,
                 actions=model.actions, c=c)


def _greedy(q: np.ndarray, sa_ptr: np.ndarray, tie_tol: float = 1e-12):
    """Per-state max and the first (smallest-action) pair attaining it."""
    starts = sa_ptr[:-1]
    best = np.maximum.reduceat(q, starts)
    counts = np.diff(sa_ptr)
    rep = np.repeat(best, counts)
    hit = q >= rep - tie_tol * (1.0 + np.abs(rep))
    pos = np.where(hit, np.arange(len(q)), len(q))
    return best, np.minimum.reduceat(pos, starts)


def relative_value_iteration(model: CtmdpModel, tol: float = 1e-8, max_iters: int = 1_000_000,
                             margin: float = 1.01, ref_state: int = 0,
                             raise_on_fail: bool = True) -> SolveResult:
    """Optimal gain per unit time, bias and a greedy policy.

    Stops once the span of successive differences, scaled back to
    continuous time, drops under ``tol``; that span bounds the gain error.
    """
    d = uniformize(model, margin)
    P, r, starts = d.P, d.rewards, d.sa_ptr[:-1]
    v = np.zeros(model.n_states)
    span = math.inf
    lo = hi = 0.0
    it = 0
    for it in range(1, max_iters + 1):
        tv = np.maximum.reduceat(r + P @ v, starts)
        diff = tv - v
        lo, hi = float(diff.min()), float(diff.max())
        span = (hi - lo) * d.c
        v = tv - tv[ref_state]
        if span < tol:
            break
    converged = span < tol
    if not converged:
        msg = f"value iteration stopped after {it} sweeps with span {span:.3e}"
        if raise_on_fail:
            raise NotConverged(msg)
        log.warning(msg)
    _, choice = _greedy(r + P @ v, d.sa_ptr)
    return SolveResult(gain=0.5 * (lo + hi) * d.c, bias=v * d.c, policy=model.actions[choice],
                       iterations=it, span=span, converged=converged)


def policy_pairs(model: CtmdpModel, policy) -> np.ndarray:
    """Pair index chosen by ``policy`` (an action value per state) in each state."""
    policy = np.asarray(policy, dtype=np.int64)
    if policy.shape != (model.n_states,):
        raise ValueError(f"policy needs {model.n_states} entries, got {policy.shape}")
    off = int(np.abs(model.actions).max()) + 1
    width = 2 * off + 1
    keys = model.sa_state * width + model.actions + off
    want = np.arange(model.n_states) * width + np.clip(policy, -off, off) + off
    pos = np.searchsorted(keys, want)
    pos = np.minimum(pos, len(keys) - 1)
    bad = keys[pos] != want
    if bad.any():
        s = int(np.flatnonzero(bad)[0])
        raise ValueError(f"action {int(policy[s])} not available in state {model.state_of(s)}")
    return pos


def _generator(model: CtmdpModel, pairs: np.ndarray) -> sparse.csr_matrix:
    lo, hi = model.row_ptr[pairs], model.row_ptr[pairs + 1]
    counts = hi - lo
    src = np.repeat(np.arange(model.n_states), counts)
    ent = np.repeat(lo - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts) + np.arange(counts.sum())
    dst, rate = model.targets[ent], model.rates[ent]
    off = src != dst
    Qm = sparse.csr_matrix((rate[off], (src[off], dst[off])), shape=(model.n_states,) * 2)
    out = np.asarray(Qm.sum(axis=1)).ravel()
    return Qm - sparse.diags(out), Qm


def closed_class(adj: sparse.csr_matrix, start: int) -> np.ndarray:
    """The unique closed communicating class reachable from ``start``."""
    reach = csgraph.breadth_first_order(adj, start, directed=True, return_predecessors=False)
    sub = adj[reach][:, reach]
    ncomp, lab = csgraph.connected_components(sub, directed=True, connection="strong")
    # a component is closed when no edge leaves it
    coo = sub.tocoo()
    leaving = np.zeros(ncomp, dtype=bool)
    cross = lab[coo.row] != lab[coo.col]
    leaving[lab[coo.row[cross]]] = True
    closed = np.flatnonzero(~leaving)
    if len(closed) != 1:
        raise MultichainError(f"policy has {len(closed)} closed classes reachable from the start")
    return np.sort(reach[lab == closed[0]])


def stationary(Qg: sparse.csr_matrix, tol: float = 1e-13, max_iters: int = 10**7) -> np.ndarray:
    """Stationary row vector of an irreducible generator."""
    n = Qg.shape[0]
    if n == 1:
        return np.ones(1)
    if n <= DIRECT_SOLVE_LIMIT:
        A = Qg.T.tolil()
        A[n - 1, :] = np.ones(n)
        rhs = np.zeros(n)
        rhs[-1] = 1.0
        pi = spsolve(A.tocsc(), rhs)
        pi = np.maximum(pi, 0.0)
        return pi / pi.sum()
    # power iteration on the uniformized chain
    c = 1.01 * float(-Qg.diagonal().min())
    PT = (sparse.identity(n) + Qg / c).T.tocsr()
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iters):
        nxt = PT @ pi
        if np.abs(nxt - pi).max() < tol:
            return nxt / nxt.sum()
        pi = nxt
    raise NotConverged("power iteration for the stationary vector did not settle")


def evaluate_policy(model: CtmdpModel, policy, start: int | None = None) -> EvalResult:
    """Exact long-run metrics of a stationary deterministic policy."""
    pairs = policy_pairs(model, policy)
    Qg, adj = _generator(model, pairs)
    if start is None:
        start = model.meta.get("start")
        if start is None:
            start = model.index[(0, 0)]
    cls = closed_class(adj, int(start))
    Qc = Qg[cls][:, cls]
    pic = stationary(Qc)
    residual = float(np.abs(Qc.T @ pic).max())
    pi = np.zeros(model.n_states)
    pi[cls] = pic
    pen = model.penalty_rate()[pairs]
    return EvalResult(gain=-float(pi @ pen), E_W=float(pi @ model.wait[pairs]),
                      E_P=float(pi @ model.power[pairs]), pi=pi, closed_class=cls,
                      residual=residual)


# ---------------------------------------------------------------- counting

def action_slot_count(C: int, Q: int) -> int:
    """Closed-form action count of the exact model (bulk counted as its own slot)."""
    return 2 * (Q + 1) * (C + 1) + (C * (C + 1) * (C + 8)) // 6


def exact_size_product(C: int, Q: int) -> float:
    return (C + 1) ** 2 * (Q + C / 2 + 1) * (C * C / 6 + 4 * C / 3 + 2 * Q + 2)


def level_state_bound(L: int, QK: int) -> int:
    return L * (L + QK)


def level_pair_bound(L: int, QK: int) -> float:
    return 2 * L * QK + L * L * (L / 2 + 1.5)


def level_size_product(L: int, QK: int) -> float:
    return L * L * (L + QK) * (L * L / 2 + 2 * QK + 1.5 * L)


def complexity_basic(C: int, Q: int) -> float:
    """Size of |S| * sum|A| in big-O form."""
    return C * C * (Q + C * C) * (Q + C)


def complexity_multilevel(L: int, Q: int, K: int) -> float:
    return L * L * (Q / K + L * L) * (Q / K + L)


@dataclass(frozen=True)
class CountReport:
    kind: str
    n_states: int
    n_pairs: int                 # distinct actions, duplicates merged
    n_pairs_slots: int           # one slot per listed action, bulk always counted
    closed_states: float
    closed_pairs: float
    closed_product: float
    complexity: float
    extra: dict = field(default_factory=dict)

    @property
    def product(self) -> int:
        return self.n_states * self.n_pairs_slots


def count_state_actions(kind: str, params: SystemParams, L: int | None = None,
                        allow_rounding: bool = False, build: bool = True) -> CountReport:
    """Enumerated and closed-form sizes of the exact or multi-level model."""
    C, Q = params.C, params.Q
    if kind == "basic":
        # slot convention: i+ + 1 shutdown-or-hold actions plus one bulk slot
        ip = np.concatenate([np.zeros((Q + 1) * (C + 1), dtype=np.int64),
                             np.repeat(np.arange(1, C + 1), C + 1 - np.arange(1, C + 1))])
        slots = int((ip + 2).sum())
        n = state_count(C, Q)
        distinct = build_basic_ctmdp(params).n_pairs if build else slots - (C + Q + 1)
        return CountReport("basic", n, distinct, slots, n, action_slot_count(C, Q),
                           exact_size_product(C, Q), complexity_basic(C, Q))
    if kind == "multilevel":
        if L is None:
            raise ValueError("the multi-level count needs L")
        scheme = build_level_scheme(params, L, allow_rounding)
        states = agg_states(scheme)
        slots = sum(max(I, 0) + 2 for _, I in states)
        distinct = sum(len(agg_action_set(S, scheme)) for S in states)
        QK = Q // scheme.K_I
        return CountReport("multilevel", len(states), distinct, slots, level_state_bound(L, QK),
                           level_pair_bound(L, QK), level_size_product(L, QK),
                           complexity_multilevel(L, Q, scheme.K_I),
                           extra={"K_I": scheme.K_I, "K_B": scheme.K_B})
    raise ValueError(f"unknown model kind {kind!r}")


def complexity_ratio(params: SystemParams, L: int) -> dict:
    """Reduction factor of the multi-level model against the exact one."""
    basic = count_state_actions("basic", params, build=False)
    ml = count_state_actions("multilevel", params, L)
    return {
        "L": L,
        "complexity_ratio": basic.complexity / ml.complexity,
        "closed_form_ratio": basic.closed_product / ml.closed_product,
        "enumerated_ratio": basic.product / ml.product,
        "scale": (params.C / L) ** 5,
    }


def basic_start(params: SystemParams) -> int:
    return int(state_index(0, 0, params.C, params.Q))
