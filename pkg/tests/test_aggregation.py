import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import null_space

from powermdp.aggregation import (H_MOVES, AggState, BoundaryStats, ConfigError, agg_action_set,
                                  agg_states, boundary_stats, build_level_scheme,
                                  build_multilevel_ctmdp, build_uniform_agg_ctmdp, eta, h_rates,
                                  i_bar, u_probs)
from powermdp.basic import build_basic_ctmdp
from powermdp.numerics import poisson_quantile
from powermdp.params import SystemParams

P100 = SystemParams(C=100, Q=100, lam=30.0, gamma=2.0, c_perf=100.0)


def bd_oracle(birth, death, K):
    """Stationary vector of a K-state birth-death chain via its null space."""
    G = np.diag([birth] * (K - 1), 1) + np.diag([death] * (K - 1), -1)
    G -= np.diag(G.sum(axis=1))
    v = null_space(G.T)[:, 0]
    return v / v.sum()


# ---------------------------------------------------------------- level scheme

def test_level_scheme_at_thirty():
    sc = build_level_scheme(P100, 10)
    lo, hi = poisson_quantile(0.005, 30.0), poisson_quantile(0.995, 30.0)
    assert (sc.q_lo, sc.q_hi) == (lo, hi)
    assert sc.K_B == math.ceil((hi - lo) / 10)
    assert sc.beta_lo == max(0, math.floor(30 - sc.K_B * 5))
    assert sc.beta_hi == math.ceil(30 + sc.K_B * 5)
    assert sc.K_I == 10 and sc.neg_levels == 10
    assert sc.endpoints[0] == 0 and sc.endpoints[-1] == 101
    assert all(sc.endpoints[B] == B * sc.K_B + sc.beta_lo for B in range(1, 10))


def test_degenerate_scheme_at_full_resolution():
    sc = build_level_scheme(P100, 100)
    assert sc.K_B == 1 and sc.K_I == 1


@given(C=st.sampled_from([20, 40, 60, 100]), frac=st.floats(0.05, 0.8),
       L=st.sampled_from([2, 4, 5, 10, 20]))
def test_busy_levels_partition(C, frac, L):
    p = SystemParams(C=C, Q=10, lam=frac * C)
    try:
        sc = build_level_scheme(p, L)
    except ConfigError:
        return
    covered = []
    for B in range(L):
        lo, hi = sc.busy_range(B)
        assert lo <= hi
        covered += list(range(lo, hi + 1))
    assert covered == list(range(C + 1))
    assert all(sc.endpoints[B + 1] - sc.endpoints[B] == sc.K_B for B in range(1, L - 1))
    b = np.arange(C + 1)
    assert np.all(sc.busy_level(b) == [next(B for B in range(L) if sc.busy_range(B)[0] <= x <= sc.busy_range(B)[1]) for x in b])


def test_level_count_must_divide():
    with pytest.raises(ConfigError):
        build_level_scheme(P100, 30)
    sc = build_level_scheme(P100, 30, allow_rounding=True)
    assert sc.K_I == 4
    with pytest.raises(ConfigError):
        build_level_scheme(P100, 1)


def test_iw_membership():
    sc = build_level_scheme(P100, 10)
    assert sc.iw_level(0) == 0 and sc.iw_level(9) == 0 and sc.iw_level(10) == 1
    assert sc.iw_level(-1) == -1 and sc.iw_level(-10) == -1 and sc.iw_level(-11) == -2
    assert sc.iw_level(100) == 9 and sc.iw_level(-100) == -10


# ---------------------------------------------------------------- boundary stats

def test_boundary_stats_against_direct_sum():
    sc = build_level_scheme(P100, 10)
    mpmath.mp.dps = 30
    for B in range(sc.L):
        lo, hi = sc.busy_range(B)
        f = [mpmath.exp(-30) * mpmath.power(30, x) / mpmath.factorial(x) for x in range(lo, hi + 1)]
        D = mpmath.fsum(f)
        st_ = boundary_stats(B, sc, P100)
        assert st_.p_lo == pytest.approx(float(f[0] / D), rel=1e-10)
        assert st_.p_hi == pytest.approx(float(f[-1] / D), rel=1e-10)
        assert st_.N_B == pytest.approx(float(mpmath.fsum(x * v for x, v in zip(range(lo, hi + 1), f)) / D), rel=1e-10)
        assert st_.N_B_minus == pytest.approx(float(mpmath.fsum(x * v for x, v in zip(range(lo + 1, hi + 1), f[1:])) / D), rel=1e-10)
        assert lo <= st_.N_B <= hi
        assert 0 < st_.p_lo <= 1 and 0 < st_.p_hi <= 1


def test_single_point_level():
    sc = build_level_scheme(P100, 100)
    st_ = boundary_stats(40, sc, P100)
    assert (st_.p_lo, st_.p_hi, st_.N_B, st_.N_B_minus) == (1.0, 1.0, 40.0, 0.0)


def test_far_tail_level_does_not_underflow():
    p = SystemParams(C=3000, Q=10, lam=2000.0)
    sc = build_level_scheme(p, 100)
    st_ = boundary_stats(sc.L - 1, sc, p)
    assert np.isfinite(st_.N_B)


# ---------------------------------------------------------------- boundary probabilities

def test_eta_examples():
    zero = BoundaryStats(1.0, 1.0, 0.0, 0.0)
    thirty = BoundaryStats(1.0, 1.0, 30.0, 0.0)
    assert eta(0, 10, zero, P100) == 0.0
    assert eta(0, 10, thirty, P100) == 1.0
    assert eta(1, 10, thirty, P100) == pytest.approx(50 / 30)


def test_u_probs_examples():
    assert u_probs(1.0, 4) == (0.25, 0.25)
    lo, hi = u_probs(2.0, 2)
    assert lo == pytest.approx(1 / 3, abs=1e-15) and hi == pytest.approx(2 / 3, abs=1e-15)
    assert u_probs(7.3, 1) == (1.0, 1.0)


def test_i_bar_examples():
    assert i_bar(3, 0.4, 1, 1.0) == 3.0
    assert i_bar(0, 1.0, 2, 0.5) == pytest.approx(0.5)
    assert i_bar(1, 2.0, 2, 1 / 3) == pytest.approx(8 / 3)


@given(N_B=st.floats(0, 60), A=st.integers(0, 5), K=st.integers(2, 12),
       lam=st.floats(0.1, 50), mu=st.floats(0.1, 50), gam=st.floats(0.1, 50))
def test_u_probs_match_birth_death_chain(N_B, A, K, lam, mu, gam):
    birth = mu * N_B + gam * A * K
    if birth == 0:
        return
    pi = bd_oracle(birth, lam, K)
    lo, hi = u_probs(birth / lam, K)
    assert lo == pytest.approx(pi[0], abs=1e-9)
    assert hi == pytest.approx(pi[-1], abs=1e-9)


@given(e=st.floats(1e-3, 80), K=st.integers(1, 40))
def test_u_probs_normalise(e, K):
    lo, hi = u_probs(e, K)
    total = math.fsum(lo * e**k for k in range(K))
    assert total == pytest.approx(1.0, abs=1e-10)
    if K > 1:
        assert hi == pytest.approx(lo * e ** (K - 1), rel=1e-9)


def test_u_probs_near_one_is_continuous():
    for d in (1e-8, 1e-6, -1e-7):
        lo, hi = u_probs(1 + d, 5)
        assert lo == pytest.approx(0.2, abs=1e-6) and hi == pytest.approx(0.2, abs=1e-6)


def test_u_probs_do_not_overflow():
    lo, hi = u_probs(500.0, 200)
    assert 0 <= lo < 1e-300 and hi == pytest.approx(1 - 1 / 500)


# ---------------------------------------------------------------- h rates

def test_h_zero_pattern_and_degenerate_values():
    sc = build_level_scheme(P100, 100)
    b = 40
    st_ = boundary_stats(b, sc, P100)
    h = h_rates((b, 3), 2, sc, st_, P100)
    assert h.up_stay == h.down_stay == h.stay_down == h.up_up == 0
    assert h.stay_up == pytest.approx(4.0)
    assert h.up_down == pytest.approx(30.0)
    assert h.down_up == pytest.approx(40.0)
    neg = h_rates((b, -2), 0, sc, st_, P100)
    assert neg.down_stay == neg.up_down == neg.down_up == 0
    assert neg.stay_up == pytest.approx(40.0) and neg.stay_down == pytest.approx(30.0)
    assert neg.up_stay == neg.up_up == 0


def test_arrival_at_zero_joins_queue():
    sc = build_level_scheme(P100, 100)
    st_ = boundary_stats(40, sc, P100)
    h = h_rates((40, 2), 0, sc, st_, P100, shifted_level=0)
    assert h.up_down == 0 and h.stay_down == pytest.approx(30.0)
    bare = h_rates((40, 2), 0, sc, st_, P100, shifted_level=0, queue_at_zero=False)
    assert bare.up_down == pytest.approx(30.0) and bare.stay_down == 0


def test_multilevel_model_properties():
    m = build_multilevel_ctmdp(P100, 10)
    sc = m.meta["scheme"]
    rows = np.add.reduceat(m.rates, m.row_ptr[:-1])
    assert np.max(np.abs(rows - m.psi)) < 1e-10
    assert np.all(m.rewards <= 0) and np.all(m.psi > 0)
    for k, (B, I) in enumerate(m.states.tolist()):
        ex = agg_action_set((B, I), sc)
        assert m.action_set((B, I)) == ex
        if I < 0:
            assert ex == [0, ex[-1]] and len(ex) == 2
    st_all = [boundary_stats(B, sc, P100) for B in range(sc.L)]
    for B, I in m.states.tolist():
        for A in m.action_set((B, I)):
            h = h_rates((B, I), max(A, 0), sc, st_all[B], P100, shifted_level=I + min(A, 0))
            if I >= 0:
                assert h.up_up == 0
            else:
                assert h.down_stay == h.up_down == h.down_up == 0
            e = eta(max(A, 0), sc.K_I, st_all[B], P100)
            lo, _ = u_probs(e, sc.K_I)
            ib = i_bar(I, e, sc.K_I, lo)
            assert I * sc.K_I - 1e-9 <= ib <= (I + 1) * sc.K_I - 1 + 1e-9


def test_level_counts_at_hundred():
    m = build_multilevel_ctmdp(P100, 10)
    neg = [(B, I) for B, I in m.states.tolist() if I < 0]
    assert len(neg) == 10 * (100 // 10)
    assert sum(len(m.action_set(s)) for s in neg) == 2 * len(neg)
    assert m.n_states - len(neg) <= 100


def test_waiting_levels_can_force_bulk():
    m = build_multilevel_ctmdp(P100, 10, action_mode="bulk_when_waiting")
    sc = m.meta["scheme"]
    for B, I in m.states.tolist():
        if I < 0:
            assert m.action_set((B, I)) == [agg_action_set((B, I), sc)[-1]]


def test_multilevel_csv_dump(tmp_path):
    m = build_multilevel_ctmdp(SystemParams(C=20, Q=20, lam=6.0), 10)
    rates, rewards = m.dump_csv(tmp_path)
    assert rates.read_text().splitlines()[0] == "state_B,state_I,action,target_B,target_I,rate"
    assert rewards.read_text().splitlines()[0] == "state_B,state_I,action,reward,psi"


# ---------------------------------------------------------------- uniform baseline

def test_uniform_unit_cells_reproduce_exact_model():
    p = SystemParams(C=8, Q=5, lam=3.0)
    m, u = build_basic_ctmdp(p), build_uniform_agg_ctmdp(p, 8)
    assert np.array_equal(m.states, u.states) and np.array_equal(m.actions, u.actions)
    assert np.array_equal(m.row_ptr, u.row_ptr) and np.array_equal(m.targets, u.targets)
    assert np.max(np.abs(m.rates - u.rates)) < 1e-12
    assert np.max(np.abs(m.rewards - u.rewards)) < 1e-12


def _quad_loop_oracle(p, K, normalization):
    """Cell averages by explicit loops over the concrete dump."""
    full = build_basic_ctmdp(p, full_actions=True)
    rates = {}
    rew = {}
    for b, i in full.states.tolist():
        ip = max(i, 0)
        B, I = b // K, i // K
        bulk = (p.C - B * K - max(I, 0) * K) // K
        acts = list(range(-max(I, 0), 1)) + ([bulk] if bulk > 0 else [])
        for A in acts:
            a = min(A * K, p.C - b - ip) if A > 0 else max(A * K, -ip)
            for (tb, ti), r in full.row((b, i), a).items():
                key = ((B, I), A, (tb // K, ti // K))
                rates[key] = rates.get(key, 0.0) + r
            rew.setdefault(((B, I), A), []).append(full.rewards[full.pair_index((b, i), a)])
    counts = {k: len(v) for k, v in rew.items()}
    if normalization == "mean":
        rates = {k: v / counts[(k[0], k[1])] for k, v in rates.items()}
        rew = {k: sum(v) / len(v) for k, v in rew.items()}
    else:
        rates = {k: v / K**4 for k, v in rates.items()}
        rew = {k: sum(v) / K**2 for k, v in rew.items()}
    return rates, rew


@pytest.mark.parametrize("normalization", ["mean", "scaled"])
def test_uniform_matches_loop_oracle(normalization):
    p = SystemParams(C=2, Q=2, lam=0.7)
    rates, rew = _quad_loop_oracle(p, 2, normalization)
    u = build_uniform_agg_ctmdp(p, 1, normalization=normalization)
    for (S, A, T), v in rates.items():
        assert u.row(S, A).get(T, 0.0) == pytest.approx(v, rel=1e-12)
    for (S, A), v in rew.items():
        assert u.rewards[u.pair_index(S, A)] == pytest.approx(v, rel=1e-12)
    p = SystemParams(C=6, Q=5, lam=2.0)
    rates, rew = _quad_loop_oracle(p, 3, normalization)
    u = build_uniform_agg_ctmdp(p, 2, normalization=normalization)
    for (S, A, T), v in rates.items():
        assert u.row(S, A).get(T, 0.0) == pytest.approx(v, rel=1e-12)
    for (S, A), v in rew.items():
        assert u.rewards[u.pair_index(S, A)] == pytest.approx(v, rel=1e-12)


def test_uniform_rates_non_negative():
    u = build_uniform_agg_ctmdp(P100, 10)
    assert np.all(u.rates > 0)
    rows = np.add.reduceat(u.rates, u.row_ptr[:-1])
    assert np.max(np.abs(rows - u.psi)) < 1e-10
    with pytest.raises(ConfigError):
        build_uniform_agg_ctmdp(P100, 30)
