"""Indexed sparse representation shared by every CTMDP built in this package.

State-action pairs are flattened: the pairs of state ``s`` occupy
``sa_ptr[s]:sa_ptr[s + 1]`` with actions in ascending order, and the
transition entries of pair ``k`` occupy ``row_ptr[k]:row_ptr[k + 1]``.
Rewards follow the penalty convention

    r(s, a) = -(c_perf * wait(s, a) + power(s, a)) / psi(s, a)

so ``wait`` and ``power`` are per-unit-time penalty rates and ``psi`` is the
total output rate (self-loops included).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ModelTooLarge(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class CtmdpModel:
    kind: str
    states: np.ndarray
    sa_ptr: np.ndarray
    actions: np.ndarray
    row_ptr: np.ndarray
    targets: np.ndarray
    rates: np.ndarray
    psi: np.ndarray
    wait: np.ndarray
    power: np.ndarray
    rewards: np.ndarray
    c_perf: float
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_pairs(self) -> int:
        return len(self.actions)

    @property
    def sa_state(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_states), np.diff(self.sa_ptr))

    @property
    def index(self) -> dict[tuple[int, int], int]:
        idx = self.meta.get("_index")
        if idx is None:
            idx = {(int(x), int(y)): k for k, (x, y) in enumerate(self.states)}
            self.meta["_index"] = idx
        return idx

    def state_of(self, k: int) -> tuple[int, int]:
        x, y = self.states[k]
        return int(x), int(y)

    def action_set(self, state: tuple[int, int]) -> list[int]:
        s = self.index[tuple(state)]
        return self.actions[self.sa_ptr[s]:self.sa_ptr[s + 1]].tolist()

    def pair_index(self, state: tuple[int, int], action: int) -> int:
        s = self.index[tuple(state)]
        lo, hi = self.sa_ptr[s], self.sa_ptr[s + 1]
        hit = np.flatnonzero(self.actions[lo:hi] == action)
        if len(hit) == 0:
            raise KeyError(f"action {action} not available in state {state}")
        return int(lo + hit[0])

    def row(self, state: tuple[int, int], action: int) -> dict[tuple[int, int], float]:
        """Sparse rate row keyed by target coordinates."""
        k = self.pair_index(state, action)
        lo, hi = self.row_ptr[k], self.row_ptr[k + 1]
        return {self.state_of(t): float(r) for t, r in zip(self.targets[lo:hi], self.rates[lo:hi])}

    def penalty_rate(self) -> np.ndarray:
        return self.c_perf * self.wait + self.power

    def selfloop_rates(self) -> np.ndarray:
        """Per-pair rate of entries that return to the source state."""
        entry_pair = np.repeat(np.arange(self.n_pairs), np.diff(self.row_ptr))
        mask = self.targets == self.sa_state[entry_pair]
        loop = np.zeros(self.n_pairs)
        np.add.at(loop, entry_pair[mask], self.rates[mask])
        return loop

    def dump_csv(self, directory: str | Path, stem: str | None = None) -> tuple[Path, Path]:
        """Write ``<stem>_rates.csv`` and ``<stem>_rewards.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or self.kind
        a, b = self.meta.get("coord_names", ("state_b", "state_i"))
        ta, tb = "target_" + a.split("_")[-1], "target_" + b.split("_")[-1]
        rates_path = directory / f"{stem}_rates.csv"
        rewards_path = directory / f"{stem}_rewards.csv"
        sa_state = self.sa_state
        with rates_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([a, b, "action", ta, tb, "rate"])
            for k in range(self.n_pairs):
                x, y = self.state_of(sa_state[k])
                for e in range(self.row_ptr[k], self.row_ptr[k + 1]):
                    tx, ty = self.state_of(self.targets[e])
                    w.writerow([x, y, int(self.actions[k]), tx, ty, repr(float(self.rates[e]))])
        with rewards_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([a, b, "action", "reward", "psi"])
            for k in range(self.n_pairs):
                x, y = self.state_of(sa_state[k])
                w.writerow([x, y, int(self.actions[k]), repr(float(self.rewards[k])),
                            repr(float(self.psi[k]))])
        return rates_path, rewards_path


def assemble(
    kind: str,
    states: np.ndarray,
    sa_state: np.ndarray,
    sa_action: np.ndarray,
    entry_pair: np.ndarray,
    entry_target: np.ndarray,
    entry_rate: np.ndarray,
    wait: np.ndarray,
    power: np.ndarray,
    c_perf: float,
    psi: np.ndarray | None = None,
    meta: dict | None = None,
) -> CtmdpModel:
    """Build a CtmdpModel from flat pair and entry arrays.

    Pairs must already be sorted by (state, action). Entries may come in any
    order; duplicates (same pair, same target) are summed and zero-rate
    entries dropped. When ``psi`` is omitted it is taken as the row sums.
    """
    states = np.asarray(states, dtype=np.int64)
    sa_state = np.asarray(sa_state, dtype=np.int64)
    sa_action = np.asarray(sa_action, dtype=np.int64)
    n, m = len(states), len(sa_state)
    if m and np.any(np.diff(sa_state) < 0):
        raise ValueError("state-action pairs must be grouped by state")
    counts = np.bincount(sa_state, minlength=n)
    if np.any(counts == 0):
        raise ValueError("every state needs at least one action")
    sa_ptr = np.concatenate([[0], np.cumsum(counts)])

    entry_pair = np.asarray(entry_pair, dtype=np.int64)
    entry_target = np.asarray(entry_target, dtype=np.int64)
    entry_rate = np.asarray(entry_rate, dtype=float)
    keep = entry_rate > 0
    entry_pair, entry_target, entry_rate = entry_pair[keep], entry_target[keep], entry_rate[keep]
    if len(entry_target) and (entry_target.min() < 0 or entry_target.max() >= n):
        raise ValueError("transition target outside the state space")
    key = entry_pair * n + entry_target
    order = np.argsort(key, kind="stable")
    key, entry_rate = key[order], entry_rate[order]
    uniq, start = np.unique(key, return_index=True)
    merged = np.add.reduceat(entry_rate, start) if len(start) else entry_rate[:0]
    pair_of = uniq // n
    targets = uniq % n
    row_ptr = np.concatenate([[0], np.cumsum(np.bincount(pair_of, minlength=m))])
    row_sum = np.bincount(pair_of, weights=merged, minlength=m)
    if psi is None:
        psi = row_sum
    psi = np.asarray(psi, dtype=float)
    if np.any(psi <= 0):
        raise ValueError("every state-action pair needs a positive output rate")
    wait = np.asarray(wait, dtype=float)
    power = np.asarray(power, dtype=float)
    rewards = -(c_perf * wait + power) / psi
    return CtmdpModel(
        kind=kind,
        states=states,
        sa_ptr=sa_ptr,
        actions=sa_action,
        row_ptr=row_ptr,
        targets=targets,
        rates=merged,
        psi=psi,
        wait=wait,
        power=power,
        rewards=rewards,
        c_perf=float(c_perf),
        meta=dict(meta or {}),
    )
