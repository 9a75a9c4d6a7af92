"""Threshold baselines and lifting of level policies to concrete states.

A policy here is a function of the concrete state (b, i) returning the
commanded action, or a table of such actions in the canonical state order.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .basic import enumerate_states
from .model import CtmdpModel
from .params import SystemParams

PolicyFn = Callable[[int, int], int]


@dataclass(frozen=True)
class ThresholdConfig:
    C_s: float
    k: int = 1
    literal_bounds: bool = False

    def __post_init__(self) -> None:
        if not self.C_s > 0:
            raise ValueError(f"C_s must be positive, got {self.C_s!r}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k!r}")

    @property
    def on_count(self) -> int:
        return int(math.floor(self.C_s + 0.5))


def static_on_threshold(params: SystemParams) -> float:
    """rho + sqrt(rho) servers kept on."""
    return params.rho + math.sqrt(params.rho)


def default_threshold(params: SystemParams, k: int = 1, literal_bounds: bool = False) -> ThresholdConfig:
    return ThresholdConfig(static_on_threshold(params), k, literal_bounds)


def clamp_action(a: int, b: int, i: int, C: int) -> int:
    ip = max(i, 0)
    return min(max(a, -ip), C - b - ip)


def _turn_on_branch(b: int, i: int, cfg: ThresholdConfig) -> bool:
    """True where the policies react to waiting jobs beyond the static-on set.

    By default a state with all C_s static servers busy and k jobs waiting
    counts as beyond the threshold. ``literal_bounds`` requires b > C_s,
    which the policies themselves can never reach from an empty system.
    """
    if i > -cfg.k:
        return False
    cs = cfg.on_count
    return b > cs or (b == cs and not cfg.literal_bounds)


def bulk_policy(s: tuple[int, int], cfg: ThresholdConfig, params: SystemParams) -> int:
    """Keep C_s servers on; once k jobs wait beyond that, power on everything."""
    b, i = s
    cs = cfg.on_count
    ip = max(i, 0)
    if _turn_on_branch(b, i, cfg):
        a = params.C - b
    elif b + ip <= cs:
        a = cs - b - ip
    elif i > -cfg.k:
        a = max(cs - b, 0) - i
    else:
        a = params.C - b
    return clamp_action(a, b, i, params.C)


def staggered_policy(s: tuple[int, int], cfg: ThresholdConfig, params: SystemParams) -> int:
    """Like :func:`bulk_policy` but one setup server per waiting job."""
    b, i = s
    if _turn_on_branch(b, i, cfg):
        return clamp_action(abs(i), b, i, params.C)
    return bulk_policy(s, cfg, params)


def policy_table(fn: PolicyFn, params: SystemParams) -> np.ndarray:
    """Actions of ``fn(b, i)`` over the exact state space, canonical order."""
    return np.array([fn(b, i) for b, i in enumerate_states(params)], dtype=np.int64)


def threshold_table(kind: str, params: SystemParams, cfg: ThresholdConfig | None = None) -> np.ndarray:
    cfg = cfg or default_threshold(params)
    fn = {"bulk": bulk_policy, "staggered": staggered_policy}[kind]
    return policy_table(lambda b, i: fn((b, i), cfg, params), params)


def lift_action(A: int, b: int, i: int, K_I: int, C: int) -> int:
    """Concrete command for level action A at concrete state (b, i)."""
    return clamp_action(int(A) * K_I, b, i, C)


def lift_aggregated_policy(agg_policy, agg_model: CtmdpModel, params: SystemParams) -> np.ndarray:
    """Concrete policy table reproducing a level policy on the exact states.

    Each concrete state takes the action of the level containing it, scaled
    by K_I and clamped into {-i+, ..., C - b - i+}.
    """
    scheme = agg_model.meta["scheme"]
    agg_policy = np.asarray(agg_policy)
    st = np.array(enumerate_states(params), dtype=np.int64)
    b, i = st[:, 0], st[:, 1]
    B = scheme.busy_level(b)
    I = scheme.iw_level(i)
    idx = agg_model.index
    A = agg_policy[[idx[(int(x), int(y))] for x, y in zip(B, I)]]
    ip = np.maximum(i, 0)
    return np.minimum(np.maximum(A * scheme.K_I, -ip), params.C - b - ip)


def project_to_reduced(table: np.ndarray, params: SystemParams) -> np.ndarray:
    """Map intermediate setup counts onto {-i+..0} u {bulk}, rounding to bulk."""
    st = np.array(enumerate_states(params), dtype=np.int64)
    bulk = params.C - st[:, 0] - np.maximum(st[:, 1], 0)
    table = np.asarray(table)
    return np.where(table > 0, bulk, table)


def write_policy_csv(path: str | Path, states: np.ndarray, actions, coord_names=("b", "i")) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*coord_names, "action"])
        for (x, y), a in zip(np.asarray(states).tolist(), np.asarray(actions).tolist()):
            w.writerow([x, y, a])
    return path


def read_policy_csv(path: str | Path) -> dict[tuple[int, int], int]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return {(int(r[0]), int(r[1])): int(r[2]) for r in rows[1:]}
