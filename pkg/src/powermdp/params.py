from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class SystemParams:
    """Scalar inputs of the data-center model.

    C servers, a FIFO queue of capacity Q, Poisson arrivals (lam), exponential
    service (mu) and setup (gamma). The cost weights price a waiting job
    (c_perf), an idle server (c_power) and a server in setup (c_power_setup).
    epsilon is the tail mass left outside the busy-server confidence interval.
    """

    C: int
    Q: int
    lam: float
    mu: float = 1.0
    gamma: float = 2.0
    c_perf: float = 50.0
    c_power: float = 1.0
    c_power_setup: float = 2.0
    epsilon: float = 0.01

    def __post_init__(self) -> None:
        if int(self.C) != self.C or self.C < 1:
            raise ValueError(f"C must be a positive integer, got {self.C!r}")
        if int(self.Q) != self.Q or self.Q < 1:
            raise ValueError(f"Q must be a positive integer, got {self.Q!r}")
        for name in ("lam", "mu", "gamma", "c_perf", "c_power", "c_power_setup"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v!r}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon!r}")
        if self.rho >= self.C:
            raise ValueError(f"load rho={self.rho:g} must stay below C={self.C}")

    @property
    def rho(self) -> float:
        return self.lam / self.mu

    def with_(self, **changes) -> "SystemParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)
