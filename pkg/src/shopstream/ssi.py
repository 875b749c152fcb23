"""Schedule Stress Index: a log-compressed difficulty score in [0, 100]."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .metrics import ObservedMetrics

BUCKETS = ((15.0, "under-loaded"), (25.0, "moderate"), (35.0, "hard"), (math.inf, "critical"))


@dataclass(frozen=True)
class SsiConfig:
    c_max: float = 100.0
    p_max: float = 2.0
    k_max: float = 200.0
    s_max: float = 0.25
    eps: float = 1e-3
    rho_cap: float = 0.999
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in ("c_max", "p_max", "k_max", "s_max", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.rho_cap < 1:
            raise ValueError("rho_cap must lie in (0, 1)")
        if len(self.weights) != 4 or any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
            raise ValueError("weights must be four non-negative numbers with a positive sum")


@dataclass(frozen=True)
class SsiComponents:
    C: float
    P: float
    K: float
    S: float
    C_hat: float = 0.0
    P_hat: float = 0.0
    K_hat: float = 0.0
    S_hat: float = 0.0
    d: float = 0.0
    bucket: str = ""

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def congestion(rho_nb: float, c_a2: float, c_p2: float, rho_cap: float = 0.999) -> float:
    rho = min(max(rho_nb, 0.0), rho_cap)
    return rho / (1.0 - rho) * (1.0 + (c_a2 + c_p2) / 2.0)


def ssi_components(m: ObservedMetrics, n_machines: int | None = None, cfg: SsiConfig = SsiConfig()) -> SsiComponents:
    """Raw congestion, time pressure, structure and disruption components."""
    rho_nb = max(m.rho_groups.values()) if m.rho_groups else m.rho_global
    M = m.n_machines if n_machines is None else n_machines
    C = congestion(rho_nb, m.c_a2, m.c_p2, cfg.rho_cap)
    P = 1.0 / max(m.tau, cfg.eps)
    K = min(M * m.mean_route_length / cfg.k_max, 1.0)
    S = min(m.delta / cfg.s_max, 1.0)
    return SsiComponents(C, P, K, S)


def bucket(d: float) -> str:
    for upper, name in BUCKETS:
        if d < upper:
            return name
    return BUCKETS[-1][1]


def _hat(x: float, x_max: float) -> float:
    return min(max(math.log1p(max(x, 0.0)) / math.log1p(x_max), 0.0), 1.0)


def ssi_score(c: SsiComponents, cfg: SsiConfig = SsiConfig()) -> SsiComponents:
    """Log-normalize the components and combine them into ``d``.

    K and S are already in [0, 1], so their normalizer is 1.
    """
    hats = (_hat(c.C, cfg.c_max), _hat(c.P, cfg.p_max), _hat(c.K, 1.0), _hat(c.S, 1.0))
    w = np.asarray(cfg.weights, float)
    d = float(100.0 * np.dot(w, hats) / w.sum())
    d = min(max(d, 0.0), 100.0)
    return SsiComponents(c.C, c.P, c.K, c.S, *hats, d=d, bucket=bucket(d))


def ssi(m: ObservedMetrics, cfg: SsiConfig = SsiConfig()) -> SsiComponents:
    return ssi_score(ssi_components(m, cfg=cfg), cfg)


def deciles(x) -> np.ndarray:
    """Decile index 0..9 of each value by average rank."""
    r = stats.rankdata(x)
    n = len(r)
    return np.minimum(np.floor((r - 0.5) / n * 10.0), 9).astype(int)


def rank_stability(a, b) -> tuple[float, float, float]:
    """Spearman, Kendall and mean absolute decile shift between two scorings."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError("score vectors differ in length")
    if a.size < 3:
        raise ValueError("need at least three scores")
    rho = float(stats.spearmanr(a, b).statistic)
    tau = float(stats.kendalltau(a, b).statistic)
    shift = float(np.mean(np.abs(deciles(a) - deciles(b))))
    return rho, tau, shift
