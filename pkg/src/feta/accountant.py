"""Renyi-DP accounting for Poisson-subsampled Gaussian mechanisms.

The per-step bound for integer orders uses the exact binomial expansion

    gamma(alpha) = log( sum_k C(alpha, k) (1-q)^(alpha-k) q^k exp(k(k-1) / (2 sigma^2)) ) / (alpha - 1)

evaluated in log space. Ledgers are immutable; composing returns a new ledger.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import AccountingRangeError, InfeasibleBudgetError

__all__ = [
    "DEFAULT_ORDERS",
    "AlphaGrid",
    "SgmSpec",
    "RdpLedger",
    "sgm_rdp_step",
    "sgm_rdp",
    "compose",
    "to_dp",
    "calibrate_sigma_d",
    "budget_ratios",
    "ledger_for",
    "format_ledger_table",
]

DEFAULT_ORDERS: tuple[float, ...] = tuple(float(a) for a in range(2, 65)) + (128.0, 256.0)


@dataclass(frozen=True)
class AlphaGrid:
    orders: tuple[float, ...] = DEFAULT_ORDERS

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        object.__setattr__(self, "orders", orders)
        if any(a <= 1 for a in orders):
            raise ValueError("every Renyi order must exceed 1")
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise ValueError("Renyi orders must be strictly increasing")

    def __len__(self):
        return len(self.orders)

    def __iter__(self):
        return iter(self.orders)

    def as_array(self) -> np.ndarray:
        return np.array(self.orders)


@dataclass(frozen=True)
class SgmSpec:
    """``steps`` compositions of a Gaussian mechanism on a Poisson(q) subsample.

    ``sigma`` is the noise multiplier, i.e. noise std in units of the sensitivity.
    """

    q: float
    sigma: float
    steps: int = 1
    label: str = ""

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"sampling rate must lie in [0, 1], got {self.q}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"noise multiplier must be positive and finite, got {self.sigma}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError(f"steps must be a nonnegative integer, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))

    def to_dict(self) -> dict:
        return {"label": self.label, "q": self.q, "sigma": self.sigma, "steps": self.steps}


def sgm_rdp_step(q: float, sigma: float, alpha: int) -> float:
    """Renyi divergence bound of one subsampled Gaussian step at integer order ``alpha``."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling rate must lie in [0, 1], got {q}")
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ValueError(f"noise multiplier must be positive and finite, got {sigma}")
    if alpha != int(alpha) or alpha < 2:
        raise ValueError(f"only integer orders >= 2 are supported, got {alpha}")
    return _sgm_rdp_step(float(q), float(sigma), int(alpha))


@functools.lru_cache(maxsize=65536)
def _sgm_rdp_step(q: float, sigma: float, alpha: int) -> float:
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * sigma ** 2)
    k = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
        + k * math.log(q) + (alpha - k) * math.log1p(-q)
        + k * (k - 1) / (2.0 * sigma ** 2)
    )
    log_a = float(logsumexp(log_terms))
    if not math.isfinite(log_a):
        raise AccountingRangeError(f"RDP overflow at q={q}, sigma={sigma}, alpha={alpha}")
    # log_a >= 0 mathematically; clip tiny negative rounding
    return max(log_a, 0.0) / (alpha - 1)


def sgm_rdp(q: float, sigma: float, steps: int, grid: AlphaGrid | None = None) -> np.ndarray:
    grid = grid or AlphaGrid()
    if steps == 0:
        return np.zeros(len(grid))
    return np.array([steps * sgm_rdp_step(q, sigma, a) for a in grid.orders])


@dataclass(frozen=True)
class RdpLedger:
    """Accumulated RDP curve plus the mechanisms that produced it."""

    grid: AlphaGrid = field(default_factory=AlphaGrid)
    gamma: tuple[float, ...] = ()
    entries: tuple[SgmSpec, ...] = ()

    def __post_init__(self):
        gamma = tuple(float(g) for g in self.gamma) or (0.0,) * len(self.grid)
        if len(gamma) != len(self.grid):
            raise ValueError("gamma must have one value per order")
        if any(g < 0 or math.isnan(g) for g in gamma):
            raise ValueError("accumulated RDP must be nonnegative")
        object.__setattr__(self, "gamma", gamma)

    @property
    def orders(self) -> tuple[float, ...]:
        return self.grid.orders

    def gamma_array(self) -> np.ndarray:
        return np.array(self.gamma)

    def compose(self, spec: SgmSpec) -> "RdpLedger":
        return compose(self, spec)

    def epsilon(self, delta: float) -> float:
        return to_dp(self, delta)[0]

    def stage_gamma(self, label: str) -> np.ndarray:
        total = np.zeros(len(self.grid))
        for e in self.entries:
            if e.label == label:
                total += sgm_rdp(e.q, e.sigma, e.steps, self.grid)
        return total

    def to_dict(self, delta: float | None = None) -> dict:
        doc = {
            "orders": list(self.orders),
            "gamma": list(self.gamma),
            "entries": [e.to_dict() for e in self.entries],
        }
        if delta is not None:
            eps, alpha = to_dp(self, delta)
            doc.update(delta=delta, epsilon=eps, best_alpha=alpha)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RdpLedger":
        return cls(AlphaGrid(tuple(doc["orders"])), tuple(doc["gamma"]),
                   tuple(SgmSpec(e["q"], e["sigma"], e["steps"], e.get("label", "")) for e in doc["entries"]))


def compose(ledger: RdpLedger, spec: SgmSpec) -> RdpLedger:
    """Add ``spec.steps`` copies of the mechanism to every order of ``ledger``."""
    if spec.steps == 0:
        return RdpLedger(ledger.grid, ledger.gamma, ledger.entries + (spec,))
    add = sgm_rdp(spec.q, spec.sigma, spec.steps, ledger.grid)
    return RdpLedger(ledger.grid, tuple(ledger.gamma_array() + add), ledger.entries + (spec,))


def ledger_for(specs: Iterable[SgmSpec], grid: AlphaGrid | None = None) -> RdpLedger:
    ledger = RdpLedger(grid or AlphaGrid())
    for s in specs:
        ledger = compose(ledger, s)
    return ledger


def to_dp(ledger: RdpLedger, delta: float) -> tuple[float, float]:
    """Convert to (epsilon, delta)-DP; returns ``(epsilon, best_alpha)``."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if len(ledger.grid) == 0:
        raise ValueError("cannot convert a ledger with an empty order grid")
    orders = ledger.grid.as_array()
    eps = ledger.gamma_array() + math.log(1.0 / delta) / (orders - 1.0)
    # ties resolve to the largest order
    i = len(eps) - 1 - int(np.argmin(eps[::-1]))
    return float(eps[i]), float(orders[i])


def calibrate_sigma_d(target_eps: float, delta: float, fixed: Sequence[SgmSpec], q_d: float,
                      steps_d: int, sigma_range: tuple[float, float] = (0.5, 200.0),
                      grid_points: int = 64, rel_tol: float = 1e-3,
                      grid: AlphaGrid | None = None) -> float:
    """Smallest DP-SGD noise multiplier keeping the total epsilon within budget.

    A geometric scan over ``sigma_range`` brackets the answer, which is then
    bisected until the bracket's relative width is below ``rel_tol``. The
    upper end of the bracket is returned, so the budget is never exceeded.

    Raises:
        InfeasibleBudgetError: the fixed mechanisms alone already spend the
            target, or even the largest scanned sigma is not enough.
    """
    if not target_eps > 0:
        raise ValueError(f"target epsilon must be positive, got {target_eps}")
    if not 0.0 < q_d <= 1.0:
        raise ValueError(f"q_d must lie in (0, 1], got {q_d}")
    if steps_d < 1:
        raise ValueError(f"steps_d must be positive, got {steps_d}")
    base = ledger_for(fixed, grid)
    fixed_eps = to_dp(base, delta)[0] if fixed else 0.0
    if fixed and fixed_eps >= target_eps:
        raise InfeasibleBudgetError(
            f"feature queries alone cost epsilon={fixed_eps:.4f} >= target {target_eps}; "
            "raise sigma_t / sigma_f to leave budget for DP-SGD")

    def eps_at(sigma):
        return to_dp(compose(base, SgmSpec(q_d, sigma, steps_d)), delta)[0]

    lo_s, hi_s = sigma_range
    scan = np.geomspace(lo_s, hi_s, grid_points)
    ok = [s for s in scan if eps_at(s) <= target_eps]
    if not ok:
        raise InfeasibleBudgetError(
            f"no sigma_d in [{lo_s}, {hi_s}] meets epsilon={target_eps} at delta={delta}")
    hi = ok[0]
    idx = int(np.searchsorted(scan, hi))
    if idx == 0:
        return float(hi)
    lo = scan[idx - 1]
    while hi / lo - 1.0 > rel_tol:
        mid = math.sqrt(lo * hi)
        if eps_at(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return float(hi)


def budget_ratios(specs: Mapping[str, SgmSpec | Sequence[SgmSpec]], delta: float,
                  grid: AlphaGrid | None = None) -> dict:
    """Share of the total RDP attributable to each labelled mechanism.

    Shares are read at the order that minimises the converted epsilon of the
    full composition.

    Returns:
        dict with ``shares`` (label -> fraction), ``gamma`` (label -> RDP at the
        chosen order), ``alpha`` and ``epsilon``.
    """
    if not specs:
        raise ValueError("need at least one mechanism")
    grid = grid or AlphaGrid()
    per_label = {}
    for label, s in specs.items():
        group = [s] if isinstance(s, SgmSpec) else list(s)
        per_label[label] = sum((sgm_rdp(x.q, x.sigma, x.steps, grid) for x in group), np.zeros(len(grid)))
    total = sum(per_label.values())
    ledger = RdpLedger(grid, tuple(total))
    eps, alpha = to_dp(ledger, delta)
    i = grid.orders.index(alpha)
    gam = {k: float(v[i]) for k, v in per_label.items()}
    denom = math.fsum(gam.values())
    if denom == 0:
        shares = {k: 1.0 / len(gam) for k in gam}
    else:
        shares = {k: g / denom for k, g in gam.items()}
    return {"shares": shares, "gamma": gam, "alpha": alpha, "epsilon": eps}


def format_ledger_table(ledger: RdpLedger, delta: float, shares: Mapping[str, float] | None = None) -> str:
    """Aligned plain-text rendering: one row per order, then epsilon and shares."""
    eps, best = to_dp(ledger, delta)
    labels = sorted({e.label for e in ledger.entries if e.label})
    header = ["alpha", "gamma_total"] + [f"gamma[{l}]" for l in labels] + ["eps(alpha)"]
    stage = {l: ledger.stage_gamma(l) for l in labels}
    rows = []
    for i, a in enumerate(ledger.orders):
        conv = ledger.gamma[i] + math.log(1 / delta) / (a - 1)
        mark = " *" if a == best else ""
        rows.append([f"{a:g}", f"{ledger.gamma[i]:.6g}"] + [f"{stage[l][i]:.6g}" for l in labels]
                    + [f"{conv:.6g}{mark}"])
    widths = [max(len(r[j]) for r in rows + [header]) for j in range(len(header))]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.append(f"epsilon = {eps:.6f} at delta = {delta:g} (alpha* = {best:g})")
    if shares:
        lines.append("budget shares at alpha*: " + ", ".join(f"{k} {100 * v:.2f}%" for k, v in shares.items()))
    return "\n".join(lines)
