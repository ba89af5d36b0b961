"""DP-SGD fine-tuning of the diffusion synthesizer.

One step: Poisson-sample with rate ``q_d``, clip each example's gradient to
norm ``C``, sum, divide by the *expected* batch size ``B* = q_d * n_star``, add
``N(0, (sigma_d * C / B*)^2 I)`` and apply the step. The default update is plain
SGD; ``optimizer="adam"`` feeds the same privatised gradient to Adam instead.

Noise comes from numpy's PCG64 generator, which is not a cryptographically
secure source. Fine for experiments, not for production releases.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO

import numpy as np

from .accountant import RdpLedger, SgmSpec, compose, to_dp
from .dataset import LabeledDataset
from .errors import InfeasibleBudgetError, TrainingDivergenceError
from .models import DiffusionModel, diffusion_loss_and_grads
from .numerics import AdamState, SeededRng, adam_step, poisson_subsample, unflatten

__all__ = [
    "DpSgdConfig",
    "clip_gradient",
    "clip_rows",
    "privatize_gradients",
    "per_sample_gradients",
    "dpsgd_step",
    "finetune",
    "steps_for_epochs",
]


def steps_for_epochs(epochs: float, q_d: float) -> int:
    """Step count for a Poisson-sampled run: ``round(epochs / q_d)``."""
    return int(round(epochs / q_d))


@dataclass
class DpSgdConfig:
    clip: float
    sigma_d: float
    q_d: float
    steps: int
    lr: float
    n_star: int
    optimizer: str = "sgd"
    delta: float = 1e-5
    chunk: int = 64

    def __post_init__(self):
        if self.clip <= 0:
            raise ValueError("clip norm must be positive")
        if self.sigma_d < 0:
            raise ValueError("sigma_d must be nonnegative")
        if not 0 <= self.q_d <= 1:
            raise ValueError("q_d must lie in [0, 1]")
        if self.steps < 0 or self.lr <= 0:
            raise ValueError("steps must be >= 0 and lr > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.b_star <= 0:
            raise ValueError("expected batch size q_d * n_star must be positive")

    @property
    def b_star(self) -> float:
        # q_d = 0 is legal (no data touched); normalise by n_star's worth of one record then
        return self.q_d * self.n_star if self.q_d > 0 else 1.0

    def sgm_spec(self, steps: int | None = None) -> SgmSpec | None:
        if self.sigma_d == 0:
            return None
        return SgmSpec(self.q_d, self.sigma_d, self.steps if steps is None else steps, "dpsgd")


def clip_gradient(g, C: float) -> np.ndarray:
    """``min(1, C / ||g||) * g``."""
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm <= C:
        return g.copy()
    return g * (C / norm)


def clip_rows(G: np.ndarray, C: float) -> np.ndarray:
    norms = np.linalg.norm(G, axis=1)
    factor = np.where(norms > C, C / np.maximum(norms, np.finfo(float).tiny), 1.0)
    return G * factor[:, None]


def privatize_gradients(per_sample: np.ndarray, clip: float, sigma_d: float, b_star: float,
                        rng: SeededRng, dim: int | None = None) -> np.ndarray:
    """Clipped sum over rows, divided by ``b_star``, plus Gaussian noise.

    ``per_sample`` is ``(B, P)``; an empty batch yields pure noise of length ``dim``.
    """
    per_sample = np.asarray(per_sample, dtype=np.float64)
    P = per_sample.shape[1] if per_sample.ndim == 2 and per_sample.shape[0] else dim
    if P is None:
        raise ValueError("dimension required for an empty batch")
    total = clip_rows(per_sample, clip).sum(axis=0) if per_sample.size else np.zeros(P)
    g = total / b_star
    if sigma_d > 0:
        g = g + (sigma_d * clip / b_star) * rng.normal(P)
    return g


def per_sample_gradients(model: DiffusionModel, images, labels, rng: SeededRng, chunk: int = 64):
    """Flattened per-example gradients ``(B, P)`` and per-example losses."""
    rows, losses = [], []
    for start in range(0, len(labels), chunk):
        l, grads = diffusion_loss_and_grads(model, images[start:start + chunk], labels[start:start + chunk],
                                            rng, per_sample=True)
        n = len(l)
        rows.append(np.concatenate([g.reshape(n, -1) for g in grads], axis=1))
        losses.append(l)
    return np.concatenate(rows, axis=0), np.concatenate(losses)


def dpsgd_step(model: DiffusionModel, dataset: LabeledDataset, config: DpSgdConfig, rng: SeededRng,
               ledger: RdpLedger | None = None, state: AdamState | None = None):
    """One private update.

    Returns:
        ``(model, ledger, record, state)``. ``record`` holds the realised batch
        size and mean loss (``nan`` for an empty batch).
    """
    params = model.params()
    idx = poisson_subsample(rng, len(dataset), config.q_d)
    P = sum(p.size for p in params)
    if len(idx):
        G, losses = per_sample_gradients(model, dataset.images[idx], dataset.labels[idx], rng, config.chunk)
        loss = float(losses.mean())
    else:
        G, loss = np.zeros((0, P)), float("nan")
    g = privatize_gradients(G, config.clip, config.sigma_d, config.b_star, rng, P)
    if not np.all(np.isfinite(g)):
        raise TrainingDivergenceError("non-finite private gradient", "dpsgd")
    grads = unflatten(g, params)
    if config.optimizer == "adam":
        state = state or AdamState.zeros_like(params)
        params, state = adam_step(params, grads, state, config.lr)
    else:
        params = [p - config.lr * gi for p, gi in zip(params, grads)]
    if not all(np.all(np.isfinite(p)) for p in params):
        raise TrainingDivergenceError("non-finite parameters after update", "dpsgd")
    spec = config.sgm_spec(1)
    if ledger is not None and spec is not None:
        ledger = compose(ledger, spec)
    return model.with_params(params), ledger, {"batch_size": int(len(idx)), "loss": loss}, state


def finetune(model: DiffusionModel, dataset: LabeledDataset, config: DpSgdConfig, rng: SeededRng,
             ledger: RdpLedger | None = None, target_eps: float | None = None,
             log: IO[str] | None = None):
    """Run ``config.steps`` private steps on top of an existing ledger.

    The ledger after ``k`` steps is ``compose(ledger, SgmSpec(q_d, sigma_d, k))``.
    If a step would push epsilon past ``target_eps`` the run stops before it.

    Returns:
        ``(model, ledger, trace)``; ``trace`` has one record per step with the
        step index, realised batch size, loss, gamma at the best order and
        running epsilon. ``log`` receives the same records as JSON lines.
    """
    base = ledger if ledger is not None else RdpLedger()
    state = None
    trace = []
    current = base
    for k in range(1, config.steps + 1):
        spec = config.sgm_spec(k)
        nxt = compose(base, spec) if spec is not None else base
        if target_eps is not None:
            eps_next = to_dp(nxt, config.delta)[0] if spec is not None else math.inf
            if eps_next > target_eps:
                raise InfeasibleBudgetError(
                    f"step {k} would raise epsilon to {eps_next:.4f} > target {target_eps}")
        model, _, rec, state = dpsgd_step(model, dataset, config, rng, None, state)
        current = nxt
        if spec is not None:
            eps, alpha = to_dp(current, config.delta)
            gamma = current.gamma[current.orders.index(alpha)]
        else:
            eps, gamma = math.inf, math.inf
        rec = {"step": k, **rec, "gamma": gamma, "epsilon": eps}
        trace.append(rec)
        if log is not None:
            log.write(json.dumps(rec) + "\n")
    return model, current, trace
