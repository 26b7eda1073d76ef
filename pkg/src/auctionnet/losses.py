"""Misreport loss, outer objectives, multiplier updates and the budget schedule.

Two outer objectives are supported:

* augmented Lagrangian: ``sum_i -P_i + lambda_i R_i + rho/2 R_i^2`` with
  periodic ``lambda_i += rho R_i``, ``rho += rho_step``;
* regret budget: ``-sum_i P_i + gamma sum_i R_i`` where gamma follows a
  log-space dual ascent toward ``sum R / sum P == r_max`` and ``r_max`` is
  annealed geometrically to its final value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .auction import profile_utilities

__all__ = [
    "DualState", "LagrangianState", "MetricsRecord", "inner_loss", "outer_loss_lagrangian",
    "outer_loss_budget", "lagrangian_multiplier_update", "dual_update", "budget_schedule_step",
    "schedule_multiplier", "REGRET_FLOOR",
]

REGRET_FLOOR = 1e-12


@dataclass
class DualState:
    gamma: float = 1.0
    gamma_lr: float = 0.5
    r_max: float = 0.01
    r_max_end: float = 0.001
    r_max_mult: float = 0.99

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.gamma_lr <= 0 or self.r_max <= 0 or self.r_max_end <= 0:
            raise ValueError("gamma_lr, r_max and r_max_end must be positive")
        if not 0 < self.r_max_mult < 1:
            raise ValueError("r_max_mult must lie in (0, 1)")
        if self.r_max < self.r_max_end:
            raise ValueError("r_max must start at or above r_max_end")


@dataclass
class LagrangianState:
    lambdas: np.ndarray
    rho: float = 1.0
    rho_lr: float = 1.0
    update_period: int = 100

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if np.any(self.lambdas < 0) or self.rho < 0:
            raise ValueError("lambdas and rho must be >= 0")


@dataclass
class MetricsRecord:
    payments: np.ndarray      # P_i, mean payment of bidder i
    regrets: np.ndarray       # R_i, mean estimated regret of bidder i
    r_max: float = float("nan")

    @property
    def revenue(self) -> float:
        return float(np.sum(self.payments))

    @property
    def regret_mean(self) -> float:
        return float(np.mean(self.regrets))

    @property
    def ratio(self) -> float:
        total_p = float(np.sum(self.payments))
        if total_p <= 0 or not np.isfinite(self.r_max):
            return float("nan")
        return (float(np.sum(self.regrets)) / total_p) / self.r_max


def inner_loss(i: int, v, misreport, net, params=None) -> dc.Tensor:
    """Negated utility of bidder i (valued at the true ``v``) when reporting ``misreport``.

    ``v`` is one profile ``(n, m)``; the result is a scalar tensor whose only
    gradient path is through ``misreport``.
    """
    v = np.asarray(v.data if isinstance(v, dc.Tensor) else v, dtype=np.float64)
    n, m = v.shape
    misreport = dc.as_tensor(misreport)
    rows = [dc.Tensor(v[k][None, :]) if k != i else dc.reshape(misreport, (1, m)) for k in range(n)]
    profile = dc.reshape(dc.concat(rows, axis=0), (1, n, m))
    out = net.forward(profile, params)
    u = profile_utilities(out, v[None])
    return -dc.reshape(u[:, i], ())


def _as_vec(x):
    return x if isinstance(x, dc.Tensor) else dc.Tensor(np.asarray(x, dtype=np.float64))


def _penalised(payments, regrets, weights, rho):
    p, r = _as_vec(payments), _as_vec(regrets)
    return -dc.sum(p) + (dc.sum(weights * r) + (rho / 2.0) * dc.sum(r * r))


def outer_loss_lagrangian(payments, regrets, state: LagrangianState) -> dc.Tensor:
    """sum_i [-P_i + lambda_i R_i + (rho / 2) R_i^2]."""
    return _penalised(payments, regrets, state.lambdas, state.rho)


def outer_loss_budget(payments, regrets, state: DualState) -> dc.Tensor:
    """-sum_i P_i + gamma * sum_i R_i.

    Shares its evaluation path with the Lagrangian form, so lambda_i = gamma
    and rho = 0 reproduce this value bit-for-bit.
    """
    shape = np.shape(regrets.data if isinstance(regrets, dc.Tensor) else regrets)
    return _penalised(payments, regrets, np.full(shape, state.gamma), 0.0)


def lagrangian_multiplier_update(state: LagrangianState, regrets) -> LagrangianState:
    r = np.asarray(regrets, dtype=np.float64)
    return replace(state, lambdas=state.lambdas + state.rho * r, rho=state.rho + state.rho_lr)


def dual_update(state: DualState, sum_regret: float, sum_payment: float) -> DualState:
    """One log-space dual ascent step on gamma; skipped when revenue is not positive."""
    if not sum_payment > 0:
        return state
    ratio = max(float(sum_regret), REGRET_FLOOR) / float(sum_payment)
    step = math.log(ratio) - math.log(state.r_max)
    return replace(state, gamma=max(0.0, state.gamma + state.gamma_lr * step))


def budget_schedule_step(state: DualState) -> DualState:
    return replace(state, r_max=max(state.r_max_end, state.r_max_mult * state.r_max))


def schedule_multiplier(r_start: float, r_end: float, schedule_steps: int) -> float:
    """Multiplier that reaches ``r_end`` after two thirds of ``schedule_steps`` steps."""
    if r_end >= r_start:
        return 0.999999
    active = max(1.0, 2.0 * schedule_steps / 3.0)
    return (r_end / r_start) ** (1.0 / active)
