"""Auction semantics and analytic DSIC baselines.

Valuations are additive: a profile is an ``(n, m)`` array of per-item values
(or a ``(B, n, m)`` batch).  Baselines are vectorised over the batch axis and
can be wrapped as mechanisms (:class:`BaselineMechanism`) so the regret and
evaluation code treats them like networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffcore as dc
from .architectures import ForwardOutput

__all__ = [
    "MechanismOutcome", "utility", "revenue", "exact_regret_oracle", "GridTooLargeError",
    "vcg_run", "myerson_itemwise_run", "myerson_bundled_run", "IrwinHall", "BundleTableError",
    "BaselineMechanism", "ConstantMechanism", "monte_carlo_revenue", "BASELINES",
    "profile_utilities", "discrete_optimal_mechanism",
]


@dataclass
class MechanismOutcome:
    allocation: np.ndarray   # (..., n, m), real participants only
    payments: np.ndarray     # (..., n)


def utility(i: int, v: np.ndarray, outcome: MechanismOutcome) -> float:
    """Bidder i's expected value of the allocation minus payment."""
    z = np.asarray(outcome.allocation)
    return float(np.sum(z[..., i, :] * np.asarray(v)[..., i, :], axis=-1) - np.asarray(outcome.payments)[..., i])


def revenue(outcome: MechanismOutcome) -> float:
    return float(np.sum(outcome.payments))


def profile_utilities(out: ForwardOutput, values) -> dc.Tensor:
    """(B, n) utilities of every bidder at ``values``, using their own rows of ``out``."""
    values = dc.as_tensor(values)
    n = values.shape[-2]
    z = out.allocation[:, :n, :]
    return dc.sum(z * values, axis=-1) - out.payment


# ---------------------------------------------------------------------------
# analytic baselines
# ---------------------------------------------------------------------------

def _batch(v):
    v = np.asarray(v, dtype=np.float64)
    return (v[None], True) if v.ndim == 2 else (v, False)


def _second_price(v, reserve):
    """Per-item second price with reserve; ties go to the lowest index."""
    b, n, m = v.shape
    winner = np.argmax(v, axis=1)                           # (B, m)
    top = np.take_along_axis(v, winner[:, None, :], axis=1)[:, 0, :]
    if n > 1:
        second = np.sort(v, axis=1)[:, -2, :]
    else:
        second = np.zeros((b, m))
    sold = top >= reserve
    price = np.where(sold, np.maximum(second, reserve), 0.0)
    z = np.zeros_like(v)
    bi, ji = np.nonzero(sold)
    z[bi, winner[bi, ji], ji] = 1.0
    pay = (z * price[:, None, :]).sum(axis=2)
    return z, pay


def vcg_run(v) -> MechanismOutcome:
    """Additive VCG: each item to its highest bidder at the second-highest bid."""
    v, single = _batch(v)
    z, pay = _second_price(v, np.zeros(v.shape[2]))
    return MechanismOutcome(z[0], pay[0]) if single else MechanismOutcome(z, pay)


def myerson_itemwise_run(v, lo=None, hi=None) -> MechanismOutcome:
    """Each item sold separately by Myerson's auction for Uniform(lo, hi) values.

    The virtual value 2t - hi vanishes at hi / 2, so the reserve is
    max(lo, hi / 2): 0.5 for the unit interval.
    """
    v, single = _batch(v)
    m = v.shape[2]
    lo = np.zeros(m) if lo is None else np.broadcast_to(np.asarray(lo, float), (m,))
    hi = np.ones(m) if hi is None else np.broadcast_to(np.asarray(hi, float), (m,))
    z, pay = _second_price(v, np.maximum(lo, hi / 2.0))
    return MechanismOutcome(z[0], pay[0]) if single else MechanismOutcome(z, pay)


class BundleTableError(ValueError):
    pass


class IrwinHall:
    """Tabulated CDF, density and ironed virtual value of a sum of m U[0,1].

    m <= 3 uses the piecewise polynomials; larger m builds the CDF by the
    recursion F_k(t) = integral of F_{k-1} over [t-1, t] with a cumulative
    trapezoid rule, and the density from f_k(t) = F_{k-1}(t) - F_{k-1}(t-1).
    """

    def __init__(self, m: int, points: int = 10_001):
        if m < 1:
            raise ValueError("m must be >= 1")
        self.m = m
        if m <= 3:
            self.t = np.linspace(0.0, m, points)
            self.cdf, self.pdf = self._closed(m, self.t)
        else:
            per_unit = math.ceil((points - 1) / m)
            self.t = np.linspace(0.0, m, per_unit * m + 1)
            self.cdf, self.pdf = self._recursive(m, per_unit)
        self.phi = self._virtual()
        self.phi_ironed = np.maximum.accumulate(self.phi)

    @staticmethod
    def _closed(m, t):
        if m == 1:
            return t.copy(), np.ones_like(t)
        if m == 2:
            low = t <= 1
            cdf = np.where(low, t * t / 2, 1 - (2 - t) ** 2 / 2)
            pdf = np.where(low, t, 2 - t)
            return cdf, pdf
        a, b = t <= 1, (t > 1) & (t <= 2)
        cdf = np.where(a, t ** 3 / 6,
                       np.where(b, (-2 * t ** 3 + 9 * t ** 2 - 9 * t + 3) / 6, 1 - (3 - t) ** 3 / 6))
        pdf = np.where(a, t ** 2 / 2, np.where(b, (-2 * t ** 2 + 6 * t - 3) / 2, (3 - t) ** 2 / 2))
        return cdf, pdf

    def _recursive(self, m, per_unit):
        h = 1.0 / per_unit
        size = per_unit * m + 1
        t = self.t
        cdf = np.clip(t, 0.0, 1.0)                       # F_1
        prev = cdf
        for _ in range(2, m + 1):
            prev = cdf
            # G(t) = integral_0^t F(s) ds, trapezoid on the grid
            g = np.concatenate([[0.0], np.cumsum((prev[1:] + prev[:-1]) * (h / 2))])
            shifted = np.zeros(size)
            shifted[per_unit:] = g[:-per_unit]
            cdf = g - shifted
        lagged = np.zeros(size)
        lagged[per_unit:] = prev[:-per_unit]
        pdf = prev - lagged
        return np.clip(cdf, 0.0, 1.0), np.maximum(pdf, 0.0)

    def _virtual(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            phi = self.t - (1.0 - self.cdf) / self.pdf
        phi = np.where(self.pdf > 0, phi, np.where(self.t < self.m / 2, -np.inf, self.t))
        return phi

    def _check(self, s):
        s = np.asarray(s, dtype=np.float64)
        if np.any(s < -1e-12) or np.any(s > self.m + 1e-12):
            raise BundleTableError(f"bundle value outside [0, {self.m}]")
        return s

    def F(self, s):
        return np.interp(self._check(s), self.t, self.cdf)

    def f(self, s):
        return np.interp(self._check(s), self.t, self.pdf)

    def virtual_value(self, s):
        s = self._check(s)
        phi = self.phi_ironed
        finite = np.where(np.isfinite(phi), phi, -1e300)
        return np.interp(s, self.t, finite)

    def threshold(self, c):
        """Smallest bundle value whose (ironed) virtual value reaches c."""
        phi = np.where(np.isfinite(self.phi_ironed), self.phi_ironed, -1e300)
        c = np.asarray(c, dtype=np.float64)
        k = np.searchsorted(phi, c, side="left")
        k = np.clip(k, 1, len(phi) - 1)
        lo_p, hi_p = phi[k - 1], phi[k]
        lo_t, hi_t = self.t[k - 1], self.t[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(hi_p > lo_p, (c - lo_p) / (hi_p - lo_p), 1.0)
        return np.clip(lo_t + np.clip(w, 0, 1) * (hi_t - lo_t), 0.0, self.m)

    @property
    def reserve(self) -> float:
        return float(self.threshold(0.0))


@lru_cache(maxsize=16)
def _irwin_hall(m: int) -> IrwinHall:
    return IrwinHall(m)


def myerson_bundled_run(v) -> MechanismOutcome:
    """Grand bundle sold by Myerson's auction on Irwin-Hall bundle values.

    The bidder with the highest positive virtual value takes every item and
    pays the smallest bundle value that would still have won.
    """
    v, single = _batch(v)
    b, n, m = v.shape
    table = _irwin_hall(m)
    s = v.sum(axis=2)
    phi = table.virtual_value(s)                      # (B, n)
    winner = np.argmax(phi, axis=1)
    best = phi[np.arange(b), winner]
    sold = best > 0
    if n > 1:
        others = phi.copy()
        others[np.arange(b), winner] = -np.inf
        rival = np.maximum(others.max(axis=1), 0.0)
    else:
        rival = np.zeros(b)
    price = np.where(sold, table.threshold(rival), 0.0)
    z = np.zeros_like(v)
    pay = np.zeros((b, n))
    idx = np.nonzero(sold)[0]
    z[idx, winner[idx], :] = 1.0
    pay[idx, winner[idx]] = price[idx]
    return MechanismOutcome(z[0], pay[0]) if single else MechanismOutcome(z, pay)


BASELINES = {
    "vcg": vcg_run,
    "myerson-itemwise": myerson_itemwise_run,
    "myerson-bundled": myerson_bundled_run,
}


def monte_carlo_revenue(name: str, spec, samples: int, rng, chunk: int = 200_000) -> tuple[float, float]:
    """Mean revenue and its standard error over ``samples`` fresh profiles."""
    from .data import sample_profiles

    run = BASELINES[name]
    total = total_sq = 0.0
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        v = sample_profiles(spec, k, rng)
        if name == "myerson-itemwise":
            out = run(v, spec.lo, spec.hi)
        else:
            out = run(v)
        rev = out.payments.sum(axis=1)
        total += rev.sum()
        total_sq += (rev * rev).sum()
        done += k
    mean = total / samples
    var = max(total_sq / samples - mean * mean, 0.0)
    return float(mean), float(math.sqrt(var / samples))


class BaselineMechanism:
    """Analytic baseline exposed through the network forward interface.

    Outputs carry no gradient, so gradient-based misreport search sees a flat
    utility surface, which is exactly the DSIC behaviour.
    """

    variant = "baseline"

    def __init__(self, name: str, lo=None, hi=None):
        if name not in BASELINES:
            raise ValueError(f"unknown baseline {name!r}; choose from {sorted(BASELINES)}")
        self.name = name
        self.lo, self.hi = lo, hi

    def accepts(self, n: int, m: int) -> bool:
        return True

    def outcome(self, bids: np.ndarray) -> MechanismOutcome:
        if self.name == "myerson-itemwise":
            return myerson_itemwise_run(bids, self.lo, self.hi)
        return BASELINES[self.name](bids)

    def forward(self, bids, params=None) -> ForwardOutput:
        arr = np.asarray(bids.data if isinstance(bids, dc.Tensor) else bids, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        out = self.outcome(arr)
        return _as_forward(out.allocation, out.payments, arr)

    __call__ = forward


class ConstantMechanism:
    """Fixed allocation and payments regardless of the bids."""

    variant = "constant"

    def __init__(self, allocation: np.ndarray, payments: np.ndarray):
        self.allocation = np.asarray(allocation, dtype=np.float64)
        self.payments = np.asarray(payments, dtype=np.float64)

    def accepts(self, n: int, m: int) -> bool:
        return (n, m) == self.allocation.shape

    def forward(self, bids, params=None) -> ForwardOutput:
        shape = bids.shape
        bsz = shape[0] if len(shape) == 3 else 1
        z = np.broadcast_to(self.allocation, (bsz,) + self.allocation.shape).copy()
        p = np.broadcast_to(self.payments, (bsz,) + self.payments.shape).copy()
        return _as_forward(z, p, None)

    __call__ = forward


def _as_forward(z, pay, bids) -> ForwardOutput:
    dummy = np.clip(1.0 - z.sum(axis=-2, keepdims=True), 0.0, 1.0)
    full = np.concatenate([z, dummy], axis=-2)
    if bids is not None:
        value = (z * bids).sum(axis=-1)
        frac = np.divide(pay, value, out=np.zeros_like(pay), where=value > 0)
    else:
        frac = np.zeros_like(pay)
    with np.errstate(divide="ignore"):
        logits = np.log(full)
    return ForwardOutput(dc.Tensor(full), dc.Tensor(frac), dc.Tensor(pay), dc.Tensor(logits))


# ---------------------------------------------------------------------------
# brute-force regret
# ---------------------------------------------------------------------------

class GridTooLargeError(ValueError):
    pass


MAX_GRID_POINTS = 300_000


def exact_regret_oracle(net, v, i: int, grid: int, support=(0.0, 1.0), chunk: int = 4096) -> float:
    """Best utility gain of bidder i over a full misreport grid (truth included).

    ``grid`` points per item span the support box; grid=1 means the grid is the
    truthful report alone.
    """
    v = np.asarray(v, dtype=np.float64)
    n, m = v.shape
    if not 0 <= i < n:
        raise IndexError(f"bidder {i} out of range for n={n}")
    if grid < 1:
        raise ValueError("grid must be >= 1")
    if grid ** m > MAX_GRID_POINTS:
        raise GridTooLargeError(f"{grid}^{m} misreports exceeds {MAX_GRID_POINTS}")
    if grid == 1:
        reports = v[i][None, :]
    else:
        lo = np.broadcast_to(np.asarray(support[0], float), (m,))
        hi = np.broadcast_to(np.asarray(support[1], float), (m,))
        axes = [np.linspace(lo[j], hi[j], grid) for j in range(m)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, m)
        reports = np.concatenate([v[i][None, :], mesh], axis=0)
    best = -np.inf
    truthful = None
    with dc.no_grad():
        for start in range(0, len(reports), chunk):
            block = reports[start:start + chunk]
            profiles = np.repeat(v[None], len(block), axis=0)
            profiles[:, i, :] = block
            out = net.forward(dc.Tensor(profiles))
            z = out.allocation.data[:, i, :]
            u = (z * v[i]).sum(axis=-1) - out.payment.data[:, i]
            if truthful is None:
                truthful = u[0]
            best = max(best, float(u.max()))
    return best - float(truthful)


# ---------------------------------------------------------------------------
# single-bidder optimum on a discrete type grid
# ---------------------------------------------------------------------------

def discrete_optimal_mechanism(lo, hi, points) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Revenue-optimal single-bidder mechanism over a uniform type grid.

    Types sit at cell midpoints of the box ``[lo, hi]`` with ``points`` cells
    per item and equal weight.  The mechanism (allocation probabilities and
    a payment per type) is the solution of the standard IC/IR linear
    programme.  Returns ``(axes, allocation, payments, revenue)`` with
    allocation shaped ``(p_1, ..., p_m, m)``.
    """
    from scipy import sparse
    from scipy.optimize import linprog

    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    points = np.broadcast_to(np.asarray(points, int), lo.shape)
    m = lo.size
    axes = [lo[j] + (np.arange(points[j]) + 0.5) * (hi[j] - lo[j]) / points[j] for j in range(m)]
    types = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, m)
    k = len(types)
    nvar = k * (m + 1)               # allocations a_kj, then payments pi_k
    pay = k * m + np.arange(k)
    alloc = np.arange(k * m).reshape(k, m)

    # IC: a_l . t_k - pi_l - a_k . t_k + pi_k <= 0 for l != k
    kk, ll = np.nonzero(~np.eye(k, dtype=bool))
    rows = np.arange(len(kk))
    r = np.concatenate([np.repeat(rows, m), np.repeat(rows, m), rows, rows])
    c = np.concatenate([alloc[ll].ravel(), alloc[kk].ravel(), pay[ll], pay[kk]])
    vals = np.concatenate([types[kk].ravel(), -types[kk].ravel(), -np.ones(len(kk)), np.ones(len(kk))])
    ic = sparse.csr_matrix((vals, (r, c)), shape=(len(kk), nvar))
    # IR: pi_k - a_k . t_k <= 0
    r = np.concatenate([np.repeat(np.arange(k), m), np.arange(k)])
    c = np.concatenate([alloc.ravel(), pay])
    vals = np.concatenate([-types.ravel(), np.ones(k)])
    ir = sparse.csr_matrix((vals, (r, c)), shape=(k, nvar))
    cost = np.zeros(nvar)
    cost[pay] = -1.0 / k
    bounds = [(0.0, 1.0)] * (k * m) + [(0.0, None)] * k
    res = linprog(cost, A_ub=sparse.vstack([ic, ir]).tocsr(), b_ub=np.zeros(len(kk) + k),
                  bounds=bounds, method="highs")
    if not res.success:
        raise RuntimeError(f"optimal-mechanism LP failed: {res.message}")
    z = res.x[:k * m].reshape(tuple(points) + (m,))
    p = res.x[k * m:].reshape(tuple(points))
    return axes, z, p, float(-res.fun)
