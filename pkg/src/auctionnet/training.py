"""Inner misreport optimisation and the outer training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .architectures import MechanismNetwork
from .auction import profile_utilities
from .data import DataSource, MultiSettingSpec, SettingSpec, make_batch, sample_profiles, substream
from .losses import (DualState, LagrangianState, MetricsRecord, budget_schedule_step, dual_update,
                     lagrangian_multiplier_update, outer_loss_budget, outer_loss_lagrangian,
                     schedule_multiplier)

__all__ = [
    "TrainConfig", "Adam", "MisreportResult", "optimize_misreports", "misreport_utilities",
    "make_batch", "train_step", "TrainState", "TrainResult", "HistoryRow", "train", "init_state",
]

log = logging.getLogger(__name__)

OBJECTIVES = ("budget", "lagrangian")
PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass
class TrainConfig:
    outer_iterations: int = 5000
    batch_size: int = 128
    lr_outer: float = 1e-3
    lr_inner: float = 0.1
    inner_steps_train: int = 50
    inner_steps_valid: int = 1000
    dataset_size: int = 640_000
    seed: int = 0
    precision: str = "float64"
    objective: str = "budget"
    # budget objective
    gamma: float = 1.0
    gamma_lr: float = 0.5
    r_max_start: float = 1e-2
    r_max_end: float = 1e-3
    schedule_interval: int = 1250
    # lagrangian objective
    lambda_init: float = 5.0
    rho: float = 1.0
    rho_lr: float = 1.0
    update_period: int = 100
    # validation and bookkeeping
    val_every: int = 500
    val_size: int = 4096
    val_chunk: int = 1024
    resample: bool = False
    warm_start: bool = False
    record_wall: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        positive = ("outer_iterations", "batch_size", "lr_outer", "lr_inner", "dataset_size",
                    "val_size", "val_chunk", "schedule_interval", "update_period", "gamma_lr",
                    "r_max_start", "r_max_end")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.inner_steps_train < 0 or self.inner_steps_valid < self.inner_steps_train:
            raise ValueError("need 0 <= inner_steps_train <= inner_steps_valid")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        if self.r_max_end > self.r_max_start:
            raise ValueError("r_max_end must not exceed r_max_start")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def _adam_update(x, g, m, v, t, lr, b1, b2, eps):
    # in place on x, m, v
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * g * g
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    x -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class Adam:
    """Adam over a dict of named arrays, updated in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for name, g in grads.items():
            x = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(x)
                self.v[name] = np.zeros_like(x)
            _adam_update(x, g.astype(x.dtype, copy=False), self.m[name], self.v[name],
                         self.t, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# inner loop
# ---------------------------------------------------------------------------

@dataclass
class MisreportResult:
    misreports: np.ndarray   # (B, n, m): row i is bidder i's best misreport
    regrets: np.ndarray      # (B, n), best utility gain, >= 0
    truthful: np.ndarray     # (B, n) utilities at truth (stacked evaluation)
    best: np.ndarray         # (B, n) utilities at the returned misreports


def misreport_utilities(net, bids: np.ndarray, reports, params=None) -> dc.Tensor:
    """Utilities u_i(v_i; (v'_i, v_-i)) for all bidders, shape (n, B).

    ``reports`` is (n, B, m) with block i holding bidder i's report; every
    bidder is evaluated on its own copy of the batch with only row i replaced.
    """
    bsz, n, m = bids.shape
    eye = np.eye(n, dtype=bids.dtype)
    reports = dc.as_tensor(reports)
    others = bids[None] * (1.0 - eye)[:, None, :, None]                 # (n, B, n, m)
    profiles = others + dc.reshape(reports, (n, bsz, 1, m)) * eye[:, None, :, None]
    out = net.forward(dc.reshape(profiles, (n * bsz, n, m)), params)
    z = dc.reshape(out.allocation, (n, bsz, n + 1, m))[:, :, :n, :]
    value = dc.sum(dc.sum(z * (bids[None] * eye[:, None, :, None]), axis=-1), axis=-1)
    pay = dc.sum(dc.reshape(out.payment, (n, bsz, n)) * eye[:, None, :], axis=-1)
    return value - pay


def optimize_misreports(net, bids, steps: int, lr: float = 0.1, support=None,
                        init: np.ndarray | None = None) -> MisreportResult:
    """Adam ascent on every bidder's misreport, keeping the best iterate.

    Misreports start at the truthful report (or at ``init`` when warm
    starting) and are clamped to the support after each step.  ``support``
    is a ``SettingSpec`` or a ``(lo, hi)`` pair, default [0, 1].  Network
    parameters are read, never written.  Regrets are >= 0 since the truthful
    report is always a candidate.
    """
    bids = np.asarray(getattr(bids, "data", bids))
    if bids.ndim == 2:
        bids = bids[None]
    bsz, n, m = bids.shape
    if isinstance(support, SettingSpec):
        lo, hi = (b.astype(bids.dtype) for b in support.bounds())
    elif support is None:
        lo, hi = bids.dtype.type(0.0), bids.dtype.type(1.0)
    else:
        lo, hi = (np.asarray(s, dtype=bids.dtype) for s in support)
    params = net.tensors() if hasattr(net, "tensors") else None

    def evaluate(x, grad):
        if not grad:
            with dc.no_grad():
                return misreport_utilities(net, bids, x, params).data, None
        with dc.Tape():
            xt = dc.Tensor(x, requires_grad=True)
            u = misreport_utilities(net, bids, xt, params)
            if not u.requires_grad:
                # mechanism without a gradient path (analytic baselines): flat surface
                return u.data, np.zeros_like(x)
            g = dc.backward(-dc.sum(u), wrt=[xt])[xt]
        return u.data, g

    truth = np.ascontiguousarray(bids.transpose(1, 0, 2))              # (n, B, m)
    u_truth = None
    if init is None:
        x = truth.copy()
    else:
        x = np.clip(np.asarray(init, dtype=bids.dtype).transpose(1, 0, 2), lo, hi)
        u_truth = evaluate(truth, False)[0]
    mom1, mom2 = np.zeros_like(x), np.zeros_like(x)
    best_x = truth.copy()
    best_u = alive = None
    for k in range(steps + 1):
        u, g = evaluate(x, k < steps)
        finite = np.isfinite(u)
        if u_truth is None:
            u_truth = u
        if best_u is None:
            alive = np.isfinite(u_truth)
            best_u = np.where(alive, u_truth, 0.0)
            if not alive.all():
                log.warning("non-finite truthful utility in %d misreport block(s); aborting them",
                            int((~alive).sum()))
        if not finite.all() and (alive & ~finite).any():
            log.warning("non-finite inner loss in %d misreport block(s); aborting them",
                        int((alive & ~finite).sum()))
        alive &= finite
        better = alive & (u > best_u)
        best_u = np.where(better, u, best_u)
        best_x[better] = x[better]
        if g is None:
            break
        g = np.where(alive[..., None], g, 0.0)
        _adam_update(x, g, mom1, mom2, k + 1, lr, 0.9, 0.999, 1e-8)
        np.clip(x, lo, hi, out=x)
    u_truth = np.where(np.isfinite(u_truth), u_truth, 0.0)
    return MisreportResult(misreports=best_x.transpose(1, 0, 2), regrets=(best_u - u_truth).T,
                           truthful=u_truth.T, best=best_u.T)


# ---------------------------------------------------------------------------
# outer step
# ---------------------------------------------------------------------------

def _outer_terms(net, bids, misreports, params):
    # differentiable P_i (n,) and rgt_i (n,) for the current batch
    out = net.forward(dc.Tensor(bids), params)
    payments = dc.mean(out.payment, axis=0)
    u_truth = dc.mean(profile_utilities(out, bids), axis=0)
    u_mis = dc.mean(misreport_utilities(net, bids, misreports.transpose(1, 0, 2), params), axis=1)
    return payments, u_mis - u_truth


def train_step(net: MechanismNetwork, batch, state, opt: Adam, config: TrainConfig,
               step_index: int = 0, init: np.ndarray | None = None):
    """One inner loop, one outer Adam step and one multiplier update.

    Returns ``(metrics, new_state, misreports)``; ``state`` is a
    ``DualState`` or ``LagrangianState`` matching ``config.objective``.
    """
    bids = np.asarray(batch.bids, dtype=config.dtype)
    res = optimize_misreports(net, bids, config.inner_steps_train, config.lr_inner,
                              support=batch.setting, init=init)
    params = net.tensors(requires_grad=True)
    with dc.Tape():
        payments, regrets = _outer_terms(net, bids, res.misreports, params)
        if config.objective == "budget":
            loss = outer_loss_budget(payments, regrets, state)
        else:
            loss = outer_loss_lagrangian(payments, regrets, state)
        grads = dc.backward(loss, wrt=list(params.values()))
    named = {k: grads[t] for k, t in params.items()}
    if all(np.all(np.isfinite(g)) for g in named.values()) and np.isfinite(loss.data):
        opt.step(net.params, named)
    else:
        log.warning("non-finite gradient at step %d; update skipped", step_index)
    r_max = state.r_max if isinstance(state, DualState) else float("nan")
    metrics = MetricsRecord(payments=payments.data.astype(np.float64),
                            regrets=res.regrets.mean(axis=0).astype(np.float64), r_max=r_max)
    if isinstance(state, DualState):
        state = dual_update(state, float(np.sum(metrics.regrets)), float(np.sum(metrics.payments)))
    elif step_index > 0 and step_index % state.update_period == 0:
        state = lagrangian_multiplier_update(state, metrics.regrets)
    return metrics, state, res.misreports


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class HistoryRow:
    iteration: int
    revenue: float
    regret_mean: float
    ratio: float
    gamma: float
    lambda_mean: float
    rho: float
    r_max: float
    wall_ms: float

    FIELDS = ("iteration", "revenue", "regret_mean", "ratio", "gamma", "lambda_mean", "rho",
              "r_max", "wall_ms")

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, f) for f in self.FIELDS)


@dataclass
class TrainState:
    """Everything needed to resume a run bit-exactly."""

    net: MechanismNetwork
    opt: Adam
    objective_state: object
    iteration: int = 0
    data_state: dict | None = None
    history: list = field(default_factory=list)
    train_log: list = field(default_factory=list)   # (revenue, sum regret, r_max) per step
    misreports: np.ndarray | None = None


@dataclass
class TrainResult:
    net: MechanismNetwork
    history: list
    train_log: list
    state: TrainState
    final_report: object = None

    def train_ratio(self, window: int = 500) -> float:
        """(sum R / sum P) / r_max over the last ``window`` steps."""
        rows = self.train_log[-window:]
        if not rows:
            return float("nan")
        p = sum(r[0] for r in rows)
        if p <= 0:
            return float("nan")
        return sum(r[1] for r in rows) / p / rows[-1][2]


def init_state(net: MechanismNetwork, config: TrainConfig) -> TrainState:
    if config.objective == "budget":
        mult = schedule_multiplier(config.r_max_start, config.r_max_end,
                                   max(1, config.outer_iterations // config.schedule_interval))
        obj = DualState(gamma=config.gamma, gamma_lr=config.gamma_lr, r_max=config.r_max_start,
                        r_max_end=config.r_max_end, r_max_mult=min(mult, 0.999999))
    else:
        obj = LagrangianState(lambdas=np.full(net.n, config.lambda_init), rho=config.rho,
                              rho_lr=config.rho_lr, update_period=config.update_period)
    return TrainState(net=net, opt=Adam(lr=config.lr_outer), objective_state=obj)


def _validation_sets(setting, config: TrainConfig):
    rng = substream(config.seed, 2)
    specs = setting.settings if isinstance(setting, MultiSettingSpec) else (setting,)
    per = max(1, config.val_size // len(specs))
    return [(s, sample_profiles(s, per, rng, dtype=config.dtype)) for s in specs]


def _history_row(it, reports, obj, wall_ms) -> HistoryRow:
    revenue = float(np.mean([r.revenue for r in reports]))
    regret = float(np.mean([r.regret_mean for r in reports]))
    if isinstance(obj, DualState):
        ratios = [r.total_regret / r.revenue / obj.r_max if r.revenue > 0 else float("nan")
                  for r in reports]
        return HistoryRow(it, revenue, regret, float(np.mean(ratios)), obj.gamma, float("nan"),
                          float("nan"), obj.r_max, wall_ms)
    return HistoryRow(it, revenue, regret, float("nan"), float("nan"),
                      float(np.mean(obj.lambdas)), obj.rho, float("nan"), wall_ms)


def train(config: TrainConfig, setting, architecture, *, resume: TrainState | None = None,
          checkpoint_fn=None, stop_after: int | None = None) -> TrainResult:
    """Run the outer loop with periodic validation and optional checkpoints.

    ``architecture`` is a ``MechanismNetwork`` (trained in place on a copy).
    ``checkpoint_fn(state)`` is called every ``config.checkpoint_every``
    iterations; ``stop_after`` ends the run early (used to test resume).
    """
    from .validation import evaluate_mechanism

    if isinstance(setting, MultiSettingSpec):
        for s in setting.settings:
            if not architecture.accepts(s.n, s.m):
                raise dc.ShapeError(f"{architecture.variant} cannot take setting {s.label}")
    elif not architecture.accepts(setting.n, setting.m):
        raise dc.ShapeError(f"{architecture.variant} cannot take setting {setting.label}")

    if resume is None:
        state = init_state(architecture.astype(config.dtype), config)
    else:
        state = resume
    net = state.net
    source = DataSource(setting, config.batch_size, config.seed, config.dataset_size,
                        resample=config.resample)
    if state.data_state is not None:
        source.load_state(state.data_state)
    val_sets = _validation_sets(setting, config)
    end = config.outer_iterations if stop_after is None else min(stop_after, config.outer_iterations)
    t0 = time.perf_counter()
    last_state = state

    def validate(it):
        reports = [evaluate_mechanism(net, s, prof, config.inner_steps_valid, lr=config.lr_inner,
                                      chunk=config.val_chunk) for s, prof in val_sets]
        wall = (time.perf_counter() - t0) * 1e3 if config.record_wall else float("nan")
        row = _history_row(it, reports, state.objective_state, wall)
        state.history.append(row)
        log.info("iter %d revenue %.4f regret %.2e ratio %.3f", it, row.revenue, row.regret_mean,
                 row.ratio)
        return reports

    reports = None
    try:
        while state.iteration < end:
            it = state.iteration + 1
            batch = source.next_batch()
            init = state.misreports if (config.warm_start and state.misreports is not None
                                        and state.misreports.shape == batch.bids.shape) else None
            metrics, obj, mis = train_step(net, batch, state.objective_state, state.opt, config,
                                           step_index=it, init=init)
            state.objective_state = obj
            state.misreports = mis if config.warm_start else None
            state.train_log.append((metrics.revenue, float(np.sum(metrics.regrets)), metrics.r_max))
            if isinstance(obj, DualState) and it % config.schedule_interval == 0:
                state.objective_state = budget_schedule_step(obj)
            state.iteration = it
            state.data_state = source.state()
            if config.val_every and (it % config.val_every == 0 or it == config.outer_iterations):
                reports = validate(it)
            if checkpoint_fn is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
                checkpoint_fn(state)
                last_state = state
    except (FloatingPointError, dc.NonFiniteError):
        log.error("unrecoverable numeric failure at iteration %d", state.iteration)
        if checkpoint_fn is not None and last_state is not None:
            checkpoint_fn(last_state)
        raise
    final = None
    if reports is not None and state.iteration == config.outer_iterations:
        final = reports[0] if len(reports) == 1 else reports
    return TrainResult(net=net, history=state.history, train_log=state.train_log, state=state,
                       final_report=final)
