"""Evaluation protocols: held-out regret and revenue, budget ratio,
cross-misreports and teacher-student distillation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .data import SettingSpec, sample_profiles, seeded_stream
from .training import Adam, misreport_utilities, optimize_misreports

__all__ = [
    "EvaluationReport", "evaluate_mechanism", "budget_ratio", "CrossReport",
    "cross_misreport_regret", "categorical_kl", "bernoulli_kl", "distillation_loss",
    "DistillConfig", "DistillReport", "distill", "PROB_CLAMP",
]

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class EvaluationReport:
    setting: str
    payments: np.ndarray        # per-bidder mean payment
    regrets: np.ndarray         # per-bidder mean regret estimate
    samples: int
    inner_steps: int
    r_max: float = float("nan")

    @property
    def revenue(self) -> float:
        return float(np.sum(self.payments))

    @property
    def total_regret(self) -> float:
        return float(np.sum(self.regrets))

    @property
    def regret_mean(self) -> float:
        return float(np.mean(self.regrets))

    @property
    def ratio(self) -> float:
        return budget_ratio(self, self.r_max)

    def row(self) -> dict:
        return {"setting": self.setting, "revenue": self.revenue, "regret_mean": self.regret_mean,
                "ratio": self.ratio, "samples": self.samples, "inner_steps": self.inner_steps}


def budget_ratio(report: EvaluationReport, r_max: float) -> float:
    """(sum R / sum P) / r_max; NaN when revenue is not positive or r_max is unset."""
    if not report.revenue > 0 or not np.isfinite(r_max) or r_max <= 0:
        return float("nan")
    return (report.total_regret / report.revenue) / r_max


def _check_shape(net, setting: SettingSpec):
    if hasattr(net, "accepts") and not net.accepts(setting.n, setting.m):
        raise dc.ShapeError(f"{getattr(net, 'variant', 'network')} built for "
                            f"{getattr(net, 'n', '?')}x{getattr(net, 'm', '?')} cannot take {setting.label}")


def _profiles(setting, profiles, count, seed):
    if profiles is None:
        profiles = sample_profiles(setting, count, seeded_stream(seed))
    profiles = np.asarray(profiles)
    if profiles.shape[1:] != (setting.n, setting.m):
        raise dc.ShapeError(f"profiles of shape {profiles.shape[1:]} do not match {setting.label}")
    return profiles


def _regret_at(net, bids, misreports) -> np.ndarray:
    """Per-bidder sum over the chunk of u(misreport) - u(truth) for ``net``.

    Shared by the standard and cross estimators so that cross(w, w) equals the
    standard estimate exactly.
    """
    truth = np.ascontiguousarray(bids.transpose(1, 0, 2))
    params = net.tensors() if hasattr(net, "tensors") else None
    with dc.no_grad():
        u_mis = misreport_utilities(net, bids, misreports.transpose(1, 0, 2), params).data
        u_truth = misreport_utilities(net, bids, truth, params).data
    return (u_mis - u_truth).sum(axis=1)


def evaluate_mechanism(net, setting: SettingSpec, profiles=None, inner_steps: int = 1000, *,
                       lr: float = 0.1, chunk: int = 1024, r_max: float = float("nan"),
                       count: int = 4096, seed: int = 0) -> EvaluationReport:
    """Revenue and per-bidder regret on held-out profiles.

    Works on any setting the network accepts, so it doubles as the
    out-of-setting evaluation path.
    """
    _check_shape(net, setting)
    profiles = _profiles(setting, profiles, count, seed)
    pay_sum = np.zeros(setting.n)
    reg_sum = np.zeros(setting.n)
    for start in range(0, len(profiles), chunk):
        bids = profiles[start:start + chunk]
        res = optimize_misreports(net, bids, inner_steps, lr, support=setting)
        with dc.no_grad():
            pay_sum += net.forward(dc.Tensor(bids)).payment.data.sum(axis=0)
        reg_sum += _regret_at(net, bids, res.misreports)
    total = len(profiles)
    return EvaluationReport(setting.label, pay_sum / total, reg_sum / total, total, inner_steps, r_max)


@dataclass
class CrossReport:
    regrets: np.ndarray         # per-bidder mean regret of the target
    samples: int

    @property
    def regret_mean(self) -> float:
        return float(np.mean(self.regrets))

    @property
    def has_negative(self) -> bool:
        return bool(np.any(self.regrets < 0))


def cross_misreport_regret(target, prober, setting: SettingSpec, profiles=None,
                           inner_steps: int = 1000, *, lr: float = 0.1, chunk: int = 1024,
                           count: int = 4096, seed: int = 0) -> CrossReport:
    """Target's regret at misreports optimised against the prober.

    Values are reported raw; a negative mean is possible when the prober's
    best response is worse than truth for the target.
    """
    _check_shape(target, setting)
    _check_shape(prober, setting)
    profiles = _profiles(setting, profiles, count, seed)
    reg_sum = np.zeros(setting.n)
    for start in range(0, len(profiles), chunk):
        bids = profiles[start:start + chunk]
        res = optimize_misreports(prober, bids, inner_steps, lr, support=setting)
        reg_sum += _regret_at(target, bids, res.misreports)
    report = CrossReport(reg_sum / len(profiles), len(profiles))
    if report.has_negative:
        log.warning("cross-misreport regret is negative for some bidder: %s", report.regrets)
    return report


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------

def categorical_kl(teacher_logits, student_logits, axis: int = -2):
    """Per-column KL(teacher || student) over the n+1 allocation outcomes."""
    t = np.asarray(getattr(teacher_logits, "data", teacher_logits))
    log_p = t - t.max(axis=axis, keepdims=True)
    log_p = log_p - np.log(np.exp(log_p).sum(axis=axis, keepdims=True))
    p = np.exp(log_p)
    log_q = dc.log_softmax(dc.as_tensor(student_logits), axis=axis)
    # 0 * log 0 is taken as 0
    plogp = np.where(p > 0, p * log_p, 0.0)
    return dc.sum(plogp - p * log_q, axis=axis)


def bernoulli_kl(p_teacher, q_student, clamp: float = PROB_CLAMP):
    """Elementwise two-outcome KL with probabilities clamped to [clamp, 1 - clamp]."""
    p = np.clip(np.asarray(getattr(p_teacher, "data", p_teacher)), clamp, 1.0 - clamp)
    q = dc.clip(dc.as_tensor(q_student), clamp, 1.0 - clamp)
    return (p * (np.log(p) - dc.log(q))
            + (1.0 - p) * (np.log(1.0 - p) - dc.log(1.0 - q)))


def _misreport_profiles(bids, misreports):
    # (n*B, n, m): block i is the batch with bidder i's row replaced
    bsz, n, m = bids.shape
    out = np.repeat(bids[None], n, axis=0)
    for i in range(n):
        out[i, :, i, :] = misreports[:, i, :]
    return out.reshape(n * bsz, n, m)


def distillation_loss(teacher, student, profiles, params=None) -> dc.Tensor:
    """Mean over profiles of allocation KL (summed over items) plus payment KL (summed over bidders)."""
    profiles = np.asarray(profiles)
    with dc.no_grad():
        t_out = teacher.forward(dc.Tensor(profiles))
    s_out = student.forward(dc.Tensor(profiles), params)
    alloc = dc.sum(categorical_kl(t_out.logits, s_out.logits), axis=-1)
    pay = dc.sum(bernoulli_kl(t_out.payment_fraction, s_out.payment_fraction), axis=-1)
    return dc.mean(alloc + pay)


@dataclass
class DistillConfig:
    iterations: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    inner_steps: int = 25
    inner_lr: float = 0.1
    eval_size: int = 1024
    eval_steps: int = 1000
    seed: int = 0
    # batches with KL at or below this are already matched; Adam would
    # otherwise rescale round-off gradients into full-size steps
    tol: float = 1e-12


@dataclass
class DistillReport:
    teacher_revenue: float
    student_revenue: float
    # regret of (row) network at misreports of (column) network:
    # {"teacher": {"teacher": .., "student": ..}, "student": {...}}
    regret_table: dict
    losses: list = field(default_factory=list)
    aborted: bool = False
    initial_kl: float = float("nan")


def distill(teacher, student, setting: SettingSpec, config: DistillConfig | None = None):
    """Fit ``student`` (trained in place on a copy) to the frozen ``teacher``.

    Each step matches outputs at the truthful batch and at the student's
    current approximate best misreports.  Returns ``(student, report)``.
    """
    config = config or DistillConfig()
    _check_shape(teacher, setting)
    _check_shape(student, setting)
    student = student.copy()
    rng = seeded_stream(config.seed)
    opt = Adam(lr=config.lr)
    eval_profiles = sample_profiles(setting, config.eval_size, seeded_stream(config.seed + 1))
    with dc.no_grad():
        initial = float(distillation_loss(teacher, student, eval_profiles[:256]).data)
    losses, aborted = [], False
    for step in range(config.iterations):
        bids = sample_profiles(setting, config.batch_size, rng)
        mis = optimize_misreports(student, bids, config.inner_steps, config.inner_lr,
                                  support=setting).misreports
        points = np.concatenate([bids, _misreport_profiles(bids, mis)], axis=0)
        params = student.tensors(requires_grad=True)
        with dc.Tape():
            loss = distillation_loss(teacher, student, points, params)
            grads = dc.backward(loss, wrt=list(params.values()))
        named = {k: grads[t] for k, t in params.items()}
        if not np.isfinite(loss.data) or not all(np.all(np.isfinite(g)) for g in named.values()):
            log.error("distillation diverged at step %d; returning partial report", step)
            aborted = True
            break
        losses.append(float(loss.data))
        if losses[-1] > config.tol:
            opt.step(student.params, named)

    nets = {"teacher": teacher, "student": student}
    revenue = {}
    table: dict = {"teacher": {}, "student": {}}
    for name, net in nets.items():
        rep = evaluate_mechanism(net, setting, eval_profiles, config.eval_steps, lr=config.inner_lr)
        revenue[name] = rep.revenue
        table[name][name] = rep.regret_mean
    for target, prober in (("teacher", "student"), ("student", "teacher")):
        table[target][prober] = cross_misreport_regret(
            nets[target], nets[prober], setting, eval_profiles, config.eval_steps,
            lr=config.inner_lr).regret_mean
    report = DistillReport(revenue["teacher"], revenue["student"], table, losses, aborted, initial)
    return student, report
