import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from auctionnet import diffcore as dc
from auctionnet.architectures import build_network
from auctionnet.auction import ConstantMechanism, profile_utilities
from auctionnet.losses import (
    DualState, LagrangianState, MetricsRecord, budget_schedule_step, dual_update, inner_loss,
    lagrangian_multiplier_update, outer_loss_budget, outer_loss_lagrangian, schedule_multiplier,
)


@pytest.fixture
def small_net():
    return build_network("regretformer", 2, 2, hyper={"blocks": 1, "heads": 2, "hidden": 8}, seed=3)


class TestInnerLoss:
    def test_truth_gives_negated_utility(self, small_net, rng):
        v = rng.random((2, 2))
        out = small_net.forward(dc.Tensor(v[None]))
        u = profile_utilities(out, v[None]).data[0, 1]
        assert_allclose(inner_loss(1, v, v[1], small_net).data, -u, rtol=0, atol=1e-15)

    def test_constant_mechanism_flat(self, rng):
        mech = ConstantMechanism(np.array([[0.3, 0.6], [0.2, 0.1], [0.5, 0.3]]), np.array([0.1, 0.2]))
        v = rng.random((2, 2))
        x = dc.Tensor(rng.random(2), requires_grad=True)
        with dc.Tape():
            loss = inner_loss(0, v, x, mech)
        # no path from the misreport to the loss
        assert not loss.requires_grad
        assert dc.finite_difference_check(lambda y: inner_loss(0, v, y, mech), x, 1e-6) == 0.0
        other = inner_loss(0, v, rng.random(2), mech)
        assert float(loss.data) == float(other.data)

    def test_gradient_matches_fd(self, small_net, rng):
        v = rng.random((2, 2))
        err = dc.finite_difference_check(lambda x: inner_loss(0, v, x, small_net),
                                         dc.Tensor(rng.random(2)), 1e-6)
        assert err <= 1e-4


class TestOuterLosses:
    def test_zero_regret_is_negated_revenue(self):
        state = LagrangianState(lambdas=[3.0, 2.0], rho=5.0)
        assert float(outer_loss_lagrangian([0.2, 0.3], [0.0, 0.0], state).data) == -0.5

    def test_linear_penalty_example(self):
        loss = outer_loss_lagrangian([0.0, 0.0], [0.1, 0.1], LagrangianState([1.0, 1.0], rho=0.0))
        assert_allclose(loss.data, 0.2)

    def test_quadratic_penalty_example(self):
        loss = outer_loss_lagrangian([0.0], [0.1], LagrangianState([0.0], rho=2.0))
        assert_allclose(loss.data, 0.01)

    def test_budget_gamma_zero(self):
        assert float(outer_loss_budget([0.4, 0.1], [0.3, 0.3], DualState(gamma=0.0)).data) == -0.5

    def test_budget_example(self):
        assert_allclose(outer_loss_budget([1.0], [0.01], DualState(gamma=1.0)).data, -0.99)

    @given(st.lists(st.floats(0, 2), min_size=1, max_size=4).flatmap(
        lambda p: st.tuples(st.just(p), st.lists(st.floats(0, 1), min_size=len(p), max_size=len(p)))),
        st.floats(0, 20))
    def test_budget_equals_lagrangian_with_gamma_weights(self, pr, gamma):
        p, r = pr
        a = outer_loss_budget(p, r, DualState(gamma=gamma)).data
        b = outer_loss_lagrangian(p, r, LagrangianState(np.full(len(p), gamma), rho=0.0)).data
        assert float(a) == float(b)

    @given(st.floats(0.01, 5), st.integers(0, 2), st.floats(1e-3, 1))
    def test_budget_monotone(self, gamma, i, d):
        p, r = np.array([0.3, 0.2, 0.1]), np.array([0.01, 0.02, 0.03])
        base = float(outer_loss_budget(p, r, DualState(gamma=gamma)).data)
        r2, p2 = r.copy(), p.copy()
        r2[i] += d
        p2[i] += d
        assert float(outer_loss_budget(p, r2, DualState(gamma=gamma)).data) > base
        assert float(outer_loss_budget(p2, r, DualState(gamma=gamma)).data) < base

    def test_parameter_gradient_is_linear_combination(self, small_net, rng):
        v = rng.random((16, 2, 2))
        gamma = 2.5
        params = small_net.tensors(requires_grad=True)
        leaves = list(params.values())

        def terms():
            out = small_net.forward(dc.Tensor(v), params)
            pay = dc.mean(out.payment, axis=0)
            # any differentiable per-bidder regret proxy works for the linearity check
            reg = dc.mean(dc.sum(out.allocation[:, :2, :] * out.allocation[:, :2, :], axis=-1), axis=0)
            return pay, reg

        with dc.Tape():
            pay, reg = terms()
            g_full = dc.backward(outer_loss_budget(pay, reg, DualState(gamma=gamma)), wrt=leaves)
        with dc.Tape():
            pay, _ = terms()
            g_p = dc.backward(dc.sum(pay), wrt=leaves)
        with dc.Tape():
            _, reg = terms()
            g_r = dc.backward(dc.sum(reg), wrt=leaves)
        for t in leaves:
            assert_allclose(g_full[t], -g_p[t] + gamma * g_r[t], rtol=1e-10, atol=1e-13)

    def test_outer_loss_fd(self, rng):
        state = LagrangianState([0.5, 1.5], rho=3.0)
        r = rng.random(2) * 0.1
        err = dc.finite_difference_check(
            lambda p: outer_loss_lagrangian(p, dc.Tensor(r), state), dc.Tensor(rng.random(2)), 1e-6)
        assert err <= 1e-4
        err = dc.finite_difference_check(
            lambda x: outer_loss_budget(dc.Tensor(r), x, DualState(gamma=1.7)), dc.Tensor(rng.random(2)), 1e-6)
        assert err <= 1e-4


class TestMultiplierUpdate:
    def test_lambda_step(self):
        s = lagrangian_multiplier_update(LagrangianState([1.0], rho=2.0), [0.5])
        assert_allclose(s.lambdas, [2.0])

    def test_rho_step(self):
        s = lagrangian_multiplier_update(LagrangianState([1.0], rho=1.0, rho_lr=0.25), [0.0])
        assert s.rho == 1.25

    def test_zero_regret_keeps_lambda(self):
        s = lagrangian_multiplier_update(LagrangianState([1.0, 4.0], rho=3.0), [0.0, 0.0])
        assert_array_equal(s.lambdas, [1.0, 4.0])

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LagrangianState([-1.0])


class TestDualUpdate:
    def test_fixed_point(self):
        s = DualState(gamma=1.3, r_max=0.004)
        assert dual_update(s, 0.002, 0.5).gamma == 1.3

    def test_worked_example(self):
        s = dual_update(DualState(gamma=1.0, gamma_lr=0.5, r_max=0.001, r_max_end=0.001), 0.01, 1.0)
        assert abs(s.gamma - (1 + 0.5 * math.log(10))) <= 1e-12

    def test_clipped_at_zero(self):
        s = dual_update(DualState(gamma=0.1, gamma_lr=0.5, r_max=0.01), 1e-9, 1.0)
        assert s.gamma == 0.0

    def test_zero_regret_floor(self):
        s = dual_update(DualState(gamma=5.0), 0.0, 1.0)
        assert math.isfinite(s.gamma) and s.gamma == 0.0

    def test_nonpositive_revenue_skips(self):
        s = DualState(gamma=2.0)
        assert dual_update(s, 0.1, 0.0) == s

    @given(st.floats(0, 10), st.floats(1e-8, 1), st.floats(1e-3, 10))
    def test_gamma_nonnegative(self, gamma, sr, sp):
        assert dual_update(DualState(gamma=gamma), sr, sp).gamma >= 0.0

    def test_gamma_zero_below_budget_stays(self):
        assert dual_update(DualState(gamma=0.0, r_max=0.01), 0.001, 1.0).gamma == 0.0


class TestSchedule:
    def test_step(self):
        s = budget_schedule_step(DualState(r_max=0.01, r_max_mult=0.9, r_max_end=0.001))
        assert_allclose(s.r_max, 0.009)

    def test_floor(self):
        s = budget_schedule_step(DualState(r_max=0.001, r_max_end=0.001))
        assert s.r_max == 0.001

    @pytest.mark.parametrize("steps", [3, 30, 300])
    def test_multiplier_reaches_end_at_two_thirds(self, steps):
        mult = schedule_multiplier(0.01, 0.001, steps)
        assert_allclose(mult, (0.1) ** (1 / (2 * steps / 3)), rtol=1e-14)
        s = DualState(r_max=0.01, r_max_end=0.001, r_max_mult=mult)
        seen = [s.r_max]
        for _ in range(steps):
            s = budget_schedule_step(s)
            seen.append(s.r_max)
        assert (np.diff(seen) <= 0).all()
        assert min(seen) == 0.001
        assert_allclose(seen[int(round(2 * steps / 3))], 0.001, rtol=1e-9)


class TestMetricsRecord:
    def test_ratio(self):
        m = MetricsRecord(np.array([0.3, 0.2]), np.array([0.001, 0.0005]), r_max=0.003)
        assert_allclose(m.ratio, 1.0)
        assert m.revenue == 0.5

    def test_ratio_nan_without_revenue(self):
        assert math.isnan(MetricsRecord(np.zeros(2), np.ones(2), r_max=0.1).ratio)
