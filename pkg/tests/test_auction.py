import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from auctionnet.architectures import build_network
from auctionnet.auction import (
    BaselineMechanism, BundleTableError, ConstantMechanism, GridTooLargeError, IrwinHall,
    MechanismOutcome, discrete_optimal_mechanism, exact_regret_oracle, monte_carlo_revenue,
    myerson_bundled_run, myerson_itemwise_run, revenue, utility, vcg_run,
)
from auctionnet.data import SettingSpec, parse_setting


class TestUtilityRevenue:
    def test_utility_examples(self):
        v = np.array([[0.8, 0.3]])
        assert math.isclose(utility(0, v, MechanismOutcome(np.array([[1.0, 0.0]]), np.array([0.4]))), 0.4)
        assert utility(0, v, MechanismOutcome(np.zeros((1, 2)), np.zeros(1))) == 0.0
        full = MechanismOutcome(np.ones((1, 2)), np.array([1.1]))
        assert math.isclose(utility(0, v, full), 0.0, abs_tol=1e-15)

    def test_revenue(self):
        assert math.isclose(revenue(MechanismOutcome(np.zeros((2, 1)), np.array([0.2, 0.3]))), 0.5)
        assert revenue(MechanismOutcome(np.zeros((2, 1)), np.zeros(2))) == 0.0
        assert revenue(MechanismOutcome(np.zeros((1, 1)), np.array([0.7]))) == 0.7


class TestVCG:
    def test_second_price(self):
        out = vcg_run(np.array([[0.7], [0.4]]))
        assert_array_equal(out.allocation, [[1.0], [0.0]])
        assert_allclose(out.payments, [0.4, 0.0])

    def test_single_bidder_pays_nothing(self, rng):
        out = vcg_run(rng.random((100, 1, 3)))
        assert_array_equal(out.payments, 0.0)
        assert_array_equal(out.allocation, 1.0)

    def test_ties_go_to_lowest_index(self):
        out = vcg_run(np.array([[0.5], [0.5]]))
        assert_array_equal(out.allocation, [[1.0], [0.0]])
        assert_allclose(out.payments, [0.5, 0.0])

    def test_order_statistic_revenue(self):
        # E[2nd highest of n uniforms] = (n-1)/(n+1), per item
        mean, se = monte_carlo_revenue("vcg", parse_setting("2x3"), 200_000, np.random.default_rng(0))
        assert abs(mean - 1.0) <= 4 * se


class TestMyersonItemwise:
    def test_below_reserve_unallocated(self):
        out = myerson_itemwise_run(np.array([[0.4], [0.3]]))
        assert_array_equal(out.allocation, 0.0)
        assert_array_equal(out.payments, 0.0)

    def test_reserve_binds(self):
        out = myerson_itemwise_run(np.array([[0.9], [0.3]]))
        assert_allclose(out.payments, [0.5, 0.0])

    def test_second_price_above_reserve(self):
        out = myerson_itemwise_run(np.array([[0.9, 0.1], [0.6, 0.7]]))
        assert_allclose(out.payments, [0.6, 0.5])

    def test_asymmetric_reserve(self):
        # U[4,16]: virtual value 2t - 16 so reserve 8; U[4,7]: reserve max(4, 3.5) = 4
        out = myerson_itemwise_run(np.array([[7.9, 4.2]]), lo=(4.0, 4.0), hi=(16.0, 7.0))
        assert_allclose(out.allocation, [[0.0, 1.0]])
        assert_allclose(out.payments, [4.0])

    def test_revenue_1x2(self):
        mean, se = monte_carlo_revenue("myerson-itemwise", parse_setting("1x2"), 200_000,
                                       np.random.default_rng(1))
        assert abs(mean - 0.5) <= 4 * se


class TestIrwinHall:
    @pytest.mark.parametrize("m", [1, 2, 3, 5])
    def test_cdf_matches_closed_form_sum(self, m):
        table = IrwinHall(m)
        t = np.linspace(0, m, 37)
        exact = sum((-1) ** k * math.comb(m, k) * np.maximum(t - k, 0) ** m for k in range(m + 1))
        assert_allclose(table.F(t), exact / math.factorial(m), atol=2e-6)

    def test_density_integrates_to_one(self):
        table = IrwinHall(4)
        t = np.linspace(0, 4, 4001)
        assert_allclose(np.trapezoid(table.f(t), t), 1.0, atol=1e-6)

    def test_reserve_two_items(self):
        # maximise r (1 - r^2 / 2) on [0, 1]: r* = sqrt(2/3)
        assert_allclose(IrwinHall(2).reserve, math.sqrt(2 / 3), atol=1e-4)

    def test_ironed_virtual_value_monotone(self):
        phi = IrwinHall(6).virtual_value(np.linspace(0, 6, 500))
        assert (np.diff(phi) >= 0).all()

    def test_out_of_range_value(self):
        with pytest.raises(BundleTableError):
            IrwinHall(2).virtual_value(np.array([2.5]))


class TestMyersonBundled:
    def test_posted_price_single_bidder(self):
        r = math.sqrt(2 / 3)
        out = myerson_bundled_run(np.array([[0.5, 0.4], [0.3, 0.2]])[None][:, :1])
        assert_allclose(out.allocation, [[[1.0, 1.0]]])
        assert_allclose(out.payments, [[r]], atol=1e-4)
        below = myerson_bundled_run(np.array([[[0.4, 0.4]]]))
        assert_array_equal(below.payments, 0.0)

    def test_rule_application(self):
        table = IrwinHall(2)
        out = myerson_bundled_run(np.array([[1.0, 0.9], [0.05, 0.05]]))
        phi_hi, phi_lo = table.virtual_value(np.array([1.9, 0.1]))
        assert (phi_hi > max(phi_lo, 0)) == bool(out.allocation[0].all())
        assert_array_equal(out.allocation[1], 0.0)

    def test_ir_exact(self, rng):
        v = rng.random((2000, 2, 3))
        out = myerson_bundled_run(v)
        u = (out.allocation * v).sum(-1) - out.payments
        assert u.min() >= 0.0


class TestBaselineProperties:
    @pytest.mark.parametrize("name", ["vcg", "myerson-itemwise", "myerson-bundled"])
    def test_ir(self, name, rng):
        v = rng.random((2000, 3, 2))
        out = BaselineMechanism(name).outcome(v)
        assert ((out.allocation * v).sum(-1) - out.payments).min() >= 0.0

    @pytest.mark.parametrize("name", ["vcg", "myerson-itemwise", "myerson-bundled"])
    def test_monotone_allocation(self, name, rng):
        v = rng.random((500, 2, 2))
        mech = BaselineMechanism(name)
        raised = v.copy()
        raised[:, 0, :] = np.minimum(1.0, raised[:, 0, :] + rng.random((500, 2)) * 0.3)
        a = mech.outcome(v).allocation[:, 0].sum(-1)
        b = mech.outcome(raised).allocation[:, 0].sum(-1)
        assert (b >= a).all()

    @pytest.mark.parametrize("name", ["vcg", "myerson-itemwise", "myerson-bundled"])
    def test_oracle_regret_small(self, name, rng):
        grid = 21
        mech = BaselineMechanism(name)
        for v in rng.random((5, 2, 2)):
            assert exact_regret_oracle(mech, v, 0, grid) <= 2.0 / (grid - 1)


class TestOracle:
    def test_truth_only_grid(self, rng):
        net = build_network("regretformer", 1, 2, hyper={"blocks": 1, "heads": 2, "hidden": 8})
        assert exact_regret_oracle(net, rng.random((1, 2)), 0, 1) == 0.0

    def test_constant_mechanism(self, rng):
        mech = ConstantMechanism(np.array([[0.5, 0.2], [0.3, 0.1]]), np.array([0.1, 0.05]))
        assert exact_regret_oracle(mech, rng.random((2, 2)), 1, 15) == 0.0

    def test_nonnegative(self, rng):
        net = build_network("equivariantnet", 2, 2, hyper={"layers": 2, "hidden": 4})
        for v in rng.random((5, 2, 2)):
            assert exact_regret_oracle(net, v, 1, 11) >= 0.0

    def test_grid_guard(self, rng):
        net = build_network("equivariantnet", 1, 4, hyper={"layers": 2, "hidden": 4})
        with pytest.raises(GridTooLargeError):
            exact_regret_oracle(net, rng.random((1, 4)), 0, 51)


class TestDiscreteOptimum:
    def test_single_item_posted_price(self):
        # 40 midpoint types on [0, 1]: best posted price is the 21st type, 0.5125,
        # accepted by half the mass
        _, z, p, rev = discrete_optimal_mechanism((0.0,), (1.0,), 40)
        assert_allclose(rev, 0.5125 * 0.5, atol=1e-7)
        assert_array_equal(np.round(z[:, 0]), (np.arange(40) >= 20).astype(float))

    def test_ir_and_ic(self):
        axes, z, p, _ = discrete_optimal_mechanism((0.0, 0.0), (1.0, 1.0), 6)
        types = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 2)
        zz, pp = z.reshape(-1, 2), p.reshape(-1)
        u = types @ zz.T - pp[None, :]          # u[k, l]: type k reports l
        assert (np.diag(u) >= -1e-7).all()
        assert (np.diag(u)[:, None] >= u - 1e-7).all()
