import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from auctionnet import diffcore as dc
from auctionnet.architectures import (
    FixedShapeError, build_network, compute_payments, default_hyper,
)
from auctionnet.auction import profile_utilities

SMALL = {
    "regretnet": {"layers": 3, "hidden": 16},
    "equivariantnet": {"layers": 3, "hidden": 8},
    "regretformer": {"blocks": 1, "heads": 2, "hidden": 8},
}


def net_for(variant, n, m, seed=0, **kw):
    return build_network(variant, n, m, hyper=SMALL[variant], seed=seed, **kw)


def outputs(net, bids):
    with dc.no_grad():
        out = net.forward(bids)
    return out.allocation.data, out.payment_fraction.data, out.payment.data, out.logits.data


class TestParameterCounts:
    # reported counts for the 1x2, 2x2, 2x3, 2x5, 3x10 settings
    @pytest.mark.parametrize("variant, expected", [
        ("regretnet", [21305, 22008, 22711, 84717, 91343]),
        ("equivariantnet", [4546, 4546, 12802, 16930, 16930]),
        ("regretformer", [12705, 49985, 49985, 362753, 362753]),
    ])
    def test_counts(self, variant, expected):
        shapes = [(1, 2), (2, 2), (2, 3), (2, 5), (3, 10)]
        counts = [build_network(variant, n, m).num_params for n, m in shapes]
        assert counts == expected

    def test_desk_profile_halves_width(self):
        assert default_hyper("regretformer", "2x2", desk=True)["hidden"] == 32
        assert default_hyper("regretnet", "1x2", desk=True)["hidden"] == 50


@pytest.mark.parametrize("variant", sorted(SMALL))
class TestOutputContract:
    def test_columns_sum_to_one(self, variant, rng):
        net = net_for(variant, 2, 3)
        z, frac, pay, _ = outputs(net, rng.random((64, 2, 3)))
        assert z.shape == (64, 3, 3)
        assert_allclose(z.sum(axis=1), 1.0, atol=1e-12)
        assert (z >= 0).all() and (z <= 1).all()

    def test_fraction_range_and_ir(self, variant, rng):
        net = net_for(variant, 3, 2)
        bids = rng.random((128, 3, 2))
        z, frac, pay, _ = outputs(net, bids)
        assert ((frac >= 0) & (frac <= 1)).all()
        assert (pay >= 0).all()
        assert (pay <= (z[:, :3] * bids).sum(-1) + 1e-12).all()
        with dc.no_grad():
            u = profile_utilities(net.forward(bids), bids).data
        assert u.min() >= -1e-9

    def test_single_profile_input(self, variant, rng):
        net = net_for(variant, 2, 2)
        z, *_ = outputs(net, rng.random((2, 2)))
        assert z.shape == (1, 3, 2)

    def test_parameter_gradients(self, variant, rng):
        net = net_for(variant, 2, 2)
        bids = rng.random((3, 2, 2))
        w = rng.normal(size=(3, 2))
        name = sorted(net.params)[1]

        def f(t):
            params = dict(net.tensors())
            params[name] = t
            out = net.forward(bids, params)
            return dc.sum(out.payment * w) + dc.sum(out.allocation * 0.3)

        assert dc.finite_difference_check(f, net.params[name]) <= 1e-4

    def test_bid_gradients(self, variant, rng):
        net = net_for(variant, 2, 2)
        w = rng.normal(size=(2, 2))
        f = lambda t: dc.sum(net.forward(t).payment * w)
        assert dc.finite_difference_check(f, rng.random((2, 2, 2))) <= 1e-4


def permuted_outputs(net, bids, rows, cols):
    z, frac, pay, _ = outputs(net, bids)
    zp, fracp, payp, _ = outputs(net, bids[:, rows][:, :, cols])
    n = bids.shape[1]
    expected_z = np.concatenate([z[:, :n][:, rows], z[:, n:]], axis=1)[:, :, cols]
    return np.abs(zp - expected_z).max(), np.abs(payp - pay[:, rows]).max()


class TestEquivariance:
    @pytest.mark.parametrize("variant", ["equivariantnet", "regretformer"])
    def test_equivariant_variants(self, variant, rng):
        net = net_for(variant, 3, 4, seed=3)
        bids = rng.random((16, 3, 4))
        dz, dp = permuted_outputs(net, bids, rng.permutation(3), rng.permutation(4))
        assert dz <= 1e-10 and dp <= 1e-10

    def test_regretnet_is_not(self, rng):
        net = net_for("regretnet", 3, 4, seed=3)
        bids = rng.random((16, 3, 4))
        dz, dp = permuted_outputs(net, bids, np.array([1, 0, 2]), np.array([1, 0, 2, 3]))
        assert max(dz, dp) > 1e-6

    @pytest.mark.parametrize("mode", ["features", "input"])
    def test_pe_breaks_item_equivariance(self, mode, rng):
        net = net_for("regretformer", 2, 3, seed=1, use_pe=True, pe_mode=mode)
        bids = rng.random((8, 2, 3))
        dz, dp = permuted_outputs(net, bids, np.arange(2), np.array([2, 0, 1]))
        assert max(dz, dp) > 1e-6


class TestShapes:
    def test_regretnet_fixed_shape(self, rng):
        net = net_for("regretnet", 2, 3)
        assert net.accepts(2, 3) and not net.accepts(2, 4)
        with pytest.raises(FixedShapeError):
            net.forward(rng.random((4, 2, 4)))

    @pytest.mark.parametrize("variant", ["equivariantnet", "regretformer"])
    def test_any_shape(self, variant, rng):
        net = net_for(variant, 2, 2)
        for n, m in [(1, 1), (3, 5), (5, 2)]:
            z, frac, pay, _ = outputs(net, rng.random((4, n, m)))
            assert z.shape == (4, n + 1, m) and pay.shape == (4, n)

    def test_padded_regretnet(self, rng):
        net = net_for("regretnet", 3, 7, padded=True)
        assert net.accepts(2, 3) and not net.accepts(4, 3)
        bids = rng.random((5, 2, 3))
        z, frac, pay, _ = outputs(net, bids)
        assert z.shape == (5, 3, 3) and pay.shape == (5, 2)
        assert_allclose(z.sum(axis=1), 1.0, atol=1e-12)

    def test_padded_participants_get_no_mass(self, rng):
        # the frame's unused participant never receives an item, so all mass
        # sits on the real rows plus the dummy row
        net = net_for("regretnet", 3, 7, padded=True)
        z, _, pay, logits = outputs(net, rng.random((5, 2, 3)))
        assert logits.shape == (5, 3, 3)
        assert_allclose(z.sum(axis=1), 1.0, atol=1e-12)


class TestRegretFormerDetails:
    def test_dummy_logit_is_negated_sum(self, rng):
        net = net_for("regretformer", 3, 2)
        *_, logits = outputs(net, rng.random((4, 3, 2)))
        assert_allclose(logits[:, 3], -logits[:, :3].sum(axis=1), atol=1e-12)

    def test_equivariantnet_dummy_logit_zero(self, rng):
        *_, logits = outputs(net_for("equivariantnet", 2, 2), rng.random((4, 2, 2)))
        assert_array_equal(logits[:, 2], 0.0)


class TestComputePayments:
    def test_arithmetic(self):
        p = compute_payments(np.array([[1.0, 0.0]]), np.array([0.5]), np.array([[0.8, 0.3]]))
        assert_allclose(p.data, [0.4])

    def test_zero_fraction(self, rng):
        p = compute_payments(rng.random((3, 2)), np.zeros(2), rng.random((2, 2)))
        assert_array_equal(p.data, 0.0)

    def test_uniform_allocation_with_dummy(self, rng):
        n, m = 2, 3
        bids = rng.random((n, m))
        z = np.full((n + 1, m), 1 / (n + 1))
        p = compute_payments(z, np.ones(n), bids)
        assert_allclose(p.data, bids.sum(axis=1) / (n + 1))


def test_copy_is_independent():
    net = net_for("regretformer", 1, 2)
    other = net.copy()
    other.params["embed.w1"] += 1.0
    assert net.param_bytes() != other.param_bytes()


def test_unknown_variant():
    with pytest.raises(ValueError):
        build_network("perceptron", 1, 2)
