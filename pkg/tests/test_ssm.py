"""Tests for discretization, scans and hand-derived scan gradients."""

import numpy as np
import pytest

from spectraverse.errors import (
    InvalidArgumentError,
    PreconditionError,
    SingularMatrixError,
)
from spectraverse.ssm import (
    DiscreteSSM,
    ScanGradients,
    SSMParams,
    SelectiveParams,
    discretize,
    linear_recurrence,
    linear_recurrence_backward,
    scan,
    scan_backward,
    scan_with_states,
    selective_scan,
    selective_scan_explicit,
    softplus,
)


def scan_oracle(a_bar, b_bar, c_bar, xs):
    """Step-by-step loop with explicit state, dense or diagonal."""
    n = b_bar.shape[0]
    h = np.zeros(n)
    ys = []
    for x in xs:
        if a_bar.ndim == 1:
            h = a_bar * h + b_bar * x
        else:
            h = a_bar @ h + b_bar * x
        ys.append(float(c_bar @ h))
    return np.asarray(ys)


class TestDiscretize:
    def test_integrator(self):
        d = discretize(SSMParams(np.zeros(1), np.ones(1), np.ones(1), delta=1.0))
        assert d.A_bar[0] == 1.0
        assert d.B_bar[0] == 1.0

    def test_third_order_halving_against_exp(self):
        a = -1.0
        deltas = [0.2 / 2**i for i in range(5)]
        errors = []
        for dt in deltas:
            d = discretize(SSMParams(np.array([a]), np.ones(1), np.ones(1), delta=dt))
            errors.append(abs(d.A_bar[0] - np.exp(dt * a)))
        ratios = [errors[i] / errors[i + 1] for i in range(len(errors) - 1)]
        for r in ratios:
            assert 6.0 <= r <= 10.0, f"halving ratio {r} outside third-order window"

    def test_singular_step(self):
        with pytest.raises(SingularMatrixError):
            discretize(SSMParams(np.array([2.0]), np.ones(1), np.ones(1), delta=1.0))

    def test_singular_dense(self):
        a = np.diag([2.0, -1.0])
        with pytest.raises(SingularMatrixError):
            discretize(SSMParams(a, np.ones(2), np.ones(2), delta=1.0))

    def test_stability_left_half_plane(self):
        for a in -np.logspace(-3, 3, 25):
            for dt in np.logspace(-3, 2, 20):
                d = discretize(SSMParams(np.array([a]), np.ones(1), np.ones(1), delta=dt))
                assert abs(d.A_bar[0]) < 1.0

    def test_dense_matches_diagonal(self):
        diag = np.array([-0.5, -2.0, 0.3])
        p_diag = SSMParams(diag, np.arange(1.0, 4.0), np.ones(3), delta=0.7)
        p_dense = SSMParams(np.diag(diag), np.arange(1.0, 4.0), np.ones(3), delta=0.7)
        dd, dn = discretize(p_diag), discretize(p_dense)
        np.testing.assert_allclose(np.diag(dn.A_bar), dd.A_bar, atol=1e-14)
        np.testing.assert_allclose(dn.B_bar, dd.B_bar, atol=1e-14)


class TestScan:
    def test_integrator_cumsum(self):
        d = DiscreteSSM(np.ones(1), np.ones(1), np.ones(1))
        np.testing.assert_allclose(scan(d, [1.0, 2.0, 3.0]), [1.0, 3.0, 6.0])

    def test_zero_input(self):
        d = discretize(SSMParams(np.array([-1.0, -2.0]), np.ones(2), np.ones(2), delta=0.3))
        np.testing.assert_array_equal(scan(d, np.zeros(10)), np.zeros(10))

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_naive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        length = int(rng.integers(1, 33))
        a = rng.normal(size=(n, n)) * 0.4
        d = discretize(SSMParams(a, rng.normal(size=n), rng.normal(size=n), delta=0.5))
        xs = rng.normal(size=length)
        np.testing.assert_allclose(
            scan(d, xs), scan_oracle(d.A_bar, d.B_bar, d.C_bar, xs), atol=1e-10
        )

    def test_linearity(self):
        rng = np.random.default_rng(3)
        d = discretize(
            SSMParams(rng.normal(size=(3, 3)) * 0.3, rng.normal(size=3), rng.normal(size=3), 0.4)
        )
        x = rng.normal(size=20)
        z = rng.normal(size=20)
        combined = scan(d, 2.0 * x - 0.5 * z)
        np.testing.assert_allclose(combined, 2.0 * scan(d, x) - 0.5 * scan(d, z), atol=1e-10)

    def test_feedthrough(self):
        d = DiscreteSSM(np.zeros(1), np.zeros(1), np.ones(1), D_bar=2.0)
        np.testing.assert_allclose(scan(d, [1.0, -1.0]), [2.0, -2.0])

    def test_empty_rejected(self):
        d = DiscreteSSM(np.ones(1), np.ones(1), np.ones(1))
        with pytest.raises(InvalidArgumentError):
            scan(d, [])


class TestSelectiveScan:
    def test_constant_projections_reduce_to_scan(self):
        rng = np.random.default_rng(1)
        n = 3
        a = -np.abs(rng.normal(size=n))
        b = rng.normal(size=n)
        c = rng.normal(size=n)
        dt = 0.37
        # invert softplus so the constant projection emits exactly dt
        b_delta = float(np.log(np.expm1(dt)))
        sel = SelectiveParams(0.0, b_delta, np.zeros(n), b, np.zeros(n), c)
        xs = rng.normal(size=24)
        expected = scan(discretize(SSMParams(a, b, c, dt)), xs)
        np.testing.assert_allclose(selective_scan(sel, a, xs), expected, atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_explicit_steps_match_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n, length = 3, 16
        a = rng.normal(size=(n, n)) * 0.3
        deltas = rng.uniform(0.05, 0.8, size=length)
        bs = rng.normal(size=(length, n))
        cs = rng.normal(size=(length, n))
        xs = rng.normal(size=length)
        got = selective_scan_explicit(a, deltas, bs, cs, xs)
        h = np.zeros(n)
        expected = np.empty(length)
        for k in range(length):
            m = np.eye(n) - 0.5 * deltas[k] * a
            a_bar = np.linalg.solve(m, np.eye(n) + 0.5 * deltas[k] * a)
            b_bar = np.linalg.solve(m, deltas[k] * bs[k])
            h = a_bar @ h + b_bar * xs[k]
            expected[k] = cs[k] @ h
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_vanishing_delta_limit(self):
        n = 2
        a = np.array([-1.0, -0.5])
        xs = np.random.default_rng(2).normal(size=10)
        for dt in (1e-4, 1e-6, 1e-8):
            ys = selective_scan_explicit(
                a, np.full(10, dt), np.ones((10, n)), np.ones((10, n)), xs
            )
            assert np.max(np.abs(ys)) < 10 * dt * np.max(np.abs(np.cumsum(xs)))

    def test_positive_delta_enforced(self):
        with pytest.raises(InvalidArgumentError):
            selective_scan_explicit(
                np.array([-1.0]), np.array([0.0]), np.ones((1, 1)), np.ones((1, 1)), [1.0]
            )


class TestScanBackward:
    def test_integrator_gradient_is_one(self):
        d = DiscreteSSM(np.ones(1), np.ones(1), np.ones(1))
        xs = np.array([1.0, 2.0, 3.0, 4.0])
        ys, states = scan_with_states(d, xs)
        dys = np.zeros(4)
        dys[-1] = 1.0  # loss = y_L
        grads = scan_backward(d, xs, dys, states)
        np.testing.assert_allclose(grads.inputs, np.ones(4))

    def test_zero_gradient(self):
        rng = np.random.default_rng(4)
        d = discretize(SSMParams(rng.normal(size=(2, 2)) * 0.3, rng.normal(size=2), rng.normal(size=2), 0.5))
        xs = rng.normal(size=8)
        _, states = scan_with_states(d, xs)
        grads = scan_backward(d, xs, np.zeros(8), states)
        assert np.all(grads.a_bar == 0) and np.all(grads.b_bar == 0)
        assert np.all(grads.c_bar == 0) and np.all(grads.inputs == 0)

    def test_missing_cache(self):
        d = DiscreteSSM(np.ones(1), np.ones(1), np.ones(1))
        with pytest.raises(PreconditionError):
            scan_backward(d, [1.0], [1.0], None)

    @pytest.mark.parametrize("diagonal", [True, False])
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_finite_differences(self, diagonal, seed):
        rng = np.random.default_rng(seed)
        n, length = 3, 12
        a_bar = (
            rng.uniform(-0.9, 0.9, size=n)
            if diagonal
            else rng.normal(size=(n, n)) * 0.3
        )
        b_bar = rng.normal(size=n)
        c_bar = rng.normal(size=n)
        xs = rng.normal(size=length)
        w = rng.normal(size=length)  # loss = w . y

        def loss(ab, bb, cb, x):
            d = DiscreteSSM(ab, bb, cb)
            return float(w @ scan(d, x))

        d = DiscreteSSM(a_bar, b_bar, c_bar)
        _, states = scan_with_states(d, xs)
        grads = scan_backward(d, xs, w, states)

        eps = 1e-5
        for arr, got in (
            (a_bar, grads.a_bar),
            (b_bar, grads.b_bar),
            (c_bar, grads.c_bar),
            (xs, grads.inputs),
        ):
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                ix = it.multi_index
                orig = arr[ix]
                arr[ix] = orig + eps
                up = loss(a_bar, b_bar, c_bar, xs)
                arr[ix] = orig - eps
                down = loss(a_bar, b_bar, c_bar, xs)
                arr[ix] = orig
                fd = (up - down) / (2 * eps)
                denom = max(abs(fd), abs(got[ix]), 1e-8)
                assert abs(fd - got[ix]) / denom < 1e-4
                it.iternext()


class TestLinearRecurrence:
    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(-0.9, 0.9, size=(20, 4, 3))
        u = rng.normal(size=(20, 4, 3))
        out = linear_recurrence(a, u)
        h = np.zeros((4, 3))
        for k in range(20):
            h = a[k] * h + u[k]
            np.testing.assert_allclose(out[k], h, atol=1e-14)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(-0.9, 0.9, size=(6, 2, 2))
        u = rng.normal(size=(6, 2, 2))
        w = rng.normal(size=(6, 2, 2))  # loss = sum(w * states)
        states = linear_recurrence(a, u)
        d_a, d_u = linear_recurrence_backward(a, states, w)
        eps = 1e-6
        for arr, got in ((a, d_a), (u, d_u)):
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                ix = it.multi_index
                orig = arr[ix]
                arr[ix] = orig + eps
                up = float(np.sum(w * linear_recurrence(a, u)))
                arr[ix] = orig - eps
                down = float(np.sum(w * linear_recurrence(a, u)))
                arr[ix] = orig
                fd = (up - down) / (2 * eps)
                denom = max(abs(fd), abs(got[ix]), 1e-8)
                assert abs(fd - got[ix]) / denom < 1e-4
                it.iternext()


def test_softplus_positive():
    xs = np.linspace(-30, 30, 101)
    assert np.all(softplus(xs) > 0)
    np.testing.assert_allclose(softplus(np.array([20.0])), [20.0], atol=1e-8)
