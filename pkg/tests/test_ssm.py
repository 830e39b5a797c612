import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcmamba import tensor as T
from pcmamba.ssm import (SsmParams, modulated_scan, scan_discretized, selective_params, selective_scan,
                         zoh_discretize)
from pcmamba.verify import grad_check, naive_scan, zoh_reference


def make_ssm(channels=2, state=4, seed=0, jitter=0.3):
    ssm = SsmParams(channels, state, seed=seed)
    r = np.random.default_rng(seed + 100)
    for p in ssm.parameters():
        p.data = (p.data + jitter * r.standard_normal(p.shape)).astype(p.dtype)
    return ssm


def weights(ssm):
    return {k: p.data.astype(np.float64).tolist() for k, p in ssm.named_parameters()}


class TestZoh:
    def test_tiny_step(self):
        a, b = zoh_discretize(np.array([-1.0, -2.0, -8.0]), np.array([1.0, 2.0, -3.0]), 1e-12)
        assert np.abs(a - 1).max() <= 1e-9
        assert np.abs(b).max() <= 1e-9

    def test_closed_form(self, f64):
        a, b = zoh_discretize(np.array([-1.0]), np.array([1.0]), math.log(2))
        assert a[0] == pytest.approx(0.5, abs=1e-15)
        assert b[0] == pytest.approx(0.5, abs=1e-15)

    def test_taylor_branch(self, f64):
        _, b = zoh_discretize(np.array([-1e-9]), np.array([1.0]), 1.0)
        assert abs(b[0] - zoh_reference(-1e-9, 1.0, 1.0)[1]) <= 1e-6

    def test_zero_a(self, f64):
        a, b = zoh_discretize(np.array([0.0]), np.array([2.0]), 0.5)
        assert a[0] == 1.0 and b[0] == pytest.approx(1.0)

    @pytest.mark.parametrize("dA", [0.99e-4, 1e-4, 1.01e-4, 3e-3])
    def test_cutoff_against_high_precision(self, f64, dA):
        for a in (-0.5, -2.0):
            ab, bb = zoh_discretize(np.array([a]), np.array([1.0]), dA / -a)
            ra, rb = zoh_reference(a, 1.0, dA / -a)
            assert abs(ab[0] - ra) / ra <= 1e-6 and abs(bb[0] - rb) / rb <= 1e-6

    @pytest.mark.parametrize("delta", [0.0, -1.0])
    def test_non_positive_step(self, delta):
        with pytest.raises(ValueError):
            zoh_discretize(np.array([-1.0]), np.array([1.0]), delta)

    @given(st.floats(1e-6, 10), st.floats(0.01, 20))
    def test_contraction(self, delta, neg_a):
        a, _ = zoh_discretize(np.array([-neg_a]), np.array([1.0]), delta)
        assert 0 <= a[0] <= 1


class TestParams:
    def test_a_negative_at_init(self):
        ssm = SsmParams(3, 5)
        np.testing.assert_allclose(ssm.A.data, -np.arange(1, 6), rtol=1e-6)

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            SsmParams(3, 0)

    def test_zero_delta_weights(self, f64):
        ssm = SsmParams(3, 4)
        ssm.delta_proj.weight.data[:] = 0
        ssm.delta_proj.bias.data[:] = 0
        step = selective_params(np.array([0.3, -1.0, 2.0]), ssm)
        assert step.delta == pytest.approx(math.log(2))

    def test_zero_token(self, f64):
        step = selective_params(np.zeros(3), SsmParams(3, 4))
        assert not step.b_bar.any() and not step.c.any()

    def test_identical_tokens(self):
        ssm = make_ssm(3)
        a = selective_params(np.array([0.1, 0.2, 0.3]), ssm)
        b = selective_params(np.array([0.1, 0.2, 0.3]), ssm)
        for x, y in zip((a.a_bar, a.b_bar, a.c), (b.a_bar, b.b_bar, b.c)):
            assert x.tobytes() == y.tobytes()
        assert a.delta > 0


class TestScan:
    def test_single_step(self, f64, rng):
        ssm = make_ssm()
        u = rng.standard_normal((1, 2))
        step = selective_params(u[0], ssm)
        y, x = selective_scan(u, ssm)
        want = [step.c @ (step.b_bar * u[0, c]) + ssm.d.data[c] * u[0, c] for c in range(2)]
        np.testing.assert_allclose(y.data[0], want, rtol=1e-12)
        assert x.shape == (1, 2, 4)

    def test_memoryless(self, f64, rng):
        L, C, N = 6, 2, 3
        u = rng.standard_normal((1, L, C))
        b = rng.standard_normal((1, L, N))
        c = rng.standard_normal((1, L, N))
        d = rng.standard_normal(C)
        y = scan_discretized(u, np.zeros((1, L, N)), b, c, d).data
        want = np.einsum("bln,bln->bl", c, b)[..., None] * u + d * u
        np.testing.assert_allclose(y, want, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_plain_oracle(self, f64, seed):
        ssm = make_ssm(seed=seed)
        u = np.random.default_rng(seed).standard_normal((8, 2))
        y, _ = selective_scan(u, ssm)
        ref = np.array(naive_scan(u.tolist(), weights(ssm)))
        assert np.abs(y.data - ref).max() / np.abs(ref).max() <= 1e-5

    @pytest.mark.parametrize("seed", range(4))
    def test_modulated_oracle(self, f64, seed):
        ssm = make_ssm(seed=seed)
        r = np.random.default_rng(seed)
        u, z = r.standard_normal((8, 2)), r.standard_normal((8, 2))
        y = modulated_scan(u, z, ssm)
        ref = np.array(naive_scan(u.tolist(), weights(ssm), z.tolist()))
        assert np.abs(y.data - ref).max() / np.abs(ref).max() <= 1e-5

    def test_z_one_is_plain(self, rng):
        ssm = make_ssm()
        u = rng.standard_normal((2, 9, 2)).astype(np.float32)
        assert modulated_scan(u, np.ones_like(u), ssm).data.tobytes() == selective_scan(u, ssm)[0].data.tobytes()

    def test_z_zero_is_skip(self, rng):
        ssm = make_ssm()
        u = rng.standard_normal((9, 2)).astype(np.float32)
        y = modulated_scan(u, np.zeros_like(u), ssm).data
        np.testing.assert_array_equal(y, ssm.d.data * u)

    def test_modulation_locality(self, f64, rng):
        ssm = make_ssm()
        u, z = rng.standard_normal((10, 2)), rng.standard_normal((10, 2))
        y0 = modulated_scan(u, z, ssm).data
        z2 = z.copy()
        z2[4, 1] += 1.0
        changed = np.nonzero(np.abs(modulated_scan(u, z2, ssm).data - y0).max(axis=1) > 0)[0]
        assert changed.tolist() == [4]

    def test_batch_matches_single(self, f64, rng):
        ssm = make_ssm()
        u = rng.standard_normal((3, 7, 2))
        yb = selective_scan(u, ssm)[0].data
        for i in range(3):
            np.testing.assert_allclose(yb[i], selective_scan(u[i], ssm)[0].data, rtol=1e-13)

    def test_shape_errors(self, rng):
        ssm = make_ssm()
        with pytest.raises(ValueError):
            modulated_scan(rng.standard_normal((5, 2)), rng.standard_normal((4, 2)), ssm)
        with pytest.raises(ValueError):
            selective_scan(rng.standard_normal((5, 3)), ssm)

    @given(st.integers(1, 30), st.integers(0, 10_000))
    def test_state_bound(self, L, seed):
        ssm = make_ssm(seed=seed % 7)
        u = np.random.default_rng(seed).standard_normal((L, 2))
        with T.precision("float64"):
            ub = T.Tensor(u[None])
            delta, b, c = ssm.project(ub)
            _, b_bar = zoh_discretize(ssm.A, b, delta)
            _, xs = selective_scan(u, ssm)
        bu = np.abs(b_bar.data[0][:, None, :] * u[:, :, None])  # (L, C, N)
        assert (np.abs(xs) <= np.cumsum(bu, axis=0) + 1e-9).all()

    def test_gradients(self, f64, rng):
        ssm = make_ssm()
        u = T.Tensor(rng.standard_normal((6, 2)), requires_grad=True)
        z = T.Tensor(rng.standard_normal((6, 2)), requires_grad=True)
        r = rng.standard_normal((6, 2))
        params = {"u": u, "z": z, **dict(ssm.named_parameters())}
        rep = grad_check(lambda: T.tsum(modulated_scan(u, z, ssm) * r), params, tol=1e-6)
        assert rep.passed, rep.measurements
