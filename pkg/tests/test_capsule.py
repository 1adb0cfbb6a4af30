import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xcaps import ndtensor as nt
from xcaps.capsule import (RoutingConfig, dynamic_routing, fc_caps_layer, CapsuleTensor,
                           primary_caps_layer, routing_sigmoid, routing_softmax, squash)
from xcaps.gradcheck import numeric_grad, rel_err
from xcaps.ndtensor import Tensor


def naive_routing(u_hat, mode, iterations):
    """Pure-python reference: lists and math only."""
    n_child, n_par, dim = len(u_hat), len(u_hat[0]), len(u_hat[0][0])
    b = [[1.0 if mode == "sigmoid" else 0.0] * n_par for _ in range(n_child)]
    v = None
    for _ in range(iterations):
        r = [[0.0] * n_par for _ in range(n_child)]
        for i in range(n_child):
            if mode == "sigmoid":
                for j in range(n_par):
                    r[i][j] = math.exp(b[i][j]) / (math.exp(b[i][j]) + 1.0)
            else:
                top = max(b[i])
                e = [math.exp(x - top) for x in b[i]]
                for j in range(n_par):
                    r[i][j] = e[j] / sum(e)
        v = []
        for j in range(n_par):
            s = [sum(r[i][j] * u_hat[i][j][d] for i in range(n_child)) for d in range(dim)]
            n2 = sum(x * x for x in s)
            n = math.sqrt(n2)
            v.append([0.0 if n == 0 else n2 / (1 + n2) * x / n for x in s])
        for i in range(n_child):
            for j in range(n_par):
                b[i][j] += sum(u_hat[i][j][d] * v[j][d] for d in range(dim))
    return v


class TestSquash:
    def test_zero(self):
        np.testing.assert_array_equal(squash(Tensor(np.zeros(4))).data, np.zeros(4))

    def test_unit(self):
        np.testing.assert_allclose(squash(Tensor([1.0, 0.0, 0.0])).data, [0.5, 0.0, 0.0], atol=1e-15)

    def test_large(self):
        v = squash(Tensor([100.0, 0.0])).data
        assert abs(np.linalg.norm(v) - 10000 / 10001) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_monotone_bounded(self, a, b):
        lo, hi = sorted((a, b))
        d = np.array([0.6, -0.8])
        na = np.linalg.norm(squash(Tensor(lo * d)).data)
        nb = np.linalg.norm(squash(Tensor(hi * d)).data)
        assert na < 1 and nb < 1
        if hi > lo * (1 + 1e-9):
            assert na < nb

    def test_parallel(self):
        s = np.array([0.3, -2.0, 1.1])
        v = squash(Tensor(s)).data
        assert abs(np.dot(v, s) - np.linalg.norm(v) * np.linalg.norm(s)) < 1e-12

    def test_zero_gradient_finite(self):
        t = Tensor(np.zeros(3), requires_grad=True)
        nt.tsum(squash(t)).backward()
        assert np.all(np.isfinite(t.grad))


class TestRoutingFunctions:
    def test_sigmoid_zero(self):
        assert routing_sigmoid(np.zeros((1, 1)))[0, 0] == 0.5

    def test_sigmoid_prior(self):
        assert abs(routing_sigmoid(np.ones((1, 1)))[0, 0] - math.e / (math.e + 1)) < 1e-15
        assert abs(math.e / (math.e + 1) - 0.731059) < 1e-6

    def test_sigmoid_locality(self):
        rng = np.random.default_rng(0)
        b = rng.standard_normal((4, 3))
        r0 = routing_sigmoid(b)
        b2 = b.copy()
        b2[1, 2] += 5.0
        r1 = routing_sigmoid(b2)
        changed = r0 != r1
        assert changed[1, 2] and changed.sum() == 1

    def test_softmax_uniform(self):
        np.testing.assert_allclose(routing_softmax(np.zeros((2, 3))), np.full((2, 3), 1 / 3), atol=1e-15)

    def test_softmax_peaked(self):
        r = routing_softmax(np.array([[10.0, 0.0, 0.0]]))[0]
        denom = math.exp(10) + 2
        np.testing.assert_allclose(r, [math.exp(10) / denom, 1 / denom, 1 / denom], rtol=1e-12)
        assert abs(r[0] - 0.99991) < 1e-5 and abs(r[1] - 4.5e-5) < 1e-6

    def test_softmax_rows(self):
        r = routing_softmax(np.random.default_rng(1).standard_normal((50, 7)) * 5)
        np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-12)

    def test_config_priors(self):
        assert RoutingConfig("sigmoid").prior_init == 1.0
        assert RoutingConfig("softmax").prior_init == 0.0
        with pytest.raises(ValueError):
            RoutingConfig("sigmoid", 3, 0.0)
        with pytest.raises(ValueError):
            RoutingConfig("sigmoid", 0)


class TestDynamicRouting:
    def test_single_step(self):
        u = np.array([[[0.3, -0.4]]])
        v = dynamic_routing(Tensor(u), RoutingConfig("sigmoid", 1)).data
        r = math.e / (math.e + 1)
        s = r * u[0, 0]
        n2 = float(s @ s)
        np.testing.assert_allclose(v[0], n2 / (1 + n2) * s / math.sqrt(n2), atol=1e-15)

    def test_identical_children(self):
        one = np.array([[0.2, 0.1, -0.3], [0.5, 0.0, 0.2]])
        u = np.repeat(one[None], 4, axis=0)
        v, hist = dynamic_routing(Tensor(u), RoutingConfig("sigmoid", 3), return_coefficients=True)
        for r in hist:
            # coefficients identical across children within each parent
            np.testing.assert_allclose(r, np.broadcast_to(r[0], r.shape), atol=1e-15)
        for j in range(2):
            c = 4 * hist[-1][0, j]
            np.testing.assert_allclose(v.data[j], squash(Tensor(c * one[j])).data, atol=1e-14)

    @pytest.mark.parametrize("mode", ["sigmoid", "softmax"])
    def test_brute_force_3x2(self, mode):
        rng = np.random.default_rng(42)
        u = rng.standard_normal((3, 2, 4))
        v = dynamic_routing(Tensor(u), RoutingConfig(mode, 2)).data
        np.testing.assert_allclose(v, naive_routing(u.tolist(), mode, 2), atol=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4),
           st.sampled_from(["sigmoid", "softmax"]), st.integers(0, 2 ** 32 - 1))
    def test_brute_force_property(self, n_child, n_par, dim, iters, mode, seed):
        u = np.random.default_rng(seed).standard_normal((n_child, n_par, dim))
        v = dynamic_routing(Tensor(u), RoutingConfig(mode, iters)).data
        np.testing.assert_allclose(v, naive_routing(u.tolist(), mode, iters), atol=1e-10)
        assert np.all(np.linalg.norm(v, axis=-1) < 1)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(3)
        u = rng.standard_normal((5, 4, 3, 2))
        v = dynamic_routing(Tensor(u), RoutingConfig()).data
        for b in range(5):
            np.testing.assert_allclose(v[b], dynamic_routing(Tensor(u[b]), RoutingConfig()).data, atol=1e-14)

    @pytest.mark.parametrize("mode", ["sigmoid", "softmax"])
    def test_agreement_amplification(self, mode):
        d = np.array([1.0, 0.5, -0.2])
        u = np.zeros((2, 2, 3))
        u[0, 0], u[1, 0] = d, -d          # parent 0: children disagree
        u[0, 1], u[1, 1] = d, d           # parent 1: children agree
        _, hist = dynamic_routing(Tensor(u), RoutingConfig(mode, 3), return_coefficients=True)
        r = hist[-1]
        assert np.all(r[:, 1] > r[:, 0])

    def test_initial_coefficients(self):
        u = np.random.default_rng(0).standard_normal((4, 3, 2))
        _, hist = dynamic_routing(Tensor(u), RoutingConfig("sigmoid", 3), return_coefficients=True)
        np.testing.assert_allclose(hist[0], math.e / (math.e + 1), atol=1e-12)

    def test_gradient_only_through_predictions(self):
        rng = np.random.default_rng(8)
        u = rng.standard_normal((3, 2, 4))
        t = Tensor(u, requires_grad=True)
        v, hist = dynamic_routing(t, RoutingConfig("sigmoid", 3), return_coefficients=True)
        nt.tsum(v).backward()
        frozen = hist[-1]
        num = numeric_grad(lambda: float(dynamic_routing(Tensor(u), RoutingConfig("sigmoid", 3),
                                                         fixed_coefficients=frozen).data.sum()), u)
        assert rel_err(t.grad, num) < 1e-7

    def test_zero_iterations(self):
        with pytest.raises(ValueError):
            dynamic_routing(Tensor(np.ones((1, 1, 2))),
                            SimpleNamespace(mode="sigmoid", iterations=0, prior_init=1.0))


class TestLayers:
    def test_primary_shapes(self):
        feats = Tensor(np.random.default_rng(0).uniform(0, 1, (256, 24, 24)))
        k = Tensor(np.random.default_rng(1).standard_normal((256, 256, 9, 9)) * 0.01)
        caps = primary_caps_layer(feats, k, None, 32, 8, 2)
        assert caps.data.shape == (32, 8, 8, 8)
        assert caps.grid == (8, 8)
        assert np.all(caps.norms() < 1)

    def test_primary_zero(self):
        caps = primary_caps_layer(Tensor(np.zeros((4, 6, 6))), Tensor(np.ones((8, 4, 3, 3))),
                                  Tensor(np.zeros(8)), 2, 4, 2)
        np.testing.assert_array_equal(caps.data.data, 0.0)

    def test_primary_channel_mismatch(self):
        with pytest.raises(ValueError):
            primary_caps_layer(Tensor(np.zeros((4, 6, 6))), Tensor(np.ones((7, 4, 3, 3))), None, 2, 4, 2)

    def test_fc_caps_full_size(self):
        rng = np.random.default_rng(0)
        children = CapsuleTensor(Tensor(rng.uniform(-0.1, 0.1, (32, 8, 8, 8))), 32, (8, 8), 8)
        W = Tensor(rng.uniform(-0.02, 0.02, (2048, 6, 16, 8)))
        out = fc_caps_layer(children, W, RoutingConfig())
        assert out.data.shape == (6, 16) and out.types == 6 and out.dim == 16

    def test_fc_caps_identity(self):
        u = np.array([0.3, -0.2, 0.4])
        children = CapsuleTensor(Tensor(u.reshape(1, 1, 3)), 1, (1,), 3)
        W = Tensor(np.eye(3).reshape(1, 1, 3, 3))
        out = fc_caps_layer(children, W, RoutingConfig("sigmoid", 1)).data.data
        np.testing.assert_allclose(out[0], squash(Tensor(math.e / (math.e + 1) * u)).data, atol=1e-15)

    def test_fc_caps_gradient(self):
        rng = np.random.default_rng(5)
        u = rng.uniform(-0.5, 0.5, (3, 2, 2, 4))
        w = rng.standard_normal((12, 2, 3, 4))
        cfg = RoutingConfig("sigmoid", 3)
        tw = Tensor(w, requires_grad=True)
        out = fc_caps_layer(CapsuleTensor(Tensor(u), 3, (2, 2), 4), tw, cfg)
        nt.tsum(out.data).backward()
        frozen = out.coefficients

        def f():
            return float(fc_caps_layer(CapsuleTensor(Tensor(u), 3, (2, 2), 4), Tensor(w), cfg,
                                       frozen).data.data.sum())

        assert rel_err(tw.grad, numeric_grad(f, w)) < 1e-4

    def test_fc_caps_mismatch(self):
        children = CapsuleTensor(Tensor(np.zeros((2, 1, 1, 3))), 2, (1, 1), 3)
        with pytest.raises(ValueError):
            fc_caps_layer(children, Tensor(np.zeros((3, 1, 2, 3))), RoutingConfig())
