"""Tests for the shared differentiable layers.

Numeric expectations come from independent oracles: straight-line numpy
reimplementations, closed-form constants, Monte Carlo estimates, and a
trapezoid quadrature for the gaussian density normalization.
"""

import math

import numpy as np
import pytest

from npl import autodiff as ad
from npl import layers
from npl.autodiff import ParamStore
from npl.layers import (
    AttentionKind,
    GaussianBelief,
    MlpSpec,
    attend,
    attend_batch,
    gaussian_head,
    gaussian_log_likelihood,
    init_attention,
    init_gaussian_head,
    init_lstm,
    init_mlp,
    kl_diag_gaussian,
    lstm_step,
    lstm_zero_state,
    mlp_forward,
    reparameterize,
    self_attend,
)

DOT = AttentionKind("dot-product")
LAPLACE = AttentionKind("laplace")


def make_belief(mean, var):
    return GaussianBelief(ad.constant(np.asarray(mean, dtype=float)),
                          ad.constant(np.asarray(var, dtype=float)))


class TestMlp:
    def test_matches_straight_line_numpy(self):
        rng = np.random.default_rng(30)
        store = ParamStore()
        spec = MlpSpec((8, 8, 3))
        init_mlp(store, "net", 5, spec, rng)
        x = rng.normal(size=(4, 5))
        out = mlp_forward(store, "net", ad.constant(x), spec).value

        h = x
        for i, last in [(0, False), (1, False), (2, True)]:
            h = h @ store.get(f"net.l{i}.w") + store.get(f"net.l{i}.b")
            if not last:
                h = np.maximum(h, 0.0)
        np.testing.assert_allclose(out, h, rtol=1e-13)

    def test_zero_input_gives_bias_of_last_layer(self):
        rng = np.random.default_rng(31)
        store = ParamStore()
        spec = MlpSpec((6, 2))
        init_mlp(store, "net", 3, spec, rng)
        store.get("net.l0.b")[...] = 0.0  # silence the hidden layer
        out = mlp_forward(store, "net", ad.constant(np.zeros((1, 3))), spec).value
        np.testing.assert_allclose(out[0], store.get("net.l1.b"), atol=1e-15)

    def test_gradients_pass_finite_differences(self):
        rng = np.random.default_rng(32)
        store = ParamStore()
        spec = MlpSpec((7, 7, 2))
        init_mlp(store, "net", 4, spec, rng)
        x = rng.normal(size=(5, 4))

        def f(s):
            out = mlp_forward(s, "net", ad.constant(x), spec)
            return ad.mean_reduce(ad.square(out))

        assert ad.finite_difference_check(f, store, eps=1e-5) < 1e-4

    def test_bad_widths_rejected(self):
        with pytest.raises(ValueError):
            MlpSpec((4, 0, 2))


class TestLstm:
    def test_zero_weights_zero_input_keeps_state_at_zero(self):
        store = ParamStore()
        store.add("cell.wx", np.zeros((3, 16)))
        store.add("cell.wh", np.zeros((4, 16)))
        store.add("cell.b", np.zeros(16))
        state = lstm_zero_state(4)
        out = lstm_step(store, "cell", ad.constant(np.zeros(3)), state)
        np.testing.assert_array_equal(out.h.value, np.zeros(4))
        np.testing.assert_array_equal(out.c.value, np.zeros(4))

    def test_saturated_forget_gate_carries_cell_state(self):
        # Large forget bias and zero input contribution: c' = c exactly up
        # to the sigmoid saturation gap.
        store = ParamStore()
        store.add("cell.wx", np.zeros((2, 8)))
        store.add("cell.wh", np.zeros((2, 8)))
        bias = np.zeros(8)
        bias[2:4] = 50.0  # forget gate wide open
        store.add("cell.b", bias)
        c0 = np.array([0.7, -1.3])
        state = layers.LstmState(ad.constant(np.zeros(2)), ad.constant(c0))
        out = lstm_step(store, "cell", ad.constant(np.ones(2)), state)
        np.testing.assert_allclose(out.c.value, c0, rtol=1e-12)

    def test_forget_bias_initialized_to_one(self):
        rng = np.random.default_rng(33)
        store = ParamStore()
        init_lstm(store, "cell", 3, 5, rng)
        b = store.get("cell.b")
        np.testing.assert_array_equal(b[5:10], np.ones(5))
        np.testing.assert_array_equal(b[:5], np.zeros(5))
        np.testing.assert_array_equal(b[10:], np.zeros(10))

    def test_matches_straight_line_numpy(self):
        rng = np.random.default_rng(34)
        store = ParamStore()
        init_lstm(store, "cell", 3, 4, rng)
        x = rng.normal(size=(2, 3))
        h0 = rng.normal(size=(2, 4))
        c0 = rng.normal(size=(2, 4))
        out = lstm_step(store, "cell", ad.constant(x),
                        layers.LstmState(ad.constant(h0), ad.constant(c0)))

        def sigmoid(v):
            return 1.0 / (1.0 + np.exp(-v))

        pre = x @ store.get("cell.wx") + h0 @ store.get("cell.wh") + store.get("cell.b")
        i, f, g, o = pre[:, :4], pre[:, 4:8], pre[:, 8:12], pre[:, 12:]
        c = sigmoid(f) * c0 + sigmoid(i) * np.tanh(g)
        h = sigmoid(o) * np.tanh(c)
        np.testing.assert_allclose(out.c.value, c, rtol=1e-12)
        np.testing.assert_allclose(out.h.value, h, rtol=1e-12)

    def test_gradients_through_two_steps_pass_finite_differences(self):
        rng = np.random.default_rng(35)
        store = ParamStore()
        init_lstm(store, "cell", 2, 3, rng)
        xs = rng.normal(size=(2, 2))

        def f(s):
            state = lstm_zero_state(3)
            for i in range(2):
                state = lstm_step(s, "cell", ad.constant(xs[i]), state)
            return ad.sum_reduce(ad.square(state.h))

        assert ad.finite_difference_check(f, store, eps=1e-5) < 1e-4


class TestAttend:
    def test_single_pair_returns_the_value(self):
        keys = ad.constant(np.array([[0.3, -1.2]]))
        values = ad.constant(np.array([[5.0, 2.0, -1.0]]))
        query = ad.constant(np.array([2.0, 0.1]))
        read, weights = attend(None, "", keys, values, query, DOT)
        np.testing.assert_array_equal(weights.value, [1.0])
        np.testing.assert_array_equal(read.value, [5.0, 2.0, -1.0])

    def test_dot_product_two_key_example(self):
        # keys e1, e2; query e1: scores (1/sqrt(2), 0) -> softmax weights.
        keys = ad.constant(np.array([[1.0, 0.0], [0.0, 1.0]]))
        values = ad.constant(np.array([[1.0], [0.0]]))
        query = ad.constant(np.array([1.0, 0.0]))
        _, weights = attend(None, "", keys, values, query, DOT)
        np.testing.assert_allclose(weights.value, [0.6698, 0.3302], atol=1e-4)

    def test_identical_keys_split_weight_equally(self):
        keys = ad.constant(np.array([[0.5, 0.5], [0.5, 0.5]]))
        values = ad.constant(np.array([[1.0], [3.0]]))
        query = ad.constant(np.array([-0.3, 0.9]))
        for kind in (DOT, LAPLACE):
            read, weights = attend(None, "", keys, values, query, kind)
            np.testing.assert_allclose(weights.value, [0.5, 0.5], atol=1e-15)
            np.testing.assert_allclose(read.value, [2.0], atol=1e-15)

    def test_laplace_prefers_nearer_key(self):
        keys = ad.constant(np.array([[0.0, 0.0], [2.0, 2.0]]))
        values = ad.constant(np.eye(2))
        query = ad.constant(np.array([0.1, 0.0]))
        _, weights = attend(None, "", keys, values, query, LAPLACE)
        # L1 distances 0.1 and 3.9: softmax(-d) known in closed form.
        expected = np.exp([-0.1, -3.9])
        expected /= expected.sum()
        np.testing.assert_allclose(weights.value, expected, rtol=1e-12)

    def test_empty_pair_set_rejected(self):
        keys = ad.constant(np.zeros((0, 2)))
        values = ad.constant(np.zeros((0, 3)))
        query = ad.constant(np.zeros(2))
        with pytest.raises(ValueError, match="empty"):
            attend(None, "", keys, values, query, DOT)

    def test_weights_nonnegative_and_normalized(self):
        rng = np.random.default_rng(36)
        for _ in range(50):
            n = int(rng.integers(1, 9))
            keys = ad.constant(rng.normal(size=(n, 3)))
            values = ad.constant(rng.normal(size=(n, 2)))
            query = ad.constant(rng.normal(size=3))
            for kind in (DOT, LAPLACE):
                _, w = attend(None, "", keys, values, query, kind)
                assert (w.value >= 0).all()
                np.testing.assert_allclose(w.value.sum(), 1.0, atol=1e-12)

    def test_pair_permutation_leaves_read_invariant(self):
        rng = np.random.default_rng(37)
        keys = rng.normal(size=(6, 3))
        values = rng.normal(size=(6, 2))
        query = rng.normal(size=3)
        perm = rng.permutation(6)
        for kind in (DOT, LAPLACE):
            r1, _ = attend(None, "", ad.constant(keys), ad.constant(values), ad.constant(query), kind)
            r2, _ = attend(None, "", ad.constant(keys[perm]), ad.constant(values[perm]), ad.constant(query), kind)
            np.testing.assert_allclose(r1.value, r2.value, atol=1e-12)


class TestMultihead:
    def make(self, rng, d_k=3, d_v=8, n_heads=4):
        store = ParamStore()
        kind = AttentionKind("multihead", n_heads)
        init_attention(store, "attn", d_k, d_v, kind, rng)
        return store, kind

    def test_single_head_identity_projections_reduce_to_dot_product(self):
        store = ParamStore()
        kind = AttentionKind("multihead", 1)
        d = 4
        init_attention(store, "attn", d, d, kind, np.random.default_rng(38))
        for name in ("wq", "wk", "wv", "wo"):
            store.get(f"attn.{name}")[...] = np.eye(d)
        rng = np.random.default_rng(39)
        keys = ad.constant(rng.normal(size=(5, d)))
        values = ad.constant(rng.normal(size=(5, d)))
        queries = ad.constant(rng.normal(size=(2, d)))
        mh, mh_w = attend_batch(store, "attn", keys, values, queries, kind)
        dp, dp_w = attend_batch(None, "", keys, values, queries, DOT)
        np.testing.assert_allclose(mh.value, dp.value, atol=1e-9)
        np.testing.assert_allclose(mh_w.value, dp_w.value, atol=1e-9)

    def test_matches_per_head_numpy_oracle(self):
        rng = np.random.default_rng(40)
        store, kind = self.make(rng)
        keys = rng.normal(size=(6, 3))
        values = rng.normal(size=(6, 8))
        queries = rng.normal(size=(2, 3))
        out, _ = attend_batch(store, "attn", ad.constant(keys), ad.constant(values),
                              ad.constant(queries), kind)

        q = queries @ store.get("attn.wq")
        k = keys @ store.get("attn.wk")
        v = values @ store.get("attn.wv")
        merged = np.zeros((2, 8))
        for hd in range(4):
            sl = slice(2 * hd, 2 * hd + 2)
            scores = q[:, sl] @ k[:, sl].T / math.sqrt(2.0)
            e = np.exp(scores - scores.max(axis=-1, keepdims=True))
            w = e / e.sum(axis=-1, keepdims=True)
            merged[:, sl] = w @ v[:, sl]
        expected = merged @ store.get("attn.wo")
        np.testing.assert_allclose(out.value, expected, rtol=1e-10)

    def test_weights_normalized_and_permutation_invariant(self):
        rng = np.random.default_rng(41)
        store, kind = self.make(rng)
        keys = rng.normal(size=(7, 3))
        values = rng.normal(size=(7, 8))
        queries = rng.normal(size=(3, 3))
        out1, w1 = attend_batch(store, "attn", ad.constant(keys), ad.constant(values),
                                ad.constant(queries), kind)
        assert (w1.value >= 0).all()
        np.testing.assert_allclose(w1.value.sum(axis=-1), np.ones(3), atol=1e-12)
        perm = rng.permutation(7)
        out2, _ = attend_batch(store, "attn", ad.constant(keys[perm]), ad.constant(values[perm]),
                               ad.constant(queries), kind)
        np.testing.assert_allclose(out1.value, out2.value, atol=1e-12)

    def test_self_attend_equals_attend_batch(self):
        rng = np.random.default_rng(42)
        store, kind = self.make(rng)
        keys = ad.constant(rng.normal(size=(4, 3)))
        values = ad.constant(rng.normal(size=(4, 8)))
        queries = ad.constant(rng.normal(size=(4, 3)))
        a = self_attend(store, "attn", keys, values, queries, kind)
        b, _ = attend_batch(store, "attn", keys, values, queries, kind)
        np.testing.assert_array_equal(a.value, b.value)

    def test_heads_must_divide_projection_dim(self):
        store = ParamStore()
        with pytest.raises(ValueError, match="divide"):
            init_attention(store, "attn", 3, 6, AttentionKind("multihead", 4),
                           np.random.default_rng(0))

    def test_gradients_pass_finite_differences(self):
        rng = np.random.default_rng(43)
        store, kind = self.make(rng, d_v=4, n_heads=2)
        keys = rng.normal(size=(5, 3))
        values = rng.normal(size=(5, 4))
        queries = rng.normal(size=(2, 3))

        def f(s):
            out, _ = attend_batch(s, "attn", ad.constant(keys), ad.constant(values),
                                  ad.constant(queries), kind)
            return ad.mean_reduce(ad.square(out))

        assert ad.finite_difference_check(f, store, eps=1e-5) < 1e-4


class TestGaussianHead:
    def test_zero_parameters_give_zero_mean_and_softplus_floor_variance(self):
        store = ParamStore()
        for name, shape in [("head.hid.w", (4, 4)), ("head.hid.b", 4),
                            ("head.mean.w", (4, 2)), ("head.mean.b", 2),
                            ("head.var.w", (4, 2)), ("head.var.b", 2)]:
            store.add(name, np.zeros(shape))
        belief = gaussian_head(store, "head", ad.constant(np.ones(4)))
        np.testing.assert_array_equal(belief.mean.value, np.zeros(2))
        np.testing.assert_allclose(belief.var.value, math.log(2.0) + 1e-4, rtol=1e-12)

    def test_variance_respects_floor_under_extreme_inputs(self):
        rng = np.random.default_rng(44)
        store = ParamStore()
        init_gaussian_head(store, "head", 3, 2, rng)
        for x in (np.full(3, -50.0), np.full(3, 50.0), np.zeros(3)):
            belief = gaussian_head(store, "head", ad.constant(x))
            assert (belief.var.value > 1e-4 - 1e-12).all()

    def test_gradients_pass_finite_differences(self):
        rng = np.random.default_rng(45)
        store = ParamStore()
        init_gaussian_head(store, "head", 3, 2, rng)
        x = rng.normal(size=(4, 3))
        y = rng.normal(size=(4, 2))

        def f(s):
            belief = gaussian_head(s, "head", ad.constant(x))
            return ad.neg(ad.mean_reduce(gaussian_log_likelihood(ad.constant(y), belief)))

        assert ad.finite_difference_check(f, store, eps=1e-5) < 1e-4


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        belief = make_belief([1.0, -2.0], [0.5, 2.0])
        z = reparameterize(belief, np.zeros(2))
        np.testing.assert_array_equal(z.value, [1.0, -2.0])

    def test_unit_belief_returns_noise(self):
        belief = make_belief([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        noise = np.array([0.3, -1.1, 0.7])
        z = reparameterize(belief, noise)
        np.testing.assert_array_equal(z.value, noise)

    def test_sample_moments_match_belief(self):
        rng = np.random.default_rng(46)
        mean, var = np.array([0.7, -0.4]), np.array([2.0, 0.25])
        belief = make_belief(mean, var)
        draws = np.stack([
            reparameterize(belief, rng.standard_normal(2)).value for _ in range(20000)
        ])
        np.testing.assert_allclose(draws.mean(axis=0), mean, atol=float(4 * np.sqrt(var.max() / 20000)))
        np.testing.assert_allclose(draws.var(axis=0), var, rtol=0.05)


class TestKl:
    def test_identical_beliefs_give_zero(self):
        rng = np.random.default_rng(47)
        for _ in range(20):
            mean = rng.normal(size=4)
            var = rng.uniform(0.1, 3.0, size=4)
            q, p = make_belief(mean, var), make_belief(mean.copy(), var.copy())
            assert abs(float(kl_diag_gaussian(q, p).value)) <= 1e-12

    def test_standard_normal_pair_closed_form(self):
        # KL(N(1,1) || N(0,1)) = 0.5
        q = make_belief([1.0], [1.0])
        p = make_belief([0.0], [1.0])
        np.testing.assert_allclose(float(kl_diag_gaussian(q, p).value), 0.5, rtol=1e-14)

    def test_nonnegative_over_random_pairs(self):
        rng = np.random.default_rng(48)
        for _ in range(500):
            q = make_belief(rng.normal(size=3), rng.uniform(0.05, 4.0, size=3))
            p = make_belief(rng.normal(size=3), rng.uniform(0.05, 4.0, size=3))
            assert float(kl_diag_gaussian(q, p).value) >= -1e-12

    def test_matches_monte_carlo_estimate(self):
        rng = np.random.default_rng(49)
        for _ in range(20):
            mq = rng.normal(size=2)
            vq = rng.uniform(0.3, 2.0, size=2)
            mp = rng.normal(size=2)
            vp = rng.uniform(0.3, 2.0, size=2)
            closed = float(kl_diag_gaussian(make_belief(mq, vq), make_belief(mp, vp)).value)

            z = mq + np.sqrt(vq) * rng.standard_normal((1_000_000, 2))
            logq = -0.5 * (np.log(2 * np.pi * vq) + (z - mq) ** 2 / vq).sum(axis=1)
            logp = -0.5 * (np.log(2 * np.pi * vp) + (z - mp) ** 2 / vp).sum(axis=1)
            mc = float((logq - logp).mean())
            assert abs(closed - mc) <= 0.01 * max(1.0, abs(closed))

    def test_batched_beliefs_reduce_trailing_axis_only(self):
        rng = np.random.default_rng(50)
        q = make_belief(rng.normal(size=(5, 3)), rng.uniform(0.2, 2.0, size=(5, 3)))
        p = make_belief(rng.normal(size=(5, 3)), rng.uniform(0.2, 2.0, size=(5, 3)))
        out = kl_diag_gaussian(q, p)
        assert out.value.shape == (5,)


class TestGaussianLogLikelihood:
    def test_zero_at_mean_with_variance_one_over_two_pi(self):
        belief = make_belief([0.4], [1.0 / (2 * math.pi)])
        ll = gaussian_log_likelihood(np.array([0.4]), belief)
        np.testing.assert_allclose(float(ll.value), 0.0, atol=1e-14)

    def test_at_mean_matches_normalization_constant(self):
        sigma2 = 0.7
        belief = make_belief([1.0], [sigma2])
        ll = float(gaussian_log_likelihood(np.array([1.0]), belief).value)
        np.testing.assert_allclose(ll, -0.5 * math.log(2 * math.pi * sigma2), rtol=1e-14)

    def test_density_integrates_to_one(self):
        # Trapezoid quadrature of exp(loglik) over a wide grid.
        mean, var = 0.3, 1.7
        xs = np.linspace(mean - 12 * math.sqrt(var), mean + 12 * math.sqrt(var), 20001)
        belief = make_belief(np.full((xs.size, 1), mean), np.full((xs.size, 1), var))
        ll = gaussian_log_likelihood(xs.reshape(-1, 1), belief).value
        integral = np.trapezoid(np.exp(ll), xs)
        np.testing.assert_allclose(integral, 1.0, rtol=1e-8)

    def test_sums_over_trailing_dimension(self):
        belief = make_belief(np.zeros((4, 3)), np.ones((4, 3)))
        ll = gaussian_log_likelihood(np.zeros((4, 3)), belief)
        assert ll.value.shape == (4,)
        np.testing.assert_allclose(ll.value, 3 * -0.5 * math.log(2 * math.pi))
