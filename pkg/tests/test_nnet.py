import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codec_resynth.nnet import (
    PEAK_LR,
    AdamHyper,
    AdamState,
    NetSpec,
    ParameterSet,
    adam_step,
    forward,
    init_params,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    stage_table_shape,
    time_embedding,
    value_and_grad,
)
from codec_resynth.nnet.autodiff import Tensor, as_tensor, gelu, log_softmax
from codec_resynth.nnet.gradcheck import check_gradients, random_net_case, relative_errors


class TestAutodiff:
    def test_linear_quadratic_closed_form(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((3, 4))
        x = rng.standard_normal((4, 1))
        y = rng.standard_normal((3, 1))
        grad = np.zeros_like(w)
        wt = Tensor(w, grad=grad)
        d = wt @ as_tensor(x) - as_tensor(y)
        ((d * d).sum() * 0.5).backward()
        np.testing.assert_allclose(grad, (w @ x - y) @ x.T, rtol=1e-12)

    def test_zero_loss_zero_grad(self):
        grad = np.zeros(3)
        t = Tensor(np.array([1.0, 2.0, 3.0]), grad=grad)
        (t * 0.0).sum().backward()
        assert np.all(grad == 0.0)

    def test_shared_subexpression_accumulates(self):
        grad = np.zeros(1)
        a = Tensor(np.array([3.0]), grad=grad)
        b = a * a
        (b + b).sum().backward()
        assert grad[0] == 12.0

    def test_backward_needs_scalar(self):
        t = Tensor(np.ones(2), grad=np.zeros(2))
        with pytest.raises(ValueError):
            (t * 2.0).backward()

    def test_gelu_values(self):
        out = gelu(Tensor(np.array([0.0, 10.0, -10.0]))).data
        np.testing.assert_allclose(out, [0.0, 10.0, 0.0], atol=1e-12)

    def test_log_softmax_normalizes(self):
        z = np.random.default_rng(1).standard_normal((4, 7)) * 30
        out = log_softmax(Tensor(z)).data
        np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, rtol=1e-12)


class TestForward:
    def test_affine_oracle(self):
        rng = np.random.default_rng(2)
        spec = NetSpec(3, (5,), 2, activation="identity", layer_norm=False)
        p = init_params(spec, rng)
        p.values[:] = rng.standard_normal(p.values.size)
        x = rng.standard_normal((4, 3))
        h = x @ p["l0.w"] + p["l0.b"]
        expected = h @ p["out.w"] + p["out.b"]
        np.testing.assert_allclose(forward(p, spec, x).data, expected, rtol=1e-12)

    def test_identity_conditioning_at_init(self):
        rng = np.random.default_rng(3)
        cond_spec = NetSpec(4, (8, 8), 3, cond_dim=5)
        plain_spec = NetSpec(4, (8, 8), 3, cond_dim=0)
        pc = init_params(cond_spec, np.random.default_rng(9))
        pp = init_params(plain_spec, np.random.default_rng(9))
        x = rng.standard_normal((6, 4))
        a = forward(pc, cond_spec, x, cond=rng.standard_normal((6, 5))).data
        b = forward(pp, plain_spec, x).data
        assert np.array_equal(a, b)

    def test_zero_input_odd_activation(self):
        spec = NetSpec(3, (4,), 2, activation="tanh")
        p = init_params(spec, np.random.default_rng(0))
        out = forward(p, spec, np.zeros((2, 3))).data
        # pre-norm activations are all zero, so layer norm yields zeros and only out.b (zero) remains
        assert np.all(out == 0.0)

    def test_deterministic_reentrant(self):
        spec, p, _ = random_net_case(np.random.default_rng(4))
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, spec.input_dim))
        c = rng.standard_normal((3, spec.cond_dim))
        aux = rng.standard_normal((3, spec.aux_dim)) if spec.aux_dim else None
        head = 0 if spec.num_heads > 1 else None
        a = forward(p, spec, x, cond=c, aux=aux, head=head).data
        b = forward(p, spec, x, cond=c, aux=aux, head=head).data
        assert a.tobytes() == b.tobytes()

    def test_head_routing_matches_per_head(self):
        rng = np.random.default_rng(6)
        spec = NetSpec(3, (5,), 2, num_heads=3)
        p = init_params(spec, rng)
        x = rng.standard_normal((7, 3))
        heads = np.array([2, 0, 1, 2, 2, 0, 1])
        routed = forward(p, spec, x, head=heads).data
        for g in range(3):
            rows = heads == g
            np.testing.assert_array_equal(routed[rows], forward(p, spec, x[rows], head=g).data)

    @pytest.mark.parametrize("x", [np.zeros((2, 4)), np.array([[np.nan, 0, 0]])])
    def test_bad_input(self, x):
        spec = NetSpec(3, (4,), 1)
        with pytest.raises(ValueError):
            forward(init_params(spec, np.random.default_rng(0)), spec, x)

    def test_missing_cond(self):
        spec = NetSpec(3, (4,), 1, cond_dim=2)
        with pytest.raises(ValueError):
            forward(init_params(spec, np.random.default_rng(0)), spec, np.zeros((1, 3)))

    def test_spec_needs_hidden_layer(self):
        with pytest.raises(ValueError):
            NetSpec(3, (), 1)


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        _, p, loss_fn = random_net_case(np.random.default_rng(100 + seed))
        err = check_gradients(p, loss_fn)
        assert np.mean(err < 1e-4) >= 0.99

    def test_value_and_grad_returns_loss(self):
        _, p, loss_fn = random_net_case(np.random.default_rng(1))
        loss, grad = value_and_grad(p, loss_fn)
        assert loss == float(loss_fn(p.leaves()).data)
        assert grad.shape == p.values.shape

    def test_relative_error_floor(self):
        assert relative_errors([0.0, 1.0], [1e-12, 1.0 + 1e-6]).max() < 2e-6


class TestParameterSet:
    def test_layout_gap_rejected(self):
        with pytest.raises(ValueError):
            ParameterSet(np.zeros(4), {"a": (0, (2,)), "b": (3, (1,))})

    def test_layout_must_cover(self):
        with pytest.raises(ValueError):
            ParameterSet(np.zeros(4), {"a": (0, (3,))})

    def test_views_share_memory(self):
        p = ParameterSet.allocate({"a": (2, 2), "b": (3,)})
        p["b"][1] = 7.0
        assert p.values[5] == 7.0


class TestAdam:
    def test_zero_grad_no_decay_unchanged(self):
        p = np.array([1.0, -2.0])
        adam_step(p, np.zeros(2), AdamState.zeros(2), AdamHyper(lr=0.1, weight_decay=0.0))
        assert p.tolist() == [1.0, -2.0]

    def test_first_step_closed_form(self):
        g = np.array([0.5, -3.0, 1e-3])
        p = np.zeros(3)
        lr, eps = 0.01, 1e-8
        adam_step(p, g, AdamState.zeros(3), AdamHyper(lr=lr, eps=eps, weight_decay=0.0))
        # bias-corrected moments on step 1 are g and g^2 exactly
        np.testing.assert_allclose(p, -lr * g / (np.abs(g) + eps), rtol=1e-12)

    def test_decoupled_weight_decay(self):
        p = np.array([2.0, -4.0])
        adam_step(p, np.zeros(2), AdamState.zeros(2), AdamHyper(lr=0.5, weight_decay=0.01))
        np.testing.assert_allclose(p, [2.0 * (1 - 0.005), -4.0 * (1 - 0.005)], rtol=1e-15)

    def test_non_finite_rejected_untouched(self):
        p = np.ones(2)
        state = AdamState.zeros(2)
        with pytest.raises(FloatingPointError):
            adam_step(p, np.array([np.inf, 0.0]), state)
        assert p.tolist() == [1.0, 1.0] and state.step == 0

    def test_default_hyper(self):
        h = AdamHyper()
        assert (h.beta1, h.beta2, h.eps, h.weight_decay) == (0.9, 0.999, 1e-8, 0.01)


class TestSchedule:
    def test_endpoints(self):
        assert lr_at(0, 1e-3, 10, 100) == 0.0
        assert lr_at(10, 1e-3, 10, 100) == 1e-3
        assert lr_at(100, 1e-3, 10, 100) == 0.0
        assert lr_at(150, 1e-3, 10, 100) == 0.0

    def test_decay_midpoint(self):
        assert lr_at(55, 2e-4, 10, 100) == pytest.approx(1e-4, rel=1e-12)

    def test_peak_lrs(self):
        assert PEAK_LR == {"c2f": 1e-4, "onestep": 5e-4, "bridge": 5e-4}

    def test_bad_warmup(self):
        with pytest.raises(ValueError):
            lr_at(0, 1.0, 10, 10)


class TestEmbeddings:
    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 1.0), st.sampled_from([2, 8, 32]))
    def test_time_embedding_bounded(self, t, dim):
        e = time_embedding(np.array([t]), dim)
        assert e.shape == (1, dim) and np.all(np.abs(e) <= 1.0)

    def test_time_embedding_odd_dim(self):
        with pytest.raises(ValueError):
            time_embedding(np.array([0.5]), 5)

    def test_stage_table(self):
        assert stage_table_shape(8, 16) == (7, 16)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec, p, _ = random_net_case(np.random.default_rng(7))
        p.values[:] = p.values.astype(np.float32)
        state = AdamState(np.full(p.values.size, 0.25), np.full(p.values.size, 0.5), 12)
        save_checkpoint(tmp_path / "c.ckpt", spec, p, state, meta={"method": "x"})
        spec2, p2, state2, meta = load_checkpoint(tmp_path / "c.ckpt")
        assert spec2 == spec and meta == {"method": "x"}
        assert np.array_equal(p2.values, p.values) and p2.layout == p.layout
        assert state2.step == 12 and np.all(state2.v == 0.5)

    def test_without_optimizer(self, tmp_path):
        spec = NetSpec(2, (3,), 1)
        save_checkpoint(tmp_path / "c.ckpt", spec, init_params(spec, np.random.default_rng(0)))
        assert load_checkpoint(tmp_path / "c.ckpt")[2] is None

    def test_truncated(self, tmp_path):
        spec = NetSpec(2, (3,), 1)
        save_checkpoint(tmp_path / "c.ckpt", spec, init_params(spec, np.random.default_rng(0)))
        raw = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "c.ckpt").write_bytes(raw[:-4])
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "c.ckpt")
