import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgfuse.model import (
    DenseParams,
    HeadParams,
    InvalidTarget,
    LstmParams,
    ModelDims,
    ShapeMismatch,
    adam_step,
    backward,
    batch_loss,
    dense_forward,
    forward_sequence,
    head_forward,
    init_optimizer,
    init_params,
    load_checkpoint,
    loss,
    lstm_step,
    save_checkpoint,
    sequence_probs,
)


def finite_diff_grad(x, y, params, h=1e-5):
    flat = params.flatten()
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        fp = flat.copy()
        fp[k] += h
        fm = flat.copy()
        fm[k] -= h
        grad[k] = (batch_loss(x, y, params.from_flat(fp)) - batch_loss(x, y, params.from_flat(fm))) / (2 * h)
    return grad


def check_gradients(mode, seed, tau_in=10, gamma=6, batch=3, kappa=5, nu=5, n_classes=4):
    dims = ModelDims(mode=mode, tau_in=tau_in, n_classes=n_classes, kappa=kappa, nu=nu)
    params = init_params(dims, seed)
    rng = np.random.default_rng(seed + 999)
    x = rng.normal(size=(batch, gamma, tau_in))
    y = rng.integers(0, n_classes, size=batch)
    if dims.has_dense:
        # keep ReLU kinks away from the finite-difference step
        pre = x @ params.dense.w.T + params.dense.b
        assert np.abs(pre).min() > 1e-3, "re-seed: activation too close to the kink"
    _, grads = backward(x, y, params)
    numeric = finite_diff_grad(x, y, params)
    analytic = grads.flatten()
    err = np.abs(analytic - numeric)
    tol = 1e-4 * np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0) + 1e-8
    worst = np.max(err / tol)
    assert worst <= 1.0, f"{mode} seed {seed}: worst scaled error {worst}"


class TestDenseForward:
    def test_zero_params(self):
        p = DenseParams(w=np.zeros((4, 6)), b=np.zeros(4))
        assert np.array_equal(dense_forward(np.ones(6), p), np.zeros(4))

    def test_identity_block_passthrough(self):
        p = DenseParams(w=np.eye(3, 5), b=np.zeros(3))
        d = np.array([0.5, 1.0, 2.0, 9.0, 9.0])
        assert np.array_equal(dense_forward(d, p), d[:3])

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        p = DenseParams(w=rng.normal(size=(4, 6)), b=rng.normal(size=4))
        assert np.all(dense_forward(rng.normal(size=6), p) >= 0)

    def test_jacobian_vector_product(self):
        rng = np.random.default_rng(1)
        p = DenseParams(w=rng.normal(size=(5, 7)), b=rng.normal(size=5))
        d = rng.normal(size=7)
        u = rng.normal(size=7)
        h = 1e-5
        numeric = (dense_forward(d + h * u, p) - dense_forward(d - h * u, p)) / (2 * h)
        active = (p.w @ d + p.b) > 0
        analytic = active * (p.w @ u)
        assert np.allclose(numeric, analytic, rtol=1e-4, atol=1e-8)

    def test_shape_mismatch(self):
        p = DenseParams(w=np.zeros((4, 6)), b=np.zeros(4))
        with pytest.raises(ShapeMismatch):
            dense_forward(np.ones(7), p)


class TestHeadForward:
    def test_uniform_from_zero_logits(self):
        p = HeadParams(w=np.zeros((4, 5)))
        pred = head_forward(np.ones(5), p)
        assert np.allclose(pred.probs, 0.25)
        assert pred.label == 0  # lowest-index tie-break

    def test_dominant_logit(self):
        # analytic: e^10/(e^10+3) = 0.99986...
        p = HeadParams(w=np.eye(4, 4) * 10.0)
        pred = head_forward(np.array([1.0, 0.0, 0.0, 0.0]), p)
        expect = math.exp(10) / (math.exp(10) + 3)
        assert np.isclose(pred.probs[0], expect, rtol=1e-12)
        assert pred.probs[0] > 0.999

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(4, 6))
        r = rng.normal(size=6)
        base = head_forward(r, HeadParams(w=w)).probs
        # shifting all logits by a constant: add c * (ones row direction)
        shifted = head_forward(r, HeadParams(w=w + np.ones((4, 6)))).probs
        assert np.allclose(base, shifted, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_simplex(self, seed):
        rng = np.random.default_rng(seed)
        pred = head_forward(rng.normal(size=5) * 30, HeadParams(w=rng.normal(size=(4, 5))))
        assert abs(pred.probs.sum() - 1.0) <= 1e-6
        assert np.all(pred.probs >= 0) and np.all(pred.probs <= 1)


class TestLstmStep:
    def test_zero_params(self):
        nu, d = 4, 3
        z = d + nu
        p = LstmParams(
            wi=np.zeros((nu, z)), bi=np.zeros(nu),
            wf=np.zeros((nu, z)), bf=np.zeros(nu),
            wo=np.zeros((nu, z)), bo=np.zeros(nu),
            wc=np.zeros((nu, z)), bc=np.zeros(nu),
        )
        h, c = lstm_step(np.ones(d), np.zeros(nu), np.zeros(nu), p)
        assert np.array_equal(h, np.zeros(nu))
        assert np.array_equal(c, np.zeros(nu))

    def test_forget_gate_keeps_cell(self):
        nu, d = 4, 3
        z = d + nu
        p = LstmParams(
            wi=np.zeros((nu, z)), bi=np.zeros(nu),
            wf=np.zeros((nu, z)), bf=np.full(nu, 20.0),
            wo=np.zeros((nu, z)), bo=np.zeros(nu),
            wc=np.zeros((nu, z)), bc=np.zeros(nu),
        )
        c_prev = np.array([0.3, -0.7, 1.1, 0.0])
        _, c = lstm_step(np.ones(d), np.zeros(nu), c_prev, p)
        assert np.max(np.abs(c - c_prev)) < 1e-8

    def test_gates_bounded(self):
        rng = np.random.default_rng(3)
        nu, d = 5, 6
        z = d + nu
        p = LstmParams(
            wi=rng.normal(size=(nu, z)), bi=rng.normal(size=nu),
            wf=rng.normal(size=(nu, z)), bf=rng.normal(size=nu),
            wo=rng.normal(size=(nu, z)), bo=rng.normal(size=nu),
            wc=rng.normal(size=(nu, z)), bc=rng.normal(size=nu),
        )
        h, c = lstm_step(rng.normal(size=d) * 5, rng.normal(size=nu), rng.normal(size=nu), p)
        assert np.all(np.abs(h) <= 1.0)  # |o*tanh(c)| <= 1


class TestForwardSequence:
    def test_joint_trace_dimensions(self):
        from ecgfuse.model import _forward

        dims = ModelDims(mode="dense-lstm", tau_in=24, n_classes=4, kappa=16, nu=16)
        params = init_params(dims, 0)
        x = np.random.default_rng(1).normal(size=(19, 24))
        pred = forward_sequence(x, params)
        assert pred.probs.shape == (4,)
        assert abs(pred.probs.sum() - 1.0) < 1e-9
        # internal trace: 19 dense outputs of width 16, 19 LSTM states of 16
        cache = _forward(x[None], params)
        assert cache["dense_out"].shape == (1, 19, 16)
        assert len(cache["steps"]) == 19
        assert cache["steps"][-1]["c"].shape == (1, 16)
        assert cache["logits"].shape == (1, 4)

    def test_gamma_one_longitudinal_equals_single_step(self):
        dims = ModelDims(mode="lstm", tau_in=6, n_classes=3, nu=4)
        params = init_params(dims, 5)
        x = np.random.default_rng(6).normal(size=(1, 6))
        pred = forward_sequence(x, params)
        h, _ = lstm_step(x[0], np.zeros(4), np.zeros(4), params.lstm)
        manual = head_forward(h, params.head)
        assert np.allclose(pred.probs, manual.probs, atol=1e-12)

    def test_duplicated_window_spectral(self):
        dims = ModelDims(mode="dense", tau_in=6, n_classes=4, kappa=5)
        params = init_params(dims, 7)
        x1 = np.random.default_rng(8).normal(size=(1, 6))
        x2 = np.vstack([x1, x1])
        assert np.allclose(
            forward_sequence(x1, params).probs, forward_sequence(x2, params).probs, atol=1e-12
        )

    def test_joint_equals_manual_composition(self):
        dims = ModelDims(mode="dense-lstm", tau_in=5, n_classes=3, kappa=4, nu=4)
        params = init_params(dims, 9)
        x = np.random.default_rng(10).normal(size=(6, 5))
        pred = forward_sequence(x, params)
        h = np.zeros(4)
        c = np.zeros(4)
        for n in range(6):
            r = dense_forward(x[n], params.dense)
            h, c = lstm_step(r, h, c, params.lstm)
        manual = head_forward(h, params.head)
        assert np.allclose(pred.probs, manual.probs, atol=1e-12)

    def test_empty_sequence(self):
        dims = ModelDims(mode="lstm", tau_in=4, n_classes=2)
        params = init_params(dims, 0)
        with pytest.raises(Exception):
            forward_sequence(np.zeros((0, 4)), params)


class TestLoss:
    def test_uniform_logits(self):
        assert np.isclose(loss(np.zeros(4), 0), math.log(4.0), atol=1e-12)

    def test_confident_logit(self):
        logits = np.zeros(4)
        logits[2] = 50.0
        assert loss(logits, 2) < 1e-10

    def test_shift_invariance(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=5)
        assert np.isclose(loss(logits, 3), loss(logits + 17.3, 3), atol=1e-12)

    def test_gradient_identity(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(size=4)
        target = 1
        z = logits - logits.max()
        softmax = np.exp(z) / np.exp(z).sum()
        onehot = np.eye(4)[target]
        h = 1e-6
        for k in range(4):
            lp = logits.copy()
            lp[k] += h
            lm = logits.copy()
            lm[k] -= h
            numeric = (loss(lp, target) - loss(lm, target)) / (2 * h)
            assert np.isclose(numeric, softmax[k] - onehot[k], atol=1e-6)

    def test_invalid_target(self):
        with pytest.raises(InvalidTarget):
            loss(np.zeros(4), 4)


class TestBackward:
    @pytest.mark.parametrize("mode", ["dense", "lstm", "dense-lstm"])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_difference_all_params(self, mode, seed):
        check_gradients(mode, seed)

    def test_bptt_19_steps(self):
        check_gradients("lstm", 3, tau_in=4, gamma=19, batch=2, nu=3)

    def test_confident_batch_has_tiny_gradient(self):
        dims = ModelDims(mode="dense", tau_in=4, n_classes=3, kappa=3)
        params = init_params(dims, 1)
        params.head.w *= 200.0  # saturate the softmax
        x = np.abs(np.random.default_rng(2).normal(size=(2, 1, 4)))
        y = np.argmax(sequence_probs(x, params), axis=1)
        loss_val, grads = backward(x, y, params)
        assert loss_val < 1e-10
        assert np.linalg.norm(grads.flatten()) < 1e-8

    def test_duplicated_sample_gradient(self):
        dims = ModelDims(mode="dense-lstm", tau_in=5, n_classes=4, kappa=4, nu=4)
        params = init_params(dims, 3)
        rng = np.random.default_rng(4)
        x1 = rng.normal(size=(1, 6, 5))
        y1 = np.array([2])
        _, g1 = backward(x1, y1, params)
        _, g2 = backward(np.concatenate([x1, x1]), np.array([2, 2]), params)
        assert np.allclose(g1.flatten(), g2.flatten(), atol=1e-12)

    def test_target_validation(self):
        dims = ModelDims(mode="dense", tau_in=3, n_classes=2, kappa=2)
        params = init_params(dims, 0)
        with pytest.raises(InvalidTarget):
            backward(np.zeros((1, 2, 3)), np.array([5]), params)


class TestAdam:
    def _params(self, seed=0):
        dims = ModelDims(mode="dense", tau_in=4, n_classes=3, kappa=3)
        return init_params(dims, seed)

    def test_first_step_is_signed_lr(self):
        params = self._params()
        rng = np.random.default_rng(5)
        g_flat = rng.uniform(0.5, 1.5, size=params.size) * rng.choice([-1.0, 1.0], size=params.size)
        grads = params.from_flat(g_flat)
        state = init_optimizer(params, lr=0.01)
        new_params, new_state = adam_step(params, grads, state)
        delta = new_params.flatten() - params.flatten()
        assert np.max(np.abs(delta + 0.01 * np.sign(g_flat))) < 1e-6
        assert new_state.step == 1

    def test_zero_gradient_fixed_point(self):
        params = self._params(1)
        state = init_optimizer(params)
        zero = params.zeros_like()
        current = params
        for _ in range(3):
            current, state = adam_step(current, zero, state)
        assert np.array_equal(current.flatten(), params.flatten())

    def test_trajectory_determinism(self):
        def run():
            params = self._params(2)
            state = init_optimizer(params, lr=0.05)
            rng = np.random.default_rng(6)
            for _ in range(5):
                grads = params.from_flat(rng.normal(size=params.size))
                params, state = adam_step(params, grads, state)
            return params.flatten()

        assert np.array_equal(run(), run())


class TestInit:
    def test_determinism(self):
        dims = ModelDims(mode="dense-lstm", tau_in=8, n_classes=4)
        assert np.array_equal(init_params(dims, 42).flatten(), init_params(dims, 42).flatten())

    def test_glorot_bounds(self):
        dims = ModelDims(mode="dense", tau_in=1056, n_classes=4, kappa=16)
        params = init_params(dims, 0)
        limit = math.sqrt(6.0 / (1056 + 16))
        assert np.abs(params.dense.w).max() <= limit
        assert np.abs(params.dense.w).max() > 0.9 * limit  # actually fills the range

    def test_biases(self):
        dims = ModelDims(mode="dense-lstm", tau_in=6, n_classes=4, kappa=5, nu=5)
        params = init_params(dims, 1)
        assert np.array_equal(params.dense.b, np.zeros(5))
        assert np.array_equal(params.lstm.bf, np.ones(5))
        for b in (params.lstm.bi, params.lstm.bo, params.lstm.bc):
            assert np.array_equal(b, np.zeros(5))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        dims = ModelDims(mode="dense-lstm", tau_in=7, n_classes=4, kappa=4, nu=4)
        params = init_params(dims, 3)
        state = init_optimizer(params, lr=0.02)
        state.m[:] = 0.5
        state = adam_step(params, params.zeros_like(), state)[1]
        save_checkpoint(
            tmp_path / "m.ckpt", [(params, state)], seed=3,
            config={"train": {"task": "onset"}}, config_hash="abc",
            extra={"task": "onset"},
        )
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:5] == b"ECGM1"
        ckpt = load_checkpoint(tmp_path / "m.ckpt")
        assert ckpt["header"]["mode"] == "dense-lstm"
        assert ckpt["header"]["seed"] == 3
        restored, restored_state = ckpt["models"][0]
        assert np.array_equal(restored.flatten(), params.flatten())
        assert np.array_equal(restored_state.m, state.m)
        assert restored_state.step == 1
        assert restored_state.lr == 0.02

    def test_multi_model_checkpoint(self, tmp_path):
        dims = ModelDims(mode="dense", tau_in=4, n_classes=2, kappa=3)
        models = [(init_params(dims, s), init_optimizer(init_params(dims, s))) for s in range(12)]
        save_checkpoint(tmp_path / "m.ckpt", models, seed=0, extra={"task": "binary"})
        ckpt = load_checkpoint(tmp_path / "m.ckpt")
        assert len(ckpt["models"]) == 12
        for (orig, _), (back, _) in zip(models, ckpt["models"]):
            assert np.array_equal(orig.flatten(), back.flatten())


class TestSeparableTraining:
    @pytest.mark.parametrize("mode", ["dense", "lstm", "dense-lstm"])
    def test_reaches_99pct_within_200_steps(self, mode):
        rng = np.random.default_rng(13)
        n, gamma, tau = 60, 5, 8
        centers = np.stack([rng.normal(0, 1, size=tau), rng.normal(0, 1, size=tau) + 3.0])
        y = np.arange(n) % 2
        x = centers[y][:, None, :] + rng.normal(0, 0.1, size=(n, gamma, tau))
        dims = ModelDims(mode=mode, tau_in=tau, n_classes=2, kappa=8, nu=8)
        params = init_params(dims, 0)
        state = init_optimizer(params, lr=0.01)
        acc = 0.0
        for step in range(200):
            _, grads = backward(x, y, params)
            params, state = adam_step(params, grads, state)
            acc = float(np.mean(np.argmax(sequence_probs(x, params), axis=1) == y))
            if acc >= 0.99:
                break
        assert acc >= 0.99, f"{mode}: best accuracy {acc}"
