import math

import numpy as np
import pytest

from adaptplanner import denoiser as D
from adaptplanner.config import rng_stream
from adaptplanner.diffusion import build_schedule
from adaptplanner.errors import EmptyPool, InvalidConfig, ShapeMismatch

TINY = D.DenoiserArch(width=8, blocks=2, kernel_size=3, embed_dim=8, groups=4, dilations=(1, 4))


@pytest.fixture(scope="module")
def tiny_params():
    params = D.init_params(TINY, seed=1)
    # wake the zero-initialized output layer so gradients reach every block
    params.weights["out.w"] = rng_stream(2, "ow").standard_normal(params.weights["out.w"].shape) * 0.1
    params.weights["out.b"] = rng_stream(2, "ob").standard_normal(params.weights["out.b"].shape) * 0.1
    return params


@pytest.fixture(scope="module")
def sched():
    return build_schedule(8)


class FakePool:
    def __init__(self, batch):
        self.batch = batch

    def __len__(self):
        return self.batch.shape[0]

    def training_batch(self, rng, batch_size, horizon):
        idx = rng.integers(self.batch.shape[0], size=batch_size)
        return self.batch[idx]


class TestInit:
    def test_deterministic(self):
        a = D.init_params(TINY, seed=5)
        b = D.init_params(TINY, seed=5)
        assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)

    def test_zero_output_layer(self):
        params = D.init_params(TINY, seed=3)
        x = rng_stream(0, "x").uniform(-1, 1, (2, 12, 6))
        out = D.forward(params, x, np.array([1, 7]))
        assert np.all(out == 0.0)

    def test_fan_in_bound(self):
        params = D.init_params(TINY, seed=4)
        for name, w in params.weights.items():
            if name.endswith((".gamma", ".beta", ".b")) or name.startswith("out."):
                continue
            bound = D.fan_in_scale(w.shape)
            assert np.abs(w).max() <= bound

    def test_width_group_mismatch(self):
        with pytest.raises(InvalidConfig):
            D.DenoiserArch(width=12, blocks=1, kernel_size=3, embed_dim=8, groups=8)


class TestForward:
    def test_shape_contract(self, tiny_params):
        for rows in (4, 12, 33):
            x = rng_stream(1, "x", rows).uniform(-1, 1, (3, rows, 6))
            out = D.forward(tiny_params, x, np.array([1, 2, 8]))
            assert out.shape == x.shape

    def test_determinism(self, tiny_params):
        x = rng_stream(2, "x").uniform(-1, 1, (2, 10, 6))
        a = D.forward(tiny_params, x, np.array([3, 4]))
        b = D.forward(tiny_params, x, np.array([3, 4]))
        assert np.array_equal(a, b)

    def test_rejects_bad_shape(self, tiny_params):
        with pytest.raises(ShapeMismatch):
            D.forward(tiny_params, np.zeros((2, 10, 5)), np.array([1, 1]))

    def test_mish_values(self):
        y, _ = D._mish(np.array([0.0, 1.0]))
        assert y[0] == 0.0
        assert y[1] == pytest.approx(1.0 * math.tanh(math.log(1 + math.e)), rel=1e-12)
        assert y[1] == pytest.approx(0.8651, abs=5e-5)

    def test_timestep_changes_output(self, tiny_params):
        x = rng_stream(3, "x").uniform(-1, 1, (1, 10, 6))
        a = D.forward(tiny_params, x, np.array([1]))
        b = D.forward(tiny_params, x, np.array([8]))
        assert not np.allclose(a, b)


class TestGradients:
    def test_finite_differences(self, tiny_params, sched):
        batch = rng_stream(3, "batch").uniform(-1, 1, (2, 12, 6))
        loss, grads = D.gradients(sched, tiny_params, batch, rng_stream(9, "corr"))
        rng = np.random.default_rng(42)
        names = list(tiny_params.weights)
        h = 1e-4
        for _ in range(60):
            name = names[int(rng.integers(len(names)))]
            w = tiny_params.weights[name]
            idx = tuple(int(rng.integers(s)) for s in w.shape)
            orig = w[idx]
            w[idx] = orig + h
            lp = D.denoise_loss(sched, tiny_params, batch, rng_stream(9, "corr"))
            w[idx] = orig - h
            lm = D.denoise_loss(sched, tiny_params, batch, rng_stream(9, "corr"))
            w[idx] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name][idx]
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-4

    def test_gradient_shapes(self, tiny_params, sched):
        batch = rng_stream(4, "batch").uniform(-1, 1, (2, 12, 6))
        _, grads = D.gradients(sched, tiny_params, batch, rng_stream(5, "corr"))
        for name, w in tiny_params.weights.items():
            assert grads[name].shape == w.shape

    def test_loss_scaling_linearity(self, tiny_params, sched):
        # duplicating every batch element leaves the mean loss and thus the
        # gradients unchanged; scaling residual weight by 2 scales gradients by 2
        batch = rng_stream(6, "batch").uniform(-1, 1, (2, 12, 6))
        l1, g1 = D.gradients(sched, tiny_params, batch, rng_stream(7, "corr"))
        ts, eps, tau_i = D._draw_corruption(sched, batch, rng_stream(7, "corr"))
        eps_hat, cache = D._net_forward(tiny_params, tau_i, ts, keep_cache=True)
        mask = D.loss_mask(batch.shape)
        residual = (eps_hat - eps) * mask
        g2 = D._net_backward(tiny_params, 2.0 * (2.0 * residual / mask.sum()), cache)
        for name in g1:
            assert np.allclose(2.0 * g1[name], g2[name], rtol=1e-12)


class TestLoss:
    def test_perfect_prediction_zero_loss(self, sched):
        # a denoiser that always answers zero, fed a corruption with eps = 0
        params = D.init_params(TINY, seed=8)
        batch = np.zeros((2, 10, 6))

        class RiggedRng:
            def integers(self, lo, hi=None, size=None):
                return np.full(size, 3)

            def standard_normal(self, shape):
                return np.zeros(shape)

        loss = D.denoise_loss(sched, params, batch, RiggedRng())
        assert loss == 0.0

    def test_hand_computed_loss(self, sched):
        params = D.init_params(TINY, seed=9)  # zero output layer => eps_hat = 0
        batch = np.zeros((1, 4, 6))
        eps = rng_stream(10, "eps").standard_normal((1, 4, 6))

        class FixedRng:
            def integers(self, lo, hi=None, size=None):
                return np.full(size, 2)

            def standard_normal(self, shape):
                return eps

        loss = D.denoise_loss(sched, params, batch, FixedRng())
        mask = D.loss_mask(batch.shape)
        assert loss == pytest.approx(((eps**2) * mask).sum() / mask.sum(), rel=1e-12)

    def test_loss_nonnegative(self, tiny_params, sched):
        for k in range(5):
            batch = rng_stream(11, "b", k).uniform(-1, 1, (2, 8, 6))
            assert D.denoise_loss(sched, tiny_params, batch, rng_stream(12, "c", k)) >= 0.0

    def test_row0_state_masked(self, sched):
        mask = D.loss_mask((2, 6, 6))
        assert np.all(mask[:, 0, :4] == 0.0)
        assert mask.sum() == 2 * 6 * 6 - 2 * 4


class TestAdam:
    def test_zero_gradients_no_change(self):
        params = D.init_params(TINY, seed=12)
        opt = D.OptState.fresh(params)
        grads = {k: np.zeros_like(w) for k, w in params.weights.items()}
        new_params, _ = D.adam_step(params, grads, opt)
        assert all(np.array_equal(params.weights[k], new_params.weights[k]) for k in params.weights)

    def test_zero_lr_no_change(self, tiny_params, sched):
        batch = rng_stream(13, "b").uniform(-1, 1, (2, 8, 6))
        _, grads = D.gradients(sched, tiny_params, batch, rng_stream(14, "c"))
        opt = D.OptState.fresh(tiny_params, lr=0.0)
        new_params, _ = D.adam_step(tiny_params, grads, opt)
        assert all(np.array_equal(tiny_params.weights[k], new_params.weights[k]) for k in tiny_params.weights)

    def test_single_scalar_hand_update(self):
        arch = TINY
        params = D.init_params(arch, seed=15)
        grads = {k: np.zeros_like(w) for k, w in params.weights.items()}
        grads["out.b"] = np.zeros_like(params.weights["out.b"])
        grads["out.b"][0] = 0.5
        opt = D.OptState.fresh(params, lr=1e-3)
        new_params, new_opt = D.adam_step(params, grads, opt)
        m_hat = (0.1 * 0.5) / (1 - 0.9)
        v_hat = (0.001 * 0.25) / (1 - 0.999)
        expected = -1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert new_params.weights["out.b"][0] == pytest.approx(expected, rel=1e-12)
        assert new_opt.step == 1


class TestTrain:
    def test_zero_steps_identity(self, sched):
        pool = FakePool(rng_stream(16, "p").uniform(-1, 1, (4, 8, 6)))
        start = D.init_params(TINY, seed=17)
        out = D.train(sched, pool, steps=0, batch_size=2, lr=1e-3, seed=0, horizon=8, start=start)
        assert all(np.array_equal(start.weights[k], out.weights[k]) for k in start.weights)

    def test_deterministic(self, sched):
        pool = FakePool(rng_stream(18, "p").uniform(-1, 1, (4, 8, 6)))
        a = D.train(sched, pool, steps=5, batch_size=2, lr=1e-3, seed=3, horizon=8, arch=TINY)
        b = D.train(sched, pool, steps=5, batch_size=2, lr=1e-3, seed=3, horizon=8, arch=TINY)
        assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)

    def test_empty_pool(self, sched):
        with pytest.raises(EmptyPool):
            D.train(sched, FakePool(np.zeros((0, 8, 6))), steps=1, batch_size=2, lr=1e-3, seed=0, horizon=8, arch=TINY)

    def test_identical_pool_loss_drops_10x(self, sched):
        # 64 copies of one trajectory at the desk architecture: the running
        # average loss must fall at least 10x over 2000 steps
        base = rng_stream(19, "p").uniform(-1, 1, (1, 16, 6))
        pool = FakePool(np.repeat(base, 64, axis=0))
        history = []
        D.train(sched, pool, steps=2000, batch_size=8, lr=2e-4, seed=4, horizon=16,
                arch=D.DenoiserArch(), history=history, log_every=1)
        losses = np.array([l for _, l in history])
        start_avg = losses[:100].mean()
        end_avg = losses[-100:].mean()
        assert end_avg < start_avg / 10.0
