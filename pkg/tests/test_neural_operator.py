import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backstep_no.dataset import ChebyshevSpec, chebyshev_beta
from backstep_no.errors import TrainingDivergedError
from backstep_no.grid import GridFunction1D, TriangularGridFunction, triangle_points
from backstep_no.neural_operator import (
    Batch,
    DeepONetParams,
    MLPParams,
    TrainConfig,
    basis_warm_start,
    deeponet2d_forward,
    deeponet_forward,
    evaluate,
    feedback_forward,
    feedback_stage1_kernel,
    fit,
    gradient_check,
    init_deeponet,
    init_feedback_net,
    init_mlp,
    kernel2d_from_deeponet,
    kernel_from_deeponet,
    load_model,
    loss_and_grads,
    mlp_forward,
    predict,
    relative_l2,
    save_model,
    sensor_stride,
    smoothed_monotone,
    train_deeponet,
    train_feedback_net,
    train_feedback_stagewise,
)
from backstep_no.pde_sim import control_1d


def rng(seed=0):
    return np.random.default_rng(seed)


def small_deeponet(m=11, dim=1, seed=0, **kw):
    sensors = np.linspace(0, 1, m) if dim == 1 else triangle_points(m)
    return init_deeponet(sensors, rng(seed), branch_hidden=(8,), trunk_hidden=(7,), p=5, **kw)


class TestConstructedNetworks:
    def test_single_tanh_unit(self):
        p = MLPParams([np.array([[2.0]]), np.array([[3.0]])], [np.array([0.5]), np.array([-1.0])])
        out, _ = mlp_forward(p, np.array([[0.25]]))
        assert out[0, 0] == pytest.approx(3 * math.tanh(1.0) - 1)

    def test_relu_network(self):
        p = MLPParams([np.array([[1.0, -1.0]]), np.array([[1.0], [1.0]])], [np.zeros(2), np.zeros(1)], "relu")
        x = np.array([[-2.0], [3.0]])
        np.testing.assert_allclose(mlp_forward(p, x)[0][:, 0], [2.0, 3.0])  # |x|

    def test_deeponet_sum_oracle(self):
        # linear branch = identity, trunk outputs constant ones: G(u)(y) = output_scale * sum(u)
        m = 4
        branch = MLPParams([np.eye(m)], [np.zeros(m)])
        trunk = MLPParams([np.zeros((1, m))], [np.ones(m)])
        p = DeepONetParams(branch, trunk, np.linspace(0, 1, m), np.zeros(m), np.ones(m), 0.5)
        u = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_allclose(deeponet_forward(p, u, np.array([0.0, 0.3, 1.0])), 5.0)

    def test_deeponet_trunk_coordinate_map(self):
        # branch returns 1, trunk returns 2y - 1: G(u)(y) = 2y - 1
        branch = MLPParams([np.zeros((3, 1))], [np.ones(1)])
        trunk = MLPParams([np.ones((1, 1))], [np.zeros(1)])
        p = DeepONetParams(branch, trunk, np.linspace(0, 1, 3), np.zeros(3), np.ones(3), 1.0)
        y = np.linspace(0, 1, 5)
        np.testing.assert_allclose(deeponet_forward(p, np.zeros(3), y), 2 * y - 1)

    def test_shape_errors(self):
        p = small_deeponet()
        with pytest.raises(ValueError):
            deeponet_forward(p, np.zeros(5), np.zeros(3))
        with pytest.raises(ValueError):
            deeponet2d_forward(p, np.zeros(11), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            DeepONetParams(init_mlp([3, 4], rng()), init_mlp([1, 5], rng()), np.zeros(3), np.zeros(3), np.ones(3))

    def test_batch_and_single_agree(self):
        p = small_deeponet()
        u = rng(1).normal(size=(3, 11))
        y = np.linspace(0, 1, 7)
        batch = deeponet_forward(p, u, y)
        np.testing.assert_allclose(batch[1], deeponet_forward(p, u[1], y))

    def test_glorot_init_limits(self):
        p = init_mlp([100, 50], rng())
        lim = math.sqrt(6 / 150)
        assert np.abs(p.weights[0]).max() <= lim
        assert np.all(p.biases[0] == 0)


class TestGradients:
    def test_mlp(self):
        p = init_mlp([4, 6, 3], rng())
        b = Batch(rng(1).normal(size=(5, 4)), rng(2).normal(size=(5, 3)))
        assert gradient_check(p, b) < 1e-5

    def test_bias_free_mlp(self):
        p = init_mlp([4, 6, 3], rng(), bias=False)
        b = Batch(rng(1).normal(size=(5, 4)), rng(2).normal(size=(5, 3)))
        assert gradient_check(p, b) < 1e-5

    def test_deeponet_1d(self):
        p = small_deeponet(output_scale=3.0)
        b = Batch(rng(1).normal(size=(4, 11)), rng(2).normal(size=(4, 9)), np.linspace(0, 1, 9))
        assert gradient_check(p, b, n_params=400) < 1e-5

    def test_deeponet_1d_mse(self):
        p = small_deeponet()
        b = Batch(rng(1).normal(size=(4, 11)), rng(2).normal(size=(4, 9)), np.linspace(0, 1, 9))
        assert gradient_check(p, b, loss="mse") < 1e-5

    def test_deeponet_2d(self):
        p = small_deeponet(m=3, dim=2)  # 10 sensors on the triangle
        q = triangle_points(4)
        b = Batch(rng(1).normal(size=(3, 10)), rng(2).normal(size=(3, q.shape[0])), q)
        assert gradient_check(p, b) < 1e-5

    def test_feedback_net(self):
        kn = small_deeponet()
        p = init_feedback_net(None, 6, rng(3), kernel_net=kn, reduce_hidden=(5,), p_reduce=4)
        p.z_scale, p.output_scale = 0.7, 2.0
        p.mix += 0.1 * rng(4).normal(size=p.mix.shape)
        b = Batch(rng(1).normal(size=(5, 11)), rng(2).normal(size=5), None, rng(5).normal(size=(5, 6)))
        assert gradient_check(p, b, n_params=500) < 1e-5

    def test_unsupported_type(self):
        with pytest.raises(TypeError):
            loss_and_grads(object(), Batch(np.zeros(1), np.zeros(1)))

    def test_bad_epsilon(self):
        with pytest.raises(ValueError):
            gradient_check(init_mlp([1, 1], rng()), Batch(np.zeros((1, 1)), np.zeros((1, 1))), epsilon_fd=0)


class TestLosses:
    def test_relative_l2(self):
        t = np.array([[3.0, 4.0], [1.0, 0.0]])
        p = np.array([[3.0, 4.5], [1.0, 0.0]])
        assert relative_l2(p, t) == pytest.approx((0.5 / 5 + 0) / 2)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 10))
    def test_relative_l2_scale_invariant(self, s):
        r = rng(7)
        t, p = r.normal(size=(3, 8)), r.normal(size=(3, 8))
        assert relative_l2(s * p, s * t) == pytest.approx(relative_l2(p, t))

    def test_zero_for_exact(self):
        t = rng().normal(size=(2, 5))
        assert relative_l2(t, t) == 0


class TestFeedbackNet:
    def test_stage3_bypass_reproduces_trapezoid_control(self):
        # linear stage 3 with trapezoid weights turns the net into int k_hat(1 - y) u(y) dy,
        # where k_hat is whatever stage 1 outputs
        q = 21
        kn = small_deeponet()
        p = init_feedback_net(None, q, rng(), kernel_net=kn, reduce_hidden=(), p_reduce=1)
        w = np.full(q, 1.0 / (q - 1))
        w[[0, -1]] *= 0.5
        p.reduce_branch.weights[0][:, 0] = w
        p.reduce_trunk.weights[0][:] = 0.0
        p.reduce_trunk.biases[0][:] = 1.0
        beta = rng(1).normal(size=11)
        u = rng(2).normal(size=q)
        k_hat = feedback_stage1_kernel(p, beta)
        expected = control_1d(k_hat, GridFunction1D(q - 1, u))
        assert feedback_forward(p, beta, u) == pytest.approx(expected, abs=1e-10)

    def test_zero_stage1_gives_zero_control(self):
        kn = small_deeponet()
        for a in kn.branch.arrays():
            a[...] = 0.0
        p = init_feedback_net(None, 6, rng(), kernel_net=kn)
        out = feedback_forward(p, rng(1).normal(size=(4, 11)), rng(2).normal(size=(4, 6)))
        np.testing.assert_array_equal(out, 0.0)

    def test_zero_u_gives_zero_control(self):
        p = init_feedback_net(None, 6, rng(), kernel_net=small_deeponet())
        assert feedback_forward(p, rng(1).normal(size=11), np.zeros(6)) == 0.0

    def test_single_returns_float(self):
        p = init_feedback_net(None, 6, rng(), kernel_net=small_deeponet())
        assert isinstance(feedback_forward(p, np.zeros(11), np.ones(6)), float)

    def test_shape_error(self):
        p = init_feedback_net(None, 6, rng(), kernel_net=small_deeponet())
        with pytest.raises(ValueError):
            feedback_forward(p, np.zeros(10), np.ones(6))

    @given(st.floats(0.01, 100.0))
    @settings(max_examples=25, deadline=None)
    def test_homogeneous_net_scales_with_u(self, a):
        p = init_feedback_net(None, 6, rng(), kernel_net=small_deeponet(), homogeneous=True)
        beta, u = rng(1).normal(size=11), rng(2).normal(size=6)
        assert feedback_forward(p, beta, a * u) == pytest.approx(a * feedback_forward(p, beta, u), rel=1e-10)

    def test_homogeneous_zero_u(self):
        p = init_feedback_net(None, 6, rng(), kernel_net=small_deeponet(), homogeneous=True)
        assert feedback_forward(p, rng(1).normal(size=11), np.zeros(6)) == 0.0

    def test_stagewise_is_quadrature_of_learned_kernel(self):
        q, n = 21, 8
        betas, us = rng(1).normal(size=(n, 11)), rng(2).normal(size=(n, q))
        x = np.linspace(0, 1, q)
        kernels = -np.exp(x)[None, :] * (1 + 0.1 * betas[:, :1])
        data = Batch(betas, np.zeros(n), None, us)
        p = init_feedback_net(None, q, rng(), kernel_net=small_deeponet(), homogeneous=True)
        cfg = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=4)
        p, hist = train_feedback_stagewise(p, data, kernels, cfg)
        assert len(hist.train) == 3
        for beta, u in zip(betas, us):
            expected = control_1d(feedback_stage1_kernel(p, beta), GridFunction1D(q - 1, u))
            assert feedback_forward(p, beta, u) == pytest.approx(expected, rel=1e-3)

    def test_stagewise_checks_kernel_shape(self):
        p = init_feedback_net(None, 6, rng(), kernel_net=small_deeponet())
        data = Batch(np.zeros((2, 11)), np.zeros(2), None, np.ones((2, 6)))
        with pytest.raises(ValueError):
            train_feedback_stagewise(p, data, np.zeros((2, 5)), TrainConfig(epochs=1))

    def test_reduce_branch_must_be_bias_free(self):
        p = init_feedback_net(None, 6, rng(), kernel_net=small_deeponet())
        with pytest.raises(ValueError):
            type(p)(p.kernel_net, p.mix, init_mlp([6, 4], rng()), p.reduce_trunk)


class TestTraining:
    def test_memorizes_two_samples(self):
        y = np.linspace(0, 1, 21)
        x = np.linspace(0, 3, 11)
        b = Batch(np.stack([np.sin(x), np.cos(x)]), np.stack([np.cos(2 * y) - 0.3, y ** 2 + 0.5]), y)
        cfg = TrainConfig(learning_rate=1e-2, epochs=5000, batch_size=2, loss="mse", lr_decay=0.5, decay_every=1000)
        p, h = train_deeponet(b, cfg, branch_hidden=(16,), trunk_hidden=(16,), p=8)
        assert h.train[-1] < 1e-3 * h.train[0]
        assert evaluate(p, b, "relative_l2") < 1e-2

    def test_deterministic(self):
        y = np.linspace(0, 1, 9)
        u = rng(1).normal(size=(12, 11))
        b = Batch(u, np.outer(u.sum(1), y), y)
        cfg = TrainConfig(epochs=5, batch_size=4, seed=3)
        p1, h1 = train_deeponet(b, cfg, branch_hidden=(8,), trunk_hidden=(8,), p=4)
        p2, h2 = train_deeponet(b, cfg, branch_hidden=(8,), trunk_hidden=(8,), p=4)
        assert h1.train == h2.train
        for a1, a2 in zip(p1.arrays(), p2.arrays()):
            np.testing.assert_array_equal(a1, a2)

    @pytest.mark.parametrize("opt", ["sgd", "momentum", "adam"])
    def test_optimizers_reduce_mse(self, opt):
        x = rng(1).normal(size=(32, 3))
        b = Batch(x, x @ np.array([[1.0], [-2.0], [0.5]]))
        p = init_mlp([3, 1], rng())
        first, _ = loss_and_grads(p, b)
        fit(p, b, TrainConfig(learning_rate=1e-3, epochs=50, batch_size=8, optimizer=opt, loss="mse"))
        assert loss_and_grads(p, b)[0] < first

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self):
        x = rng(1).normal(size=(8, 2))
        b = Batch(x, 1e3 * x[:, :1] ** 2)
        p = init_mlp([2, 16, 1], rng(), activation="relu")
        with pytest.raises(TrainingDivergedError):
            fit(p, b, TrainConfig(learning_rate=1e200, epochs=20, batch_size=8, optimizer="sgd", loss="mse"))

    def test_empty(self):
        with pytest.raises(ValueError):
            train_deeponet(Batch(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(2)), TrainConfig(epochs=1))

    @pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"optimizer": "lbfgs"}, {"loss": "l1"},
                                    {"lr_decay": 1.5}, {"batch_size": 0}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_lr_decay_changes_path(self):
        y = np.linspace(0, 1, 9)
        u = rng(1).normal(size=(12, 11))
        b = Batch(u, np.outer(u.sum(1), y), y)
        a = train_deeponet(b, TrainConfig(epochs=4, batch_size=4), branch_hidden=(8,), trunk_hidden=(8,), p=4)[1]
        c = train_deeponet(b, TrainConfig(epochs=4, batch_size=4, lr_decay=0.1, decay_every=2),
                           branch_hidden=(8,), trunk_hidden=(8,), p=4)[1]
        assert a.train[:2] == c.train[:2] and a.train[2:] != c.train[2:]

    def test_feedback_training_sets_scales(self):
        n = 12
        betas = rng(1).normal(size=(n, 11))
        u = 5 * rng(2).normal(size=(n, 6))
        U = u.sum(1)
        p, h = train_feedback_net(Batch(betas, U, None, u), TrainConfig(epochs=2, batch_size=4), 6,
                                  branch_hidden=(8,), trunk_hidden=(8,), p=4, reduce_hidden=(4,), p_reduce=3)
        assert p.u_scale == pytest.approx(np.std(u))
        assert p.output_scale == pytest.approx(np.sqrt(np.mean(U ** 2)))
        assert len(h.train) == 2


class TestBasisWarmStart:
    @staticmethod
    def rank_two(n=40):
        y = np.linspace(0, 1, 31)
        s = np.linspace(-1, 1, n)[:, None]
        u = np.hstack([s, s ** 2, np.sin(s)])
        targets = np.sin(np.pi * s) * np.sin(np.pi * y) + (1 + s ** 2) * y ** 2
        return Batch(u, targets, y)

    def test_beats_random_init(self):
        b = self.rank_two()
        fresh = init_deeponet(np.linspace(0, 1, 3), rng(), branch_hidden=(16,), trunk_hidden=(16,), p=2,
                              output_scale=np.sqrt(np.mean(b.targets ** 2)))
        before = evaluate(fresh, b, "relative_l2")
        warm = basis_warm_start(fresh, b, trunk_epochs=2000, branch_epochs=1000, learning_rate=1e-2, batch_size=8)
        assert warm is fresh
        after = evaluate(warm, b, "relative_l2")
        assert after < 0.05 < before

    def test_zero_epochs_is_a_no_op(self):
        b = self.rank_two(10)
        p = init_deeponet(np.linspace(0, 1, 3), rng(), branch_hidden=(4,), trunk_hidden=(4,), p=2)
        before = [a.copy() for a in p.arrays()]
        basis_warm_start(p, b, 0, 0)
        for x, y in zip(before, p.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_p_above_rank_limit(self):
        b = self.rank_two(3)
        p = init_deeponet(np.linspace(0, 1, 3), rng(), branch_hidden=(4,), trunk_hidden=(4,), p=5)
        with pytest.raises(ValueError, match="exceeds"):
            basis_warm_start(p, b, 1, 1)


class TestSmoothedMonotone:
    def test_decreasing(self):
        assert smoothed_monotone(list(np.exp(-np.arange(50) / 10)))

    def test_noisy_but_decreasing(self):
        h = np.exp(-np.arange(100) / 30) * (1 + 0.05 * np.sin(np.arange(100) * 2.1))
        assert smoothed_monotone(list(h))

    def test_rising(self):
        assert not smoothed_monotone(list(np.linspace(1, 2, 40)))

    def test_short(self):
        assert smoothed_monotone([3.0, 5.0])


class TestKernelEvaluation:
    def test_sensor_stride(self):
        assert sensor_stride(100, 200) == 2
        with pytest.raises(ValueError):
            sensor_stride(30, 200)

    def test_kernel_from_deeponet_grid(self):
        p = small_deeponet()
        beta = chebyshev_beta(ChebyshevSpec(3.0), 50)
        k = kernel_from_deeponet(p, beta)
        assert k.n_cells == 50
        np.testing.assert_allclose(k.values, deeponet_forward(p, beta.values[::5], k.x))
        assert kernel_from_deeponet(p, beta, n_cells=10).n_cells == 10

    def test_kernel2d_from_deeponet(self):
        p = small_deeponet(m=3, dim=2)
        f = TriangularGridFunction.from_callable(lambda x, y: x * y, 6)
        k = kernel2d_from_deeponet(p, f)
        assert k.n_cells == 6
        expected = deeponet_forward(p, f.restrict(2).values, triangle_points(6))
        np.testing.assert_allclose(k.values, expected)


class TestSerialization:
    def test_deeponet_round_trip(self, tmp_path):
        p = small_deeponet(output_scale=2.5)
        save_model(p, tmp_path / "m", {"note": "x"})
        q, doc = load_model(tmp_path / "m")
        assert doc["note"] == "x" and doc["n_params"] == sum(a.size for a in p.arrays())
        u, y = rng(1).normal(size=(2, 11)), np.linspace(0, 1, 5)
        np.testing.assert_array_equal(deeponet_forward(p, u, y), deeponet_forward(q, u, y))

    def test_deeponet2d_round_trip(self, tmp_path):
        p = small_deeponet(m=3, dim=2)
        q, _ = load_model(save_model(p, tmp_path / "m"))
        pts = triangle_points(3)
        np.testing.assert_array_equal(deeponet_forward(p, np.ones(10), pts), deeponet_forward(q, np.ones(10), pts))

    def test_feedback_round_trip(self, tmp_path):
        p = init_feedback_net(None, 6, rng(), kernel_net=small_deeponet())
        p.u_scale, p.z_scale, p.output_scale = 2.0, 0.3, 4.0
        q, _ = load_model(save_model(p, tmp_path / "m"))
        b = Batch(rng(1).normal(size=(3, 11)), np.zeros(3), None, rng(2).normal(size=(3, 6)))
        np.testing.assert_array_equal(predict(p, b), predict(q, b))

    def test_homogeneous_flag_survives(self, tmp_path):
        p = init_feedback_net(None, 6, rng(), kernel_net=small_deeponet(), homogeneous=True)
        q, _ = load_model(save_model(p, tmp_path / "m"))
        assert q.homogeneous

    def test_truncated_blob(self, tmp_path):
        path = save_model(small_deeponet(), tmp_path / "m")
        blob = (path / "params.f64").read_bytes()
        (path / "params.f64").write_bytes(blob[:-8])
        with pytest.raises(ValueError):
            load_model(path)

    def test_wrong_format(self, tmp_path):
        path = save_model(small_deeponet(), tmp_path / "m")
        (path / "model.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            load_model(path)

    def test_unsupported(self, tmp_path):
        with pytest.raises(TypeError):
            save_model(init_mlp([1, 1], rng()), tmp_path / "m")
