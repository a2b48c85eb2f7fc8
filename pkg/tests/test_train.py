import numpy as np
import pytest

from inhernet.errors import NumericalError, RangeError, ShapeError
from inhernet.inherit import inherit_dense
from inhernet.io import SyntheticTask, gen_synthetic
from inhernet.nn import DenseLayer, Network, cross_entropy, make_mlp
from inhernet.rng import philox
from inhernet.train import (RUNLOG_COLUMNS, TrainConfig, gating_grad_variance,
                            kd_loss, learning_rate, sgd_step, train)


def cfg(**kw):
    base = dict(base_lr=0.1, epochs=5, batch_size=16, seed=0, loss="mse")
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_first_step_full_rate(self):
        assert learning_rate(cfg(schedule="inverse_sqrt", base_lr=0.3), 1) == 0.3

    def test_step_four_halves(self):
        assert learning_rate(cfg(schedule="inverse_sqrt", base_lr=0.3), 4) == 0.15

    def test_sqrt_identity_to_one_ulp(self):
        c = cfg(schedule="inverse_sqrt", base_lr=0.7)
        for t in range(1, 5000):
            assert abs(learning_rate(c, t) * np.sqrt(t) - 0.7) <= np.spacing(0.7)

    def test_constant_and_step_decay(self):
        c = cfg(schedule="constant", base_lr=0.2)
        assert learning_rate(c, 100) == 0.2
        c = cfg(schedule="step", base_lr=1.0, milestones=(10, 20), decay_factor=0.1)
        assert learning_rate(c, 9) == 1.0
        assert learning_rate(c, 10) == 0.1
        assert abs(learning_rate(c, 25) - 0.01) < 1e-15

    def test_step_index_must_be_positive(self):
        with pytest.raises(RangeError):
            learning_rate(cfg(), 0)


class TestSgdStep:
    def test_quadratic_convergence_with_scalar_oracle(self):
        # minimize 0.5 * (theta - 5)^2 under the diminishing schedule and
        # compare against a literal scalar simulation
        c = cfg(schedule="inverse_sqrt", base_lr=0.5)
        theta = np.array([0.0])
        params = {"t": theta}
        expected = 0.0
        for t in range(1, 1001):
            g = theta[0] - 5.0
            sgd_step(params, {"t": np.array([g])}, t, c)
            expected = expected - 0.5 / np.sqrt(t) * (expected - 5.0)
        assert abs(theta[0] - 5.0) < 0.05
        assert abs(theta[0] - expected) < 1e-12

    def test_nonfinite_gradient_aborts_with_step(self):
        with pytest.raises(NumericalError, match="step 7"):
            sgd_step({"w": np.ones(2)}, {"w": np.array([np.inf, 0.0])}, 7, cfg())


class TestKdLoss:
    def test_identical_logits_reduce_to_ce(self):
        gen = philox(1, 0)
        logits = gen.standard_normal((5, 4))
        labels = gen.integers(0, 4, size=5)
        c = cfg(loss="ce+kd", lambda_ce=1.0, lambda_kd=9.0, temperature=2.0)
        total, _ = kd_loss(logits, logits, labels, c)
        ce, _ = cross_entropy(logits, labels)
        assert abs(total - ce) < 1e-12

    def test_zero_weight_is_plain_ce(self):
        gen = philox(2, 0)
        s = gen.standard_normal((6, 3))
        t = gen.standard_normal((6, 3))
        labels = gen.integers(0, 3, size=6)
        c = cfg(loss="ce+kd", lambda_kd=0.0)
        total, grad = kd_loss(s, t, labels, c)
        ce, ce_grad = cross_entropy(s, labels)
        assert total == ce
        assert np.array_equal(grad, ce_grad)

    def test_against_high_precision_reference(self):
        # batch regenerated from its Philox key; total computed with
        # 50-digit decimal arithmetic at tau=2, lambda_ce=1, lambda_kd=9
        gen = philox(2024, 1)
        s = gen.standard_normal((3, 4))
        t = gen.standard_normal((3, 4))
        labels = gen.integers(0, 4, size=3)
        c = cfg(loss="ce+kd", lambda_ce=1.0, lambda_kd=9.0, temperature=2.0)
        total, _ = kd_loss(s, t, labels, c)
        assert abs(total - 7.716641641727973364028849) < 1e-12

    def test_gradient_matches_finite_differences(self):
        gen = philox(3, 0)
        s = gen.standard_normal((4, 5))
        t = gen.standard_normal((4, 5))
        labels = gen.integers(0, 5, size=4)
        c = cfg(loss="ce+kd", lambda_ce=0.7, lambda_kd=4.0, temperature=3.0)
        _, grad = kd_loss(s, t, labels, c)
        step = 1e-5
        fd = np.zeros_like(s)
        for idx in np.ndindex(s.shape):
            sp = s.copy(); sp[idx] += step
            sm = s.copy(); sm[idx] -= step
            fd[idx] = (kd_loss(sp, t, labels, c)[0]
                       - kd_loss(sm, t, labels, c)[0]) / (2 * step)
        mask = np.abs(grad) > 1e-6
        assert float((np.abs(grad - fd)[mask] / np.abs(grad)[mask]).max()) < 1e-4

    def test_class_dim_mismatch(self):
        with pytest.raises(ShapeError):
            kd_loss(np.zeros((2, 3)), np.zeros((2, 4)), np.array([0, 1]), cfg())

    def test_invalid_config(self):
        with pytest.raises(RangeError):
            cfg(temperature=0.0)
        with pytest.raises(RangeError):
            cfg(base_lr=-1.0)
        with pytest.raises(RangeError):
            cfg(lambda_kd=-0.1)


class TestTrain:
    def test_zero_epochs_leaves_net_unchanged(self):
        task = SyntheticTask(kind="piecewise", seed=3, n=100, dim=4, classes=1,
                             out_dim=2)
        data = gen_synthetic(task)
        net = make_mlp([4, 2], seed=1, bias=True)
        before = {k: v.copy() for k, v in net.param_items().items()}
        log = train(net, data, cfg(epochs=0))
        assert len(log) == 0
        for k, v in net.param_items().items():
            assert np.array_equal(v, before[k])

    def test_realizable_linear_regression(self):
        # noise-free single-cluster task is globally linear; least squares
        # confirms realizability, then SGD must reach near-zero eval loss
        task = SyntheticTask(kind="piecewise", seed=4, n=500, dim=6, classes=1,
                             out_dim=3)
        data = gen_synthetic(task)
        xb = np.hstack([data[0].x, np.ones((data[0].x.shape[0], 1))])
        coef, residual, _, _ = np.linalg.lstsq(xb, data[0].y, rcond=None)
        assert np.max(np.abs(xb @ coef - data[0].y)) < 1e-8
        net = Network([DenseLayer(np.zeros((6, 3)), np.zeros(3))])
        log = train(net, data, cfg(epochs=200, base_lr=0.05, batch_size=32,
                                   schedule="constant"))
        assert log.eval_loss[-1] < 1e-3

    def test_same_seed_bit_identical(self):
        task = SyntheticTask(kind="blobs", seed=5, n=300, dim=6, classes=3,
                             separation=2.0)
        data = gen_synthetic(task)
        logs = []
        for _ in range(2):
            net = make_mlp([6, 12, 3], seed=9)
            logs.append(train(net, data, cfg(loss="ce", epochs=4, seed=13)))
        assert logs[0].train_loss == logs[1].train_loss
        assert logs[0].eval_loss == logs[1].eval_loss
        assert logs[0].eval_acc == logs[1].eval_acc
        assert logs[0].grad_norm_mean == logs[1].grad_norm_mean
        assert logs[0].grad_norm_var == logs[1].grad_norm_var

    def test_epochs_to_threshold_recorded(self):
        task = SyntheticTask(kind="piecewise", seed=6, n=400, dim=5, classes=1,
                             out_dim=2)
        data = gen_synthetic(task)
        net = Network([DenseLayer(np.zeros((5, 2)), np.zeros(2))])
        log = train(net, data, cfg(epochs=100, base_lr=0.05, threshold=1e-2,
                                   schedule="constant"))
        assert log.epochs_to_threshold is not None
        t = log.epochs_to_threshold
        assert log.eval_loss[t - 1] <= 1e-2
        assert all(v > 1e-2 for v in log.eval_loss[:t - 1])

    def test_trailing_mean_eval_loss_improves(self):
        task = SyntheticTask(kind="blobs", seed=7, n=400, dim=8, classes=2,
                             separation=2.0)
        data = gen_synthetic(task)
        net = make_mlp([8, 16, 2], seed=2)
        log = train(net, data, cfg(loss="ce", epochs=30, base_lr=0.05))
        assert np.mean(log.eval_loss[-10:]) <= np.mean(log.eval_loss[:10])

    def test_runlog_lengths_and_csv(self, tmp_path):
        task = SyntheticTask(kind="blobs", seed=8, n=200, dim=4, classes=2)
        data = gen_synthetic(task)
        net = make_mlp([4, 6, 2], seed=1)
        log = train(net, data, cfg(loss="ce", epochs=3))
        assert len(log.train_loss) == len(log.eval_loss) == 3
        assert all(np.isfinite(v) for v in log.train_loss)
        path = tmp_path / "log.csv"
        log.to_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == ",".join(RUNLOG_COLUMNS)
        assert len(lines) == 4

    def test_kd_training_requires_teacher(self):
        task = SyntheticTask(kind="blobs", seed=9, n=100, dim=4, classes=2)
        data = gen_synthetic(task)
        net = make_mlp([4, 2], seed=1)
        with pytest.raises(RangeError):
            train(net, data, cfg(loss="ce+kd", epochs=1))


class TestGatingVariance:
    def _task_data(self, seed):
        task = SyntheticTask(kind="piecewise", seed=500 + seed, n=400, dim=8,
                             classes=2, out_dim=4, separation=2.5, map_rank=1)
        return gen_synthetic(task)

    def test_identical_heads_equal_variance(self):
        gen = philox(10, 0)
        data = self._task_data(0)
        layer = inherit_dense(gen.standard_normal((8, 4)), 2, 3)
        rep = gating_grad_variance(layer, data, cfg(batch_size=32))
        # identical heads make gating irrelevant, so both regimes see the
        # same per-batch gradients up to summation order
        assert abs(rep.adaptive_variance - rep.uniform_variance) \
            <= 1e-9 * max(1.0, rep.uniform_variance)

    def test_single_head_paths_identical(self):
        gen = philox(11, 0)
        data = self._task_data(1)
        layer = inherit_dense(gen.standard_normal((8, 4)), 2, 1)
        rep = gating_grad_variance(layer, data, cfg(batch_size=32))
        assert abs(rep.adaptive_variance - rep.uniform_variance) \
            <= 1e-9 * max(1.0, rep.uniform_variance)

    def test_trained_adaptive_gating_reduces_variance(self):
        from inhernet.experiments import perturb_heads
        wins = 0
        w = philox(99, 3).standard_normal((8, 4))
        for seed in range(5):
            data = self._task_data(seed)
            layer = inherit_dense(w, 2, 3, gate_input="input", bias=np.zeros(4))
            net = Network([layer])
            perturb_heads(net, seed, gate_scale=0.5)
            c = cfg(base_lr=0.02, epochs=60, batch_size=32, seed=seed,
                    schedule="constant")
            train(net, data, c)
            rep = gating_grad_variance(layer, data, c)
            wins += rep.adaptive_variance <= rep.uniform_variance
        assert wins >= 4
