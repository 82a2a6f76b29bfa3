import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histobench.data import synth_center_blob
from histobench.errors import ParameterError, ShapeError, TrainingDivergedError
from histobench.nn import GraphBuilder, build_mlp_baseline
from histobench.optim import (
    IMPROVEMENT_EPS,
    SEED_AUGMENT,
    SEED_DROPOUT,
    SEED_INIT,
    SEED_SHUFFLE,
    SEED_SPLIT,
    AdamState,
    TrainingConfig,
    adam_step,
    bce_loss,
    evaluate,
    train,
)


def small_mlp(seed=0, hidden=8):
    """Full-size input, tiny hidden layer: cheap but real."""
    return build_mlp_baseline(seed=seed, hidden=hidden)


def fingerprint(net):
    return {k: v.copy() for k, v in net.params().items()}


def same_params(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


class TestTrainingConfig:
    def test_defaults_follow_recipe(self):
        cfg = TrainingConfig(learning_rate=0.001)
        assert cfg.beta1 == 0.9 and cfg.beta2 == 0.999 and cfg.epsilon == 1e-8
        assert cfg.patience == 5 and cfg.batch_size == 64 and cfg.augment

    @pytest.mark.parametrize("kwargs", [
        {"learning_rate": 0.0},
        {"learning_rate": -1e-3},
        {"learning_rate": 1e-3, "epochs": 0},
        {"learning_rate": 1e-3, "patience": 0},
        {"learning_rate": 1e-3, "batch_size": 0},
        {"learning_rate": 1e-3, "beta1": 1.0},
        {"learning_rate": 1e-3, "beta2": 0.0},
        {"learning_rate": 1e-3, "epsilon": 0.0},
        {"learning_rate": 1e-3, "validation_fraction": 0.0},
        {"learning_rate": 1e-3, "validation_fraction": 1.0},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ParameterError):
            TrainingConfig(**kwargs)

    def test_seed_offsets_are_distinct(self):
        offsets = {SEED_SHUFFLE, SEED_INIT, SEED_DROPOUT, SEED_AUGMENT, SEED_SPLIT}
        assert len(offsets) == 5


class TestBceLoss:
    def test_known_value(self):
        p = np.array([0.9, 0.2])
        y = np.array([1, 0])
        loss, _ = bce_loss(p, y)
        expected = -(math.log(0.9) + math.log(0.8)) / 2
        assert abs(loss - expected) < 1e-12

    def test_perfect_prediction_is_near_zero(self):
        loss, _ = bce_loss(np.array([1.0, 0.0]), np.array([1, 0]))
        assert loss < 1e-6

    def test_clamp_bounds_worst_case(self):
        loss, _ = bce_loss(np.array([0.0]), np.array([1]))
        assert abs(loss - (-math.log(1e-7))) < 1e-9

    def test_gradient_matches_finite_differences(self, rng):
        p = rng.uniform(0.05, 0.95, size=12)
        y = (rng.random(12) < 0.5).astype(np.int64)
        _, grad = bce_loss(p, y)
        eps = 1e-7
        for i in range(12):
            pp, pm = p.copy(), p.copy()
            pp[i] += eps
            pm[i] -= eps
            fd = (bce_loss(pp, y)[0] - bce_loss(pm, y)[0]) / (2 * eps)
            assert abs(grad[i] - fd) / max(abs(fd), 1e-6) < 1e-4

    def test_gradient_zero_outside_clamp(self):
        p = np.array([0.0, 1.0, 1e-9, 1.0 - 1e-9])
        y = np.array([1, 0, 1, 0])
        _, grad = bce_loss(p, y)
        np.testing.assert_array_equal(grad, np.zeros(4))

    def test_gradient_shape_follows_input(self):
        p = np.array([[0.3], [0.7]])
        _, grad = bce_loss(p, np.array([0, 1]))
        assert grad.shape == (2, 1)

    def test_length_mismatch(self):
        with pytest.raises(ParameterError):
            bce_loss(np.array([0.5]), np.array([1, 0]))

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            bce_loss(np.array([]), np.array([]))

    @given(st.integers(1, 30), st.integers(0, 10_000))
    @settings(max_examples=30)
    def test_loss_nonnegative_and_grad_sign(self, n, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.01, 0.99, size=n)
        y = (rng.random(n) < 0.5).astype(np.int64)
        loss, grad = bce_loss(p, y)
        assert loss >= 0.0
        # pushing a probability toward its label lowers the loss
        assert ((grad < 0) == (y == 1)).all()


class TestAdam:
    def reference_steps(self, theta0, grads, cfg):
        m = v = 0.0
        theta = theta0
        for t, g in enumerate(grads, start=1):
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** t)
            vhat = v / (1 - cfg.beta2 ** t)
            theta = theta - cfg.learning_rate * mhat / (math.sqrt(vhat) + cfg.epsilon)
        return theta

    def test_matches_reference_trajectory(self):
        cfg = TrainingConfig(learning_rate=0.05, beta1=0.9, beta2=0.999)
        params = {"w": np.array([1.5])}
        state = AdamState.for_params(params)
        gs = [0.3, -0.7, 0.2, 0.9]
        for g in gs:
            adam_step(params, {"w": np.array([g])}, state, cfg)
        assert abs(params["w"][0] - self.reference_steps(1.5, gs, cfg)) < 1e-12
        assert state.step == 4

    def test_first_step_is_signed_learning_rate(self):
        # bias correction makes |m_hat / sqrt(v_hat)| = 1 on step one
        cfg = TrainingConfig(learning_rate=0.01, epsilon=1e-12)
        params = {"w": np.zeros(3)}
        state = AdamState.for_params(params)
        adam_step(params, {"w": np.array([5.0, -0.002, 800.0])}, state, cfg)
        np.testing.assert_allclose(params["w"], [-0.01, 0.01, -0.01], rtol=1e-6)

    def test_updates_in_place(self):
        params = {"w": np.ones(2)}
        arr = params["w"]
        state = AdamState.for_params(params)
        adam_step(params, {"w": np.ones(2)}, state, TrainingConfig(learning_rate=0.1))
        assert params["w"] is arr
        assert not np.array_equal(arr, np.ones(2))

    def test_missing_gradient(self):
        params = {"w": np.ones(2), "b": np.ones(1)}
        state = AdamState.for_params(params)
        with pytest.raises(ParameterError):
            adam_step(params, {"w": np.ones(2)}, state, TrainingConfig(learning_rate=0.1))

    def test_gradient_shape_mismatch(self):
        params = {"w": np.ones(2)}
        state = AdamState.for_params(params)
        with pytest.raises(ShapeError):
            adam_step(params, {"w": np.ones(3)}, state, TrainingConfig(learning_rate=0.1))


@pytest.fixture(scope="module")
def tiny_ds():
    return synth_center_blob(40, noise_level=0.1, seed=5)


class TestEvaluate:
    def test_scores_in_dataset_order(self, tiny_ds):
        net = small_mlp()
        _, s1 = evaluate(net, tiny_ds, batch_size=7)
        _, s2 = evaluate(net, tiny_ds, batch_size=40)
        np.testing.assert_allclose(s1, s2)
        assert s1.shape == (40,)

    def test_loss_consistent_with_bce(self, tiny_ds):
        net = small_mlp()
        loss, scores = evaluate(net, tiny_ds)
        assert abs(loss - bce_loss(scores, tiny_ds.labels)[0]) < 1e-12

    def test_empty_dataset_rejected(self, tiny_ds):
        with pytest.raises(ParameterError):
            evaluate(small_mlp(), tiny_ds.subset([]))


class TestTrainLoop:
    def test_loss_decreases_on_learnable_task(self, tiny_ds):
        net = small_mlp(seed=1, hidden=16)
        cfg = TrainingConfig(learning_rate=5e-4, epochs=6, patience=6,
                             batch_size=8, seed=3, validation_fraction=0.2)
        net, hist = train(net, tiny_ds, cfg)
        assert net.trained
        assert hist.records[-1].train_loss < hist.records[0].train_loss
        assert hist.records[0].epoch == 1 and hist.records[-1].epoch == len(hist.records)

    def test_seed_reproducibility(self, tiny_ds):
        runs = []
        for _ in range(2):
            net = small_mlp(seed=2)
            cfg = TrainingConfig(learning_rate=1e-4, epochs=2, batch_size=16, seed=9)
            net, hist = train(net, tiny_ds, cfg)
            runs.append((fingerprint(net), [r.train_loss for r in hist.records]))
        assert same_params(runs[0][0], runs[1][0])
        assert runs[0][1] == runs[1][1]

    def test_different_seed_changes_trajectory(self, tiny_ds):
        losses = []
        for seed in (1, 2):
            net = small_mlp(seed=2)
            cfg = TrainingConfig(learning_rate=1e-4, epochs=1, batch_size=16, seed=seed)
            _, hist = train(net, tiny_ds, cfg)
            losses.append(hist.records[0].train_loss)
        assert losses[0] != losses[1]

    def test_forced_early_stop_and_restore(self, tiny_ds):
        net = small_mlp(seed=4)
        cfg = TrainingConfig(learning_rate=1e-4, epochs=50, patience=2,
                             batch_size=16, seed=1)
        forced = [0.5, 0.4, 0.41, 0.42, 0.43]
        snaps = {}

        def forced_val(n, epoch):
            snaps[epoch] = fingerprint(n)
            return forced[epoch - 1], 0.5

        net, hist = train(net, tiny_ds, cfg, val_metrics_fn=forced_val)
        # patience 2: epochs 3 and 4 fail to improve on 0.4, stop at 4
        assert hist.stop_reason == "early_stopping"
        assert len(hist.records) == 4
        assert hist.best_epoch == 2 and hist.best_val_loss == 0.4
        assert same_params(fingerprint(net), snaps[2])
        assert not same_params(fingerprint(net), snaps[4])

    def test_improvement_below_eps_does_not_reset_patience(self, tiny_ds):
        net = small_mlp(seed=4)
        cfg = TrainingConfig(learning_rate=1e-4, epochs=50, patience=1,
                             batch_size=16, seed=1)
        forced = [0.5, 0.5 - IMPROVEMENT_EPS / 2]
        net, hist = train(net, tiny_ds, cfg,
                          val_metrics_fn=lambda n, e: (forced[e - 1], 0.5))
        assert hist.stop_reason == "early_stopping"
        assert len(hist.records) == 2 and hist.best_epoch == 1

    def test_max_epochs_stop_reason(self, tiny_ds):
        net = small_mlp(seed=4)
        cfg = TrainingConfig(learning_rate=1e-4, epochs=2, batch_size=16, seed=1)
        _, hist = train(net, tiny_ds, cfg)
        assert hist.stop_reason == "max_epochs" and len(hist.records) == 2

    def test_best_weights_restored_on_max_epochs(self, tiny_ds):
        net = small_mlp(seed=4)
        cfg = TrainingConfig(learning_rate=1e-4, epochs=3, patience=5,
                             batch_size=16, seed=1)
        forced = [0.3, 0.6, 0.5]
        snaps = {}

        def forced_val(n, epoch):
            snaps[epoch] = fingerprint(n)
            return forced[epoch - 1], 0.5

        net, hist = train(net, tiny_ds, cfg, val_metrics_fn=forced_val)
        assert hist.stop_reason == "max_epochs" and hist.best_epoch == 1
        assert same_params(fingerprint(net), snaps[1])

    def test_non_finite_validation_raises(self, tiny_ds):
        net = small_mlp(seed=4)
        cfg = TrainingConfig(learning_rate=1e-4, epochs=3, batch_size=16, seed=1)
        with pytest.raises(TrainingDivergedError):
            train(net, tiny_ds, cfg, val_metrics_fn=lambda n, e: (math.nan, 0.5))

    def test_non_finite_training_loss_raises(self, tiny_ds):
        bad = tiny_ds.images(np.arange(len(tiny_ds)))
        bad[:, 0, 0, 0] = math.nan

        class Store:
            def read(self, idx):
                return bad[idx]

        ds = type(tiny_ds)(Store(), tiny_ds.labels, None, "memory")
        # relu would mask a NaN to 0, so go straight from flatten to the head
        g = GraphBuilder((3, 96, 96))
        f = g.flatten(0)
        o = g.dense(f, 1)
        g.sigmoid(o)
        net = g.build("linear", 0)
        cfg = TrainingConfig(learning_rate=1e-4, epochs=1, batch_size=40, seed=1)
        with pytest.raises(TrainingDivergedError):
            train(net, ds, cfg)

    def test_log_stream_jsonl(self, tiny_ds):
        net = small_mlp(seed=4)
        cfg = TrainingConfig(learning_rate=1e-4, epochs=2, batch_size=16, seed=1)
        log = io.StringIO()
        _, hist = train(net, tiny_ds, cfg, log_stream=log)
        lines = [json.loads(line) for line in log.getvalue().splitlines()]
        assert [d["epoch"] for d in lines] == [1, 2]
        for d, rec in zip(lines, hist.records):
            assert d["train_loss"] == rec.train_loss
            assert d["val_loss"] == rec.val_loss
            assert set(d) == {"epoch", "train_loss", "val_loss", "val_accuracy"}

    def test_external_adam_state_persists(self, tiny_ds):
        net = small_mlp(seed=4)
        cfg = TrainingConfig(learning_rate=1e-4, epochs=2, batch_size=20, seed=1)
        adam = AdamState.for_params(net.params())
        train(net, tiny_ds, cfg, adam_state=adam)
        # 40 samples, val fraction 0.1 -> 36 train -> 2 batches x 2 epochs
        assert adam.step == 4
        assert any(v.any() for v in adam.v.values())

    def test_empty_dataset_rejected(self, tiny_ds):
        with pytest.raises(ParameterError):
            train(small_mlp(), tiny_ds.subset([]),
                  TrainingConfig(learning_rate=1e-3, epochs=1))

    def test_augment_changes_trajectory(self, tiny_ds):
        losses = []
        for augment in (False, True):
            net = small_mlp(seed=2)
            cfg = TrainingConfig(learning_rate=1e-4, epochs=1, batch_size=16,
                                 seed=3, augment=augment)
            _, hist = train(net, tiny_ds, cfg)
            losses.append(hist.records[0].train_loss)
        assert losses[0] != losses[1]

    def test_dropout_network_trains(self):
        # exercises the dropout rng plumbing end to end
        g = GraphBuilder((3, 96, 96))
        f = g.flatten(0)
        d = g.dense(f, 8, name="h")
        r = g.relu(d)
        dr = g.dropout(r, 0.5, name="drop")
        o = g.dense(dr, 1)
        g.sigmoid(o)
        net = g.build("dropnet", 0)
        ds = synth_center_blob(20, seed=8)
        cfg = TrainingConfig(learning_rate=1e-3, epochs=2, batch_size=10, seed=2)
        net, hist = train(net, ds, cfg)
        assert len(hist.records) == 2
