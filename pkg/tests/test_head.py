import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occlumask.head import (
    ClassifierHead,
    TrainConfig,
    evaluate,
    grad_check,
    load_head,
    loss_and_grad,
    mean_loss,
    predict,
    predict_batch,
    save_head,
    train_head,
)
from occlumask.tensorio import ContainerError, read_features, write_features


def random_head(rng, k, dim, scale=1.0):
    return ClassifierHead(rng.standard_normal((k, dim)) * scale, rng.standard_normal(k) * scale)


def loop_loss_and_grad(w, b, x, y):
    """Per-sample scalar reference for mean cross-entropy."""
    k, dim = w.shape
    loss, gw, gb = 0.0, np.zeros((k, dim)), np.zeros(k)
    for xi, yi in zip(x, y):
        logits = [float(np.dot(w[c], xi) + b[c]) for c in range(k)]
        top = max(logits)
        exps = [math.exp(v - top) for v in logits]
        total = sum(exps)
        loss += math.log(total) - (logits[yi] - top)
        for c in range(k):
            p = exps[c] / total - (1.0 if c == yi else 0.0)
            gw[c] += p * xi
            gb[c] += p
    n = len(y)
    return loss / n, gw / n, gb / n


class TestLoss:
    @pytest.mark.parametrize("k", [2, 3, 8, 100])
    def test_zero_head_loss_is_log_k(self, k):
        x = np.random.default_rng(k).standard_normal((5, 4))
        assert math.isclose(mean_loss(ClassifierHead.zeros(k, 4), x, np.arange(5) % k), math.log(k),
                            rel_tol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_reference(self, seed):
        rng = np.random.default_rng(seed)
        w, b = rng.standard_normal((4, 6)), rng.standard_normal(4)
        x, y = rng.standard_normal((7, 6)), rng.integers(0, 4, 7)
        loss, gw, gb = loss_and_grad(w, b, x, y)
        rl, rgw, rgb = loop_loss_and_grad(w, b, x, y)
        assert math.isclose(loss, rl, rel_tol=1e-12)
        assert np.allclose(gw, rgw, atol=1e-12) and np.allclose(gb, rgb, atol=1e-12)

    def test_duplicated_batch_same_gradient(self):
        rng = np.random.default_rng(9)
        w, b = rng.standard_normal((3, 5)), rng.standard_normal(3)
        x, y = rng.standard_normal((4, 5)), rng.integers(0, 3, 4)
        one = loss_and_grad(w, b, x, y)
        two = loss_and_grad(w, b, np.concatenate([x, x]), np.concatenate([y, y]))
        assert math.isclose(one[0], two[0], rel_tol=1e-12)
        assert np.allclose(one[1], two[1], atol=1e-14) and np.allclose(one[2], two[2], atol=1e-14)

    def test_extreme_logits_finite(self):
        head = ClassifierHead(np.array([[1e4], [-1e4]]), np.zeros(2))
        assert np.isfinite(mean_loss(head, np.array([[1.0]]), np.array([1])))


class TestGradCheck:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 5), st.integers(1, 16), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_random_configs(self, k, dim, n, seed):
        rng = np.random.default_rng(seed)
        head = random_head(rng, k, dim, scale=0.5)
        batch = (rng.standard_normal((n, dim)), rng.integers(0, k, n))
        assert grad_check(head, batch) < 1e-4

    def test_zero_head(self):
        rng = np.random.default_rng(0)
        assert grad_check(ClassifierHead.zeros(3, 4), (rng.standard_normal((5, 4)), np.arange(5) % 3)) < 1e-4

    def test_detects_wrong_gradient(self, monkeypatch):
        import occlumask.head as head_mod
        real = head_mod.loss_and_grad

        def broken(w, b, x, y, with_grad=True):
            out = real(w, b, x, y, with_grad)
            return out if not with_grad else (out[0], out[1] * 1.1, out[2])

        monkeypatch.setattr(head_mod, "loss_and_grad", broken)
        rng = np.random.default_rng(1)
        head = random_head(rng, 3, 4)
        assert grad_check(head, (rng.standard_normal((6, 4)) * 3, rng.integers(0, 3, 6))) > 1e-2


class TestTraining:
    @staticmethod
    def blobs(k=4, per=30, dim=8, seed=0):
        rng = np.random.default_rng(seed)
        centres = rng.standard_normal((k, dim)) * 4
        y = np.repeat(np.arange(k), per)
        return (centres[y] + rng.standard_normal((k * per, dim)) * 0.3).astype(np.float32), y

    def test_separable_reaches_perfect_accuracy(self):
        x, y = self.blobs()
        head = train_head(x, y, 4, TrainConfig(epochs=50, batch_size=16, learning_rate=0.05))
        assert evaluate(head, x, y) == 1.0

    def test_loss_decreases(self):
        x, y = self.blobs(seed=3)
        history = []
        train_head(x, y, 4, TrainConfig(epochs=20, batch_size=32), history)
        assert len(history) == 20
        assert history[-1] < history[0] < math.log(4)

    def test_deterministic(self):
        x, y = self.blobs(seed=1)
        cfg = TrainConfig(epochs=5, batch_size=7, shuffle_seed=11)
        assert train_head(x, y, 4, cfg) == train_head(x, y, 4, cfg)

    def test_shuffle_seed_matters(self):
        x, y = self.blobs(seed=1)
        a = train_head(x, y, 4, TrainConfig(epochs=2, batch_size=7, shuffle_seed=1))
        b = train_head(x, y, 4, TrainConfig(epochs=2, batch_size=7, shuffle_seed=2))
        assert a != b

    def test_single_full_batch_matches_manual_momentum(self):
        x, y = self.blobs(k=3, per=4, dim=5, seed=2)
        cfg = TrainConfig(epochs=3, batch_size=1000, learning_rate=0.1, momentum=0.5)
        head = train_head(x, y, 3, cfg)
        w, b = np.zeros((3, 5)), np.zeros(3)
        vw, vb = np.zeros_like(w), np.zeros_like(b)
        for _ in range(3):
            _, gw, gb = loop_loss_and_grad(w, b, x.astype(np.float64), y)
            vw, vb = 0.5 * vw + gw, 0.5 * vb + gb
            w, b = w - 0.1 * vw, b - 0.1 * vb
        assert np.allclose(head.weights, w, atol=1e-5) and np.allclose(head.bias, b, atol=1e-5)

    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(learning_rate=0.0)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            train_head(np.zeros((2, 3)), np.array([0, 5]), 3)


class TestPredict:
    def test_tie_breaks_to_lowest_index(self):
        label, probs = predict(ClassifierHead.zeros(4, 3), np.ones(3))
        assert label == 0 and np.allclose(probs, 0.25)

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(0)
        _, probs = predict(random_head(rng, 6, 5), rng.standard_normal(5))
        assert math.isclose(probs.sum(), 1.0, rel_tol=1e-12)

    def test_batch_agrees_with_single(self):
        rng = np.random.default_rng(1)
        head = random_head(rng, 5, 4)
        x = rng.standard_normal((10, 4))
        assert predict_batch(head, x).tolist() == [predict(head, xi)[0] for xi in x]

    def test_evaluate(self):
        head = ClassifierHead(np.array([[1.0], [-1.0]]), np.zeros(2))
        assert evaluate(head, np.array([[1.0], [-1.0], [2.0], [3.0]]), np.array([0, 1, 1, 1])) == 0.5

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            predict(ClassifierHead.zeros(2, 3), np.ones(4))


class TestSerialization:
    def test_head_roundtrip(self):
        head = random_head(np.random.default_rng(0), 3, 7)
        assert load_head(save_head(head)) == head

    def test_head_rejects_weights_file(self):
        with pytest.raises(ContainerError):
            load_head(b"VITW" + save_head(ClassifierHead.zeros(2, 2))[4:])

    def test_features_roundtrip(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((5, 9)).astype(np.float32)
        labels = np.array([0, 3, 2, 1, 65535])
        got_f, got_l = read_features(write_features(f, labels))
        assert got_f.tobytes() == f.tobytes() and got_l.tolist() == labels.tolist()
