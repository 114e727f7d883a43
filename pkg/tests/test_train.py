"""教師あり学習モジュールのテスト."""

import csv
import logging

import numpy as np
import pytest

from modules.config_handler import TrainConfig
from modules.error_handler import ConfigurationError, NumericalError, ValidationError
from modules.model import init_params, predict
from modules.schema import ChannelizedUser, LabeledDataset, schema_default
from modules.train import (AdamState, adam_step, adam_update, augment_batch, augment_channel_dropout,
                           augment_mixup, augment_sample, classification_loss, decays, fit, gradients, split_dataset,
                           train, write_training_log)
from tests.conftest import SMALL_D_EM, random_users, small_vocab

MC_DRAWS = 10_000

NO_AUGMENTATION = dict(mixup=False, sampling=False, channel_dropout=False)


def separable_dataset(vocab, n=40, seed=0) -> LabeledDataset:
    """チャネル0の特徴がラベルを決めるデータ"""
    rng = np.random.default_rng(seed)
    users = []
    for i in range(n):
        label = i % 2
        users.append(ChannelizedUser(
            user_id=f"s{i}",
            sparse={0: frozenset({label}), 2: frozenset({int(rng.integers(4))})},
            dense={1: rng.normal(size=SMALL_D_EM)},
            label=label,
        ))
    return LabeledDataset(users=users, num_classes=2, provenance="gold", vocab=vocab)


class TestLoss:
    """損失関数のテスト."""

    def test_classification_loss(self):
        assert classification_loss([0.25, 0.75], 1) == pytest.approx(-np.log(0.75))
        assert classification_loss([0.25, 0.75], [0.5, 0.5]) == pytest.approx(-0.5 * np.log(0.25) - 0.5 * np.log(0.75))

    def test_zero_probability_is_clamped(self, caplog):
        with caplog.at_level(logging.WARNING):
            loss = classification_loss([0.0, 1.0], 0)
        assert loss == pytest.approx(-np.log(1e-12))
        assert "clamped" in caplog.text

    def test_non_finite_loss_names_user(self, vocab, rng):
        params = init_params(vocab.schema, vocab, d=4, d_em=SMALL_D_EM)
        params.tensors["w_out"][0, 0] = np.nan
        users = random_users(vocab, 3, rng)
        with pytest.raises(NumericalError) as exc_info:
            gradients(users, params)
        assert exc_info.value.context['user_id'] == "u0"

    def test_unlabeled_users_rejected(self, vocab, rng):
        params = init_params(vocab.schema, vocab, d=4, d_em=SMALL_D_EM)
        user = random_users(vocab, 1, rng)[0].replace()
        user.label = None
        with pytest.raises(ValidationError):
            gradients([user], params)


class TestAdam:
    """Adamのテスト."""

    def test_first_step_moves_by_learning_rate(self):
        tensors = {"x": np.array([1.0, -1.0, 0.5])}
        grads = {"x": np.array([2.0, -0.5, 0.0])}
        updated, state = adam_update(tensors, grads, AdamState(), lr=0.1)
        np.testing.assert_allclose(updated["x"], [0.9, -0.9, 0.5], atol=1e-6)
        assert state.t == 1
        # 入力は変更しない
        np.testing.assert_array_equal(tensors["x"], [1.0, -1.0, 0.5])

    def test_bias_correction_over_two_steps(self):
        beta1, beta2, lr, eps = 0.9, 0.999, 0.01, 1e-8
        x = np.array([0.3])
        g1, g2 = np.array([1.0]), np.array([-3.0])
        tensors, state = adam_update({"x": x}, {"x": g1}, AdamState(), lr, beta1, beta2, eps)
        tensors, state = adam_update(tensors, {"x": g2}, state, lr, beta1, beta2, eps)

        m = beta1 * (1 - beta1) * g1 + (1 - beta1) * g2
        v = beta2 * (1 - beta2) * g1 ** 2 + (1 - beta2) * g2 ** 2
        first = x - lr * g1 / (np.abs(g1) + eps)
        expected = first - (lr / (1 - beta1 ** 2)) * m / (np.sqrt(v / (1 - beta2 ** 2)) + eps)
        np.testing.assert_allclose(tensors["x"], expected, rtol=1e-10)

    def test_missing_gradient_is_zero(self):
        updated, _ = adam_update({"x": np.ones(2)}, {}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(updated["x"], np.ones(2))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            adam_update({"x": np.ones(2)}, {"x": np.ones(3)}, AdamState(), lr=0.1)

    def test_weight_decay_shrinks_matrices_only(self):
        tensors = {"w_out": np.array([2.0, -4.0]), "bias": np.array([2.0]), "rho_p": np.array(1.0)}
        updated, _ = adam_update(tensors, {}, AdamState(), lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(updated["w_out"], [1.9, -3.8])
        np.testing.assert_array_equal(updated["bias"], [2.0])
        assert float(updated["rho_p"]) == 1.0

    def test_decays_matches_initialized_matrices(self, vocab):
        params = init_params(vocab.schema, vocab, d=4, d_em=SMALL_D_EM)
        assert {n for n in params.tensors if decays(n)} == {
            "H:0", "H:2", "W:1", "q", "k", "w_out"}

    def test_adam_step_returns_new_params(self, vocab, rng):
        params = init_params(vocab.schema, vocab, d=4, d_em=SMALL_D_EM)
        _, grads = gradients(random_users(vocab, 4, rng), params)
        updated, state = adam_step(params, grads, AdamState(), lr=0.01)
        assert state.t == 1
        assert not np.array_equal(updated.tensors["w_out"], params.tensors["w_out"])
        assert updated.vocab is params.vocab


class TestAugmentation:
    """データ拡張のテスト."""

    def setup_method(self):
        self.vocab = small_vocab(sizes=(20, 4))
        self.u1 = ChannelizedUser(user_id="a", sparse={0: frozenset(range(10)), 2: frozenset({0})},
                                  dense={1: np.array([1.0, 0.0, 2.0])}, label=0)
        self.u2 = ChannelizedUser(user_id="b", sparse={0: frozenset(range(10, 20)), 2: frozenset({1})},
                                  dense={1: np.array([0.0, 4.0, 2.0])}, label=1)

    def test_mixup_dense_and_label(self, rng):
        mixed, soft = augment_mixup(self.u1, self.u2, rng, num_classes=2, lam=0.25)
        np.testing.assert_allclose(mixed.dense[1], [0.25, 3.0, 2.0])
        np.testing.assert_allclose(soft, [0.25, 0.75])
        assert mixed.user_id == "a~b"
        assert mixed.label == 1
        assert mixed.sparse[0] <= self.u1.sparse[0] | self.u2.sparse[0]

    def test_mixup_extremes(self, rng):
        mixed, _ = augment_mixup(self.u1, self.u2, rng, lam=1.0)
        assert mixed.sparse[0] == self.u1.sparse[0]
        mixed, _ = augment_mixup(self.u1, self.u2, rng, lam=0.0)
        assert mixed.sparse[0] == self.u2.sparse[0]

    def test_sample_partitions_features(self, rng):
        kept, masked = augment_sample(self.u1, rng, rate_max=1.0)
        for r in self.u1.sparse:
            assert kept.sparse[r] | masked[r] == self.u1.sparse[r]
            assert not kept.sparse[r] & masked[r]
        kept, masked = augment_sample(self.u1, rng, rate_max=0.0)
        assert kept.same_features(self.u1)
        assert all(not m for m in masked.values())

    def test_batch_layout(self, rng):
        config = TrainConfig()
        users = [self.u1, self.u2, self.u1]
        batch = augment_batch(users, rng, config, num_classes=2)
        assert len(batch.users) == 6
        assert batch.targets.shape == (6, 2)
        np.testing.assert_allclose(batch.targets.sum(axis=1), 1.0)
        assert len(batch.masked) == 3
        np.testing.assert_array_equal(batch.targets[:3], [[1, 0], [0, 1], [1, 0]])

    def test_unlabeled_batch(self, rng):
        batch = augment_batch([self.u1], rng, TrainConfig(), num_classes=2, labeled=False)
        assert batch.targets is None
        assert len(batch.users) == 1

    @pytest.mark.slow
    def test_sampling_mean_rate(self):
        rng = np.random.default_rng(0)
        rates = np.empty(MC_DRAWS)
        for i in range(MC_DRAWS):
            _, masked = augment_sample(self.u1, rng, rate_max=0.15)
            rates[i] = len(masked[0]) / 10
        bound = 3 * rates.std(ddof=1) / np.sqrt(MC_DRAWS)
        assert abs(rates.mean() - 0.075) < bound

    @pytest.mark.slow
    def test_channel_dropout_mean(self):
        schema = schema_default()
        vocab = small_vocab(schema, sizes=(3,) * len(schema.sparse_ids))
        user = ChannelizedUser(user_id="full", sparse={r: frozenset({0}) for r in vocab.schema.sparse_ids},
                               dense={r: np.ones(4) for r in vocab.schema.dense_ids})
        rng = np.random.default_rng(1)
        counts = np.empty(MC_DRAWS)
        for i in range(MC_DRAWS):
            dropped = augment_channel_dropout(user, rng, prob=0.1)
            counts[i] = (sum(1 for s in dropped.sparse.values() if not s)
                         + sum(1 for v in dropped.dense.values() if not np.any(v)))
        bound = 3 * np.sqrt(22 * 0.1 * 0.9 / MC_DRAWS)
        assert abs(counts.mean() - 22 * 0.1) < bound

    @pytest.mark.slow
    def test_mixup_expected_counts(self):
        rng = np.random.default_rng(2)
        lam = 0.3
        from_first = np.empty(MC_DRAWS)
        from_second = np.empty(MC_DRAWS)
        for i in range(MC_DRAWS):
            mixed, _ = augment_mixup(self.u1, self.u2, rng, lam=lam)
            from_first[i] = len(mixed.sparse[0] & self.u1.sparse[0])
            from_second[i] = len(mixed.sparse[0] & self.u2.sparse[0])
        assert abs(from_first.mean() - 10 * lam) < 3 * np.sqrt(10 * lam * (1 - lam) / MC_DRAWS)
        assert abs(from_second.mean() - 10 * (1 - lam)) < 3 * np.sqrt(10 * lam * (1 - lam) / MC_DRAWS)


class TestSplitAndFit:
    """分割と学習ループのテスト."""

    def test_split_is_seeded_partition(self, dataset):
        split = split_dataset(dataset, 0.1, 0.2, seed=5)
        ids = [u.user_id for part in (split.train, split.val, split.test) for u in part]
        assert sorted(ids) == sorted(u.user_id for u in dataset)
        assert (len(split.train), len(split.val), len(split.test)) == (28, 4, 8)
        again = split_dataset(dataset, 0.1, 0.2, seed=5)
        assert [u.user_id for u in again.test] == [u.user_id for u in split.test]

    def test_zero_epochs_returns_init(self, dataset):
        init = init_params(dataset.schema, dataset.vocab, d=4, d_em=SMALL_D_EM, seed=9)
        params, log = fit(dataset, None, TrainConfig(epochs=0), init)
        assert params is init
        assert log.epochs == []

    def test_empty_training_set(self, dataset):
        with pytest.raises(ConfigurationError):
            fit(dataset.subset([]), None, TrainConfig(epochs=1))

    def test_learns_separable_data(self, vocab):
        data = separable_dataset(vocab)
        config = TrainConfig(epochs=30, batch_size=8, learning_rate=0.05, d=4, **NO_AUGMENTATION)
        params, log = fit(data, None, config)
        accuracy = np.mean(predict(data.users, params) == data.labels)
        assert accuracy >= 0.9
        assert log.epochs[-1].train_loss < log.epochs[0].train_loss
        assert log.best_epoch == 30

    def test_full_batch_loss_decreases(self, vocab):
        data = separable_dataset(vocab)
        config = TrainConfig(epochs=10, batch_size=len(data), learning_rate=1e-3, d=4,
                             weight_decay=0.0, **NO_AUGMENTATION)
        _, log = fit(data, None, config)
        losses = [r.train_loss for r in log.epochs]
        increases = sum(later > earlier for earlier, later in zip(losses, losses[1:]))
        assert increases <= 1
        assert losses[-1] < losses[0]

    def test_deterministic(self, dataset):
        config = TrainConfig(epochs=2, batch_size=8, d=4)
        first, _ = fit(dataset, None, config)
        second, _ = fit(dataset, None, config)
        assert all(np.array_equal(first.tensors[n], second.tensors[n]) for n in first.tensors)

    def test_variant_is_applied_to_init(self, dataset):
        init = init_params(dataset.schema, dataset.vocab, d=4, d_em=SMALL_D_EM)
        params, _ = fit(dataset, None, TrainConfig(epochs=1, d=4, variant="auto"), init)
        assert params.variant == "auto"
        assert init.variant == "dyattn"

    def test_train_reports_test_metrics(self, dataset, tmp_path):
        config = TrainConfig(epochs=3, batch_size=8, d=4)
        params, log = train(dataset, config)
        assert len(log.epochs) == 3
        assert 1 <= log.best_epoch <= 3
        assert log.test_metrics.n == 4
        assert all(r.val_acc is not None for r in log.epochs)

        path = tmp_path / "log.csv"
        write_training_log(log, str(path))
        with open(path, newline='', encoding='utf-8') as f:
            rows = list(csv.DictReader(f))
        assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
        assert set(rows[0]) == {"epoch", "train_loss", "val_acc", "val_f1", "seconds"}
