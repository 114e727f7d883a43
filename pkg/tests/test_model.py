"""モデル（順伝播・逆伝播・チェックポイント）のテスト."""

import json

import numpy as np
import pytest

from modules.error_handler import CorruptionError, FileError, SchemaMismatchError, ValidationError
from modules.model import (VARIANTS, attention_weights, channel_embedding, forward, init_params, load_checkpoint,
                           pack_batch, predict, predict_proba, predict_proba_batch, save_checkpoint,
                           user_embedding)
from modules.schema import ChannelDescriptor, ChannelizedUser, ChannelSchema, schema_default
from modules.train import gradients
from tests.conftest import SMALL_D_EM, random_users, small_schema, small_vocab

FD_STEP = 1e-4
GRAD_TOLERANCE = 1e-4


def make_params(vocab, num_classes=2, variant="dyattn", seed=0, d=4):
    params = init_params(vocab.schema, vocab, d=d, d_em=SMALL_D_EM, num_classes=num_classes, seed=seed,
                         variant=variant)
    rng = np.random.default_rng(seed + 100)
    # ゼロ初期化のスカラー・ロジットも勾配確認のため乱数にする
    for name in ("rho_p", "rho_q", "rho_k", "attn_logits", "bias"):
        params.tensors[name] = np.asarray(rng.normal(size=params.tensors[name].shape), dtype=float)
    return params


def numerical_gradient(users, params, variant, targets, name):
    array = params.tensors[name]
    grad = np.zeros_like(array)
    for i in range(array.size):
        original = array.flat[i]
        array.flat[i] = original + FD_STEP
        plus, _ = gradients(users, params, variant, targets)
        array.flat[i] = original - FD_STEP
        minus, _ = gradients(users, params, variant, targets)
        array.flat[i] = original
        grad.flat[i] = (plus - minus) / (2 * FD_STEP)
    return grad


class TestGradients:
    """解析的勾配と中心差分の比較."""

    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("num_classes", [2, 3])
    def test_matches_finite_differences(self, variant, num_classes):
        vocab = small_vocab()
        rng = np.random.default_rng(7)
        for instance in range(20):
            params = make_params(vocab, num_classes, variant, seed=instance)
            users = random_users(vocab, 4, rng, num_classes)
            # ソフトラベルでも確認する
            targets = rng.dirichlet(np.ones(num_classes), size=len(users))
            _, analytic = gradients(users, params, variant, targets)
            for name in params.tensors:
                numeric = numerical_gradient(users, params, variant, targets, name)
                scale = np.linalg.norm(analytic[name]) + np.linalg.norm(numeric)
                if scale < 1e-10:
                    continue
                error = np.linalg.norm(analytic[name] - numeric) / scale
                assert error <= GRAD_TOLERANCE, f"{variant} K={num_classes} {name}: {error}"

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_empty_channels_match_finite_differences(self, variant):
        vocab = small_vocab()
        rng = np.random.default_rng(11)
        empty = 0
        for instance in range(10):
            params = make_params(vocab, 2, variant, seed=instance)
            users = random_users(vocab, 4, rng, empty_rate=0.4)
            empty += sum((not u.sparse[0]) + (not u.sparse[2]) + (not np.any(u.dense[1])) for u in users)
            targets = rng.dirichlet(np.ones(2), size=len(users))
            _, analytic = gradients(users, params, variant, targets)
            for name in params.tensors:
                numeric = numerical_gradient(users, params, variant, targets, name)
                scale = np.linalg.norm(analytic[name]) + np.linalg.norm(numeric)
                if scale < 1e-10:
                    continue
                error = np.linalg.norm(analytic[name] - numeric) / scale
                assert error <= GRAD_TOLERANCE, f"{variant} {name}: {error}"
        assert empty > 0

    def test_duplicated_batch_gives_same_gradient(self, vocab, rng):
        params = make_params(vocab, num_classes=3)
        users = random_users(vocab, 5, rng, num_classes=3, empty_rate=0.2)
        loss, grads = gradients(users, params)
        doubled_loss, doubled = gradients(users + users, params)
        assert doubled_loss == pytest.approx(loss, rel=1e-12)
        for name in grads:
            np.testing.assert_allclose(doubled[name], grads[name], rtol=1e-10, atol=1e-14)

    def test_unused_parameters_get_zero_gradient(self, vocab, rng):
        params = make_params(vocab, variant="auto")
        _, grads = gradients(random_users(vocab, 3, rng), params)
        for name in ("rho_p", "rho_q", "rho_k", "attn_logits", "q", "k"):
            assert np.all(grads[name] == 0.0)

    def test_empty_batch(self, vocab):
        with pytest.raises(ValidationError):
            gradients([], make_params(vocab))


class TestReductions:
    """アテンション変種の性質."""

    def test_p_zero_is_plain_sum(self, vocab, rng):
        params = make_params(vocab, variant="dyattn")
        params.tensors["rho_p"] = np.asarray(-np.inf)
        for user in random_users(vocab, 10, rng):
            expected = sum(channel_embedding(user, params, r) for r in range(len(vocab.schema)))
            assert np.max(np.abs(user_embedding(user, params) - expected)) < 1e-9

    def test_single_channel_p_one(self, rng):
        schema = ChannelSchema((ChannelDescriptor(id=0, name="hashtags", kind="sparse", source="tweet"),))
        vocab = small_vocab(schema, sizes=(6,))
        params = init_params(schema, vocab, d=4, d_em=SMALL_D_EM, seed=1)
        params.tensors["rho_p"] = np.asarray(np.inf)
        user = ChannelizedUser(user_id="u", sparse={0: frozenset({1, 3})}, dense={})
        assert attention_weights(user, params)[0] == pytest.approx(1.0, abs=1e-12)

    def test_auto_is_normalize_and_sum(self, vocab, rng):
        params = make_params(vocab, variant="auto")
        for user in random_users(vocab, 10, rng):
            expected = np.zeros(params.d)
            for r in range(len(vocab.schema)):
                e = channel_embedding(user, params, r)
                expected += e / np.linalg.norm(e)
            assert np.max(np.abs(user_embedding(user, params) - expected)) < 1e-9

    def test_scaling_h_scales_norm_term(self, vocab, rng):
        params = make_params(vocab, variant="dyattn")
        params.tensors["rho_p"] = np.asarray(-np.inf)
        scaled = params.copy()
        scaled.tensors["H:0"] = 2.5 * scaled.tensors["H:0"]
        for user in random_users(vocab, 10, rng):
            before = attention_weights(user, params)
            after = attention_weights(user, scaled)
            assert after[0] == pytest.approx(2.5 * before[0], rel=1e-12)
            np.testing.assert_allclose(after[1:], before[1:], rtol=1e-12)

    def test_static_queries_and_keys_give_shared_softmax(self, vocab, rng):
        params = make_params(vocab, variant="dyattn")
        params.tensors["rho_q"] = np.asarray(-np.inf)
        params.tensors["rho_k"] = np.asarray(-np.inf)
        cache = forward(pack_batch(random_users(vocab, 50, rng, empty_rate=0.3), params), params)
        np.testing.assert_allclose(cache.attn_softmax, np.broadcast_to(cache.attn_softmax[0],
                                                                       cache.attn_softmax.shape), atol=1e-15)

    def test_fixedattn_weights_user_independent(self, vocab, rng):
        params = make_params(vocab, variant="fixedattn")
        users = random_users(vocab, 100, rng)
        alpha = forward(pack_batch(users, params), params).alpha
        assert np.allclose(alpha.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(alpha == alpha[0])

    def test_dyattn_softmax_normalized(self, vocab, rng):
        params = make_params(vocab, variant="dyattn")
        cache = forward(pack_batch(random_users(vocab, 1000, rng), params), params)
        assert np.max(np.abs(cache.attn_softmax.sum(axis=1) - 1.0)) < 1e-9

    def test_empty_channel_contributes_nothing(self, vocab):
        params = make_params(vocab)
        user = ChannelizedUser(user_id="u", sparse={0: frozenset(), 2: frozenset()},
                               dense={1: np.zeros(SMALL_D_EM)}, label=0)
        np.testing.assert_array_equal(user_embedding(user, params), np.zeros(params.d))
        probs = predict_proba(user, params)
        assert np.all(np.isfinite(probs))
        assert probs.sum() == pytest.approx(1.0)


class TestPrediction:
    """推論のテスト."""

    def test_binary_head_is_logistic_of_difference(self, vocab, rng):
        params = make_params(vocab, num_classes=2)
        users = random_users(vocab, 5, rng)
        cache = forward(pack_batch(users, params), params)
        margin = cache.logits[:, 1] - cache.logits[:, 0]
        np.testing.assert_allclose(cache.probs[:, 1], 1.0 / (1.0 + np.exp(-margin)), atol=1e-12)

    def test_batch_matches_single(self, vocab, rng):
        params = make_params(vocab, num_classes=3)
        users = random_users(vocab, 7, rng, num_classes=3)
        batch = predict_proba_batch(users, params, batch_size=3)
        single = np.stack([predict_proba(u, params) for u in users])
        np.testing.assert_allclose(batch, single, atol=1e-12)
        np.testing.assert_array_equal(predict(users, params), np.argmax(single, axis=1))

    def test_out_of_range_index(self, vocab):
        params = make_params(vocab)
        user = ChannelizedUser(user_id="bad", sparse={0: frozenset({5})}, dense={})
        with pytest.raises(CorruptionError):
            pack_batch([user], params)
        with pytest.raises(CorruptionError):
            channel_embedding(user, params, 0)

    def test_init_is_seeded(self, vocab):
        a = init_params(vocab.schema, vocab, d=4, d_em=SMALL_D_EM, seed=3)
        b = init_params(vocab.schema, vocab, d=4, d_em=SMALL_D_EM, seed=3)
        assert all(np.array_equal(a.tensors[n], b.tensors[n]) for n in a.tensors)
        assert a.p == a.q == a.k == 0.5

    def test_init_rejects_foreign_vocab(self, vocab):
        with pytest.raises(SchemaMismatchError):
            init_params(schema_default(), vocab)

    def test_unknown_variant(self, vocab):
        with pytest.raises(ValidationError):
            init_params(vocab.schema, vocab, variant="mean")


class TestCheckpoint:
    """チェックポイントのテスト."""

    def test_round_trip(self, vocab, rng, tmp_path):
        params = make_params(vocab, num_classes=3, variant="fixedattn")
        path = tmp_path / "model.json"
        save_checkpoint(params, str(path))
        loaded = load_checkpoint(str(path))

        assert loaded.variant == "fixedattn"
        assert loaded.num_classes == 3
        assert loaded.vocab.tokens == vocab.tokens
        users = random_users(vocab, 5, rng, num_classes=3)
        np.testing.assert_array_equal(predict_proba_batch(users, loaded), predict_proba_batch(users, params))

    def test_variant_tag_differs(self, vocab, tmp_path):
        params = make_params(vocab)
        save_checkpoint(params.with_variant("auto"), str(tmp_path / "a.json"))
        save_checkpoint(params, str(tmp_path / "d.json"))
        assert load_checkpoint(str(tmp_path / "a.json")).variant == "auto"
        assert load_checkpoint(str(tmp_path / "d.json")).variant == "dyattn"

    def test_schema_mismatch(self, vocab, tmp_path):
        path = tmp_path / "model.json"
        save_checkpoint(make_params(vocab), str(path))
        with pytest.raises(SchemaMismatchError):
            load_checkpoint(str(path), schema_default())
        assert load_checkpoint(str(path), small_schema()).schema == small_schema()

    def test_wrong_shape(self, vocab, tmp_path):
        path = tmp_path / "model.json"
        save_checkpoint(make_params(vocab), str(path))
        payload = json.loads(path.read_text(encoding="utf-8"))
        payload["tensors"]["w_out"] = [[0.0]]
        path.write_text(json.dumps(payload), encoding="utf-8")
        with pytest.raises(CorruptionError):
            load_checkpoint(str(path))

    def test_transposed_matrix_rejected(self, vocab, tmp_path):
        path = tmp_path / "model.json"
        params = make_params(vocab, d=4)
        save_checkpoint(params, str(path))
        payload = json.loads(path.read_text(encoding="utf-8"))
        assert np.asarray(payload["tensors"]["W:1"]).shape == (4, SMALL_D_EM)
        payload["tensors"]["W:1"] = params.tensors["W:1"].T.tolist()
        path.write_text(json.dumps(payload), encoding="utf-8")
        with pytest.raises(CorruptionError):
            load_checkpoint(str(path))

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text("{\"format\": \"other\"}", encoding="utf-8")
        with pytest.raises(CorruptionError):
            load_checkpoint(str(path))
        with pytest.raises(FileError):
            load_checkpoint(str(tmp_path / "missing.json"))
