"""合成母集団とベイズオラクルのテスト."""

import itertools

import numpy as np
import pydantic
import pytest

from modules.error_handler import FileError, ValidationError
from modules.schema import ChannelizedUser
from modules.simgen import (GenerativeSpec, SyntheticChannel, _fixed_set_log_likelihood, bayes_oracle_accuracy,
                            bayes_oracle_predict, calibrated_generative_spec, class_log_likelihoods,
                            default_generative_spec, load_generative_spec, sample_population,
                            save_generative_spec)
from tests.conftest import small_schema


def one_draw_spec() -> GenerativeSpec:
    return GenerativeSpec(
        priors=[0.5, 0.5],
        channels=[SyntheticChannel(name="hashtags", kind="sparse", activity="fixed", rate=1,
                                   theta=[[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]])],
        d_em=2,
    )


class TestGenerativeSpec:
    """生成仕様の検証."""

    def test_priors_must_sum_to_one(self):
        with pytest.raises(pydantic.ValidationError):
            GenerativeSpec(priors=[0.5, 0.6], channels=one_draw_spec().channels)

    def test_theta_shape(self):
        channel = SyntheticChannel(name="h", kind="sparse", theta=[[1.0]])
        with pytest.raises(pydantic.ValidationError):
            GenerativeSpec(priors=[0.5, 0.5], channels=[channel])

    def test_fixed_activity_needs_integer_draws(self):
        channel = SyntheticChannel(name="h", kind="sparse", activity="fixed", rate=1.5,
                                   theta=[[0.5, 0.5], [0.5, 0.5]])
        with pytest.raises(pydantic.ValidationError):
            GenerativeSpec(priors=[0.5, 0.5], channels=[channel])

    def test_dense_mean_shape(self):
        channel = SyntheticChannel(name="text", kind="dense", mean=[[0.0], [1.0]])
        with pytest.raises(pydantic.ValidationError):
            GenerativeSpec(priors=[0.5, 0.5], channels=[channel], d_em=2)

    def test_schema_and_vocabulary(self):
        spec = default_generative_spec(small_schema(), d_em=4, vocab_size=7)
        schema = spec.schema()
        assert schema.names() == small_schema().names()
        assert schema.dense_ids == [1]
        vocab = spec.vocabulary()
        assert vocab.size(0) == 7
        assert vocab.token(2, 3) == "t3"

    def test_uninformative_channels(self):
        spec = default_generative_spec(small_schema(), d_em=4, informative_channels=["hashtags"], seed=2)
        hashtags, text, mentions = spec.channels
        assert hashtags.theta[0] != hashtags.theta[1]
        assert mentions.theta[0] == mentions.theta[1]
        assert text.mean == [[0.0] * 4, [0.0] * 4]

    def test_file_round_trip(self, tmp_path):
        spec = default_generative_spec(small_schema(), d_em=3, num_classes=3, eta=0.1)
        path = tmp_path / "spec.json"
        save_generative_spec(spec, str(path))
        assert load_generative_spec(str(path)) == spec

    def test_load_errors(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text("{\"priors\": [1.0]}", encoding="utf-8")
        with pytest.raises(ValidationError):
            load_generative_spec(str(path))
        with pytest.raises(FileError):
            load_generative_spec(str(tmp_path / "missing.json"))


class TestSamplePopulation:
    """sample_populationのテスト."""

    def setup_method(self):
        self.spec = default_generative_spec(small_schema(), separation=2.0, d_em=4, vocab_size=10)

    def test_deterministic(self):
        first, anchors_a = sample_population(self.spec, 30, seed=5)
        second, anchors_b = sample_population(self.spec, 30, seed=5)
        assert [u.label for u in first] == [u.label for u in second]
        assert all(a.same_features(b) for a, b in zip(first, second))
        assert anchors_a == anchors_b

    def test_ids_and_provenance(self):
        dataset, _ = sample_population(self.spec, 12)
        assert dataset.provenance == "synthetic"
        assert [u.user_id for u in dataset][:2] == ["u000000", "u000001"]
        assert all(u.meta["class"] == str(u.label) for u in dataset)

    def test_noise_free_anchors(self):
        dataset, anchors = sample_population(self.spec, 200, seed=1)
        labels = {u.user_id: u.label for u in dataset}
        assert [a.party for a in anchors] == ["party0", "party1"]
        listed = []
        for c, anchor in enumerate(anchors):
            for user_id in anchor.follower_ids + anchor.retweeter_ids:
                assert labels[user_id] == c
                listed.append(user_id)
        assert sorted(listed) == sorted(labels)
        assert anchors[0].follower_ids and anchors[0].retweeter_ids

    def test_noisy_anchors(self):
        spec = self.spec.model_copy(update={"eta": 0.3})
        dataset, anchors = sample_population(spec, 400, seed=1)
        labels = {u.user_id: u.label for u in dataset}
        wrong = sum(labels[u] != c for c, a in enumerate(anchors) for u in a.follower_ids + a.retweeter_ids)
        assert 60 < wrong < 180

    def test_invalid_size(self):
        with pytest.raises(ValidationError):
            sample_population(self.spec, 0)


class TestBayesOracle:
    """オラクルのテスト."""

    def test_one_draw_is_argmax_of_theta(self):
        spec = one_draw_spec()
        for j, expected in [(0, 0), (1, 1), (2, 1)]:
            user = ChannelizedUser(user_id="u", sparse={0: frozenset({j})}, dense={})
            assert bayes_oracle_predict(spec, user) == expected

    def test_fixed_set_likelihood_matches_enumeration(self):
        theta = np.array([0.5, 0.3, 0.15, 0.05])
        draws = 3
        for present in [(0,), (0, 2), (1, 2, 3)]:
            expected = sum(np.prod(theta[list(seq)])
                           for seq in itertools.product(range(theta.size), repeat=draws)
                           if set(seq) == set(present))
            assert np.exp(_fixed_set_log_likelihood(theta, present, draws)) == pytest.approx(expected)

    def test_poisson_likelihood(self):
        theta = [[0.5, 0.3, 0.2], [0.2, 0.2, 0.6]]
        spec = GenerativeSpec(priors=[0.4, 0.6],
                              channels=[SyntheticChannel(name="h", kind="sparse", theta=theta, rate=2.0)])
        user = ChannelizedUser(user_id="u", sparse={0: frozenset({0, 2})}, dense={})
        scores = class_log_likelihoods(spec, user)
        for c, prior in enumerate(spec.priors):
            mass = 2.0 * np.asarray(theta[c])
            expected = (np.log(prior) + np.log(1 - np.exp(-mass[0])) + np.log(1 - np.exp(-mass[2]))
                        - mass[1])
            assert scores[c] == pytest.approx(expected)

    def test_dense_nearest_mean(self):
        spec = GenerativeSpec(priors=[0.5, 0.5], d_em=2, channels=[
            SyntheticChannel(name="text", kind="dense", mean=[[1.0, 0.0], [-1.0, 0.0]], sigma=0.5)])
        near_second = ChannelizedUser(user_id="u", sparse={}, dense={0: np.array([-0.8, 0.3])})
        assert bayes_oracle_predict(spec, near_second) == 1

    def test_separated_population(self):
        spec = default_generative_spec(small_schema(), separation=4.0, d_em=16, seed=3)
        dataset, _ = sample_population(spec, 300, seed=4)
        assert bayes_oracle_accuracy(spec, dataset) > 0.9

    def test_empty_dataset(self):
        spec = one_draw_spec()
        dataset, _ = sample_population(spec, 1)
        with pytest.raises(ValidationError):
            bayes_oracle_accuracy(spec, dataset.subset([]))


def test_oracle_accuracy_by_enumeration():
    spec = GenerativeSpec(priors=[0.5, 0.5], channels=[
        SyntheticChannel(name="h", kind="sparse", activity="fixed", rate=1, theta=[[0.9, 0.1], [0.1, 0.9]])])
    accuracy = 0.0
    for c in range(2):
        for j in range(2):
            user = ChannelizedUser(user_id="u", sparse={0: frozenset({j})}, dense={})
            if bayes_oracle_predict(spec, user) == c:
                accuracy += spec.priors[c] * spec.channels[0].theta[c][j]
    assert accuracy == pytest.approx(0.9, abs=1e-12)


def test_class_counts_follow_priors():
    spec = default_generative_spec(small_schema(), d_em=2, vocab_size=5)
    dataset, _ = sample_population(spec, 2000, seed=8)
    sigma = np.sqrt(2000 * 0.25)
    assert all(abs(count - 1000) <= 3 * sigma for count in dataset.class_counts())


class TestCalibration:
    """オラクル精度の帯への調整のテスト."""

    def test_lands_inside_band(self):
        spec, accuracy = calibrated_generative_spec(small_schema(), low=0.80, high=0.95, sample_size=400,
                                                    d_em=4, vocab_size=8, seed=5)
        assert 0.80 <= accuracy <= 0.95
        dataset, _ = sample_population(spec, 400, seed=5)
        assert bayes_oracle_accuracy(spec, dataset) == accuracy

    def test_keeps_generator_arguments(self):
        spec, _ = calibrated_generative_spec(small_schema(), low=0.80, high=0.95, sample_size=400,
                                             d_em=4, vocab_size=8, eta=0.1, seed=5)
        assert spec.eta == 0.1
        assert spec.d_em == 4

    @pytest.mark.parametrize("low, high", [(0.9, 0.8), (0.0, 0.5), (0.5, 1.2)])
    def test_invalid_band(self, low, high):
        with pytest.raises(ValidationError):
            calibrated_generative_spec(small_schema(), low=low, high=high)

    def test_unreachable_band(self):
        with pytest.raises(ValidationError):
            calibrated_generative_spec(small_schema(), low=0.999, high=1.0, sample_size=200,
                                       max_separation=0.01, d_em=2, vocab_size=4)
