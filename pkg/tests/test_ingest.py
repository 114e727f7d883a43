"""チャネル抽出モジュールのテスト."""

import numpy as np
import pytest

from modules.error_handler import DimensionError, EmbeddingLookupError
from modules.ingest import (FileEmbeddingProvider, HashingEmbeddingProvider, channelize_archive, channelize_record,
                            count_tweets, document_key, embed_text, extract_channels, registered_domain,
                            to_bag_records, to_dataset, to_users)
from modules.models import RawUserRecord, TimeWindow
from modules.schema import build_vocabulary, schema_default


def make_record(**overrides) -> RawUserRecord:
    data = {
        "user_id": "u1",
        "bio": "my own bio",
        "follower_ids": ["f1", "f2"],
        "friend_ids": ["g1"],
        "tweets": [
            {"text": "Go #Vote now @Alice https://www.nytimes.com/a", "created_at": "2020-01-01T00:00:00Z"},
            {"text": "", "created_at": "2020-02-01T00:00:00Z", "kind": "retweet",
             "counterpart": {"user_id": "r1", "bio": "retweetee bio", "text": "read https://bbc.co.uk/x #News"}},
            {"text": "agree #Vote", "created_at": "2021-03-01T00:00:00Z", "kind": "reply",
             "counterpart": {"user_id": "p1", "bio": "repliee bio", "text": "ignored #Other"}},
            {"text": "my take #Mine", "created_at": "2021-04-01T00:00:00Z", "kind": "quote",
             "counterpart": {"user_id": "q1", "text": "quoted #Theirs"}},
        ],
    }
    data.update(overrides)
    return RawUserRecord.model_validate(data)


class TestRegisteredDomain:
    """registered_domainのテスト."""

    def test_simple(self):
        assert registered_domain("https://www.nytimes.com/article") == ("nytimes", "www.nytimes")

    def test_multi_label_suffix(self):
        assert registered_domain("http://news.bbc.co.uk/x") == ("bbc", "news.bbc")
        assert registered_domain("bbc.co.uk") == ("bbc", "bbc")

    def test_unusable_hosts(self):
        assert registered_domain("") is None
        assert registered_domain("http://127.0.0.1/x") is None
        assert registered_domain("https://co.uk") is None
        assert registered_domain("https://com.ar/") is None

    @pytest.mark.parametrize("url, expected", [
        ("https://www.lanacion.com.ar/politica", ("lanacion", "www.lanacion")),
        ("https://www.hurriyet.com.tr/gundem", ("hurriyet", "www.hurriyet")),
        ("https://punchng.com.ng/news", ("punchng", "punchng")),
        ("https://www.haaretz.co.il/news", ("haaretz", "www.haaretz")),
        ("https://nasional.kompas.co.id/read", ("kompas", "nasional.kompas")),
        ("https://www.abc.net.au/news", ("abc", "www.abc")),
        ("http://news.bbc.co.uk/x", ("bbc", "news.bbc")),
        ("https://www.theguardian.com/us", ("theguardian", "www.theguardian")),
    ])
    def test_country_code_suffixes(self, url, expected):
        assert registered_domain(url) == expected

    def test_never_emits_bare_suffix(self):
        suffixes = {"com", "co", "uk", "co.uk", "ar", "com.ar", "tr", "com.tr", "ng", "com.ng", "il", "co.il",
                    "id", "co.id", "au", "net.au", "jp", "co.jp"}
        hosts = ["a.b.com.ar", "www.example.co.jp", "shop.example.net.au", "x.co.id", "m.site.com.tr",
                 "site.com.ng", "www.site.co.il", "deep.sub.example.co.uk"]
        for host in hosts:
            domain, codomain = registered_domain(f"https://{host}/path")
            assert domain not in suffixes
            assert codomain.split(".")[-1] == domain


class TestExtractChannels:
    """extract_channelsのテスト."""

    def setup_method(self):
        self.schema = schema_default()
        self.ids = {c.name: c.id for c in self.schema}

    def bag(self, extracted, name):
        return sorted(extracted.bags[self.ids[name]])

    def test_sources(self):
        extracted = extract_channels(make_record(), schema=self.schema)

        assert self.bag(extracted, "tweet_hashtags") == ["vote"]
        assert self.bag(extracted, "tweet_mentions") == ["Alice"]
        assert self.bag(extracted, "tweet_domains") == ["nytimes"]
        assert self.bag(extracted, "tweet_domain_codomain") == ["www.nytimes"]
        # リツイートは相手の内容、引用は両方
        assert self.bag(extracted, "retweet_hashtags") == ["mine", "news", "theirs"]
        assert self.bag(extracted, "retweet_domains") == ["bbc"]
        # 返信は本人の内容のみ
        assert self.bag(extracted, "reply_hashtags") == ["vote"]
        assert self.bag(extracted, "retweetee_ids") == ["q1", "r1"]
        assert self.bag(extracted, "repliee_ids") == ["p1"]
        assert self.bag(extracted, "follower_ids") == ["f1", "f2"]
        assert self.bag(extracted, "friend_ids") == ["g1"]

    def test_documents(self):
        extracted = extract_channels(make_record(), schema=self.schema)
        assert extracted.documents[self.ids["tweet_bios"]] == "my own bio"
        assert extracted.documents[self.ids["retweet_bios"]] == "retweetee bio"
        assert extracted.documents[self.ids["reply_bios"]] == "repliee bio"
        assert "my take" in extracted.documents[self.ids["retweet_text"]]
        assert "quoted" in extracted.documents[self.ids["retweet_text"]]

    def test_window_and_profile(self):
        window = TimeWindow(before="2020-06-01T00:00:00Z")
        extracted = extract_channels(make_record(), window, self.schema, include_profile=False)

        assert self.bag(extracted, "reply_hashtags") == []
        assert self.bag(extracted, "retweetee_ids") == ["r1"]
        assert self.bag(extracted, "follower_ids") == []
        assert extracted.documents[self.ids["tweet_bios"]] == ""

    def test_reply_mentions_stay_with_reply_source(self):
        record = RawUserRecord.model_validate({"user_id": "u", "tweets": [
            {"text": "@JoeBiden thanks", "created_at": "2020-10-01T00:00:00Z", "kind": "reply",
             "counterpart": {"user_id": "939091"}},
        ]})
        extracted = extract_channels(record, schema=self.schema)
        assert self.bag(extracted, "reply_mentions") == ["JoeBiden"]
        assert self.bag(extracted, "tweet_mentions") == []
        assert self.bag(extracted, "repliee_ids") == ["939091"]
        assert self.bag(extracted, "retweetee_ids") == []

    @pytest.mark.parametrize("cut", ["2020-01-15", "2020-06-01", "2021-03-15", "2030-01-01"])
    def test_time_partition_union(self, cut):
        record = make_record()
        whole = extract_channels(record, schema=self.schema)
        early = extract_channels(record, TimeWindow(before=cut), self.schema)
        late = extract_channels(record, TimeWindow(after=cut), self.schema)
        for r in self.schema.sparse_ids:
            assert set(whole.bags[r]) == set(early.bags[r]) | set(late.bags[r])

    def test_empty_user(self):
        extracted = extract_channels(RawUserRecord(user_id="x"), schema=self.schema)
        assert all(bag == [] for bag in extracted.bags.values())
        assert set(extracted.bags) == set(self.schema.sparse_ids)

    def test_count_tweets(self):
        record = make_record()
        assert count_tweets(record) == 4
        assert count_tweets(record, TimeWindow(after="2021-01-01")) == 2


class TestEmbeddingProviders:
    """埋め込みプロバイダのテスト."""

    def test_hashing_is_deterministic(self):
        a = HashingEmbeddingProvider(d_em=16, seed=3)
        b = HashingEmbeddingProvider(d_em=16, seed=3)
        np.testing.assert_array_equal(a.embed("hello world"), b.embed("hello world"))
        assert a.embed("hello").shape == (16,)
        np.testing.assert_array_equal(embed_text("", a), np.zeros(16))

    def test_hashing_disjoint_documents_nearly_orthogonal(self):
        provider = HashingEmbeddingProvider(d_em=768, seed=0)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            words = [f"w{i}" for i in rng.choice(10000, size=16, replace=False)]
            a = provider.embed(" ".join(words[:8]))
            b = provider.embed(" ".join(words[8:]))
            cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            assert abs(cos) < 0.2

    def test_file_provider(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text(f"d_em=2\n{document_key('doc')} 1.0 2.0\n", encoding="utf-8")
        provider = FileEmbeddingProvider(str(path))

        np.testing.assert_array_equal(provider.embed("doc"), [1.0, 2.0])
        with pytest.raises(EmbeddingLookupError):
            provider.embed("other")

    def test_file_provider_dimension(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("d_em=3\nabc 1.0 2.0\n", encoding="utf-8")
        with pytest.raises(DimensionError):
            FileEmbeddingProvider(str(path))


class TestBagConversion:
    """チャネルバッグとベクトル化のテスト."""

    def setup_method(self):
        self.schema = schema_default()
        self.provider = HashingEmbeddingProvider(d_em=8)

    def test_channelize_and_vectorize(self):
        records = [make_record(user_id="b", label=1), make_record(user_id="a", label=0)]
        bags = channelize_archive(records, self.provider, schema=self.schema, num_threads=2)

        assert [b.user_id for b in bags] == ["a", "b"]
        assert bags[0].bags["tweet_hashtags"] == ["vote"]
        assert len(bags[0].dense["tweet_text"]) == 8

        vocab = build_vocabulary([{self.schema.by_name(n).id: t for n, t in b.bags.items()} for b in bags],
                                 min_count=2, schema=self.schema)
        dataset = to_dataset(bags, vocab)
        assert dataset.num_classes == 2
        assert dataset.labels.tolist() == [0, 1]
        hashtags = self.schema.by_name("tweet_hashtags").id
        assert dataset.users[0].sparse[hashtags] == frozenset({vocab.index(hashtags, "vote")})

    def test_unlabeled_records_skipped(self):
        bags = [channelize_record(make_record(user_id="a"), self.provider, schema=self.schema)]
        vocab = build_vocabulary([], schema=self.schema)
        assert len(to_dataset(bags, vocab, num_classes=2)) == 0
        assert len(to_users(bags, vocab)) == 1

    def test_back_to_bag_records(self):
        bags = [channelize_record(make_record(label=0), self.provider, schema=self.schema)]
        vocab = build_vocabulary([{self.schema.by_name(n).id: t for n, t in bags[0].bags.items()}],
                                 min_count=1, schema=self.schema)
        users = to_users(bags, vocab)
        restored = to_users(to_bag_records(users, vocab), vocab)
        assert restored[0].same_features(users[0])
        assert restored[0].label == 0
