"""テスト共通のフィクスチャ."""

from typing import List, Optional

import numpy as np
import pytest

from modules.schema import (ChannelDescriptor, ChannelizedUser, ChannelSchema, LabeledDataset, Vocabulary)

SMALL_D_EM = 3


def small_schema() -> ChannelSchema:
    return ChannelSchema((
        ChannelDescriptor(id=0, name="hashtags", kind="sparse", source="tweet"),
        ChannelDescriptor(id=1, name="text", kind="dense", source="tweet"),
        ChannelDescriptor(id=2, name="mentions", kind="sparse", source="reply", case_insensitive=True),
    ))


def small_vocab(schema: Optional[ChannelSchema] = None, sizes=(5, 4)) -> Vocabulary:
    schema = schema or small_schema()
    tokens = {}
    doc_freq = {}
    for r, size in zip(schema.sparse_ids, sizes):
        tokens[r] = tuple(f"{schema[r].name}{j}" for j in range(size))
        doc_freq[r] = (1,) * size
    return Vocabulary(schema=schema, tokens=tokens, doc_freq=doc_freq)


def random_users(vocab: Vocabulary, n: int, rng: np.random.Generator, num_classes: int = 2,
                 d_em: int = SMALL_D_EM, density: float = 0.5,
                 empty_rate: float = 0.0) -> List[ChannelizedUser]:
    """乱数ユーザー（empty_rate > 0 のとき各チャネルをその確率で空にする）"""
    schema = vocab.schema
    users = []
    for i in range(n):
        sparse = {}
        for r in schema.sparse_ids:
            chosen = np.flatnonzero(rng.random(vocab.size(r)) < density)
            if chosen.size == 0:
                chosen = np.array([int(rng.integers(vocab.size(r)))])
            sparse[r] = frozenset(int(j) for j in chosen)
        dense = {r: rng.normal(size=d_em) for r in schema.dense_ids}
        if empty_rate > 0:
            for r in schema.sparse_ids:
                if rng.random() < empty_rate:
                    sparse[r] = frozenset()
            for r in schema.dense_ids:
                if rng.random() < empty_rate:
                    dense[r] = np.zeros(d_em)
        users.append(ChannelizedUser(user_id=f"u{i}", sparse=sparse, dense=dense,
                                     label=int(rng.integers(num_classes))))
    return users


@pytest.fixture
def vocab() -> Vocabulary:
    return small_vocab()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def dataset(vocab, rng) -> LabeledDataset:
    return LabeledDataset(users=random_users(vocab, 40, rng), num_classes=2, provenance="gold", vocab=vocab)
