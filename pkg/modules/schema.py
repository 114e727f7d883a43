"""
チャネルスキーマと語彙を扱うモジュール

22種類の特徴チャネル（疎チャネルと密チャネル）の定義、チャネルごとの
語彙（トークン⇔インデックス）、およびユーザーのチャネル化表現を提供する。
"""

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .error_handler import CorruptionError, DimensionError, FileError, ValidationError

logger = logging.getLogger(__name__)

SPARSE = "sparse"
DENSE = "dense"

SOURCES = ("tweet", "reply", "retweet")
PER_SOURCE_FEATURES = (
    ("text", DENSE),
    ("bios", DENSE),
    ("hashtags", SPARSE),
    ("domains", SPARSE),
    ("domain_codomain", SPARSE),
    ("mentions", SPARSE),
)
ID_CHANNELS = (
    ("follower_ids", "profile"),
    ("friend_ids", "profile"),
    ("retweetee_ids", "retweet"),
    ("repliee_ids", "reply"),
)

PROVENANCES = ("gold", "silver", "synthetic")


@dataclass(frozen=True)
class ChannelDescriptor:
    """特徴チャネルの記述子

    Attributes:
        id (int): チャネルID（0から連番）
        name (str): チャネル名（例: "retweet_hashtags"）
        kind (str): "sparse" または "dense"
        source (str): "tweet" / "reply" / "retweet" / "profile"
        case_insensitive (bool): 語彙照合で大文字小文字を区別しないか
    """
    id: int
    name: str
    kind: str
    source: str
    case_insensitive: bool = False

    @property
    def is_dense(self) -> bool:
        return self.kind == DENSE

    def normalize(self, token: str) -> str:
        """語彙照合用にトークンを正規化する"""
        return token.casefold() if self.case_insensitive else token


@dataclass(frozen=True)
class ChannelSchema:
    """チャネルの順序付き集合。密チャネル集合Tと疎チャネル集合T'に分割される。"""
    channels: Tuple[ChannelDescriptor, ...]

    def __post_init__(self):
        ids = [c.id for c in self.channels]
        if ids != list(range(len(ids))):
            raise ValidationError(f"チャネルIDは0から連番である必要があります: {ids}")
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ValidationError("チャネル名が重複しています")
        for channel in self.channels:
            if channel.kind not in (SPARSE, DENSE):
                raise ValidationError(f"不正なチャネル種別: {channel.kind}")

    def __len__(self) -> int:
        return len(self.channels)

    def __iter__(self) -> Iterator[ChannelDescriptor]:
        return iter(self.channels)

    def __getitem__(self, channel_id: int) -> ChannelDescriptor:
        return self.channels[channel_id]

    @property
    def sparse_ids(self) -> List[int]:
        return [c.id for c in self.channels if not c.is_dense]

    @property
    def dense_ids(self) -> List[int]:
        return [c.id for c in self.channels if c.is_dense]

    def by_name(self, name: str) -> ChannelDescriptor:
        for channel in self.channels:
            if channel.name == name:
                return channel
        raise ValidationError(f"未知のチャネル名です: {name}", context={'channel': name})

    def names(self) -> List[str]:
        return [c.name for c in self.channels]


def schema_default() -> ChannelSchema:
    """既定の22チャネルスキーマを返す

    3つのソース（ツイート・リプライ・リツイート/引用）ごとに
    text, bios（密）と hashtags, domains, domain_codomain, mentions（疎）の6チャネル、
    さらに follower_ids, friend_ids, retweetee_ids, repliee_ids の4チャネル。

    Returns:
        ChannelSchema: 22チャネル（うち密チャネル6）
    """
    channels: List[ChannelDescriptor] = []
    for source in SOURCES:
        for feature, kind in PER_SOURCE_FEATURES:
            channels.append(ChannelDescriptor(
                id=len(channels),
                name=f"{source}_{feature}",
                kind=kind,
                source=source,
                case_insensitive=(feature == "mentions"),
            ))
    for name, source in ID_CHANNELS:
        channels.append(ChannelDescriptor(id=len(channels), name=name, kind=SPARSE, source=source))
    return ChannelSchema(tuple(channels))


def schema_to_list(schema: ChannelSchema) -> List[list]:
    return [[c.id, c.name, c.kind, c.source, c.case_insensitive] for c in schema]


def schema_from_list(rows: Sequence[Sequence]) -> ChannelSchema:
    """schema_to_listの逆変換

    Raises:
        CorruptionError: 行の形式が不正な場合
    """
    try:
        return ChannelSchema(tuple(
            ChannelDescriptor(id=int(row[0]), name=str(row[1]), kind=str(row[2]), source=str(row[3]),
                              case_insensitive=bool(row[4]))
            for row in rows
        ))
    except (IndexError, TypeError, ValueError) as e:
        raise CorruptionError(f"スキーマの形式が不正です: {e}") from e


def schema_hash(schema: ChannelSchema) -> str:
    """スキーマのSHA-256ハッシュ（チェックポイント照合用）"""
    return hashlib.sha256(json.dumps(schema_to_list(schema)).encode("utf-8")).hexdigest()


def save_schema(schema: ChannelSchema, file_path: str) -> None:
    try:
        Path(file_path).write_text(json.dumps(schema_to_list(schema)), encoding="utf-8")
    except OSError as e:
        raise FileError(f"スキーマの書き込みエラー: {e}", file_path=str(file_path), operation="write") from e


def load_schema(file_path: str) -> ChannelSchema:
    try:
        rows = json.loads(Path(file_path).read_text(encoding="utf-8"))
    except OSError as e:
        raise FileError(f"スキーマの読み込みエラー: {e}", file_path=str(file_path), operation="read") from e
    except json.JSONDecodeError as e:
        raise CorruptionError(f"スキーマがJSONではありません: {e}") from e
    return schema_from_list(rows)


@dataclass(frozen=True)
class Vocabulary:
    """疎チャネルごとの語彙

    Attributes:
        schema (ChannelSchema): 語彙を構築したスキーマ
        tokens (Dict[int, Tuple[str, ...]]): チャネルID → インデックス順のトークン
        doc_freq (Dict[int, Tuple[int, ...]]): チャネルID → インデックス順の文書頻度
    """
    schema: ChannelSchema
    tokens: Dict[int, Tuple[str, ...]]
    doc_freq: Dict[int, Tuple[int, ...]]
    _index: Dict[int, Dict[str, int]] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for r in self.schema.sparse_ids:
            self.tokens.setdefault(r, ())
            self.doc_freq.setdefault(r, ())
            if len(self.tokens[r]) != len(self.doc_freq[r]):
                raise CorruptionError("語彙と文書頻度の長さが一致しません", channel=self.schema[r].name)
            self._index[r] = {token: i for i, token in enumerate(self.tokens[r])}
            if len(self._index[r]) != len(self.tokens[r]):
                raise CorruptionError("語彙に重複トークンがあります", channel=self.schema[r].name)

    def size(self, channel_id: int) -> int:
        """Vlen_r"""
        return len(self.tokens[channel_id])

    def sizes(self) -> Dict[int, int]:
        return {r: len(self.tokens[r]) for r in self.schema.sparse_ids}

    def index(self, channel_id: int, token: str) -> Optional[int]:
        """トークンのインデックス（語彙外ならNone）"""
        return self._index[channel_id].get(self.schema[channel_id].normalize(token))

    def token(self, channel_id: int, index: int) -> str:
        limit = self.size(channel_id)
        if not 0 <= index < limit:
            raise CorruptionError("インデックスが語彙の範囲外です",
                                  channel=self.schema[channel_id].name, index=index, limit=limit)
        return self.tokens[channel_id][index]


def build_vocabulary(users: Sequence[Mapping[int, Iterable[str]]],
                     min_count: int = 5,
                     schema: Optional[ChannelSchema] = None) -> Vocabulary:
    """ユーザーごとのトークンバッグから語彙を構築する

    文書頻度（そのトークンを持つユーザー数）がmin_count以上のトークンだけを残し、
    頻度の降順・同頻度は辞書順でインデックスを割り当てる。

    Args:
        users: ユーザーごとの {チャネルID: トークン列}
        min_count: 最小文書頻度（1以上）
        schema: チャネルスキーマ（省略時は既定スキーマ）

    Returns:
        Vocabulary: 構築された語彙（入力が空なら空語彙）

    Raises:
        ValidationError: min_countが1未満の場合
    """
    if min_count < 1:
        raise ValidationError(f"min_countは1以上である必要があります: {min_count}")
    schema = schema or schema_default()

    counters: Dict[int, Counter] = {r: Counter() for r in schema.sparse_ids}
    for bags in users:
        for r, bag in bags.items():
            if r not in counters:
                continue
            descriptor = schema[r]
            counters[r].update({descriptor.normalize(t) for t in bag})

    tokens: Dict[int, Tuple[str, ...]] = {}
    doc_freq: Dict[int, Tuple[int, ...]] = {}
    for r, counter in counters.items():
        retained = sorted(
            ((t, n) for t, n in counter.items() if n >= min_count),
            key=lambda item: (-item[1], item[0]),
        )
        tokens[r] = tuple(t for t, _ in retained)
        doc_freq[r] = tuple(n for _, n in retained)

    logger.info(f"語彙を構築しました: 合計 {sum(len(t) for t in tokens.values())} トークン (min_count={min_count})")
    return Vocabulary(schema=schema, tokens=tokens, doc_freq=doc_freq)


@dataclass(eq=False)
class ChannelizedUser:
    """チャネル化されたユーザー

    Attributes:
        user_id (str): ユーザーID（不透明な文字列）
        sparse (Dict[int, FrozenSet[int]]): 疎チャネルごとの特徴インデックス集合（A_ir）
        dense (Dict[int, np.ndarray]): 密チャネルごとの長さd_emのベクトル
        label (Optional[int]): クラスインデックス
        meta (Dict[str, str]): グループ分け等に使う付帯情報
    """
    user_id: str
    sparse: Dict[int, FrozenSet[int]]
    dense: Dict[int, np.ndarray]
    label: Optional[int] = None
    meta: Dict[str, str] = field(default_factory=dict)

    def same_features(self, other: "ChannelizedUser") -> bool:
        """特徴が完全に一致するか"""
        if self.sparse.keys() != other.sparse.keys() or self.dense.keys() != other.dense.keys():
            return False
        if any(self.sparse[r] != other.sparse[r] for r in self.sparse):
            return False
        return all(np.array_equal(self.dense[r], other.dense[r]) for r in self.dense)

    def replace(self, sparse: Optional[Dict[int, FrozenSet[int]]] = None,
                dense: Optional[Dict[int, np.ndarray]] = None,
                label: Optional[int] = None) -> "ChannelizedUser":
        """一部のチャネルを差し替えた新しいユーザーを返す"""
        new_sparse = dict(self.sparse)
        new_dense = dict(self.dense)
        if sparse:
            new_sparse.update(sparse)
        if dense:
            new_dense.update(dense)
        return ChannelizedUser(
            user_id=self.user_id,
            sparse=new_sparse,
            dense=new_dense,
            label=self.label if label is None else label,
            meta=dict(self.meta),
        )

    def emptied(self, channel_ids: Iterable[int]) -> "ChannelizedUser":
        """指定チャネルを空にしたユーザーを返す"""
        sparse = {}
        dense = {}
        for r in channel_ids:
            if r in self.sparse:
                sparse[r] = frozenset()
            elif r in self.dense:
                dense[r] = np.zeros_like(self.dense[r])
        return self.replace(sparse=sparse, dense=dense)

    def feature_count(self) -> int:
        return sum(len(s) for s in self.sparse.values())


def vectorize(token_bags: Mapping[int, Iterable[str]],
              vocab: Vocabulary,
              dense_vectors: Mapping[int, Sequence[float]],
              d_em: int,
              user_id: str = "",
              label: Optional[int] = None,
              meta: Optional[Dict[str, str]] = None) -> ChannelizedUser:
    """トークンバッグと密ベクトルからChannelizedUserを作る

    語彙外トークンは黙って捨て、重複トークンは1つのインデックスにまとめる。
    密ベクトルが無いチャネルはゼロベクトルになる。

    Raises:
        DimensionError: 密ベクトルの長さがd_emと異なる場合
    """
    schema = vocab.schema
    sparse: Dict[int, FrozenSet[int]] = {}
    for r in schema.sparse_ids:
        indices = set()
        for token in token_bags.get(r, ()):
            index = vocab.index(r, token)
            if index is not None:
                indices.add(index)
        sparse[r] = frozenset(indices)

    dense: Dict[int, np.ndarray] = {}
    for r in schema.dense_ids:
        vector = dense_vectors.get(r)
        if vector is None:
            dense[r] = np.zeros(d_em)
            continue
        array = np.asarray(vector, dtype=float)
        if array.shape != (d_em,):
            raise DimensionError("密ベクトルの次元がd_emと一致しません",
                                 expected=d_em, actual=int(array.size), channel=schema[r].name)
        dense[r] = array

    return ChannelizedUser(user_id=user_id, sparse=sparse, dense=dense, label=label, meta=dict(meta or {}))


@dataclass
class LabeledDataset:
    """ラベル付きユーザー集合

    Attributes:
        users (List[ChannelizedUser]): ラベル付きユーザー
        num_classes (int): クラス数K（2以上）
        provenance (str): "gold" / "silver" / "synthetic"
        vocab (Vocabulary): ユーザーのインデックスが参照する語彙
    """
    users: List[ChannelizedUser]
    num_classes: int
    provenance: str
    vocab: Vocabulary

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"クラス数は2以上である必要があります: {self.num_classes}")
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"不正な由来タグ: {self.provenance}")
        for user in self.users:
            if user.label is None or not 0 <= user.label < self.num_classes:
                raise ValidationError(f"ラベルが範囲外です: user={user.user_id} label={user.label}",
                                      context={'user_id': user.user_id})

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[ChannelizedUser]:
        return iter(self.users)

    @property
    def schema(self) -> ChannelSchema:
        return self.vocab.schema

    @property
    def labels(self) -> np.ndarray:
        return np.array([u.label for u in self.users], dtype=int)

    def class_counts(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist() if self.users else [0] * self.num_classes

    def with_users(self, users: Sequence[ChannelizedUser]) -> "LabeledDataset":
        return LabeledDataset(users=list(users), num_classes=self.num_classes,
                              provenance=self.provenance, vocab=self.vocab)

    def subset(self, indices: Iterable[int]) -> "LabeledDataset":
        return self.with_users([self.users[i] for i in indices])

    def with_channels_emptied(self, channel_ids: Iterable[int]) -> "LabeledDataset":
        channel_ids = list(channel_ids)
        return self.with_users([u.emptied(channel_ids) for u in self.users])


def save_vocabulary(vocab: Vocabulary, file_path: str) -> None:
    """語彙をTSV（channel_id, index, token, doc_frequency）で保存する

    Raises:
        FileError: 書き込みに失敗した場合
    """
    lines = []
    for r in vocab.schema.sparse_ids:
        for index, (token, freq) in enumerate(zip(vocab.tokens[r], vocab.doc_freq[r])):
            lines.append(f"{r}\t{index}\t{token}\t{freq}\n")
    try:
        Path(file_path).write_text("".join(lines), encoding="utf-8")
    except OSError as e:
        raise FileError(f"語彙ファイルの書き込みエラー: {e}", file_path=str(file_path), operation="write") from e


def load_vocabulary(file_path: str, schema: Optional[ChannelSchema] = None) -> Vocabulary:
    """TSV語彙ファイルを読み込む

    Raises:
        FileError: 読み込みに失敗した場合
        CorruptionError: インデックスに欠番や重複がある場合
    """
    schema = schema or schema_default()
    try:
        content = Path(file_path).read_text(encoding="utf-8")
    except OSError as e:
        raise FileError(f"語彙ファイルの読み込みエラー: {e}", file_path=str(file_path), operation="read") from e

    tokens: Dict[int, List[str]] = {r: [] for r in schema.sparse_ids}
    freqs: Dict[int, List[int]] = {r: [] for r in schema.sparse_ids}
    for line_number, line in enumerate(content.splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise CorruptionError(f"語彙ファイルの形式が不正です（{line_number}行目）")
        try:
            channel_id, index, token, freq = int(parts[0]), int(parts[1]), parts[2], int(parts[3])
        except ValueError as e:
            raise CorruptionError(f"語彙ファイルの数値が不正です（{line_number}行目）") from e
        if channel_id not in tokens:
            raise CorruptionError(f"疎チャネルではないIDです（{line_number}行目）", index=channel_id)
        if index != len(tokens[channel_id]):
            raise CorruptionError(f"インデックスに欠番があります（{line_number}行目）",
                                  channel=schema[channel_id].name, index=index)
        tokens[channel_id].append(token)
        freqs[channel_id].append(freq)

    return Vocabulary(
        schema=schema,
        tokens={r: tuple(t) for r, t in tokens.items()},
        doc_freq={r: tuple(f) for r, f in freqs.items()},
    )
