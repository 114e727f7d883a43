"""
アーカイブからチャネル特徴を抽出するモジュール

ユーザーアーカイブ（オフラインのJSON-lines）を、チャネルごとのトークンバッグと
密チャネル用の文書に変換し、文書を埋め込みプロバイダでベクトル化する。
"""

import hashlib
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, FrozenSet, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import tldextract

from .error_handler import DimensionError, EmbeddingLookupError, FileError, ValidationError
from .models import BagRecord, RawTweet, RawUserRecord, TimeWindow
from .schema import ChannelizedUser, ChannelSchema, LabeledDataset, Vocabulary, schema_default, vectorize

logger = logging.getLogger(__name__)

DEFAULT_D_EM = 768

HASHTAG_PATTERN = re.compile(r'(?<!\w)#(\w+)')
MENTION_PATTERN = re.compile(r'(?<!\w)@(\w{1,50})')
URL_PATTERN = re.compile(r'https?://\S+', re.IGNORECASE)
WORD_PATTERN = re.compile(r'\w+')

SOURCE_OF_KIND = {
    "original": "tweet",
    "reply": "reply",
    "retweet": "retweet",
    "quote": "retweet",
}


@lru_cache(maxsize=1)
def _suffix_extractor() -> tldextract.TLDExtract:
    # 同梱のスナップショットのみを使い、ネットワークとディスクキャッシュに触れない
    return tldextract.TLDExtract(suffix_list_urls=(), cache_dir=None)


def registered_domain(url: str) -> Optional[Tuple[str, str]]:
    """URLから登録ドメイン名とドメイン+コドメイン名を取り出す

    公開サフィックス（"com", "co.uk", "com.ar" など）を除いたラベルをドメインとし、
    サブドメインがあれば "<subdomain>.<domain>" をドメイン+コドメインとする。

    Args:
        url: URL文字列（スキーム省略可）

    Returns:
        (domain, domain_codomain)。ホストが無い・IPアドレス・公開サフィックスのみ・
        既知のサフィックスを持たない場合はNone
    """
    candidate = url.strip()
    if not candidate:
        return None
    parts = _suffix_extractor()(candidate)
    domain = parts.domain.lower()
    if not domain or not parts.suffix:
        return None
    subdomain = parts.subdomain.lower()
    return domain, f"{subdomain}.{domain}" if subdomain else domain


@dataclass
class ExtractedChannels:
    """extract_channelsの結果

    Attributes:
        bags: 疎チャネルID → トークン列（多重集合）
        documents: 密チャネルID → 連結文書
    """
    bags: Dict[int, List[str]] = field(default_factory=dict)
    documents: Dict[int, str] = field(default_factory=dict)

    def bag_sets(self) -> Dict[int, FrozenSet[str]]:
        return {r: frozenset(bag) for r, bag in self.bags.items()}


def _content_of(tweet: RawTweet) -> List[Tuple[str, List[str], List[str], List[str]]]:
    """特徴抽出の対象となる (text, urls, mentions, hashtags) の組"""
    own = (tweet.text, tweet.urls, tweet.mentions, tweet.hashtags)
    counterpart = tweet.counterpart
    if counterpart is None or tweet.kind == "reply":
        return [own]
    other = (counterpart.text, counterpart.urls, counterpart.mentions, counterpart.hashtags)
    if tweet.kind == "retweet":
        return [other]
    return [own, other]


def _hashtags(text: str, hashtags: List[str]) -> List[str]:
    found = hashtags if hashtags else HASHTAG_PATTERN.findall(text)
    return [h.lstrip("#").lower() for h in found if h.lstrip("#")]


def _mentions(text: str, mentions: List[str]) -> List[str]:
    found = mentions if mentions else MENTION_PATTERN.findall(text)
    return [m.lstrip("@") for m in found if m.lstrip("@")]


def _urls(text: str, urls: List[str]) -> List[str]:
    return urls if urls else URL_PATTERN.findall(text)


def count_tweets(record: RawUserRecord, window: Optional[TimeWindow] = None) -> int:
    """ウィンドウ内のツイート数"""
    window = window or TimeWindow()
    return sum(1 for tweet in record.tweets if window.contains(tweet.created_at))


def extract_channels(record: RawUserRecord,
                     window: Optional[TimeWindow] = None,
                     schema: Optional[ChannelSchema] = None,
                     include_profile: bool = True) -> ExtractedChannels:
    """ユーザーレコードからチャネルごとのトークンバッグと文書を抽出する

    ウィンドウ外のツイートは無視する。ソース（ツイート・リプライ・リツイート/引用）
    ごとにハッシュタグ、メンション、ドメイン、ドメイン+コドメイン、本文、
    相手ユーザーのbioを集める。include_profile=Falseのときは本人のbioと
    フォロワー/フレンドを空にする（時系列比較用）。

    特徴はツイートの種類ごとのソースに振り分ける。リプライ本文中の
    "@JoeBiden" は reply_mentions に入り、tweet_mentions には入らない。
    相手のIDは repliee_ids に入る。

    Args:
        record: ユーザーレコード
        window: 時間ウィンドウ（省略時は無制限）
        schema: チャネルスキーマ（省略時は既定スキーマ）
        include_profile: 本人のプロフィール系チャネルを含めるか

    Returns:
        ExtractedChannels: 全チャネル分のバッグと文書（空チャネルも含む）
    """
    window = window or TimeWindow()
    schema = schema or schema_default()
    names = {c.name: c.id for c in schema}

    bags: Dict[int, List[str]] = {r: [] for r in schema.sparse_ids}
    texts: Dict[str, List[str]] = {source: [] for source in SOURCE_OF_KIND.values()}
    bios: Dict[str, List[str]] = {source: [] for source in SOURCE_OF_KIND.values()}
    seen_bio_owners: Dict[str, set] = {source: set() for source in SOURCE_OF_KIND.values()}

    def add(name: str, tokens: Iterable[str]) -> None:
        if name in names:
            bags[names[name]].extend(tokens)

    for tweet in record.tweets:
        if not window.contains(tweet.created_at):
            continue
        source = SOURCE_OF_KIND[tweet.kind]

        for text, urls, mentions, hashtags in _content_of(tweet):
            if text:
                texts[source].append(text)
            add(f"{source}_hashtags", _hashtags(text, hashtags))
            add(f"{source}_mentions", _mentions(text, mentions))
            for url in _urls(text, urls):
                parsed = registered_domain(url)
                if parsed is None:
                    continue
                add(f"{source}_domains", [parsed[0]])
                add(f"{source}_domain_codomain", [parsed[1]])

        counterpart = tweet.counterpart
        if counterpart is not None:
            if tweet.kind == "reply":
                add("repliee_ids", [counterpart.user_id])
            else:
                add("retweetee_ids", [counterpart.user_id])
            if counterpart.bio and counterpart.user_id not in seen_bio_owners[source]:
                seen_bio_owners[source].add(counterpart.user_id)
                bios[source].append(counterpart.bio)

    if include_profile:
        add("follower_ids", record.follower_ids)
        add("friend_ids", record.friend_ids)
        if record.bio:
            bios["tweet"].insert(0, record.bio)

    documents: Dict[int, str] = {}
    for channel in schema:
        if not channel.is_dense:
            continue
        feature = channel.name[len(channel.source) + 1:]
        if feature == "text":
            documents[channel.id] = "\n".join(texts.get(channel.source, []))
        elif feature == "bios":
            documents[channel.id] = "\n".join(bios.get(channel.source, []))
        else:
            documents[channel.id] = ""

    return ExtractedChannels(bags=bags, documents=documents)


class EmbeddingProvider(Protocol):
    """文書 → 長さd_emのベクトル"""

    d_em: int

    def embed(self, document: str) -> np.ndarray:
        ...


def document_key(document: str) -> str:
    """埋め込みファイル上の文書キー（UTF-8のSHA-1）"""
    return hashlib.sha1(document.encode("utf-8")).hexdigest()


class HashingEmbeddingProvider:
    """外部モデル無しで動く特徴ハッシング埋め込み

    各トークンをシード付きハッシュから生成した擬似乱数ガウスベクトルに写像し、
    文書内のトークンについて合計する。トークンが重ならない文書同士はほぼ直交する。
    """

    def __init__(self, d_em: int = DEFAULT_D_EM, seed: int = 0):
        if d_em < 1:
            raise ValidationError(f"d_emは1以上である必要があります: {d_em}")
        self.d_em = d_em
        self.seed = seed
        self._token_vector = lru_cache(maxsize=65536)(self._make_token_vector)

    def _make_token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}:{token}".encode("utf-8"), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.d_em) / np.sqrt(self.d_em)

    def embed(self, document: str) -> np.ndarray:
        vector = np.zeros(self.d_em)
        for token in WORD_PATTERN.findall(document.lower()):
            vector += self._token_vector(token)
        return vector


class FileEmbeddingProvider:
    """事前計算済み埋め込みファイルから引くプロバイダ

    ファイル形式: 1行目 "d_em=<n>"、以降 "<document key> v1 ... vn"。
    """

    def __init__(self, file_path: str):
        self.file_path = str(file_path)
        self._vectors: Dict[str, np.ndarray] = {}
        try:
            with open(self.file_path, "r", encoding="utf-8") as f:
                header = f.readline().strip()
                if not header.startswith("d_em="):
                    raise ValidationError(f"埋め込みファイルのヘッダが不正です: {header!r}",
                                          context={'file_path': self.file_path})
                self.d_em = int(header.split("=", 1)[1])
                for line_number, line in enumerate(f, 2):
                    parts = line.split()
                    if not parts:
                        continue
                    if len(parts) != self.d_em + 1:
                        raise DimensionError(f"埋め込みの次元が不正です（{line_number}行目）",
                                             expected=self.d_em, actual=len(parts) - 1)
                    self._vectors[parts[0]] = np.array([float(v) for v in parts[1:]])
        except OSError as e:
            raise FileError(f"埋め込みファイルの読み込みエラー: {e}", file_path=self.file_path, operation="read") from e

    def embed(self, document: str) -> np.ndarray:
        if not document:
            return np.zeros(self.d_em)
        key = document_key(document)
        vector = self._vectors.get(key)
        if vector is None:
            raise EmbeddingLookupError("埋め込みファイルに文書がありません",
                                       document_key=key, file_path=self.file_path)
        return vector.copy()


def embed_text(document: str, provider: EmbeddingProvider) -> np.ndarray:
    """文書を埋め込む（空文書はゼロベクトル）"""
    if not document:
        return np.zeros(provider.d_em)
    return provider.embed(document)


def channelize_record(record: RawUserRecord,
                      provider: EmbeddingProvider,
                      window: Optional[TimeWindow] = None,
                      schema: Optional[ChannelSchema] = None,
                      include_profile: bool = True) -> BagRecord:
    """1ユーザーをチャネルバッグ形式（トークン + 埋め込み済み密ベクトル）に変換する"""
    schema = schema or schema_default()
    extracted = extract_channels(record, window, schema, include_profile)
    return BagRecord(
        user_id=record.user_id,
        label=record.label,
        meta=record.meta,
        bags={schema[r].name: list(tokens) for r, tokens in extracted.bags.items()},
        dense={schema[r].name: embed_text(doc, provider).tolist() for r, doc in extracted.documents.items()},
    )


def channelize_archive(records: Iterable[RawUserRecord],
                       provider: EmbeddingProvider,
                       window: Optional[TimeWindow] = None,
                       schema: Optional[ChannelSchema] = None,
                       include_profile: bool = True,
                       num_threads: int = 1) -> List[BagRecord]:
    """アーカイブ全体を変換し、user_id順に並べて返す"""
    def convert(record: RawUserRecord) -> BagRecord:
        return channelize_record(record, provider, window, schema, include_profile)

    records = list(records)
    if num_threads > 1:
        with ThreadPoolExecutor(max_workers=num_threads) as executor:
            bag_records = list(executor.map(convert, records))
    else:
        bag_records = [convert(r) for r in records]
    bag_records.sort(key=lambda b: b.user_id)
    logger.info(f"Channelized {len(bag_records)} users")
    return bag_records


def bag_tokens(record: BagRecord, schema: ChannelSchema) -> Dict[int, List[str]]:
    """チャネル名キーのバッグをチャネルIDキーに変換する（未知のチャネル名は検証エラー）"""
    return {schema.by_name(name).id: tokens for name, tokens in record.bags.items()}


def to_users(bag_records: Sequence[BagRecord],
             vocab: Vocabulary,
             d_em: Optional[int] = None) -> List[ChannelizedUser]:
    """チャネルバッグを語彙に対してベクトル化する"""
    schema = vocab.schema
    if d_em is None:
        d_em = infer_d_em(bag_records)
    users = []
    for record in bag_records:
        dense = {schema.by_name(name).id: vector for name, vector in record.dense.items()}
        users.append(vectorize(bag_tokens(record, schema), vocab, dense, d_em,
                               user_id=record.user_id, label=record.label, meta=record.meta))
    return users


def infer_d_em(bag_records: Sequence[BagRecord], default: int = DEFAULT_D_EM) -> int:
    for record in bag_records:
        for vector in record.dense.values():
            return len(vector)
    return default


def to_dataset(bag_records: Sequence[BagRecord],
               vocab: Vocabulary,
               provenance: str = "gold",
               num_classes: Optional[int] = None,
               d_em: Optional[int] = None) -> LabeledDataset:
    """ラベル付きチャネルバッグからLabeledDatasetを作る（ラベル無しレコードは除外）"""
    labeled = [r for r in bag_records if r.label is not None]
    if len(labeled) < len(bag_records):
        logger.warning(f"{len(bag_records) - len(labeled)} records without label were skipped")
    users = to_users(labeled, vocab, d_em)
    if num_classes is None:
        num_classes = max(2, max((u.label for u in users), default=0) + 1)
    return LabeledDataset(users=users, num_classes=num_classes, provenance=provenance, vocab=vocab)


def to_bag_records(users: Sequence[ChannelizedUser], vocab: Vocabulary) -> List[BagRecord]:
    """ベクトル化済みユーザーをチャネルバッグ形式に戻す（疎特徴はトークン名に変換）"""
    schema = vocab.schema
    records = []
    for user in users:
        records.append(BagRecord(
            user_id=user.user_id,
            label=user.label,
            meta=user.meta,
            bags={schema[r].name: [vocab.token(r, i) for i in sorted(indices)]
                  for r, indices in user.sparse.items()},
            dense={schema[r].name: np.asarray(vector, dtype=float).tolist() for r, vector in user.dense.items()},
        ))
    return records
