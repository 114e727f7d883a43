"""
合成母集団の生成とベイズオラクル

クラス条件付きのナイーブベイズ型生成モデルからユーザーと政党アンカーを生成し、
その生成モデルの下での厳密な事後確率最大の分類器（オラクル）を提供する。
"""

import itertools
import logging
from pathlib import Path
from typing import Dict, FrozenSet, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError as PydanticValidationError, model_validator
from scipy.special import softmax

from .error_handler import FileError, ValidationError
from .models import PartyAnchor
from .schema import (DENSE, SPARSE, ChannelDescriptor, ChannelizedUser, ChannelSchema, LabeledDataset,
                     Vocabulary)

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-6


class SyntheticChannel(BaseModel):
    """1チャネルのクラス条件付き分布"""

    name: str = Field(..., min_length=1)
    kind: Literal["sparse", "dense"]
    source: str = Field("tweet", description="Channel source tag")
    theta: Optional[List[List[float]]] = Field(None, description="Sparse: K x V categorical distributions")
    activity: Literal["poisson", "fixed"] = Field("poisson", description="Sparse activity model")
    rate: float = Field(5.0, gt=0, description="Poisson mean, or number of draws when fixed")
    mean: Optional[List[List[float]]] = Field(None, description="Dense: K x d_em class means")
    sigma: float = Field(1.0, gt=0, description="Dense: shared standard deviation")

    @property
    def vocab_size(self) -> int:
        return len(self.theta[0]) if self.theta else 0


class GenerativeSpec(BaseModel):
    """合成母集団の生成モデル"""

    priors: List[float] = Field(..., min_length=2, description="Class prior pi")
    channels: List[SyntheticChannel] = Field(..., min_length=1)
    d_em: int = Field(16, ge=1)
    eta: float = Field(0.0, ge=0.0, lt=0.5, description="Probability of joining a wrong party's anchor list")

    @model_validator(mode="after")
    def check_distributions(self):
        K = len(self.priors)
        if min(self.priors) < 0 or abs(sum(self.priors) - 1.0) > SUM_TOLERANCE:
            raise ValueError("priors must be non-negative and sum to 1")
        for channel in self.channels:
            if channel.kind == SPARSE:
                if not channel.theta or len(channel.theta) != K:
                    raise ValueError(f"{channel.name}: theta needs one row per class")
                if len({len(row) for row in channel.theta}) != 1 or not channel.theta[0]:
                    raise ValueError(f"{channel.name}: theta rows must share a non-empty vocabulary")
                for row in channel.theta:
                    if min(row) < 0 or abs(sum(row) - 1.0) > SUM_TOLERANCE:
                        raise ValueError(f"{channel.name}: theta rows must be distributions")
                if channel.activity == "fixed" and channel.rate != int(channel.rate):
                    raise ValueError(f"{channel.name}: fixed activity needs an integer number of draws")
            else:
                if not channel.mean or len(channel.mean) != K or any(len(m) != self.d_em for m in channel.mean):
                    raise ValueError(f"{channel.name}: mean must be K x d_em")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.priors)

    def schema(self) -> ChannelSchema:
        return ChannelSchema(tuple(
            ChannelDescriptor(id=i, name=c.name, kind=c.kind, source=c.source)
            for i, c in enumerate(self.channels)
        ))

    def vocabulary(self) -> Vocabulary:
        """疎チャネルrのトークンは "t0", "t1", ... （インデックスjがトークンt<j>）"""
        schema = self.schema()
        tokens = {}
        doc_freq = {}
        for r in schema.sparse_ids:
            size = self.channels[r].vocab_size
            tokens[r] = tuple(f"t{j}" for j in range(size))
            doc_freq[r] = (0,) * size
        return Vocabulary(schema=schema, tokens=tokens, doc_freq=doc_freq)


def save_generative_spec(spec: GenerativeSpec, file_path: str) -> None:
    try:
        Path(file_path).write_text(spec.model_dump_json(indent=2), encoding="utf-8")
    except OSError as e:
        raise FileError(f"生成仕様の書き込みエラー: {e}", file_path=str(file_path), operation="write") from e


def load_generative_spec(file_path: str) -> GenerativeSpec:
    """
    生成仕様JSONを読み込む

    Raises:
        FileError: 読み込みに失敗した場合
        ValidationError: 内容が不正な場合
    """
    try:
        text = Path(file_path).read_text(encoding="utf-8")
    except OSError as e:
        raise FileError(f"生成仕様の読み込みエラー: {e}", file_path=str(file_path), operation="read") from e
    try:
        return GenerativeSpec.model_validate_json(text)
    except PydanticValidationError as e:
        raise ValidationError(f"生成仕様が不正です: {e}", context={'file_path': str(file_path)}) from e


def default_generative_spec(schema: ChannelSchema,
                            separation: float = 1.0,
                            d_em: int = 16,
                            seed: int = 0,
                            informative_channels: Optional[Sequence[str]] = None,
                            num_classes: int = 2,
                            vocab_size: int = 20,
                            rate: float = 5.0,
                            eta: float = 0.0) -> GenerativeSpec:
    """
    任意のスキーマの上に生成仕様を作る

    informative_channels（チャネル名、省略時は全チャネル）だけがクラスに依存する。
    separationが大きいほどクラス間の分布が離れる。
    """
    rng = np.random.default_rng(seed)
    informative = set(informative_channels) if informative_channels is not None else set(schema.names())
    channels = []
    for descriptor in schema:
        depends = descriptor.name in informative
        if descriptor.is_dense:
            means = [
                (separation * rng.normal(size=d_em) / np.sqrt(d_em) if depends else np.zeros(d_em)).tolist()
                for _ in range(num_classes)
            ]
            channels.append(SyntheticChannel(name=descriptor.name, kind=DENSE, source=descriptor.source,
                                             mean=means, sigma=1.0))
        else:
            base = rng.normal(size=vocab_size)
            theta = [
                softmax(base + (separation * rng.normal(size=vocab_size) if depends else 0.0)).tolist()
                for _ in range(num_classes)
            ]
            channels.append(SyntheticChannel(name=descriptor.name, kind=SPARSE, source=descriptor.source,
                                             theta=theta, rate=rate))
    return GenerativeSpec(priors=[1.0 / num_classes] * num_classes, channels=channels, d_em=d_em, eta=eta)


def _sample_user(spec: GenerativeSpec, rng: np.random.Generator, user_id: str) -> ChannelizedUser:
    label = int(rng.choice(spec.num_classes, p=spec.priors))
    sparse: Dict[int, FrozenSet[int]] = {}
    dense: Dict[int, np.ndarray] = {}
    for r, channel in enumerate(spec.channels):
        if channel.kind == DENSE:
            dense[r] = np.asarray(channel.mean[label]) + channel.sigma * rng.normal(size=spec.d_em)
            continue
        theta = np.asarray(channel.theta[label])
        if channel.activity == "poisson":
            counts = rng.poisson(channel.rate * theta)
            sparse[r] = frozenset(np.flatnonzero(counts).tolist())
        else:
            draws = rng.choice(theta.size, size=int(channel.rate), p=theta)
            sparse[r] = frozenset(int(j) for j in draws)
    return ChannelizedUser(user_id=user_id, sparse=sparse, dense=dense, label=label,
                           meta={"class": str(label)})


def sample_population(spec: GenerativeSpec, n: int,
                      seed: int = 0) -> Tuple[LabeledDataset, List[PartyAnchor]]:
    """
    ユーザーをi.i.d.に生成し、ノイズ付きの政党アンカーを作る

    各ユーザーは確率1-etaで自クラスのアンカーへ、確率etaで他クラスのアンカーへ
    一様に割り当てられ、フォロワーかリツイーターかは等確率で決まる。

    Args:
        spec: 生成仕様
        n: ユーザー数（1以上）
        seed: 乱数シード（同じシードなら同じ結果）

    Returns:
        (合成データセット, クラス順の政党アンカー)
    """
    if n < 1:
        raise ValidationError(f"nは1以上である必要があります: {n}")
    rng = np.random.default_rng(seed)
    width = max(6, len(str(n)))
    users = [_sample_user(spec, rng, f"u{i:0{width}d}") for i in range(n)]

    K = spec.num_classes
    followers: List[List[str]] = [[] for _ in range(K)]
    retweeters: List[List[str]] = [[] for _ in range(K)]
    for user in users:
        party = user.label
        if rng.random() < spec.eta:
            party = int(rng.choice([c for c in range(K) if c != user.label]))
        target = followers if rng.random() < 0.5 else retweeters
        target[party].append(user.user_id)
    anchors = [PartyAnchor(party=f"party{c}", follower_ids=followers[c], retweeter_ids=retweeters[c])
               for c in range(K)]

    dataset = LabeledDataset(users=users, num_classes=K, provenance="synthetic", vocab=spec.vocabulary())
    logger.info(f"Sampled {n} synthetic users, class counts {dataset.class_counts()}")
    return dataset, anchors


def _fixed_set_log_likelihood(theta: np.ndarray, present: Sequence[int], draws: int) -> float:
    # n回の復元抽出で出現集合がちょうどpresentになる確率（包除原理）
    present = list(present)
    total = 0.0
    for size in range(len(present) + 1):
        sign = (-1) ** (len(present) - size)
        for subset in itertools.combinations(present, size):
            total += sign * float(np.sum(theta[list(subset)])) ** draws
    return float(np.log(total)) if total > 0 else -np.inf


def class_log_likelihoods(spec: GenerativeSpec, user: ChannelizedUser) -> np.ndarray:
    """log π_c + Σ_r log P(チャネルr | c)（クラスに依らない定数は省く）"""
    scores = np.log(np.asarray(spec.priors, dtype=float))
    for r, channel in enumerate(spec.channels):
        if channel.kind == DENSE:
            x = np.asarray(user.dense.get(r, np.zeros(spec.d_em)))
            means = np.asarray(channel.mean)
            scores = scores - np.sum((x[None, :] - means) ** 2, axis=1) / (2.0 * channel.sigma ** 2)
            continue
        present = sorted(user.sparse.get(r, ()))
        theta = np.asarray(channel.theta)
        for c in range(spec.num_classes):
            if channel.activity == "poisson":
                mass = channel.rate * theta[c]
                is_present = np.zeros(mass.size, dtype=bool)
                is_present[present] = True
                with np.errstate(divide="ignore"):
                    present_terms = np.log(-np.expm1(-mass[is_present]))
                scores[c] += float(np.sum(present_terms) - np.sum(mass[~is_present]))
            else:
                scores[c] += _fixed_set_log_likelihood(theta[c], present, int(channel.rate))
    return scores


def bayes_oracle_predict(spec: GenerativeSpec, user: ChannelizedUser) -> int:
    return int(np.argmax(class_log_likelihoods(spec, user)))


def bayes_oracle_accuracy(spec: GenerativeSpec, dataset: LabeledDataset) -> float:
    """データセットのうちオラクルの予測が正解と一致する割合"""
    if len(dataset) == 0:
        raise ValidationError("データセットが空です")
    correct = sum(bayes_oracle_predict(spec, u) == u.label for u in dataset)
    return correct / len(dataset)


def calibrated_generative_spec(schema: ChannelSchema,
                               low: float = 0.90,
                               high: float = 0.97,
                               sample_size: int = 2000,
                               max_separation: float = 8.0,
                               max_iterations: int = 30,
                               seed: int = 0,
                               **kwargs) -> Tuple[GenerativeSpec, float]:
    """
    オラクル精度が [low, high] に入るようにseparationを二分探索する

    精度は sample_population(spec, sample_size, seed) 上のモンテカルロ推定。
    それ以外の引数は default_generative_spec にそのまま渡す。

    Returns:
        (生成仕様, その推定オラクル精度)

    Raises:
        ValidationError: 帯が不正な場合、または探索範囲内で帯に入らない場合
    """
    if not 0 < low < high <= 1:
        raise ValidationError(f"精度の帯が不正です: [{low}, {high}]")
    target = (low + high) / 2.0

    def estimate(separation: float) -> Tuple[GenerativeSpec, float]:
        spec = default_generative_spec(schema, separation=separation, seed=seed, **kwargs)
        dataset, _ = sample_population(spec, sample_size, seed=seed)
        return spec, bayes_oracle_accuracy(spec, dataset)

    lo, hi = 0.0, max_separation
    spec, accuracy = estimate(hi)
    if accuracy < low:
        raise ValidationError(f"separation={max_separation} でもオラクル精度が届きません: {accuracy:.3f}",
                              context={'low': low, 'accuracy': accuracy})
    for iteration in range(max_iterations):
        if low <= accuracy <= high:
            break
        middle = (lo + hi) / 2.0
        spec, accuracy = estimate(middle)
        logger.debug(f"calibration step {iteration}: separation={middle:.4f} accuracy={accuracy:.4f}")
        if accuracy < target:
            lo = middle
        else:
            hi = middle
    if not low <= accuracy <= high:
        raise ValidationError(f"オラクル精度を帯に合わせられませんでした: {accuracy:.3f}",
                              context={'low': low, 'high': high, 'accuracy': accuracy})
    logger.info(f"Calibrated oracle accuracy {accuracy:.3f} in [{low}, {high}]")
    return spec, accuracy
