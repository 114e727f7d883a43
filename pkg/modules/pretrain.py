"""
弱教師・自己教師による事前学習モジュール

政党アンカーのフォロワー・リツイーターからシルバーラベルを作り、
サンプリングで落とした疎特徴を h_i から予測する自己教師損失と
mixup損失の和で事前学習する。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax

from .config_handler import PretrainConfig
from .error_handler import CorruptionError, SilverSizeError, ValidationError
from .model import ModelParams, backward, forward, init_params, pack_batch
from .models import PartyAnchor
from .schema import ChannelizedUser, LabeledDataset, Vocabulary
from .train import (AdamState, AugmentedBatch, adam_update, augment_batch, cross_entropy_terms,
                    infer_d_em)

logger = logging.getLogger(__name__)

DEFAULT_POOL_SIZE = 75000
DEFAULT_SAMPLE_PER_PARTY = 2500


@dataclass
class SilverDataset:
    """シルバーラベル（ユーザーID → 政党インデックス）

    Attributes:
        parties: 政党名（インデックス順）
        assignments: 抽出順の (user_id, label)
        counts: 政党ごとの抽出数
    """
    parties: List[str]
    assignments: List[Tuple[str, int]]
    counts: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.assignments)

    @property
    def num_classes(self) -> int:
        return len(self.parties)

    def to_dataset(self, users_by_id: Mapping[str, ChannelizedUser], vocab: Vocabulary) -> LabeledDataset:
        """チャネル化済みユーザーと結合する（データのないIDは警告してスキップ）"""
        users = []
        missing = 0
        for user_id, label in self.assignments:
            user = users_by_id.get(user_id)
            if user is None:
                missing += 1
                continue
            users.append(user.replace(label=label))
        if missing:
            logger.warning(f"{missing} silver users have no channel data; skipped")
        return LabeledDataset(users=users, num_classes=self.num_classes, provenance="silver", vocab=vocab)


def _dedupe(ids: Sequence[str]) -> List[str]:
    return list(dict.fromkeys(ids))


def build_silver_labels(anchors: Sequence[PartyAnchor],
                        pool_size: int = DEFAULT_POOL_SIZE,
                        sample_per_party: int = DEFAULT_SAMPLE_PER_PARTY,
                        rng: Optional[np.random.Generator] = None) -> SilverDataset:
    """
    アンカーからシルバーラベルを作る

    政党ごとにフォロワーとリツイーターの先頭pool_size件をプールとし、
    複数政党のプールに現れるIDを除いてから、フォロワーとリツイーターから
    それぞれsample_per_party件を非復元抽出する。空のリストは読み飛ばす。

    Args:
        anchors: 2件以上の政党アンカー
        pool_size: リストごとのプールの大きさ
        sample_per_party: リストごとの抽出数
        rng: 乱数生成器

    Returns:
        SilverDataset: ラベルは anchors の順序

    Raises:
        ValidationError: アンカーが2件未満、またはpool_size < sample_per_party の場合
        SilverSizeError: 重複除去後のIDがsample_per_party未満の場合
    """
    if len(anchors) < 2:
        raise ValidationError("政党アンカーは2件以上必要です", context={'anchors': len(anchors)})
    if pool_size < sample_per_party:
        raise ValidationError("pool_sizeはsample_per_party以上である必要があります",
                              context={'pool_size': pool_size, 'sample_per_party': sample_per_party})
    rng = rng if rng is not None else np.random.default_rng()

    pools = [(_dedupe(a.follower_ids)[:pool_size], _dedupe(a.retweeter_ids)[:pool_size]) for a in anchors]
    membership: Dict[str, int] = {}
    for followers, retweeters in pools:
        for user_id in set(followers) | set(retweeters):
            membership[user_id] = membership.get(user_id, 0) + 1
    shared = {user_id for user_id, n in membership.items() if n > 1}
    if shared:
        logger.info(f"Removed {len(shared)} ids that appear in more than one party's pools")

    assignments: List[Tuple[str, int]] = []
    counts: Dict[str, int] = {}
    for label, (anchor, (followers, retweeters)) in enumerate(zip(anchors, pools)):
        chosen: List[str] = []
        for kind, pool in (("followers", followers), ("retweeters", retweeters)):
            if not pool:
                logger.warning(f"{anchor.party}: no {kind}; skipped")
                continue
            taken = set(chosen)
            available = [u for u in pool if u not in shared and u not in taken]
            if len(available) < sample_per_party:
                raise SilverSizeError(f"{anchor.party}の{kind}が不足しています", party=anchor.party,
                                      available=len(available), requested=sample_per_party)
            picks = rng.choice(len(available), size=sample_per_party, replace=False)
            chosen.extend(available[i] for i in picks)
        assignments.extend((user_id, label) for user_id in chosen)
        counts[anchor.party] = len(chosen)

    return SilverDataset(parties=[a.party for a in anchors], assignments=assignments, counts=counts)


@dataclass
class SelfSupHeads:
    """疎チャネルごとの語彙ロジットを h_i から出す予測ネットワーク

    tensors のキー:
        "F:<r>" (in_dim, Vlen_r), "Fb:<r>" (Vlen_r,)
        hidden_dim > 0 のとき共有のtanh隠れ層 "G" (d, hidden_dim), "Gb" (hidden_dim,)
    """
    tensors: Dict[str, np.ndarray]
    hidden_dim: int = 0

    @property
    def channels(self) -> List[int]:
        return sorted(int(name[2:]) for name in self.tensors if name.startswith("F:"))


def init_selfsup_heads(vocab: Vocabulary, d: int, hidden_dim: int = 0, seed: int = 0) -> SelfSupHeads:
    rng = np.random.default_rng(seed)
    in_dim = hidden_dim or d
    bound = 1.0 / np.sqrt(in_dim)
    tensors: Dict[str, np.ndarray] = {}
    if hidden_dim:
        tensors["G"] = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(d, hidden_dim))
        tensors["Gb"] = np.zeros(hidden_dim)
    for r in vocab.schema.sparse_ids:
        tensors[f"F:{r}"] = rng.uniform(-bound, bound, size=(in_dim, vocab.size(r)))
        tensors[f"Fb:{r}"] = np.zeros(vocab.size(r))
    return SelfSupHeads(tensors=tensors, hidden_dim=hidden_dim)


def _trunk(h: np.ndarray, heads: SelfSupHeads) -> np.ndarray:
    if heads.hidden_dim:
        return np.tanh(h @ heads.tensors["G"] + heads.tensors["Gb"])
    return h


def _check_masked(r: int, indices: np.ndarray, heads: SelfSupHeads) -> None:
    if f"F:{r}" not in heads.tensors:
        raise ValidationError(f"自己教師ヘッドのない（密）チャネルです: {r}", context={'channel': r})
    limit = heads.tensors[f"Fb:{r}"].size
    if indices.size and (indices.max() >= limit or indices.min() < 0):
        raise CorruptionError("マスクされた特徴が語彙の範囲外です", channel=str(r),
                              index=int(indices.max()), limit=limit)


def selfsup_loss(h: np.ndarray, masked: Mapping[int, FrozenSet[int]], heads: SelfSupHeads) -> float:
    """
    L_ss = Σ_r Σ_{j ∈ masked[r]} -log softmax(F_r(h))[j]

    Raises:
        CorruptionError: マスクのインデックスがVlen_r以上の場合
    """
    trunk = _trunk(np.asarray(h, dtype=float)[None, :], heads)[0]
    total = 0.0
    for r, features in masked.items():
        indices = np.asarray(sorted(features), dtype=np.int64)
        _check_masked(r, indices, heads)
        if indices.size == 0:
            continue
        logits = trunk @ heads.tensors[f"F:{r}"] + heads.tensors[f"Fb:{r}"]
        total -= float(np.sum(log_softmax(logits)[indices]))
    return total


def selfsup_terms(h: np.ndarray, masked: Sequence[Mapping[int, FrozenSet[int]]],
                  heads: SelfSupHeads) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    """
    バッチの自己教師損失と勾配（平均化前）

    Args:
        h: (B, d) ユーザー埋め込み
        masked: ユーザーごとのマスク
        heads: 予測ヘッド

    Returns:
        (ユーザーごとの損失 (B,), hに対する勾配 (B, d), ヘッドの勾配)
    """
    T = heads.tensors
    trunk = _trunk(h, heads)
    losses = np.zeros(h.shape[0])
    d_trunk = np.zeros_like(trunk)
    grads = {name: np.zeros_like(value) for name, value in T.items()}

    for r in heads.channels:
        rows, counts_rows, cols = [], [], []
        for i, user_masked in enumerate(masked):
            indices = np.asarray(sorted(user_masked.get(r, ())), dtype=np.int64)
            _check_masked(r, indices, heads)
            if indices.size:
                rows.append(i)
                counts_rows.extend([len(rows) - 1] * indices.size)
                cols.extend(indices.tolist())
        if not rows:
            continue
        rows = np.asarray(rows)
        logits = trunk[rows] @ T[f"F:{r}"] + T[f"Fb:{r}"]
        log_probs = log_softmax(logits, axis=1)
        counts = np.zeros_like(logits)
        np.add.at(counts, (np.asarray(counts_rows), np.asarray(cols)), 1.0)
        losses[rows] -= np.sum(counts * log_probs, axis=1)
        # d/dz [-Σ_j log softmax(z)_j] = |M| softmax(z) - 1_M
        d_logits = counts.sum(axis=1, keepdims=True) * softmax(logits, axis=1) - counts
        grads[f"F:{r}"] += trunk[rows].T @ d_logits
        grads[f"Fb:{r}"] += d_logits.sum(axis=0)
        d_trunk[rows] += d_logits @ T[f"F:{r}"].T

    if heads.hidden_dim:
        d_pre = d_trunk * (1.0 - trunk ** 2)
        grads["G"] = h.T @ d_pre
        grads["Gb"] = d_pre.sum(axis=0)
        return losses, d_pre @ T["G"].T, grads
    return losses, d_trunk, grads


@dataclass
class PretrainLoss:
    total: float
    mixup: float
    selfsup: float
    grads: Dict[str, np.ndarray]
    head_grads: Dict[str, np.ndarray]


def pretraining_loss(batch: AugmentedBatch, params: ModelParams, heads: SelfSupHeads,
                     variant: Optional[str] = None) -> PretrainLoss:
    """
    L = L_mixup + L_ss と勾配

    L_mixupはbatch.targetsがあるときのみ（拡張済みバッチ全体の平均交差エントロピー）。
    L_ssは先頭のサンプリング済みユーザーの平均。
    """
    cache = forward(pack_batch(batch.users, params), params, variant)
    n_sampled = len(batch.masked)

    d_logits = None
    mixup = 0.0
    if batch.targets is not None:
        losses, d_logits = cross_entropy_terms(cache, batch.targets)
        mixup = float(losses.mean())
        d_logits = d_logits / len(batch.users)

    ss_losses, d_h_sampled, head_grads = selfsup_terms(cache.h[:n_sampled], batch.masked, heads)
    selfsup = float(ss_losses.mean()) if n_sampled else 0.0
    d_h = np.zeros_like(cache.h)
    if n_sampled:
        d_h[:n_sampled] = d_h_sampled / n_sampled
        head_grads = {name: g / n_sampled for name, g in head_grads.items()}

    grads = backward(cache, params, d_logits=d_logits, d_h=d_h)
    return PretrainLoss(total=mixup + selfsup, mixup=mixup, selfsup=selfsup, grads=grads, head_grads=head_grads)


def pretrain(data: Union[LabeledDataset, Sequence[ChannelizedUser]],
             config: Optional[PretrainConfig] = None,
             init: Optional[ModelParams] = None,
             heads: Optional[SelfSupHeads] = None,
             vocab: Optional[Vocabulary] = None,
             num_classes: int = 2) -> ModelParams:
    """
    mixup損失と自己教師損失による事前学習

    ラベルなしユーザー列を渡した場合はmixup項を無効にする。予測ヘッドは
    学習後に捨て、基底モデルのパラメータのみを返す。

    Args:
        data: シルバーラベル付きデータ、またはラベルなしユーザー
        config: 事前学習設定（省略時は既定値: lr 3e-5, 5エポック）
        init: 初期パラメータ
        heads: 予測ヘッドの初期値（省略時はconfig.ss_hidden_dimで初期化）
        vocab: ラベルなし入力でinitが無い場合の語彙
        num_classes: ラベルなし入力でinitが無い場合のクラス数

    Returns:
        ModelParams: 事前学習済みパラメータ
    """
    config = config or PretrainConfig()
    labeled = isinstance(data, LabeledDataset)
    users = list(data.users) if labeled else list(data)
    if labeled:
        vocab, num_classes = data.vocab, data.num_classes
    if init is None:
        if vocab is None:
            raise ValidationError("ラベルなし入力にはinitまたはvocabが必要です")
        init = init_params(vocab.schema, vocab, d=config.d, d_em=infer_d_em(users),
                           num_classes=num_classes, seed=config.seed, variant=config.variant)
    if config.epochs == 0:
        return init
    if not users:
        raise ValidationError("事前学習データが空です")
    if not labeled:
        logger.info("Unlabeled input: mixup term disabled")

    params = init if init.variant == config.variant else init.with_variant(config.variant)
    heads = heads or init_selfsup_heads(params.vocab, params.d, config.ss_hidden_dim, config.seed)
    rng = np.random.default_rng(config.seed)
    state, head_state = AdamState(), AdamState()

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(users))
        total = mixup = selfsup = 0.0
        steps = 0
        for start in range(0, len(order), config.batch_size):
            chunk = [users[i] for i in order[start:start + config.batch_size]]
            batch = augment_batch(chunk, rng, config, params.num_classes, labeled=labeled)
            result = pretraining_loss(batch, params, heads, config.variant)
            params = params.copy()
            params.tensors, state = adam_update(params.tensors, result.grads, state, config.learning_rate,
                                                config.beta1, config.beta2, config.adam_eps, config.weight_decay)
            head_tensors, head_state = adam_update(heads.tensors, result.head_grads, head_state,
                                                   config.learning_rate, config.beta1, config.beta2,
                                                   config.adam_eps)
            heads = SelfSupHeads(tensors=head_tensors, hidden_dim=heads.hidden_dim)
            total += result.total
            mixup += result.mixup
            selfsup += result.selfsup
            steps += 1
        logger.info(f"pretrain epoch {epoch}/{config.epochs} loss={total / steps:.4f} "
                    f"mixup={mixup / steps:.4f} ss={selfsup / steps:.4f}")
    return params
