"""
教師あり学習モジュール

交差エントロピー損失、全パラメータの勾配、Adam、3種類の動的データ拡張
（mixup・サンプリング・チャネルドロップアウト）と学習ループを提供する。
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config_handler import TrainConfig
from .error_handler import ConfigurationError, FileError, NumericalError, ValidationError
from .metrics import Metrics, compute_metrics
from .model import ForwardCache, ModelParams, backward, forward, init_params, pack_batch, predict
from .schema import ChannelizedUser, LabeledDataset

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
DEFAULT_D_EM = 768


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    targets = np.zeros((labels.size, num_classes))
    targets[np.arange(labels.size), labels] = 1.0
    return targets


def classification_loss(probs: Sequence[float], target: Union[int, Sequence[float]]) -> float:
    """
    1ユーザー分の交差エントロピー -Σ_c y_c log p_c

    Args:
        probs: クラス確率（長さK）
        target: クラスインデックス、またはmixupのソフトラベル

    Returns:
        損失値（正の重みのクラスで確率0の場合は1e-12で下限を取り警告する）
    """
    probs = np.asarray(probs, dtype=float)
    if np.isscalar(target) or np.ndim(target) == 0:
        weights = one_hot([int(target)], probs.size)[0]
    else:
        weights = np.asarray(target, dtype=float)
    active = weights > 0
    if np.any(probs[active] < PROB_FLOOR):
        logger.warning("Probability below 1e-12 at a target class; clamped")
    clamped = np.maximum(probs[active], PROB_FLOOR)
    return float(-np.sum(weights[active] * np.log(clamped)))


def cross_entropy_terms(cache: ForwardCache, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    バッチの例ごとの損失とロジット勾配（平均化前）

    Raises:
        NumericalError: 損失が有限でない例がある場合（そのユーザーIDを含む）
    """
    losses = -np.sum(targets * cache.log_probs, axis=1)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        index = int(bad[0])
        raise NumericalError("損失が有限ではありません",
                             user_id=cache.batch.user_ids[index], value=float(losses[index]))
    # 2値（logistic）でも多値（softmax）でも p - y
    return losses, cache.probs - targets


def _targets_for(users: Sequence[ChannelizedUser], num_classes: int) -> np.ndarray:
    missing = [u.user_id for u in users if u.label is None]
    if missing:
        raise ValidationError(f"ラベルのないユーザーがあります: {missing[0]}", context={'user_id': missing[0]})
    return one_hot([u.label for u in users], num_classes)


def gradients(users: Sequence[ChannelizedUser], params: ModelParams,
              variant: Optional[str] = None,
              targets: Optional[np.ndarray] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    バッチ平均損失とその全パラメータに対する勾配

    Args:
        users: バッチ（空は不可）
        params: 現在のパラメータ
        variant: アテンション変種（省略時はparams.variant）
        targets: (B, K) のソフトラベル。省略時はユーザーのラベルのone-hot

    Returns:
        (平均損失, パラメータ名 → 勾配)
    """
    if not users:
        raise ValidationError("バッチが空です")
    if targets is None:
        targets = _targets_for(users, params.num_classes)
    cache = forward(pack_batch(users, params), params, variant)
    losses, d_logits = cross_entropy_terms(cache, targets)
    batch_size = len(users)
    return float(losses.mean()), backward(cache, params, d_logits=d_logits / batch_size)


@dataclass
class AdamState:
    """Adamの1次・2次モーメントとステップ数"""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> Tuple[ModelParams, AdamState]:
    """
    バイアス補正付きAdamの1ステップ（入力は変更せず新しい値を返す）

    Raises:
        ValidationError: 勾配の形状がパラメータと一致しない場合
    """
    new_params = params.copy()
    new_params.tensors, new_state = adam_update(params.tensors, grads, state, lr, beta1, beta2, eps,
                                                weight_decay)
    return new_params, new_state


def decays(name: str) -> bool:
    """重み減衰の対象（埋め込み・射影・クエリ/キー・出力の行列）"""
    return name.startswith(("H:", "W:")) or name in ("q", "k", "w_out")


def adam_update(tensors: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8, weight_decay: float = 0.0) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """名前付きテンソル辞書に対するAdam更新（勾配のない名前はゼロ勾配扱い）

    weight_decay > 0 のとき、行列パラメータを勾配とは切り離して lr·weight_decay の割合で縮める。
    """
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    updated: Dict[str, np.ndarray] = {}
    new_state = AdamState(t=t)

    for name, value in tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        if g.shape != value.shape:
            raise ValidationError(f"勾配の形状が一致しません: {name}",
                                  context={'expected': value.shape, 'actual': g.shape})
        m = beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(value)) + (1.0 - beta2) * (g * g)
        new_state.m[name] = m
        new_state.v[name] = v
        if weight_decay and decays(name):
            value = value * (1.0 - lr * weight_decay)
        updated[name] = value - (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    return updated, new_state


def augment_mixup(u1: ChannelizedUser, u2: ChannelizedUser, rng: np.random.Generator,
                  alpha: float = 0.1, num_classes: int = 2,
                  lam: Optional[float] = None) -> Tuple[ChannelizedUser, np.ndarray]:
    """
    2ユーザーの確率的mixup

    λ ~ Beta(alpha, alpha) を引き、疎チャネルではu1の各特徴を確率λで、
    u2の各特徴を確率1-λで残して和集合を取る。密チャネルは線形補間。

    Args:
        u1, u2: ラベル付きユーザー
        rng: 乱数生成器
        alpha: Beta分布のパラメータ
        num_classes: クラス数K
        lam: 指定した場合はλを固定する

    Returns:
        (混合ユーザー, ソフトラベル λ·y1 + (1-λ)·y2)
    """
    if u1.label is None or u2.label is None:
        raise ValidationError("mixupにはラベル付きユーザーが必要です")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))

    sparse: Dict[int, FrozenSet[int]] = {}
    for r in sorted(set(u1.sparse) | set(u2.sparse)):
        first = sorted(u1.sparse.get(r, ()))
        second = sorted(u2.sparse.get(r, ()))
        keep_first = rng.random(len(first)) < lam
        keep_second = rng.random(len(second)) < 1.0 - lam
        sparse[r] = frozenset(
            [f for f, keep in zip(first, keep_first) if keep]
            + [f for f, keep in zip(second, keep_second) if keep]
        )

    dense: Dict[int, np.ndarray] = {}
    for r in sorted(set(u1.dense) | set(u2.dense)):
        v1 = u1.dense.get(r)
        v2 = u2.dense.get(r)
        if v1 is None:
            v1 = np.zeros_like(v2)
        if v2 is None:
            v2 = np.zeros_like(v1)
        dense[r] = lam * v1 + (1.0 - lam) * v2

    soft = lam * one_hot([u1.label], num_classes)[0] + (1.0 - lam) * one_hot([u2.label], num_classes)[0]
    mixed = ChannelizedUser(
        user_id=f"{u1.user_id}~{u2.user_id}",
        sparse=sparse,
        dense=dense,
        label=u1.label if lam >= 0.5 else u2.label,
    )
    return mixed, soft


def augment_sample(user: ChannelizedUser, rng: np.random.Generator,
                   rate_max: float = 0.15) -> Tuple[ChannelizedUser, Dict[int, FrozenSet[int]]]:
    """
    疎チャネルごとに m ~ U(0, rate_max) を引き、各特徴を確率mで落とす

    Returns:
        (残った特徴のユーザー, チャネルごとの落とした特徴)
    """
    kept: Dict[int, FrozenSet[int]] = {}
    masked: Dict[int, FrozenSet[int]] = {}
    for r in sorted(user.sparse):
        features = sorted(user.sparse[r])
        rate = rng.uniform(0.0, rate_max)
        drop = rng.random(len(features)) < rate
        masked[r] = frozenset(f for f, d in zip(features, drop) if d)
        kept[r] = frozenset(f for f, d in zip(features, drop) if not d)
    return user.replace(sparse=kept), masked


def augment_channel_dropout(user: ChannelizedUser, rng: np.random.Generator,
                            prob: float = 0.1) -> ChannelizedUser:
    """各チャネルを確率probで独立に空にする"""
    channels = sorted(set(user.sparse) | set(user.dense))
    dropped = [r for r, d in zip(channels, rng.random(len(channels)) < prob) if d]
    return user.emptied(dropped) if dropped else user


@dataclass
class AugmentedBatch:
    """拡張済みバッチ

    Attributes:
        users: サンプリング・ドロップアウト後のユーザーの後にmixup例が続く
        targets: (len(users), K) のソフトラベル
        masked: 先頭ユーザーごとのサンプリングで落とした特徴
    """
    users: List[ChannelizedUser]
    targets: Optional[np.ndarray]
    masked: List[Dict[int, FrozenSet[int]]]


def augment_batch(users: Sequence[ChannelizedUser], rng: np.random.Generator,
                  config: TrainConfig, num_classes: int, labeled: bool = True) -> AugmentedBatch:
    """サンプリング → チャネルドロップアウト → mixup（サンプリング後のユーザーから組を作る）"""
    current = list(users)
    masked: List[Dict[int, FrozenSet[int]]] = [{} for _ in current]
    if config.sampling:
        sampled = [augment_sample(u, rng, config.sample_rate_max) for u in current]
        current = [u for u, _ in sampled]
        masked = [m for _, m in sampled]
    if config.channel_dropout:
        current = [augment_channel_dropout(u, rng, config.channel_dropout_prob) for u in current]
    if not labeled:
        return AugmentedBatch(users=current, targets=None, masked=masked)

    targets = _targets_for(current, num_classes)
    if config.mixup:
        partners = rng.integers(0, len(current), size=len(current))
        mixed = [augment_mixup(u, current[j], rng, config.mixup_alpha, num_classes)
                 for u, j in zip(current, partners)]
        current = current + [u for u, _ in mixed]
        targets = np.vstack([targets, np.stack([soft for _, soft in mixed])])
    return AugmentedBatch(users=current, targets=targets, masked=masked)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: Optional[float]
    val_f1: Optional[float]
    seconds: float = field(default=0.0, compare=False)


@dataclass
class TrainingLog:
    """エポックごとの記録と選択されたチェックポイント"""
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    test_metrics: Optional[Metrics] = None


@dataclass
class DatasetSplit:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


def split_dataset(dataset: LabeledDataset, val_fraction: float = 0.1,
                  test_fraction: float = 0.1, seed: int = 0) -> DatasetSplit:
    """シード付きシャッフルで学習・検証・テストに分割する"""
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_test = int(round(len(dataset) * test_fraction))
    n_val = int(round(len(dataset) * val_fraction))
    return DatasetSplit(
        test=dataset.subset(order[:n_test]),
        val=dataset.subset(order[n_test:n_test + n_val]),
        train=dataset.subset(order[n_test + n_val:]),
    )


def infer_d_em(users: Sequence[ChannelizedUser], default: int = DEFAULT_D_EM) -> int:
    for user in users:
        for vector in user.dense.values():
            return int(np.asarray(vector).size)
    return default


def evaluate_users(params: ModelParams, users: Sequence[ChannelizedUser],
                   variant: Optional[str] = None) -> Metrics:
    labels = [u.label for u in users]
    return compute_metrics(labels, predict(users, params, variant), params.num_classes)


def fit(train_set: LabeledDataset, val_set: Optional[LabeledDataset], config: TrainConfig,
        init: Optional[ModelParams] = None) -> Tuple[ModelParams, TrainingLog]:
    """
    ミニバッチ学習ループ

    検証データがあれば検証精度が最良のエポックのパラメータを返し、
    無ければ最終エポックのパラメータを返す。

    Args:
        train_set: 学習データ
        val_set: 検証データ（Noneまたは空でもよい）
        config: 学習設定
        init: 初期パラメータ（省略時はconfig.seedで初期化）

    Returns:
        (パラメータ, 学習ログ)

    Raises:
        ConfigurationError: 学習データが空の場合
    """
    num_classes = init.num_classes if init is not None else train_set.num_classes
    if init is None:
        init = init_params(train_set.schema, train_set.vocab, d=config.d,
                           d_em=infer_d_em(train_set.users), num_classes=num_classes,
                           seed=config.seed, variant=config.variant)
    log = TrainingLog()
    if config.epochs == 0:
        return init, log
    if len(train_set) == 0:
        raise ConfigurationError("学習データが空です", key="train_split", value=0)

    params = init if init.variant == config.variant else init.with_variant(config.variant)
    val_users = list(val_set.users) if val_set is not None else []
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    best_params, best_acc = params, -1.0

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            users = [train_set.users[i] for i in order[start:start + config.batch_size]]
            batch = augment_batch(users, rng, config, num_classes)
            loss, grads = gradients(batch.users, params, config.variant, batch.targets)
            params, state = adam_step(params, grads, state, config.learning_rate,
                                      config.beta1, config.beta2, config.adam_eps, config.weight_decay)
            total += loss * len(batch.users)
            count += len(batch.users)

        val_acc = val_f1 = None
        if val_users:
            metrics = evaluate_users(params, val_users)
            val_acc, val_f1 = metrics.accuracy, metrics.f1
            if val_acc > best_acc:
                best_params, best_acc, log.best_epoch = params, val_acc, epoch
        record = EpochRecord(epoch=epoch, train_loss=total / count, val_acc=val_acc, val_f1=val_f1,
                             seconds=time.perf_counter() - started)
        log.epochs.append(record)
        logger.info(f"epoch {epoch}/{config.epochs} loss={record.train_loss:.4f} val_acc={val_acc}")

    if not val_users:
        best_params, log.best_epoch = params, config.epochs
    return best_params, log


def train(dataset: LabeledDataset, config: TrainConfig,
          init: Optional[ModelParams] = None) -> Tuple[ModelParams, TrainingLog]:
    """データを分割して学習し、テスト分割の指標をログに付ける"""
    split = split_dataset(dataset, config.val_fraction, config.test_fraction, config.seed)
    logger.info(f"split train={len(split.train)} val={len(split.val)} test={len(split.test)}")
    params, log = fit(split.train, split.val, config, init)
    if len(split.test):
        log.test_metrics = evaluate_users(params, split.test.users)
        logger.info(f"test accuracy={log.test_metrics.accuracy:.4f} f1={log.test_metrics.f1:.4f}")
    return params, log


def write_training_log(log: TrainingLog, file_path: str) -> None:
    """学習ログをCSV（epoch, train_loss, val_acc, val_f1, seconds）で保存する"""
    try:
        with open(file_path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "val_acc", "val_f1", "seconds"])
            for r in log.epochs:
                writer.writerow([r.epoch, f"{r.train_loss:.6f}",
                                 "" if r.val_acc is None else f"{r.val_acc:.6f}",
                                 "" if r.val_f1 is None else f"{r.val_f1:.6f}",
                                 f"{r.seconds:.3f}"])
    except OSError as e:
        raise FileError(f"学習ログの書き込みエラー: {e}", file_path=str(file_path), operation="write") from e
