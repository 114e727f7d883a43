"""
評価モジュール

指標、few-shotプロトコル、アブレーションとチャネル重要度、t検定、
グループ単位の集計（州ごとの傾向など）、推論時間の計測を提供する。
"""

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy import stats

from .config_handler import PretrainConfig, TrainConfig
from .error_handler import FileError, NumericalError, ValidationError
from .ingest import EmbeddingProvider, channelize_record, count_tweets, to_users
from .metrics import Metrics, compute_metrics
from .model import ModelParams, h_key, predict, predict_proba_batch
from .models import RawUserRecord, TimeWindow
from .pretrain import pretrain
from .schema import ChannelizedUser, LabeledDataset
from .train import fit, split_dataset

logger = logging.getLogger(__name__)

SIGNIFICANCE_LEVEL = 0.05


def evaluate(params: ModelParams, dataset: LabeledDataset, variant: Optional[str] = None) -> Metrics:
    """
    ラベル付きデータでモデルを評価する

    Raises:
        ValidationError: データが空の場合
    """
    if len(dataset) == 0:
        raise ValidationError("評価データが空です")
    return compute_metrics(dataset.labels, predict(dataset.users, params, variant), params.num_classes)


class RunSummary(BaseModel):
    """複数回の実行の指標と平均・標準偏差（標本標準偏差、1回のみなら0）"""

    shots: Optional[int] = None
    seeds: List[int] = Field(default_factory=list)
    runs: List[Metrics] = Field(..., min_length=1)

    @property
    def n_runs(self) -> int:
        return len(self.runs)

    def values(self, metric: str = "accuracy") -> List[float]:
        return [float(getattr(m, metric)) for m in self.runs]

    def mean(self, metric: str = "accuracy") -> float:
        return float(np.mean(self.values(metric)))

    def std(self, metric: str = "accuracy") -> float:
        values = self.values(metric)
        return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def class_balanced_subsample(dataset: LabeledDataset, shots: int,
                             rng: np.random.Generator) -> LabeledDataset:
    """
    クラスごとにほぼ同数となるようshots件を抽出する

    あるクラスの件数が割り当てに満たない場合、不足分は他クラスから補う。

    Raises:
        ValidationError: shotsがデータ件数を超える場合
    """
    if shots > len(dataset):
        raise ValidationError(f"shotsが学習データ数を超えています: {shots} > {len(dataset)}",
                              context={'shots': shots, 'available': len(dataset)})
    if shots == len(dataset):
        return dataset

    labels = dataset.labels
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in range(dataset.num_classes)]
    quota = [shots // dataset.num_classes + (1 if c < shots % dataset.num_classes else 0)
             for c in range(dataset.num_classes)]
    chosen: List[int] = []
    for c, pool in enumerate(pools):
        chosen.extend(pool[:quota[c]])
        del pool[:quota[c]]
    leftovers = [i for pool in pools for i in pool]
    shortfall = shots - len(chosen)
    if shortfall:
        chosen.extend(rng.choice(leftovers, size=shortfall, replace=False).tolist())
    return dataset.subset(sorted(int(i) for i in chosen))


def _few_shot_run(dataset: LabeledDataset, shots: int, config: TrainConfig, seed: int,
                  init: Optional[ModelParams]) -> Metrics:
    run_config = config.replace(seed=seed)
    split = split_dataset(dataset, config.val_fraction, config.test_fraction, seed)
    if len(split.test) == 0:
        raise ValidationError("テスト分割が空です", context={'test_fraction': config.test_fraction})
    train_set = class_balanced_subsample(split.train, shots, np.random.default_rng(seed))
    params, _ = fit(train_set, split.val, run_config, init)
    return evaluate(params, split.test)


def few_shot_protocol(dataset: LabeledDataset, shots: int, runs: int = 5,
                      config: Optional[TrainConfig] = None,
                      init: Optional[ModelParams] = None,
                      num_threads: Optional[int] = None) -> RunSummary:
    """
    few-shotプロトコル

    実行iはシード config.seed + i で分割（既定80/10/10）し、学習分割から
    クラス均衡でshots件を抽出して学習し、テスト分割で評価する。

    Args:
        dataset: ラベル付きデータ
        shots: 学習に使う件数
        runs: 実行回数（既定5）
        config: 学習設定
        init: 各実行の初期パラメータ（弱教師・事前学習済みモデル）
        num_threads: 並列実行数（省略時はconfig.num_threads）

    Returns:
        RunSummary: 実行順の指標
    """
    config = config or TrainConfig()
    if runs < 1:
        raise ValidationError(f"runsは1以上である必要があります: {runs}")
    seeds = [config.seed + i for i in range(runs)]
    threads = num_threads or config.num_threads

    def run(seed: int) -> Metrics:
        return _few_shot_run(dataset, shots, config, seed, init)

    if threads > 1 and runs > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(run, seeds))
    else:
        results = [run(seed) for seed in seeds]

    summary = RunSummary(shots=shots, seeds=seeds, runs=results)
    logger.info(f"few-shot shots={shots} runs={runs} accuracy={summary.mean():.4f}±{summary.std():.4f}")
    return summary


def channel_importance(dataset: LabeledDataset, config: Optional[TrainConfig] = None,
                       channels: Optional[Sequence[int]] = None) -> Dict[str, float]:
    """
    チャネルを1つずつ空にして再学習したときの精度低下（%ポイント）

    Returns:
        チャネル名 → baseline − accuracy（正なら有益なチャネル）
    """
    config = config or TrainConfig()
    channels = list(channels) if channels is not None else [c.id for c in dataset.schema]

    def test_accuracy(data: LabeledDataset) -> float:
        split = split_dataset(data, config.val_fraction, config.test_fraction, config.seed)
        if len(split.test) == 0:
            raise ValidationError("テスト分割が空です", context={'test_fraction': config.test_fraction})
        params, _ = fit(split.train, split.val, config)
        return evaluate(params, split.test).accuracy

    baseline = test_accuracy(dataset)
    drops: Dict[str, float] = {}
    for r in channels:
        name = dataset.schema[r].name
        drops[name] = 100.0 * (baseline - test_accuracy(dataset.with_channels_emptied([r])))
        logger.info(f"channel {name}: drop {drops[name]:.2f}")
    return drops


@dataclass
class TTestResult:
    t: float
    p: float
    degenerate: bool = False

    @property
    def significant(self) -> bool:
        return self.p < SIGNIFICANCE_LEVEL


def two_sample_t_test(runs_a: Sequence[float], runs_b: Sequence[float]) -> TTestResult:
    """
    スチューデントの2標本t検定（プール分散、自由度 n1+n2-2、両側）

    プール分散が0の場合、平均が等しければ t=0, p=1、異なれば p=0 として
    degenerate を立てる。

    Raises:
        ValidationError: いずれかの標本が2件未満の場合
    """
    a = np.asarray(runs_a, dtype=float)
    b = np.asarray(runs_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValidationError("t検定には各標本2件以上が必要です", context={'n_a': int(a.size), 'n_b': int(b.size)})

    if np.ptp(a) == 0 and np.ptp(b) == 0:
        difference = a.mean() - b.mean()
        if difference == 0:
            return TTestResult(t=0.0, p=1.0)
        logger.warning("Zero pooled variance with unequal means; t-test is degenerate")
        return TTestResult(t=float(np.copysign(np.inf, difference)), p=0.0, degenerate=True)

    result = stats.ttest_ind(a, b, equal_var=True)
    return TTestResult(t=float(result.statistic), p=float(result.pvalue))


def pearson_corr(x: Sequence[float], y: Sequence[float]) -> float:
    """
    ピアソンの相関係数

    Raises:
        ValidationError: 長さが異なる・2未満の場合
        NumericalError: どちらかの分散が0の場合
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValidationError("相関には同じ長さ（2以上）の系列が必要です")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise NumericalError("分散が0のため相関係数は定義されません")
    return float(stats.pearsonr(x, y)[0])


def agreement_rate(preds_a: Sequence[int], preds_b: Sequence[int]) -> float:
    """2つの予測列が一致する割合"""
    a = np.asarray(preds_a)
    b = np.asarray(preds_b)
    if a.shape != b.shape or a.size == 0:
        raise ValidationError("予測列の長さが一致しないか空です", context={'n_a': int(a.size), 'n_b': int(b.size)})
    return float(np.mean(a == b))


def group_leaning(params: ModelParams, groups: Mapping[str, Sequence[ChannelizedUser]],
                  target_class: int = 1) -> Dict[str, float]:
    """グループごとの target_class の予測確率の平均（空のグループは警告して除外）"""
    leaning: Dict[str, float] = {}
    for group, users in groups.items():
        if not users:
            logger.warning(f"Group {group} is empty; excluded")
            continue
        leaning[group] = float(predict_proba_batch(list(users), params)[:, target_class].mean())
    return leaning


@dataclass
class GroupShare:
    n: int
    shares: List[float]
    verdict: str


def group_distribution(params: ModelParams, groups: Mapping[str, Sequence[ChannelizedUser]],
                       neutral_zone: Tuple[float, float] = (0.4, 0.6)) -> Dict[str, GroupShare]:
    """
    グループごとのクラス別予測割合と判定

    2クラスではクラス1の割合がneutral_zone内なら"neutral"、K>2では最大の割合が
    上限以下なら"neutral"、それ以外は最多クラスのインデックスを返す。
    """
    low, high = neutral_zone
    result: Dict[str, GroupShare] = {}
    for group, users in groups.items():
        if not users:
            logger.warning(f"Group {group} is empty; excluded")
            continue
        preds = predict(list(users), params)
        shares = np.bincount(preds, minlength=params.num_classes) / len(preds)
        if params.num_classes == 2:
            neutral = low <= shares[1] <= high
        else:
            neutral = shares.max() <= high
        verdict = "neutral" if neutral else str(int(np.argmax(shares)))
        result[group] = GroupShare(n=len(preds), shares=shares.tolist(), verdict=verdict)
    return result


def group_users(users: Sequence[ChannelizedUser], field_name: str) -> Dict[str, List[ChannelizedUser]]:
    """meta[field_name] でユーザーをまとめる（値のないユーザーは除外）"""
    groups: Dict[str, List[ChannelizedUser]] = {}
    for user in users:
        value = user.meta.get(field_name)
        if value is not None:
            groups.setdefault(value, []).append(user)
    return dict(sorted(groups.items()))


def _channelized(records: Sequence[RawUserRecord], params: ModelParams, provider: EmbeddingProvider,
                 window: Optional[TimeWindow], include_profile: bool) -> List[ChannelizedUser]:
    bags = [channelize_record(r, provider, window, params.schema, include_profile) for r in records]
    return to_users(bags, params.vocab, params.d_em)


@dataclass
class TemporalResult:
    agreement: float
    n_users: int


def temporal_agreement(records: Sequence[RawUserRecord], params: ModelParams,
                       provider: EmbeddingProvider,
                       split_before: Union[str, datetime],
                       split_after: Union[str, datetime],
                       min_tweets: int = 100) -> TemporalResult:
    """
    時点の前後で予測が一致する割合

    前後それぞれにmin_tweets件以上のツイートがあるユーザーに限り、
    プロフィール系チャネルを空にして前半・後半の予測を比較する。

    Raises:
        ValidationError: 条件を満たすユーザーがいない場合
    """
    before = TimeWindow(before=split_before)
    after = TimeWindow(after=split_after)
    active = [r for r in records
              if count_tweets(r, before) >= min_tweets and count_tweets(r, after) >= min_tweets]
    logger.info(f"{len(active)}/{len(records)} users have at least {min_tweets} tweets on both sides")
    if not active:
        raise ValidationError("前後の両方で十分なツイートがあるユーザーがいません",
                              context={'min_tweets': min_tweets})
    preds_before = predict(_channelized(active, params, provider, before, False), params)
    preds_after = predict(_channelized(active, params, provider, after, False), params)
    return TemporalResult(agreement=agreement_rate(preds_before, preds_after), n_users=len(active))


def time_inference(params: ModelParams,
                   users: Sequence[Union[ChannelizedUser, RawUserRecord]],
                   repeats: int = 3,
                   provider: Optional[EmbeddingProvider] = None) -> float:
    """
    1ユーザーあたりの推論時間（秒、repeats回の平均）

    生のレコードを渡した場合はチャネル化（providerが必要）も計測に含める。
    """
    if not users:
        raise ValidationError("ユーザーが空です")
    if repeats < 1:
        raise ValidationError(f"repeatsは1以上である必要があります: {repeats}")
    raw = isinstance(users[0], RawUserRecord)
    if raw and provider is None:
        raise ValidationError("生のレコードにはembedding providerが必要です")

    timings = []
    for _ in range(repeats):
        started = time.perf_counter()
        batch = _channelized(users, params, provider, None, True) if raw else list(users)
        predict_proba_batch(batch, params)
        timings.append(time.perf_counter() - started)
    per_user = float(np.mean(timings)) / len(users)
    logger.debug(f"inference timings {timings} for {len(users)} users")
    return per_user


def top_features(params: ModelParams, channel: Union[int, str], k: int = 10) -> List[Tuple[str, float]]:
    """学習された埋め込み行のL2ノルムが大きいトークン上位k件"""
    descriptor = params.schema.by_name(channel) if isinstance(channel, str) else params.schema[channel]
    if descriptor.is_dense:
        raise ValidationError(f"密チャネルにはトークンがありません: {descriptor.name}")
    norms = np.linalg.norm(params.tensors[h_key(descriptor.id)], axis=1)
    order = np.argsort(-norms, kind="stable")[:k]
    return [(params.vocab.token(descriptor.id, int(i)), float(norms[i])) for i in order]


def relabel(dataset: LabeledDataset, mapping: Mapping[int, int],
            num_classes: Optional[int] = None) -> LabeledDataset:
    """ラベルを付け替える（対応のないラベルのユーザーは除外）"""
    users = [u.replace(label=mapping[u.label]) for u in dataset if u.label in mapping]
    if len(users) < len(dataset):
        logger.warning(f"{len(dataset) - len(users)} users with unmapped labels were dropped")
    num_classes = num_classes or max(2, max(mapping.values()) + 1)
    return LabeledDataset(users=users, num_classes=num_classes, provenance=dataset.provenance, vocab=dataset.vocab)


def ablation_ladder(gold: LabeledDataset, silver: LabeledDataset, shots: int, runs: int = 5,
                    config: Optional[TrainConfig] = None,
                    pretrain_config: Optional[PretrainConfig] = None) -> Dict[str, RunSummary]:
    """
    アブレーション: 基本構造 → +動的拡張 → +弱教師 → +自己教師

    弱教師はシルバーデータで学習したパラメータを、自己教師はシルバーデータで
    事前学習してから弱教師学習したパラメータを few-shot の初期値にする。
    """
    config = config or TrainConfig()
    plain = config.replace(mixup=False, sampling=False, channel_dropout=False)
    ladder: Dict[str, RunSummary] = {}
    ladder["base"] = few_shot_protocol(gold, shots, runs, plain)
    ladder["augmentation"] = few_shot_protocol(gold, shots, runs, config)

    weak, _ = fit(silver, None, config)
    ladder["weak_supervision"] = few_shot_protocol(gold, shots, runs, config, init=weak)

    pretrained = pretrain(silver, pretrain_config or PretrainConfig(d=config.d, seed=config.seed,
                                                                    variant=config.variant))
    weak_from_pretrained, _ = fit(silver, None, config, init=pretrained)
    ladder["self_supervision"] = few_shot_protocol(gold, shots, runs, config, init=weak_from_pretrained)
    return ladder


@dataclass
class VariantComparison:
    summary: RunSummary
    test: Optional[TTestResult]

    @property
    def significant(self) -> bool:
        return self.test is not None and self.test.significant


def compare_variants(dataset: LabeledDataset, shots: int, runs: int = 5,
                     config: Optional[TrainConfig] = None,
                     metric: str = "accuracy") -> Dict[str, VariantComparison]:
    """dyattn / fixedattn / auto を比較し、dyattnに対するt検定を付ける"""
    config = config or TrainConfig()
    summaries = {variant: few_shot_protocol(dataset, shots, runs, config.replace(variant=variant))
                 for variant in ("dyattn", "fixedattn", "auto")}
    reference = summaries["dyattn"].values(metric)
    comparison: Dict[str, VariantComparison] = {}
    for variant, summary in summaries.items():
        test = None
        if variant != "dyattn" and runs >= 2:
            test = two_sample_t_test(reference, summary.values(metric))
        comparison[variant] = VariantComparison(summary=summary, test=test)
    return comparison


def _open_for_write(file_path: str):
    try:
        return open(file_path, 'w', encoding='utf-8', newline='')
    except OSError as e:
        raise FileError(f"レポートの書き込みエラー: {e}", file_path=str(file_path), operation="write") from e


def write_metrics_json(metrics: Metrics, file_path: str) -> None:
    with _open_for_write(file_path) as f:
        f.write(json.dumps(metrics.model_dump(), sort_keys=True, indent=2))
        f.write("\n")


def write_metrics_csv(metrics: Metrics, file_path: str) -> None:
    with _open_for_write(file_path) as f:
        writer = csv.writer(f)
        writer.writerow(["class", "precision", "recall", "f1"])
        for c in range(metrics.num_classes):
            writer.writerow([c, f"{metrics.precision[c]:.6f}", f"{metrics.recall[c]:.6f}",
                             f"{metrics.f1_per_class[c]:.6f}"])
        writer.writerow(["accuracy", "", "", f"{metrics.accuracy:.6f}"])
        writer.writerow(["f1", "", "", f"{metrics.f1:.6f}"])
        writer.writerow(["weighted_f1", "", "", f"{metrics.weighted_f1:.6f}"])


def write_confusion_csv(metrics: Metrics, file_path: str) -> None:
    with _open_for_write(file_path) as f:
        csv.writer(f).writerows(metrics.confusion)


def write_runs_csv(summaries: Sequence[RunSummary], file_path: str) -> None:
    """few-shotの実行ごとの指標（shots, run, seed, accuracy, f1, macro_f1, weighted_f1）"""
    with _open_for_write(file_path) as f:
        writer = csv.writer(f)
        writer.writerow(["shots", "run", "seed", "accuracy", "f1", "macro_f1", "weighted_f1"])
        for summary in summaries:
            for run, (seed, m) in enumerate(zip(summary.seeds, summary.runs)):
                writer.writerow([summary.shots, run, seed, f"{m.accuracy:.6f}", f"{m.f1:.6f}",
                                 f"{m.macro_f1:.6f}", f"{m.weighted_f1:.6f}"])


def read_runs_csv(file_path: str, metric: str = "accuracy", shots: Optional[int] = None) -> List[float]:
    """write_runs_csvの出力から1指標の値を読む（shots指定時はその行のみ）"""
    try:
        with open(file_path, 'r', encoding='utf-8', newline='') as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise FileError(f"実行結果の読み込みエラー: {e}", file_path=str(file_path), operation="read") from e
    if rows and metric not in rows[0]:
        raise ValidationError(f"未知の指標です: {metric}", context={'file_path': str(file_path)})
    return [float(row[metric]) for row in rows if shots is None or int(row["shots"]) == shots]


def write_importance_csv(drops: Mapping[str, float], file_path: str) -> None:
    with _open_for_write(file_path) as f:
        writer = csv.writer(f)
        writer.writerow(["channel", "drop_pct"])
        for name, drop in sorted(drops.items(), key=lambda item: -item[1]):
            writer.writerow([name, f"{drop:.4f}"])


def write_group_csv(leaning: Mapping[str, float], groups: Mapping[str, Sequence[ChannelizedUser]],
                    file_path: str) -> None:
    with _open_for_write(file_path) as f:
        writer = csv.writer(f)
        writer.writerow(["group", "mean_leaning", "n"])
        for group, value in leaning.items():
            writer.writerow([group, f"{value:.6f}", len(groups[group])])