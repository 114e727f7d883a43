#!/usr/bin/env python3
"""
FSSPIP コマンドラインツール

アーカイブの取り込みから語彙・シルバーラベル・事前学習・学習・評価・分析、
合成データによる検証までをサブコマンドで実行する。

使用例:
1. 合成データで一通り:
   fsspip simulate --spec spec.json --n 2000 --seed 0 --out data.jsonl --anchors-out anchors.jsonl
   fsspip oracle --spec spec.json --data data.jsonl
   fsspip train --data data.jsonl --variant dyattn --out model.json
   fsspip eval --ckpt model.json --data data.jsonl --report metrics.json

2. アーカイブから推論:
   fsspip predict --ckpt model.json --archive users.jsonl --out predictions.csv
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

# プロジェクトルートをPythonパスに追加
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

import numpy as np

from modules.archive_parser import ArchiveParser, ensure_parent, read_anchors
from modules.config_handler import ConfigHandler, PretrainConfig, TrainConfig
from modules.error_handler import (EXIT_OK, DigestMismatchError, ErrorHandler, FileError, ValidationError)
from modules.evaluator import (evaluate, few_shot_protocol, channel_importance, group_leaning, group_users,
                               read_runs_csv, two_sample_t_test, write_confusion_csv, write_group_csv,
                               write_importance_csv, write_metrics_json, write_runs_csv)
from modules.ingest import (FileEmbeddingProvider, HashingEmbeddingProvider, bag_tokens, channelize_archive,
                            to_bag_records, to_dataset, to_users)
from modules.model import ModelParams, load_checkpoint, predict_proba_batch, save_checkpoint
from modules.models import BagRecord, RunManifest, TimeWindow
from modules.pretrain import build_silver_labels, pretrain
from modules.schema import (ChannelSchema, LabeledDataset, Vocabulary, build_vocabulary, load_schema,
                            load_vocabulary, save_schema, save_vocabulary, schema_default)
from modules.simgen import bayes_oracle_accuracy, load_generative_spec, sample_population
from modules.train import fit, train, write_training_log

logger = logging.getLogger("fsspip")

MANIFEST_SUFFIX = ".manifest.json"
SCHEMA_SUFFIX = ".schema.json"
VOCAB_SUFFIX = ".vocab.tsv"
ORACLE_SUFFIX = ".oracle.json"
TTEST_SUFFIX = ".ttest.json"


def sha256_file(file_path: str) -> str:
    digest = hashlib.sha256()
    try:
        with open(file_path, 'rb') as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                digest.update(block)
    except OSError as e:
        raise FileError(f"ファイルの読み込みエラー: {e}", file_path=str(file_path), operation="read") from e
    return digest.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_atomic(file_path: str, text: str) -> None:
    """同じディレクトリの一時ファイルに書いてから置き換える"""
    target = Path(file_path)
    target.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd, temp_path = tempfile.mkstemp(dir=str(target.parent), prefix=f".{target.name}.", suffix=".tmp")
        with os.fdopen(fd, 'w', encoding='utf-8') as f:
            f.write(text)
        os.replace(temp_path, target)
    except OSError as e:
        raise FileError(f"マニフェストの書き込みエラー: {e}", file_path=str(file_path), operation="write") from e


def check_input_digest(file_path: str) -> str:
    """
    入力のSHA-256を返し、隣にマニフェストがあれば記録された値と照合する

    Raises:
        DigestMismatchError: 記録と一致しない場合
    """
    actual = sha256_file(file_path)
    manifest_path = Path(str(file_path) + MANIFEST_SUFFIX)
    if manifest_path.exists():
        try:
            manifest = RunManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            logger.warning(f"Unreadable manifest ignored: {manifest_path}")
            return actual
        expected = manifest.outputs.get(Path(file_path).name)
        if expected is not None and expected != actual:
            raise DigestMismatchError("入力ファイルがマニフェストの記録と一致しません",
                                      file_path=str(file_path), expected=expected, actual=actual)
    return actual


class ManifestRecorder:
    """実行マニフェストを主出力の隣に書き、出力後にダイジェストで確定させる"""

    def __init__(self, command: str, primary_output: str, outputs: Sequence[str],
                 inputs: Sequence[str], config: Dict[str, object], seed: Optional[int]):
        self.path = str(primary_output) + MANIFEST_SUFFIX
        self.outputs = [str(o) for o in outputs]
        self.manifest = RunManifest(
            command=command,
            config=config,
            seed=seed,
            inputs={str(p): check_input_digest(p) for p in inputs},
            outputs={Path(o).name: None for o in self.outputs},
            started_at=_now(),
        )
        self._write()

    def _write(self) -> None:
        _write_atomic(self.path, self.manifest.model_dump_json(indent=2))

    def finalize(self, status: str = "complete") -> None:
        if status == "complete":
            for output in self.outputs:
                if Path(output).exists():
                    self.manifest.outputs[Path(output).name] = sha256_file(output)
        self.manifest.status = status
        self.manifest.finished_at = _now()
        self._write()


def run_with_manifest(args: argparse.Namespace, primary: str, outputs: Sequence[str], inputs: Sequence[str],
                      config: Dict[str, object], seed: Optional[int], body: Callable[[], None]) -> None:
    for output in outputs:
        ensure_parent(output)
    recorder = ManifestRecorder(args.command, primary, outputs, [i for i in inputs if i], config, seed)
    try:
        body()
    except BaseException:
        recorder.finalize("failed")
        raise
    recorder.finalize()


def _emit(payload: Dict[str, object]) -> None:
    print(json.dumps(payload, ensure_ascii=False, sort_keys=True))


# --- データの読み込み ---

def resolve_schema(args: argparse.Namespace, data_path: Optional[str] = None) -> ChannelSchema:
    """--schema、データの隣の .schema.json、既定スキーマの順に探す"""
    if getattr(args, "schema", None):
        return load_schema(args.schema)
    if data_path and Path(data_path + SCHEMA_SUFFIX).exists():
        return load_schema(data_path + SCHEMA_SUFFIX)
    return schema_default()


def resolve_vocabulary(args: argparse.Namespace, data_path: str, schema: ChannelSchema,
                       records: Sequence[BagRecord], min_count: int) -> Vocabulary:
    """--vocab、データの隣の .vocab.tsv、バッグからの構築の順に探す"""
    if getattr(args, "vocab", None):
        return load_vocabulary(args.vocab, schema)
    if Path(data_path + VOCAB_SUFFIX).exists():
        return load_vocabulary(data_path + VOCAB_SUFFIX, schema)
    logger.info(f"Building vocabulary from {data_path} (min_count={min_count})")
    return build_vocabulary([bag_tokens(r, schema) for r in records], min_count, schema)


def load_training_data(args: argparse.Namespace, config: TrainConfig,
                       init: Optional[ModelParams] = None) -> LabeledDataset:
    records = ArchiveParser().parse_bags(args.data)
    if init is not None:
        return to_dataset(records, init.vocab, num_classes=init.num_classes, d_em=init.d_em)
    schema = resolve_schema(args, args.data)
    vocab = resolve_vocabulary(args, args.data, schema, records, config.min_count)
    return to_dataset(records, vocab)


def load_eval_data(data_path: str, params: ModelParams) -> LabeledDataset:
    records = ArchiveParser().parse_bags(data_path)
    return to_dataset(records, params.vocab, num_classes=params.num_classes, d_em=params.d_em)


def load_config(args: argparse.Namespace, config_cls=TrainConfig) -> TrainConfig:
    handler = ConfigHandler()
    config = handler.load_from_file(getattr(args, "config", None), config_cls)
    changes = {"num_threads": handler.thread_count(args.threads)}
    if getattr(args, "variant", None):
        changes["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    return config.replace(**changes)


def make_window(args: argparse.Namespace) -> Optional[TimeWindow]:
    """--window が無ければ全期間。--window には --before か --after が必要"""
    if args.before is None and args.after is None:
        if args.window:
            raise ValidationError("--window には --before か --after が必要です")
        return None
    if not args.window:
        logger.info("--before/--after given without --window; applying the window anyway")
    try:
        return TimeWindow(before=args.before, after=args.after)
    except ValueError as e:
        raise ValidationError(f"時間窓が不正です: {e}",
                              context={'before': args.before, 'after': args.after}) from e


def make_provider(args: argparse.Namespace, d_em: int):
    if getattr(args, "embeddings", None):
        return FileEmbeddingProvider(args.embeddings)
    return HashingEmbeddingProvider(d_em=d_em)


def parse_shots(text: str) -> List[int]:
    try:
        shots = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise ValidationError(f"--shotsはカンマ区切りの整数です: {text}") from e
    if not shots or min(shots) < 1:
        raise ValidationError(f"--shotsは1以上の整数です: {text}")
    return shots


# --- サブコマンド ---

def cmd_ingest(args: argparse.Namespace) -> None:
    window = make_window(args)
    schema = resolve_schema(args)

    def body():
        provider = make_provider(args, args.d_em)
        records = ArchiveParser().parse_archive(args.archive)
        bags = channelize_archive(records, provider, window, schema, not args.no_profile,
                                  ConfigHandler().thread_count(args.threads))
        ArchiveParser().save_records(bags, args.out)
        _emit({"users": len(bags), "out": args.out})

    run_with_manifest(args, args.out, [args.out], [args.archive, args.embeddings],
                      {"before": args.before, "after": args.after, "include_profile": not args.no_profile,
                       "d_em": args.d_em}, None, body)


def cmd_vocab(args: argparse.Namespace) -> None:
    schema = resolve_schema(args, args.bags)

    def body():
        records = ArchiveParser().parse_bags(args.bags)
        vocab = build_vocabulary([bag_tokens(r, schema) for r in records], args.min_count, schema)
        save_vocabulary(vocab, args.out)
        _emit({"tokens": sum(vocab.sizes().values()), "out": args.out})

    run_with_manifest(args, args.out, [args.out], [args.bags], {"min_count": args.min_count}, None, body)


def cmd_silver(args: argparse.Namespace) -> None:
    def body():
        anchors = read_anchors(args.anchors)
        silver = build_silver_labels(anchors, args.pool, args.sample, np.random.default_rng(args.seed))
        by_id = {r.user_id: r for r in ArchiveParser().parse_bags(args.bags)}
        labeled = []
        for user_id, label in silver.assignments:
            record = by_id.get(user_id)
            if record is None:
                continue
            meta = dict(record.meta, party=silver.parties[label])
            labeled.append(record.model_copy(update={"label": label, "meta": meta}))
        missing = len(silver) - len(labeled)
        if missing:
            logger.warning(f"{missing} silver users have no channel bags; skipped")
        ArchiveParser().save_records(labeled, args.out)
        _emit({"labeled": len(labeled), "counts": silver.counts, "out": args.out})

    run_with_manifest(args, args.out, [args.out], [args.anchors, args.bags],
                      {"pool": args.pool, "sample": args.sample}, args.seed, body)


def _load_init(args: argparse.Namespace) -> Optional[ModelParams]:
    return load_checkpoint(args.init) if getattr(args, "init", None) else None


def cmd_pretrain(args: argparse.Namespace) -> None:
    config = load_config(args, PretrainConfig)

    def body():
        init = _load_init(args)
        records = ArchiveParser().parse_bags(args.data)
        if any(r.label is not None for r in records):
            data = load_training_data(args, config, init)
            params = pretrain(data, config, init=init)
        else:
            vocab = init.vocab if init else resolve_vocabulary(
                args, args.data, resolve_schema(args, args.data), records, config.min_count)
            users = to_users(records, vocab, init.d_em if init else None)
            params = pretrain(users, config, init=init, vocab=vocab, num_classes=args.num_classes)
        save_checkpoint(params, args.out)

    run_with_manifest(args, args.out, [args.out], [args.data, args.config, args.init],
                      config.to_dict(), config.seed, body)


def cmd_train(args: argparse.Namespace) -> None:
    config = load_config(args)
    outputs = [args.out] + ([args.log] if args.log else [])

    def body():
        init = _load_init(args)
        dataset = load_training_data(args, config, init)
        params, log = train(dataset, config, init)
        save_checkpoint(params, args.out)
        if args.log:
            write_training_log(log, args.log)
        result = {"variant": params.variant, "best_epoch": log.best_epoch, "out": args.out}
        if log.test_metrics is not None:
            result.update(test_accuracy=log.test_metrics.accuracy, test_f1=log.test_metrics.f1)
        _emit(result)

    run_with_manifest(args, args.out, outputs, [args.data, args.config, args.init],
                      config.to_dict(), config.seed, body)


def cmd_eval(args: argparse.Namespace) -> None:
    outputs = [args.report] + ([args.confusion] if args.confusion else [])

    def body():
        params = load_checkpoint(args.ckpt)
        metrics = evaluate(params, load_eval_data(args.data, params), args.variant)
        write_metrics_json(metrics, args.report)
        if args.confusion:
            write_confusion_csv(metrics, args.confusion)
        _emit({"accuracy": metrics.accuracy, "f1": metrics.f1, "n": metrics.n})

    run_with_manifest(args, args.report, outputs, [args.ckpt, args.data], {"variant": args.variant}, None, body)


def cmd_fewshot(args: argparse.Namespace) -> None:
    config = load_config(args)
    shots = parse_shots(args.shots)

    def body():
        init = _load_init(args)
        dataset = load_training_data(args, config, init)
        summaries = [few_shot_protocol(dataset, s, args.runs, config, init=init) for s in shots]
        write_runs_csv(summaries, args.report)
        for summary in summaries:
            _emit({"shots": summary.shots, "accuracy_mean": summary.mean(), "accuracy_std": summary.std(),
                   "f1_mean": summary.mean("f1"), "f1_std": summary.std("f1")})

    run_with_manifest(args, args.report, [args.report], [args.data, args.config, args.init],
                      dict(config.to_dict(), shots=shots, runs=args.runs), config.seed, body)


def cmd_importance(args: argparse.Namespace) -> None:
    config = load_config(args)

    def body():
        drops = channel_importance(load_training_data(args, config), config)
        write_importance_csv(drops, args.report)

    run_with_manifest(args, args.report, [args.report], [args.data, args.config],
                      config.to_dict(), config.seed, body)


def cmd_predict(args: argparse.Namespace) -> None:
    window = make_window(args)

    def body():
        params = load_checkpoint(args.ckpt)
        provider = make_provider(args, params.d_em)
        records = ArchiveParser().parse_archive(args.archive)
        bags = channelize_archive(records, provider, window, params.schema, True,
                                  ConfigHandler().thread_count(args.threads))
        users = to_users(bags, params.vocab, params.d_em)
        probs = predict_proba_batch(users, params)
        with open(args.out, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(["user_id", "predicted"] + [f"p_{c}" for c in range(params.num_classes)])
            for user, row in zip(users, probs):
                writer.writerow([user.user_id, int(np.argmax(row))] + [f"{p:.6f}" for p in row])
        _emit({"users": len(users), "out": args.out})

    run_with_manifest(args, args.out, [args.out], [args.ckpt, args.archive, args.embeddings],
                      {"before": args.before, "after": args.after}, None, body)


def cmd_simulate(args: argparse.Namespace) -> None:
    outputs = [args.out, args.out + SCHEMA_SUFFIX, args.out + VOCAB_SUFFIX]
    if args.anchors_out:
        outputs.append(args.anchors_out)

    def body():
        spec = load_generative_spec(args.spec)
        dataset, anchors = sample_population(spec, args.n, args.seed)
        ArchiveParser().save_records(to_bag_records(dataset.users, dataset.vocab), args.out)
        save_schema(dataset.schema, args.out + SCHEMA_SUFFIX)
        save_vocabulary(dataset.vocab, args.out + VOCAB_SUFFIX)
        if args.anchors_out:
            ArchiveParser().save_records(anchors, args.anchors_out)
        _emit({"users": len(dataset), "class_counts": dataset.class_counts(), "out": args.out})

    run_with_manifest(args, args.out, outputs, [args.spec], {"n": args.n}, args.seed, body)


def cmd_oracle(args: argparse.Namespace) -> None:
    report = args.report or args.data + ORACLE_SUFFIX

    def body():
        spec = load_generative_spec(args.spec)
        records = ArchiveParser().parse_bags(args.data)
        dataset = to_dataset(records, spec.vocabulary(), provenance="synthetic",
                             num_classes=spec.num_classes, d_em=spec.d_em)
        result = {"oracle_accuracy": bayes_oracle_accuracy(spec, dataset), "n": len(dataset)}
        Path(report).write_text(json.dumps(result, sort_keys=True) + "\n", encoding="utf-8")
        _emit({**result, "out": report})

    run_with_manifest(args, report, [report], [args.spec, args.data], {}, None, body)


def cmd_groups(args: argparse.Namespace) -> None:
    def body():
        params = load_checkpoint(args.ckpt)
        records = ArchiveParser().parse_bags(args.data)
        users = to_users(records, params.vocab, params.d_em)
        groups = group_users(users, args.group_by)
        leaning = group_leaning(params, groups, args.target_class)
        write_group_csv(leaning, groups, args.report)
        _emit({"groups": len(leaning), "out": args.report})

    run_with_manifest(args, args.report, [args.report], [args.ckpt, args.data],
                      {"group_by": args.group_by, "target_class": args.target_class}, None, body)


def cmd_ttest(args: argparse.Namespace) -> None:
    report = args.report or args.a + TTEST_SUFFIX

    def body():
        a = read_runs_csv(args.a, args.metric, args.shots)
        b = read_runs_csv(args.b, args.metric, args.shots)
        result = two_sample_t_test(a, b)
        payload = {"t": result.t, "p": result.p, "degenerate": result.degenerate,
                   "significant": result.significant, "n_a": len(a), "n_b": len(b)}
        Path(report).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")
        _emit({**payload, "out": report})

    run_with_manifest(args, report, [report], [args.a, args.b],
                      {"metric": args.metric, "shots": args.shots}, None, body)


# --- 引数 ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsspip", description="Few-shot political inclination prediction")
    parser.add_argument("--verbose", action="store_true", help="DEBUGログを出力する")
    parser.add_argument("--threads", type=int, default=None, help="並列度（既定: FSSPIP_THREADS または 1）")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_schema(p):
        p.add_argument("--schema", help="チャネルスキーマJSON（既定: データ隣の .schema.json、無ければ既定スキーマ）")

    def add_window(p):
        p.add_argument("--window", action="store_true", help="--before / --after で時間窓を指定する")
        p.add_argument("--before", help="この時刻より前のツイート")
        p.add_argument("--after", help="この時刻以降のツイート")

    p = sub.add_parser("ingest", help="アーカイブをチャネルバッグに変換")
    p.add_argument("--archive", required=True)
    add_window(p)
    add_schema(p)
    p.add_argument("--no-profile", action="store_true", help="本人のbio・フォロワー・フレンドを除く")
    p.add_argument("--embeddings", help="文書埋め込みファイル（既定: ハッシュ埋め込み）")
    p.add_argument("--d-em", type=int, default=768)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("vocab", help="語彙を構築")
    p.add_argument("--bags", required=True)
    p.add_argument("--min-count", type=int, default=5)
    add_schema(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("silver", help="アンカーからシルバーラベル付きデータを作る")
    p.add_argument("--anchors", required=True)
    p.add_argument("--bags", required=True, help="候補ユーザーのチャネルバッグ")
    p.add_argument("--pool", type=int, default=75000)
    p.add_argument("--sample", type=int, default=2500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_silver)

    def add_data(p, config=True):
        p.add_argument("--data", required=True)
        if config:
            p.add_argument("--config", help="key=value形式の設定ファイル")
        p.add_argument("--vocab", help="語彙TSV（既定: データ隣の .vocab.tsv、無ければデータから構築）")
        add_schema(p)

    p = sub.add_parser("pretrain", help="mixup + 自己教師で事前学習")
    add_data(p)
    p.add_argument("--init")
    p.add_argument("--num-classes", type=int, default=2, help="ラベルなしデータのときのクラス数")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="教師あり学習")
    add_data(p)
    p.add_argument("--init")
    p.add_argument("--variant", choices=["dyattn", "fixedattn", "auto"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log", help="学習ログCSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="チェックポイントを評価")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=["dyattn", "fixedattn", "auto"])
    p.add_argument("--confusion", help="混同行列CSV")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fewshot", help="few-shotプロトコル")
    add_data(p)
    p.add_argument("--init")
    p.add_argument("--shots", default="50,250,500")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--variant", choices=["dyattn", "fixedattn", "auto"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("importance", help="チャネル重要度")
    add_data(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("predict", help="アーカイブのユーザーを分類")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--archive", required=True)
    add_window(p)
    p.add_argument("--embeddings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="合成母集団を生成")
    p.add_argument("--spec", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--anchors-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="ベイズオラクルの精度")
    p.add_argument("--spec", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="既定は <data>.oracle.json")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("groups", help="グループごとの傾向")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--group-by", required=True, help="metaのフィールド名")
    p.add_argument("--target-class", type=int, default=1)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_groups)

    p = sub.add_parser("ttest", help="2つのfew-shot結果のt検定")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--metric", default="accuracy")
    p.add_argument("--shots", type=int)
    p.add_argument("--report", help="既定は <a>.ttest.json")
    p.set_defaults(func=cmd_ttest)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """CLIを実行して終了コードを返す"""
    args = build_parser().parse_args(argv)
    handler = ErrorHandler("fsspip")
    logging.basicConfig(
        level=ConfigHandler().log_level(args.verbose),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    try:
        args.func(args)
    except Exception as e:
        print(handler.handle_error(e, ErrorHandler.create_context(operation=args.command)), file=sys.stderr)
        return handler.exit_code_for(e)
    return EXIT_OK


def main():
    """メインエントリーポイント"""
    sys.exit(run())


if __name__ == "__main__":
    main()
