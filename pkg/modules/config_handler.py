"""
設定管理モジュール

学習・事前学習の設定値を管理し、key=value形式の設定ファイルと環境変数を読み込む。
"""

import dataclasses
import logging
import os
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar

from .error_handler import ConfigurationError, FileError

ConfigT = TypeVar("ConfigT", bound="TrainConfig")

ATTENTION_VARIANTS = ("dyattn", "fixedattn", "auto")
TRUE_VALUES = ("1", "true", "yes", "on")
FALSE_VALUES = ("0", "false", "no", "off")


@dataclass
class TrainConfig:
    """教師あり学習の設定を格納するデータクラス"""
    batch_size: int = 32
    learning_rate: float = 0.01
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    variant: str = "dyattn"
    mixup: bool = True
    sampling: bool = True
    channel_dropout: bool = True
    mixup_alpha: float = 0.1
    sample_rate_max: float = 0.15
    channel_dropout_prob: float = 0.1
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    d: int = 8
    min_count: int = 5
    num_threads: int = 1
    weight_decay: float = 0.01

    def __post_init__(self):
        """初期化後の検証"""
        if self.batch_size <= 0:
            raise ValueError("バッチサイズは正の整数である必要があります")
        if self.learning_rate <= 0:
            raise ValueError("学習率は正である必要があります")
        if self.epochs < 0:
            raise ValueError("エポック数は0以上である必要があります")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ValueError("Adamのハイパーパラメータが不正です")
        if self.variant not in ATTENTION_VARIANTS:
            raise ValueError(f"アテンション変種は {ATTENTION_VARIANTS} のいずれかです: {self.variant}")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alphaは正である必要があります")
        for name in ("sample_rate_max", "channel_dropout_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name}は[0, 1]の範囲である必要があります")
        for name in ("val_fraction", "test_fraction"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name}は[0, 1)の範囲である必要があります")
        if self.val_fraction + self.test_fraction >= 1:
            raise ValueError("検証・テストの割合の合計は1未満である必要があります")
        if self.d < 1:
            raise ValueError("埋め込み次元dは1以上である必要があります")
        if self.min_count < 1:
            raise ValueError("min_countは1以上である必要があります")
        if self.num_threads < 1:
            raise ValueError("スレッド数は1以上である必要があります")
        if self.weight_decay < 0:
            raise ValueError("weight_decayは0以上である必要があります")

    def replace(self: ConfigT, **changes: Any) -> ConfigT:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class PretrainConfig(TrainConfig):
    """事前学習（mixup + 自己教師）の設定"""
    learning_rate: float = 3e-5
    epochs: int = 5
    channel_dropout: bool = False
    ss_hidden_dim: int = 0

    def __post_init__(self):
        super().__post_init__()
        if self.ss_hidden_dim < 0:
            raise ValueError("ss_hidden_dimは0以上である必要があります")


class ConfigHandler:
    """設定管理クラス"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def parse_text(self, text: str, config_cls: Type[ConfigT] = TrainConfig,
                   source: str = "<text>") -> ConfigT:
        """
        key=value形式のテキストから設定を作る

        Args:
            text: 設定テキスト（#以降はコメント、空行は無視）
            config_cls: 生成する設定クラス
            source: エラーメッセージ用の出典

        Returns:
            設定オブジェクト

        Raises:
            ConfigurationError: 未知のキー・型変換失敗・検証失敗の場合
        """
        hints = typing.get_type_hints(config_cls)
        known = {f.name for f in dataclasses.fields(config_cls)}
        values: Dict[str, Any] = {}

        for line_number, raw_line in enumerate(text.splitlines(), 1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{source}:{line_number}: key=value形式ではありません", value=raw_line)
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigurationError(f"{source}:{line_number}: 未知の設定キーです", key=key)
            values[key] = self._coerce(key, value, hints[key])

        try:
            return config_cls(**values)
        except ValueError as e:
            raise ConfigurationError(f"{source}: {e}") from e

    def load_from_file(self, file_path: Optional[str], config_cls: Type[ConfigT] = TrainConfig) -> ConfigT:
        """
        設定ファイルを読み込む（Noneなら既定値）

        Raises:
            FileError: ファイルが読めない場合
            ConfigurationError: 内容が不正な場合
        """
        if file_path is None:
            return config_cls()
        try:
            text = Path(file_path).read_text(encoding="utf-8")
        except OSError as e:
            raise FileError(f"設定ファイルの読み込みエラー: {e}", file_path=str(file_path), operation="read") from e
        config = self.parse_text(text, config_cls, source=str(file_path))
        self.logger.info(f"設定ファイルを読み込みました: {file_path}")
        return config

    def to_text(self, config: TrainConfig) -> str:
        """設定をkey=value形式のテキストにする"""
        return "".join(f"{key}={value}\n" for key, value in config.to_dict().items())

    def thread_count(self, override: Optional[int] = None) -> int:
        """
        並列度の上限（引数 > 環境変数FSSPIP_THREADS > 1）

        Raises:
            ConfigurationError: 1未満・整数でない場合
        """
        raw = override if override is not None else os.getenv("FSSPIP_THREADS", "1")
        try:
            threads = int(raw)
        except ValueError as e:
            raise ConfigurationError("FSSPIP_THREADSは整数である必要があります", key="FSSPIP_THREADS", value=raw) from e
        if threads < 1:
            raise ConfigurationError("スレッド数は1以上である必要があります", key="FSSPIP_THREADS", value=threads)
        return threads

    def log_level(self, verbose: bool = False) -> int:
        """ログレベル（環境変数FSSPIP_LOG_LEVELを優先）"""
        name = os.getenv("FSSPIP_LOG_LEVEL")
        if name:
            level = logging.getLevelName(name.upper())
            if isinstance(level, int):
                return level
            self.logger.warning(f"無効なFSSPIP_LOG_LEVEL: {name}")
        return logging.DEBUG if verbose else logging.INFO

    @staticmethod
    def _coerce(key: str, value: str, target: type) -> Any:
        try:
            if target is bool:
                lowered = value.lower()
                if lowered in TRUE_VALUES:
                    return True
                if lowered in FALSE_VALUES:
                    return False
                raise ValueError(value)
            if target is int:
                return int(value)
            if target is float:
                return float(value)
            return value
        except ValueError as e:
            raise ConfigurationError(f"設定値の型が不正です: {key}", key=key, value=value) from e
