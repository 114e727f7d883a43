"""
FSSPIP - モジュールパッケージ

チャネル化、モデル、学習・事前学習、評価、合成データ生成と、
設定管理・エラーハンドリング機能を提供します。
"""

from .config_handler import TrainConfig, PretrainConfig, ConfigHandler
from .error_handler import (
    FSSPIPError,
    ValidationError,
    ConfigurationError,
    SchemaMismatchError,
    DimensionError,
    SilverSizeError,
    DigestMismatchError,
    ArchiveParseError,
    CorruptionError,
    NumericalError,
    FileError,
    EmbeddingLookupError,
    ErrorHandler
)
from .schema import ChannelSchema, Vocabulary, ChannelizedUser, LabeledDataset, schema_default
from .model import ModelParams, init_params, predict, predict_proba
from .train import train, fit
from .pretrain import build_silver_labels, pretrain
from .evaluator import evaluate, few_shot_protocol

__all__ = [
    'TrainConfig',
    'PretrainConfig',
    'ConfigHandler',
    'FSSPIPError',
    'ValidationError',
    'ConfigurationError',
    'SchemaMismatchError',
    'DimensionError',
    'SilverSizeError',
    'DigestMismatchError',
    'ArchiveParseError',
    'CorruptionError',
    'NumericalError',
    'FileError',
    'EmbeddingLookupError',
    'ErrorHandler',
    'ChannelSchema',
    'Vocabulary',
    'ChannelizedUser',
    'LabeledDataset',
    'schema_default',
    'ModelParams',
    'init_params',
    'predict',
    'predict_proba',
    'train',
    'fit',
    'build_silver_labels',
    'pretrain',
    'evaluate',
    'few_shot_protocol'
]

__version__ = "0.1.0"
