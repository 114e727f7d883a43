"""
エラーハンドリングモジュール

FSSPIPパイプラインの例外クラスとエラー処理機能を提供します。
"""

import datetime
import json
import logging
import traceback
from typing import Any, Dict, Optional


class FSSPIPError(Exception):
    """FSSPIPの基底例外クラス"""

    def __init__(self, message: str, error_code: str = None, context: Dict[str, Any] = None):
        """
        初期化

        Args:
            message: エラーメッセージ
            error_code: エラーコード
            context: エラーコンテキスト情報
        """
        super().__init__(message)
        self.message = message
        self.error_code = error_code or self.__class__.__name__
        self.context = context or {}
        self.timestamp = datetime.datetime.now()


class ValidationError(FSSPIPError):
    """入力・設定の検証エラー"""

    def __init__(self, message: str, error_code: str = "VALIDATION_ERROR", context: Dict[str, Any] = None):
        super().__init__(message, error_code, context)


class ConfigurationError(ValidationError):
    """設定値エラー"""

    def __init__(self, message: str, key: str = None, value: Any = None):
        context = {}
        if key:
            context['key'] = key
        if value is not None:
            context['value'] = str(value)
        super().__init__(message, "CONFIGURATION_ERROR", context)


class SchemaMismatchError(ValidationError):
    """スキーマハッシュ・語彙サイズの不一致"""

    def __init__(self, message: str, expected: str = None, actual: str = None):
        context = {}
        if expected:
            context['expected'] = expected
        if actual:
            context['actual'] = actual
        super().__init__(message, "SCHEMA_MISMATCH", context)


class DimensionError(ValidationError):
    """ベクトル・行列の次元不一致"""

    def __init__(self, message: str, expected: int = None, actual: int = None, channel: str = None):
        context = {}
        if expected is not None:
            context['expected'] = expected
        if actual is not None:
            context['actual'] = actual
        if channel:
            context['channel'] = channel
        super().__init__(message, "DIMENSION_ERROR", context)


class SilverSizeError(ValidationError):
    """シルバーラベルの標本数不足"""

    def __init__(self, message: str, party: str = None, available: int = None, requested: int = None):
        context = {}
        if party:
            context['party'] = party
        if available is not None:
            context['available'] = available
        if requested is not None:
            context['requested'] = requested
        super().__init__(message, "SILVER_SIZE_ERROR", context)


class DigestMismatchError(ValidationError):
    """入力ファイルのダイジェスト不一致"""

    def __init__(self, message: str, file_path: str = None, expected: str = None, actual: str = None):
        context = {}
        if file_path:
            context['file_path'] = file_path
        if expected:
            context['expected'] = expected
        if actual:
            context['actual'] = actual
        super().__init__(message, "DIGEST_MISMATCH", context)


class ArchiveParseError(FSSPIPError):
    """アーカイブ解析エラー"""

    def __init__(self, message: str, line_number: int = None, file_path: str = None):
        """
        アーカイブ解析エラーの初期化

        Args:
            message: エラーメッセージ
            line_number: エラーが発生した行番号
            file_path: エラーが発生したファイルパス
        """
        context = {}
        if line_number is not None:
            context['line_number'] = line_number
        if file_path:
            context['file_path'] = file_path

        super().__init__(message, "ARCHIVE_PARSE_ERROR", context)


class CorruptionError(FSSPIPError):
    """インデックス範囲外・チェックポイント破損"""

    def __init__(self, message: str, channel: str = None, index: int = None, limit: int = None):
        context = {}
        if channel:
            context['channel'] = channel
        if index is not None:
            context['index'] = index
        if limit is not None:
            context['limit'] = limit
        super().__init__(message, "CORRUPTION_ERROR", context)


class NumericalError(FSSPIPError):
    """数値計算エラー（非有限な損失など）"""

    def __init__(self, message: str, user_id: str = None, value: float = None):
        context = {}
        if user_id:
            context['user_id'] = user_id
        if value is not None:
            context['value'] = repr(value)
        super().__init__(message, "NUMERICAL_ERROR", context)


class FileError(FSSPIPError):
    """ファイル操作エラー"""

    def __init__(self, message: str, file_path: str = None, operation: str = None):
        """
        ファイル操作エラーの初期化

        Args:
            message: エラーメッセージ
            file_path: 操作対象ファイルパス
            operation: 実行していた操作
        """
        context = {}
        if file_path:
            context['file_path'] = file_path
        if operation:
            context['operation'] = operation

        super().__init__(message, "FILE_ERROR", context)


class EmbeddingLookupError(FileError):
    """埋め込みファイルに文書が存在しない"""

    def __init__(self, message: str, document_key: str = None, file_path: str = None):
        super().__init__(message, file_path=file_path, operation="embedding_lookup")
        self.error_code = "EMBEDDING_LOOKUP_ERROR"
        if document_key:
            self.context['document_key'] = document_key


# CLIの終了コード
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class ErrorHandler:
    """エラー処理クラス"""

    def __init__(self, logger_name: str = __name__):
        """
        初期化

        Args:
            logger_name: ロガー名
        """
        self.logger = logging.getLogger(logger_name)

    def log_error(self, error: Exception, context: Dict[str, Any] = None) -> None:
        """
        エラーをログに記録

        Args:
            error: ログに記録する例外
            context: 追加のコンテキスト情報
        """
        try:
            error_info = {
                'error_type': error.__class__.__name__,
                'error_message': str(error),
                'timestamp': datetime.datetime.now().isoformat(),
            }

            if isinstance(error, FSSPIPError):
                error_info.update({
                    'error_code': error.error_code,
                    'error_context': error.context,
                })

            if context:
                error_info['additional_context'] = context

            error_info['stack_trace'] = traceback.format_exc()

            if isinstance(error, (FileError, NumericalError)):
                self.logger.error(f"重大なエラー: {error_info}")
            elif isinstance(error, (ArchiveParseError, ValidationError, CorruptionError)):
                self.logger.warning(f"処理エラー: {error_info}")
            else:
                self.logger.error(f"未知のエラー: {error_info}")

        except Exception as log_error:
            self.logger.critical(f"ログ記録中にエラーが発生: {str(log_error)}")
            self.logger.critical(f"元のエラー: {str(error)}")

    @staticmethod
    def exit_code_for(error: Exception) -> int:
        """
        例外に対応するCLI終了コード

        Args:
            error: 対象の例外

        Returns:
            int: 終了コード（2: 検証, 3: 数値, 4: 入出力, 1: 想定外）
        """
        if isinstance(error, FileError):
            return EXIT_IO
        if isinstance(error, NumericalError):
            return EXIT_NUMERICAL
        if isinstance(error, (ValidationError, ArchiveParseError, CorruptionError)):
            return EXIT_VALIDATION
        if isinstance(error, OSError):
            return EXIT_IO
        return EXIT_UNEXPECTED

    def format_machine_message(self, error: Exception) -> str:
        """
        機械可読な1行エラーメッセージ（JSON）を生成

        Args:
            error: フォーマット対象の例外

        Returns:
            str: 改行を含まないJSON文字列
        """
        if isinstance(error, FSSPIPError):
            payload = {
                'error': error.error_code,
                'exit_code': self.exit_code_for(error),
                'message': error.message,
                'context': error.context,
            }
        else:
            payload = {
                'error': error.__class__.__name__,
                'exit_code': self.exit_code_for(error),
                'message': str(error),
                'context': {},
            }
        return json.dumps(payload, ensure_ascii=False, sort_keys=True, default=str)

    def handle_error(self, error: Exception, context: Dict[str, Any] = None) -> str:
        """
        エラーの総合的な処理

        Args:
            error: 処理対象の例外
            context: 追加のコンテキスト情報

        Returns:
            str: 機械可読メッセージ
        """
        self.log_error(error, context)
        return self.format_machine_message(error)

    @staticmethod
    def create_context(operation: str = None, file_path: str = None,
                       line_number: Optional[int] = None, **kwargs) -> Dict[str, Any]:
        """
        コンテキスト情報を作成

        Args:
            operation: 実行中の操作
            file_path: 処理中のファイルパス
            line_number: 処理中の行番号
            **kwargs: その他の情報

        Returns:
            Dict[str, Any]: コンテキスト辞書
        """
        context = {}

        if operation:
            context['operation'] = operation
        if file_path:
            context['file_path'] = file_path
        if line_number is not None:
            context['line_number'] = line_number

        context.update(kwargs)

        return context
