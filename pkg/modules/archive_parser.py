"""
JSON-linesアーカイブの解析と生成を行うモジュール

ユーザーアーカイブ、政党アンカー、チャネルバッグの各JSON-linesファイルを
1行1レコードとして読み込み、不正な行は行番号付きで報告する。
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Type, TypeVar

import chardet
from pydantic import BaseModel, ValidationError as PydanticValidationError

from .error_handler import ArchiveParseError, FileError
from .models import BagRecord, PartyAnchor, RawUserRecord

logger = logging.getLogger(__name__)

RecordT = TypeVar("RecordT", bound=BaseModel)


@dataclass
class ParseSummary:
    """解析結果の集計

    Attributes:
        records (int): 正常に読み込んだレコード数
        errors (List[ArchiveParseError]): 行ごとのエラー
    """
    records: int = 0
    errors: List[ArchiveParseError] = field(default_factory=list)

    @property
    def error_count(self) -> int:
        return len(self.errors)


class ArchiveParser:
    """JSON-linesアーカイブの解析と生成を行うクラス"""

    def detect_encoding(self, file_path: str) -> str:
        """ファイルのエンコーディングを検出する

        Args:
            file_path (str): ファイルパス

        Returns:
            str: 検出されたエンコーディング（UTF-8を優先）

        Raises:
            FileError: ファイルが存在しない・読めない場合
        """
        try:
            with open(file_path, 'rb') as f:
                raw_data = f.read(1 << 20)
        except FileNotFoundError as e:
            raise FileError(f"ファイルが見つかりません: {file_path}", file_path=str(file_path), operation="read") from e
        except OSError as e:
            raise FileError(f"ファイルの読み込みエラー: {e}", file_path=str(file_path), operation="read") from e

        try:
            raw_data.decode('utf-8')
            return 'utf-8-sig' if raw_data.startswith(b'\xef\xbb\xbf') else 'utf-8'
        except UnicodeDecodeError:
            # 1MB境界で文字が切れた場合もchardetに任せる
            pass

        detected = chardet.detect(raw_data)
        encoding = detected['encoding'] if detected['encoding'] else 'utf-8'

        # UTF-8を優先する
        if encoding.lower() in ['ascii', 'utf-8', 'utf-8-sig']:
            return 'utf-8'

        return encoding

    def iter_records(self, file_path: str, model: Type[RecordT],
                     summary: Optional[ParseSummary] = None) -> Iterator[RecordT]:
        """JSON-linesファイルをモデル単位で順に返す

        空行は無視する。不正な行はArchiveParseErrorとしてsummaryに記録し、
        処理は継続する。

        Args:
            file_path (str): 入力ファイル
            model: 各行を検証するpydanticモデル
            summary: 集計先（省略時は内部で生成してログのみ）

        Yields:
            RecordT: ファイル順のレコード
        """
        summary = summary if summary is not None else ParseSummary()
        encoding = self.detect_encoding(file_path)

        try:
            handle = open(file_path, 'r', encoding=encoding)
        except OSError as e:
            raise FileError(f"ファイルの読み込みエラー: {e}", file_path=str(file_path), operation="read") from e

        with handle:
            for line_number, line in enumerate(handle, 1):
                if not line.strip():
                    continue
                try:
                    record = model.model_validate(json.loads(line))
                except (json.JSONDecodeError, PydanticValidationError) as e:
                    error = ArchiveParseError(f"不正なレコードです: {e}", line_number=line_number,
                                              file_path=str(file_path))
                    summary.errors.append(error)
                    logger.warning(f"Skipping malformed line {line_number} in {file_path}")
                    continue
                summary.records += 1
                yield record

        if summary.errors:
            logger.warning(f"{file_path}: {summary.records} records, {summary.error_count} malformed lines")

    def parse_archive(self, file_path: str, summary: Optional[ParseSummary] = None) -> Iterator[RawUserRecord]:
        """ユーザーアーカイブを解析する"""
        return self.iter_records(file_path, RawUserRecord, summary)

    def parse_anchors(self, file_path: str, summary: Optional[ParseSummary] = None) -> List[PartyAnchor]:
        """政党アンカーファイルを解析する"""
        return list(self.iter_records(file_path, PartyAnchor, summary))

    def parse_bags(self, file_path: str, summary: Optional[ParseSummary] = None) -> List[BagRecord]:
        """チャネルバッグファイルを解析する"""
        return list(self.iter_records(file_path, BagRecord, summary))

    def save_records(self, records: Iterable[BaseModel], file_path: str) -> int:
        """レコードをJSON-linesで保存する

        Args:
            records: 保存するpydanticレコード
            file_path (str): 出力ファイルパス

        Returns:
            int: 書き込んだレコード数

        Raises:
            FileError: ファイル書き込みエラーの場合
        """
        count = 0
        try:
            with open(file_path, 'w', encoding='utf-8') as f:
                for record in records:
                    f.write(json.dumps(record.model_dump(mode="json", exclude_none=True),
                                       ensure_ascii=False, sort_keys=True))
                    f.write("\n")
                    count += 1
        except OSError as e:
            raise FileError(f"ファイルの書き込みエラー: {e}", file_path=str(file_path), operation="write") from e
        return count


def read_anchors(file_path: str) -> List[PartyAnchor]:
    """アンカーファイルを読み込む（不正行はスキップ）"""
    return ArchiveParser().parse_anchors(file_path)


def ensure_parent(file_path: str) -> None:
    """出力先ディレクトリを作成する"""
    Path(file_path).parent.mkdir(parents=True, exist_ok=True)
