"""
FSSPIPモデル（順伝播・逆伝播・チェックポイント）

チャネル埋め込み e_ir、3種類のアテンション（dyattn / fixedattn / auto）、
正規化埋め込みの重み付き和 h_i、分類ヘッドを、ユーザーのバッチ単位で計算する。
逆伝播は順伝播のキャッシュを逆順にたどる手書きの実装。
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .error_handler import CorruptionError, FileError, SchemaMismatchError, ValidationError
from .schema import (ChannelDescriptor, ChannelizedUser, ChannelSchema, Vocabulary, schema_from_list,
                     schema_hash, schema_to_list)

logger = logging.getLogger(__name__)

VARIANTS = ("dyattn", "fixedattn", "auto")
NORM_EPS = 1e-12
CHECKPOINT_FORMAT = "fsspip-checkpoint"
CHECKPOINT_VERSION = 1


def h_key(channel_id: int) -> str:
    return f"H:{channel_id}"


def w_key(channel_id: int) -> str:
    return f"W:{channel_id}"


@dataclass
class ModelParams:
    """学習可能なテンソル一式

    tensors のキー:
        "H:<r>"  疎チャネルrの埋め込み行列 (Vlen_r, d)
        "W:<r>"  密チャネルrの射影行列 (d, d_em)
        "q", "k"  チャネルごとのクエリ・キー (R, d)
        "rho_p", "rho_q", "rho_k"  制約なしスカラー（p = logistic(rho_p) など）
        "attn_logits"  fixedattn用のチャネル重みロジット (R,)
        "w_out", "bias"  分類ヘッド (d, K), (K,)
    """
    tensors: Dict[str, np.ndarray]
    d: int
    d_em: int
    num_classes: int
    vocab: Vocabulary
    variant: str = "dyattn"

    @property
    def schema(self) -> ChannelSchema:
        return self.vocab.schema

    @property
    def schema_hash(self) -> str:
        return schema_hash(self.schema)

    @property
    def p(self) -> float:
        return float(expit(self.tensors["rho_p"]))

    @property
    def q(self) -> float:
        return float(expit(self.tensors["rho_q"]))

    @property
    def k(self) -> float:
        return float(expit(self.tensors["rho_k"]))

    def copy(self) -> "ModelParams":
        return ModelParams(
            tensors={name: array.copy() for name, array in self.tensors.items()},
            d=self.d, d_em=self.d_em, num_classes=self.num_classes,
            vocab=self.vocab, variant=self.variant,
        )

    def with_variant(self, variant: str) -> "ModelParams":
        check_variant(variant)
        params = self.copy()
        params.variant = variant
        return params

    def expected_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return expected_shapes(self.schema, self.vocab, self.d, self.d_em, self.num_classes)


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValidationError(f"未知のアテンション変種です: {variant}", context={'variant': variant})
    return variant


def expected_shapes(schema: ChannelSchema, vocab: Vocabulary, d: int, d_em: int,
                    num_classes: int) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    for channel in schema:
        if channel.is_dense:
            shapes[w_key(channel.id)] = (d, d_em)
        else:
            shapes[h_key(channel.id)] = (vocab.size(channel.id), d)
    R = len(schema)
    shapes.update({
        "q": (R, d), "k": (R, d),
        "rho_p": (), "rho_q": (), "rho_k": (),
        "attn_logits": (R,),
        "w_out": (d, num_classes), "bias": (num_classes,),
    })
    return shapes


def init_params(schema: ChannelSchema, vocab: Vocabulary, d: int = 8, d_em: int = 768,
                num_classes: int = 2, seed: int = 0, variant: str = "dyattn") -> ModelParams:
    """パラメータを初期化する

    行列は [-1/sqrt(d), 1/sqrt(d)] の一様分布、rho_p = rho_q = rho_k = 0（p = q = k = 0.5）、
    fixedattnのロジットとバイアスはゼロ。同じseedなら同じ値になる。

    Raises:
        ValidationError: d < 1 または num_classes < 2 の場合
        SchemaMismatchError: 語彙が別スキーマで構築されている場合
    """
    if d < 1 or d_em < 1:
        raise ValidationError(f"d, d_emは1以上である必要があります: d={d}, d_em={d_em}")
    if num_classes < 2:
        raise ValidationError(f"クラス数は2以上である必要があります: {num_classes}")
    if schema_hash(vocab.schema) != schema_hash(schema):
        raise SchemaMismatchError("語彙とスキーマが一致しません",
                                  expected=schema_hash(schema), actual=schema_hash(vocab.schema))
    check_variant(variant)

    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(schema, vocab, d, d_em, num_classes).items():
        if name.startswith(("H:", "W:")) or name in ("q", "k", "w_out"):
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(tensors=tensors, d=d, d_em=d_em, num_classes=num_classes, vocab=vocab, variant=variant)


@dataclass
class Batch:
    """バッチ化されたユーザー

    Attributes:
        user_ids: ユーザーID
        sparse: 疎チャネルID → (バッチ内の行番号, 特徴インデックス)
        dense: 密チャネルID → (B, d_em) 行列
    """
    user_ids: List[str]
    sparse: Dict[int, Tuple[np.ndarray, np.ndarray]]
    dense: Dict[int, np.ndarray]

    @property
    def size(self) -> int:
        return len(self.user_ids)


def pack_batch(users: Sequence[ChannelizedUser], params: ModelParams) -> Batch:
    """ユーザー列をバッチに詰める

    Raises:
        CorruptionError: インデックスがVlen_r以上の場合
    """
    schema = params.schema
    sparse: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    for r in schema.sparse_ids:
        rows: List[int] = []
        indices: List[int] = []
        for row, user in enumerate(users):
            active = user.sparse.get(r, ())
            rows.extend([row] * len(active))
            indices.extend(sorted(active))
        index_array = np.asarray(indices, dtype=np.int64)
        limit = params.vocab.size(r)
        if index_array.size and (index_array.max() >= limit or index_array.min() < 0):
            raise CorruptionError("特徴インデックスが語彙の範囲外です",
                                  channel=schema[r].name, index=int(index_array.max()), limit=limit)
        sparse[r] = (np.asarray(rows, dtype=np.int64), index_array)

    dense: Dict[int, np.ndarray] = {}
    for r in schema.dense_ids:
        matrix = np.zeros((len(users), params.d_em))
        for row, user in enumerate(users):
            vector = user.dense.get(r)
            if vector is not None:
                matrix[row] = vector
        dense[r] = matrix
    return Batch(user_ids=[u.user_id for u in users], sparse=sparse, dense=dense)


@dataclass
class ForwardCache:
    """順伝播の中間値（逆伝播で再利用する）"""
    batch: Batch
    variant: str
    embeddings: np.ndarray        # E (B, R, d)
    norms: np.ndarray             # |e_ir| (B, R)
    mask: np.ndarray              # |e_ir| >= eps (B, R)
    unit: np.ndarray              # e_ir/|e_ir| (B, R, d)
    alpha: np.ndarray             # (B, R)
    h: np.ndarray                 # (B, d)
    logits: np.ndarray            # (B, K)
    probs: np.ndarray             # (B, K)
    log_probs: np.ndarray         # (B, K)
    attn_softmax: Optional[np.ndarray] = None   # dyattn: softmax(q_ir . k_ir), fixedattn: softmax(a_r)
    queries: Optional[np.ndarray] = None        # dyattn: q_ir (B, R, d)
    keys: Optional[np.ndarray] = None           # dyattn: k_ir (B, R, d)


def _channel_embeddings(batch: Batch, params: ModelParams) -> np.ndarray:
    E = np.zeros((batch.size, len(params.schema), params.d))
    for r, (rows, indices) in batch.sparse.items():
        if indices.size:
            np.add.at(E[:, r, :], rows, params.tensors[h_key(r)][indices])
    for r, X in batch.dense.items():
        E[:, r, :] = X @ params.tensors[w_key(r)].T
    return E


def _output_probs(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if logits.shape[1] == 2:
        # 二値はlogistic(logit1 - logit0)
        margin = logits[:, 1] - logits[:, 0]
        p1 = expit(margin)
        probs = np.stack([1.0 - p1, p1], axis=1)
        log_probs = np.stack([-np.logaddexp(0.0, margin), -np.logaddexp(0.0, -margin)], axis=1)
        return probs, log_probs
    return softmax(logits, axis=1), log_softmax(logits, axis=1)


def forward(batch: Batch, params: ModelParams, variant: Optional[str] = None) -> ForwardCache:
    """バッチの順伝播"""
    variant = check_variant(variant or params.variant)
    T = params.tensors
    E = _channel_embeddings(batch, params)
    norms = np.linalg.norm(E, axis=2)
    mask = norms >= NORM_EPS
    safe = np.where(mask, norms, 1.0)
    unit = np.where(mask[..., None], E / safe[..., None], 0.0)

    attn_softmax = queries = keys = None
    if variant == "dyattn":
        p, q, k = expit(T["rho_p"]), expit(T["rho_q"]), expit(T["rho_k"])
        queries = q * E + (1.0 - q) * T["q"][None]
        keys = k * E + (1.0 - k) * T["k"][None]
        scores = np.sum(queries * keys, axis=2)
        attn_softmax = softmax(scores, axis=1)
        alpha = p * attn_softmax + (1.0 - p) * norms
    elif variant == "fixedattn":
        attn_softmax = softmax(T["attn_logits"])
        alpha = np.broadcast_to(attn_softmax, norms.shape).copy()
    else:
        alpha = np.ones_like(norms)

    h = np.sum(alpha[..., None] * unit, axis=1)
    logits = h @ T["w_out"] + T["bias"]
    probs, log_probs = _output_probs(logits)
    return ForwardCache(batch=batch, variant=variant, embeddings=E, norms=norms, mask=mask, unit=unit,
                        alpha=alpha, h=h, logits=logits, probs=probs, log_probs=log_probs,
                        attn_softmax=attn_softmax, queries=queries, keys=keys)


def zero_grads(params: ModelParams) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(array) for name, array in params.tensors.items()}


def backward(cache: ForwardCache, params: ModelParams,
             d_logits: Optional[np.ndarray] = None,
             d_h: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """ロジットおよび/またはh_iに対する勾配から全パラメータの勾配を求める

    Args:
        cache: forwardの結果
        params: forwardに使ったパラメータ
        d_logits: 損失のロジットに対する勾配 (B, K)
        d_h: 損失のh_iに対する追加の勾配 (B, d)（自己教師ヘッドなど）

    Returns:
        パラメータ名 → 同形状の勾配
    """
    T = params.tensors
    grads = zero_grads(params)
    dh = np.zeros_like(cache.h)
    if d_logits is not None:
        grads["w_out"] = cache.h.T @ d_logits
        grads["bias"] = d_logits.sum(axis=0)
        dh += d_logits @ T["w_out"].T
    if d_h is not None:
        dh += d_h

    E, unit, mask, norms, alpha = cache.embeddings, cache.unit, cache.mask, cache.norms, cache.alpha
    d_alpha = np.sum(dh[:, None, :] * unit, axis=2)
    d_unit = alpha[..., None] * dh[:, None, :]
    dE = np.zeros_like(E)
    d_norm = np.zeros_like(norms)

    if cache.variant == "dyattn":
        p, q, k = expit(T["rho_p"]), expit(T["rho_q"]), expit(T["rho_k"])
        S = cache.attn_softmax
        grads["rho_p"] = np.asarray(np.sum(d_alpha * (S - norms)) * p * (1.0 - p))
        dS = p * d_alpha
        d_norm = (1.0 - p) * d_alpha
        d_scores = S * (dS - np.sum(dS * S, axis=1, keepdims=True))
        d_queries = d_scores[..., None] * cache.keys
        d_keys = d_scores[..., None] * cache.queries
        dE += q * d_queries + k * d_keys
        grads["q"] = (1.0 - q) * d_queries.sum(axis=0)
        grads["k"] = (1.0 - k) * d_keys.sum(axis=0)
        grads["rho_q"] = np.asarray(np.sum(d_queries * (E - T["q"][None])) * q * (1.0 - q))
        grads["rho_k"] = np.asarray(np.sum(d_keys * (E - T["k"][None])) * k * (1.0 - k))
    elif cache.variant == "fixedattn":
        S = cache.attn_softmax
        g = d_alpha.sum(axis=0)
        grads["attn_logits"] = S * (g - np.dot(g, S))

    # e/|e| と |e| の逆伝播（ゼロノルムのチャネルは勾配なし）
    safe = np.where(mask, norms, 1.0)[..., None]
    radial = np.sum(unit * d_unit, axis=2, keepdims=True)
    dE += np.where(mask[..., None], (d_unit - unit * radial) / safe + d_norm[..., None] * unit, 0.0)

    batch = cache.batch
    for r, (rows, indices) in batch.sparse.items():
        if indices.size:
            np.add.at(grads[h_key(r)], indices, dE[rows, r, :])
    for r, X in batch.dense.items():
        grads[w_key(r)] = dE[:, r, :].T @ X
    return grads


def channel_embedding(user: ChannelizedUser, params: ModelParams, channel_id: int) -> np.ndarray:
    """e_ir: 疎チャネルは有効行の和、密チャネルは W_r x"""
    descriptor: ChannelDescriptor = params.schema[channel_id]
    if descriptor.is_dense:
        vector = user.dense.get(channel_id)
        if vector is None:
            return np.zeros(params.d)
        return params.tensors[w_key(channel_id)] @ np.asarray(vector, dtype=float)
    indices = np.asarray(sorted(user.sparse.get(channel_id, ())), dtype=np.int64)
    if indices.size == 0:
        return np.zeros(params.d)
    limit = params.vocab.size(channel_id)
    if indices.max() >= limit or indices.min() < 0:
        raise CorruptionError("特徴インデックスが語彙の範囲外です",
                              channel=descriptor.name, index=int(indices.max()), limit=limit)
    return params.tensors[h_key(channel_id)][indices].sum(axis=0)


def attention_weights(user: ChannelizedUser, params: ModelParams, variant: Optional[str] = None) -> np.ndarray:
    """α_i·（チャネル数の長さ）"""
    return forward(pack_batch([user], params), params, variant).alpha[0]


def user_embedding(user: ChannelizedUser, params: ModelParams, variant: Optional[str] = None) -> np.ndarray:
    """h_i = Σ_r α_ir e_ir/|e_ir|"""
    return forward(pack_batch([user], params), params, variant).h[0]


def predict_proba(user: ChannelizedUser, params: ModelParams, variant: Optional[str] = None) -> np.ndarray:
    """クラス確率（長さK）"""
    return forward(pack_batch([user], params), params, variant).probs[0]


def predict_proba_batch(users: Sequence[ChannelizedUser], params: ModelParams,
                        variant: Optional[str] = None, batch_size: int = 1024) -> np.ndarray:
    """複数ユーザーのクラス確率 (N, K)"""
    if not users:
        return np.zeros((0, params.num_classes))
    chunks = [
        forward(pack_batch(users[start:start + batch_size], params), params, variant).probs
        for start in range(0, len(users), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def predict(users: Sequence[ChannelizedUser], params: ModelParams, variant: Optional[str] = None) -> np.ndarray:
    return np.argmax(predict_proba_batch(users, params, variant), axis=1)


def save_checkpoint(params: ModelParams, file_path: str) -> None:
    """チェックポイントをJSONで保存する

    Raises:
        FileError: 書き込みに失敗した場合
    """
    vocab = params.vocab
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": params.variant,
        "d": params.d,
        "d_em": params.d_em,
        "num_classes": params.num_classes,
        "schema_hash": params.schema_hash,
        "schema": schema_to_list(params.schema),
        "vocab_sizes": {str(r): n for r, n in vocab.sizes().items()},
        "vocabulary": {
            str(r): {"tokens": list(vocab.tokens[r]), "doc_freq": list(vocab.doc_freq[r])}
            for r in params.schema.sparse_ids
        },
        "tensors": {name: array.tolist() for name, array in sorted(params.tensors.items())},
    }
    try:
        Path(file_path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise FileError(f"チェックポイントの書き込みエラー: {e}", file_path=str(file_path), operation="write") from e
    logger.info(f"Saved checkpoint ({params.variant}) to {file_path}")


def load_checkpoint(file_path: str, schema: Optional[ChannelSchema] = None) -> ModelParams:
    """チェックポイントを読み込み、スキーマハッシュと全テンソル形状を検証する

    Args:
        file_path: チェックポイントファイル
        schema: 期待するスキーマ（省略時は保存されたスキーマを復元して整合性のみ確認）

    Raises:
        FileError: 読み込みに失敗した場合
        SchemaMismatchError: スキーマハッシュが一致しない場合
        CorruptionError: 形式・形状が不正な場合
    """
    try:
        payload = json.loads(Path(file_path).read_text(encoding="utf-8"))
    except OSError as e:
        raise FileError(f"チェックポイントの読み込みエラー: {e}", file_path=str(file_path), operation="read") from e
    except json.JSONDecodeError as e:
        raise CorruptionError(f"チェックポイントがJSONではありません: {e}") from e

    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise CorruptionError("チェックポイントの形式またはバージョンが不正です")

    try:
        stored_schema = schema_from_list(payload["schema"])
        if schema_hash(stored_schema) != payload["schema_hash"]:
            raise CorruptionError("保存されたスキーマとハッシュが一致しません")
        if schema is not None and schema_hash(schema) != payload["schema_hash"]:
            raise SchemaMismatchError("チェックポイントのスキーマが一致しません",
                                      expected=schema_hash(schema), actual=payload["schema_hash"])

        vocab = Vocabulary(
            schema=schema or stored_schema,
            tokens={int(r): tuple(v["tokens"]) for r, v in payload["vocabulary"].items()},
            doc_freq={int(r): tuple(v["doc_freq"]) for r, v in payload["vocabulary"].items()},
        )
        for r, n in payload["vocab_sizes"].items():
            if vocab.size(int(r)) != n:
                raise CorruptionError("語彙サイズが一致しません", channel=vocab.schema[int(r)].name,
                                      index=vocab.size(int(r)), limit=n)

        d, d_em, num_classes = int(payload["d"]), int(payload["d_em"]), int(payload["num_classes"])
        shapes = expected_shapes(vocab.schema, vocab, d, d_em, num_classes)
        tensors: Dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            if name not in payload["tensors"]:
                raise CorruptionError(f"テンソルがありません: {name}")
            array = np.asarray(payload["tensors"][name], dtype=float)
            if array.shape != shape:
                raise CorruptionError(f"テンソルの形状が不正です: {name} {array.shape} != {shape}",
                                      index=int(array.size))
            tensors[name] = array
            if not np.all(np.isfinite(tensors[name])):
                raise CorruptionError(f"テンソルに非有限値があります: {name}")
        extra = set(payload["tensors"]) - set(shapes)
        if extra:
            raise CorruptionError(f"未知のテンソルがあります: {sorted(extra)}")
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise CorruptionError(f"チェックポイントの内容が不正です: {e}") from e

    return ModelParams(tensors=tensors, d=d, d_em=d_em, num_classes=num_classes,
                       vocab=vocab, variant=check_variant(payload["variant"]))
