"""Self-attention pooling over per-partition representations.

For a stack ``R`` (j x d_red) of partition vectors::

    A = softmax(R W_Q (R W_K)^T / sqrt(d_att))      row-wise
    H = A R W_V                                      j x d_att
    fused = mean of the rows of H

The mean-pool ablation skips attention: ``mean(R) W_V``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Optional, Sequence, Union

import numpy as np

from .encoding import KnowledgeVector
from .errors import DegenerateInputError, DimensionError, PreconditionError, ProtocolError

ATTENTION = "attention"
MEAN = "mean"

WEIGHTS_MAGIC = b"LBAW"
WEIGHTS_VERSION = 1
_W_HEADER = struct.Struct("<4sIII")


@dataclass
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        shapes = {self.w_q.shape, self.w_k.shape, self.w_v.shape}
        if len(shapes) != 1 or self.w_q.ndim != 2:
            raise DimensionError(f"W_Q/W_K/W_V must share one 2-D shape, got {shapes}")
        for m in (self.w_q, self.w_k, self.w_v):
            if not np.all(np.isfinite(m)):
                raise PreconditionError("attention weights must be finite")

    @property
    def d_red(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_att(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def init(cls, d_red: int, d_att: int, seed: int = 0) -> "AttentionWeights":
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(d_red)
        return cls(*(rng.uniform(-bound, bound, size=(d_red, d_att)) for _ in range(3)))

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as fh:
            fh.write(_W_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, self.d_red, self.d_att))
            for m in (self.w_q, self.w_k, self.w_v):
                fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AttentionWeights":
        data = Path(path).read_bytes()
        magic, version, d_red, d_att = _W_HEADER.unpack_from(data, 0)
        if magic != WEIGHTS_MAGIC or version != WEIGHTS_VERSION:
            raise ProtocolError(f"{path} is not a version-{WEIGHTS_VERSION} weight file")
        size = d_red * d_att
        mats = [
            np.frombuffer(data, "<f8", size, _W_HEADER.size + 8 * size * i).reshape(d_red, d_att).copy()
            for i in range(3)
        ]
        return cls(*mats)


@dataclass(frozen=True)
class FusedRepresentation:
    user_id: Hashable
    values: np.ndarray
    partition_count_used: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise PreconditionError("fused representation has non-finite entries")


def _stack(reps: Sequence[Union[KnowledgeVector, np.ndarray]] | np.ndarray, d_red: int) -> np.ndarray:
    if isinstance(reps, np.ndarray) and reps.ndim == 2:
        R = np.asarray(reps, dtype=np.float64)
    else:
        rows = [r.values if isinstance(r, KnowledgeVector) else np.asarray(r, dtype=np.float64) for r in reps]
        if not rows:
            raise DegenerateInputError("need at least one partition representation")
        if len({r.shape for r in rows}) != 1:
            raise DimensionError("partition representations differ in dimension")
        R = np.vstack(rows)
    if R.shape[0] == 0:
        raise DegenerateInputError("need at least one partition representation")
    if R.shape[1] != d_red:
        raise DimensionError(f"representations have dimension {R.shape[1]}, weights expect {d_red}")
    return R


def softmax_rows(S: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis; ``-inf`` entries get 0."""
    m = np.max(S, axis=-1, keepdims=True)
    E = np.exp(S - m)
    return E / E.sum(axis=-1, keepdims=True)


def attention_matrix(R: np.ndarray, w: AttentionWeights) -> np.ndarray:
    logits = (R @ w.w_q) @ (R @ w.w_k).T / np.sqrt(w.d_att)
    return softmax_rows(logits)


def _user_of(reps) -> Hashable:
    first = reps[0] if len(reps) else None
    return first.user_id if isinstance(first, KnowledgeVector) else None


def self_attention_fuse(reps, w: AttentionWeights, user_id: Hashable = None) -> FusedRepresentation:
    R = _stack(reps, w.d_red)
    A = attention_matrix(R, w)
    H = A @ (R @ w.w_v)
    uid = user_id if user_id is not None else _user_of(reps)
    return FusedRepresentation(uid, H.mean(axis=0), R.shape[0])


def mean_pool_fuse(reps, w: AttentionWeights, user_id: Hashable = None) -> FusedRepresentation:
    R = _stack(reps, w.d_red)
    uid = user_id if user_id is not None else _user_of(reps)
    return FusedRepresentation(uid, R.mean(axis=0) @ w.w_v, R.shape[0])


def fuse(reps, w: AttentionWeights, mode: str = ATTENTION, user_id: Hashable = None) -> FusedRepresentation:
    if mode == ATTENTION:
        return self_attention_fuse(reps, w, user_id)
    if mode == MEAN:
        return mean_pool_fuse(reps, w, user_id)
    raise PreconditionError(f"unknown fusion mode {mode!r}")


# -- batched path used inside the CTR model ---------------------------------

@dataclass
class _FuseCache:
    mode: str
    R: np.ndarray
    mask: np.ndarray
    counts: np.ndarray
    Q: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    pooled: Optional[np.ndarray] = None


def fuse_batch(R: np.ndarray, mask: np.ndarray, w: AttentionWeights, mode: str = ATTENTION):
    """Fuse a padded batch.

    ``R`` is (B, J, d_red) and ``mask`` (B, J) marks real rows.  Every batch
    entry must have at least one real row.  Padded keys get ``-inf`` logits;
    padded query rows are left out of the mean.
    """
    counts = mask.sum(axis=1).astype(np.float64)
    if np.any(counts == 0):
        raise DegenerateInputError("every batch entry needs at least one partition")
    cache = _FuseCache(mode, R, mask, counts)
    if mode == MEAN:
        pooled = (R * mask[..., None]).sum(axis=1) / counts[:, None]
        cache.pooled = pooled
        return pooled @ w.w_v, cache
    if mode != ATTENTION:
        raise PreconditionError(f"unknown fusion mode {mode!r}")
    Q = R @ w.w_q
    K = R @ w.w_k
    V = R @ w.w_v
    S = Q @ np.swapaxes(K, 1, 2) / np.sqrt(w.d_att)
    S = np.where(mask[:, None, :], S, -np.inf)
    A = softmax_rows(S)
    H = A @ V
    out = (H * mask[..., None]).sum(axis=1) / counts[:, None]
    cache.Q, cache.K, cache.V, cache.A = Q, K, V, A
    return out, cache


def fuse_batch_backward(dout: np.ndarray, cache: _FuseCache, w: AttentionWeights) -> dict[str, np.ndarray]:
    """Gradients of the fused output w.r.t. W_Q, W_K, W_V."""
    R = cache.R
    if cache.mode == MEAN:
        return {
            "w_q": np.zeros_like(w.w_q),
            "w_k": np.zeros_like(w.w_k),
            "w_v": cache.pooled.T @ dout,
        }
    scale = 1.0 / np.sqrt(w.d_att)
    dH = (dout / cache.counts[:, None])[:, None, :] * cache.mask[..., None]
    A = cache.A
    dV = np.swapaxes(A, 1, 2) @ dH
    dA = dH @ np.swapaxes(cache.V, 1, 2)
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
    dQ = dS @ cache.K
    dK = np.swapaxes(dS, 1, 2) @ cache.Q
    Rt = np.swapaxes(R, 1, 2)
    return {
        "w_q": np.einsum("bdj,bja->da", Rt, dQ),
        "w_k": np.einsum("bdj,bja->da", Rt, dK),
        "w_v": np.einsum("bdj,bja->da", Rt, dV),
    }
