"""Knowledge text -> dense vector, then PCA down to the recommender's width."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence, Union

import numpy as np

from .clients import EmbedClient, RetryPolicy, call_with_retry
from .errors import DimensionError, PreconditionError, ProtocolError
from .prompting import InterestKnowledge

RAW = "raw"
REDUCED = "reduced"

PROJECTION_MAGIC = b"LBPC"
PROJECTION_VERSION = 1
_PROJ_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class KnowledgeVector:
    user_id: Hashable
    partition_index: int
    values: np.ndarray
    stage: str = RAW

    def __post_init__(self):
        if self.stage not in (RAW, REDUCED):
            raise PreconditionError(f"unknown stage {self.stage!r}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DimensionError("knowledge vectors are 1-D")
        if not np.all(np.isfinite(values)):
            raise PreconditionError("knowledge vector has non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def encode_knowledge(
    encoder: EmbedClient,
    knowledge: InterestKnowledge,
    user_id: Hashable = None,
    *,
    retry: RetryPolicy | None = None,
) -> KnowledgeVector:
    """Embed summary and shift separately and average them with equal weight.

    Without a shift text the result is the summary embedding itself.
    """
    if not knowledge.summary:
        raise PreconditionError("knowledge summary must be non-empty")
    texts = [knowledge.summary]
    if knowledge.shift:
        texts.append(knowledge.shift)
    vectors = call_with_retry(lambda: encoder.embed(texts), retry or RetryPolicy())
    if len(vectors) != len(texts):
        raise ProtocolError(f"encoder returned {len(vectors)} vectors for {len(texts)} texts")
    arrs = [np.asarray(v, dtype=np.float64).ravel() for v in vectors]
    if any(a.size == 0 for a in arrs):
        raise ProtocolError("encoder returned a zero-length embedding")
    if len({a.size for a in arrs}) != 1:
        raise ProtocolError("encoder returned embeddings of different sizes")
    pooled = arrs[0] if len(arrs) == 1 else (arrs[0] + arrs[1]) / 2.0
    return KnowledgeVector(user_id, knowledge.partition_index, pooled, RAW)


@dataclass(frozen=True)
class Projection:
    """Fitted PCA: ``mean`` (d_enc), ``components`` (d_enc x d_red) and the
    variance captured by each component."""

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def d_enc(self) -> int:
        return self.components.shape[0]

    @property
    def d_red(self) -> int:
        return self.components.shape[1]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_enc:
            raise DimensionError(f"expected dimension {self.d_enc}, got {x.shape[-1]}")
        return (x - self.mean) @ self.components

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.d_red:
            raise DimensionError(f"expected dimension {self.d_red}, got {z.shape[-1]}")
        return z @ self.components.T + self.mean

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as fh:
            fh.write(_PROJ_HEADER.pack(PROJECTION_MAGIC, PROJECTION_VERSION, self.d_enc, self.d_red))
            fh.write(self.mean.astype("<f8").tobytes())
            fh.write(self.components.astype("<f8").tobytes(order="F"))
            fh.write(self.explained_variance.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Projection":
        data = Path(path).read_bytes()
        magic, version, d_enc, d_red = _PROJ_HEADER.unpack_from(data, 0)
        if magic != PROJECTION_MAGIC or version != PROJECTION_VERSION:
            raise ProtocolError(f"{path} is not a version-{PROJECTION_VERSION} projection file")
        off = _PROJ_HEADER.size
        mean = np.frombuffer(data, "<f8", d_enc, off).astype(np.float64)
        off += 8 * d_enc
        comps = np.frombuffer(data, "<f8", d_enc * d_red, off).reshape((d_enc, d_red), order="F")
        off += 8 * d_enc * d_red
        ev = np.frombuffer(data, "<f8", d_red, off).astype(np.float64)
        return cls(mean, np.array(comps, dtype=np.float64), ev)


def _as_matrix(vectors: Sequence[Union[KnowledgeVector, np.ndarray]]) -> np.ndarray:
    rows = [v.values if isinstance(v, KnowledgeVector) else np.asarray(v, dtype=np.float64) for v in vectors]
    if not rows:
        raise DimensionError("no vectors given")
    if len({r.shape for r in rows}) != 1 or rows[0].ndim != 1:
        raise DimensionError("vectors must be 1-D and share one dimension")
    return np.vstack(rows)


def fit_projection(vectors: Sequence[Union[KnowledgeVector, np.ndarray]], d_red: int) -> Projection:
    """PCA via the eigendecomposition of the sample covariance.

    Component signs are fixed so that each column's largest-magnitude entry
    is positive.
    """
    X = _as_matrix(vectors)
    n, d_enc = X.shape
    if d_red < 1 or d_red > d_enc:
        raise DimensionError(f"d_red must be in 1..{d_enc}, got {d_red}")
    if n < d_red:
        raise DimensionError(f"need at least {d_red} vectors to fit, got {n}")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d_red]
    comps = evecs[:, order]
    ev = np.clip(evals[order], 0.0, None)
    pivots = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[pivots, np.arange(d_red)])
    signs[signs == 0] = 1.0
    comps = comps * signs
    return Projection(mean, comps, ev)


def project(p: Projection, v: KnowledgeVector) -> KnowledgeVector:
    if v.stage != RAW:
        raise PreconditionError("only raw vectors can be projected")
    if v.dim != p.d_enc:
        raise DimensionError(f"vector has dimension {v.dim}, projection expects {p.d_enc}")
    return KnowledgeVector(v.user_id, v.partition_index, p.transform(v.values), REDUCED)
