"""Reference CTR backbone with the fused long-term interest as an extra input.

``y = sigmoid(MLP([emb(x_1) .. emb(x_F), mean(emb(h)), r]))``

Everything is plain numpy with hand-written backpropagation so the whole
model, fusion weights included, trains with one SGD loop.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import PreconditionError, ProtocolError, TrainingError
from .fusion import ATTENTION, AttentionWeights, FusedRepresentation, fuse_batch, fuse_batch_backward

log = logging.getLogger(__name__)

OOV = 0
EMBED_DIM = 32
HIDDEN = (200, 80)
MAX_HISTORY = 20

MODEL_MAGIC = b"LBCM"
MODEL_VERSION = 1


@dataclass
class CtrSample:
    """One labeled impression.

    ``long_term`` holds the reduced vectors of the partitions sealed before
    ``timestamp`` (one row per partition); the model fuses them itself so
    the fusion weights are trained with the rest.  ``fused`` short-circuits
    that with a precomputed vector.  With neither, the long-term slot is
    all zeros.
    """

    user_id: Hashable
    target_item_id: Hashable
    features: tuple[tuple[str, Hashable], ...]
    history: tuple[Hashable, ...] = ()
    label: int = 0
    timestamp: int = 0
    long_term: Optional[np.ndarray] = None
    fused: Optional[Union[FusedRepresentation, np.ndarray]] = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise PreconditionError(f"label must be 0 or 1, got {self.label!r}")
        self.features = tuple(self.features)
        self.history = tuple(self.history)
        if self.long_term is not None:
            lt = np.asarray(self.long_term, dtype=np.float64)
            if lt.ndim != 2:
                raise PreconditionError("long_term must be a (partitions x d_red) matrix")
            self.long_term = lt if lt.shape[0] else None


class FeatureIndex:
    """Per-field vocabularies; id 0 is reserved for unseen values."""

    def __init__(self, fields: Sequence[str], vocab: dict[str, dict[str, int]], history_field: str = "item_id"):
        if history_field not in fields:
            raise PreconditionError(f"history field {history_field!r} must be one of {list(fields)}")
        self.fields = tuple(fields)
        self.vocab = vocab
        self.history_field = history_field

    @classmethod
    def fit(cls, samples: Iterable[CtrSample], fields: Sequence[str], history_field: str = "item_id") -> "FeatureIndex":
        vocab: dict[str, dict[str, int]] = {f: {} for f in fields}
        for s in samples:
            for name, value in s.features:
                table = vocab.get(name)
                if table is not None:
                    table.setdefault(str(value), len(table) + 1)
            hv = vocab[history_field]
            for item in s.history:
                hv.setdefault(str(item), len(hv) + 1)
        return cls(fields, vocab, history_field)

    def size(self, name: str) -> int:
        return len(self.vocab[name]) + 1

    def lookup(self, name: str, value: Hashable) -> int:
        return self.vocab[name].get(str(value), OOV)


@dataclass
class Batch:
    x: np.ndarray
    hist: np.ndarray
    hist_mask: np.ndarray
    R: np.ndarray
    R_mask: np.ndarray
    fixed: np.ndarray
    has_fixed: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx: np.ndarray) -> "Batch":
        R, R_mask = self.R[idx], self.R_mask[idx]
        J = max(int(R_mask.sum(axis=1).max(initial=0)), 1)
        hm = self.hist_mask[idx]
        L = max(int(hm.sum(axis=1).max(initial=0)), 1)
        return Batch(
            self.x[idx], self.hist[idx][:, :L], hm[:, :L], R[:, :J], R_mask[:, :J],
            self.fixed[idx], self.has_fixed[idx], self.labels[idx],
        )


@dataclass
class TrainingReport:
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0


class CtrModel:
    """Embedding tables + mean-pooled history + fused long-term slot + MLP.

    Parameters live in ``self.params`` under stable names:
    ``emb.<field>``, ``fusion.w_q|w_k|w_v`` and ``mlp.W<i>`` / ``mlp.b<i>``.
    """

    def __init__(
        self,
        index: FeatureIndex,
        *,
        embed_dim: int = EMBED_DIM,
        d_red: int = 32,
        d_att: int = 32,
        hidden: Sequence[int] = HIDDEN,
        use_long_term: bool = True,
        fusion: str = ATTENTION,
        max_history: int = MAX_HISTORY,
        long_term_scale: float = 1.0,
        seed: int = 0,
    ):
        self.index = index
        self.long_term_scale = long_term_scale
        self.embed_dim = embed_dim
        self.d_red = d_red
        self.d_att = d_att
        self.hidden = tuple(hidden)
        self.use_long_term = use_long_term
        self.fusion = fusion
        self.max_history = max_history
        self.seed = seed

        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for name in index.fields:
            self.params[f"emb.{name}"] = rng.normal(0.0, 0.1, size=(index.size(name), embed_dim))
        if use_long_term:
            w = AttentionWeights.init(d_red, d_att, seed=seed + 1)
            self.params["fusion.w_q"], self.params["fusion.w_k"], self.params["fusion.w_v"] = w.w_q, w.w_k, w.w_v
        dims = [self.input_dim, *self.hidden, 1]
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            bound = np.sqrt(6.0 / (fan_in + fan_out)) if last else np.sqrt(6.0 / fan_in)
            self.params[f"mlp.W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"mlp.b{i}"] = np.zeros(fan_out)

    @property
    def input_dim(self) -> int:
        base = (len(self.index.fields) + 1) * self.embed_dim
        return base + (self.d_att if self.use_long_term else 0)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def attention(self) -> AttentionWeights:
        p = self.params
        return AttentionWeights(p["fusion.w_q"], p["fusion.w_k"], p["fusion.w_v"])

    def fusion_weights(self) -> AttentionWeights:
        """Weights to fuse *unscaled* stored vectors exactly as the model does.

        Scaling the rows of R by ``s`` equals scaling W_Q, W_K and W_V by ``s``.
        """
        s = self.long_term_scale
        w = self.attention
        return AttentionWeights(w.w_q * s, w.w_k * s, w.w_v * s)

    def config(self) -> dict:
        return {
            "embed_dim": self.embed_dim, "d_red": self.d_red, "d_att": self.d_att,
            "hidden": list(self.hidden), "use_long_term": self.use_long_term,
            "fusion": self.fusion, "max_history": self.max_history, "seed": self.seed,
            "long_term_scale": self.long_term_scale,
        }

    # -- input encoding -----------------------------------------------------

    def encode(self, samples: Sequence[CtrSample]) -> Batch:
        B = len(samples)
        F = len(self.index.fields)
        col = {name: i for i, name in enumerate(self.index.fields)}
        x = np.zeros((B, F), dtype=np.int64)
        L = max([len(s.history) for s in samples] + [1])
        if L > self.max_history:
            raise PreconditionError(f"history longer than {self.max_history}")
        hist = np.zeros((B, L), dtype=np.int64)
        hist_mask = np.zeros((B, L), dtype=bool)
        J = max([0 if s.long_term is None else s.long_term.shape[0] for s in samples] + [1])
        R = np.zeros((B, J, self.d_red))
        R_mask = np.zeros((B, J), dtype=bool)
        fixed = np.zeros((B, self.d_att))
        has_fixed = np.zeros(B, dtype=bool)
        labels = np.zeros(B)
        hf = self.index.history_field
        for b, s in enumerate(samples):
            for name, value in s.features:
                if name in col:
                    x[b, col[name]] = self.index.lookup(name, value)
            for t, item in enumerate(s.history):
                hist[b, t] = self.index.lookup(hf, item)
                hist_mask[b, t] = True
            labels[b] = s.label
            if not self.use_long_term:
                continue
            if s.fused is not None:
                v = s.fused.values if isinstance(s.fused, FusedRepresentation) else np.asarray(s.fused)
                if v.shape != (self.d_att,):
                    raise PreconditionError(f"fused vector must have dimension {self.d_att}")
                fixed[b] = v
                has_fixed[b] = True
            elif s.long_term is not None:
                lt = s.long_term
                if lt.shape[1] != self.d_red:
                    raise PreconditionError(f"long-term rows must have dimension {self.d_red}")
                R[b, : lt.shape[0]] = lt * self.long_term_scale
                R_mask[b, : lt.shape[0]] = True
        return Batch(x, hist, hist_mask, R, R_mask, fixed, has_fixed, labels)

    # -- forward / backward -------------------------------------------------

    def forward(self, batch: Batch):
        p = self.params
        B = len(batch)
        parts = [p[f"emb.{name}"][batch.x[:, i]] for i, name in enumerate(self.index.fields)]
        table = p[f"emb.{self.index.history_field}"]
        counts = batch.hist_mask.sum(axis=1)
        hist_emb = table[batch.hist] * batch.hist_mask[..., None]
        pooled = hist_emb.sum(axis=1) / np.maximum(counts, 1)[:, None]
        parts.append(pooled)
        fuse_rows = fuse_cache = None
        if self.use_long_term:
            lt = batch.fixed.copy()
            fuse_rows = np.flatnonzero(~batch.has_fixed & batch.R_mask.any(axis=1))
            if fuse_rows.size:
                out, fuse_cache = fuse_batch(batch.R[fuse_rows], batch.R_mask[fuse_rows], self.attention, self.fusion)
                lt[fuse_rows] = out
            parts.append(lt)
        a = np.concatenate(parts, axis=1)
        acts = [a]
        for i in range(self.n_layers):
            z = a @ p[f"mlp.W{i}"] + p[f"mlp.b{i}"]
            if i < self.n_layers - 1:
                a = np.maximum(z, 0.0)
                acts.append(a)
        logits = z[:, 0]
        cache = {"acts": acts, "counts": counts, "fuse_rows": fuse_rows, "fuse_cache": fuse_cache, "B": B}
        return logits, cache

    def backward(self, batch: Batch, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        acts = cache["acts"]
        d = dlogits[:, None]
        for i in reversed(range(self.n_layers)):
            grads[f"mlp.W{i}"] = acts[i].T @ d
            grads[f"mlp.b{i}"] = d.sum(axis=0)
            d = d @ p[f"mlp.W{i}"].T
            if i > 0:
                d = d * (acts[i] > 0)
        E = self.embed_dim
        for i, name in enumerate(self.index.fields):
            np.add.at(grads[f"emb.{name}"], batch.x[:, i], d[:, i * E : (i + 1) * E])
        off = len(self.index.fields) * E
        d_pooled = d[:, off : off + E] / np.maximum(cache["counts"], 1)[:, None]
        rows, cols = np.nonzero(batch.hist_mask)
        np.add.at(grads[f"emb.{self.index.history_field}"], batch.hist[rows, cols], d_pooled[rows])
        if self.use_long_term and cache["fuse_cache"] is not None:
            d_lt = d[:, off + E :]
            g = fuse_batch_backward(d_lt[cache["fuse_rows"]], cache["fuse_cache"], self.attention)
            for k, v in g.items():
                grads[f"fusion.{k}"] += v
        return grads

    def loss_and_grads(self, batch: Batch):
        logits, cache = self.forward(batch)
        y = batch.labels
        # mean BCE on logits: softplus(z) - y*z
        loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
        dlogits = (_sigmoid(logits) - y) / len(batch)
        return loss, self.backward(batch, cache, dlogits)

    def loss(self, batch: Batch) -> float:
        logits, _ = self.forward(batch)
        return float(np.mean(np.logaddexp(0.0, logits) - batch.labels * logits))

    def predict_proba(self, samples: Union[Sequence[CtrSample], Batch], chunk: int = 4096) -> np.ndarray:
        batch = samples if isinstance(samples, Batch) else self.encode(samples)
        out = []
        for start in range(0, len(batch), chunk):
            logits, _ = self.forward(batch.take(np.arange(start, min(start + chunk, len(batch)))))
            out.append(_sigmoid(logits))
        return np.concatenate(out) if out else np.zeros(0)

    def backbone_view(self) -> "CtrModel":
        """Same parameters without the long-term slot (its MLP rows dropped)."""
        m = CtrModel.__new__(CtrModel)
        m.__dict__.update(self.__dict__)
        m.use_long_term = False
        m.params = {k: v.copy() for k, v in self.params.items() if not k.startswith("fusion.")}
        if self.use_long_term:
            m.params["mlp.W0"] = self.params["mlp.W0"][: m.input_dim].copy()
        return m

    # -- persistence --------------------------------------------------------

    def save(self, path: Union[str, Path]) -> None:
        names = sorted(self.params)
        header = {
            "fields": list(self.index.fields),
            "history_field": self.index.history_field,
            "vocab": self.index.vocab,
            "config": self.config(),
            "params": [[n, list(self.params[n].shape)] for n in names],
        }
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sII", MODEL_MAGIC, MODEL_VERSION, len(raw)))
            fh.write(raw)
            for n in names:
                fh.write(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CtrModel":
        data = Path(path).read_bytes()
        magic, version, hlen = struct.unpack_from("<4sII", data, 0)
        if magic != MODEL_MAGIC or version != MODEL_VERSION:
            raise ProtocolError(f"{path} is not a version-{MODEL_VERSION} model checkpoint")
        off = struct.calcsize("<4sII")
        header = json.loads(data[off : off + hlen].decode("utf-8"))
        off += hlen
        index = FeatureIndex(header["fields"], header["vocab"], header["history_field"])
        cfg = header["config"]
        model = cls.__new__(cls)
        model.index = index
        model.embed_dim = cfg["embed_dim"]
        model.d_red = cfg["d_red"]
        model.d_att = cfg["d_att"]
        model.hidden = tuple(cfg["hidden"])
        model.use_long_term = cfg["use_long_term"]
        model.fusion = cfg["fusion"]
        model.max_history = cfg["max_history"]
        model.seed = cfg["seed"]
        model.long_term_scale = cfg.get("long_term_scale", 1.0)
        model.params = {}
        for name, shape in header["params"]:
            n = int(np.prod(shape))
            model.params[name] = np.frombuffer(data, "<f8", n, off).reshape(shape).copy()
            off += 8 * n
        return model


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def predict(model: CtrModel, sample: CtrSample) -> float:
    return float(model.predict_proba([sample])[0])


def train(
    model: CtrModel,
    samples: Union[Sequence[CtrSample], Batch],
    epochs: int = 10,
    lr: float = 1e-2,
    batch: int = 512,
    seed: int = 0,
) -> TrainingReport:
    """Minibatch SGD on mean binary cross-entropy.

    Each recorded epoch loss is the sample-weighted mean of the minibatch
    losses seen during that epoch.
    """
    data = samples if isinstance(samples, Batch) else model.encode(samples)
    n = len(data)
    if n == 0:
        raise PreconditionError("cannot train on an empty sample set")
    rng = np.random.default_rng(seed)
    report = TrainingReport()
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            mb = data.take(order[start : start + batch])
            loss, grads = model.loss_and_grads(mb)
            if not np.isfinite(loss):
                norms = {k: float(np.linalg.norm(v)) for k, v in model.params.items()}
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {report.steps}; parameter norms {norms}"
                )
            if lr:
                for k, g in grads.items():
                    model.params[k] -= lr * g
            total += loss * len(mb)
            report.steps += 1
        report.epoch_losses.append(total / n)
        log.debug("epoch %d loss %.5f", epoch, report.epoch_losses[-1])
    return report
