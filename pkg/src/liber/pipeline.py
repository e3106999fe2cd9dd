"""End-to-end flow per user: ingest -> seal -> summarize -> shift -> encode
-> store, then project, fuse and feed the CTR model.

Language-model work happens once per sealed partition and is cached in a
:class:`~liber.store.RepresentationStore`; replays and inference only read
the store.
"""

from __future__ import annotations

import bisect
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np

from .behavior_stream import Partition, PartitionConfig, PartitionSealed, UserState, ingest
from .clients import ChatClient, EmbedClient, RetryPolicy
from .ctr import CtrModel, CtrSample, FeatureIndex, TrainingReport, predict, train
from .data import Dataset, InteractionRecord
from .encoding import RAW, REDUCED, Projection, encode_knowledge, fit_projection
from .errors import ClientError, ConfigError, DegenerateInputError, PreconditionError
from .fusion import ATTENTION, MEAN, AttentionWeights, FusedRepresentation, fuse
from .ledger import EfficiencyLedger, EfficiencyReport, ledger_report
from .metrics import auc, log_loss
from .prompting import PromptTemplates, UserProfile, generate_knowledge
from .store import RepresentationStore, StoredRecord

log = logging.getLogger(__name__)

FULL = "full"
NO_PARTITION = "no_partition"
NO_INTEREST_SHIFT = "no_interest_shift"
NO_ATTENTION_FUSE = "no_attention_fuse"
PER_STEP_LLM = "per_step_llm"
VARIANTS = (FULL, NO_PARTITION, NO_INTEREST_SHIFT, NO_ATTENTION_FUSE, PER_STEP_LLM)
ABLATION_VARIANTS = (FULL, NO_PARTITION, NO_INTEREST_SHIFT, NO_ATTENTION_FUSE)

NO_PARTITION_MAX_LEN = 100
HISTORY_LEN = 20


@dataclass(frozen=True)
class VariantConfig:
    variant: str = FULL
    k: int = 20
    d_red: int = 32
    d_att: int = 32
    seed: int = 0
    max_len: Optional[int] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.k < 1:
            raise ConfigError("K must be >= 1")
        if self.d_red < 1 or self.d_att < 1:
            raise ConfigError("dimensions must be positive")
        if self.variant == PER_STEP_LLM and (self.max_len is None or self.max_len < 1):
            raise ConfigError("per_step_llm needs max_len >= 1")

    @classmethod
    def parse(cls, text: str, **kw) -> "VariantConfig":
        """Accept CLI spellings such as ``no-interest-shift`` or ``per-step:20``."""
        name, _, arg = text.strip().partition(":")
        name = name.replace("-", "_")
        if name in ("per_step", PER_STEP_LLM):
            try:
                return cls(PER_STEP_LLM, max_len=int(arg), **kw)
            except ValueError as exc:
                raise ConfigError(f"bad per-step length in {text!r}") from exc
        if arg:
            raise ConfigError(f"variant {name!r} takes no argument")
        return cls(name, **kw)

    @property
    def label(self) -> str:
        if self.variant == PER_STEP_LLM:
            return f"per-step:{self.max_len}"
        return self.variant.replace("_", "-")

    @property
    def uses_shift(self) -> bool:
        return self.variant in (FULL, NO_ATTENTION_FUSE)

    @property
    def fusion_mode(self) -> str:
        return MEAN if self.variant == NO_ATTENTION_FUSE else ATTENTION


@dataclass
class Clients:
    chat: ChatClient
    embed: EmbedClient


@dataclass
class StreamResult:
    """Per-user state plus the LLM-backed entries ``(index, sealed_at)``."""

    states: dict[str, UserState] = field(default_factory=dict)
    timeline: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    variant: Optional[VariantConfig] = None

    def entries_before(self, user_id: str, t: Optional[int]) -> list[int]:
        """Indices of entries sealed strictly before ``t`` (all when ``t`` is None)."""
        return [j for j, sealed in self.timeline.get(user_id, []) if t is None or sealed < t]


def _windows(variant: VariantConfig, state: UserState, behaviors, cutoff: Optional[int]):
    """Partitions that get an LLM summary under ``variant``, in order."""
    if variant.variant in (FULL, NO_INTEREST_SHIFT, NO_ATTENTION_FUSE):
        cfg = PartitionConfig(variant.k)
        for b in behaviors:
            out = ingest(state, b, cfg)
            if isinstance(out, PartitionSealed):
                yield out.partition
        return
    cfg = PartitionConfig(variant.k)
    for b in behaviors:
        ingest(state, b, cfg)
    if variant.variant == NO_PARTITION:
        limit = variant.max_len or NO_PARTITION_MAX_LEN
        seen = [b for b in behaviors if cutoff is None or b.timestamp < cutoff][-limit:]
        if seen:
            yield Partition(1, tuple(seen), seen[-1].timestamp)
        return
    L = variant.max_len
    for i, b in enumerate(behaviors):
        yield Partition(i + 1, tuple(behaviors[max(0, i + 1 - L) : i + 1]), b.timestamp)


def process_stream(
    dataset: Dataset,
    variant: VariantConfig,
    clients: Clients,
    store: RepresentationStore,
    ledger: EfficiencyLedger,
    *,
    cutoff: Optional[int] = None,
    templates: Optional[PromptTemplates] = None,
    retry: Optional[RetryPolicy] = None,
    workers: int = 1,
) -> StreamResult:
    """Run every user's stream through partitioning and knowledge extraction.

    Entries already in ``store`` are reused without any client call.  A user
    whose client calls fail (after retries) is recorded in ``failures`` and
    skipped; the run carries on.  ``cutoff`` bounds the single window of the
    no-partition variant.
    """
    result = StreamResult(variant=variant)
    by_user = dataset.by_user()

    def run_user(uid: str, records: Sequence[InteractionRecord]):
        state = UserState(uid)
        timeline: list[tuple[int, int]] = []
        profile = UserProfile(uid, dataset.profiles.get(uid, ""))
        behaviors = [r.to_behavior() for r in records]
        prev_summary: Optional[str] = None
        try:
            for part in _windows(variant, state, behaviors, cutoff):
                cached = store.get(uid, part.index, RAW)
                if cached is not None:
                    prev_summary = cached.summary
                else:
                    knowledge = generate_knowledge(
                        clients.chat, profile, part, dataset.factors, ledger,
                        prev_summary=prev_summary, with_shift=variant.uses_shift,
                        templates=templates, retry=retry,
                    )
                    vec = encode_knowledge(clients.embed, knowledge, uid, retry=retry)
                    store.put(StoredRecord(uid, part.index, RAW, vec.values, knowledge.summary, knowledge.shift))
                    prev_summary = knowledge.summary
                timeline.append((part.index, part.sealed_at))
        except ClientError as exc:
            log.warning("user %s failed: %s", uid, exc)
            return uid, state, timeline, f"{type(exc).__name__}: {exc}"
        return uid, state, timeline, None

    items = list(by_user.items())
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda kv: run_user(*kv), items))
    else:
        outcomes = [run_user(uid, recs) for uid, recs in items]
    for uid, state, timeline, err in outcomes:
        result.states[uid] = state
        result.timeline[uid] = timeline
        if err is not None:
            result.failures[uid] = err
    return result


def fit_store_projection(
    store: RepresentationStore,
    result: StreamResult,
    d_red: int,
    before: Optional[int] = None,
) -> Projection:
    """PCA on the raw vectors of entries sealed before ``before``.

    With fewer vectors than ``d_red`` the projection keeps as many
    components as there are vectors.
    """
    rows = []
    for uid in sorted(result.timeline):
        if uid in result.failures:
            continue
        for j in result.entries_before(uid, before):
            rec = store.get(uid, j, RAW)
            if rec is not None:
                rows.append(rec.vector)
    if not rows:
        raise DegenerateInputError("no raw representations to fit a projection on")
    d = min(d_red, len(rows), rows[0].size)
    if d < d_red:
        log.warning("only %d vectors available; reducing to %d dimensions instead of %d", len(rows), d, d_red)
    return fit_projection(rows, d)


def reduce_store(store: RepresentationStore, result: StreamResult, projection: Projection) -> int:
    """Write the reduced record for every raw entry that lacks one."""
    written = 0
    for uid in sorted(result.timeline):
        for j, _ in result.timeline[uid]:
            if store.get(uid, j, REDUCED) is not None:
                continue
            raw = store.get(uid, j, RAW)
            if raw is None:
                continue
            store.put(StoredRecord(uid, j, REDUCED, projection.transform(raw.vector), raw.summary, raw.shift))
            written += 1
    return written


def fuse_user(
    store: RepresentationStore,
    user_id: Hashable,
    weights: AttentionWeights,
    variant: VariantConfig = VariantConfig(),
    *,
    up_to: Optional[int] = None,
) -> FusedRepresentation:
    """Fuse the user's stored reduced vectors ``r_1 .. r_j`` in index order."""
    recs = store.records(user_id, REDUCED)
    if up_to is not None:
        recs = [r for r in recs if r.partition_index <= up_to]
    if not recs:
        raise DegenerateInputError(f"no stored partitions for user {user_id!r}")
    if variant.variant == PER_STEP_LLM:
        recs = recs[-1:]
    R = np.vstack([r.vector for r in recs])
    return fuse(R, weights, variant.fusion_mode, user_id=user_id)


def split_point(dataset: Dataset, split_ratio: float) -> int:
    if not 0.0 < split_ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {split_ratio}")
    n_train = int(round(len(dataset.records) * split_ratio))
    if n_train <= 0 or n_train >= len(dataset.records):
        raise ConfigError(f"split {split_ratio} leaves one side of {len(dataset.records)} records empty")
    return n_train


def split_time(dataset: Dataset, split_ratio: float) -> int:
    """Timestamp of the first test record."""
    return dataset.records[split_point(dataset, split_ratio)].timestamp


def build_training_samples(
    dataset: Dataset,
    result: StreamResult,
    store: RepresentationStore,
    split_ratio: float = 0.9,
    *,
    history_len: int = HISTORY_LEN,
    include_long_term: bool = True,
) -> tuple[list[CtrSample], list[CtrSample]]:
    """Global-time train/test split with causal per-sample features.

    ``h`` holds the user's latest ``history_len`` items strictly before the
    sample time, and the long-term block only entries sealed strictly
    before it.  Users that failed during stream processing are left out.
    """
    n_train = split_point(dataset, split_ratio)
    variant = result.variant or VariantConfig()
    per_step = variant.variant == PER_STEP_LLM

    seen_ts: dict[str, list[int]] = {}
    seen_items: dict[str, list[str]] = {}
    sealed: dict[str, list[int]] = {}
    vectors: dict[str, list[np.ndarray]] = {}
    for uid, entries in result.timeline.items():
        sealed[uid] = [s for _, s in entries]
        vectors[uid] = []
        for j, _ in entries:
            rec = store.get(uid, j, REDUCED)
            if rec is None:
                raise PreconditionError(f"entry ({uid}, {j}) has no reduced vector; run reduce_store first")
            vectors[uid].append(rec.vector)

    train_set: list[CtrSample] = []
    test_set: list[CtrSample] = []
    for pos, rec in enumerate(dataset.records):
        uid = rec.user_id
        ts_list = seen_ts.setdefault(uid, [])
        items = seen_items.setdefault(uid, [])
        if uid in result.failures:
            ts_list.append(rec.timestamp)
            items.append(rec.item_id)
            continue
        k = bisect.bisect_left(ts_list, rec.timestamp)
        history = tuple(items[max(0, k - history_len) : k])
        long_term = None
        if include_long_term and uid in sealed:
            n = bisect.bisect_left(sealed[uid], rec.timestamp)
            if n:
                rows = vectors[uid][n - 1 : n] if per_step else vectors[uid][:n]
                long_term = np.vstack(rows)
        sample = CtrSample(
            user_id=uid,
            target_item_id=rec.item_id,
            features=(("user_id", uid), ("item_id", rec.item_id), *rec.attributes),
            history=history,
            label=rec.label,
            timestamp=rec.timestamp,
            long_term=long_term,
        )
        (train_set if pos < n_train else test_set).append(sample)
        ts_list.append(rec.timestamp)
        items.append(rec.item_id)
    if not train_set or not test_set:
        raise ConfigError("split produced an empty train or test set")
    return train_set, test_set


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.05
    batch: int = 32
    seed: int = 0
    embed_dim: int = 32
    hidden: tuple[int, ...] = (200, 80)


@dataclass
class ExperimentResult:
    label: str
    auc: float
    log_loss: float
    efficiency: EfficiencyReport
    model: CtrModel
    projection: Projection
    stream: StreamResult
    training: TrainingReport
    n_train: int
    n_test: int
    store_writes: int
    llm_calls: int
    test_scores: np.ndarray = field(repr=False, default=None)

    def row(self) -> dict:
        return {
            "variant": self.label,
            "auc": self.auc,
            "log_loss": self.log_loss,
            "calls_per_user": self.efficiency.calls_per_user,
            "tokens_per_prompt": self.efficiency.tokens_per_prompt,
            "time_per_user": self.efficiency.time_per_user,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "failed_users": len(self.stream.failures),
        }


def long_term_scale(projection: Projection) -> float:
    """Inverse RMS of the projected coordinates, so fused inputs start near unit scale."""
    mean_var = float(np.mean(projection.explained_variance))
    return 1.0 / np.sqrt(mean_var) if mean_var > 0 else 1.0


def feature_fields(dataset: Dataset) -> list[str]:
    return ["user_id", "item_id", *dataset.attribute_names]


def run_experiment(
    dataset: Dataset,
    variant: VariantConfig,
    clients: Clients,
    store: RepresentationStore,
    *,
    split_ratio: float = 0.9,
    train_cfg: TrainConfig = TrainConfig(),
    backbone_only: bool = False,
    ledger: Optional[EfficiencyLedger] = None,
    templates: Optional[PromptTemplates] = None,
    retry: Optional[RetryPolicy] = None,
    workers: int = 1,
) -> ExperimentResult:
    """Ingest, fit the projection on the training period, train, evaluate.

    ``backbone_only`` trains the same model with the long-term slot removed
    (the zeros-representation baseline).
    """
    ledger = ledger or EfficiencyLedger(variant.label)
    writes_before = store.writes
    t_split = split_time(dataset, split_ratio)
    cutoff = t_split if variant.variant == NO_PARTITION else None
    stream = process_stream(dataset, variant, clients, store, ledger, cutoff=cutoff, templates=templates,
                            retry=retry, workers=workers)
    projection = fit_store_projection(store, stream, variant.d_red, before=t_split)
    reduce_store(store, stream, projection)
    train_set, test_set = build_training_samples(
        dataset, stream, store, split_ratio, include_long_term=not backbone_only
    )
    index = FeatureIndex.fit(train_set, feature_fields(dataset))
    model = CtrModel(
        index,
        embed_dim=train_cfg.embed_dim,
        d_red=projection.d_red,
        d_att=variant.d_att,
        hidden=train_cfg.hidden,
        use_long_term=not backbone_only,
        fusion=variant.fusion_mode,
        long_term_scale=long_term_scale(projection),
        seed=variant.seed,
    )
    report = train(model, train_set, train_cfg.epochs, train_cfg.lr, train_cfg.batch, train_cfg.seed)
    scores = model.predict_proba(test_set)
    labels = [s.label for s in test_set]
    label = "backbone" if backbone_only else variant.label
    return ExperimentResult(
        label=label,
        auc=auc(scores, labels),
        log_loss=log_loss(scores, labels),
        efficiency=ledger_report(ledger, max(len(stream.states), 1)),
        model=model,
        projection=projection,
        stream=stream,
        training=report,
        n_train=len(train_set),
        n_test=len(test_set),
        store_writes=store.writes - writes_before,
        llm_calls=ledger.llm_calls,
        test_scores=scores,
    )


__all__ = [
    "ABLATION_VARIANTS", "Clients", "ExperimentResult", "FULL", "NO_ATTENTION_FUSE",
    "NO_INTEREST_SHIFT", "NO_PARTITION", "PER_STEP_LLM", "StreamResult", "TrainConfig",
    "VARIANTS", "VariantConfig", "build_training_samples", "fit_store_projection",
    "fuse_user", "ledger_report", "predict", "process_stream", "reduce_store",
    "run_experiment", "split_time",
]
