"""Interaction datasets: file loading, labeling and a synthetic drift generator."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .behavior_stream import Behavior
from .errors import DataError, PreconditionError
from .prompting import DatasetFactors

log = logging.getLogger(__name__)

REQUIRED = ("user_id", "item_id", "rating", "timestamp")
RESERVED = REQUIRED + ("title", "profile", "label")

TOPIC_NAMES = (
    "sports", "jazz", "cooking", "travel", "science", "history",
    "fantasy", "finance", "gardening", "comedy", "horror", "poetry",
)
STYLES = ("classic", "modern", "indie", "popular")


@dataclass(frozen=True)
class LabelRule:
    """Rating to click label.

    By default ratings above ``threshold`` are positive.  With
    ``positive_only_rating`` set, only that exact rating is positive.
    """

    threshold: int = 3
    positive_only_rating: Optional[int] = None

    def __call__(self, rating: int) -> int:
        if self.positive_only_rating is not None:
            return int(rating == self.positive_only_rating)
        return int(rating > self.threshold)


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    rating: int
    timestamp: int
    title: str
    attributes: tuple[tuple[str, str], ...] = ()
    label: int = 0

    def to_behavior(self) -> Behavior:
        return Behavior(
            user_id=self.user_id,
            item_id=self.item_id,
            title=self.title,
            attributes=self.attributes,
            rating=self.rating,
            timestamp=self.timestamp,
        )


@dataclass
class Dataset:
    records: list[InteractionRecord]
    factors: DatasetFactors
    profiles: dict[str, str] = field(default_factory=dict)
    attribute_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def users(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.user_id, None)
        return list(seen)

    def by_user(self) -> dict[str, list[InteractionRecord]]:
        out: dict[str, list[InteractionRecord]] = defaultdict(list)
        for r in self.records:
            out[r.user_id].append(r)
        return dict(out)


def _sort_records(records: list[InteractionRecord]) -> list[InteractionRecord]:
    # sorted() is stable, so equal timestamps keep input order
    return sorted(records, key=lambda r: r.timestamp)


def _filter_min_interactions(records: list[InteractionRecord], n: int) -> list[InteractionRecord]:
    users = Counter(r.user_id for r in records)
    items = Counter(r.item_id for r in records)
    return [r for r in records if users[r.user_id] >= n and items[r.item_id] >= n]


def _parse_row(row: dict, attr_names: Sequence[str], rule: LabelRule, where: str) -> tuple[InteractionRecord, str]:
    try:
        uid = str(row["user_id"]).strip()
        iid = str(row["item_id"]).strip()
        rating = int(float(row["rating"]))
        ts = int(float(row["timestamp"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: malformed row ({exc})") from exc
    if not uid or not iid:
        raise DataError(f"{where}: empty user or item id")
    if not 1 <= rating <= 5:
        raise DataError(f"{where}: rating {rating} outside 1..5")
    if ts < 0:
        raise DataError(f"{where}: negative timestamp")
    title = str(row.get("title") or "").strip() or iid
    attrs = []
    for name in attr_names:
        value = row.get(name)
        if value is None or str(value).strip() == "":
            continue
        attrs.append((name, str(value).strip()))
    rec = InteractionRecord(uid, iid, rating, ts, title, tuple(attrs), rule(rating))
    return rec, str(row.get("profile") or "").strip()


def load_interactions(
    path: Union[str, Path],
    rule: LabelRule = LabelRule(),
    *,
    factors: Optional[Sequence[str]] = None,
    min_interactions: Optional[int] = None,
) -> Dataset:
    """Read a tab-separated file with a header row, or JSON lines.

    Columns ``user_id, item_id, rating, timestamp`` are required; ``title``
    and ``profile`` are optional; every other column becomes an item
    attribute, in column order.  Rows end up sorted by timestamp with input
    order kept for ties.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} does not exist")
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise DataError(f"{path} is empty")
    parsed: list[tuple[InteractionRecord, str]] = []
    if text.lstrip().startswith("{"):
        attr_names: list[str] = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(row, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            for k in row:
                if k not in RESERVED and k not in attr_names:
                    attr_names.append(k)
            parsed.append(_parse_row(row, [k for k in attr_names if k in row], rule, f"{path}:{lineno}"))
    else:
        reader = csv.reader(text.splitlines(), delimiter="\t")
        header = [h.strip() for h in next(reader)]
        missing = [c for c in REQUIRED if c not in header]
        if missing:
            raise DataError(f"{path}:1: header lacks required columns {missing}")
        attr_names = [h for h in header if h not in RESERVED]
        for lineno, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(cells)}")
            parsed.append(_parse_row(dict(zip(header, cells)), attr_names, rule, f"{path}:{lineno}"))
    if not parsed:
        raise DataError(f"{path} contains no interactions")

    records = [r for r, _ in parsed]
    profiles: dict[str, str] = {}
    for r, prof in parsed:
        if prof and r.user_id not in profiles:
            profiles[r.user_id] = prof
    if min_interactions:
        records = _filter_min_interactions(records, min_interactions)
        if not records:
            raise DataError(f"no interactions left after --min-interactions {min_interactions}")
    names = tuple(attr_names)
    return Dataset(
        records=_sort_records(records),
        factors=DatasetFactors(tuple(factors) if factors else (names or ("genre",))),
        profiles=profiles,
        attribute_names=names,
        meta={"source": str(path)},
    )


def save_interactions(dataset: Dataset, path: Union[str, Path]) -> None:
    """Write the tab-separated layout :func:`load_interactions` reads."""
    names = list(dataset.attribute_names)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["user_id", "item_id", "rating", "timestamp", "title", "profile", *names])
        for r in dataset.records:
            attrs = dict(r.attributes)
            w.writerow([
                r.user_id, r.item_id, r.rating, r.timestamp, r.title,
                dataset.profiles.get(r.user_id, ""), *(attrs.get(n, "") for n in names),
            ])


def topic_name(i: int) -> str:
    return TOPIC_NAMES[i] if i < len(TOPIC_NAMES) else f"topic{i}"


def generate_synthetic_stream(
    users: int = 10,
    behaviors_per_user: int = 180,
    topics: int = 4,
    seed: int = 0,
    *,
    items_per_topic: int = 25,
    p_match: float = 0.9,
    p_other: float = 0.1,
    drift_index: Optional[int] = None,
    rule: LabelRule = LabelRule(),
) -> Dataset:
    """Users with one latent topic that switches once, at ``drift_index``.

    Exposure is uniform over the catalogue, so the items a user sees say
    nothing about their taste; only the ratings do.  A click (rating 4-5)
    happens with probability ``p_match`` when the item's topic is the
    user's current topic and ``p_other`` otherwise; non-clicks get 1-3.
    """
    if topics < 2:
        raise PreconditionError("need at least two topics for a drift")
    if users < 1 or behaviors_per_user < 1:
        raise PreconditionError("users and behaviors_per_user must be positive")
    rng = np.random.default_rng(seed)
    drift = behaviors_per_user // 2 if drift_index is None else drift_index
    names = [topic_name(t) for t in range(topics)]

    items = []
    for t, name in enumerate(names):
        for k in range(items_per_topic):
            style = STYLES[int(rng.integers(len(STYLES)))]
            items.append((f"{name}-{k:03d}", f"{name.title()} pick #{k}", name, style))

    genders = ("female", "male")
    jobs = ("engineer", "teacher", "student", "artist", "nurse", "writer", "retired")
    profiles: dict[str, str] = {}
    topic_plan: dict[str, tuple[str, str]] = {}
    user_ids = [f"u{u:04d}" for u in range(users)]
    for uid in user_ids:
        before = int(rng.integers(topics))
        after = int(rng.integers(topics - 1))
        after += after >= before
        topic_plan[uid] = (names[before], names[after])
        profiles[uid] = (
            f"{genders[int(rng.integers(2))]}, {int(rng.integers(18, 70))}, "
            f"{jobs[int(rng.integers(len(jobs)))]}"
        )

    t0 = 1_600_000_000
    records = []
    for i in range(behaviors_per_user):
        for u, uid in enumerate(user_ids):
            item_id, title, topic, style = items[int(rng.integers(len(items)))]
            current = topic_plan[uid][0] if i < drift else topic_plan[uid][1]
            click = rng.random() < (p_match if topic == current else p_other)
            rating = int(rng.integers(4, 6)) if click else int(rng.integers(1, 4))
            ts = t0 + (i * users + u) * 60
            attrs = (("topic", f"topic:{topic}"), ("style", style))
            records.append(InteractionRecord(uid, item_id, rating, ts, title, attrs, rule(rating)))

    return Dataset(
        records=_sort_records(records),
        factors=DatasetFactors(("topic", "style")),
        profiles=profiles,
        attribute_names=("topic", "style"),
        meta={
            "generator": "topic-drift",
            "seed": seed,
            "drift_index": {uid: drift for uid in user_ids},
            "topics": topic_plan,
        },
    )
