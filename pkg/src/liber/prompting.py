"""Cascaded interest prompts: a per-partition summary, then a shift between
consecutive summaries.

Prompt rendering is pure.  Only :func:`summarize_partition` and
:func:`infer_interest_shift` talk to a :class:`~liber.clients.ChatClient`,
and each logical request is booked exactly once in the ledger.
"""

from __future__ import annotations

import math
import string
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Hashable, Optional, Sequence, Union

from .behavior_stream import Behavior, Partition
from .clients import ChatClient, RetryPolicy, call_with_retry
from .errors import PreconditionError, ProtocolError
from .ledger import EfficiencyLedger

SUMMARY = "summary"
SHIFT = "shift"

EMPTY_PROFILE = "No profile information is available for this user."


def estimate_tokens(text: str) -> int:
    """Character heuristic: one token per four characters, rounded up."""
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class PromptText:
    role_kind: str
    text: str
    token_estimate: int

    def __post_init__(self):
        if self.role_kind not in (SUMMARY, SHIFT):
            raise PreconditionError(f"unknown prompt kind {self.role_kind!r}")
        if not self.text:
            raise PreconditionError("prompt text must be non-empty")


@dataclass(frozen=True)
class UserProfile:
    user_id: Hashable
    description: str = ""


@dataclass(frozen=True)
class DatasetFactors:
    factors: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.factors:
            raise PreconditionError("at least one dataset factor is required")


MOVIE_FACTORS = DatasetFactors(("genre", "director", "period"))
BOOK_FACTORS = DatasetFactors(("category", "author"))


@dataclass(frozen=True)
class InterestKnowledge:
    partition_index: int
    summary: str
    shift: Optional[str] = None

    def __post_init__(self):
        if not self.summary:
            raise PreconditionError("interest summary must be non-empty")
        if self.partition_index < 1:
            raise PreconditionError("partition_index starts at 1")
        # the first partition has no predecessor to compare against
        if self.partition_index == 1 and self.shift is not None:
            raise PreconditionError("the first partition cannot carry shift knowledge")


class PromptTemplates:
    """The two prompt templates, loaded from text files.

    Templates use ``string.Template`` placeholders: ``$profile``,
    ``$behaviors`` and ``$factors`` for the summary prompt; ``$previous``,
    ``$current`` and ``$factors`` for the shift prompt.
    """

    def __init__(self, summary: str, shift: str):
        self.summary = string.Template(summary)
        self.shift = string.Template(shift)

    @classmethod
    def default(cls) -> "PromptTemplates":
        pkg = resources.files("liber") / "templates"
        return cls(
            (pkg / "summary.txt").read_text(encoding="utf-8"),
            (pkg / "shift.txt").read_text(encoding="utf-8"),
        )

    @classmethod
    def from_dir(cls, path: Union[str, Path]) -> "PromptTemplates":
        path = Path(path)
        return cls(
            (path / "summary.txt").read_text(encoding="utf-8"),
            (path / "shift.txt").read_text(encoding="utf-8"),
        )


_DEFAULT_TEMPLATES: Optional[PromptTemplates] = None


def default_templates() -> PromptTemplates:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = PromptTemplates.default()
    return _DEFAULT_TEMPLATES


def format_behavior(position: int, b: Behavior) -> str:
    fields = [b.title]
    fields.extend(f"{name}: {value}" for name, value in b.attributes)
    if b.rating is not None:
        fields.append(f"rating: {b.rating}/5")
    return f"{position}. " + " | ".join(fields)


def _factor_list(factors: DatasetFactors) -> str:
    return ", ".join(factors.factors)


def build_summary_prompt(
    profile: UserProfile,
    partition: Union[Partition, Sequence[Behavior]],
    factors: DatasetFactors,
    *,
    templates: Optional[PromptTemplates] = None,
    estimator: Callable[[str], int] = estimate_tokens,
) -> PromptText:
    behaviors = partition.behaviors if isinstance(partition, Partition) else tuple(partition)
    if not behaviors:
        raise PreconditionError("cannot summarize an empty partition")
    templates = templates or default_templates()
    lines = "\n".join(format_behavior(i, b) for i, b in enumerate(behaviors, start=1))
    text = templates.summary.substitute(
        profile=profile.description.strip() or EMPTY_PROFILE,
        behaviors=lines,
        factors=_factor_list(factors),
    )
    return PromptText(SUMMARY, text, estimator(text))


def build_shift_prompt(
    prev_summary: str,
    curr_summary: str,
    factors: DatasetFactors,
    *,
    templates: Optional[PromptTemplates] = None,
    estimator: Callable[[str], int] = estimate_tokens,
) -> PromptText:
    if not prev_summary or not curr_summary:
        raise PreconditionError("shift prompt needs both a previous and a current summary")
    templates = templates or default_templates()
    text = templates.shift.substitute(
        previous=prev_summary.strip(),
        current=curr_summary.strip(),
        factors=_factor_list(factors),
    )
    return PromptText(SHIFT, text, estimator(text))


def request_completion(
    client: ChatClient,
    prompt: PromptText,
    ledger: Optional[EfficiencyLedger],
    user_id: Hashable,
    retry: Optional[RetryPolicy] = None,
) -> str:
    """One logical LLM call: retried on transport errors, booked once."""
    start = time.perf_counter()
    try:
        text = call_with_retry(
            lambda: client.complete(prompt.text), retry or RetryPolicy(), prompt=prompt.text
        )
    except Exception:
        if ledger is not None:
            ledger.record_failure()
        raise
    elapsed = time.perf_counter() - start
    if not isinstance(text, str) or not text.strip():
        if ledger is not None:
            ledger.record_failure()
        raise ProtocolError(f"empty completion for {prompt.role_kind} prompt")
    if ledger is not None:
        ledger.record_call(user_id, prompt.token_estimate, elapsed)
    return text.strip()


def summarize_partition(
    client: ChatClient,
    profile: UserProfile,
    partition: Union[Partition, Sequence[Behavior]],
    factors: DatasetFactors,
    ledger: Optional[EfficiencyLedger] = None,
    *,
    templates: Optional[PromptTemplates] = None,
    retry: Optional[RetryPolicy] = None,
) -> str:
    prompt = build_summary_prompt(profile, partition, factors, templates=templates)
    return request_completion(client, prompt, ledger, profile.user_id, retry)


def infer_interest_shift(
    client: ChatClient,
    curr_summary: str,
    prev_summary: str,
    factors: DatasetFactors,
    ledger: Optional[EfficiencyLedger] = None,
    *,
    user_id: Hashable = None,
    templates: Optional[PromptTemplates] = None,
    retry: Optional[RetryPolicy] = None,
) -> str:
    prompt = build_shift_prompt(prev_summary, curr_summary, factors, templates=templates)
    return request_completion(client, prompt, ledger, user_id, retry)


def generate_knowledge(
    client: ChatClient,
    profile: UserProfile,
    partition: Partition,
    factors: DatasetFactors,
    ledger: Optional[EfficiencyLedger] = None,
    *,
    prev_summary: Optional[str] = None,
    with_shift: bool = True,
    templates: Optional[PromptTemplates] = None,
    retry: Optional[RetryPolicy] = None,
) -> InterestKnowledge:
    """Summary for ``partition``, then its shift against ``prev_summary``.

    The shift request is only issued once both summaries exist, and never
    for the first partition.
    """
    summary = summarize_partition(
        client, profile, partition, factors, ledger, templates=templates, retry=retry
    )
    shift = None
    if with_shift and partition.index > 1:
        if prev_summary is None:
            raise PreconditionError(
                f"partition {partition.index} needs the summary of partition {partition.index - 1}"
            )
        shift = infer_interest_shift(
            client, summary, prev_summary, factors, ledger,
            user_id=profile.user_id, templates=templates, retry=retry,
        )
    return InterestKnowledge(partition.index, summary, shift)
