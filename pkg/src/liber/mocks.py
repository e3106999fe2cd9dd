"""Deterministic stand-ins for the chat and embedding backends.

The chat mock reads ``topic:<name>`` tags off the numbered behavior lines of
a summary prompt, weights them by rating and names the topics in order of
weight.  For a shift prompt it compares the primary topics of the two
summaries.  Its output therefore carries real (if crude) interest
information through the pipeline, which is what the end-to-end tests rely
on.  It is a test harness, not a model of how a real LLM answers.
"""

from __future__ import annotations

import hashlib
import re
import threading
from collections import Counter
from typing import Sequence

import numpy as np

_LINE = re.compile(r"^\s*\d+\.\s")
_TOPIC = re.compile(r"topic:([A-Za-z0-9_-]+)")
_RATING = re.compile(r"rating:\s*([1-5])")
_PRIMARY = re.compile(r"primary:([A-Za-z0-9_-]+)")
_STRIP = ".,;!?()[]\"'"


def _line_weight(line: str) -> int:
    m = _RATING.search(line)
    if m is None:
        return 1
    # ratings of 3 and below say nothing about liking
    return max(int(m.group(1)) - 3, 0)


def topic_weights(prompt: str) -> Counter:
    """Rating-weighted topic counts over the behavior lines of a prompt."""
    weights: Counter = Counter()
    order: dict[str, int] = {}
    for line in prompt.splitlines():
        if not _LINE.match(line):
            continue
        w = _line_weight(line)
        for topic in _TOPIC.findall(line):
            order.setdefault(topic, len(order))
            weights[topic] += w
    # deterministic order: weight desc, then first appearance
    return Counter(dict(sorted(weights.items(), key=lambda kv: (-kv[1], order[kv[0]]))))


def mock_chat_completion(prompt: str, max_secondary: int = 2) -> str:
    primaries = _PRIMARY.findall(prompt)
    if len(primaries) >= 2:
        prev, curr = primaries[0], primaries[-1]
        if prev == curr:
            return f"The interests of the user stay stable around {curr}. steady:{curr}"
        return (
            f"The user has moved on from {prev} and now favours {curr}. "
            f"new:{curr} dropped:{prev}"
        )
    ranked = [t for t, w in topic_weights(prompt).items() if w > 0]
    if not ranked:
        return "The user shows no clear preference in this period. primary:none"
    head, rest = ranked[0], ranked[1 : 1 + max_secondary]
    text = f"The user mainly enjoys {head} content. primary:{head}"
    if rest:
        text += " Secondary interests: " + ", ".join(rest) + ". "
        text += " ".join(f"secondary:{t}" for t in rest)
    return text


class MockChatClient:
    """Pure chat mock; counts invocations for tests."""

    kind = "mock"

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
        return mock_chat_completion(prompt)


def tokenize(text: str) -> list[str]:
    """Whitespace chunks, lower-cased, surrounding punctuation removed."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP)
        if tok:
            out.append(tok)
    return out


def token_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


class MockEmbedClient:
    """Hash-seeded unit vector per token, average-pooled per text."""

    kind = "mock"

    def __init__(self, dim: int = 768):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _token(self, tok: str) -> np.ndarray:
        with self._lock:
            v = self._cache.get(tok)
            if v is None:
                v = self._cache[tok] = token_vector(tok, self.dim)
            return v

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        out = []
        for text in texts:
            toks = tokenize(text)
            if not toks:
                out.append(np.zeros(self.dim))
                continue
            out.append(np.mean([self._token(t) for t in toks], axis=0))
        return out
