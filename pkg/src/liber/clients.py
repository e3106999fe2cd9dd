"""Chat-completion and text-embedding backends.

Both real backends speak JSON over HTTP.  The pipeline only relies on the
two small protocols below, so anything with a ``complete`` or ``embed``
method can be plugged in (see ``liber.mocks`` for the deterministic ones).
"""

from __future__ import annotations

import os
import random
import time
from dataclasses import dataclass
from typing import Any, Callable, Optional, Protocol, Sequence

import httpx
import numpy as np

from .errors import ProtocolError, RetryableClientError, TransportError


class ChatClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class EmbedClient(Protocol):
    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff for transport failures.

    ``max_retries`` counts retries after the first attempt.
    """

    max_retries: int = 3
    backoff_base: float = 0.5
    max_backoff: float = 8.0
    jitter: float = 0.0

    def delay(self, attempt: int) -> float:
        d = min(self.max_backoff, self.backoff_base * (2 ** attempt))
        if self.jitter:
            d += random.uniform(0, self.jitter)
        return d


def call_with_retry(
    fn: Callable[[], Any],
    policy: RetryPolicy,
    *,
    prompt: Optional[str] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> Any:
    """Run ``fn`` retrying only on :class:`TransportError`."""
    last: Optional[Exception] = None
    for attempt in range(policy.max_retries + 1):
        try:
            return fn()
        except TransportError as exc:
            last = exc
            if attempt < policy.max_retries:
                sleep(policy.delay(attempt))
    raise RetryableClientError(
        f"backend failed after {policy.max_retries} retries: {last}", prompt=prompt
    ) from last


def extract_path(payload: Any, path: str) -> Any:
    """Follow a dotted path such as ``choices.0.message.content``.

    A ``*`` segment maps the rest of the path over every list element.
    """
    parts = path.split(".") if path else []

    def walk(node: Any, rest: list[str]) -> Any:
        if not rest:
            return node
        head, tail = rest[0], rest[1:]
        if head == "*":
            if not isinstance(node, list):
                raise ProtocolError(f"expected a list at '*' in path {path!r}")
            return [walk(x, tail) for x in node]
        try:
            if isinstance(node, list):
                return walk(node[int(head)], tail)
            return walk(node[head], tail)
        except (KeyError, IndexError, ValueError, TypeError) as exc:
            raise ProtocolError(f"response has no {path!r}") from exc

    return walk(payload, parts)


def _post_json(client: httpx.Client, url: str, body: dict, headers: dict) -> Any:
    try:
        resp = client.post(url, json=body, headers=headers)
    except httpx.TransportError as exc:
        raise TransportError(str(exc)) from exc
    if resp.status_code == 429 or resp.status_code >= 500:
        raise TransportError(f"HTTP {resp.status_code} from {url}")
    if resp.status_code >= 400:
        raise ProtocolError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
    try:
        return resp.json()
    except ValueError as exc:
        raise ProtocolError(f"non-JSON response from {url}") from exc


def _auth_headers(api_key: Optional[str]) -> dict:
    return {"Authorization": f"Bearer {api_key}"} if api_key else {}


class HttpChatClient:
    """Chat-completions style endpoint.

    Sends ``{model, messages, temperature}`` and reads the completion text
    at ``response_path``.  Temperature defaults to 0 so runs are repeatable
    as far as the backend allows.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        api_key: Optional[str] = None,
        temperature: float = 0.0,
        response_path: str = "choices.0.message.content",
        timeout: float = 120.0,
        http_client: Optional[httpx.Client] = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("CHAT_API_KEY")
        self.temperature = temperature
        self.response_path = response_path
        self._http = http_client or httpx.Client(timeout=timeout)

    def complete(self, prompt: str) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        payload = _post_json(self._http, self.endpoint, body, _auth_headers(self.api_key))
        text = extract_path(payload, self.response_path)
        if not isinstance(text, str):
            raise ProtocolError(f"completion at {self.response_path!r} is not text")
        return text

    def close(self) -> None:
        self._http.close()


class HttpEmbedClient:
    """Embedding endpoint taking ``{model, input: [str]}``.

    The response must hold one vector per input at ``response_path``.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        api_key: Optional[str] = None,
        response_path: str = "data.*.embedding",
        timeout: float = 60.0,
        http_client: Optional[httpx.Client] = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("EMBED_API_KEY")
        self.response_path = response_path
        self._http = http_client or httpx.Client(timeout=timeout)
        self.dim: Optional[int] = None

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        body = {"model": self.model, "input": list(texts)}
        payload = _post_json(self._http, self.endpoint, body, _auth_headers(self.api_key))
        raw = extract_path(payload, self.response_path)
        if not isinstance(raw, list) or len(raw) != len(texts):
            raise ProtocolError(f"expected {len(texts)} vectors at {self.response_path!r}")
        vectors = [np.asarray(v, dtype=np.float64) for v in raw]
        for v in vectors:
            if v.ndim != 1 or v.size == 0:
                raise ProtocolError("embedding vectors must be non-empty and 1-D")
            if self.dim is None:
                self.dim = v.size
            elif v.size != self.dim:
                raise ProtocolError(f"embedding dimension changed from {self.dim} to {v.size}")
        return vectors

    def close(self) -> None:
        self._http.close()
