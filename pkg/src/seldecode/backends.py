"""Teacher scoring through an OpenAI-compatible completions endpoint with top-n logprobs.

The server is asked for a single-token continuation with ``top_logprobs`` reporting; candidate
tokens missing from the returned top-n get a fixed floor logprob.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import httpx
import numpy as np

from .selection import CandidateSet, ScoreVector

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    """Network failure or server error that persisted through all retries."""


class ProtocolError(BackendError):
    """The response body could not be parsed."""


class CapabilityError(BackendError):
    """The server rejected the request or does not report logprobs."""


@dataclass
class RemoteModelConfig:
    endpoint: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    top_logprobs_n: int = 20
    timeout: float = 30.0
    retries: int = 2
    backoff_base: float = 0.5
    floor_logprob: float = -30.0

    def __post_init__(self):
        if self.top_logprobs_n < 1:
            raise ValueError("top_logprobs_n must be >= 1")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.retries < 0:
            raise ValueError("retries must be nonnegative")

    @property
    def url(self) -> str:
        return self.endpoint.rstrip("/") + "/completions"


def build_request_body(config: RemoteModelConfig, prompt: str) -> bytes:
    body = {
        "model": config.model,
        "prompt": prompt,
        "max_tokens": 1,
        "temperature": 0,
        "logprobs": True,
        "top_logprobs": config.top_logprobs_n,
    }
    return json.dumps(body, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def parse_top_logprobs(payload: dict) -> dict[str, float]:
    """Top-n map of the first generated position in the first choice.

    Accepts the completions layout (``logprobs.top_logprobs`` = list of dicts) and the chat
    layout (``logprobs.content[0].top_logprobs`` = list of ``{token, logprob}``).
    """
    try:
        choice = payload["choices"][0]
    except (KeyError, IndexError, TypeError):
        raise ProtocolError("response has no choices") from None
    lp = choice.get("logprobs") if isinstance(choice, dict) else None
    if not lp:
        raise CapabilityError("response carries no logprobs")
    if isinstance(lp.get("top_logprobs"), list) and lp["top_logprobs"]:
        first = lp["top_logprobs"][0]
        if not isinstance(first, dict):
            raise ProtocolError("malformed top_logprobs entry")
        return {str(k): float(v) for k, v in first.items()}
    content = lp.get("content")
    if isinstance(content, list) and content:
        entries = content[0].get("top_logprobs")
        if not isinstance(entries, list):
            raise CapabilityError("response carries no top_logprobs")
        return {str(e["token"]): float(e["logprob"]) for e in entries}
    raise CapabilityError("response carries no top_logprobs")


class RemoteClient:
    """Small synchronous client with retry and exponential backoff.

    ``transport`` and ``sleep`` are injectable for tests.
    """

    def __init__(self, config: RemoteModelConfig, transport: httpx.BaseTransport | None = None, sleep: Callable = time.sleep):
        self.config = config
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(headers=headers, timeout=config.timeout, transport=transport)
        self.attempts = 0

    def close(self):
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def post(self, body: bytes, correlation_id: str | None = None) -> dict:
        cfg = self.config
        extra = {"X-Request-ID": correlation_id} if correlation_id is not None else None
        last: Exception | None = None
        for attempt in range(cfg.retries + 1):
            if attempt:
                self._sleep(cfg.backoff_base * 2 ** (attempt - 1))
            self.attempts += 1
            try:
                resp = self._client.post(cfg.url, content=body, headers=extra)
            except httpx.TransportError as exc:
                last = exc
                log.warning("request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if 400 <= resp.status_code < 500:
                raise CapabilityError(f"server rejected request: {resp.status_code} {resp.text[:200]}")
            if resp.status_code >= 500:
                last = TransportError(f"server error {resp.status_code}")
                log.warning("server error %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            try:
                return resp.json()
            except ValueError:
                raise ProtocolError("response body is not JSON") from None
        raise TransportError(f"giving up after {cfg.retries + 1} attempts: {last}")


def remote_topn_logprobs(config: RemoteModelConfig, prompt: str, client: RemoteClient | None = None) -> dict[str, float]:
    own = client is None
    client = client or RemoteClient(config)
    try:
        return parse_top_logprobs(client.post(build_request_body(config, prompt)))
    finally:
        if own:
            client.close()


def score_from_topn(topn: dict[str, float], rendered: Sequence[str], floor_logprob: float) -> np.ndarray:
    return np.array([math.exp(topn.get(r, floor_logprob)) for r in rendered])


def batch_topn(config: RemoteModelConfig, prompts: Sequence[str], client: RemoteClient, max_in_flight: int = 4) -> list[dict]:
    """Concurrent top-n requests; results come back in prompt order."""
    bodies = [build_request_body(config, p) for p in prompts]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        futures = {i: pool.submit(client.post, b, str(i)) for i, b in enumerate(bodies)}
        return [parse_top_logprobs(futures[i].result()) for i in range(len(bodies))]


@dataclass
class RemoteTeacher:
    """Collaborative-mode scorer backed by a remote model.

    ``render`` maps a text id to the remote tokenizer's single-token string. A value of None
    declares the unit multi-token remotely, which is rejected up front.
    """

    config: RemoteModelConfig
    vocab: object
    render: dict | None = None
    transport: httpx.BaseTransport | None = None
    sleep: Callable = time.sleep
    all_absent_count: int = 0
    _client: RemoteClient | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.render is None:
            self.render = {i: tok for i, tok in enumerate(self.vocab.text_tokens)}
        missing = [i for i in range(self.vocab.n_text) if not self.render.get(i)]
        if missing:
            raise ValueError(f"text ids without a single-token rendering: {missing[:10]}")
        self._client = RemoteClient(self.config, self.transport, self.sleep)

    def validate_k(self, K: int) -> None:
        if K > self.config.top_logprobs_n:
            raise ValueError(f"K={K} exceeds top_logprobs_n={self.config.top_logprobs_n}")

    def prompt_text(self, state) -> str:
        return "".join(self.render[t] for t in state.tokens)

    def score_candidates(self, state, candidates: CandidateSet) -> ScoreVector:
        self.validate_k(len(candidates))
        topn = parse_top_logprobs(self._client.post(build_request_body(self.config, self.prompt_text(state))))
        rendered = [self.render[c] for c in candidates.tokens]
        if not any(r in topn for r in rendered):
            self.all_absent_count += 1
            log.warning("no candidate present in the remote top-%d", self.config.top_logprobs_n)
        return ScoreVector(score_from_topn(topn, rendered, self.config.floor_logprob), "teacher_prob")

    def close(self):
        self._client.close()


def remote_score_candidates(config: RemoteModelConfig, prompt: str, rendered: Sequence[str], client: RemoteClient | None = None) -> ScoreVector:
    topn = remote_topn_logprobs(config, prompt, client)
    return ScoreVector(score_from_topn(topn, rendered, config.floor_logprob), "teacher_prob")
