"""Chat-completion client: retries, rate limiting, transcripts, replay, memorization probes."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from rapidfuzz.distance import Levenshtein

from .schema import Dataset

CSV_TEMPERATURE = 1.0
AGENT_TEMPERATURE = 0.0


class LLMError(RuntimeError):
    pass


class AuthError(LLMError):
    pass


class TransientLLMError(LLMError):
    pass


class MalformedResponseError(LLMError):
    pass


class RetryCapExceeded(LLMError):
    def __init__(self, attempts: int, last: Exception | None):
        super().__init__(f"gave up after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last


@dataclass(frozen=True)
class ChatRequest:
    system: str
    user: tuple[str, ...]
    model: str = ""
    max_tokens: int = 4096
    temperature: float = AGENT_TEMPERATURE

    def __post_init__(self):
        if isinstance(self.user, str):
            object.__setattr__(self, "user", (self.user,))
        else:
            object.__setattr__(self, "user", tuple(self.user))
        if not self.user:
            raise ValueError("a chat request needs at least one user turn")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["user"] = list(self.user)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChatRequest":
        return cls(d["system"], tuple(d["user"]), d.get("model", ""), d.get("max_tokens", 4096),
                   d.get("temperature", AGENT_TEMPERATURE))

    def key(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_user(self, extra: str) -> "ChatRequest":
        return ChatRequest(self.system, self.user + (extra,), self.model, self.max_tokens, self.temperature)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    input_tokens: int = 0
    output_tokens: int = 0
    attempts: int = 1


class Transcript:
    """Append-only log of every request attempt; optionally mirrored to a JSONL file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: list[dict] = []
        self._lock = threading.Lock()

    def append(self, request: ChatRequest, response: str | None, input_tokens=0, output_tokens=0,
               error: str | None = None, attempt: int = 1) -> dict:
        entry = {"request": request.to_dict(), "key": request.key(), "response": response,
                 "input_tokens": int(input_tokens), "output_tokens": int(output_tokens),
                 "error": error, "attempt": attempt, "timestamp": time.time()}
        with self._lock:
            self._entries.append(entry)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
        return entry

    @property
    def entries(self) -> tuple[dict, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self.entries)

    def token_totals(self) -> tuple[int, int]:
        return (sum(e["input_tokens"] for e in self._entries), sum(e["output_tokens"] for e in self._entries))

    @classmethod
    def load(cls, path: str | Path) -> "Transcript":
        t = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                t._entries.append(json.loads(line))
        return t


# Transports: callables ChatRequest -> (text, input_tokens, output_tokens) -----

class MockTransport:
    """Scripted replies. Items may be strings, exceptions (raised), or callables of the request."""

    def __init__(self, replies: Sequence | Callable | str, repeat_last: bool = False):
        self.replies = replies
        self.repeat_last = repeat_last
        self.calls: list[ChatRequest] = []
        self._i = 0
        self._lock = threading.Lock()

    def __call__(self, request: ChatRequest):
        with self._lock:
            self.calls.append(request)
            if callable(self.replies):
                item = self.replies
            elif isinstance(self.replies, str):
                item = self.replies
            else:
                if self._i >= len(self.replies):
                    if not (self.repeat_last and self.replies):
                        raise LLMError("mock transport ran out of scripted replies")
                    item = self.replies[-1]
                else:
                    item = self.replies[self._i]
                self._i += 1
        if isinstance(item, BaseException):
            raise item
        text = item(request) if callable(item) else item
        return text, sum(len(u) for u in request.user) // 4, len(text) // 4


class ReplayTransport:
    """Serves recorded responses for identical requests, in recorded order; never touches the network."""

    def __init__(self, transcript: Transcript | str | Path):
        if not isinstance(transcript, Transcript):
            transcript = Transcript.load(transcript)
        self._queues: dict[str, list[dict]] = {}
        for e in transcript:
            if e.get("error") is None and e.get("response") is not None:
                self._queues.setdefault(e["key"], []).append(e)
        self._lock = threading.Lock()

    def __call__(self, request: ChatRequest):
        with self._lock:
            q = self._queues.get(request.key())
            if not q:
                raise LLMError("no recorded response for this request")
            e = q.pop(0)
        return e["response"], e["input_tokens"], e["output_tokens"]


@dataclass(frozen=True)
class EndpointProfile:
    name: str
    provider: str  # "openai" (chat-completions wire format) or "anthropic"
    base_url: str
    model: str
    api_key_env: str


PROFILES = {
    "gpt-4o": EndpointProfile("gpt-4o", "openai", "https://api.openai.com/v1", "gpt-4o-2024-08-06",
                              "OPENAI_API_KEY"),
    "claude-3.5-sonnet": EndpointProfile("claude-3.5-sonnet", "anthropic", "https://api.anthropic.com/v1",
                                         "claude-3-5-sonnet-20241022", "ANTHROPIC_API_KEY"),
    "llama-3.3-70b": EndpointProfile("llama-3.3-70b", "openai", "https://api.together.xyz/v1",
                                     "meta-llama/Llama-3.3-70B-Instruct-Turbo", "TOGETHER_API_KEY"),
}


class HttpTransport:
    """Provider wire formats over httpx. The credential is read from the profile's env variable."""

    def __init__(self, profile: EndpointProfile, timeout: float = 120.0, client=None):
        import httpx

        self.profile = profile
        self.timeout = timeout
        self._httpx = httpx
        self._client = client or httpx.Client(timeout=timeout)

    def _payload(self, request: ChatRequest):
        p = self.profile
        key = os.environ.get(p.api_key_env)
        if not key:
            raise AuthError(f"environment variable {p.api_key_env} is not set")
        model = request.model or p.model
        if p.provider == "anthropic":
            url = f"{p.base_url}/messages"
            headers = {"x-api-key": key, "anthropic-version": "2023-06-01"}
            body = {"model": model, "system": request.system, "max_tokens": request.max_tokens,
                    "temperature": request.temperature,
                    "messages": [{"role": "user", "content": u} for u in request.user]}
        else:
            url = f"{p.base_url}/chat/completions"
            headers = {"Authorization": f"Bearer {key}"}
            msgs = ([{"role": "system", "content": request.system}] if request.system else [])
            msgs += [{"role": "user", "content": u} for u in request.user]
            body = {"model": model, "messages": msgs, "max_tokens": request.max_tokens,
                    "temperature": request.temperature}
        return url, headers, body

    def __call__(self, request: ChatRequest):
        url, headers, body = self._payload(request)
        try:
            r = self._client.post(url, headers=headers, json=body, timeout=self.timeout)
        except (self._httpx.TimeoutException, self._httpx.TransportError) as err:
            raise TransientLLMError(str(err)) from err
        if r.status_code in (401, 403):
            raise AuthError(f"{r.status_code}: {r.text[:200]}")
        if r.status_code == 429 or r.status_code >= 500:
            raise TransientLLMError(f"{r.status_code}: {r.text[:200]}")
        if r.status_code >= 400:
            raise LLMError(f"{r.status_code}: {r.text[:200]}")
        try:
            data = r.json()
            if self.profile.provider == "anthropic":
                text = "".join(b["text"] for b in data["content"] if b.get("type") == "text")
                usage = data.get("usage", {})
                return text, usage.get("input_tokens", 0), usage.get("output_tokens", 0)
            text = data["choices"][0]["message"]["content"]
            usage = data.get("usage", {})
            return text, usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)
        except (ValueError, KeyError, IndexError, TypeError) as err:
            raise MalformedResponseError(f"unexpected response body: {err}") from err


class TokenBucket:
    """Thread-safe token bucket; ``acquire`` blocks until a token is available."""

    def __init__(self, rate: float, capacity: float = 1.0, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0 or capacity < 1:
            raise ValueError("rate must be > 0 and capacity >= 1")
        self.rate, self.capacity = rate, capacity
        self._tokens = capacity
        self._clock, self._sleep = clock, sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


@dataclass
class LLMClient:
    """Retries transient failures with jittered exponential backoff, logging every attempt."""

    transport: Callable
    transcript: Transcript = field(default_factory=Transcript)
    max_attempts: int = 3
    backoff_base: float = 0.5
    backoff_max: float = 30.0
    rate_limiter: TokenBucket | None = None
    model: str = ""
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self.model and not request.model:
            request = ChatRequest(request.system, request.user, self.model, request.max_tokens, request.temperature)
        last = None
        for attempt in range(1, self.max_attempts + 1):
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            try:
                out = self.transport(request)
                if not isinstance(out, tuple) or len(out) != 3 or not isinstance(out[0], str):
                    raise MalformedResponseError("transport returned a malformed response")
            except (TransientLLMError, MalformedResponseError) as err:
                last = err
                self.transcript.append(request, None, error=f"{type(err).__name__}: {err}", attempt=attempt)
                if attempt < self.max_attempts:
                    delay = min(self.backoff_max, self.backoff_base * 2 ** (attempt - 1))
                    self.sleep(delay * (0.5 + random.random() / 2))
                continue
            except LLMError as err:
                self.transcript.append(request, None, error=f"{type(err).__name__}: {err}", attempt=attempt)
                raise
            text, tin, tout = out
            self.transcript.append(request, text, tin, tout, attempt=attempt)
            return ChatResponse(text, int(tin), int(tout), attempt)
        raise RetryCapExceeded(self.max_attempts, last)


def client_for_profile(name: str, transcript: Transcript | None = None, **kw) -> LLMClient:
    if name not in PROFILES:
        raise ValueError(f"unknown endpoint profile {name!r}; choose from {sorted(PROFILES)}")
    return LLMClient(HttpTransport(PROFILES[name]), transcript or Transcript(), **kw)


# Memorization probes --------------------------------------------------------

CELL_LABELS = ("correct", "incorrect", "missing")


@dataclass
class MemorizationReport:
    cells: list[list[str]]  # per reference row, one label per reference cell
    exact_match_rate: float
    char_similarity: float
    parse_failed: bool = False
    n_rows: int = 0

    def cell_rates(self) -> dict[str, float]:
        flat = [c for row in self.cells for c in row]
        if not flat:
            return {k: 0.0 for k in CELL_LABELS}
        return {k: flat.count(k) / len(flat) for k in CELL_LABELS}

    def failed_to_reproduce(self) -> bool:
        return self.exact_match_rate < 1.0

    def to_dict(self) -> dict:
        return {"cell_rates": self.cell_rates(), "exact_match_rate": self.exact_match_rate,
                "char_similarity": self.char_similarity, "parse_failed": self.parse_failed,
                "n_rows": self.n_rows, "cells": self.cells}


def _parse_completion(text: str, width: int) -> tuple[list[list[str]], bool]:
    """CSV rows of a completion up to the first unparseable line."""
    rows, failed = [], False
    for line in text.strip().splitlines():
        s = line.strip()
        if not s or s.startswith("```"):
            continue
        try:
            cells = next(csv.reader([s], strict=True))
        except (csv.Error, StopIteration):
            failed = True
            break
        if abs(len(cells) - width) > max(1, width // 2):
            failed = True
            break
        rows.append([c.strip() for c in cells])
    return rows, failed


def score_row(predicted: Sequence[str] | None, reference: Sequence[str]) -> list[str]:
    """Label each reference cell correct / incorrect / missing.

    Equal-width rows are compared position by position; otherwise cells are
    aligned by minimum edit distance over cell sequences.
    """
    if predicted is None:
        return ["missing"] * len(reference)
    if len(predicted) == len(reference):
        return ["correct" if p == r else "incorrect" for p, r in zip(predicted, reference)]
    labels = ["correct"] * len(reference)
    for op in Levenshtein.editops(list(reference), list(predicted)):
        if op.tag == "replace":
            labels[op.src_pos] = "incorrect"
        elif op.tag == "delete":
            labels[op.src_pos] = "missing"
    return labels


def _score(pred_rows: list[list[str]], ref_rows: list[list[str]], parse_failed: bool) -> MemorizationReport:
    cells, exact, sims = [], 0, []
    for i, ref in enumerate(ref_rows):
        pred = pred_rows[i] if i < len(pred_rows) else None
        cells.append(score_row(pred, ref))
        exact += int(pred is not None and list(pred) == list(ref))
        sims.append(0.0 if pred is None else Levenshtein.normalized_similarity(",".join(pred), ",".join(ref)))
    n = len(ref_rows)
    return MemorizationReport(cells, exact / n if n else 0.0, float(np.mean(sims)) if sims else 0.0,
                              parse_failed, n)


def _csv_line(cells: Iterable[str]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="").writerow(list(cells))
    return buf.getvalue()


_PROBE_SYSTEM = ("You are a helpful autocomplete bot for tabular datasets. You will be prompted with "
                 "portions of a CSV file; continue it with the rows that follow, verbatim, in CSV format.")


def _probe(llm: LLMClient, header: list[str], prompt_rows, ref_rows, temperature: float):
    body = "\n".join([_csv_line(header)] + [_csv_line(r) for r in prompt_rows]) + "\n"
    req = ChatRequest(_PROBE_SYSTEM, (body,), max_tokens=4096, temperature=temperature)
    text = llm.complete(req).text
    preds, failed = _parse_completion(text, len(header))
    if preds and preds[0] == list(header):
        preds = preds[1:]
    return preds, failed


def header_test(llm: LLMClient, dataset: Dataset, n_prompt_rows: int = 5, n_completion_rows: int = 10,
                temperature: float = 0.0) -> MemorizationReport:
    """Prompt with the header and first rows; score the model's continuation."""
    if n_prompt_rows < 0 or n_completion_rows < 1:
        raise ValueError("need n_prompt_rows >= 0 and n_completion_rows >= 1")
    if len(dataset) < n_prompt_rows + n_completion_rows:
        raise ValueError("dataset too short for the requested prompt and completion rows")
    rows = [list(r) for r in dataset.records()]
    ref = rows[n_prompt_rows:n_prompt_rows + n_completion_rows]
    preds, failed = _probe(llm, dataset.schema.names, rows[:n_prompt_rows], ref, temperature)
    return _score(preds, ref, failed)


def row_completion_test(llm: LLMClient, dataset: Dataset, n_trials: int = 10, seed=0,
                        n_prompt_rows: int = 5, temperature: float = 0.0) -> MemorizationReport:
    """Prompt with random contiguous blocks; score the predicted next row of each."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if len(dataset) < 25:
        raise ValueError("row completion needs at least 25 rows")
    rng = np.random.default_rng(seed)
    rows = [list(r) for r in dataset.records()]
    all_preds, all_refs, failed = [], [], False
    for _ in range(n_trials):
        start = int(rng.integers(0, len(rows) - n_prompt_rows))
        ref = [rows[start + n_prompt_rows]]
        preds, f = _probe(llm, dataset.schema.names, rows[start:start + n_prompt_rows], ref, temperature)
        failed |= f
        all_preds.append(preds[0] if preds else None)
        all_refs.append(ref[0])
    cells = [score_row(p, r) for p, r in zip(all_preds, all_refs)]
    exact = sum(p is not None and p == r for p, r in zip(all_preds, all_refs)) / n_trials
    sims = [0.0 if p is None else Levenshtein.normalized_similarity(",".join(p), ",".join(r))
            for p, r in zip(all_preds, all_refs)]
    return MemorizationReport(cells, exact, float(np.mean(sims)), failed, n_trials)


def expected_collision_rate(cardinalities: Sequence[int]) -> float:
    """Chance that a uniformly random record equals a fixed record."""
    return float(np.prod([1.0 / k for k in cardinalities]))
