"""Backend for an OpenAI-compatible chat-completions endpoint.

Transports are synchronous and swappable: :class:`HttpTransport` talks to the
network, :class:`RecordingTransport` tees exchanges into a JSON-lines cassette
and :class:`ReplayTransport` serves a cassette back without any network.
"""

from __future__ import annotations

import asyncio
import json
import os
import socket
import threading
import time
import urllib.error
import urllib.request
from collections import defaultdict, deque
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

from branchmerge import _json
from branchmerge.agents.base import BackendReply, Role, TurnRequest, parse_engineer_text
from branchmerge.agents.context import PromptBook
from branchmerge.errors import BackendFailure, ConfigError


@dataclass(frozen=True)
class RemoteConfig:
    base_url: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    price_per_1k_input: float = 0.0
    price_per_1k_output: float = 0.0
    temperature: float = 0.0
    seed: int | None = None
    max_retries: int = 2
    backoff: float = 1.0

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"


class Transport(Protocol):
    def post(self, url: str, headers: Mapping[str, str], body: dict) -> dict: ...


class JsonLines:
    """Append-only JSON-lines sink shared across threads."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def write(self, record: Mapping[str, Any]) -> None:
        line = _json.dumps_line(dict(record)) + "\n"
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line)


class HttpTransport:
    def __init__(self, timeout: float = 60.0) -> None:
        self.timeout = timeout

    def post(self, url: str, headers: Mapping[str, str], body: dict) -> dict:
        data = json.dumps(body).encode("utf-8")
        req = urllib.request.Request(url, data=data, headers=dict(headers), method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read()
        except urllib.error.HTTPError as exc:
            retriable = exc.code == 429 or exc.code >= 500
            raise BackendFailure(f"HTTP {exc.code} from {url}", retriable=retriable) from exc
        except (socket.timeout, TimeoutError) as exc:
            raise BackendFailure(f"timed out talking to {url}", retriable=True) from exc
        except (urllib.error.URLError, ConnectionError, OSError) as exc:
            raise BackendFailure(f"endpoint unreachable: {url}: {exc}", retriable=False) from exc
        try:
            doc = json.loads(raw)
        except ValueError as exc:
            raise BackendFailure(f"non-JSON response from {url}", retriable=False) from exc
        if not isinstance(doc, dict):
            raise BackendFailure(f"unexpected response shape from {url}", retriable=False)
        return doc


class RecordingTransport:
    """Forwards to ``inner`` and appends every exchange (headers excluded) to a cassette."""

    def __init__(self, inner: Transport, cassette: str | Path) -> None:
        self.inner = inner
        self.sink = JsonLines(cassette)

    def post(self, url: str, headers: Mapping[str, str], body: dict) -> dict:
        resp = self.inner.post(url, headers, body)
        self.sink.write({"request": body, "response": resp})
        return resp


class ReplayTransport:
    """Serves recorded responses in order, per agent (the request ``user`` field).

    A request that differs from the recording is a terminal failure, so a replay
    either reproduces the recorded run exactly or stops.
    """

    def __init__(self, cassette: str | Path) -> None:
        self._queues: dict[str, deque[dict]] = defaultdict(deque)
        self._lock = threading.Lock()
        try:
            lines = Path(cassette).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise BackendFailure(f"cannot read cassette {cassette}: {exc}") from exc
        for line in lines:
            if line.strip():
                rec = json.loads(line)
                self._queues[rec["request"].get("user", "")].append(rec)

    def post(self, url: str, headers: Mapping[str, str], body: dict) -> dict:
        with self._lock:
            queue = self._queues.get(body.get("user", ""))
            if not queue:
                raise BackendFailure(f"cassette has no more exchanges for {body.get('user')!r}")
            rec = queue.popleft()
        if rec["request"] != json.loads(json.dumps(body)):
            raise BackendFailure(f"request for {body.get('user')!r} does not match the recording")
        return rec["response"]

    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values())


def turn_cost(usage: Mapping[str, Any], config: RemoteConfig) -> float:
    """Use the provider's reported cost when present, else price the tokens."""
    if isinstance(usage.get("cost"), (int, float)):
        return float(usage["cost"])
    pin = usage.get("prompt_tokens", 0) or 0
    pout = usage.get("completion_tokens", 0) or 0
    return pin / 1000 * config.price_per_1k_input + pout / 1000 * config.price_per_1k_output


def _values(request: TurnRequest) -> dict[str, str]:
    state = request.state
    values = {k: v if isinstance(v, str) else _json.dumps_line(v) for k, v in state.items() if v is not None}
    values["state_json"] = _json.dumps_line({k: v for k, v in sorted(state.items()) if k != "file_content"})
    values.setdefault("engineer_id", request.agent_id)
    values.setdefault("feedback", "none")
    return values


class RemoteBackend:
    def __init__(
        self,
        config: RemoteConfig,
        *,
        transport: Transport | None = None,
        prompts: PromptBook | None = None,
        audit: JsonLines | None = None,
    ) -> None:
        self.config = config
        self.prompts = prompts or PromptBook.bundled()
        self.audit = audit
        self._headers = {"Content-Type": "application/json"}
        if transport is None:
            key = os.environ.get(config.api_key_env)
            if not key:
                raise ConfigError("remote_api_key_env", f"environment variable {config.api_key_env} is not set")
            self._headers["Authorization"] = f"Bearer {key}"
            transport = HttpTransport(config.timeout)
        self.transport = transport

    def build_body(self, request: TurnRequest) -> dict:
        messages = self.prompts.messages(request.role.value, request.kind, _values(request))
        # anything past the structured context message is re-prompt feedback
        messages.extend(m for m in request.messages[1:] if m.get("role") in ("user", "assistant"))
        body: dict[str, Any] = {
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
            "user": request.agent_id,
        }
        if self.config.seed is not None:
            body["seed"] = self.config.seed
        return body

    def _post(self, body: dict) -> dict:
        attempt = 0
        while True:
            try:
                return self.transport.post(self.config.url, self._headers, body)
            except BackendFailure as exc:
                if not exc.retriable or attempt >= self.config.max_retries:
                    raise
                attempt += 1
                time.sleep(self.config.backoff * 2 ** (attempt - 1))

    async def respond(self, request: TurnRequest) -> BackendReply:
        body = self.build_body(request)
        try:
            resp = await asyncio.to_thread(self._post, body)
        except BackendFailure as exc:
            if self.audit is not None:
                self.audit.write({"agent_id": request.agent_id, "kind": request.kind, "request": body,
                                  "error": str(exc), "retriable": exc.retriable})
            raise
        if self.audit is not None:
            self.audit.write({"agent_id": request.agent_id, "kind": request.kind, "request": body, "response": resp})
        try:
            content = resp["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendFailure("response carries no message content", retriable=False) from exc
        cost = turn_cost(resp.get("usage") or {}, self.config)
        if request.role is Role.MANAGER:
            return BackendReply(text=content, cost=cost)
        return BackendReply(actions=tuple(parse_engineer_text(content)), cost=cost)


def remote_backend(
    config: RemoteConfig,
    prompts: PromptBook | None = None,
    *,
    record_to: str | Path | None = None,
    replay_from: str | Path | None = None,
    audit: JsonLines | None = None,
) -> RemoteBackend:
    """Build a backend; ``replay_from`` needs no network and no credentials."""
    if replay_from is not None:
        return RemoteBackend(config, transport=ReplayTransport(replay_from), prompts=prompts, audit=audit)
    backend = RemoteBackend(config, prompts=prompts, audit=audit)
    if record_to is not None:
        backend.transport = RecordingTransport(backend.transport, record_to)
    return backend
