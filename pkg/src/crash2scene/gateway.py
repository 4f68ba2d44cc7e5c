"""Access to multimodal model providers.

Every query that leaves the pipeline goes through :class:`Gateway`, which
fingerprints the canonicalized query, serves repeats from a disk cache and
retries transient transport failures. Tests and offline runs swap the HTTP
provider for a :class:`ScriptedOracle` that replays recorded answers.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import GatewayConfigError, TransportError

ENV_PROVIDER = "CRASH2SCENE_PROVIDER"
ENV_API_KEY = "CRASH2SCENE_API_KEY"
ENV_ENDPOINT = "CRASH2SCENE_ENDPOINT"

RETRY_BACKOFF_S = (1.0, 4.0)


@dataclass(frozen=True)
class ModelQuery:
    """One prompt plus attached images and structured context.

    ``context`` carries machine-readable anchors describing what the image
    shows (tree kind, node level, geometry hints). It is part of the
    fingerprint because it changes the expected answer.
    """

    prompt: str
    images: tuple[np.ndarray, ...] = ()
    context: Mapping[str, object] = field(default_factory=dict)
    schema: str = "free_text"
    temperature: float = 0.0


@dataclass
class ModelResponse:
    text: str
    fingerprint: str
    provider: str
    cached: bool = False
    attempts: int = 1


def _image_digest(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(image)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(str(arr.dtype).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def _canonical(obj):
    if isinstance(obj, Mapping):
        return {str(k): _canonical(obj[k]) for k in sorted(obj, key=str)}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def query_fingerprint(query: ModelQuery) -> str:
    """SHA-256 over the canonical JSON form of the query."""
    payload = {
        "prompt": query.prompt,
        "images": [_image_digest(im) for im in query.images],
        "context": _canonical(query.context),
        "schema": query.schema,
        "temperature": round(float(query.temperature), 6),
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


_LANE_PAIR_RE = re.compile(r"\[\s*(\d+)\s*\|\s*(\d+)\s*\]")
_LANE_COUNT_RE = re.compile(r"(lanes\s*[:=]\s*)(\d+)", re.IGNORECASE)


def perturb_lane_counts(text: str, rng: np.random.Generator, prob: float) -> str:
    """Flip each lane-count integer in ``text`` by +-1 with probability ``prob``."""

    def bump(value: int) -> int:
        if rng.random() >= prob:
            return value
        step = 1 if rng.random() < 0.5 else -1
        return max(0, value + step)

    def pair_sub(m: re.Match) -> str:
        left = bump(int(m.group(1)))
        right = bump(int(m.group(2)))
        return f"[{left} | {right}]"

    def count_sub(m: re.Match) -> str:
        return m.group(1) + str(bump(int(m.group(2))))

    text = _LANE_PAIR_RE.sub(pair_sub, text)
    text = _LANE_COUNT_RE.sub(count_sub, text)
    return text


@dataclass
class OracleNoise:
    """Perturbation applied to scripted answers.

    ``lane_flip_prob`` flips lane-count integers by one. Only answers to
    queries whose context level is in ``levels`` are touched; a one-node query
    has no children, so it counts as a leaf.
    """

    lane_flip_prob: float = 0.0
    levels: tuple[str, ...] = ("leaf", "single")
    seed: int = 0


class ScriptedOracle:
    """Answer book keyed by (fixture id, query fingerprint).

    A resolver callable may back the book: unseen fingerprints are answered by
    the resolver and recorded, and the book can then be frozen to disk so
    later runs replay bit-identical answers with no resolver present.
    """

    name = "oracle"

    def __init__(
        self,
        book: dict[str, str] | None = None,
        resolver: Callable[[ModelQuery], str] | None = None,
        noise: OracleNoise | None = None,
        default_fixture: str = "",
    ):
        self.book = dict(book or {})
        self.resolver = resolver
        self.noise = noise
        self.default_fixture = default_fixture

    @staticmethod
    def _key(fixture_id: str, fingerprint: str) -> str:
        return f"{fixture_id}:{fingerprint}"

    def _fixture_of(self, query: ModelQuery) -> str:
        return str(query.context.get("fixture_id", self.default_fixture))

    def complete(self, query: ModelQuery, fingerprint: str) -> str:
        key = self._key(self._fixture_of(query), fingerprint)
        if key in self.book:
            text = self.book[key]
        elif self.resolver is not None:
            text = self.resolver(query)
            self.book[key] = text
        else:
            raise TransportError(f"scripted oracle has no answer for {key}")
        return self._apply_noise(text, query, fingerprint)

    def _apply_noise(self, text: str, query: ModelQuery, fingerprint: str) -> str:
        noise = self.noise
        if noise is None or noise.lane_flip_prob <= 0.0:
            return text
        level = str(query.context.get("level", "single"))
        if level not in noise.levels:
            return text
        # Seed from the fingerprint so the draw is independent of query order.
        salt = int(fingerprint[:16], 16)
        rng = np.random.default_rng([noise.seed, salt])
        return perturb_lane_counts(text, rng, noise.lane_flip_prob)

    def export_book(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = json.dumps(self.book, sort_keys=True, indent=1)
        path.write_text(blob)

    @classmethod
    def from_file(cls, path: str | Path, noise: OracleNoise | None = None) -> "ScriptedOracle":
        book = json.loads(Path(path).read_text())
        return cls(book=book, noise=noise)


class HttpProvider:
    """JSON-over-HTTPS adapter for chat-style multimodal endpoints."""

    def __init__(self, name: str, endpoint: str, api_key: str, model: str = "", timeout: float = 60.0):
        if not endpoint:
            raise GatewayConfigError(f"provider {name!r} needs an endpoint ({ENV_ENDPOINT})")
        if not api_key:
            raise GatewayConfigError(f"provider {name!r} needs an API key ({ENV_API_KEY})")
        self.name = name
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model or name
        self.timeout = timeout
        import requests  # deferred so offline runs never import it

        self._session = requests.Session()

    def _encode_image(self, image: np.ndarray) -> str:
        import base64
        import io

        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(image).save(buf, format="PNG")
        return base64.b64encode(buf.getvalue()).decode()

    def _payload(self, query: ModelQuery) -> tuple[dict, dict]:
        content: list[dict] = [{"type": "text", "text": query.prompt}]
        for image in query.images:
            b64 = self._encode_image(image)
            if self.name == "anthropic":
                content.append({
                    "type": "image",
                    "source": {"type": "base64", "media_type": "image/png", "data": b64},
                })
            else:
                content.append({
                    "type": "image_url",
                    "image_url": {"url": f"data:image/png;base64,{b64}"},
                })
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": query.temperature,
        }
        if self.name == "anthropic":
            body["max_tokens"] = 2048
            headers = {"x-api-key": self.api_key, "anthropic-version": "2023-06-01"}
        else:
            headers = {"Authorization": f"Bearer {self.api_key}"}
        headers["Content-Type"] = "application/json"
        return body, headers

    def complete(self, query: ModelQuery, fingerprint: str) -> str:
        body, headers = self._payload(query)
        resp = self._session.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
        resp.raise_for_status()
        data = resp.json()
        if self.name == "anthropic":
            return "".join(part.get("text", "") for part in data.get("content", []))
        return data["choices"][0]["message"]["content"]


class Gateway:
    """Fingerprint-cached front to one provider."""

    def __init__(
        self,
        provider,
        cache_dir: str | Path | None = None,
        retries: int = 3,
        backoff: Sequence[float] = RETRY_BACKOFF_S,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.provider = provider
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.retries = retries
        self.backoff = tuple(backoff)
        self.sleep = sleep

    @classmethod
    def from_env(
        cls,
        provider: str | None = None,
        endpoint: str | None = None,
        api_key: str | None = None,
        cache_dir: str | Path | None = None,
        oracle: ScriptedOracle | None = None,
    ) -> "Gateway":
        name = provider or os.environ.get(ENV_PROVIDER, "oracle")
        if name == "oracle":
            return cls(oracle or ScriptedOracle(), cache_dir=cache_dir)
        endpoint = endpoint or os.environ.get(ENV_ENDPOINT, "")
        api_key = api_key or os.environ.get(ENV_API_KEY, "")
        return cls(HttpProvider(name, endpoint, api_key), cache_dir=cache_dir)

    def _cache_path(self, fingerprint: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{fingerprint}.json"

    def _read_cache(self, fingerprint: str) -> str | None:
        path = self._cache_path(fingerprint)
        if path is None or not path.exists():
            return None
        try:
            record = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError):
            return None
        return record.get("text")

    def _write_cache(self, fingerprint: str, query: ModelQuery, text: str) -> None:
        path = self._cache_path(fingerprint)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {
            "fingerprint": fingerprint,
            "provider": getattr(self.provider, "name", "unknown"),
            "prompt": query.prompt,
            "schema": query.schema,
            "text": text,
        }
        blob = json.dumps(record, sort_keys=True, indent=1)
        # Write-then-rename keeps partially written entries invisible.
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def ask(self, query: ModelQuery, bypass_cache: bool = False) -> ModelResponse:
        fingerprint = query_fingerprint(query)
        provider_name = getattr(self.provider, "name", "unknown")
        if not bypass_cache:
            cached = self._read_cache(fingerprint)
            if cached is not None:
                return ModelResponse(cached, fingerprint, provider_name, cached=True)
        last: Exception | None = None
        for attempt in range(self.retries):
            try:
                text = self.provider.complete(query, fingerprint)
            except TransportError:
                raise
            except Exception as exc:  # network or HTTP failure
                last = exc
                if attempt < self.retries - 1:
                    pause = self.backoff[min(attempt, len(self.backoff) - 1)]
                    self.sleep(pause)
                continue
            self._write_cache(fingerprint, query, text)
            return ModelResponse(text, fingerprint, provider_name, attempts=attempt + 1)
        raise TransportError(f"provider {provider_name!r} failed after {self.retries} attempts: {last}")
