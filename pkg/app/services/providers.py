"""
Model Service Clients

Every external model the pipeline relies on (chat generation, embeddings, NLI
classification, extractive span QA, rubric judging, learned answer metrics) is
reached over HTTP through this module.

Features:
- One requests.Session per endpoint for connection pooling
- Token-bucket admission per endpoint, shared by all worker threads
- Exponential backoff on timeouts and rate limits, bounded by a time ceiling
- Disk cache keyed by content digest, so identical requests hit the network once
- Record/replay: replay mode answers from the fixture archive only
"""

import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from hashlib import sha256
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import requests
from tenacity import (RetryCallState, Retrying, retry_if_exception_type, stop_after_attempt,
                      stop_after_delay, wait_exponential)

from app.database import ProviderCache, canonical_json
from app.services import HarnessError
from config.settings import Config, EndpointConfig

logger = logging.getLogger(__name__)


class ProviderError(HarnessError):
    """Base class for model-service failures."""


class TransportError(ProviderError):
    """Network timeout, refused connection or server-side failure."""


class RateLimitError(ProviderError):
    """The endpoint kept answering 429 until the backoff budget ran out."""


class MalformedResponseError(ProviderError):
    """The endpoint answered, but not in the agreed contract."""


class ReplayMissError(ProviderError):
    """Replay mode asked for a call that is not in the fixture archive."""


class JudgeParseError(ProviderError):
    """The judge did not return the requested structure even after one reprompt."""


class EndpointKind(Enum):
    """Families of model service"""
    CHAT = "chat"
    EMBED = "embed"
    NLI = "nli"
    SPAN = "span"
    METRIC = "metric"


@dataclass
class GenerationParams:
    """Decoding settings for a chat call."""
    temperature: float = 0.3
    max_new_tokens: int = 512
    model_name: Optional[str] = None
    # Passed through as the sampling seed; distinct seeds give distinct cache entries
    seed: Optional[int] = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_new_tokens <= 0:
            raise ValueError(f"max_new_tokens must be > 0, got {self.max_new_tokens}")


JUDGE_PARAMS = GenerationParams(temperature=0.0, max_new_tokens=512)


@dataclass(frozen=True)
class NliVerdict:
    """Three-way entailment probabilities."""
    entail: float
    neutral: float
    contradict: float

    @property
    def relevance(self) -> float:
        return self.entail - self.contradict

    def to_dict(self) -> Dict[str, float]:
        return {'entail': self.entail, 'neutral': self.neutral, 'contradict': self.contradict}


@dataclass(frozen=True)
class ProviderCacheKey:
    """Identifies one request to one service."""
    endpoint_kind: EndpointKind
    request_digest: str

    @property
    def key(self) -> str:
        return f"{self.endpoint_kind.value}:{self.request_digest}"

    @classmethod
    def for_request(cls, kind: EndpointKind, model: str, body: Dict[str, Any]) -> 'ProviderCacheKey':
        payload = canonical_json({'endpoint_kind': kind.value, 'model': model, 'body': body})
        return cls(kind, sha256(payload.encode('utf-8')).hexdigest())


@dataclass
class JudgeVerdict:
    """Parsed judge response."""
    fields: Dict[str, Any]
    score: Optional[float] = None
    clamped: bool = False
    raw: str = ''
    retried: bool = False


class TokenBucket:
    """
    Admission control for one endpoint.

    rate tokens are added per second up to capacity; acquire() blocks until a
    token is available. Thread-safe.
    """

    def __init__(self, rate: float, capacity: Optional[float] = None,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self):
        if self.rate <= 0:
            return
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


class HttpTransport:
    """Posts JSON bodies with a pooled session."""

    def __init__(self, session: Optional[requests.Session] = None):
        self.session = session or requests.Session()
        self.session.headers.update({
            'User-Agent': 'gqa-harness/1.0',
            'Content-Type': 'application/json',
        })

    def post(self, url: str, body: Dict[str, Any], headers: Dict[str, str], timeout: float) -> Any:
        try:
            response = self.session.post(url, json=body, headers=headers, timeout=timeout)
        except requests.exceptions.Timeout as e:
            raise TransportError(f"timeout calling {url}: {e}") from e
        except requests.exceptions.RequestException as e:
            raise TransportError(f"cannot reach {url}: {e}") from e

        if response.status_code == 429:
            raise RateLimitError(f"rate limited by {url}")
        if response.status_code >= 500:
            raise TransportError(f"{url} answered HTTP {response.status_code}")
        if response.status_code >= 400:
            raise ProviderError(f"{url} rejected the request: HTTP {response.status_code} {response.text[:200]}")
        try:
            return response.json()
        except ValueError as e:
            raise MalformedResponseError(f"{url} returned non-JSON body") from e


class EndpointClient:
    """
    One configured model service with cache, rate limit and bounded retries.

    Args:
        kind: Service family; selects the response contract
        endpoint: URL, model and credential env var
        cache: Shared provider cache
        mode: live, record or replay
        transport: Object with post(url, body, headers, timeout)
        backoff_ceiling: Upper bound on seconds spent retrying a single call
        max_retries: Attempts before a retryable error is surfaced
    """

    def __init__(self, kind: EndpointKind, endpoint: EndpointConfig, cache: ProviderCache,
                 mode: str = 'live', transport: Optional[Any] = None,
                 backoff_ceiling: float = Config.BACKOFF_CEILING, max_retries: int = Config.MAX_RETRIES,
                 sleep: Callable[[float], None] = time.sleep):
        self.kind = kind
        self.endpoint = endpoint
        self.cache = cache
        self.mode = mode
        self.transport = transport or HttpTransport()
        self.backoff_ceiling = backoff_ceiling
        self.max_retries = max_retries
        self._sleep = sleep
        self.limiter = TokenBucket(endpoint.rate_limit, sleep=sleep)
        self._stats_lock = threading.Lock()
        self.stats = {
            'requests': 0,
            'network_calls': 0,
            'cache_hits': 0,
            'retries': 0,
            'failures': 0,
            'consecutive_failures': 0,
        }

    def _bump(self, name: str, amount: int = 1):
        with self._stats_lock:
            self.stats[name] += amount

    def _headers(self) -> Dict[str, str]:
        headers = {}
        if self.endpoint.api_key:
            headers['Authorization'] = f"Bearer {self.endpoint.api_key}"
        return headers

    def _wait(self, retry_state: RetryCallState) -> float:
        delay = wait_exponential(multiplier=1, min=1, max=self.backoff_ceiling)(retry_state)
        remaining = self.backoff_ceiling - retry_state.seconds_since_start
        return max(0.0, min(delay, remaining))

    def _log_retry(self, retry_state: RetryCallState):
        self._bump('retries')
        error = retry_state.outcome.exception() if retry_state.outcome else None
        logger.warning(f"Retrying {self.kind.value} call to {self.endpoint.url} "
                       f"(attempt {retry_state.attempt_number}): {error}")

    def _send(self, body: Dict[str, Any]) -> Any:
        retrying = Retrying(
            stop=stop_after_attempt(self.max_retries) | stop_after_delay(self.backoff_ceiling),
            wait=self._wait,
            retry=retry_if_exception_type((TransportError, RateLimitError)),
            before_sleep=self._log_retry,
            sleep=self._sleep,
            reraise=True,
        )
        for attempt in retrying:
            with attempt:
                self.limiter.acquire()
                self._bump('network_calls')
                return self.transport.post(self.endpoint.url, body, self._headers(), self.endpoint.timeout)

    def request(self, body: Dict[str, Any], validate: Callable[[Any], Any] = lambda r: r) -> Any:
        """
        Issue a request through the cache.

        Args:
            body: Full JSON request body (the cache key covers all of it)
            validate: Checks the raw response; raise MalformedResponseError to refuse caching it

        Returns:
            The validated response
        """
        return self.request_timed(body, validate)[0]

    def request_timed(self, body: Dict[str, Any], validate: Callable[[Any], Any] = lambda r: r) -> Tuple[Any, float]:
        """Like request, plus the seconds the live call took (replayed from the cache on hits)."""
        self._bump('requests')
        key = ProviderCacheKey.for_request(self.kind, self.endpoint.model, body).key
        entry = self.cache.get_entry(key)
        if entry is None:
            with self.cache.key_lock(key):
                # Another worker may have filled the key while this one waited
                entry = self.cache.get_entry(key)
                if entry is None:
                    entry = self._fetch(key, body, validate)
                    return validate(entry[0]), entry[1]
        self._bump('cache_hits')
        return validate(entry[0]), entry[1]

    def _fetch(self, key: str, body: Dict[str, Any], validate: Callable[[Any], Any]) -> Tuple[Any, float]:
        """Live call for a missing key; returns the stored (response, elapsed)."""
        if self.mode == 'replay':
            self._bump('failures')
            raise ReplayMissError(f"no recorded {self.kind.value} response for key {key[:24]}...")

        started = time.perf_counter()
        try:
            response = self._send(body)
            validate(response)
        except ProviderError:
            self._bump('failures')
            self._bump('consecutive_failures')
            if self.stats['consecutive_failures'] == 3:
                logger.warning(f"⚡ {self.kind.value} endpoint {self.endpoint.url} failed 3 times in a row")
            raise
        elapsed = round(time.perf_counter() - started, 3)
        with self._stats_lock:
            self.stats['consecutive_failures'] = 0
        self.cache.put(key, self.kind.value, body, response, elapsed=elapsed)
        return self.cache.get_entry(key) or (response, elapsed)

    def get_statistics(self) -> Dict[str, Union[int, float]]:
        stats = dict(self.stats)
        total = stats['requests']
        stats['cache_hit_rate'] = stats['cache_hits'] / total if total else 0.0
        stats['failure_rate'] = stats['failures'] / total if total else 0.0
        return stats


# ---------------------------------------------------------------------------
# Response contracts
# ---------------------------------------------------------------------------

def _chat_content(response: Any) -> str:
    try:
        content = response['choices'][0]['message']['content']
    except (KeyError, IndexError, TypeError) as e:
        raise MalformedResponseError(f"chat response missing choices[0].message.content: {e}") from e
    if not isinstance(content, str):
        raise MalformedResponseError("chat completion content is not a string")
    return content


def _embedding_rows(response: Any) -> List[List[float]]:
    try:
        rows = [item['embedding'] for item in response['data']]
    except (KeyError, TypeError) as e:
        raise MalformedResponseError(f"embed response missing data[].embedding: {e}") from e
    if not rows or any(not isinstance(r, list) or not r for r in rows):
        raise MalformedResponseError("embed response holds an empty vector")
    return rows


_NLI_ALIASES = {
    'entailment': 'entail', 'entail': 'entail',
    'neutral': 'neutral',
    'contradiction': 'contradict', 'contradict': 'contradict',
}


def parse_nli_response(response: Any) -> NliVerdict:
    """Accept {entailment, neutral, contradiction} or a [{label, score}] list."""
    probs: Dict[str, float] = {}
    if isinstance(response, dict) and not ('label' in response and 'score' in response):
        items = response.items()
    elif isinstance(response, list):
        items = [(row.get('label', ''), row.get('score')) for row in response if isinstance(row, dict)]
    else:
        raise MalformedResponseError(f"unrecognized NLI response: {str(response)[:120]}")
    for label, value in items:
        name = _NLI_ALIASES.get(str(label).lower())
        if name:
            probs[name] = value

    if set(probs) != {'entail', 'neutral', 'contradict'}:
        raise MalformedResponseError(f"NLI response lacks one of entailment/neutral/contradiction: {response}")
    values = []
    for name in ('entail', 'neutral', 'contradict'):
        value = probs[name]
        if not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
            raise MalformedResponseError(f"NLI {name} is not a probability: {value}")
        values.append(float(value))
    total = sum(values)
    if abs(total - 1.0) > 1e-3:
        raise MalformedResponseError(f"NLI probabilities sum to {total:.4f}, not 1")
    entail, neutral, contradict = (v / total for v in values)
    return NliVerdict(entail, neutral, contradict)


def extract_json_object(text: str) -> Dict[str, Any]:
    """Pull the first JSON object out of a completion, tolerating code fences and prose."""
    fence = re.search(r"```(?:json)?\s*\n(.*?)\n\s*```", text, re.DOTALL)
    candidate = fence.group(1) if fence else text
    try:
        parsed = json.loads(candidate)
        if isinstance(parsed, dict):
            return parsed
    except json.JSONDecodeError:
        pass
    start = candidate.find('{')
    end = candidate.rfind('}')
    if start != -1 and end > start:
        try:
            parsed = json.loads(candidate[start:end + 1])
            if isinstance(parsed, dict):
                return parsed
        except json.JSONDecodeError:
            pass
    raise ValueError("no JSON object found")


def clamp_unit(value: float) -> Tuple[float, bool]:
    """Clamp to [0, 1]; the flag tells whether clamping happened."""
    clamped = min(1.0, max(0.0, float(value)))
    return clamped, clamped != float(value)


# ---------------------------------------------------------------------------
# Facade
# ---------------------------------------------------------------------------

ROLE_KINDS = {
    'generator': EndpointKind.CHAT,
    'judge': EndpointKind.CHAT,
    'scorer': EndpointKind.CHAT,
    'embedder': EndpointKind.EMBED,
    'nli': EndpointKind.NLI,
    'span': EndpointKind.SPAN,
    'metric': EndpointKind.METRIC,
}


class Providers:
    """
    The model services of one run, by role.

    Clients are shareable across worker threads.
    """

    def __init__(self, endpoints: Dict[str, EndpointConfig], cache: ProviderCache, mode: str = 'live',
                 transport: Optional[Any] = None, backoff_ceiling: float = Config.BACKOFF_CEILING,
                 max_retries: int = Config.MAX_RETRIES, sleep: Callable[[float], None] = time.sleep):
        self.cache = cache
        self.mode = mode
        self.clients: Dict[str, EndpointClient] = {}
        shared_transport = transport or HttpTransport()
        for role, endpoint in endpoints.items():
            if role not in ROLE_KINDS:
                logger.warning(f"Ignoring endpoint for unknown role '{role}'")
                continue
            self.clients[role] = EndpointClient(
                ROLE_KINDS[role], endpoint, cache, mode=mode, transport=shared_transport,
                backoff_ceiling=backoff_ceiling, max_retries=max_retries, sleep=sleep,
            )

    @classmethod
    def from_run_config(cls, config, transport: Optional[Any] = None) -> 'Providers':
        """Open the cache, load the fixture archive in replay mode, and build the clients."""
        cache = ProviderCache(config.cache_path)
        if config.mode == 'replay' and config.fixture_archive:
            cache.import_archive(config.fixture_archive)
        return cls(config.endpoints, cache, mode=config.mode, transport=transport)

    def has_role(self, role: str) -> bool:
        return role in self.clients and bool(self.clients[role].endpoint.url)

    def client(self, role: str) -> EndpointClient:
        if role not in self.clients:
            raise ProviderError(f"no endpoint configured for role '{role}'")
        return self.clients[role]

    def model_names(self) -> Dict[str, str]:
        return {role: c.endpoint.model for role, c in sorted(self.clients.items())}

    # -- chat ---------------------------------------------------------------

    def chat(self, prompt: str, params: Optional[GenerationParams] = None, role: str = 'generator') -> str:
        return self.chat_timed(prompt, params, role)[0]

    def chat_timed(self, prompt: str, params: Optional[GenerationParams] = None,
                   role: str = 'generator') -> Tuple[str, float]:
        """
        Single-turn chat completion.

        Args:
            prompt: User message
            params: Decoding settings; temperature 0.3 and 512 new tokens by default
            role: Which configured chat endpoint to use

        Returns:
            (raw completion text, seconds the live call took)
        """
        params = params or GenerationParams()
        client = self.client(role)
        body = {
            'model': params.model_name or client.endpoint.model,
            'messages': [{'role': 'user', 'content': prompt}],
            'temperature': params.temperature,
            'max_tokens': params.max_new_tokens,
        }
        if params.seed is not None:
            body['seed'] = params.seed
        return client.request_timed(body, _chat_content)

    # -- embeddings -----------------------------------------------------------

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """
        Embed texts; every returned row is L2-normalized.

        Texts are cached one by one, so overlapping batches only pay for new texts.
        """
        if not texts:
            raise ProviderError("embed needs at least one text")
        client = self.client('embedder')
        model = client.endpoint.model

        vectors: List[Optional[List[float]]] = [None] * len(texts)
        missing: Dict[str, List[int]] = {}
        for i, text in enumerate(texts):
            key = ProviderCacheKey.for_request(EndpointKind.EMBED, model, {'model': model, 'input': [text]}).key
            cached = self.cache.get(key)
            if cached is not None:
                client._bump('requests')
                client._bump('cache_hits')
                vectors[i] = _embedding_rows(cached)[0]
            else:
                missing.setdefault(text, []).append(i)

        if missing:
            unique = list(missing)
            if client.mode == 'replay':
                client._bump('failures')
                raise ReplayMissError(f"{len(unique)} texts have no recorded embedding")
            # One request per batch of uncached texts, then split into per-text cache entries
            body = {'model': model, 'input': unique}
            rows = client.request(body, _embedding_rows)
            if len(rows) != len(unique):
                raise MalformedResponseError(f"asked for {len(unique)} embeddings, got {len(rows)}")
            for text, row in zip(unique, rows):
                single = {'model': model, 'input': [text]}
                key = ProviderCacheKey.for_request(EndpointKind.EMBED, model, single).key
                self.cache.put(key, EndpointKind.EMBED.value, single, {'data': [{'embedding': row}]})
                for i in missing[text]:
                    vectors[i] = row

        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise MalformedResponseError(f"embedding dimension mismatch in batch: {sorted(dims)}")
        matrix = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise MalformedResponseError("endpoint returned a zero vector")
        return matrix / norms

    # -- NLI ------------------------------------------------------------------

    def nli(self, premise: str, hypothesis: str) -> NliVerdict:
        client = self.client('nli')
        body = {'model': client.endpoint.model, 'premise': premise, 'hypothesis': hypothesis}
        return client.request(body, parse_nli_response)

    # -- extractive QA --------------------------------------------------------

    def extract_span(self, question: str, context: str) -> Tuple[str, float]:
        """
        Ask the span endpoint for the answer span inside context.

        Returns:
            (span_text, confidence); the span is always a substring of context
        """
        if not context or not context.strip():
            raise ProviderError("extract_span needs a non-empty context")
        client = self.client('span')
        body = {'model': client.endpoint.model, 'question': question, 'context': context}

        def validate(response: Any) -> Tuple[str, float]:
            if not isinstance(response, dict) or 'answer' not in response:
                raise MalformedResponseError("span response lacks 'answer'")
            span = str(response['answer'])
            if span not in context:
                raise MalformedResponseError(f"span '{span[:60]}' is not a substring of the context")
            return span, float(response.get('score', 0.0))

        return client.request(body, validate)

    # -- learned answer metrics -----------------------------------------------

    def score_metric(self, kind: str, predictions: List[str], references: List[str]) -> List[float]:
        client = self.client('metric')
        body = {'model': client.endpoint.model, 'kind': kind,
                'predictions': predictions, 'references': references}

        def validate(response: Any) -> List[float]:
            scores = response.get('scores') if isinstance(response, dict) else None
            if not isinstance(scores, list) or len(scores) != len(predictions):
                raise MalformedResponseError(f"metric response must hold {len(predictions)} scores")
            return [float(s) for s in scores]

        return client.request(body, validate)

    # -- judging --------------------------------------------------------------

    def judge(self, rubric_prompt: str, schema: Sequence[str], role: str = 'judge',
              score_field: Optional[str] = 'score') -> JudgeVerdict:
        """
        Ask a chat endpoint for a structured verdict.

        Judging always runs at temperature 0. A response that cannot be parsed
        earns exactly one reprompt naming the required fields.

        Args:
            rubric_prompt: Prompt asking for a JSON object
            schema: Fields that must be present
            role: judge or scorer
            score_field: Field clamped to [0, 1]; None when the verdict has no single score

        Returns:
            JudgeVerdict with parsed fields
        """
        prompt = rubric_prompt
        retried = False
        for attempt in range(2):
            completion = self.chat(prompt, JUDGE_PARAMS, role=role)
            try:
                fields = extract_json_object(completion)
                missing = [name for name in schema if name not in fields]
                if missing:
                    raise ValueError(f"missing fields {missing}")
                verdict = JudgeVerdict(fields=fields, raw=completion, retried=retried)
                if score_field and score_field in fields:
                    try:
                        verdict.score, verdict.clamped = clamp_unit(fields[score_field])
                    except (TypeError, ValueError) as e:
                        raise ValueError(f"'{score_field}' is not numeric") from e
                    if verdict.clamped:
                        logger.warning(f"Judge score {fields[score_field]} clamped to {verdict.score}")
                    fields[score_field] = verdict.score
                return verdict
            except ValueError as e:
                if attempt == 1:
                    raise JudgeParseError(f"judge response unusable after reprompt: {e}") from e
                logger.warning(f"Judge response unparseable ({e}); reprompting once")
                retried = True
                prompt = (
                    f"{rubric_prompt}\n\nYour previous reply could not be parsed. Respond with only a JSON "
                    f"object containing the fields: {', '.join(schema)}."
                )
        raise JudgeParseError("unreachable")

    # -- bookkeeping ----------------------------------------------------------

    def get_statistics(self) -> Dict[str, Dict[str, Union[int, float]]]:
        return {role: client.get_statistics() for role, client in sorted(self.clients.items())}

    def export_fixtures(self, archive_path: str) -> int:
        return self.cache.export_archive(archive_path)
