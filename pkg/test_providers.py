"""
Model service client tests: caching, record/replay, retries, response contracts
and judge parsing. All traffic goes to in-process fakes.
"""

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import requests

from app.database import ProviderCache
from app.services.providers import (GenerationParams, HttpTransport, JudgeParseError, MalformedResponseError,
                                    ProviderCacheKey, Providers, RateLimitError, ReplayMissError,
                                    TokenBucket, TransportError, EndpointKind, extract_json_object,
                                    parse_nli_response)
from conftest import FakeTransport, RefusingTransport, fake_endpoints


def _providers(tmp_path, transport, mode='live', max_retries=5, name='cache.db'):
    return Providers(fake_endpoints(with_metric=True), ProviderCache(str(tmp_path / name)), mode=mode,
                     transport=transport, max_retries=max_retries, sleep=lambda seconds: None)


class FlakyTransport(FakeTransport):
    """Fails the first `failures` posts with the given error."""

    def __init__(self, failures, error=TransportError):
        super().__init__()
        self.failures = failures
        self.error = error
        self.attempts = 0

    def post(self, url, body, headers, timeout):
        self.attempts += 1
        if self.attempts <= self.failures:
            raise self.error(f"simulated failure {self.attempts}")
        return super().post(url, body, headers, timeout)


# ---------------------------------------------------------------------------
# Cache and record/replay
# ---------------------------------------------------------------------------

def test_identical_requests_hit_the_network_once(providers, fake_transport):
    first = providers.chat('Answer the question using only the provided context.\n\nQuestion: q\nAnswer:')
    second = providers.chat('Answer the question using only the provided context.\n\nQuestion: q\nAnswer:')
    assert first == second
    assert len(fake_transport.calls) == 1
    stats = providers.get_statistics()['generator']
    assert stats['cache_hits'] == 1
    assert stats['cache_hit_rate'] == 0.5


class SlowTransport(FakeTransport):
    """Numbers every reply and holds each call long enough for callers to overlap."""

    def __init__(self, delay=0.2):
        super().__init__(chat=lambda prompt: f"reply {len(self.calls)}")
        self.delay = delay

    def post(self, url, body, headers, timeout):
        response = super().post(url, body, headers, timeout)
        time.sleep(self.delay)
        return response


def test_concurrent_identical_requests_hit_the_network_once(tmp_path):
    transport = SlowTransport()
    providers = _providers(tmp_path, transport)
    start = threading.Barrier(4)

    def ask(_):
        start.wait()
        return providers.chat('same prompt')

    with ThreadPoolExecutor(max_workers=4) as pool:
        results = list(pool.map(ask, range(4)))
    assert len(transport.calls) == 1
    assert results == ['reply 1'] * 4
    assert providers.get_statistics()['generator']['cache_hits'] == 3


def test_sampling_seed_is_part_of_the_cache_key(providers, fake_transport):
    providers.chat('hello', GenerationParams(seed=1))
    providers.chat('hello', GenerationParams(seed=2))
    assert len(fake_transport.calls) == 2
    assert fake_transport.calls[0]['body']['seed'] == 1


def test_cache_key_covers_model_and_body():
    body = {'messages': [{'role': 'user', 'content': 'x'}]}
    a = ProviderCacheKey.for_request(EndpointKind.CHAT, 'model-a', body)
    b = ProviderCacheKey.for_request(EndpointKind.CHAT, 'model-b', body)
    c = ProviderCacheKey.for_request(EndpointKind.CHAT, 'model-a', dict(body))
    assert a.key != b.key
    assert a.key == c.key
    assert a.key.startswith('chat:')


def test_replay_mode_never_calls_the_network(tmp_path):
    replay = _providers(tmp_path, RefusingTransport(), mode='replay')
    with pytest.raises(ReplayMissError):
        replay.chat('never recorded')
    with pytest.raises(ReplayMissError):
        replay.embed(['never recorded'])


def test_recorded_archive_replays_byte_identical(tmp_path):
    recorder = _providers(tmp_path, FakeTransport(), mode='record', name='record.db')
    prompt = 'Answer the question using only the provided context.\n\n[Chunk 1]\nSpend was $5 million.\n\nQuestion: q'
    text, elapsed = recorder.chat_timed(prompt)
    vectors = recorder.embed(['alpha beta', 'gamma'])
    verdict = recorder.nli('premise words here', 'premise words')
    archive = tmp_path / 'fixtures.jsonl'
    assert recorder.export_fixtures(str(archive)) >= 4

    cache = ProviderCache(str(tmp_path / 'replay.db'))
    cache.import_archive(str(archive))
    replay = Providers(fake_endpoints(with_metric=True), cache, mode='replay', transport=RefusingTransport())
    assert replay.chat_timed(prompt) == (text, elapsed)
    assert np.array_equal(replay.embed(['gamma', 'alpha beta']), vectors[::-1])
    assert replay.nli('premise words here', 'premise words') == verdict


def test_archive_import_keeps_first_response(tmp_path):
    cache = ProviderCache(str(tmp_path / 'c.db'))
    assert cache.put('k', 'chat', {'a': 1}, {'v': 1})
    assert not cache.put('k', 'chat', {'a': 1}, {'v': 2})
    assert cache.get('k') == {'v': 1}


# ---------------------------------------------------------------------------
# Retries and transport errors
# ---------------------------------------------------------------------------

def test_transient_failures_are_retried(tmp_path):
    transport = FlakyTransport(failures=2)
    providers = _providers(tmp_path, transport)
    assert providers.chat('Answer the question using only the provided context.\nQuestion: q')
    stats = providers.get_statistics()['generator']
    assert stats['retries'] == 2
    assert stats['network_calls'] == 3


def test_rate_limit_surfaces_after_retry_budget(tmp_path):
    transport = FlakyTransport(failures=100, error=RateLimitError)
    providers = _providers(tmp_path, transport, max_retries=3)
    with pytest.raises(RateLimitError):
        providers.chat('hello')
    assert transport.attempts == 3
    assert providers.cache.count() == 0


def test_client_errors_are_not_retried(tmp_path, mocker):
    session = mocker.Mock()
    session.headers = {}
    session.post.return_value = mocker.Mock(status_code=400, text='bad request')
    providers = _providers(tmp_path, HttpTransport(session))
    with pytest.raises(Exception) as info:
        providers.chat('hello')
    assert not isinstance(info.value, (TransportError, RateLimitError))
    assert session.post.call_count == 1


def test_http_transport_maps_status_codes(mocker):
    session = mocker.Mock()
    session.headers = {}
    transport = HttpTransport(session)

    session.post.return_value = mocker.Mock(status_code=429)
    with pytest.raises(RateLimitError):
        transport.post('http://x', {}, {}, 1)

    session.post.return_value = mocker.Mock(status_code=503)
    with pytest.raises(TransportError):
        transport.post('http://x', {}, {}, 1)

    session.post.side_effect = requests.exceptions.Timeout('slow')
    with pytest.raises(TransportError):
        transport.post('http://x', {}, {}, 1)

    session.post.side_effect = None
    ok = mocker.Mock(status_code=200)
    ok.json.return_value = {'ok': True}
    session.post.return_value = ok
    assert transport.post('http://x', {'a': 1}, {}, 1) == {'ok': True}
    assert session.headers['Content-Type'] == 'application/json'


def test_api_key_comes_from_the_named_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv('FAKE_CHAT_KEY', 'secret-token')
    endpoints = fake_endpoints()
    endpoints['generator'].api_key_env = 'FAKE_CHAT_KEY'
    seen = {}

    class HeaderTransport(FakeTransport):
        def post(self, url, body, headers, timeout):
            seen.update(headers)
            return super().post(url, body, headers, timeout)

    providers = Providers(endpoints, ProviderCache(str(tmp_path / 'c.db')), transport=HeaderTransport())
    providers.chat('hello')
    assert seen['Authorization'] == 'Bearer secret-token'


def test_malformed_chat_response_is_not_cached(tmp_path):
    class BrokenTransport:
        def post(self, url, body, headers, timeout):
            return {'choices': []}

    providers = _providers(tmp_path, BrokenTransport())
    with pytest.raises(MalformedResponseError):
        providers.chat('hello')
    assert providers.cache.count() == 0


def test_token_bucket_waits_for_refill():
    now = [0.0]
    waits = []

    def sleep(seconds):
        waits.append(seconds)
        now[0] += seconds

    bucket = TokenBucket(rate=2.0, capacity=1.0, clock=lambda: now[0], sleep=sleep)
    bucket.acquire()
    bucket.acquire()
    assert waits == [pytest.approx(0.5)]


def test_generation_params_validation():
    with pytest.raises(ValueError):
        GenerationParams(temperature=-0.1)
    with pytest.raises(ValueError):
        GenerationParams(max_new_tokens=0)


# ---------------------------------------------------------------------------
# Response contracts
# ---------------------------------------------------------------------------

def test_embeddings_are_l2_normalized(providers):
    vectors = providers.embed(['harbour dredging budget', 'radar maintenance', 'harbour dredging budget'])
    assert np.allclose(np.linalg.norm(vectors, axis=1), 1.0)
    assert np.array_equal(vectors[0], vectors[2])


def test_embedding_dimension_mismatch_is_rejected(tmp_path):
    class RaggedTransport:
        def post(self, url, body, headers, timeout):
            return {'data': [{'embedding': [1.0] * (i + 2)} for i, _ in enumerate(body['input'])]}

    providers = _providers(tmp_path, RaggedTransport())
    with pytest.raises(MalformedResponseError):
        providers.embed(['a', 'b'])


def test_nli_probabilities_are_renormalized():
    verdict = parse_nli_response({'entailment': 0.5, 'neutral': 0.3, 'contradiction': 0.2005})
    assert verdict.entail + verdict.neutral + verdict.contradict == pytest.approx(1.0, abs=1e-12)
    listed = parse_nli_response([{'label': 'ENTAILMENT', 'score': 0.7}, {'label': 'NEUTRAL', 'score': 0.2},
                                 {'label': 'CONTRADICTION', 'score': 0.1}])
    assert listed.entail == pytest.approx(0.7)
    assert listed.relevance == pytest.approx(0.6)


@pytest.mark.parametrize('response', [
    {'entailment': 0.5, 'neutral': 0.2, 'contradiction': 0.1},
    {'entailment': 0.5, 'neutral': 0.5},
    {'entailment': 1.5, 'neutral': -0.5, 'contradiction': 0.0},
    'entailment',
])
def test_nli_contract_violations(response):
    with pytest.raises(MalformedResponseError):
        parse_nli_response(response)


def test_span_must_be_a_substring(tmp_path):
    class WanderingTransport:
        def post(self, url, body, headers, timeout):
            return {'answer': 'not in there', 'score': 0.8}

    providers = _providers(tmp_path, WanderingTransport())
    with pytest.raises(MalformedResponseError):
        providers.extract_span('q', 'The budget was $5 million.')
    span, score = _providers(tmp_path, FakeTransport(), name='ok.db').extract_span('q', 'The budget was $5 million.')
    assert span == 'The budget was $5 million.'
    assert score == 0.9


def test_extract_json_object_tolerates_fences_and_prose():
    assert extract_json_object('```json\n{"score": 0.8}\n```') == {'score': 0.8}
    assert extract_json_object('Sure! {"score": 0.4, "reasoning": "ok"} Hope that helps.')['score'] == 0.4
    with pytest.raises(ValueError):
        extract_json_object('no structure at all')


# ---------------------------------------------------------------------------
# Judge
# ---------------------------------------------------------------------------

def _scripted_judge(tmp_path, replies):
    def chat(prompt):
        if 'could not be parsed' in prompt:
            return replies[1]
        return replies[0]

    return _providers(tmp_path, FakeTransport(chat=chat))


def test_judge_reprompts_once_on_unparseable_reply(tmp_path):
    providers = _scripted_judge(tmp_path, ['I think it is good.', '{"score": 0.8, "reasoning": "fine"}'])
    verdict = providers.judge('Rate this.', ['score'])
    assert verdict.retried
    assert verdict.score == 0.8


def test_judge_gives_up_after_one_reprompt(tmp_path):
    providers = _scripted_judge(tmp_path, ['nope', '{"reasoning": "still no score"}'])
    with pytest.raises(JudgeParseError):
        providers.judge('Rate this.', ['score'])


def test_judge_clamps_out_of_range_scores(tmp_path):
    providers = _scripted_judge(tmp_path, [json.dumps({'score': 1.7}), ''])
    verdict = providers.judge('Rate this.', ['score'])
    assert verdict.score == 1.0
    assert verdict.clamped
    assert not verdict.retried


def test_judge_runs_at_temperature_zero(providers, fake_transport):
    providers.judge('quality score between 0.0 and 1.0\n**Question:** q\n', ['score'])
    assert fake_transport.calls[-1]['body']['temperature'] == 0.0


def test_metric_scores_need_a_score_per_prediction(providers):
    assert providers.score_metric('bleurt', ['a b', 'c'], ['a b', 'd']) == [1.0, 0.0]
