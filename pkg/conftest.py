"""
Shared fixtures: a deterministic in-process stand-in for every model service,
a generated public-style corpus, and helpers for building run configs.
"""

import hashlib
import json
import re
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pytest
import yaml

from app.database import ProviderCache
from app.services.corpus import (ChunkPolicy, ChunkStore, TokenizerSpec, chunk_corpus, collect_corpus_files,
                                 ingest_path, split_sentences)
from app.services.evalhub import token_f1
from app.services.index import lexical_terms
from app.services.prompts import PromptLibrary
from app.services.providers import Providers
from config.settings import EndpointConfig

FIXTURES = Path(__file__).resolve().parent / 'fixtures'
EMBED_DIM = 64


def fake_embedding(text: str) -> List[float]:
    """Hashed bag of words; texts sharing words point the same way."""
    vector = [0.0] * EMBED_DIM
    for term in lexical_terms(text) or ['empty']:
        slot = int(hashlib.sha1(term.encode('utf-8')).hexdigest(), 16) % EMBED_DIM
        vector[slot] += 1.0
    return vector


def overlap(hypothesis: str, premise: str) -> float:
    terms = lexical_terms(hypothesis)
    if not terms:
        return 0.0
    present = set(lexical_terms(premise))
    return sum(1 for t in terms if t in present) / len(terms)


def _chunk_sections(prompt: str) -> List[str]:
    parts = re.split(r'\[Chunk \d+\]\n', prompt)
    texts = [p for p in parts[1:]]
    # The last section runs into the rest of the prompt
    if texts:
        texts[-1] = re.split(r'\n\n(?:Requirements|MULTI-CHUNK|Respond|Question:)', texts[-1])[0]
    return [t.strip() for t in texts]


def _passages(prompt: str) -> List[str]:
    body = prompt.split('**Passages:**', 1)[1]
    body = re.split(r'\n\n\*\*', body)[0]
    return [p.strip() for p in re.split(r'\n*\[\d+\] ', body) if p.strip()]


def _first_sentence(text: str, numeric: bool = False) -> str:
    sentences = split_sentences(text) or [text]
    if numeric:
        for sentence in sentences:
            if re.search(r'\d', sentence):
                return sentence
    return sentences[0]


def _question_about(sentence: str, lead: str = 'What is reported about') -> str:
    return f"{lead} {' '.join(lexical_terms(sentence)[:6])}?"


def _score_from(text: str, low: float = 0.55, high: float = 0.95) -> float:
    fraction = int(hashlib.sha256(text.encode('utf-8')).hexdigest()[:8], 16) / 0xFFFFFFFF
    return round(low + (high - low) * fraction, 4)


def fake_chat(prompt: str) -> str:
    """Answers every prompt family the harness sends to a chat model."""
    if 'Intent description:' in prompt:
        return ('{"completeness": %s, "complementarity": %s, "coherence": %s, "task_fitness": %s}'
                % tuple(_score_from(prompt + name) for name in ('a', 'b', 'c', 'd')))
    if 'Break the reference answer below into its keypoints' in prompt:
        reference = prompt.split('Reference answer:\n', 1)[1].split('\n\nRespond', 1)[0]
        keypoints = [s for s in split_sentences(reference.replace('\n', ' ')) if lexical_terms(s)]
        return json.dumps({'keypoints': keypoints})
    if "Compare a model's answer against each keypoint" in prompt:
        keypoints = re.findall(r'^\d+\. (.+)$', prompt.split('Keypoints:', 1)[1].split('Model answer:', 1)[0],
                               re.MULTILINE)
        prediction = prompt.split('Model answer:\n', 1)[1].split('\n\nRespond', 1)[0]
        labels = ['complete' if overlap(k, prediction) >= 0.5 else 'irrelevant' for k in keypoints]
        return json.dumps({'labels': labels})
    if 'quality score between 0.0' in prompt:
        question = prompt.split('**Question:** ', 1)[1].split('\n', 1)[0]
        return json.dumps({'reasoning': 'The answer is supported by passage [1].',
                           'score': _score_from(question, 0.6, 0.98)})
    if '**Question Type:**' in prompt:
        sentence = _first_sentence(_passages(prompt)[0])
        return json.dumps({'question': _question_about(sentence), 'answer': sentence})
    if prompt.startswith('Answer the question using only the provided context.'):
        texts = _chunk_sections(prompt)
        return _first_sentence(texts[0], numeric=True) if texts else 'The context does not say.'

    texts = _chunk_sections(prompt)
    if not texts:
        return 'I cannot help with that.'
    if 'factual question-answer pair' in prompt:
        answer = _first_sentence(texts[0], numeric=True).rstrip('?')
        return f"Question: {_question_about(answer)}\nAnswer: {answer}"
    if 'quantitative data' in prompt:
        sentences = [_first_sentence(t, numeric=True) for t in texts]
        return f"Question: {_question_about(sentences[0], 'How much is stated for')}\nAnswer: {' '.join(sentences)}"
    sentences = [_first_sentence(t) for t in texts]
    if 'numbered list' in prompt:
        answer = "\n".join(f"{i}. {s}" for i, s in enumerate(sentences, start=1))
        lead = 'Which items are listed for'
    else:
        answer = ' '.join(sentences)
        lead = 'What are the key points on' if 'summary' in prompt else 'Why does the record discuss'
    return f"Question: {_question_about(sentences[0], lead)}\nAnswer: {answer}"


class FakeTransport:
    """
    In-process model services keyed on the request body shape.

    Every call is appended to `calls`, so tests can assert that replay runs
    never reach it.
    """

    def __init__(self, chat=fake_chat):
        self.chat = chat
        self.calls: List[Dict[str, Any]] = []

    def post(self, url: str, body: Dict[str, Any], headers: Dict[str, str], timeout: float) -> Any:
        self.calls.append({'url': url, 'body': body})
        if 'messages' in body:
            content = self.chat(body['messages'][0]['content'])
            return {'choices': [{'message': {'role': 'assistant', 'content': content}}]}
        if 'input' in body:
            return {'data': [{'embedding': fake_embedding(text)} for text in body['input']]}
        if 'premise' in body:
            entail = round(overlap(body['hypothesis'], body['premise']), 6)
            return {'entailment': entail, 'neutral': round(1.0 - entail, 6), 'contradiction': 0.0}
        if 'kind' in body:
            return {'scores': [token_f1(p, r) for p, r in zip(body['predictions'], body['references'])]}
        if 'context' in body:
            return {'answer': _first_sentence(body['context']), 'score': 0.9}
        raise AssertionError(f"unexpected request to {url}: {body}")


class RefusingTransport:
    """Fails the test on any network call."""

    def post(self, url, body, headers, timeout):
        raise AssertionError(f"network call in replay mode: {url}")


def fake_endpoints(with_metric: bool = False) -> Dict[str, EndpointConfig]:
    endpoints = {
        'generator': EndpointConfig('http://fake/chat', 'fake-generator', rate_limit=1e9),
        'judge': EndpointConfig('http://fake/judge', 'fake-judge', rate_limit=1e9),
        'embedder': EndpointConfig('http://fake/embed', 'fake-embedder', rate_limit=1e9),
        'nli': EndpointConfig('http://fake/nli', 'fake-nli', rate_limit=1e9),
        'span': EndpointConfig('http://fake/span', 'fake-span', rate_limit=1e9),
    }
    if with_metric:
        endpoints['metric'] = EndpointConfig('http://fake/metric', 'fake-bleurt', rate_limit=1e9)
    return endpoints


# ---------------------------------------------------------------------------
# Generated corpus
# ---------------------------------------------------------------------------

_PROGRAMS = ['Alder', 'Birch', 'Cedar', 'Dogwood', 'Elm', 'Fir', 'Ginkgo', 'Hazel', 'Ironwood', 'Juniper',
             'Kapok', 'Larch', 'Maple', 'Nutmeg', 'Oak', 'Pine', 'Quince', 'Rowan', 'Spruce', 'Teak']
_TOPICS = ['harbour dredging', 'radar maintenance', 'fleet logistics', 'cyber training', 'satellite links',
           'field hospitals']
_VERBS = ['allocated', 'committed', 'approved', 'reserved', 'earmarked', 'planned']


def fixture_document(index: int) -> str:
    """Six paragraphs of three numeric, document-specific sentences."""
    program = _PROGRAMS[index % len(_PROGRAMS)]
    paragraphs = []
    for p, topic in enumerate(_TOPICS):
        amount = 10 + 7 * index + 3 * p
        year = 2015 + (index + p) % 9
        verb = _VERBS[(index + p) % len(_VERBS)]
        paragraphs.append(
            f"The {program} programme {verb} ${amount} million for {topic} in {year} across region {p + 1}. "
            f"Officials in the {program} {topic} office reported {amount * 2} staff positions filled "
            f"during phase {p + 1}. "
            f"Planners expect the {topic} work under {program} to finish within {p + 2} years of approval."
        )
    return f"# {program} programme review\n\n" + "\n\n".join(paragraphs) + "\n"


def write_fixture_corpus(directory: Path, n_docs: int = 20) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for index in range(n_docs):
        (directory / f"report_{index:02d}.md").write_text(fixture_document(index), encoding='utf-8')
    return directory


def write_run_config(path: Path, **overrides) -> Path:
    """YAML run config wired to the fake endpoints and the whitespace tokenizer."""
    config = {
        'corpus_paths': ['corpus'],
        'output_dir': 'out',
        'mode': 'record',
        'fixture_archive': 'fixtures.jsonl',
        'cache_path': 'cache/record.db',
        'max_workers': 1,
        'encoding_name': 'whitespace',
        'chunk_policy': {'target_tokens': 40, 'min_tokens': 20, 'max_tokens': 90, 'window_sentence_overlap': 0.25},
        'endpoints': {role: {'url': e.url, 'model': e.model, 'rate_limit': e.rate_limit}
                      for role, e in fake_endpoints().items()},
        'target_per_style': 3,
        'quotas': {'find': 12, 'explain': 12, 'summarize': 12, 'generate': 12, 'provide': 12},
        'retriever': {'kind': 'oracle', 'k': 3},
        'sweep_retrievers': ['bm25', 'dense', 'hybrid'],
        'bootstrap_path': str(FIXTURES / 'bootstrap_pool.jsonl'),
        'graph': {'k': 5, 'max_distance': 0.35, 'n_examples': 2, 'threshold': 0.75,
                  'target_per_style': 2, 'max_attempts_per_style': 6},
    }
    config.update(overrides)
    path.write_text(yaml.safe_dump(config, sort_keys=True), encoding='utf-8')
    return path


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

@pytest.fixture
def fake_transport():
    return FakeTransport()


@pytest.fixture
def providers(tmp_path, fake_transport):
    cache = ProviderCache(str(tmp_path / 'cache.db'))
    return Providers(fake_endpoints(with_metric=True), cache, mode='live', transport=fake_transport,
                     sleep=lambda seconds: None)


@pytest.fixture
def library():
    return PromptLibrary()


@pytest.fixture
def fixture_corpus(tmp_path):
    return write_fixture_corpus(tmp_path / 'corpus')


@pytest.fixture
def unit_embedder():
    """Embedder over fake_embedding with L2-normalized rows."""

    def embed(texts):
        matrix = np.asarray([fake_embedding(t) for t in texts], dtype=float)
        return matrix / np.linalg.norm(matrix, axis=1, keepdims=True)

    return embed


@pytest.fixture
def fixture_store(fixture_corpus):
    """The generated corpus chunked the way write_run_config chunks it: six chunks per document."""
    documents = [ingest_path(path, root) for path, root in collect_corpus_files([str(fixture_corpus)])]
    return ChunkStore(chunk_corpus(documents, ChunkPolicy(40, 20, 90), TokenizerSpec('whitespace')))
