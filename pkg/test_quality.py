"""
Quality control tests: hard gates, grounding metrics, composite scoring,
deduplication and quota selection.
"""

import itertools
import random

import pytest

from app.database import read_records
from app.services.corpus import Chunk, ChunkStore
from app.services.providers import NliVerdict
from app.services.quality import (AUDIT_SCHEMA, AUDIT_VERSION, QAInstance, QualityBreakdown, RejectionReason,
                                  answer_sentences, coverage_from_verdicts, dedup_and_diversify, des,
                                  evaluate_candidate, extract_numbers, hard_gate, has_numeric_content,
                                  numeric_consistency, qa_relevancy, select_final, span_f1, weighted_composite,
                                  write_audit)
from app.services.synthesis import EvidenceBundle, QACandidate, Style, build_policies, default_policy

_IDS = itertools.count()


def candidate(answer, style=Style.FIND, chunk_ids=('c0',), question='What was reported?', doc='d', cited=(),
              candidate_id=None):
    return QACandidate(
        candidate_id=candidate_id or f"{doc}-{style.value}-{next(_IDS)}",
        question=question,
        answer=answer,
        style=style,
        bundle=EvidenceBundle(list(chunk_ids)),
        seed_doc_id=doc,
        raw_completion='',
        cited_chunks=list(cited),
    )


def instance(question, composite, doc='d', style=Style.FIND, candidate_id=None):
    result = QAInstance(candidate('An answer with 3 facts.', style=style, question=question, doc=doc,
                                  candidate_id=candidate_id or f"{doc}-{question}"),
                        QualityBreakdown(composite=composite), accepted=True)
    return result


def disjoint_store(n_chunks=5):
    """Chunks whose words never repeat across chunks."""
    chunks = [Chunk(f"c{c}", 'd', 'd.md', 'd.md', [1], None,
                    " ".join(f"w{c}x{j}" for j in range(12)) + f" cost {c + 10} million.", 15)
              for c in range(n_chunks)]
    return ChunkStore(chunks)


# ---------------------------------------------------------------------------
# Hard gates
# ---------------------------------------------------------------------------

_PLAIN_WORDS = ['budget', 'fleet', 'grew', 'steadily', 'across', 'the', 'region', 'while', 'officials',
                'reported', 'progress', 'radar', 'upgrades', 'remained', 'on', 'schedule', 'depots']


def _adversarial_cases():
    """Fifty candidates that must all fail a gate, with the reason each must fail for."""
    rng = random.Random(13)
    store = disjoint_store()
    cases = []
    for i in range(25):
        answer = " ".join(rng.choice(_PLAIN_WORDS) for _ in range(rng.randint(3, 12))) + "."
        cases.append((candidate(answer, Style.PROVIDE, chunk_ids=['c0']), RejectionReason.NO_NUMERIC))
    multi_styles = [Style.EXPLAIN, Style.SUMMARIZE, Style.GENERATE, Style.PROVIDE]
    for i in range(25):
        style = multi_styles[i % len(multi_styles)]
        size = {Style.PROVIDE: 2, Style.GENERATE: 5}.get(style, 4)
        ids = rng.sample([c.chunk_id for c in store.chunks], size)
        # Quotes a single bundle chunk and mentions nothing else
        quoted = store.require(ids[rng.randrange(size)]).text
        answer = f"The record notes that {quoted}"
        cases.append((candidate(answer, style, chunk_ids=ids), RejectionReason.SINGLE_CHUNK_GROUNDING))
    return store, cases


def test_adversarial_candidates_never_pass_the_gates():
    store, cases = _adversarial_cases()
    assert len(cases) == 50
    for case, reason in cases:
        result = hard_gate(case, default_policy(case.style), store)
        assert not result.passed, case.answer
        assert result.reason == reason


def test_citing_two_chunks_passes_the_multi_chunk_gate():
    store = disjoint_store()
    answer = f"{store.require('c1').text} Meanwhile {store.require('c3').text}"
    ok = hard_gate(candidate(answer, Style.EXPLAIN, chunk_ids=['c0', 'c1', 'c2', 'c3']),
                   default_policy(Style.EXPLAIN), store)
    assert ok.passed
    mentioned = hard_gate(candidate('See [Chunk 1] and Chunk 2 for 5 details.', Style.PROVIDE, chunk_ids=['c0', 'c4']),
                          default_policy(Style.PROVIDE), store)
    assert mentioned.passed


def test_recorded_citations_are_used_without_a_store():
    policy = default_policy(Style.PROVIDE)
    assert not hard_gate(candidate('It was 5.', Style.PROVIDE, ['a', 'b'], cited=['a']), policy).passed
    assert hard_gate(candidate('It was 5.', Style.PROVIDE, ['a', 'b'], cited=['a', 'b']), policy).passed


@pytest.mark.parametrize('question, answer, style, reason', [
    ('', 'In 2019.', Style.FIND, RejectionReason.EMPTY_FIELD),
    ('When?', '   ', Style.FIND, RejectionReason.EMPTY_FIELD),
    ('When did it start?', 'Did it start in 2019?', Style.FIND, RejectionReason.ANSWER_IS_QUESTION),
])
def test_structural_gates(question, answer, style, reason):
    result = hard_gate(candidate(answer, style, question=question), default_policy(style))
    assert result.reason == reason


def test_spelled_out_numbers_count_as_numeric():
    assert has_numeric_content('roughly forty vessels')
    assert has_numeric_content('12 boats')
    assert not has_numeric_content('several vessels were refitted')


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def test_exact_figure_span_scores_one():
    assert span_f1('38 billion', ['Congress approved 38 billion for new shipbuilding.']) == 1.0
    assert span_f1('The 38 billion', ['Congress approved 38 billion for new shipbuilding.']) == 1.0
    assert span_f1('12 million', ['Congress approved 38 billion for new shipbuilding.']) < 1.0
    assert span_f1('', ['anything']) == 0.0


def test_numbers_canonicalize_across_notations():
    assert extract_numbers('$38 billion') == extract_numbers('38bn') == extract_numbers('38,000,000,000')
    assert extract_numbers('12%') == extract_numbers('12 percent')
    assert extract_numbers('FY 2022–23') == ['range:2022-2023']
    assert extract_numbers('2022-2023') == ['range:2022-2023']
    assert extract_numbers('no figures here') == []


def test_numeric_consistency():
    chunks = ['The programme received 38bn in 2021.', 'Staffing rose 12 percent.']
    assert numeric_consistency('It received $38 billion.', chunks) == 1.0
    assert numeric_consistency('It received $38 billion in 2020.', chunks) == 0.5
    assert numeric_consistency('Staffing rose.', chunks) is None


def test_list_items_are_answer_sentences():
    answer = "Priorities:\n1. Radar upgrades.\n2) Fuel depots\n- Crew training. Simulator time."
    assert answer_sentences(answer) == ['Priorities:', 'Radar upgrades.', 'Fuel depots', 'Crew training.',
                                        'Simulator time.']


def test_des_takes_best_chunk_per_sentence():
    verdicts = [
        [NliVerdict(0.9, 0.1, 0.0), NliVerdict(0.2, 0.8, 0.0)],
        [NliVerdict(0.1, 0.3, 0.6), NliVerdict(0.5, 0.3, 0.2)],
    ]
    assert des('First claim. Second claim.', ['a', 'b'], verdicts=verdicts) == pytest.approx((0.9 + 0.3) / 2)
    with pytest.raises(ValueError):
        des('...', ['a'], verdicts=[])


def test_coverage_assigns_each_supported_sentence_to_its_best_chunk():
    strong, weak = NliVerdict(0.8, 0.2, 0.0), NliVerdict(0.1, 0.9, 0.0)
    verdicts = [
        [strong, weak, weak],
        [strong, strong, weak],
        [weak, weak, weak],
    ]
    recall, precision = coverage_from_verdicts(verdicts, 3)
    # Both supported sentences land on chunk 0 (ties go to the earlier chunk)
    assert recall == pytest.approx(1 / 3)
    assert precision == pytest.approx(2 / 3)
    assert coverage_from_verdicts([], 3) == (0.0, 0.0)


def test_support_is_judged_on_the_assigned_chunk():
    # Chunk 0 entails more but also contradicts; chunk 1 wins the assignment with 0.45 entailment
    row = [NliVerdict(0.6, 0.0, 0.4), NliVerdict(0.45, 0.55, 0.0)]
    assert coverage_from_verdicts([row], 2) == (0.0, 0.0)
    row = [NliVerdict(0.6, 0.0, 0.4), NliVerdict(0.55, 0.45, 0.0)]
    assert coverage_from_verdicts([row], 2) == (0.5, 1.0)


def test_qa_relevancy_is_rescaled_cosine(unit_embedder):
    assert qa_relevancy('fleet radar budget', 'fleet radar budget', unit_embedder) == pytest.approx(1.0)
    assert 0.5 <= qa_relevancy('fleet radar', 'crew training depot', unit_embedder) < 1.0


def test_composite_renormalizes_over_available_metrics():
    weights = {'des': 0.5, 'span_f1': 0.3, 'qa_relevancy': 0.2}
    assert weighted_composite({'des': 0.8, 'span_f1': None, 'qa_relevancy': 0.3}, weights) == pytest.approx(
        (0.5 * 0.8 + 0.2 * 0.3) / 0.7)
    assert weighted_composite({'des': None}, weights) is None


def test_composite_is_monotone_in_each_metric():
    rng = random.Random(11)
    names = ['des', 'span_f1', 'numeric_consistency', 'context_recall', 'context_precision', 'qa_relevancy']
    for _ in range(300):
        weights = {name: rng.choice([0.0, rng.random()]) for name in names}
        values = {name: rng.choice([None, rng.random()]) for name in names}
        base = weighted_composite(values, weights)
        for name in names:
            if values[name] is None:
                continue
            raised = dict(values, **{name: rng.uniform(values[name], 1.0)})
            score = weighted_composite(raised, weights)
            if base is None:
                assert score is None
            else:
                assert score >= base - 1e-12, (weights, values, name)


def test_grounded_answer_is_accepted_and_threshold_applies(fixture_store, providers):
    chunk = fixture_store.chunks[1]
    sentence = chunk.text.split('. ')[0] + '.'
    grounded = candidate(sentence, Style.FIND, chunk_ids=[chunk.chunk_id], doc=chunk.doc_id,
                         question='How much did the programme allocate for this work?')

    accepted = evaluate_candidate(grounded, default_policy(Style.FIND), fixture_store, providers)
    assert accepted.accepted, accepted.quality
    assert accepted.quality.des == pytest.approx(1.0)
    assert accepted.quality.span_f1 == 1.0
    assert accepted.quality.numeric_consistency == 1.0
    assert accepted.quality.composite >= 0.75

    strict = default_policy(Style.FIND)
    strict.threshold = 1.01
    rejected = evaluate_candidate(grounded, strict, fixture_store, providers)
    assert rejected.rejection_reason == RejectionReason.BELOW_THRESHOLD


def test_span_metric_does_not_apply_to_long_form_styles(fixture_store, providers):
    chunks = fixture_store.by_doc()[fixture_store.chunks[0].doc_id][:2]
    answer = " ".join(c.text.split('. ')[0] + '.' for c in chunks)
    policy = default_policy(Style.EXPLAIN)
    policy.metric_weights = dict(policy.metric_weights, span_f1=0.1)
    result = evaluate_candidate(candidate(answer, Style.EXPLAIN, [c.chunk_id for c in chunks]),
                                policy, fixture_store, providers)
    assert result.quality.span_f1 is None
    assert 'span_f1' in result.quality.not_applicable


# ---------------------------------------------------------------------------
# Dedup and selection
# ---------------------------------------------------------------------------

def test_exact_duplicates_keep_the_higher_composite(unit_embedder):
    low = instance('What is the Alder budget?', 0.8)
    high = instance('what is the alder budget', 0.9)
    other_doc = instance('What is the Alder budget?', 0.7, doc='e')
    kept = dedup_and_diversify([low, high, other_doc], unit_embedder)
    assert kept == [high, other_doc]
    assert low.rejection_reason == RejectionReason.DUPLICATE


def test_near_duplicates_are_removed(unit_embedder):
    first = instance('What is the budget of the Alder programme?', 0.9)
    reordered = instance('What is the Alder programme budget of the?', 0.85)
    distinct = instance('When will radar maintenance finish?', 0.8)
    kept = dedup_and_diversify([first, reordered, distinct], unit_embedder)
    assert kept == [first, distinct]
    assert reordered.rejection_reason == RejectionReason.NEAR_DUPLICATE


def test_dedup_is_idempotent(unit_embedder):
    pool = [
        instance('What is the budget of the Alder programme?', 0.9),
        instance('What is the Alder programme budget of the?', 0.85),
        instance('what is the budget of the alder programme', 0.7),
        instance('When will radar maintenance finish?', 0.8),
        instance('When will radar maintenance finish?', 0.8, doc='e'),
        instance('When will radar maintenance finish', 0.75, doc='e'),
        instance('Which depots received new trucks?', 0.6, doc='e'),
    ]
    once = dedup_and_diversify(pool, unit_embedder)
    assert 0 < len(once) < len(pool)
    twice = dedup_and_diversify(once, unit_embedder)
    assert twice == once
    assert all(i.accepted and i.rejection_reason is None for i in twice)


def test_quotas_take_the_best_and_report_shortfalls():
    policies = build_policies(default_quota=2)
    finds = [instance(f"Question {i}?", 0.8 + i / 100, candidate_id=f"f{i}") for i in range(4)]
    provides = [instance('How much?', 0.9, style=Style.PROVIDE)]
    selected, shortfalls = select_final(finds + provides, policies)
    assert [i.candidate.candidate_id for i in selected if i.style == Style.FIND] == ['f3', 'f2']
    assert finds[0].rejection_reason == RejectionReason.OVER_QUOTA
    assert shortfalls == {'provide': 1, 'explain': 2, 'summarize': 2, 'generate': 2}


def test_audit_records_every_decision(tmp_path):
    rejected = instance('Dropped?', 0.5)
    rejected.reject(RejectionReason.BELOW_THRESHOLD, 'composite 0.500 < 0.75')
    kept = instance('Kept?', 0.9)
    path = tmp_path / 'audit.jsonl'
    assert write_audit([rejected, kept], str(path)) == 2
    records = read_records(str(path), AUDIT_SCHEMA, AUDIT_VERSION)
    assert [r['rejection_reason'] for r in records] == ['below-threshold', None]
    assert records[1]['accepted'] is True
    assert records[0]['quality']['composite'] == 0.5
