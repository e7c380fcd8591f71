"""
Quality Control

Candidates are accepted only when they pass the style's hard gates and their
evidence-grounded composite score reaches the style threshold. Accepted items
are then deduplicated, diversity-filtered and cut to per-style quotas. Every
decision is written to an audit trail.
"""

import logging
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.background_jobs import run_in_pool
from app.database import write_records
from app.services.corpus import ChunkStore, split_sentences
from app.services.evalhub import normalize_tokens, token_f1_from_tokens
from app.services.providers import NliVerdict, ProviderError, Providers
from app.services.synthesis import QACandidate, Style, StylePolicy, detect_citations

logger = logging.getLogger(__name__)

AUDIT_SCHEMA = 'qc-audit'
AUDIT_VERSION = 1

METRIC_NAMES = ('des', 'span_f1', 'numeric_consistency', 'context_recall', 'context_precision', 'qa_relevancy')
SHORT_FORM_STYLES = (Style.FIND, Style.PROVIDE)
SUPPORT_THRESHOLD = 0.5
NEAR_DUPLICATE_COSINE = 0.95


class RejectionReason(Enum):
    """Why a candidate did not make it into the dataset"""
    EMPTY_FIELD = "empty-field"
    NO_NUMERIC = "no-numeric"
    SINGLE_CHUNK_GROUNDING = "single-chunk-grounding"
    ANSWER_IS_QUESTION = "answer-is-question"
    BELOW_THRESHOLD = "below-threshold"
    UNSCORABLE = "unscorable"
    DUPLICATE = "duplicate"
    NEAR_DUPLICATE = "near-duplicate"
    OVER_QUOTA = "over-quota"


@dataclass
class GateResult:
    passed: bool
    reason: Optional[RejectionReason] = None
    detail: str = ''


@dataclass
class QualityBreakdown:
    """Metric values of one candidate; None means not applicable or unavailable."""
    des: Optional[float] = None
    span_f1: Optional[float] = None
    numeric_consistency: Optional[float] = None
    context_recall: Optional[float] = None
    context_precision: Optional[float] = None
    qa_relevancy: Optional[float] = None
    composite: Optional[float] = None
    unavailable: List[str] = field(default_factory=list)
    not_applicable: List[str] = field(default_factory=list)

    def metric_values(self) -> Dict[str, Optional[float]]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'QualityBreakdown':
        return cls(**{key: data.get(key) for key in METRIC_NAMES + ('composite',)},
                   unavailable=list(data.get('unavailable', [])),
                   not_applicable=list(data.get('not_applicable', [])))


@dataclass
class QAInstance:
    """A candidate with its quality verdict."""
    candidate: QACandidate
    quality: QualityBreakdown = field(default_factory=QualityBreakdown)
    accepted: bool = False
    rejection_reason: Optional[RejectionReason] = None
    detail: str = ''

    @property
    def question(self) -> str:
        return self.candidate.question

    @property
    def answer(self) -> str:
        return self.candidate.answer

    @property
    def style(self) -> Style:
        return self.candidate.style

    @property
    def seed_doc_id(self) -> str:
        return self.candidate.seed_doc_id

    @property
    def evidence_chunk_ids(self) -> List[str]:
        return self.candidate.bundle.chunk_ids

    def reject(self, reason: RejectionReason, detail: str = ''):
        self.accepted = False
        self.rejection_reason = reason
        self.detail = detail

    def audit_record(self) -> Dict:
        return {
            'candidate_id': self.candidate.candidate_id,
            'seed_doc_id': self.seed_doc_id,
            'style': self.style.value,
            'question': self.question,
            'answer': self.answer,
            'evidence_chunk_ids': self.evidence_chunk_ids,
            'cited_chunks': self.candidate.cited_chunks,
            'rubric_scores': self.candidate.bundle.rubric_scores,
            'g_score': self.candidate.bundle.g_score,
            'quality': self.quality.to_dict(),
            'accepted': self.accepted,
            'rejection_reason': self.rejection_reason.value if self.rejection_reason else None,
            'detail': self.detail,
        }


# ---------------------------------------------------------------------------
# Hard gates
# ---------------------------------------------------------------------------

_SPELLED_NUMBERS = (
    'zero one two three four five six seven eight nine ten eleven twelve thirteen fourteen fifteen '
    'sixteen seventeen eighteen nineteen twenty thirty forty fifty sixty seventy eighty ninety '
    'hundred thousand million billion trillion dozen percent half quarter'
).split()
_SPELLED_PATTERN = re.compile(r'\b(' + '|'.join(_SPELLED_NUMBERS) + r')\b', re.IGNORECASE)


def has_numeric_content(text: str) -> bool:
    return bool(re.search(r'\d', text)) or bool(_SPELLED_PATTERN.search(text))


def hard_gate(candidate: QACandidate, policy: StylePolicy, store: Optional[ChunkStore] = None) -> GateResult:
    """
    Structural checks every accepted candidate must pass.

    Args:
        candidate: Candidate to check
        policy: The candidate's style policy
        store: Resolves bundle chunk texts for citation detection; when omitted
            the citations recorded on the candidate are used

    Returns:
        GateResult with the first failing reason
    """
    question = (candidate.question or '').strip()
    answer = (candidate.answer or '').strip()
    if not question or not answer:
        return GateResult(False, RejectionReason.EMPTY_FIELD, "question or answer is empty")

    if candidate.style == Style.PROVIDE and not has_numeric_content(answer):
        return GateResult(False, RejectionReason.NO_NUMERIC, "provide answer carries no number")

    if candidate.style == Style.FIND and answer.rstrip().endswith('?'):
        return GateResult(False, RejectionReason.ANSWER_IS_QUESTION, "find answer is phrased as a question")

    bundle_ids = candidate.bundle.chunk_ids
    if len(bundle_ids) >= 2:
        if store is not None:
            cited = detect_citations(answer, bundle_ids, [store.require(c).text for c in bundle_ids])
        else:
            cited = [c for c in candidate.cited_chunks if c in bundle_ids]
        required = max(2, policy.min_citations)
        if len(set(cited)) < min(required, len(bundle_ids)):
            return GateResult(False, RejectionReason.SINGLE_CHUNK_GROUNDING,
                              f"cites {len(set(cited))} of {len(bundle_ids)} bundle chunks")
    return GateResult(True)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

_LIST_MARKER = re.compile(r'^\s*(?:\d+[.)]|[-*•])\s+')


def answer_sentences(answer: str) -> List[str]:
    """Sentences of an answer; numbered and bulleted list items count as sentences."""
    sentences = []
    for line in answer.splitlines():
        line = _LIST_MARKER.sub('', line).strip()
        if not line:
            continue
        sentences.extend(s for s in split_sentences(line) if re.search(r'[A-Za-z0-9]', s))
    return sentences


def nli_matrix(sentences: Sequence[str], chunk_texts: Sequence[str], providers: Providers) -> List[List[NliVerdict]]:
    """verdicts[i][j] = NLI(premise=chunk j, hypothesis=sentence i)."""
    return [[providers.nli(text, sentence) for text in chunk_texts] for sentence in sentences]


def sentence_support(verdict: NliVerdict, penalty: float = 1.0) -> float:
    return min(1.0, max(0.0, verdict.entail - penalty * verdict.contradict))


def des(answer: str, chunk_texts: Sequence[str], providers: Optional[Providers] = None,
        verdicts: Optional[List[List[NliVerdict]]] = None, penalty: float = 1.0) -> float:
    """
    Document entailment score.

    Each answer sentence takes its best verdict over the bundle chunks, scored
    clamp(entail - penalty * contradict, 0, 1); the result is the mean over sentences.
    """
    sentences = answer_sentences(answer)
    if not sentences:
        raise ValueError("answer has no sentences")
    if verdicts is None:
        verdicts = nli_matrix(sentences, chunk_texts, providers)
    per_sentence = [max(sentence_support(v, penalty) for v in row) for row in verdicts]
    return sum(per_sentence) / len(per_sentence)


def span_f1(answer: str, chunk_texts: Sequence[str], slack: int = 2) -> float:
    """
    Best token F1 between the answer and any window of any chunk.

    Windows range over lengths within slack tokens of the answer length.
    """
    answer_tokens = normalize_tokens(answer)
    if not answer_tokens:
        return 0.0
    best = 0.0
    length = len(answer_tokens)
    for text in chunk_texts:
        tokens = normalize_tokens(text)
        if not tokens:
            continue
        for size in range(max(1, length - slack), length + slack + 1):
            if size > len(tokens):
                size = len(tokens)
            for start in range(0, len(tokens) - size + 1):
                score = token_f1_from_tokens(answer_tokens, tokens[start:start + size])
                if score > best:
                    best = score
                    if best == 1.0:
                        return 1.0
    return best


_YEAR_RANGE = re.compile(r'\b((?:1[89]|20)\d{2})\s*[–—\-/]\s*(\d{4}|\d{2})\b')
_NUMBER = re.compile(
    r'(?<![\w.])([$€£¥])?\s?(\d{1,3}(?:,\d{3})+|\d+)(?:\.(\d+))?'
    r'(?:\s*(%|percent\b|per cent\b|trillion\b|billion\b|million\b|thousand\b|tn\b|bn\b|mn\b|m\b|k\b))?',
    re.IGNORECASE,
)
_MAGNITUDES = {
    'thousand': 1e3, 'k': 1e3,
    'million': 1e6, 'mn': 1e6, 'm': 1e6,
    'billion': 1e9, 'bn': 1e9,
    'trillion': 1e12, 'tn': 1e12,
}


def extract_numbers(text: str) -> List[str]:
    """
    Canonical forms of the numbers and dates in text.

    Separators, currency symbols and magnitude words are normalized, so
    "$38 billion", "38bn" and "38,000,000,000" all map to one form. A year range
    such as "2022–23" canonicalizes to its expanded "range:2022-2023" form.
    """
    found = []

    def expand_range(match: re.Match) -> str:
        start, end = match.group(1), match.group(2)
        if len(end) == 2:
            end = start[:2] + end
        if int(end) > int(start):
            found.append(f"range:{start}-{end}")
            return ' '
        return match.group(0)

    remaining = _YEAR_RANGE.sub(expand_range, text)
    for match in _NUMBER.finditer(remaining):
        whole = match.group(2).replace(',', '')
        fraction = match.group(3)
        value = float(f"{whole}.{fraction}" if fraction else whole)
        unit = (match.group(4) or '').lower()
        if unit in ('%', 'percent', 'per cent'):
            found.append(f"pct:{value:.10g}")
            continue
        value *= _MAGNITUDES.get(unit, 1.0)
        found.append(f"num:{value:.10g}")
    return found


def numeric_consistency(answer: str, chunk_texts: Sequence[str]) -> Optional[float]:
    """Fraction of the answer's numbers present in the bundle; None when the answer has none."""
    answer_numbers = extract_numbers(answer)
    if not answer_numbers:
        return None
    bundle_numbers = set()
    for text in chunk_texts:
        bundle_numbers.update(extract_numbers(text))
    return sum(1 for n in answer_numbers if n in bundle_numbers) / len(answer_numbers)


def qa_relevancy(question: str, answer: str, embedder: Callable[[Sequence[str]], np.ndarray]) -> float:
    vectors = embedder([question, answer])
    cosine = float(np.dot(vectors[0], vectors[1]))
    return min(1.0, max(0.0, (cosine + 1.0) / 2.0))


def coverage_from_verdicts(verdicts: List[List[NliVerdict]], chunk_count: int) -> Tuple[float, float]:
    """
    (context_recall, context_precision) from a sentence x chunk verdict matrix.

    Each sentence is assigned to its best chunk by entail - contradict (ties to
    the earlier chunk) and counts as supported when that chunk's entailment
    reaches 0.5.
    """
    if not verdicts or chunk_count == 0:
        return 0.0, 0.0
    assigned = set()
    supported = 0
    for row in verdicts:
        best = max(range(len(row)), key=lambda j: (row[j].relevance, -j))
        if row[best].entail >= SUPPORT_THRESHOLD:
            supported += 1
            assigned.add(best)
    return len(assigned) / chunk_count, supported / len(verdicts)


def relevancy_and_coverage(question: str, answer: str, chunk_texts: Sequence[str], providers: Providers,
                           verdicts: Optional[List[List[NliVerdict]]] = None
                           ) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """
    (qa_relevancy, context_recall, context_precision); a failing service leaves its metrics None.
    """
    try:
        relevancy = qa_relevancy(question, answer, providers.embed)
    except ProviderError as e:
        logger.warning(f"qa_relevancy unavailable: {e}")
        relevancy = None
    try:
        if verdicts is None:
            verdicts = nli_matrix(answer_sentences(answer), chunk_texts, providers)
        recall, precision = coverage_from_verdicts(verdicts, len(chunk_texts))
    except ProviderError as e:
        logger.warning(f"coverage unavailable: {e}")
        recall, precision = None, None
    return relevancy, recall, precision


def weighted_composite(values: Dict[str, Optional[float]], weights: Dict[str, float]) -> Optional[float]:
    """Weighted mean over the metrics that have a value; None when none do."""
    available = {name: w for name, w in weights.items() if w > 0 and values.get(name) is not None}
    total = sum(available.values())
    if total <= 0:
        return None
    return sum(w * values[name] for name, w in available.items()) / total


def composite(candidate: QACandidate, policy: StylePolicy, store: ChunkStore, providers: Providers) -> QualityBreakdown:
    """
    Compute the style's metric set and their weighted composite.

    Unavailable metrics drop out and the remaining weights are renormalized.
    """
    texts = [store.require(c).text for c in candidate.bundle.chunk_ids]
    breakdown = QualityBreakdown()
    wanted = {name for name, weight in policy.metric_weights.items() if weight > 0}

    verdicts = None
    if wanted & {'des', 'context_recall', 'context_precision'}:
        try:
            verdicts = nli_matrix(answer_sentences(candidate.answer), texts, providers)
            if not verdicts:
                verdicts = None
        except ProviderError as e:
            logger.warning(f"NLI unavailable for {candidate.candidate_id}: {e}")
            breakdown.unavailable.extend(sorted(wanted & {'des', 'context_recall', 'context_precision'}))

    if 'des' in wanted and verdicts is not None:
        breakdown.des = des(candidate.answer, texts, verdicts=verdicts)
    if 'span_f1' in wanted:
        if candidate.style in SHORT_FORM_STYLES:
            breakdown.span_f1 = span_f1(candidate.answer, texts)
        else:
            breakdown.not_applicable.append('span_f1')
    if 'numeric_consistency' in wanted:
        breakdown.numeric_consistency = numeric_consistency(candidate.answer, texts)
        if breakdown.numeric_consistency is None:
            breakdown.not_applicable.append('numeric_consistency')
    if wanted & {'qa_relevancy', 'context_recall', 'context_precision'}:
        relevancy, recall, precision = relevancy_and_coverage(
            candidate.question, candidate.answer, texts, providers,
            verdicts=verdicts if verdicts is not None else [],
        )
        if 'qa_relevancy' in wanted:
            breakdown.qa_relevancy = relevancy
            if relevancy is None:
                breakdown.unavailable.append('qa_relevancy')
        if verdicts is not None:
            if 'context_recall' in wanted:
                breakdown.context_recall = recall
            if 'context_precision' in wanted:
                breakdown.context_precision = precision

    breakdown.composite = weighted_composite(breakdown.metric_values(), policy.metric_weights)
    return breakdown


# ---------------------------------------------------------------------------
# Batch evaluation
# ---------------------------------------------------------------------------

def evaluate_candidate(candidate: QACandidate, policy: StylePolicy, store: ChunkStore,
                       providers: Providers) -> QAInstance:
    """Gate, score and decide acceptance for one candidate."""
    instance = QAInstance(candidate)
    gate = hard_gate(candidate, policy, store)
    if not gate.passed:
        instance.reject(gate.reason, gate.detail)
        return instance
    instance.quality = composite(candidate, policy, store, providers)
    score = instance.quality.composite
    if score is None:
        instance.reject(RejectionReason.UNSCORABLE, "no metric available")
    elif score < policy.threshold:
        instance.reject(RejectionReason.BELOW_THRESHOLD, f"composite {score:.3f} < {policy.threshold}")
    else:
        instance.accepted = True
    return instance


def evaluate_candidates(candidates: Sequence[QACandidate], policies: Dict[Style, StylePolicy], store: ChunkStore,
                        providers: Providers, max_workers: int = 1) -> List[QAInstance]:
    """Evaluate candidates in parallel; output keeps input order."""
    outcome = run_in_pool(lambda c: evaluate_candidate(c, policies[c.style], store, providers),
                          list(candidates), max_workers=max_workers, label='candidates')
    instances = []
    for index, result in enumerate(outcome.results):
        if result is None:
            result = QAInstance(candidates[index])
            result.reject(RejectionReason.UNSCORABLE, outcome.errors.get(index, ''))
        instances.append(result)
    accepted = sum(1 for i in instances if i.accepted)
    logger.info(f"Quality gate accepted {accepted} of {len(instances)} candidates")
    return instances


def normalize_question(question: str) -> str:
    return " ".join(re.sub(r'[^\w\s]', ' ', question.lower()).split())


def _preference(instance: QAInstance):
    return (-(instance.quality.composite or 0.0), instance.candidate.candidate_id)


def dedup_and_diversify(instances: Sequence[QAInstance], embedder: Callable[[Sequence[str]], np.ndarray],
                        threshold: float = NEAR_DUPLICATE_COSINE) -> List[QAInstance]:
    """
    Remove exact and near-duplicate questions within each seed document.

    Exact duplicates compare normalized question text; near-duplicates compare
    question embeddings at cosine >= threshold. The higher composite survives.
    Removed instances are marked rejected; the survivors keep input order.

    Args:
        instances: Accepted instances
        embedder: Embeds question texts (L2-normalized rows)
        threshold: Near-duplicate cosine

    Returns:
        Surviving instances
    """
    by_doc: Dict[str, List[QAInstance]] = defaultdict(list)
    for instance in instances:
        by_doc[instance.seed_doc_id].append(instance)

    survivors = set()
    for doc_id in sorted(by_doc):
        group = sorted(by_doc[doc_id], key=_preference)
        seen_text = set()
        unique = []
        for instance in group:
            key = normalize_question(instance.question)
            if key in seen_text:
                instance.reject(RejectionReason.DUPLICATE, "exact duplicate question in seed document")
                continue
            seen_text.add(key)
            unique.append(instance)

        if len(unique) > 1:
            vectors = embedder([i.question for i in unique])
        else:
            vectors = None
        kept_positions: List[int] = []
        for position, instance in enumerate(unique):
            if vectors is not None and kept_positions:
                similarities = vectors[kept_positions] @ vectors[position]
                if float(similarities.max()) >= threshold:
                    instance.reject(RejectionReason.NEAR_DUPLICATE,
                                    f"question cosine {float(similarities.max()):.3f} with a kept question")
                    continue
            kept_positions.append(position)
            survivors.add(id(instance))

    kept = [i for i in instances if id(i) in survivors]
    logger.info(f"Dedup kept {len(kept)} of {len(instances)} instances")
    return kept


def select_final(instances: Sequence[QAInstance], policies: Dict[Style, StylePolicy]) -> Tuple[List[QAInstance], Dict[str, int]]:
    """
    Fill per-style quotas with the best accepted instances.

    Returns:
        (dataset ordered by style then rank, shortfall per style)
    """
    selected: List[QAInstance] = []
    shortfalls: Dict[str, int] = {}
    for style, policy in policies.items():
        pool = [i for i in instances if i.accepted and i.style == style]
        pool.sort(key=lambda i: (-(i.quality.composite or 0.0), i.seed_doc_id, i.question))
        chosen = pool[:policy.quota]
        for instance in pool[policy.quota:]:
            instance.reject(RejectionReason.OVER_QUOTA, f"beyond the {style.value} quota of {policy.quota}")
        if len(chosen) < policy.quota:
            shortfalls[style.value] = policy.quota - len(chosen)
            logger.warning(f"Quota unmet for {style.value}: {len(chosen)} of {policy.quota} "
                           f"(shortfall {policy.quota - len(chosen)})")
        selected.extend(chosen)
    return selected, shortfalls


def write_audit(instances: Sequence[QAInstance], path: str) -> int:
    return write_records(path, AUDIT_SCHEMA, AUDIT_VERSION, (i.audit_record() for i in instances))
