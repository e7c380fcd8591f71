"""
Evidence Selection and Candidate Generation

For each seed document and intent style:
1. NLI prefilter ranks the document's chunks against a style hypothesis
2. Candidate bundles (combinations of top chunks) are scored by a rubric judge
3. The best bundles are rendered into the style template and sent to the generator
4. Completions are parsed into question/answer candidates carrying their evidence
"""

import hashlib
import itertools
import logging
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Set, Tuple

from app.background_jobs import run_in_pool
from app.database import read_records, write_records
from app.services import FailureReport, HarnessError
from app.services.corpus import Chunk, ChunkStore
from app.services.index import lexical_terms
from app.services.prompts import PromptLibrary, render_chunk_context
from app.services.providers import GenerationParams, JudgeParseError, ProviderError, Providers, clamp_unit

logger = logging.getLogger(__name__)

CANDIDATES_SCHEMA = 'qa-candidates'
CANDIDATES_VERSION = 1


class SynthesisError(HarnessError):
    """Evidence selection could not produce a bundle."""


class ParseError(HarnessError):
    """A completion lacks the Question:/Answer: structure."""


class Style(Enum):
    """Intent styles conditioning evidence selection and prompting"""
    FIND = "find"
    EXPLAIN = "explain"
    SUMMARIZE = "summarize"
    GENERATE = "generate"
    PROVIDE = "provide"


STYLE_ORDER = [Style.FIND, Style.EXPLAIN, Style.SUMMARIZE, Style.GENERATE, Style.PROVIDE]

RUBRIC_FIELDS = ('completeness', 'complementarity', 'coherence', 'task_fitness')

# Hypotheses for the relevance prefilter: premise = chunk text
STYLE_HYPOTHESES = {
    Style.FIND: "This passage states a specific fact, figure, name, or date.",
    Style.EXPLAIN: "This passage explains how or why something works, or how two things differ.",
    Style.SUMMARIZE: "This passage describes the key points of a topic, program, or strategy.",
    Style.GENERATE: "This passage lists several capabilities, priorities, or requirements.",
    Style.PROVIDE: "This passage reports a specific amount, number, percentage, or date.",
}

STYLE_DESCRIPTIONS = {
    Style.FIND: "a factual question answered by a short exact phrase (a date, number, name or location)",
    Style.EXPLAIN: "a question asking how or why, answered by a grounded 2-3 sentence explanation",
    Style.SUMMARIZE: "a question asking for an overview, answered by a concise 2-4 sentence summary",
    Style.GENERATE: "a question asking for a list, answered by a numbered list of 3-6 grounded items",
    Style.PROVIDE: "a question asking for quantitative data, answered by the exact figure with units",
}

# (bundle size, prefilter K, combination cap)
EVIDENCE_BUDGETS = {
    Style.FIND: (1, 20, 6),
    Style.PROVIDE: (2, 30, 7),
    Style.EXPLAIN: (4, 60, 8),
    Style.SUMMARIZE: (4, 40, 8),
    Style.GENERATE: (5, 50, 7),
}

DEFAULT_METRIC_WEIGHTS = {
    Style.FIND: {'span_f1': 0.35, 'numeric_consistency': 0.15, 'des': 0.25,
                 'qa_relevancy': 0.10, 'context_precision': 0.10, 'context_recall': 0.05},
    Style.PROVIDE: {'numeric_consistency': 0.30, 'span_f1': 0.25, 'des': 0.25,
                    'qa_relevancy': 0.10, 'context_precision': 0.10},
    Style.EXPLAIN: {'des': 0.35, 'context_recall': 0.25, 'context_precision': 0.20, 'qa_relevancy': 0.20},
    Style.SUMMARIZE: {'des': 0.30, 'context_recall': 0.30, 'context_precision': 0.20, 'qa_relevancy': 0.20},
    Style.GENERATE: {'des': 0.30, 'context_recall': 0.30, 'context_precision': 0.25, 'qa_relevancy': 0.15},
}


def parse_style(value) -> Style:
    if isinstance(value, Style):
        return value
    try:
        return Style(str(value).lower())
    except ValueError as e:
        raise SynthesisError(f"unknown style '{value}'") from e


@dataclass
class StylePolicy:
    """Evidence budget, weights and acceptance threshold of one style."""
    style: Style
    bundle_size: int
    prefilter_k: int
    max_combos: int
    rubric_weights: Dict[str, float] = field(default_factory=lambda: {name: 0.25 for name in RUBRIC_FIELDS})
    metric_weights: Dict[str, float] = field(default_factory=dict)
    threshold: float = 0.75
    quota: int = 5
    min_chunks: int = 2
    min_citations: int = 2

    def __post_init__(self):
        problems = []
        if self.bundle_size < 1:
            problems.append("bundle_size must be >= 1")
        if self.prefilter_k < self.bundle_size:
            problems.append("prefilter_k must be >= bundle_size")
        if self.max_combos < 1:
            problems.append("max_combos must be >= 1")
        if any(w < 0 for w in self.rubric_weights.values()) or any(w < 0 for w in self.metric_weights.values()):
            problems.append("weights must be >= 0")
        if self.quota < 0:
            problems.append("quota must be >= 0")
        if problems:
            raise SynthesisError(f"invalid policy for {self.style.value}: {'; '.join(problems)}")

    @property
    def multi_chunk(self) -> bool:
        return self.bundle_size >= 2

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['style'] = self.style.value
        return data


def default_policy(style: Style, quota: int = 5) -> StylePolicy:
    bundle_size, prefilter_k, max_combos = EVIDENCE_BUDGETS[style]
    return StylePolicy(style=style, bundle_size=bundle_size, prefilter_k=prefilter_k, max_combos=max_combos,
                       metric_weights=dict(DEFAULT_METRIC_WEIGHTS[style]), quota=quota)


def build_policies(overrides: Optional[Dict[str, Dict]] = None, quotas: Optional[Dict[str, int]] = None,
                   default_quota: int = 5) -> Dict[Style, StylePolicy]:
    """
    Default policies for all five styles with per-style overrides applied.

    Args:
        overrides: style name -> {field: value}
        quotas: style name -> quota
        default_quota: quota for styles not in quotas

    Returns:
        Policies keyed by style, in canonical style order
    """
    overrides = overrides or {}
    quotas = quotas or {}
    unknown = set(overrides) | set(quotas)
    unknown -= {s.value for s in Style}
    if unknown:
        raise SynthesisError(f"unknown styles in policy config: {sorted(unknown)}")
    policies = {}
    for style in STYLE_ORDER:
        policy = default_policy(style, quota=int(quotas.get(style.value, default_quota)))
        values = policy.to_dict()
        values.update(overrides.get(style.value, {}))
        values['style'] = style
        policies[style] = StylePolicy(**values)
    return policies


@dataclass
class EvidenceBundle:
    """Ordered chunk ids with the judge's rubric scores."""
    chunk_ids: List[str]
    rubric_scores: Dict[str, float] = field(default_factory=dict)
    g_score: float = 0.0

    def __post_init__(self):
        if len(set(self.chunk_ids)) != len(self.chunk_ids):
            raise SynthesisError(f"bundle repeats a chunk: {self.chunk_ids}")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'EvidenceBundle':
        return cls(list(data['chunk_ids']), dict(data.get('rubric_scores', {})), data.get('g_score', 0.0))


@dataclass
class QACandidate:
    """A generated question/answer pair with its evidence."""
    candidate_id: str
    question: str
    answer: str
    style: Style
    bundle: EvidenceBundle
    seed_doc_id: str
    raw_completion: str
    cited_chunks: List[str] = field(default_factory=list)
    attempt: int = 0
    duration_seconds: float = 0.0

    @property
    def evidence_chunk_ids(self) -> List[str]:
        return self.bundle.chunk_ids

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['style'] = self.style.value
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'QACandidate':
        return cls(
            candidate_id=data['candidate_id'],
            question=data['question'],
            answer=data['answer'],
            style=parse_style(data['style']),
            bundle=EvidenceBundle.from_dict(data['bundle']),
            seed_doc_id=data['seed_doc_id'],
            raw_completion=data.get('raw_completion', ''),
            cited_chunks=list(data.get('cited_chunks', [])),
            attempt=data.get('attempt', 0),
            duration_seconds=data.get('duration_seconds', 0.0),
        )


# ---------------------------------------------------------------------------
# Evidence selection
# ---------------------------------------------------------------------------

def nli_prefilter(seed_chunks: Sequence[Chunk], policy: StylePolicy, providers: Providers,
                  k: Optional[int] = None) -> List[Tuple[Chunk, float]]:
    """
    Rank a seed document's chunks by NLI relevance to the style hypothesis.

    Args:
        seed_chunks: Chunks of one seed document
        policy: Style policy (supplies the hypothesis and K)
        providers: Model services
        k: Overrides policy.prefilter_k

    Returns:
        Up to K (chunk, entail - contradict) pairs, best first, ties by chunk_id
    """
    doc_ids = {c.doc_id for c in seed_chunks}
    if len(doc_ids) > 1:
        raise SynthesisError(f"prefilter pool spans {len(doc_ids)} documents; it must come from one seed document")
    k = policy.prefilter_k if k is None else k
    hypothesis = STYLE_HYPOTHESES[policy.style]
    scored = []
    for chunk in seed_chunks:
        try:
            verdict = providers.nli(chunk.text, hypothesis)
        except ProviderError as e:
            logger.warning(f"Prefilter dropped chunk {chunk.chunk_id}: {e}")
            continue
        scored.append((chunk, verdict.relevance))
    scored.sort(key=lambda pair: (-pair[1], pair[0].chunk_id))
    return scored[:k]


def enumerate_bundles(ranked_chunk_ids: Sequence[str], bundle_size: int, max_combos: int) -> List[Tuple[str, ...]]:
    """
    Combinations of bundle_size chunks, best-ranked chunks combined first.

    Combinations are produced in lexicographic order over prefilter rank and
    capped at max_combos. A pool smaller than bundle_size yields nothing.
    """
    if bundle_size < 1 or len(ranked_chunk_ids) < bundle_size:
        return []
    return list(itertools.islice(itertools.combinations(ranked_chunk_ids, bundle_size), max_combos))


def score_bundle(combination: Sequence[str], policy: StylePolicy, store: ChunkStore, providers: Providers,
                 library: PromptLibrary, role: str = 'judge') -> EvidenceBundle:
    """Rate one combination with the rubric judge; g_score is the weighted rubric sum."""
    texts = [store.require(chunk_id).text for chunk_id in combination]
    prompt = library.render(
        'bundle_judge.j2',
        style=policy.style.value,
        style_description=STYLE_DESCRIPTIONS[policy.style],
        context=render_chunk_context(texts),
    )
    verdict = providers.judge(prompt, RUBRIC_FIELDS, role=role, score_field=None)
    scores = {}
    for name in RUBRIC_FIELDS:
        try:
            value, clamped = clamp_unit(verdict.fields[name])
        except (TypeError, ValueError) as e:
            raise JudgeParseError(f"rubric field '{name}' is not numeric") from e
        if clamped:
            logger.warning(f"Rubric score {name}={verdict.fields[name]} clamped to {value}")
        scores[name] = value
    g_score = sum(policy.rubric_weights.get(name, 0.0) * scores[name] for name in RUBRIC_FIELDS)
    return EvidenceBundle(list(combination), scores, g_score)


def bundle_sort_key(bundle: EvidenceBundle):
    """Best g_score first; ties go to the lexicographically smallest chunk_id list."""
    return (-bundle.g_score, sorted(bundle.chunk_ids))


def rank_bundles(seed_chunks: Sequence[Chunk], policy: StylePolicy, store: ChunkStore, providers: Providers,
                 library: PromptLibrary, role: str = 'judge',
                 report: Optional[FailureReport] = None) -> List[EvidenceBundle]:
    """Prefilter, enumerate and score; every scoreable bundle, best first."""
    ranked = nli_prefilter(seed_chunks, policy, providers)
    if len(ranked) < policy.bundle_size:
        raise SynthesisError(
            f"only {len(ranked)} candidate chunks for {policy.style.value} (needs {policy.bundle_size})"
        )
    combinations = enumerate_bundles([chunk.chunk_id for chunk, _ in ranked], policy.bundle_size, policy.max_combos)
    bundles = []
    for combination in combinations:
        try:
            bundles.append(score_bundle(combination, policy, store, providers, library, role))
        except ProviderError as e:
            logger.warning(f"Discarded bundle {list(combination)}: {e}")
            if report is not None:
                report.add('bundle-unscorable', str(e), style=policy.style.value)
    bundles.sort(key=bundle_sort_key)
    return bundles


def select_evidence(seed_chunks: Sequence[Chunk], policy: StylePolicy, store: ChunkStore, providers: Providers,
                    library: PromptLibrary, role: str = 'judge') -> EvidenceBundle:
    """
    The highest-scoring bundle for a style.

    Returns:
        argmax of g_score over the enumerated combinations
    """
    bundles = rank_bundles(seed_chunks, policy, store, providers, library, role)
    if not bundles:
        raise SynthesisError(f"no scoreable bundle for style {policy.style.value}")
    return bundles[0]


# ---------------------------------------------------------------------------
# Prompting and parsing
# ---------------------------------------------------------------------------

def render_prompt(style: Style, bundle: EvidenceBundle, store: ChunkStore, library: PromptLibrary,
                  policy: Optional[StylePolicy] = None) -> str:
    """
    Style template filled with numbered [Chunk i] sections.

    The multi-chunk directive block is appended for bundles of two or more chunks.
    """
    texts = [store.require(chunk_id).text for chunk_id in bundle.chunk_ids]
    prompt = library.render(f"styles/{style.value}.j2", context=render_chunk_context(texts))
    if len(bundle.chunk_ids) >= 2:
        min_chunks = policy.min_chunks if policy else 2
        min_citations = policy.min_citations if policy else 2
        prompt = prompt + "\n\n" + library.render('multi_chunk.j2', min_chunks=min_chunks,
                                                   min_citations=min_citations)
    return prompt


_QUESTION_LINE = re.compile(r'^[ \t*#]*Question[ \t]*\**[ \t]*:[ \t]*\**(.*)$', re.MULTILINE | re.IGNORECASE)
_ANSWER_MARK = re.compile(r'^[ \t*#]*Answer[ \t]*\**[ \t]*:[ \t]*\**', re.MULTILINE | re.IGNORECASE)


def parse_qa(completion: str) -> Tuple[str, str]:
    """
    Split a completion into (question, answer).

    The question is the rest of the first "Question:" line; the answer is
    everything after the following "Answer:" marker, multi-line lists included.
    """
    question_match = _QUESTION_LINE.search(completion)
    if not question_match:
        raise ParseError("completion has no 'Question:' marker")
    answer_match = _ANSWER_MARK.search(completion, question_match.end())
    if not answer_match:
        # Single-line form "Question: ... Answer: ..."
        inline = re.search(r'\bAnswer\s*:', question_match.group(1))
        if not inline:
            raise ParseError("completion has no 'Answer:' marker")
        question = question_match.group(1)[:inline.start()].strip()
        answer = question_match.group(1)[inline.end():] + completion[question_match.end():]
    else:
        question = question_match.group(1).strip()
        answer = completion[answer_match.end():]
    question = question.strip().strip('*').strip()
    answer = answer.strip()
    if not question:
        raise ParseError("empty question")
    if not answer:
        raise ParseError("empty answer")
    return question, answer


_CHUNK_MENTION = re.compile(r'\[?\bChunk\s+(\d+)\]?', re.IGNORECASE)


def _ngrams(tokens: List[str], n: int) -> Set[Tuple[str, ...]]:
    return {tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)}


def detect_citations(answer: str, bundle_chunk_ids: Sequence[str], chunk_texts: Sequence[str],
                     min_overlap_tokens: int = 6) -> List[str]:
    """
    Bundle chunks an answer cites.

    A chunk counts as cited when the answer mentions its number ("Chunk 2",
    "[Chunk 2]") or shares a verbatim run of at least min_overlap_tokens tokens
    with it. Result keeps bundle order.
    """
    cited = set()
    for match in _CHUNK_MENTION.finditer(answer):
        number = int(match.group(1))
        if 1 <= number <= len(bundle_chunk_ids):
            cited.add(bundle_chunk_ids[number - 1])
    answer_grams = _ngrams(lexical_terms(answer), min_overlap_tokens)
    if answer_grams:
        for chunk_id, text in zip(bundle_chunk_ids, chunk_texts):
            if chunk_id not in cited and answer_grams & _ngrams(lexical_terms(text), min_overlap_tokens):
                cited.add(chunk_id)
    return [chunk_id for chunk_id in bundle_chunk_ids if chunk_id in cited]


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _candidate_id(doc_id: str, style: Style, attempt: int) -> str:
    return hashlib.sha1(f"{doc_id}:{style.value}:{attempt}".encode('utf-8')).hexdigest()[:16]


def bundle_judge_role(providers: Providers) -> str:
    """The local scorer judges bundles when one is configured."""
    return 'scorer' if providers.has_role('scorer') else 'judge'


def generate_for_style(seed_chunks: Sequence[Chunk], policy: StylePolicy, target_per_style: int, store: ChunkStore,
                       providers: Providers, library: PromptLibrary,
                       params: GenerationParams = GenerationParams(),
                       seed: int = 0) -> Tuple[List[QACandidate], FailureReport]:
    """Over-generate 2 x target candidates for one (seed document, style) pair."""
    report = FailureReport('synthesis')
    if not seed_chunks:
        return [], report
    doc_id = seed_chunks[0].doc_id
    style = policy.style
    try:
        bundles = rank_bundles(seed_chunks, policy, store, providers, library, bundle_judge_role(providers), report)
    except SynthesisError as e:
        logger.warning(f"Skipping {style.value} for {doc_id}: {e}")
        report.add('infeasible-budget', str(e), doc_id=doc_id, style=style.value)
        return [], report
    if not bundles:
        logger.warning(f"Skipping {style.value} for {doc_id}: no scoreable bundle")
        report.add('no-scoreable-bundle', '', doc_id=doc_id, style=style.value)
        return [], report

    candidates = []
    attempts = 2 * target_per_style
    for attempt in range(attempts):
        # Attempt i writes from the i-th best bundle so over-generation varies its evidence
        bundle = bundles[attempt % len(bundles)]
        prompt = render_prompt(style, bundle, store, library, policy)
        attempt_params = GenerationParams(params.temperature, params.max_new_tokens, params.model_name,
                                          seed=seed + attempt)
        try:
            completion, elapsed = providers.chat_timed(prompt, attempt_params)
            question, answer = parse_qa(completion)
        except ParseError as e:
            report.add('parse-failure', str(e), doc_id=doc_id, style=style.value, attempt=attempt)
            continue
        except ProviderError as e:
            report.add('provider-failure', str(e), doc_id=doc_id, style=style.value, attempt=attempt)
            continue
        texts = [store.require(c).text for c in bundle.chunk_ids]
        candidates.append(QACandidate(
            candidate_id=_candidate_id(doc_id, style, attempt),
            question=question,
            answer=answer,
            style=style,
            bundle=bundle,
            seed_doc_id=doc_id,
            raw_completion=completion,
            cited_chunks=detect_citations(answer, bundle.chunk_ids, texts),
            attempt=attempt,
            duration_seconds=elapsed,
        ))
    if report.total:
        logger.warning(f"{doc_id}/{style.value}: {len(candidates)} of {attempts} attempts produced candidates")
    return candidates, report


def generate_candidates(seed_chunks: Sequence[Chunk], policies: Dict[Style, StylePolicy], target_per_style: int,
                        store: ChunkStore, providers: Providers, library: PromptLibrary,
                        params: GenerationParams = GenerationParams(), seed: int = 0,
                        max_workers: int = 1) -> Tuple[List[QACandidate], FailureReport]:
    """
    Candidates of every style for one seed document.

    Args:
        seed_chunks: The seed document's chunks; evidence never leaves this pool
        policies: Policy per style
        target_per_style: Final per-style target; 2x as many generations are attempted
        store: Chunk store resolving ids to text
        providers: Model services
        library: Prompt templates
        params: Generator decoding settings
        seed: Base sampling seed
        max_workers: Styles generated concurrently

    Returns:
        (candidates sorted by (doc_id, style, attempt), failure report)
    """
    return generate_corpus_candidates({seed_chunks[0].doc_id: list(seed_chunks)} if seed_chunks else {},
                                      policies, target_per_style, store, providers, library, params, seed,
                                      max_workers)


def generate_corpus_candidates(chunks_by_doc: Dict[str, List[Chunk]], policies: Dict[Style, StylePolicy],
                               target_per_style: int, store: ChunkStore, providers: Providers,
                               library: PromptLibrary, params: GenerationParams = GenerationParams(),
                               seed: int = 0, max_workers: int = 1) -> Tuple[List[QACandidate], FailureReport]:
    """Run generation over every (seed document, style) pair on the worker pool."""
    jobs = [(doc_id, style) for doc_id in sorted(chunks_by_doc) for style in STYLE_ORDER if style in policies]

    def work(job):
        doc_id, style = job
        return generate_for_style(chunks_by_doc[doc_id], policies[style], target_per_style, store,
                                  providers, library, params, seed)

    outcome = run_in_pool(work, jobs, max_workers=max_workers, label='style jobs')
    report = FailureReport('synthesis')
    candidates: List[QACandidate] = []
    for index, result in enumerate(outcome.results):
        if result is None:
            doc_id, style = jobs[index]
            report.add('job-failure', outcome.errors.get(index, ''), doc_id=doc_id, style=style.value)
            continue
        job_candidates, job_report = result
        candidates.extend(job_candidates)
        report.merge(job_report)
    candidates.sort(key=lambda c: (c.seed_doc_id, STYLE_ORDER.index(c.style), c.attempt))
    logger.info(f"Generated {len(candidates)} candidates from {len(chunks_by_doc)} documents; {report.summary()}")
    return candidates, report


def write_candidates(candidates: Sequence[QACandidate], path: str) -> int:
    return write_records(path, CANDIDATES_SCHEMA, CANDIDATES_VERSION, (c.to_dict() for c in candidates))


def read_candidates(path: str) -> List[QACandidate]:
    return [QACandidate.from_dict(data) for data in read_records(path, CANDIDATES_SCHEMA, CANDIDATES_VERSION)]
