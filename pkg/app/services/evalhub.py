"""
Evaluation Hub

Scores retrievers (Hit@k, Recall@k), end-to-end answers (token F1, ROUGE-L,
BLEU, optional learned metrics) and keypoint-level faithfulness diagnostics,
then aggregates micro-averages overall and per style.
"""

import hashlib
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set

from app.background_jobs import run_in_pool
from app.database import canonical_json, write_records
from app.services import HarnessError
from app.services.corpus import ChunkStore
from app.services.index import Retriever, evidence_ids
from app.services.prompts import PromptLibrary, render_answer_prompt, render_markdown_table
from app.services.providers import GenerationParams, ProviderError, Providers

logger = logging.getLogger(__name__)

REPORT_SCHEMA = 'eval-report'
REPORT_VERSION = 1
KEYPOINT_CLASSES = ('complete', 'irrelevant', 'hallucinated')
EXTERNAL_KINDS = ('bleurt', 'bertscore')
ANSWER_METRICS = ('token_f1', 'rouge_l', 'bleu')
RAGEVAL_COLUMNS = ('rageval_comp', 'rageval_hall', 'rageval_irr')
ROUGE_L_BETA = 1.2


class MetricError(HarnessError):
    """A metric was asked to score an undefined input."""


# ---------------------------------------------------------------------------
# Text normalization (SQuAD convention)
# ---------------------------------------------------------------------------

_ARTICLES = re.compile(r'\b(a|an|the)\b')
_PUNCT = re.compile(r'[^\w\s]')


def normalize_tokens(text: str) -> List[str]:
    """Lowercase, drop punctuation and English articles, split on whitespace."""
    text = _PUNCT.sub('', text.lower())
    text = _ARTICLES.sub(' ', text)
    return text.split()


def token_f1_from_tokens(prediction: Sequence[str], reference: Sequence[str]) -> float:
    if not prediction and not reference:
        return 1.0
    if not prediction or not reference:
        return 0.0
    common = Counter(prediction) & Counter(reference)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(prediction)
    recall = same / len(reference)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, reference: str) -> float:
    """Bag-of-token F1 after normalization. Symmetric."""
    return token_f1_from_tokens(normalize_tokens(prediction), normalize_tokens(reference))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, start=1):
            if token == other:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(prediction: str, reference: str, beta: float = ROUGE_L_BETA) -> float:
    """
    LCS F-measure over normalized tokens.

    F = (1 + beta^2) P R / (R + beta^2 P); beta > 1 weights recall over
    precision, so swapping prediction and reference changes the score.
    """
    pred = normalize_tokens(prediction)
    ref = normalize_tokens(reference)
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    lcs = lcs_length(pred, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(pred)
    recall = lcs / len(ref)
    beta_sq = beta * beta
    return (1 + beta_sq) * precision * recall / (recall + beta_sq * precision)


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(prediction: str, reference: str, max_order: int = 4) -> float:
    """
    Sentence-level BLEU-4.

    Unigram precision is unsmoothed; orders 2-4 use add-one smoothing. The
    brevity penalty applies when the prediction is shorter than the reference.
    """
    pred = normalize_tokens(prediction)
    ref = normalize_tokens(reference)
    if not pred:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_order + 1):
        pred_counts = _ngram_counts(pred, n)
        ref_counts = _ngram_counts(ref, n)
        matches = sum((pred_counts & ref_counts).values())
        total = max(0, len(pred) - n + 1)
        if n == 1:
            if matches == 0:
                return 0.0
            precision = matches / total
        else:
            precision = (matches + 1) / (total + 1)
        log_sum += math.log(precision)
    brevity = 1.0 if len(pred) > len(ref) else math.exp(1 - len(ref) / len(pred))
    return brevity * math.exp(log_sum / max_order)


def corpus_bleu(predictions: Sequence[str], references: Sequence[str]) -> float:
    """Mean of sentence scores."""
    if not predictions:
        return 0.0
    return sum(bleu(p, r) for p, r in zip(predictions, references)) / len(predictions)


# ---------------------------------------------------------------------------
# Retrieval metrics
# ---------------------------------------------------------------------------

@dataclass
class RetrievalJudgment:
    """Gold evidence versus a ranked retrieval list."""
    instance_id: str
    gold: Set[str]
    ranked: List[str]
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise MetricError(f"k must be >= 1, got {self.k}")
        if not self.gold:
            raise MetricError(f"instance {self.instance_id} has an empty gold set")


def hit_at_k(judgment: RetrievalJudgment) -> int:
    """1 when any of the top-k ids is gold."""
    return int(any(chunk_id in judgment.gold for chunk_id in judgment.ranked[:judgment.k]))


def recall_at_k(judgment: RetrievalJudgment) -> float:
    """Fraction of gold ids found in the top k; repeats count once."""
    return len(set(judgment.ranked[:judgment.k]) & judgment.gold) / len(judgment.gold)


def micro_average(values: Iterable[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return sum(present) / len(present)


# ---------------------------------------------------------------------------
# Learned metrics and keypoint diagnostics
# ---------------------------------------------------------------------------

def external_score(prediction: str, reference: str, kind: str, providers: Providers) -> Optional[float]:
    """
    Score with a learned metric endpoint (bleurt or bertscore).

    Returns None when no metric endpoint is configured or it fails.
    """
    if kind not in EXTERNAL_KINDS:
        raise MetricError(f"unknown external metric '{kind}'")
    if not providers.has_role('metric'):
        return None
    try:
        return providers.score_metric(kind, [prediction], [reference])[0]
    except ProviderError as e:
        logger.warning(f"{kind} unavailable: {e}")
        return None


@dataclass
class KeypointAudit:
    """Keypoints of a gold answer and how a prediction treats each."""
    keypoints: List[str]
    labels: List[str]

    def __post_init__(self):
        if not self.keypoints:
            raise MetricError("keypoint audit needs at least one keypoint")
        if len(self.labels) != len(self.keypoints):
            raise MetricError(f"{len(self.keypoints)} keypoints but {len(self.labels)} labels")
        bad = [label for label in self.labels if label not in KEYPOINT_CLASSES]
        if bad:
            raise MetricError(f"unknown keypoint labels {bad}")

    def _share(self, label: str) -> float:
        return self.labels.count(label) / len(self.keypoints)

    @property
    def completeness(self) -> float:
        return self._share('complete')

    @property
    def hallucination(self) -> float:
        return self._share('hallucinated')

    @property
    def irrelevance(self) -> float:
        return self._share('irrelevant')

    def scores(self) -> Dict[str, float]:
        return {'rageval_comp': self.completeness, 'rageval_hall': self.hallucination,
                'rageval_irr': self.irrelevance}


def rageval_diagnostics(question: str, gold_answer: str, prediction: str, providers: Providers,
                        library: PromptLibrary) -> Optional[KeypointAudit]:
    """
    Extract keypoints from the gold answer, then classify each against the prediction.

    Returns:
        KeypointAudit, or None when no keypoints could be extracted
    """
    extraction = providers.judge(library.render('keypoints.j2', question=question, reference=gold_answer),
                                 ['keypoints'], score_field=None)
    keypoints = [str(k).strip() for k in extraction.fields.get('keypoints') or [] if str(k).strip()]
    if not keypoints:
        logger.warning(f"No keypoints extracted for question '{question[:60]}'; skipping diagnostics")
        return None
    classification = providers.judge(
        library.render('keypoint_classify.j2', question=question, keypoints=keypoints, prediction=prediction),
        ['labels'], score_field=None,
    )
    labels = [str(label).strip().lower() for label in classification.fields.get('labels') or []]
    return KeypointAudit(keypoints, labels)


# ---------------------------------------------------------------------------
# Benchmark runs
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-instance scores with micro-averages overall and per style."""
    instances: List[Dict]
    overall: Dict[str, Optional[float]]
    by_style: Dict[str, Dict[str, Optional[float]]]
    columns: List[str]
    counts: Dict[str, int]
    manifest: Dict = field(default_factory=dict)

    def to_summary(self) -> Dict:
        data = asdict(self)
        data.pop('instances')
        return data


def _instance_id(record) -> str:
    return getattr(record, 'instance_id', None) or getattr(record, 'candidate_id', '')


def _style_name(record) -> str:
    style = getattr(record, 'style', '')
    return getattr(style, 'value', style)


def dataset_digest(records: Sequence) -> str:
    payload = canonical_json([[_instance_id(r), r.question, r.answer, evidence_ids(r)] for r in records])
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def _columns(k: int, with_retrieval: bool, metrics: Sequence[str], external: Sequence[str]) -> List[str]:
    columns = []
    if with_retrieval:
        columns += [f"hit@{k}", f"recall@{k}"]
    columns += [m for m in ANSWER_METRICS if m in metrics]
    columns += list(external)
    if 'rageval' in metrics:
        columns += list(RAGEVAL_COLUMNS)
    return columns


def run_benchmark(records: Sequence, store: ChunkStore, retriever: Optional[Retriever], providers: Providers,
                  library: PromptLibrary, k: int = 3, metrics: Sequence[str] = ANSWER_METRICS + ('rageval',),
                  external: Sequence[str] = (), params: GenerationParams = GenerationParams(),
                  max_workers: int = 1) -> EvalReport:
    """
    Answer every question from retrieved context and score the answers.

    Args:
        records: Dataset records (question, answer, style, evidence ids)
        store: Chunk store resolving retrieved ids
        retriever: bm25/dense/hybrid/oracle retriever; None answers closed-book
        providers: Model services (generator, judge, metric)
        library: Prompt templates
        k: Retrieval depth
        metrics: Any of token_f1, rouge_l, bleu, rageval
        external: Learned metrics to request (bleurt, bertscore)
        params: Generator decoding settings
        max_workers: Instances scored concurrently

    Returns:
        EvalReport ordered by instance_id
    """
    unknown = set(metrics) - set(ANSWER_METRICS) - {'rageval'}
    if unknown:
        raise MetricError(f"unknown metrics {sorted(unknown)}")
    with_retrieval = retriever is not None
    columns = _columns(k, with_retrieval, metrics, external)
    skipped_diagnostics = []

    def score(record) -> Dict:
        instance_id = _instance_id(record)
        row: Dict = {'instance_id': instance_id, 'style': _style_name(record)}
        context_ids: List[str] = []
        if with_retrieval:
            hits = retriever.retrieve(record.question, k, instance=record)
            context_ids = [hit.chunk_id for hit in hits]
            judgment = RetrievalJudgment(instance_id, set(evidence_ids(record)), context_ids, k)
            row[f"hit@{k}"] = hit_at_k(judgment)
            row[f"recall@{k}"] = recall_at_k(judgment)
        prompt = render_answer_prompt(library, record.question, [store.require(c).text for c in context_ids])
        prediction = providers.chat(prompt, params)
        row['retrieved'] = context_ids
        row['prediction'] = prediction
        if 'token_f1' in metrics:
            row['token_f1'] = token_f1(prediction, record.answer)
        if 'rouge_l' in metrics:
            row['rouge_l'] = rouge_l(prediction, record.answer)
        if 'bleu' in metrics:
            row['bleu'] = bleu(prediction, record.answer)
        for kind in external:
            row[kind] = external_score(prediction, record.answer, kind, providers)
        if 'rageval' in metrics:
            try:
                audit = rageval_diagnostics(record.question, record.answer, prediction, providers, library)
            except (ProviderError, MetricError) as e:
                logger.warning(f"Diagnostics failed for {instance_id}: {e}")
                audit = None
            if audit is None:
                skipped_diagnostics.append(instance_id)
                row.update({column: None for column in RAGEVAL_COLUMNS})
            else:
                row.update(audit.scores())
                row['keypoints'] = audit.keypoints
                row['keypoint_labels'] = audit.labels
        return row

    ordered = sorted(records, key=_instance_id)
    outcome = run_in_pool(score, ordered, max_workers=max_workers, label='instances')
    rows = [row for row in outcome.results if row is not None]
    for index, error in sorted(outcome.errors.items()):
        logger.warning(f"Excluded {_instance_id(ordered[index])} from averages: {error}")

    overall = {column: micro_average(row.get(column) for row in rows) for column in columns}
    by_style: Dict[str, Dict[str, Optional[float]]] = {}
    for style in sorted({row['style'] for row in rows}):
        style_rows = [row for row in rows if row['style'] == style]
        by_style[style] = {column: micro_average(row.get(column) for row in style_rows) for column in columns}
        by_style[style]['n'] = len(style_rows)

    counts = {'instances': len(ordered), 'evaluated': len(rows), 'failed': len(outcome.errors),
              'diagnostics_skipped': len(skipped_diagnostics)}
    manifest = {
        'retriever': retriever.describe() if retriever else {'kind': 'none'},
        'k': k,
        'generator': {'model': providers.model_names().get('generator'), 'temperature': params.temperature,
                      'max_new_tokens': params.max_new_tokens},
        'dataset_digest': dataset_digest(ordered),
        'answer_template_digest': library.digests().get('answer.j2'),
    }
    logger.info(f"Benchmark evaluated {len(rows)} of {len(ordered)} instances ({len(outcome.errors)} failed)")
    return EvalReport(rows, overall, by_style, columns, counts, manifest)


def run_retrieval_sweep(records: Sequence, retrievers: Dict[str, Retriever],
                        k_values: Sequence[int] = (1, 3, 5, 10)) -> List[Dict]:
    """
    Hit@k and Recall@k micro-averages for every retriever and k.

    Each query is retrieved once at the largest k and truncated for smaller k.

    Returns:
        Rows {retriever, k, style, hit_at_k, recall_at_k, n}; style "all" holds the overall row
    """
    if not k_values:
        raise MetricError("k sweep is empty")
    max_k = max(k_values)
    ordered = sorted(records, key=_instance_id)
    rows = []
    for name in sorted(retrievers):
        retriever = retrievers[name]
        rankings = [[hit.chunk_id for hit in retriever.retrieve(r.question, max_k, instance=r)] for r in ordered]
        for k in sorted(k_values):
            judgments = [RetrievalJudgment(_instance_id(r), set(evidence_ids(r)), ranked, k)
                         for r, ranked in zip(ordered, rankings)]
            groups = {'all': list(range(len(ordered)))}
            for position, record in enumerate(ordered):
                groups.setdefault(_style_name(record), []).append(position)
            for style, positions in groups.items():
                rows.append({
                    'retriever': name,
                    'k': k,
                    'style': style,
                    'hit_at_k': micro_average(hit_at_k(judgments[p]) for p in positions),
                    'recall_at_k': micro_average(recall_at_k(judgments[p]) for p in positions),
                    'n': len(positions),
                })
        logger.info(f"Swept {name} over k={list(sorted(k_values))}")
    return rows


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------

def report_markdown(report: EvalReport, library: PromptLibrary) -> str:
    """Overall table plus a per-style table with the same columns."""
    overall = render_markdown_table(library, ['n'] + report.columns,
                                    [[report.counts['evaluated']] + [report.overall.get(c) for c in report.columns]],
                                    title='Overall')
    style_rows = [[style, values.get('n')] + [values.get(c) for c in report.columns]
                  for style, values in report.by_style.items()]
    by_style = render_markdown_table(library, ['style', 'n'] + report.columns, style_rows, title='By style')
    counts = (f"Evaluated {report.counts['evaluated']} of {report.counts['instances']} instances; "
              f"{report.counts['failed']} failed and were excluded; "
              f"{report.counts.get('diagnostics_skipped', 0)} had no keypoint diagnostics.")
    return f"{overall}\n{by_style}\n{counts}\n"


def write_report(report: EvalReport, directory: str, name: str, library: PromptLibrary) -> Dict[str, str]:
    """Write <name>.jsonl (per instance), <name>.summary.jsonl and <name>.md."""
    base = Path(directory)
    base.mkdir(parents=True, exist_ok=True)
    paths = {
        'instances': str(base / f"{name}.jsonl"),
        'summary': str(base / f"{name}.summary.jsonl"),
        'markdown': str(base / f"{name}.md"),
    }
    write_records(paths['instances'], REPORT_SCHEMA, REPORT_VERSION, report.instances)
    write_records(paths['summary'], f"{REPORT_SCHEMA}-summary", REPORT_VERSION, [report.to_summary()])
    with open(paths['markdown'], 'w', encoding='utf-8', newline='\n') as f:
        f.write(report_markdown(report, library))
    return paths


def sweep_markdown(rows: Sequence[Dict], library: PromptLibrary) -> str:
    overall = [[r['retriever'], r['k'], r['hit_at_k'], r['recall_at_k'], r['n']] for r in rows if r['style'] == 'all']
    per_style = [[r['retriever'], r['k'], r['style'], r['hit_at_k'], r['recall_at_k'], r['n']]
                 for r in rows if r['style'] != 'all']
    return (render_markdown_table(library, ['retriever', 'k', 'Hit@k', 'Recall@k', 'n'], overall,
                                  title='Retrieval sweep')
            + "\n"
            + render_markdown_table(library, ['retriever', 'k', 'style', 'Hit@k', 'Recall@k', 'n'], per_style,
                                    title='By style'))
