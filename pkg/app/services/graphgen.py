"""
Graph-Bootstrapped Generation

Builds a semantic k-NN graph over chunk embeddings, samples style-dependent
contexts from it, writes QA pairs from a few same-style bootstrap examples,
has a judge accept or reject them, and round-trips the survivors through
expert annotation files.
"""

import json
import logging
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.neighbors import NearestNeighbors

from app.background_jobs import run_in_pool
from app.database import read_records, write_records
from app.services import FailureReport, HarnessError
from app.services.corpus import Chunk, ChunkStore
from app.services.prompts import PromptLibrary, render_passages
from app.services.providers import GenerationParams, ProviderError, Providers, extract_json_object
from app.services.synthesis import STYLE_ORDER, Style, parse_style

logger = logging.getLogger(__name__)

# Shape of the graph the defaults were tuned on; shown beside recomputed stats
REFERENCE_GRAPH_SHAPE = {'nodes': 2187, 'edges': 8121, 'mean_out_degree': 3.7, 'std_out_degree': 0.9}

GRAPH_SCHEMA = 'semantic-graph'
GRAPH_VERSION = 1
GRAPH_QA_SCHEMA = 'graph-qa'
GRAPH_QA_VERSION = 1
TASK_SCHEMA = 'annotation-tasks'
TASK_VERSION = 1
TASK_COLUMNS = ['task_id', 'style', 'question', 'context', 'chunk_ids', 'expert_answer', 'validity_flag']

Embedder = Callable[[Sequence[str]], np.ndarray]


class GraphError(HarnessError):
    """Graph construction or graph-based generation failed."""


class AnnotationError(HarnessError):
    """An annotation file does not match the exported tasks."""


# ---------------------------------------------------------------------------
# Semantic graph
# ---------------------------------------------------------------------------

@dataclass
class SemanticGraph:
    """Directed k-NN graph; edges map a node to (neighbor, cosine distance) nearest first."""
    nodes: List[str]
    edges: Dict[str, List[Tuple[str, float]]]
    k: int
    max_distance: float

    def neighbors(self, node: str) -> List[str]:
        return [neighbor for neighbor, _ in self.edges.get(node, [])]

    def edge_set(self) -> set:
        return {(source, target) for source, targets in self.edges.items() for target, _ in targets}

    def statistics(self) -> Dict:
        degrees = np.array([len(self.edges.get(node, [])) for node in self.nodes], dtype=float)
        return {
            'nodes': len(self.nodes),
            'edges': int(degrees.sum()),
            'mean_out_degree': float(degrees.mean()) if len(degrees) else 0.0,
            'std_out_degree': float(degrees.std()) if len(degrees) else 0.0,
            'k': self.k,
            'max_distance': self.max_distance,
            'reference_shape': dict(REFERENCE_GRAPH_SHAPE),
        }

    def to_dict(self) -> Dict:
        return {'nodes': self.nodes, 'k': self.k, 'max_distance': self.max_distance,
                'edges': {node: [[t, d] for t, d in targets] for node, targets in self.edges.items()}}

    @classmethod
    def from_dict(cls, data: Dict) -> 'SemanticGraph':
        edges = {node: [(t, float(d)) for t, d in targets] for node, targets in data['edges'].items()}
        return cls(list(data['nodes']), edges, int(data['k']), float(data['max_distance']))


def build_knn_graph(chunks: Sequence[Chunk], embedder: Embedder, k: int = 5, max_distance: float = 0.35,
                    max_workers: int = 1) -> SemanticGraph:
    """
    Connect every chunk to its k nearest neighbors by cosine distance.

    Self matches are excluded and only edges with distance < max_distance are kept.

    Args:
        chunks: Graph nodes
        embedder: Embeds chunk texts (L2-normalized rows)
        k: Neighbors per node
        max_distance: Exclusive cosine distance cutoff
        max_workers: Parallel jobs for the neighbor search

    Returns:
        SemanticGraph with one node per chunk
    """
    if len(chunks) < 2:
        raise GraphError(f"a k-NN graph needs at least 2 chunks, got {len(chunks)}")
    if k < 1:
        raise GraphError(f"k must be >= 1, got {k}")
    ids = [chunk.chunk_id for chunk in chunks]
    vectors = np.asarray(embedder([chunk.text for chunk in chunks]), dtype=float)

    n_neighbors = min(k + 1, len(ids))
    finder = NearestNeighbors(n_neighbors=n_neighbors, metric='cosine', algorithm='brute', n_jobs=max_workers)
    finder.fit(vectors)
    distances, indices = finder.kneighbors(vectors)

    edges: Dict[str, List[Tuple[str, float]]] = {}
    for row, source in enumerate(ids):
        found = [(float(d), int(j)) for d, j in zip(distances[row], indices[row]) if int(j) != row]
        found.sort(key=lambda pair: (pair[0], ids[pair[1]]))
        edges[source] = [(ids[j], max(0.0, d)) for d, j in found[:k] if d < max_distance]

    graph = SemanticGraph(ids, edges, k, max_distance)
    stats = graph.statistics()
    logger.info(f"Built k-NN graph: {stats['nodes']} nodes, {stats['edges']} edges, "
                f"out-degree {stats['mean_out_degree']:.1f} ± {stats['std_out_degree']:.1f}")
    return graph


def write_graph(graph: SemanticGraph, path: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump({'schema': GRAPH_SCHEMA, 'version': GRAPH_VERSION, 'statistics': graph.statistics(),
                   **graph.to_dict()}, f, sort_keys=True)


def sample_context(graph: SemanticGraph, style: Style, rng_seed: int) -> List[str]:
    """
    A uniformly drawn node, alone for find/provide, with its out-neighbors otherwise.
    """
    style = parse_style(style)
    node = random.Random(rng_seed).choice(sorted(graph.nodes))
    if style in (Style.FIND, Style.PROVIDE):
        return [node]
    return [node] + graph.neighbors(node)


# ---------------------------------------------------------------------------
# In-context generation and judging
# ---------------------------------------------------------------------------

@dataclass
class BootstrapExample:
    question: str
    answer: str
    style: str

    def __post_init__(self):
        self.style = parse_style(self.style).value


def load_bootstrap_pool(path: str) -> List[BootstrapExample]:
    """Read a JSONL file of {question, answer, style}; a schema header line is skipped."""
    if not Path(path).exists():
        raise GraphError(f"bootstrap pool not found: {path}")
    pool = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            data = json.loads(line)
            if 'schema' in data and 'question' not in data:
                continue
            try:
                pool.append(BootstrapExample(data['question'], data['answer'], data['style']))
            except (KeyError, HarnessError) as e:
                raise GraphError(f"{path}:{line_no}: bad bootstrap example ({e})") from e
    logger.info(f"Loaded {len(pool)} bootstrap examples from {path}")
    return pool


def _type_label(style: Style) -> str:
    return style.value.capitalize()


def render_icl_examples(examples: Sequence[BootstrapExample]) -> str:
    return "\n\n".join(f"Example {i}:\nQuestion: {e.question}\nAnswer: {e.answer}"
                       for i, e in enumerate(examples, start=1))


def generate_with_icl(style: Style, context_texts: Sequence[str], bootstrap_pool: Sequence[BootstrapExample],
                      providers: Providers, library: PromptLibrary, n_examples: int = 2, rng_seed: int = 0,
                      params: GenerationParams = GenerationParams()) -> Tuple[str, str]:
    """
    Write one QA pair over numbered passages, guided by same-style examples.

    Examples are drawn without replacement. A completion that does not parse
    to {question, answer} earns one reprompt.

    Returns:
        (question, answer)
    """
    style = parse_style(style)
    same_style = [e for e in bootstrap_pool if e.style == style.value]
    examples = random.Random(rng_seed).sample(same_style, min(n_examples, len(same_style)))
    if len(examples) < n_examples:
        logger.warning(f"Only {len(examples)} bootstrap examples for {style.value}, wanted {n_examples}")
    prompt = library.render('icl_generate.j2', question_type=_type_label(style),
                            examples=render_icl_examples(examples), passages=render_passages(context_texts))
    for attempt in range(2):
        completion = providers.chat(prompt, params)
        try:
            fields = extract_json_object(completion)
            question = str(fields.get('question') or '').strip()
            answer = str(fields.get('answer') or '').strip()
            if question and answer:
                return question, answer
        except ValueError:
            pass
        if attempt == 0:
            logger.warning(f"Unparseable {style.value} generation, reprompting once")
            prompt += ('\n\nYour previous reply could not be parsed. Respond with only a JSON object '
                       'with non-empty "question" and "answer" fields.')
    raise GraphError(f"generation for {style.value} did not parse after one retry")


@dataclass
class JudgeDecision:
    accepted: bool
    score: Optional[float]
    reasoning: str = ''
    reason: str = ''


def judge_qa(question: str, answer: str, context_texts: Sequence[str], style: Style, providers: Providers,
             library: PromptLibrary, threshold: float = 0.75) -> JudgeDecision:
    """Accept iff the judge's score is strictly above threshold; judge failures reject as unscorable."""
    style = parse_style(style)
    prompt = library.render('icl_judge.j2', question_type=_type_label(style),
                            passages=render_passages(context_texts), question=question, answer=answer)
    try:
        verdict = providers.judge(prompt, ['score'], role='judge')
    except ProviderError as e:
        logger.warning(f"Judge failed for '{question[:60]}': {e}")
        return JudgeDecision(False, None, '', 'unscorable')
    reasoning = str(verdict.fields.get('reasoning', ''))
    if verdict.score > threshold:
        return JudgeDecision(True, verdict.score, reasoning)
    return JudgeDecision(False, verdict.score, reasoning, 'below-threshold')


@dataclass
class GraphQAItem:
    """A graph-sampled QA pair and the judge's decision on it."""
    item_id: str
    style: str
    chunk_ids: List[str]
    question: str
    answer: str
    score: Optional[float]
    reasoning: str
    accepted: bool
    reason: str = ''

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'GraphQAItem':
        return cls(**data)


def _attempt(graph: SemanticGraph, store: ChunkStore, pool: Sequence[BootstrapExample], providers: Providers,
             library: PromptLibrary, style: Style, attempt: int, seed: int, n_examples: int, threshold: float,
             params: GenerationParams) -> GraphQAItem:
    rng_seed = seed + 1000 * STYLE_ORDER.index(style) + attempt
    chunk_ids = sample_context(graph, style, rng_seed)
    texts = [store.require(c).text for c in chunk_ids]
    attempt_params = GenerationParams(params.temperature, params.max_new_tokens, params.model_name, seed=rng_seed)
    question, answer = generate_with_icl(style, texts, pool, providers, library, n_examples, rng_seed, attempt_params)
    decision = judge_qa(question, answer, texts, style, providers, library, threshold)
    return GraphQAItem(f"graph-{style.value}-{attempt:04d}", style.value, chunk_ids, question, answer,
                       decision.score, decision.reasoning, decision.accepted, decision.reason)


def run_graph_generation(graph: SemanticGraph, store: ChunkStore, bootstrap_pool: Sequence[BootstrapExample],
                         providers: Providers, library: PromptLibrary, target_per_style: int = 20,
                         max_attempts_per_style: int = 60, n_examples: int = 2, threshold: float = 0.75,
                         seed: int = 23, params: GenerationParams = GenerationParams(),
                         styles: Sequence[Style] = tuple(STYLE_ORDER),
                         max_workers: int = 1) -> Tuple[List[GraphQAItem], FailureReport]:
    """
    Sample, generate and judge until every style has its accepted target or runs out of attempts.

    Each round launches exactly as many attempts as acceptances are still
    missing, so the attempts made never depend on the worker count.

    Returns:
        (every judged item in (style, attempt) order, failure report)
    """
    report = FailureReport('graph-generation')
    items: List[GraphQAItem] = []
    for style in styles:
        accepted = 0
        attempt = 0
        while accepted < target_per_style and attempt < max_attempts_per_style:
            batch = list(range(attempt, min(attempt + target_per_style - accepted, max_attempts_per_style)))
            outcome = run_in_pool(
                lambda i: _attempt(graph, store, bootstrap_pool, providers, library, style, i, seed, n_examples,
                                   threshold, params),
                batch, max_workers=max_workers, label=f"{style.value} attempts")
            for index, item in enumerate(outcome.results):
                if item is None:
                    report.add('generation-failure', outcome.errors.get(index, ''), style=style.value,
                               attempt=batch[index])
                    continue
                if not item.accepted:
                    report.add(item.reason or 'rejected', f"score={item.score}", style=style.value,
                               attempt=batch[index])
                items.append(item)
                accepted += int(item.accepted)
            attempt = batch[-1] + 1
        if accepted < target_per_style:
            logger.warning(f"Graph generation for {style.value}: {accepted} of {target_per_style} accepted "
                           f"after {attempt} attempts")
    total = sum(1 for item in items if item.accepted)
    logger.info(f"Graph generation accepted {total} of {len(items)} judged items")
    return items, report


def write_graph_items(items: Sequence[GraphQAItem], path: str) -> int:
    return write_records(path, GRAPH_QA_SCHEMA, GRAPH_QA_VERSION, (item.to_dict() for item in items))


def read_graph_items(path: str) -> List[GraphQAItem]:
    return [GraphQAItem.from_dict(data) for data in read_records(path, GRAPH_QA_SCHEMA, GRAPH_QA_VERSION)]


# ---------------------------------------------------------------------------
# Expert annotation round trip
# ---------------------------------------------------------------------------

@dataclass
class AnnotationTask:
    """What an expert sees: question and context, never the generated answer."""
    task_id: str
    style: str
    question: str
    context: List[str]
    chunk_ids: List[str]
    expert_answer: Optional[str] = None
    validity_flag: Optional[bool] = None

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'AnnotationTask':
        return cls(**data)


def tasks_from_items(items: Sequence[GraphQAItem], store: ChunkStore) -> List[AnnotationTask]:
    return [AnnotationTask(item.item_id, item.style, item.question,
                           [store.require(c).text for c in item.chunk_ids], list(item.chunk_ids))
            for item in items]


def _csv_path(path: str) -> Path:
    return Path(path).with_suffix('.csv')


def export_annotation_tasks(tasks: Sequence[AnnotationTask], path: str) -> Dict[str, str]:
    """
    Write tasks as JSONL plus a CSV for spreadsheet tools.

    Returns:
        {'jsonl': path, 'csv': path}
    """
    write_records(path, TASK_SCHEMA, TASK_VERSION, (t.to_dict() for t in tasks))
    frame = pd.DataFrame([{
        'task_id': t.task_id,
        'style': t.style,
        'question': t.question,
        'context': "\n\n".join(f"[{i}] {text}" for i, text in enumerate(t.context, start=1)),
        'chunk_ids': ' '.join(t.chunk_ids),
        'expert_answer': '',
        'validity_flag': '',
    } for t in tasks], columns=TASK_COLUMNS)
    csv_path = _csv_path(path)
    frame.to_csv(csv_path, index=False, lineterminator='\n')
    logger.info(f"Exported {len(tasks)} annotation tasks to {path} and {csv_path}")
    return {'jsonl': str(path), 'csv': str(csv_path)}


def read_csv_flexible(file_path: str) -> pd.DataFrame:
    """
    Read an annotation CSV saved by a spreadsheet tool.

    Tries common encodings and delimiters until a table with a task_id column appears.
    """
    encodings = ['utf-8', 'utf-8-sig', 'latin-1', 'cp1252']
    delimiters = [',', ';', '\t']
    for encoding in encodings:
        for delimiter in delimiters:
            try:
                df = pd.read_csv(file_path, encoding=encoding, delimiter=delimiter, dtype=str,
                                 keep_default_na=False)
            except (UnicodeDecodeError, pd.errors.ParserError):
                continue
            if 'task_id' in df.columns:
                logger.info(f"Read annotation CSV with encoding {encoding}, delimiter '{delimiter}'")
                return df
    raise AnnotationError(f"{file_path}: no readable table with a task_id column")


_TRUE = {'true', '1', 'yes', 'y', 'valid'}
_FALSE = {'false', '0', 'no', 'n', 'invalid'}


def parse_flag(value) -> Optional[bool]:
    if value is None or isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if not text:
        return None
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise AnnotationError(f"unreadable validity flag '{value}'")


def _annotated_rows(path: str) -> List[Dict]:
    if Path(path).suffix.lower() == '.csv':
        return read_csv_flexible(path).to_dict('records')
    return read_records(path, TASK_SCHEMA, TASK_VERSION)


def import_annotations(annotated_path: str, exported_tasks: Sequence[AnnotationTask]) -> List[AnnotationTask]:
    """
    Attach expert answers and validity flags to the exported tasks.

    Args:
        annotated_path: Annotated JSONL or CSV
        exported_tasks: The tasks that were handed out

    Returns:
        Every exported task in export order; invalid ones stay with their flag

    Raises:
        AnnotationError: a row names a task that was never exported
    """
    by_id = {task.task_id: AnnotationTask(**{**task.to_dict(), 'expert_answer': None, 'validity_flag': None})
             for task in exported_tasks}
    unknown = []
    for row in _annotated_rows(annotated_path):
        task_id = str(row.get('task_id', '')).strip()
        if task_id not in by_id:
            unknown.append(task_id)
            continue
        task = by_id[task_id]
        answer = row.get('expert_answer')
        task.expert_answer = str(answer).strip() if answer not in (None, '') else None
        task.validity_flag = parse_flag(row.get('validity_flag'))
        if task.validity_flag is None and task.expert_answer:
            task.validity_flag = True
    if unknown:
        raise AnnotationError(f"annotations reference unexported tasks: {sorted(unknown)[:10]}")
    tasks = [by_id[task.task_id] for task in exported_tasks]
    valid = sum(1 for t in tasks if t.validity_flag and t.expert_answer)
    logger.info(f"Imported annotations: {valid} of {len(tasks)} tasks answered and valid")
    return tasks


def read_annotation_tasks(path: str) -> List[AnnotationTask]:
    return [AnnotationTask.from_dict(data) for data in read_records(path, TASK_SCHEMA, TASK_VERSION)]
