"""
Command-line interface for the benchmark pipeline.

Every subcommand reads one YAML run config, consumes the outputs of earlier
stages from the configured output directory and writes its own outputs plus a
manifest next to them.
"""

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import click

from app.background_jobs import run_in_pool
from app.database import write_records
from app.services import FailureReport, HarnessError
from app.services.corpus import (ChunkPolicy, ChunkStore, TokenizerSpec, chunk_corpus, collect_corpus_files,
                                 ingest_path, read_chunk_store, write_chunk_store)
from app.services.datastore import (SplitSpec, build_manifest, dataset_stats, export_sft, mix_with_upsampling,
                                    read_dataset, records_from_annotations, records_from_instances, split,
                                    write_dataset, write_manifest, write_sft, write_stats)
from app.services.evalhub import run_benchmark, run_retrieval_sweep, sweep_markdown, write_report
from app.services.graphgen import (TASK_SCHEMA, TASK_VERSION, build_knn_graph, export_annotation_tasks,
                                   import_annotations, load_bootstrap_pool, read_annotation_tasks,
                                   read_graph_items, run_graph_generation, tasks_from_items, write_graph,
                                   write_graph_items)
from app.services.index import (HybridWeights, Retriever, build_dense, build_lexical, load_dense, load_lexical,
                                save_indexes)
from app.services.prompts import PromptLibrary
from app.services.providers import Providers
from app.services.quality import dedup_and_diversify, evaluate_candidates, select_final, write_audit
from app.services.synthesis import build_policies, generate_corpus_candidates, read_candidates, write_candidates
from config.settings import ConfigError, load_run_config

logger = logging.getLogger(__name__)

# Output layout under RunConfig.output_dir
CHUNKS_FILE = 'chunks.jsonl'
INDEX_DIR = 'indexes'
CANDIDATES_FILE = 'candidates.jsonl'
AUDIT_FILE = 'qc_audit.jsonl'
DATASET_FILE = 'dataset.jsonl'
GRAPH_FILE = 'graph.json'
GRAPH_QA_FILE = 'graph_qa.jsonl'
TASKS_FILE = 'annotation_tasks.jsonl'
ANNOTATED_FILE = 'annotated_tasks.jsonl'
EXPERT_DATASET_FILE = 'expert_dataset.jsonl'
REPORTS_DIR = 'reports'
SFT_DIR = 'sft'
MANIFEST_DIR = 'manifests'


class MissingInputError(HarnessError):
    """An earlier stage's output is not there yet."""


class PipelineContext:
    """Config, templates and lazily opened providers shared by one CLI invocation."""

    def __init__(self, config_path: str, mode: Optional[str] = None, transport=None):
        self.config = load_run_config(config_path, mode)
        self.library = PromptLibrary()
        self.transport = transport
        self._providers: Optional[Providers] = None

    @property
    def providers(self) -> Providers:
        if self._providers is None:
            self._providers = Providers.from_run_config(self.config, transport=self.transport)
        return self._providers

    @property
    def out(self) -> Path:
        return self.config.output_path

    @property
    def spec(self) -> TokenizerSpec:
        return TokenizerSpec(self.config.encoding_name)

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def require(self, name: str, what: str) -> Path:
        path = self.path(name)
        if not path.exists():
            raise MissingInputError(f"missing {what}: {path} (run the earlier stage first)")
        return path

    def store(self) -> ChunkStore:
        return read_chunk_store(str(self.require(CHUNKS_FILE, 'chunk store')))

    def policies(self):
        return build_policies(self.config.style_policies, self.config.quotas,
                              default_quota=self.config.target_per_style)

    def manifest(self, stage: str, extra: Optional[Dict] = None):
        models = self._providers.model_names() if self._providers else {}
        data = build_manifest(self.config, self.library, models, stage, extra)
        write_manifest(data, str(self.path(MANIFEST_DIR, f"{stage}.json")))
        return data

    def finish(self):
        """Persist recorded provider traffic when running in record mode."""
        if self._providers is None or self.config.mode != 'record':
            return
        archive = self.config.fixture_archive or str(self.path('fixtures.jsonl'))
        count = self._providers.export_fixtures(archive)
        click.echo(f"📼 Recorded {count} provider calls to {archive}")


def _fail(kind: str, messages: List[str], code: int):
    click.echo(json.dumps({'error': kind, 'messages': messages}), err=True)
    sys.exit(code)


def harness_command(fn):
    """Map harness failures to the exit-code contract and flush recordings afterwards."""

    @functools.wraps(fn)
    def wrapper(ctx: PipelineContext, *args, **kwargs):
        try:
            result = fn(ctx, *args, **kwargs)
            ctx.finish()
            return result
        except ConfigError as e:
            _fail('ConfigError', e.problems, 2)
        except HarnessError as e:
            logger.error(f"{fn.__name__} failed: {e}")
            ctx.finish()
            _fail(type(e).__name__, [str(e)], 1)
        except (KeyError, FileNotFoundError) as e:
            logger.error(f"{fn.__name__} failed: {e}")
            _fail(type(e).__name__, [str(e)], 1)

    return wrapper


@click.group()
@click.option('--config', 'config_path', required=True, type=click.Path(), help='YAML run config')
@click.option('--mode', type=click.Choice(['live', 'record', 'replay']), default=None,
              help='Override the configured provider mode')
@click.pass_context
def cli(click_ctx, config_path, mode):
    """Build and evaluate style-conditioned grounded QA benchmarks."""
    transport = (click_ctx.obj or {}).get('transport') if isinstance(click_ctx.obj, dict) else None
    try:
        click_ctx.obj = PipelineContext(config_path, mode, transport)
    except ConfigError as e:
        _fail('ConfigError', e.problems, 2)


pass_pipeline = click.make_pass_decorator(PipelineContext)


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

@cli.command()
@pass_pipeline
@harness_command
def ingest(ctx: PipelineContext):
    """Ingest corpus files, chunk them and build the lexical index."""
    config = ctx.config
    files = collect_corpus_files(config.corpus_paths)
    if not files:
        raise MissingInputError(f"no corpus files under {config.corpus_paths}")
    report = FailureReport('ingest')
    outcome = run_in_pool(lambda pair: ingest_path(*pair), files, max_workers=config.max_workers,
                          label='files')
    documents = []
    for index, document in enumerate(outcome.results):
        if document is None:
            report.add('ingest-failure', outcome.errors.get(index, ''), path=files[index][0])
        else:
            documents.append(document)
    if not documents:
        raise MissingInputError("no document could be ingested")

    policy = ChunkPolicy.benchmark_profile() if config.benchmark_chunk_profile else ChunkPolicy(**config.chunk_policy)
    chunks = chunk_corpus(documents, policy, ctx.spec, max_workers=config.max_workers)
    write_chunk_store(chunks, str(ctx.path(CHUNKS_FILE)))
    save_indexes(str(ctx.path(INDEX_DIR)), lexical=build_lexical(chunks))
    ctx.manifest('ingest', {'documents': len(documents), 'chunks': len(chunks), 'failures': report.to_dict()})
    click.echo(f"✅ Ingested {len(documents)} documents into {len(chunks)} chunks; {report.summary()}")


# ---------------------------------------------------------------------------
# Synthesis and quality control
# ---------------------------------------------------------------------------

@cli.command()
@pass_pipeline
@harness_command
def synth(ctx: PipelineContext):
    """Over-generate style-conditioned QA candidates per seed document."""
    store = ctx.store()
    candidates, report = generate_corpus_candidates(
        store.by_doc(), ctx.policies(), ctx.config.target_per_style, store, ctx.providers, ctx.library,
        seed=ctx.config.seeds.get('synthesis', 0), max_workers=ctx.config.max_workers,
    )
    write_candidates(candidates, str(ctx.path(CANDIDATES_FILE)))
    ctx.manifest('synth', {'candidates': len(candidates), 'failures': report.to_dict()})
    click.echo(f"✅ Generated {len(candidates)} candidates; {report.summary()}")


@cli.command()
@pass_pipeline
@harness_command
def qc(ctx: PipelineContext):
    """Gate, score, deduplicate and quota-select candidates into the dataset."""
    store = ctx.store()
    candidates = read_candidates(str(ctx.require(CANDIDATES_FILE, 'candidates')))
    policies = ctx.policies()
    instances = evaluate_candidates(candidates, policies, store, ctx.providers, ctx.config.max_workers)
    accepted = [i for i in instances if i.accepted]
    survivors = dedup_and_diversify(accepted, ctx.providers.embed)
    selected, shortfalls = select_final(survivors, policies)
    write_audit(instances, str(ctx.path(AUDIT_FILE)))

    manifest = ctx.manifest('qc', {'candidates': len(candidates), 'selected': len(selected),
                                   'shortfalls': shortfalls})
    records = records_from_instances(selected, store, manifest['pipeline_version'])
    write_dataset(records, str(ctx.path(DATASET_FILE)), store)
    click.echo(f"✅ Kept {len(records)} of {len(candidates)} candidates")
    for style, missing in shortfalls.items():
        click.echo(f"⚠️  {style}: {missing} short of quota")


# ---------------------------------------------------------------------------
# Graph bootstrap and annotation
# ---------------------------------------------------------------------------

@cli.command('graph-gen')
@pass_pipeline
@harness_command
def graph_gen(ctx: PipelineContext):
    """Generate judged QA from the semantic chunk graph and export annotation tasks."""
    config = ctx.config
    if not config.bootstrap_path:
        raise MissingInputError("graph-gen needs 'bootstrap_path' in the run config")
    store = ctx.store()
    settings = config.graph
    graph = build_knn_graph(store.chunks, ctx.providers.embed, k=int(settings.get('k', 5)),
                            max_distance=float(settings.get('max_distance', 0.35)),
                            max_workers=config.max_workers)
    write_graph(graph, str(ctx.path(GRAPH_FILE)))
    pool = load_bootstrap_pool(config.bootstrap_path)
    items, report = run_graph_generation(
        graph, store, pool, ctx.providers, ctx.library,
        target_per_style=int(settings.get('target_per_style', 20)),
        max_attempts_per_style=int(settings.get('max_attempts_per_style', 60)),
        n_examples=int(settings.get('n_examples', 2)),
        threshold=float(settings.get('threshold', 0.75)),
        seed=config.seeds.get('graph', 0),
        max_workers=config.max_workers,
    )
    write_graph_items(items, str(ctx.path(GRAPH_QA_FILE)))
    accepted = [item for item in items if item.accepted]
    paths = export_annotation_tasks(tasks_from_items(accepted, store), str(ctx.path(TASKS_FILE)))
    ctx.manifest('graph-gen', {'graph': graph.statistics(), 'judged': len(items), 'accepted': len(accepted),
                               'failures': report.to_dict()})
    click.echo(f"✅ {len(accepted)} of {len(items)} graph QA pairs accepted; tasks at {paths['csv']}")


@cli.command('annotate-export')
@pass_pipeline
@harness_command
def annotate_export(ctx: PipelineContext):
    """Re-export annotation tasks from the accepted graph QA pairs."""
    store = ctx.store()
    items = [item for item in read_graph_items(str(ctx.require(GRAPH_QA_FILE, 'graph QA pairs'))) if item.accepted]
    paths = export_annotation_tasks(tasks_from_items(items, store), str(ctx.path(TASKS_FILE)))
    click.echo(f"✅ Exported {len(items)} tasks to {paths['jsonl']} and {paths['csv']}")


@cli.command('annotate-import')
@click.argument('annotated', type=click.Path())
@pass_pipeline
@harness_command
def annotate_import(ctx: PipelineContext, annotated: str):
    """Attach expert answers from an annotated JSONL or CSV file."""
    if not Path(annotated).exists():
        raise MissingInputError(f"missing annotated file: {annotated}")
    store = ctx.store()
    exported = read_annotation_tasks(str(ctx.require(TASKS_FILE, 'exported annotation tasks')))
    tasks = import_annotations(annotated, exported)
    write_records(str(ctx.path(ANNOTATED_FILE)), TASK_SCHEMA, TASK_VERSION, (t.to_dict() for t in tasks))
    manifest = ctx.manifest('annotate-import', {'tasks': len(tasks)})
    records = records_from_annotations(tasks, store, manifest['pipeline_version'])
    write_dataset(records, str(ctx.path(EXPERT_DATASET_FILE)), store)
    invalid = sum(1 for t in tasks if t.validity_flag is False)
    click.echo(f"✅ {len(records)} expert records; {invalid} tasks flagged invalid")


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------

def build_retriever(ctx: PipelineContext, kind: str, store: ChunkStore) -> Retriever:
    """Load (or build and save) the indexes a retriever kind needs."""
    index_dir = str(ctx.path(INDEX_DIR))
    settings = ctx.config.retriever
    weights = HybridWeights(float(settings.get('dense_weight', 0.7)), float(settings.get('lexical_weight', 0.3)))
    lexical = dense = None
    if kind in ('bm25', 'hybrid'):
        lexical = load_lexical(index_dir)
        if lexical is None:
            lexical = build_lexical(store.chunks)
            save_indexes(index_dir, lexical=lexical)
    if kind in ('dense', 'hybrid'):
        dense = load_dense(index_dir)
        if dense is None:
            dense = build_dense(store.chunks, ctx.providers.embed)
            save_indexes(index_dir, dense=dense)
    embedder = ctx.providers.embed if kind in ('dense', 'hybrid') else None
    return Retriever(kind, store, lexical=lexical, dense=dense, embedder=embedder, weights=weights)


def _dataset(ctx: PipelineContext, dataset: Optional[str], store: ChunkStore):
    path = Path(dataset) if dataset else ctx.require(DATASET_FILE, 'dataset')
    if not path.exists():
        raise MissingInputError(f"missing dataset: {path}")
    return read_dataset(str(path), store)


@cli.command('bench-retrieval')
@click.option('--dataset', type=click.Path(), default=None, help='Dataset file (default: the qc output)')
@pass_pipeline
@harness_command
def bench_retrieval(ctx: PipelineContext, dataset: Optional[str]):
    """Hit@k / Recall@k sweep for every configured retriever."""
    store = ctx.store()
    records = _dataset(ctx, dataset, store)
    retrievers = {kind: build_retriever(ctx, kind, store) for kind in ctx.config.sweep_retrievers}
    rows = run_retrieval_sweep(records, retrievers, ctx.config.k_sweep)
    reports = ctx.path(REPORTS_DIR)
    write_records(str(reports / 'retrieval_sweep.jsonl'), 'retrieval-sweep', 1, rows)
    markdown = sweep_markdown(rows, ctx.library)
    with open(reports / 'retrieval_sweep.md', 'w', encoding='utf-8', newline='\n') as f:
        f.write(markdown)
    ctx.manifest('bench-retrieval', {'retrievers': sorted(retrievers), 'k_sweep': list(ctx.config.k_sweep)})
    click.echo(markdown)


@cli.command('bench-qa')
@click.option('--dataset', type=click.Path(), default=None, help='Dataset file (default: the qc output)')
@click.option('--retriever', 'kind', type=click.Choice(['bm25', 'dense', 'hybrid', 'oracle', 'none']),
              default=None, help='Retriever kind; "none" answers without context')
@click.option('--k', type=int, default=None, help='Retrieval depth')
@click.option('--metrics', default=None, help='Comma-separated metric set')
@pass_pipeline
@harness_command
def bench_qa(ctx: PipelineContext, dataset: Optional[str], kind: Optional[str], k: Optional[int],
             metrics: Optional[str]):
    """Answer every question from retrieved context and score the answers."""
    store = ctx.store()
    records = _dataset(ctx, dataset, store)
    kind = kind or ctx.config.retriever.get('kind', 'hybrid')
    k = k or int(ctx.config.retriever.get('k', 3))
    metric_set = [m.strip() for m in metrics.split(',')] if metrics else list(ctx.config.metrics)
    retriever = None if kind == 'none' else build_retriever(ctx, kind, store)
    report = run_benchmark(records, store, retriever, ctx.providers, ctx.library, k=k, metrics=metric_set,
                           external=ctx.config.external_metrics, max_workers=ctx.config.max_workers)
    paths = write_report(report, str(ctx.path(REPORTS_DIR)), f"bench_qa_{kind}", ctx.library)
    ctx.manifest(f"bench-qa-{kind}", {'report': report.manifest, 'counts': report.counts})
    with open(paths['markdown'], 'r', encoding='utf-8') as f:
        click.echo(f.read())


# ---------------------------------------------------------------------------
# Dataset outputs
# ---------------------------------------------------------------------------

@cli.command('export-sft')
@pass_pipeline
@harness_command
def export_sft_cmd(ctx: PipelineContext):
    """Split the dataset and write SFT files, mixing in expert data when present."""
    config = ctx.config
    store = ctx.store()
    records = _dataset(ctx, None, store)
    spec = SplitSpec(float(config.split.get('ratio', 0.9)), config.seeds.get('split', 0),
                     bool(config.split.get('stratify_by_style', True)))
    train, evaluation = split(records, spec)
    write_dataset(train, str(ctx.path('dataset_train.jsonl')), store)
    write_dataset(evaluation, str(ctx.path('dataset_eval.jsonl')), store)

    train_examples = export_sft(train, store, ctx.library)
    write_sft(train_examples, str(ctx.path(SFT_DIR, 'train.jsonl')))
    write_sft(export_sft(evaluation, store, ctx.library), str(ctx.path(SFT_DIR, 'eval.jsonl')))
    extra = {'train': len(train), 'eval': len(evaluation)}

    expert_path = ctx.path(EXPERT_DATASET_FILE)
    if expert_path.exists() and config.synth_fraction < 1:
        manual = export_sft(read_dataset(str(expert_path), store), store, ctx.library)
        mixed = mix_with_upsampling(train_examples, manual, config.synth_fraction, config.seeds.get('mix', 0))
        write_sft(mixed, str(ctx.path(SFT_DIR, 'train_mixed.jsonl')))
        extra['mixed'] = len(mixed)
    ctx.manifest('export-sft', extra)
    click.echo(f"✅ SFT export: {extra}")


@cli.command()
@click.option('--dataset', type=click.Path(), default=None, help='Dataset file (default: the qc output)')
@pass_pipeline
@harness_command
def stats(ctx: PipelineContext, dataset: Optional[str]):
    """Per-style dataset statistics as Markdown and CSV."""
    store = ctx.store()
    records = _dataset(ctx, dataset, store)
    table = dataset_stats(records, ctx.spec)
    paths = write_stats(table, str(ctx.out), ctx.library)
    with open(paths['markdown'], 'r', encoding='utf-8') as f:
        click.echo(f.read())


# ---------------------------------------------------------------------------
# Fixture archives
# ---------------------------------------------------------------------------

@cli.command('cache-export')
@click.argument('archive', type=click.Path())
@pass_pipeline
@harness_command
def cache_export(ctx: PipelineContext, archive: str):
    """Write every cached provider call to a fixture archive."""
    count = ctx.providers.export_fixtures(archive)
    click.echo(f"✅ Exported {count} provider calls to {archive}")


@cli.command('cache-import')
@click.argument('archive', type=click.Path(exists=True))
@pass_pipeline
@harness_command
def cache_import(ctx: PipelineContext, archive: str):
    """Load a fixture archive into the provider cache."""
    added = ctx.providers.cache.import_archive(archive)
    click.echo(f"✅ Imported {added} provider calls from {archive}")


def main():
    cli(obj={})
