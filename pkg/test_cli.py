"""
End-to-end CLI tests against the fake model services.

The recorded pipeline runs once per module; the replay checks then rebuild
the same outputs from the fixture archive alone.
"""

import json
from collections import Counter

import pandas as pd
import pytest
from click.testing import CliRunner

from app.cli import cli
from app.database import write_records
from app.services.datastore import read_dataset
from app.services.graphgen import read_annotation_tasks
from app.services.synthesis import read_candidates
from conftest import FakeTransport, RefusingTransport, write_fixture_corpus, write_run_config

STAGES = ['ingest', 'synth', 'qc', 'bench-qa']


def invoke(config, *args, transport=None):
    runner = CliRunner(mix_stderr=False)
    return runner.invoke(cli, ['--config', str(config), *args], obj={'transport': transport or FakeTransport()})


def run_ok(config, *args, transport=None):
    result = invoke(config, *args, transport=transport)
    assert result.exit_code == 0, (args, result.stdout, result.stderr, result.exception)
    return result


@pytest.fixture(scope='module')
def recorded(tmp_path_factory):
    """A workspace with the full chain run in record mode."""
    root = tmp_path_factory.mktemp('run')
    write_fixture_corpus(root / 'corpus')
    config = write_run_config(root / 'record.yaml')
    for stage in STAGES:
        run_ok(config, stage)
    return root, config


def test_recorded_dataset_meets_quotas(recorded):
    root, _ = recorded
    records = read_dataset(str(root / 'out' / 'dataset.jsonl'))
    assert len(records) >= 50
    counts = Counter(r.style for r in records)
    for style in ('find', 'explain', 'summarize', 'generate', 'provide'):
        assert abs(counts[style] - 12) <= 1, counts
    assert len({r.pipeline_version for r in records}) == 1
    assert (root / 'fixtures.jsonl').exists()
    for stage in ('ingest', 'synth', 'qc', 'bench-qa-oracle'):
        assert (root / 'out' / 'manifests' / f"{stage}.json").exists()


def test_oracle_report_is_written(recorded):
    root, _ = recorded
    reports = root / 'out' / 'reports'
    summary = [json.loads(line) for line in (reports / 'bench_qa_oracle.summary.jsonl').read_text().splitlines()]
    row = summary[-1]
    assert row['counts']['failed'] == 0
    assert row['overall']['hit@3'] == pytest.approx(1.0)
    assert (reports / 'bench_qa_oracle.md').read_text(encoding='utf-8').strip()


def test_replay_reproduces_outputs_without_network(recorded):
    root, _ = recorded
    config = write_run_config(root / 'replay.yaml', mode='replay', output_dir='out_replay',
                              cache_path='cache/replay.db')
    for stage in STAGES:
        run_ok(config, stage, transport=RefusingTransport())

    for name in ('chunks.jsonl', 'candidates.jsonl', 'qc_audit.jsonl', 'dataset.jsonl',
                 'reports/bench_qa_oracle.jsonl', 'reports/bench_qa_oracle.summary.jsonl',
                 'reports/bench_qa_oracle.md'):
        assert (root / 'out_replay' / name).read_bytes() == (root / 'out' / name).read_bytes(), name


def test_replay_without_recordings_never_reaches_the_network(tmp_path):
    write_fixture_corpus(tmp_path / 'corpus', n_docs=2)
    write_records(str(tmp_path / 'empty.jsonl'), 'fixture-archive', 1, [])
    config = write_run_config(tmp_path / 'run.yaml', mode='replay', fixture_archive='empty.jsonl')
    run_ok(config, 'ingest', transport=RefusingTransport())
    result = run_ok(config, 'synth', transport=RefusingTransport())
    assert 'Generated 0 candidates' in result.stdout
    assert read_candidates(str(tmp_path / 'out' / 'candidates.jsonl')) == []


def test_stage_without_its_input_exits_1(tmp_path):
    write_fixture_corpus(tmp_path / 'corpus', n_docs=2)
    config = write_run_config(tmp_path / 'run.yaml')
    result = invoke(config, 'qc')
    assert result.exit_code == 1
    error = json.loads(result.stderr.strip().splitlines()[-1])
    assert error['error'] == 'MissingInputError'
    assert 'chunk store' in error['messages'][0]


def test_bad_config_exits_2(tmp_path):
    config = write_run_config(tmp_path / 'run.yaml', max_workers=0, colour='blue')
    result = invoke(config, 'ingest')
    assert result.exit_code == 2
    error = json.loads(result.stderr.strip().splitlines()[-1])
    assert error['error'] == 'ConfigError'
    assert any('colour' in message for message in error['messages'])


def test_retrieval_sweep_has_a_row_per_k_and_retriever(recorded):
    root, config = recorded
    result = run_ok(config, 'bench-retrieval')
    rows = [json.loads(line) for line in (root / 'out' / 'reports' / 'retrieval_sweep.jsonl').read_text().splitlines()]
    rows = [row for row in rows if 'retriever' in row]
    overall = [(row['retriever'], row['k']) for row in rows if row['style'] == 'all']
    assert sorted(overall) == sorted((kind, k) for kind in ('bm25', 'dense', 'hybrid') for k in (1, 3, 5, 10))
    assert 'Retrieval sweep' in result.stdout


def test_stats_and_sft_export(recorded):
    root, config = recorded
    result = run_ok(config, 'stats')
    assert 'Total/Avg' in result.stdout
    assert (root / 'out' / 'stats.csv').exists()

    run_ok(config, 'export-sft')
    train = read_dataset(str(root / 'out' / 'dataset_train.jsonl'))
    evaluation = read_dataset(str(root / 'out' / 'dataset_eval.jsonl'))
    total = len(read_dataset(str(root / 'out' / 'dataset.jsonl')))
    assert len(train) + len(evaluation) == total
    assert (root / 'out' / 'sft' / 'train.jsonl').exists()


def test_graph_annotation_round_trip(recorded):
    root, config = recorded
    run_ok(config, 'graph-gen')
    out = root / 'out'
    tasks = read_annotation_tasks(str(out / 'annotation_tasks.jsonl'))
    assert tasks
    assert all(t.expert_answer is None for t in tasks)

    run_ok(config, 'annotate-export')
    frame = pd.read_csv(out / 'annotation_tasks.csv', dtype=str, keep_default_na=False)
    frame['expert_answer'] = [f"Expert answer {i}." for i in range(len(frame))]
    frame['validity_flag'] = ['no' if i == 0 else 'yes' for i in range(len(frame))]
    annotated = root / 'annotated.csv'
    frame.to_csv(annotated, index=False, sep=';')

    result = run_ok(config, 'annotate-import', str(annotated))
    assert '1 tasks flagged invalid' in result.stdout
    expert = read_dataset(str(out / 'expert_dataset.jsonl'))
    assert len(expert) == len(tasks) - 1
    assert {r.origin for r in expert} == {'expert'}

    run_ok(config, 'export-sft')
    if len(expert):
        assert (out / 'sft' / 'train_mixed.jsonl').exists()


def test_unknown_annotation_ids_exit_1(recorded, tmp_path):
    root, config = recorded
    if not (root / 'out' / 'annotation_tasks.jsonl').exists():
        run_ok(config, 'graph-gen')
    annotated = tmp_path / 'bogus.csv'
    annotated.write_text('task_id,expert_answer,validity_flag\nnot-a-task,x,yes\n', encoding='utf-8')
    result = invoke(config, 'annotate-import', str(annotated))
    assert result.exit_code == 1
    assert json.loads(result.stderr.strip().splitlines()[-1])['error'] == 'AnnotationError'


def test_cache_export_and_import(recorded, tmp_path):
    _, config = recorded
    archive = tmp_path / 'archive.jsonl'
    result = run_ok(config, 'cache-export', str(archive))
    assert archive.exists()
    assert 'Exported' in result.stdout
    result = run_ok(config, 'cache-import', str(archive))
    assert 'Imported 0 provider calls' in result.stdout
