"""
Dataset Store

Persists QA datasets with provenance, computes per-style statistics, splits
train/eval and exports SFT training files, including the upsampled mix of
synthetic and expert-written examples.
"""

import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.database import canonical_json, read_records, write_records
from app.services import HarnessError
from app.services.corpus import ChunkStore, TokenizerSpec
from app.services.prompts import PromptLibrary, render_answer_prompt, render_markdown_table
from app.services.synthesis import STYLE_ORDER, parse_style

logger = logging.getLogger(__name__)

DATASET_SCHEMA = 'dataset'
DATASET_VERSION = 1
SFT_SCHEMA = 'sft'
SFT_VERSION = 1
ORIGINS = ('synthetic', 'expert')

STATS_COLUMNS = ['Style', 'Count', '%', 'Avg |q| (tok)', 'Avg |a| (tok)', 'Refs/sample', 'Avg quality',
                 'Docs', 'Duration (s)']


class DatasetError(HarnessError):
    """A dataset is malformed, inconsistent with its chunk store, or unusable for a step."""


@dataclass
class DatasetRecord:
    """One released QA instance with its provenance."""
    instance_id: str
    question: str
    answer: str
    style: str
    evidence_chunk_ids: List[str]
    seed_doc_id: str
    seed_doc_name: str = ''
    seed_doc_path: str = ''
    quality: Dict = field(default_factory=dict)
    duration_seconds: float = 0.0
    pipeline_version: str = ''
    origin: str = 'synthetic'
    schema_version: int = DATASET_VERSION

    def __post_init__(self):
        self.style = parse_style(self.style).value
        if self.origin not in ORIGINS:
            raise DatasetError(f"record {self.instance_id}: unknown origin '{self.origin}'")

    @property
    def composite(self) -> Optional[float]:
        return self.quality.get('composite')

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'DatasetRecord':
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise DatasetError(f"record {data.get('instance_id')}: unknown fields {unknown}")
        return cls(**data)


def _provenance(store: ChunkStore, chunk_ids: Sequence[str]) -> Tuple[str, str]:
    chunk = store.require(chunk_ids[0])
    return chunk.name, chunk.path


def records_from_instances(instances: Sequence, store: ChunkStore, pipeline_version: str) -> List[DatasetRecord]:
    """Accepted quality-controlled instances as dataset records."""
    records = []
    for instance in instances:
        candidate = instance.candidate
        name, path = _provenance(store, candidate.evidence_chunk_ids)
        records.append(DatasetRecord(
            instance_id=candidate.candidate_id,
            question=candidate.question,
            answer=candidate.answer,
            style=candidate.style.value,
            evidence_chunk_ids=list(candidate.evidence_chunk_ids),
            seed_doc_id=candidate.seed_doc_id,
            seed_doc_name=name,
            seed_doc_path=path,
            quality=instance.quality.to_dict(),
            duration_seconds=candidate.duration_seconds,
            pipeline_version=pipeline_version,
        ))
    return records


def records_from_annotations(tasks: Sequence, store: ChunkStore, pipeline_version: str) -> List[DatasetRecord]:
    """
    Expert-answered annotation tasks as dataset records with origin "expert".

    Tasks flagged invalid or left unanswered are skipped.
    """
    records = []
    for task in tasks:
        if not task.validity_flag or not (task.expert_answer or '').strip():
            continue
        chunk = store.require(task.chunk_ids[0])
        records.append(DatasetRecord(
            instance_id=task.task_id,
            question=task.question,
            answer=task.expert_answer.strip(),
            style=task.style,
            evidence_chunk_ids=list(task.chunk_ids),
            seed_doc_id=chunk.doc_id,
            seed_doc_name=chunk.name,
            seed_doc_path=chunk.path,
            pipeline_version=pipeline_version,
            origin='expert',
        ))
    logger.info(f"Built {len(records)} expert records from {len(tasks)} annotation tasks")
    return records


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def validate_records(records: Sequence[DatasetRecord], store: Optional[ChunkStore] = None):
    """Unique instance ids, non-empty evidence and (with a store) no dangling chunk ids."""
    counts = Counter(r.instance_id for r in records)
    duplicates = sorted(i for i, n in counts.items() if n > 1)
    if duplicates:
        raise DatasetError(f"duplicate instance ids: {duplicates[:5]}")
    problems = []
    for record in records:
        if not record.evidence_chunk_ids:
            problems.append(f"{record.instance_id}: empty evidence")
        if store is not None:
            dangling = [c for c in record.evidence_chunk_ids if c not in store]
            if dangling:
                problems.append(f"{record.instance_id}: unknown chunk ids {dangling}")
    if problems:
        raise DatasetError("; ".join(problems[:10]))


def write_dataset(records: Sequence[DatasetRecord], path: str, store: Optional[ChunkStore] = None) -> int:
    validate_records(records, store)
    count = write_records(path, DATASET_SCHEMA, DATASET_VERSION, (r.to_dict() for r in records))
    logger.info(f"Wrote {count} dataset records to {path}")
    return count


def read_dataset(path: str, store: Optional[ChunkStore] = None) -> List[DatasetRecord]:
    """
    Read a dataset file.

    Raises:
        SchemaVersionError: header or a record carries another version
        DatasetError: duplicate ids, empty evidence or dangling chunk references
    """
    records = [DatasetRecord.from_dict(data) for data in read_records(path, DATASET_SCHEMA, DATASET_VERSION)]
    validate_records(records, store)
    return records


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def _style_rank(style: str) -> int:
    return [s.value for s in STYLE_ORDER].index(style)


def _stats_row(label: str, frame: pd.DataFrame, total: int) -> Dict:
    quality = frame['quality'].dropna()
    return {
        'Style': label,
        'Count': len(frame),
        '%': 100.0 * len(frame) / total,
        'Avg |q| (tok)': frame['q_tokens'].mean(),
        'Avg |a| (tok)': frame['a_tokens'].mean(),
        'Refs/sample': frame['refs'].mean(),
        'Avg quality': quality.mean() if len(quality) else None,
        'Docs': frame['doc'].nunique(),
        'Duration (s)': frame['duration'].mean(),
    }


def dataset_stats(records: Sequence[DatasetRecord], spec: TokenizerSpec) -> pd.DataFrame:
    """
    Per-style composition table plus a Total/Avg row.

    Token lengths use the corpus tokenizer. Docs counts distinct seed documents
    contributing at least one record. Total/Avg means are weighted by count.

    Args:
        records: Dataset records
        spec: Tokenizer used for the length columns

    Returns:
        DataFrame with STATS_COLUMNS, styles in canonical order, Total/Avg last
    """
    if not records:
        raise DatasetError("cannot compute statistics of an empty dataset")
    frame = pd.DataFrame([{
        'style': r.style,
        'q_tokens': spec.count(r.question),
        'a_tokens': spec.count(r.answer),
        'refs': len(r.evidence_chunk_ids),
        'quality': r.composite,
        'doc': r.seed_doc_id,
        'duration': r.duration_seconds,
    } for r in records])
    frame['quality'] = pd.to_numeric(frame['quality'], errors='coerce')

    rows = []
    for style in sorted(frame['style'].unique(), key=_style_rank):
        rows.append(_stats_row(style, frame[frame['style'] == style], len(frame)))
    rows.append(_stats_row('Total/Avg', frame, len(frame)))
    return pd.DataFrame(rows, columns=STATS_COLUMNS)


def write_stats(table: pd.DataFrame, directory: str, library: PromptLibrary, name: str = 'stats') -> Dict[str, str]:
    """Write <name>.csv and <name>.md."""
    base = Path(directory)
    base.mkdir(parents=True, exist_ok=True)
    csv_path = base / f"{name}.csv"
    md_path = base / f"{name}.md"
    table.to_csv(csv_path, index=False, lineterminator='\n')
    rows = [[None if pd.isna(v) else v for v in row] for row in table.itertuples(index=False, name=None)]
    markdown = render_markdown_table(library, list(table.columns), rows, title='Dataset statistics', digits=2)
    with open(md_path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(markdown)
    return {'csv': str(csv_path), 'markdown': str(md_path)}


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    """Train/eval split settings."""
    ratio: float = 0.9
    rng_seed: int = 13
    stratify_by_style: bool = True

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise DatasetError(f"split ratio must lie strictly between 0 and 1, got {self.ratio}")


def _shuffled(records: Sequence[DatasetRecord], rng: np.random.Generator) -> List[DatasetRecord]:
    ordered = sorted(records, key=lambda r: r.instance_id)
    return [ordered[i] for i in rng.permutation(len(ordered))]


def split(records: Sequence[DatasetRecord], spec: SplitSpec) -> Tuple[List[DatasetRecord], List[DatasetRecord]]:
    """
    Seeded train/eval split, optionally stratified by style.

    The input order does not matter: records are sorted by instance_id before
    the seeded shuffle. Under stratification a style with fewer than two
    records stays whole in train.

    Returns:
        (train, eval), each sorted by instance_id
    """
    rng = np.random.default_rng(spec.rng_seed)
    if spec.stratify_by_style:
        groups: Dict[str, List[DatasetRecord]] = {}
        for record in records:
            groups.setdefault(record.style, []).append(record)
        group_list = [groups[style] for style in sorted(groups, key=_style_rank)]
    else:
        group_list = [list(records)]

    train, evaluation = [], []
    for group in group_list:
        shuffled = _shuffled(group, rng)
        if spec.stratify_by_style and len(shuffled) < 2:
            logger.warning(f"Style {shuffled[0].style} has {len(shuffled)} record(s); kept whole in train")
            train.extend(shuffled)
            continue
        n_train = int(round(len(shuffled) * spec.ratio))
        if len(shuffled) >= 2:
            n_train = min(max(n_train, 1), len(shuffled) - 1)
        train.extend(shuffled[:n_train])
        evaluation.extend(shuffled[n_train:])

    key = lambda r: r.instance_id
    logger.info(f"Split {len(records)} records into {len(train)} train / {len(evaluation)} eval")
    return sorted(train, key=key), sorted(evaluation, key=key)


# ---------------------------------------------------------------------------
# SFT export and mixing
# ---------------------------------------------------------------------------

@dataclass
class SftExample:
    """Question plus rendered evidence context, paired with the reference answer."""
    instance_id: str
    input: str
    target: str
    style: str
    origin: str = 'synthetic'

    def to_dict(self) -> Dict:
        return asdict(self)


def export_sft(records: Sequence[DatasetRecord], store: ChunkStore, library: PromptLibrary) -> List[SftExample]:
    """
    One training example per record.

    The input is the benchmark answer prompt rendered over the record's own
    evidence chunks in stored order, so training sees what oracle evaluation sees.
    """
    examples = []
    for record in records:
        if not record.evidence_chunk_ids:
            raise DatasetError(f"record {record.instance_id} has no evidence to render")
        texts = [store.require(chunk_id).text for chunk_id in record.evidence_chunk_ids]
        examples.append(SftExample(
            instance_id=record.instance_id,
            input=render_answer_prompt(library, record.question, texts),
            target=record.answer,
            style=record.style,
            origin=record.origin,
        ))
    return examples


def write_sft(examples: Sequence[SftExample], path: str) -> int:
    count = write_records(path, SFT_SCHEMA, SFT_VERSION, (e.to_dict() for e in examples))
    logger.info(f"Wrote {count} SFT examples to {path}")
    return count


def upsample_count(n_synthetic: int, synth_fraction: float) -> int:
    """Manual copies needed so synthetic examples make up synth_fraction of the mix."""
    if not 0 < synth_fraction <= 1:
        raise DatasetError(f"synth_fraction must lie in (0, 1], got {synth_fraction}")
    return int(round(n_synthetic * (1 - synth_fraction) / synth_fraction))


def mix_with_upsampling(synthetic: Sequence, manual: Sequence, synth_fraction: float = 0.7,
                        rng_seed: int = 17) -> List:
    """
    Mix synthetic and manual examples, resampling manual ones with replacement.

    Args:
        synthetic: Synthetic training examples
        manual: Expert-written training examples
        synth_fraction: Target share of synthetic examples in the mix
        rng_seed: Seed for resampling and the final shuffle

    Returns:
        Seeded shuffle of synthetic + round(|synthetic|(1-f)/f) manual draws
    """
    n_manual = upsample_count(len(synthetic), synth_fraction)
    rng = np.random.default_rng(rng_seed)
    if n_manual and not manual:
        raise DatasetError(f"need manual examples to reach a synthetic fraction of {synth_fraction}")
    draws = [manual[i] for i in rng.integers(0, len(manual), size=n_manual)] if n_manual else []
    pool = list(synthetic) + draws
    mixed = [pool[i] for i in rng.permutation(len(pool))]
    logger.info(f"Mixed {len(synthetic)} synthetic with {n_manual} upsampled manual examples "
                f"(from {len(manual)} unique) into {len(mixed)}")
    return mixed


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def pipeline_version(config_digest: str, template_digests: Dict[str, str]) -> str:
    """Short digest identifying the config and prompt templates a record came from."""
    payload = canonical_json({'config': config_digest, 'templates': template_digests})
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]


def build_manifest(config, library: PromptLibrary, provider_models: Dict[str, str], stage: str,
                   extra: Optional[Dict] = None) -> Dict:
    templates = library.digests()
    config_digest = config.digest()
    manifest = {
        'stage': stage,
        'config_digest': config_digest,
        'template_digests': templates,
        'provider_models': provider_models,
        'seeds': dict(config.seeds),
        'pipeline_version': pipeline_version(config_digest, templates),
        'created_at': datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    return manifest


def write_manifest(manifest: Dict, path: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
        f.write('\n')
