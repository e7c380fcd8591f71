import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

from app.services import HarnessError

load_dotenv()


class Config:
    # Endpoint defaults; a run config may override any of them per stage
    CHAT_URL = os.environ.get('GQA_CHAT_URL') or 'http://localhost:8000/v1/chat/completions'
    JUDGE_URL = os.environ.get('GQA_JUDGE_URL') or CHAT_URL
    SCORER_URL = os.environ.get('GQA_SCORER_URL') or ''
    EMBED_URL = os.environ.get('GQA_EMBED_URL') or 'http://localhost:8001/embed'
    NLI_URL = os.environ.get('GQA_NLI_URL') or 'http://localhost:8002/nli'
    SPAN_URL = os.environ.get('GQA_SPAN_URL') or 'http://localhost:8003/span'
    METRIC_URL = os.environ.get('GQA_METRIC_URL') or ''

    CHAT_MODEL = os.environ.get('GQA_CHAT_MODEL') or 'openai/gpt-4o'
    JUDGE_MODEL = os.environ.get('GQA_JUDGE_MODEL') or 'gemini-2.5-pro'
    EMBED_MODEL = os.environ.get('GQA_EMBED_MODEL') or 'sentence-transformers/all-mpnet-base-v2'
    NLI_MODEL = os.environ.get('GQA_NLI_MODEL') or 'facebook/bart-large-mnli'
    SPAN_MODEL = os.environ.get('GQA_SPAN_MODEL') or 'deepset/roberta-base-squad2'

    CACHE_PATH = os.environ.get('GQA_CACHE_PATH') or 'data/cache/provider_cache.db'
    REQUEST_TIMEOUT = float(os.environ.get('GQA_REQUEST_TIMEOUT', 60))
    BACKOFF_CEILING = float(os.environ.get('GQA_BACKOFF_CEILING', 120))
    MAX_RETRIES = int(os.environ.get('GQA_MAX_RETRIES', 5))
    RATE_LIMIT = float(os.environ.get('GQA_RATE_LIMIT', 5.0))
    MAX_WORKERS = int(os.environ.get('GQA_MAX_WORKERS', 4))
    LOG_LEVEL = os.environ.get('GQA_LOG_LEVEL') or 'INFO'


class ConfigError(HarnessError):
    """Raised when a run config fails validation; carries every problem found."""

    def __init__(self, problems: List[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


MODES = ('live', 'record', 'replay')
RETRIEVER_KINDS = ('bm25', 'dense', 'hybrid', 'oracle')
# Where and how fast a run executes, not what it produces
OPERATIONAL_FIELDS = ('mode', 'fixture_archive', 'cache_path', 'output_dir', 'max_workers')


@dataclass
class EndpointConfig:
    """One model service. The API key is never stored here, only the env var naming it."""
    url: str
    model: str
    api_key_env: Optional[str] = None
    rate_limit: float = Config.RATE_LIMIT
    timeout: float = Config.REQUEST_TIMEOUT

    @property
    def api_key(self) -> Optional[str]:
        if not self.api_key_env:
            return None
        return os.environ.get(self.api_key_env)


def _default_endpoints() -> Dict[str, EndpointConfig]:
    return {
        'generator': EndpointConfig(Config.CHAT_URL, Config.CHAT_MODEL, 'GQA_CHAT_API_KEY'),
        'judge': EndpointConfig(Config.JUDGE_URL, Config.JUDGE_MODEL, 'GQA_JUDGE_API_KEY'),
        'embedder': EndpointConfig(Config.EMBED_URL, Config.EMBED_MODEL),
        'nli': EndpointConfig(Config.NLI_URL, Config.NLI_MODEL),
        'span': EndpointConfig(Config.SPAN_URL, Config.SPAN_MODEL),
    }


@dataclass
class RunConfig:
    """Declarative description of one pipeline run, loaded from a YAML file."""
    corpus_paths: List[str] = field(default_factory=list)
    output_dir: str = 'data/output'
    mode: str = 'live'
    fixture_archive: Optional[str] = None
    cache_path: str = Config.CACHE_PATH
    max_workers: int = Config.MAX_WORKERS

    encoding_name: str = 'cl100k_base'
    chunk_policy: Dict[str, Any] = field(default_factory=dict)
    benchmark_chunk_profile: bool = False

    endpoints: Dict[str, EndpointConfig] = field(default_factory=_default_endpoints)
    style_policies: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    quotas: Dict[str, int] = field(default_factory=dict)
    target_per_style: int = 5

    retriever: Dict[str, Any] = field(default_factory=lambda: {
        'kind': 'hybrid', 'k': 3, 'dense_weight': 0.7, 'lexical_weight': 0.3,
    })
    k_sweep: List[int] = field(default_factory=lambda: [1, 3, 5, 10])
    sweep_retrievers: List[str] = field(default_factory=lambda: ['bm25', 'dense', 'hybrid'])
    metrics: List[str] = field(default_factory=lambda: ['token_f1', 'rouge_l', 'bleu', 'rageval'])
    external_metrics: List[str] = field(default_factory=list)

    graph: Dict[str, Any] = field(default_factory=lambda: {
        'k': 5, 'max_distance': 0.35, 'n_examples': 2, 'threshold': 0.75,
        'target_per_style': 20, 'max_attempts_per_style': 60,
    })
    bootstrap_path: Optional[str] = None

    split: Dict[str, Any] = field(default_factory=lambda: {
        'ratio': 0.9, 'stratify_by_style': True,
    })
    synth_fraction: float = 0.7
    seeds: Dict[str, int] = field(default_factory=lambda: {
        'split': 13, 'mix': 17, 'graph': 23, 'synthesis': 29,
    })

    source_path: Optional[str] = None

    def validate(self) -> None:
        """Check every field and raise ConfigError listing all problems at once."""
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.mode == 'replay' and not self.fixture_archive:
            problems.append("replay mode requires 'fixture_archive'")
        if self.mode == 'replay' and self.fixture_archive and not Path(self.fixture_archive).exists():
            problems.append(f"fixture archive not found: {self.fixture_archive}")
        if self.max_workers < 1:
            problems.append("max_workers must be >= 1")
        kind = self.retriever.get('kind')
        if kind not in RETRIEVER_KINDS:
            problems.append(f"retriever.kind must be one of {RETRIEVER_KINDS}, got '{kind}'")
        if int(self.retriever.get('k', 0)) < 1:
            problems.append("retriever.k must be >= 1")
        for name in self.sweep_retrievers:
            if name not in RETRIEVER_KINDS:
                problems.append(f"unknown sweep retriever '{name}'")
        if any(int(k) < 1 for k in self.k_sweep):
            problems.append("k_sweep values must be >= 1")
        ratio = float(self.split.get('ratio', 0.9))
        if not 0 < ratio < 1:
            problems.append("split.ratio must lie strictly between 0 and 1")
        if not 0 < self.synth_fraction <= 1:
            problems.append("synth_fraction must lie in (0, 1]")
        if self.target_per_style < 1:
            problems.append("target_per_style must be >= 1")
        for role in ('generator', 'judge', 'embedder', 'nli', 'span'):
            if role not in self.endpoints:
                problems.append(f"missing endpoint for role '{role}'")
        for role, endpoint in self.endpoints.items():
            if not endpoint.url:
                problems.append(f"endpoint '{role}' has no url")
        for style, quota in self.quotas.items():
            if int(quota) < 0:
                problems.append(f"quota for '{style}' must be >= 0")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop('source_path', None)
        return data

    def digest(self) -> str:
        """Content digest over the fields that change what a run produces."""
        semantic = {key: value for key, value in self.to_dict().items() if key not in OPERATIONAL_FIELDS}
        canonical = json.dumps(semantic, sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)


def load_run_config(path: str, mode: Optional[str] = None) -> RunConfig:
    """
    Load a RunConfig from YAML.

    Args:
        path: YAML file path
        mode: Optional override of the configured mode

    Returns:
        Validated RunConfig
    """
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError([f"config file not found: {path}"])

    with open(config_path, 'r', encoding='utf-8') as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError([f"config root must be a mapping, got {type(raw).__name__}"])

    known = set(RunConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    problems = [f"unknown config key '{key}'" for key in unknown]

    endpoints = _default_endpoints()
    for role, spec in (raw.pop('endpoints', None) or {}).items():
        if not isinstance(spec, dict) or 'url' not in spec or 'model' not in spec:
            problems.append(f"endpoint '{role}' needs 'url' and 'model'")
            continue
        try:
            endpoints[role] = EndpointConfig(**spec)
        except TypeError as e:
            problems.append(f"endpoint '{role}': {e}")

    # Relative corpus/archive paths resolve against the config file location
    base = config_path.parent
    for key in ('fixture_archive', 'bootstrap_path'):
        if raw.get(key) and not Path(raw[key]).is_absolute():
            raw[key] = str(base / raw[key])
    raw['corpus_paths'] = [
        p if Path(p).is_absolute() else str(base / p) for p in raw.get('corpus_paths', [])
    ]
    if raw.get('output_dir') and not Path(raw['output_dir']).is_absolute():
        raw['output_dir'] = str(base / raw['output_dir'])
    if raw.get('cache_path') and not Path(raw['cache_path']).is_absolute():
        raw['cache_path'] = str(base / raw['cache_path'])

    kwargs = {key: value for key, value in raw.items() if key in known}
    config = RunConfig(endpoints=endpoints, **kwargs)
    config.source_path = str(config_path)
    if mode:
        config.mode = mode

    try:
        config.validate()
    except ConfigError as e:
        problems.extend(e.problems)
    if problems:
        raise ConfigError(problems)
    return config
