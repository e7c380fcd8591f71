# File: app/database.py
"""
Persistence for the harness.

Two kinds of storage live here:
- the provider cache: a sqlite table holding every model-service call keyed by
  content digest, so reruns never pay twice and replay runs need no network
- line-delimited record files: every artifact (chunk store, candidates,
  dataset, reports...) is JSONL with a leading schema/version header record

Using SQLite because it's simple and doesn't require a separate database server.
"""

import json
import logging
import os
import sqlite3
import threading
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple

from app.services import HarnessError

logger = logging.getLogger(__name__)


class SchemaVersionError(HarnessError):
    """A record file has the wrong schema name or version."""


def canonical_json(value: Any) -> str:
    """Stable JSON encoding used for digests and byte-identical outputs."""
    return json.dumps(value, sort_keys=True, ensure_ascii=False, separators=(',', ':'))


# ---------------------------------------------------------------------------
# Provider cache
# ---------------------------------------------------------------------------

class ProviderCache:
    """
    Disk cache of model-service calls.

    Readers run concurrently; insertion is single-writer per key through
    INSERT OR IGNORE, so the first stored response for a key wins.
    Callers that fill a missing key hold key_lock(key) so concurrent
    identical requests reach the network once.
    """

    def __init__(self, db_path: str):
        self.db_path = db_path
        if db_path != ':memory:':
            os.makedirs(os.path.dirname(os.path.abspath(db_path)), exist_ok=True)
        self._local = threading.local()
        self._write_lock = threading.RLock()
        self._key_locks: Dict[str, List] = {}
        self._key_locks_guard = threading.Lock()
        self._memory_conn = None
        if db_path == ':memory:':
            # One shared connection, otherwise every thread would see its own empty db
            self._memory_conn = sqlite3.connect(':memory:', check_same_thread=False)
            self._memory_conn.row_factory = sqlite3.Row
        self.init_schema()

    def _connect(self) -> sqlite3.Connection:
        if self._memory_conn is not None:
            return self._memory_conn
        conn = getattr(self._local, 'conn', None)
        if conn is None:
            conn = sqlite3.connect(self.db_path, timeout=30)
            conn.row_factory = sqlite3.Row
            self._local.conn = conn
        return conn

    @contextmanager
    def get_db_connection(self) -> Iterator[sqlite3.Connection]:
        """Per-thread connection; the in-memory variant is shared under the write lock."""
        conn = self._connect()
        if self._memory_conn is not None:
            with self._write_lock:
                yield conn
        else:
            yield conn

    @contextmanager
    def key_lock(self, key: str) -> Iterator[None]:
        """Serialize work on one cache key; other keys proceed in parallel."""
        with self._key_locks_guard:
            slot = self._key_locks.setdefault(key, [threading.Lock(), 0])
            slot[1] += 1
        try:
            with slot[0]:
                yield
        finally:
            with self._key_locks_guard:
                slot[1] -= 1
                if slot[1] == 0:
                    del self._key_locks[key]

    def init_schema(self):
        with self.get_db_connection() as conn:
            conn.execute('''
            CREATE TABLE IF NOT EXISTS provider_cache (
                key TEXT PRIMARY KEY,
                endpoint_kind TEXT NOT NULL,
                request TEXT NOT NULL,      -- canonical JSON
                response TEXT NOT NULL,     -- JSON
                elapsed REAL NOT NULL DEFAULT 0,  -- seconds the live call took
                created_at TEXT NOT NULL
            )
            ''')
            conn.execute('CREATE INDEX IF NOT EXISTS idx_cache_kind ON provider_cache (endpoint_kind)')
            conn.commit()

    def get(self, key: str) -> Optional[Any]:
        entry = self.get_entry(key)
        return None if entry is None else entry[0]

    def get_entry(self, key: str) -> Optional[Tuple[Any, float]]:
        """(response, recorded elapsed seconds) or None."""
        with self.get_db_connection() as conn:
            row = conn.execute('SELECT response, elapsed FROM provider_cache WHERE key = ?', (key,)).fetchone()
        if row is None:
            return None
        return json.loads(row['response']), row['elapsed']

    def put(self, key: str, endpoint_kind: str, request: Dict[str, Any], response: Any,
            timestamp: Optional[str] = None, elapsed: float = 0.0) -> bool:
        """Store a response. Returns False when the key was already present."""
        timestamp = timestamp or datetime.now(timezone.utc).isoformat()
        with self._write_lock:
            with self.get_db_connection() as conn:
                cursor = conn.execute(
                    'INSERT OR IGNORE INTO provider_cache (key, endpoint_kind, request, response, elapsed, created_at) '
                    'VALUES (?, ?, ?, ?, ?, ?)',
                    (key, endpoint_kind, canonical_json(request), json.dumps(response), round(elapsed, 3), timestamp),
                )
                conn.commit()
                return cursor.rowcount > 0

    def count(self) -> int:
        with self.get_db_connection() as conn:
            return conn.execute('SELECT COUNT(*) FROM provider_cache').fetchone()[0]

    def export_archive(self, archive_path: str) -> int:
        """
        Write every cached call as a fixture archive record.

        Args:
            archive_path: Destination JSONL file

        Returns:
            Number of records written
        """
        with self.get_db_connection() as conn:
            rows = conn.execute(
                'SELECT key, endpoint_kind, request, response, elapsed, created_at FROM provider_cache ORDER BY key'
            ).fetchall()
        records = [
            {
                'key': row['key'],
                'endpoint_kind': row['endpoint_kind'],
                'request': json.loads(row['request']),
                'response': json.loads(row['response']),
                'elapsed': row['elapsed'],
                'timestamp': row['created_at'],
            }
            for row in rows
        ]
        write_records(archive_path, 'fixture-archive', 1, records)
        logger.info(f"Exported {len(records)} cached calls to {archive_path}")
        return len(records)

    def import_archive(self, archive_path: str) -> int:
        """Load a fixture archive into the cache. Returns the number of new keys."""
        added = 0
        for record in read_records(archive_path, 'fixture-archive', 1):
            if self.put(record['key'], record['endpoint_kind'], record['request'],
                        record['response'], record.get('timestamp'), record.get('elapsed', 0.0)):
                added += 1
        logger.info(f"Imported {added} fixture records from {archive_path}")
        return added


# ---------------------------------------------------------------------------
# Record files
# ---------------------------------------------------------------------------

def write_records(path: str, schema: str, version: int, records: Iterable[Dict[str, Any]]) -> int:
    """
    Write JSONL with a header line {"schema": ..., "version": ...}.

    Keys are sorted so identical records always produce identical bytes.
    """
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(canonical_json({'schema': schema, 'version': version}) + '\n')
        for record in records:
            f.write(canonical_json(record) + '\n')
            count += 1
    return count


def read_header(path: str) -> Tuple[str, int]:
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline()
    if not first.strip():
        raise SchemaVersionError(f"{path}: missing schema header")
    header = json.loads(first)
    if 'schema' not in header or 'version' not in header:
        raise SchemaVersionError(f"{path}: first line is not a schema header")
    return header['schema'], header['version']


def read_records(path: str, schema: str, version: int) -> List[Dict[str, Any]]:
    """
    Read a JSONL record file, refusing files of another schema or version.

    Any record carrying its own "schema_version" field must agree with the
    header; a mixed-version file is an error, never silently coerced.
    """
    if not Path(path).exists():
        raise FileNotFoundError(path)
    found_schema, found_version = read_header(path)
    if found_schema != schema:
        raise SchemaVersionError(f"{path}: expected schema '{schema}', found '{found_schema}'")
    if found_version != version:
        raise SchemaVersionError(f"{path}: expected version {version}, found {found_version}")

    records = []
    with open(path, 'r', encoding='utf-8') as f:
        next(f)
        for line_no, line in enumerate(f, start=2):
            if not line.strip():
                continue
            record = json.loads(line)
            record_version = record.get('schema_version')
            if record_version is not None and record_version != version:
                raise SchemaVersionError(
                    f"{path}:{line_no}: record version {record_version} does not match header version {version}"
                )
            records.append(record)
    return records
