# File: app/background_jobs.py
"""
Batch processing with a bounded worker pool.

Every stage that fans out over many items (chunking documents, generating
candidates, scoring, benchmarking) goes through run_in_pool. Items are processed
concurrently, progress is logged as batches complete, and results come back in
input order so downstream output never depends on scheduling.
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, TypeVar

T = TypeVar('T')
R = TypeVar('R')

logger = logging.getLogger(__name__)


@dataclass
class BatchOutcome:
    """Results aligned with the input; failed items hold None and an entry in errors."""
    results: List[Optional[Any]]
    errors: Dict[int, str] = field(default_factory=dict)

    @property
    def succeeded(self) -> int:
        return len(self.results) - len(self.errors)


def run_in_pool(fn: Callable[[T], R], items: Sequence[T], max_workers: int = 1,
                label: str = 'items', raise_on: tuple = ()) -> BatchOutcome:
    """
    Apply fn to every item on a thread pool.

    Args:
        fn: Work function; exceptions are captured per item
        items: Inputs, processed in any order
        max_workers: Pool size; 1 runs inline
        label: Name used in progress logs
        raise_on: Exception types that abort the whole batch instead of being recorded

    Returns:
        BatchOutcome with results in input order
    """
    total = len(items)
    results: List[Optional[Any]] = [None] * total
    errors: Dict[int, str] = {}
    if total == 0:
        return BatchOutcome(results, errors)

    step = max(1, total // 10)

    def record_progress(done: int):
        if done % step == 0 or done == total:
            logger.info(f"Processed {done}/{total} {label} ({int(100 * done / total)}%)")

    if max_workers <= 1:
        for index, item in enumerate(items):
            try:
                results[index] = fn(item)
            except raise_on:
                raise
            except Exception as e:
                errors[index] = f"{type(e).__name__}: {e}"
                logger.warning(f"Failed on {label} #{index}: {e}")
            record_progress(index + 1)
    else:
        _run_threaded(fn, items, max_workers, label, raise_on, results, errors, record_progress)

    if errors:
        logger.warning(f"{len(errors)} of {total} {label} failed")
    return BatchOutcome(results, errors)


def _run_threaded(fn, items, max_workers, label, raise_on, results, errors, record_progress):
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = {pool.submit(fn, item): index for index, item in enumerate(items)}
        done = 0
        for future in as_completed(futures):
            index = futures[future]
            try:
                results[index] = future.result()
            except raise_on:
                for pending in futures:
                    pending.cancel()
                raise
            except Exception as e:
                errors[index] = f"{type(e).__name__}: {e}"
                logger.warning(f"Failed on {label} #{index}: {e}")
            done += 1
            record_progress(done)
