import logging
import os
import threading
from typing import Dict, Iterable, List, Set

from ..models.records import ResultIdentity, WindowResult

logger = logging.getLogger(__name__)


class ResultStore:
    """
    Analytics store of one pipeline: the window results it emitted.

    Records are keyed by their identity (round, window start, window end, type,
    count), so a result replayed after recovery overwrites its earlier copy
    instead of adding a duplicate.
    """

    def __init__(self, pipeline_id: str):
        self.pipeline_id = pipeline_id
        self._records: Dict[ResultIdentity, WindowResult] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._records)

    def append(self, result: WindowResult) -> bool:
        """Upsert a result; True when its identity was new"""
        with self._lock:
            is_new = result.identity not in self._records
            self._records[result.identity] = result
        return is_new

    def extend(self, results: Iterable[WindowResult]) -> int:
        return sum(1 for result in results if self.append(result))

    def seed_history(self, results: Iterable[WindowResult]) -> int:
        """Pre-load history that existed before the experiment (round 0)"""
        added = 0
        for result in results:
            if result.round != 0:
                raise ValueError(f"history records belong to round 0, got round {result.round}")
            added += self.append(result)
        return added

    def record_set(self) -> Set[ResultIdentity]:
        with self._lock:
            return set(self._records)

    def records(self) -> List[WindowResult]:
        with self._lock:
            values = list(self._records.values())
        return sorted(values, key=lambda r: r.identity)

    def missing_from(self, other: "ResultStore") -> List[WindowResult]:
        """Records held here whose identity the other store lacks"""
        present = other.record_set()
        return [r for r in self.records() if r.identity not in present]

    def dump(self, path: str) -> int:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        records = self.records()
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for record in records:
                f.write(record.to_line())
                f.write("\n")
        logger.info(f"Wrote {len(records)} results of {self.pipeline_id} to {path}")
        return len(records)

    @classmethod
    def load(cls, pipeline_id: str, path: str) -> "ResultStore":
        store = cls(pipeline_id)
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    store.append(WindowResult.from_line(line))
        return store
