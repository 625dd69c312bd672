import logging
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from ..core.exceptions import (
    ConfigurationError,
    OffsetOutOfRangeError,
    TopicExistsError,
    UnknownGroupError,
    UnknownPartitionError,
    UnknownTopicError,
)
from ..utils.hashing import stable_hash64

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Record:
    key: bytes
    payload: bytes
    offset: int
    ingest_time_ms: int


class _Partition:
    __slots__ = ("log", "lock")

    def __init__(self):
        self.log: List[Record] = []
        self.lock = threading.Lock()


@dataclass
class Topic:
    name: str
    partition_count: int
    partitions: List[_Partition] = field(repr=False)


@dataclass
class ConsumerGroup:
    group_id: str
    committed: Dict[Tuple[str, int], int] = field(default_factory=dict)


class StreamBus:
    """
    In-process partitioned log with consumer groups.

    Records are appended per partition with dense offsets starting at 0. Consumers
    fetch from their group's committed position and move it explicitly with
    commit_offset, so a position can be rewound for replay after recovery.
    """

    def __init__(self):
        self._topics: Dict[str, Topic] = {}
        self._groups: Dict[str, ConsumerGroup] = {}
        self._lock = threading.RLock()

    # ------------------------------------------------------------------
    # Topics and groups
    # ------------------------------------------------------------------

    def create_topic(self, name: str, partition_count: int) -> Topic:
        if partition_count < 1:
            raise ConfigurationError(f"topic {name} needs at least one partition")
        with self._lock:
            if name in self._topics:
                raise TopicExistsError(f"topic {name} already exists")
            topic = Topic(name, partition_count, [_Partition() for _ in range(partition_count)])
            self._topics[name] = topic
        logger.debug(f"Created topic {name} with {partition_count} partitions")
        return topic

    def delete_topic(self, name: str) -> bool:
        with self._lock:
            if self._topics.pop(name, None) is None:
                return False
            for group in self._groups.values():
                for key in [k for k in group.committed if k[0] == name]:
                    del group.committed[key]
        logger.debug(f"Deleted topic {name}")
        return True

    def has_topic(self, name: str) -> bool:
        return name in self._topics

    def topics(self) -> List[str]:
        with self._lock:
            return sorted(self._topics)

    def partition_count(self, topic: str) -> int:
        return self._topic(topic).partition_count

    def register_group(self, group_id: str) -> ConsumerGroup:
        with self._lock:
            group = self._groups.get(group_id)
            if group is None:
                group = ConsumerGroup(group_id)
                self._groups[group_id] = group
            return group

    def _topic(self, name: str) -> Topic:
        topic = self._topics.get(name)
        if topic is None:
            raise UnknownTopicError(f"unknown topic {name}")
        return topic

    def _partition(self, topic: str, partition: int) -> _Partition:
        t = self._topic(topic)
        if not 0 <= partition < t.partition_count:
            raise UnknownPartitionError(f"topic {topic} has no partition {partition}")
        return t.partitions[partition]

    def _group(self, group_id: str) -> ConsumerGroup:
        group = self._groups.get(group_id)
        if group is None:
            raise UnknownGroupError(f"unknown consumer group {group_id}")
        return group

    # ------------------------------------------------------------------
    # Produce / consume
    # ------------------------------------------------------------------

    def partition_for(self, topic: str, key: bytes) -> int:
        return stable_hash64(key) % self._topic(topic).partition_count

    def publish(self, topic: str, key: bytes, payload: bytes, ingest_time_ms: int) -> Tuple[int, int]:
        """Append a record to the partition chosen by key hash; returns (partition, offset)"""
        t = self._topic(topic)
        partition = stable_hash64(key) % t.partition_count
        part = t.partitions[partition]
        with part.lock:
            offset = len(part.log)
            part.log.append(Record(key, payload, offset, ingest_time_ms))
        return partition, offset

    def fetch(self, group_id: str, topic: str, partition: int, max_records: int) -> List[Record]:
        """Records from the group's committed offset onward; does not move the position"""
        group = self._group(group_id)
        part = self._partition(topic, partition)
        start = group.committed.get((topic, partition), 0)
        with part.lock:
            return part.log[start:start + max_records]

    def commit_offset(self, group_id: str, topic: str, partition: int, offset: int):
        group = self._group(group_id)
        part = self._partition(topic, partition)
        with part.lock:
            end = len(part.log)
        if not 0 <= offset <= end:
            raise OffsetOutOfRangeError(
                f"offset {offset} outside [0, {end}] for {topic}/{partition}"
            )
        with self._lock:
            group.committed[(topic, partition)] = offset

    def committed(self, group_id: str, topic: str, partition: int) -> int:
        group = self._group(group_id)
        self._partition(topic, partition)
        return group.committed.get((topic, partition), 0)

    def end_offset(self, topic: str, partition: int) -> int:
        part = self._partition(topic, partition)
        with part.lock:
            return len(part.log)

    def records(self, topic: str, partition: int) -> List[Record]:
        part = self._partition(topic, partition)
        with part.lock:
            return list(part.log)

    def total_records(self, topic: str) -> int:
        t = self._topic(topic)
        return sum(self.end_offset(topic, p) for p in range(t.partition_count))

    def dump_topic(self, topic: str, path: str) -> int:
        """Write every record as `payload,partition,offset`, partition by partition"""
        t = self._topic(topic)
        count = 0
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for p in range(t.partition_count):
                for record in self.records(topic, p):
                    f.write(f"{record.payload.decode('utf-8')},{p},{record.offset}\n")
                    count += 1
        logger.info(f"Dumped {count} records of {topic} to {path}")
        return count
