from dataclasses import dataclass
from typing import Tuple

ResultIdentity = Tuple[int, int, int, str, int]


@dataclass(frozen=True)
class WindowResult:
    """Count of one vehicle type inside one tumbling event-time window"""
    window_start_ms: int
    window_end_ms: int
    vehicle_type: str
    count: int
    emit_time_ms: int
    sink_index: int
    round: int = 0

    @property
    def identity(self) -> ResultIdentity:
        return (self.round, self.window_start_ms, self.window_end_ms, self.vehicle_type, self.count)

    def to_line(self) -> str:
        return (
            f"{self.round},{self.window_start_ms},{self.window_end_ms},{self.vehicle_type},"
            f"{self.count},{self.emit_time_ms},{self.sink_index}"
        )

    @classmethod
    def from_line(cls, line: str) -> "WindowResult":
        parts = line.rstrip("\n").split(",")
        if len(parts) != 7:
            raise ValueError(f"expected 7 fields, got {len(parts)}: {line!r}")
        return cls(
            round=int(parts[0]),
            window_start_ms=int(parts[1]),
            window_end_ms=int(parts[2]),
            vehicle_type=parts[3],
            count=int(parts[4]),
            emit_time_ms=int(parts[5]),
            sink_index=int(parts[6]),
        )
