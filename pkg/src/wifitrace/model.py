"""Domain types shared by both protection protocols.

Connectivity events, equal-length epochs, system configuration, and the
per-query measurement records used for access-pattern and transfer-size
accounting.
"""

from __future__ import annotations

import hashlib
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError, RejectedEventError
from .field import M61, is_probable_prime

HEX_ALPHABET = "0123456789ABCDEF"
DEVICE_ID_DIGITS = 12

_SEPARATORS = re.compile(r"[:\-. ]")
_HEX12 = re.compile(r"^[0-9A-F]{12}$")


def canonical_device_id(raw: str) -> str:
    """Uppercase, separator-free 12-hex-digit form of a device id."""
    canon = _SEPARATORS.sub("", raw.strip()).upper()
    if not _HEX12.match(canon):
        raise ValueError(f"device id {raw!r} is not 12 hex digits after canonicalization")
    return canon


@dataclass(frozen=True)
class ConnectivityEvent:
    """One WiFi association: device connected to an access point at a time."""

    device_id: str
    location_id: str
    timestamp_ms: int

    def __post_init__(self):
        object.__setattr__(self, "device_id", canonical_device_id(self.device_id))
        if not self.location_id:
            raise ValueError("location_id must be non-empty")
        if self.timestamp_ms < 0:
            raise ValueError("timestamp_ms must be >= 0")


@dataclass(frozen=True)
class Epoch:
    """A sealed, equal-length time bucket of events."""

    epoch_id: int
    begin_ms: int
    end_ms: int
    events: tuple[ConnectivityEvent, ...]

    def __post_init__(self):
        for ev in self.events:
            if not (self.begin_ms <= ev.timestamp_ms < self.end_ms):
                raise ValueError(
                    f"event at {ev.timestamp_ms} outside epoch [{self.begin_ms},{self.end_ms})"
                )

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class SystemConfig:
    """Deployment parameters for both protocols.

    `server_count` must leave enough evaluation points to reconstruct the
    highest-degree product a query can produce: 2*(digest_digits+1)+1.
    """

    epoch_duration_s: int = 900
    digest_digits: int = 3           # v symbols per digest / location code
    alphabet_size: int = 16
    server_count: int = 9
    field_prime: int = M61
    distance_index: float = 0.125    # allowed fraction of a location's capacity
    capacities: dict[str, int] = field(default_factory=dict)
    top_k: int = 5
    location_pad: int = 32           # fixed-width location field inside ciphertexts
    cl_slots: int = 16               # padded slots in combined-location payloads

    def __post_init__(self):
        if self.epoch_duration_s <= 0:
            raise ConfigError("epoch_duration_s must be positive")
        if not (0 < self.digest_digits < DEVICE_ID_DIGITS):
            raise ConfigError("digest_digits must be in (0, 12)")
        if self.alphabet_size != len(HEX_ALPHABET):
            raise ConfigError("only the hex alphabet (size 16) is supported")
        if self.server_count < 2 * (self.digest_digits + 1) + 1:
            raise ConfigError(
                f"server_count {self.server_count} < 2*(v+1)+1 = {2 * (self.digest_digits + 1) + 1}"
            )
        if not is_probable_prime(self.field_prime):
            raise ConfigError(f"field_prime {self.field_prime} is not prime")
        if self.field_prime <= self.alphabet_size ** self.digest_digits:
            raise ConfigError("field_prime must exceed every encodable value")
        if not (0 < self.distance_index <= 1):
            raise ConfigError("distance_index must be in (0, 1]")
        if self.top_k <= 0:
            raise ConfigError("top_k must be positive")

    @property
    def epoch_duration_ms(self) -> int:
        return self.epoch_duration_s * 1000

    def capacity_of(self, location_id: str) -> int:
        try:
            return self.capacities[location_id]
        except KeyError:
            raise ConfigError(f"no capacity configured for location {location_id!r}") from None

    def with_capacities(self, capacities: dict[str, int]) -> "SystemConfig":
        return replace(self, capacities=dict(capacities))


def stream_origin(first_timestamp_ms: int, cfg: SystemConfig) -> int:
    """Origin of the epoch grid: first event's timestamp floored to the duration."""
    return first_timestamp_ms - (first_timestamp_ms % cfg.epoch_duration_ms)


def assign_epoch(event: ConnectivityEvent, cfg: SystemConfig, stream_origin_ms: int) -> int:
    """Index of the epoch containing `event` relative to the stream origin."""
    if event.timestamp_ms < stream_origin_ms:
        raise RejectedEventError(
            f"event at {event.timestamp_ms} precedes stream origin {stream_origin_ms}"
        )
    return (event.timestamp_ms - stream_origin_ms) // cfg.epoch_duration_ms


def epoch_interval(epoch_id: int, cfg: SystemConfig, stream_origin_ms: int) -> tuple[int, int]:
    """Wall-clock [begin, end) of an epoch counter — the counter-to-time map."""
    begin = stream_origin_ms + epoch_id * cfg.epoch_duration_ms
    return begin, begin + cfg.epoch_duration_ms


class EpochBucketer:
    """Tiles a time-ordered event stream into sealed epochs.

    Events for an epoch earlier than the one currently open are late: both
    engines delete their per-epoch state at seal time, so such events are
    rejected rather than silently re-opened.
    """

    def __init__(self, cfg: SystemConfig, origin_ms: int | None = None):
        self.cfg = cfg
        self.origin_ms = origin_ms
        self._open_id: int | None = None
        self._open_events: list[ConnectivityEvent] = []

    def feed(self, event: ConnectivityEvent) -> list[Epoch]:
        """Add one event; returns any epochs sealed by its arrival."""
        if self.origin_ms is None:
            self.origin_ms = stream_origin(event.timestamp_ms, self.cfg)
        eid = assign_epoch(event, self.cfg, self.origin_ms)
        sealed: list[Epoch] = []
        if self._open_id is None:
            self._open_id = eid
        elif eid < self._open_id:
            raise RejectedEventError(
                f"event at {event.timestamp_ms} belongs to sealed epoch {eid}"
            )
        elif eid > self._open_id:
            sealed.append(self._seal())
            self._open_id = eid
        self._open_events.append(event)
        return sealed

    def finish(self) -> list[Epoch]:
        """Seal and return the epoch still open, if any."""
        if self._open_id is None:
            return []
        return [self._seal()]

    def _seal(self) -> Epoch:
        begin, end = epoch_interval(self._open_id, self.cfg, self.origin_ms)
        epoch = Epoch(self._open_id, begin, end, tuple(self._open_events))
        self._open_id = None
        self._open_events = []
        return epoch


def bucket_events(events: list[ConnectivityEvent], cfg: SystemConfig,
                  origin_ms: int | None = None) -> list[Epoch]:
    """Bucket a full in-memory stream; epochs with no events are not emitted."""
    bucketer = EpochBucketer(cfg, origin_ms)
    epochs: list[Epoch] = []
    for ev in events:
        epochs.extend(bucketer.feed(ev))
    epochs.extend(bucketer.finish())
    return epochs


# -- measurement --------------------------------------------------------------


@dataclass
class MeasurementRecord:
    """Per-query accounting: touched rows, transferred bytes, wall time."""

    query_id: str
    accessed_rows: dict[int, tuple[tuple, ...]] = field(default_factory=dict)
    bytes_sent_to_server: dict[int, int] = field(default_factory=dict)
    bytes_received_from_server: dict[int, int] = field(default_factory=dict)
    wall_time_s: float = 0.0

    def add_transfer(self, server_index: int, sent: int = 0, received: int = 0):
        self.bytes_sent_to_server[server_index] = (
            self.bytes_sent_to_server.get(server_index, 0) + sent
        )
        self.bytes_received_from_server[server_index] = (
            self.bytes_received_from_server.get(server_index, 0) + received
        )

    @property
    def total_sent(self) -> int:
        return sum(self.bytes_sent_to_server.values())

    @property
    def total_received(self) -> int:
        return sum(self.bytes_received_from_server.values())


@dataclass
class QueryReport:
    """Answer plus the measurement evidence behind it."""

    query_id: str
    kind: str
    params: dict
    answer: object
    extras: dict
    record: MeasurementRecord


class QueryTimer:
    """Context manager stamping wall time onto a MeasurementRecord."""

    def __init__(self, record: MeasurementRecord):
        self.record = record

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self.record

    def __exit__(self, *exc):
        self.record.wall_time_s = time.perf_counter() - self._t0
        return False


# -- file interchange ----------------------------------------------------------

EVENTS_CSV_HEADER = "device_id,location_id,timestamp_ms"


def write_events_csv(path: str | Path, events: list[ConnectivityEvent]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(EVENTS_CSV_HEADER + "\n")
        for ev in events:
            fh.write(f"{ev.device_id},{ev.location_id},{ev.timestamp_ms}\n")


def read_events_csv(path: str | Path) -> list[ConnectivityEvent]:
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != EVENTS_CSV_HEADER:
            raise ConfigError(f"unexpected CSV header {header!r}")
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ConfigError(f"{path}:{line_no}: expected 3 fields, got {len(parts)}")
            events.append(ConnectivityEvent(parts[0], parts[1], int(parts[2])))
    return events


def dataset_fingerprint(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


_CONFIG_SCALARS = {
    "epoch_duration_s": int,
    "digest_digits": int,
    "alphabet_size": int,
    "server_count": int,
    "field_prime": int,
    "distance_index": float,
    "top_k": int,
    "location_pad": int,
    "cl_slots": int,
}


def write_config(path: str | Path, cfg: SystemConfig):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in _CONFIG_SCALARS:
            fh.write(f"{key}={getattr(cfg, key)}\n")
        for loc in sorted(cfg.capacities):
            fh.write(f"capacity.{loc}={cfg.capacities[loc]}\n")


def read_config(path: str | Path) -> SystemConfig:
    scalars: dict = {}
    capacities: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, value = line.split("=", 1)
            if key.startswith("capacity."):
                capacities[key[len("capacity."):]] = int(value)
            elif key in _CONFIG_SCALARS:
                scalars[key] = _CONFIG_SCALARS[key](value)
            else:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
    return SystemConfig(capacities=capacities, **scalars)
