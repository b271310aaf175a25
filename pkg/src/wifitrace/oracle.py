"""Cleartext reference queries over raw events.

Ground truth for every protocol-equivalence test: location tracing, contact
tracing, social distancing, and crowd flow computed directly on the event
stream, with contact bounded by same-epoch co-presence (the encrypted
protocols cannot see sub-epoch time).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .model import (
    ConnectivityEvent,
    SystemConfig,
    assign_epoch,
    bucket_events,
    canonical_device_id,
    stream_origin,
)


@dataclass(frozen=True)
class Violation:
    location_id: str
    epoch_id: int
    unique_count: int


class CleartextRelation:
    """Per-epoch tabulations of an event stream, queried like the servers are."""

    def __init__(self, events: list[ConnectivityEvent], cfg: SystemConfig,
                 origin_ms: int | None = None):
        self.cfg = cfg
        if origin_ms is None and events:
            origin_ms = stream_origin(min(ev.timestamp_ms for ev in events), cfg)
        self.origin_ms = origin_ms
        # (epoch, location) -> set of devices; (epoch, device) -> set of locations
        self._devices_at: dict[tuple[int, str], set[str]] = {}
        self._locations_of: dict[tuple[int, str], set[str]] = {}
        self.epoch_ids: list[int] = []
        for epoch in bucket_events(sorted(events, key=lambda e: e.timestamp_ms), cfg, origin_ms):
            self.epoch_ids.append(epoch.epoch_id)
            for ev in epoch.events:
                self._devices_at.setdefault((epoch.epoch_id, ev.location_id), set()).add(ev.device_id)
                self._locations_of.setdefault((epoch.epoch_id, ev.device_id), set()).add(ev.location_id)

    def _epochs_in(self, epoch_from: int, epoch_to: int) -> list[int]:
        return [e for e in self.epoch_ids if epoch_from <= e <= epoch_to]

    def location_trace(self, device_id: str, epoch_from: int, epoch_to: int) -> set[str]:
        """Distinct locations the device connected to within the epoch range."""
        device_id = canonical_device_id(device_id)
        out: set[str] = set()
        for e in self._epochs_in(epoch_from, epoch_to):
            out |= self._locations_of.get((e, device_id), set())
        return out

    def locations_per_epoch(self, device_id: str, epoch_from: int, epoch_to: int) -> dict[int, set[str]]:
        device_id = canonical_device_id(device_id)
        return {
            e: set(self._locations_of[(e, device_id)])
            for e in self._epochs_in(epoch_from, epoch_to)
            if (e, device_id) in self._locations_of
        }

    def user_trace(self, device_id: str, epoch_from: int, epoch_to: int) -> set[str]:
        """Devices (other than the queried one) sharing a (location, epoch) with it."""
        device_id = canonical_device_id(device_id)
        out: set[str] = set()
        for e, locs in self.locations_per_epoch(device_id, epoch_from, epoch_to).items():
            for loc in locs:
                out |= self._devices_at.get((e, loc), set())
        out.discard(device_id)
        return out

    def unique_counts(self, epoch_from: int, epoch_to: int) -> dict[tuple[str, int], int]:
        """Distinct-device count per (location, epoch) in range."""
        counts: dict[tuple[str, int], int] = {}
        for (e, loc), devices in self._devices_at.items():
            if epoch_from <= e <= epoch_to:
                counts[(loc, e)] = len(devices)
        return counts

    def social_distance(self, epoch_from: int, epoch_to: int,
                        cfg: SystemConfig | None = None) -> list[Violation]:
        """(location, epoch) pairs whose distinct-device count exceeds the allowance."""
        cfg = cfg or self.cfg
        violations = []
        for (loc, e), count in sorted(self.unique_counts(epoch_from, epoch_to).items(),
                                      key=lambda kv: (kv[0][1], kv[0][0])):
            if count > cfg.capacity_of(loc) * cfg.distance_index:
                violations.append(Violation(loc, e, count))
        return violations

    def crowd_flow(self, epoch_from: int, epoch_to: int, k: int) -> list[tuple[str, int]]:
        """Top-k locations by distinct visitors over the whole range; ties by id."""
        if k <= 0:
            raise ConfigError("crowd flow requires k > 0")
        visitors: dict[str, set[str]] = {}
        for (e, loc), devices in self._devices_at.items():
            if epoch_from <= e <= epoch_to:
                visitors.setdefault(loc, set()).update(devices)
        ranked = sorted(visitors.items(), key=lambda kv: (-len(kv[1]), kv[0]))
        return [(loc, len(devs)) for loc, devs in ranked[:k]]

    def epoch_of(self, event: ConnectivityEvent) -> int:
        return assign_epoch(event, self.cfg, self.origin_ms)
