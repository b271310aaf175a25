"""Synthetic WiFi-association streams.

Stands in for a live controller feed: seeded, reproducible, and shaped so
that devices revisit locations and move between several of them inside a
single epoch (the behaviours the combined-location and uniqueness columns
exist for).  One location carries a deliberately heavier visit weight — the
designed hotspot — so crowd-flow rankings have a known ground truth.
"""

from __future__ import annotations

import numpy as np

from .model import ConnectivityEvent

# fixed stream start so identical seeds give byte-identical CSVs
DEFAULT_START_MS = 1_583_020_800_000  # 2020-03-01T00:00:00Z

_SESSION_GAP_MS = (60_000, 300_000)  # spacing between events of one session


def device_name(i: int) -> str:
    """Locally-administered MAC-style id for synthetic device i."""
    return f"02{i:010X}"


def location_name(i: int) -> str:
    return f"loc{i:02d}"


def hotspot_index(location_count: int) -> int:
    """Index of the designed hotspot (not index 0, so id-order tie-breaks
    cannot mask a ranking bug)."""
    return location_count // 2


def location_weights(location_count: int) -> np.ndarray:
    """Visit weights: harmonic tail with a 3x spike at the hotspot."""
    w = 1.0 / (np.arange(location_count) + 2.0)
    w[hotspot_index(location_count)] = 3.0
    return w / w.sum()


def generate_synthetic_events(
    device_count: int,
    location_count: int,
    days: float,
    rate_model: float = 100.0,
    seed: int | None = None,
    start_ms: int = DEFAULT_START_MS,
) -> list[ConnectivityEvent]:
    """Reproducible event stream sorted by timestamp.

    `rate_model` is the mean number of association events per device per
    day.  Events are emitted in short sessions of 1-3 associations a few
    minutes apart, each choosing its location independently, so a device
    frequently appears at more than one location within a 15-minute epoch.
    Every device emits at least one event.
    """
    if device_count <= 0 or location_count <= 0 or days <= 0 or rate_model <= 0:
        raise ValueError("device_count, location_count, days and rate_model must be positive")
    rng = np.random.default_rng(seed)
    horizon_ms = int(days * 86_400_000)
    weights = location_weights(location_count)
    locations = [location_name(i) for i in range(location_count)]

    events: list[ConnectivityEvent] = []
    for d in range(device_count):
        device = device_name(d)
        target = max(1, int(rng.poisson(rate_model * days)))
        emitted = 0
        while emitted < target:
            anchor = start_ms + int(rng.integers(0, horizon_ms))
            burst = min(target - emitted, 1 + int(rng.choice(3, p=[0.5, 0.3, 0.2])))
            t = anchor
            for _ in range(burst):
                loc = locations[int(rng.choice(location_count, p=weights))]
                if t - start_ms >= horizon_ms:
                    break
                events.append(ConnectivityEvent(device, loc, t))
                emitted += 1
                t += int(rng.integers(*_SESSION_GAP_MS))
    events.sort(key=lambda ev: (ev.timestamp_ms, ev.device_id, ev.location_id))
    return events
