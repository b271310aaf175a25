"""Privacy-preserving WiFi-presence analytics toolkit.

Ingests device-connectivity events, protects them under either a searchable
deterministic-encryption protocol or a searchable secret-sharing protocol,
and answers location-tracing, contact-tracing, social-distancing and
crowd-flow queries against simulated untrusted servers — with a cleartext
oracle, access-pattern logging and byte accounting to check every claimed
property.
"""

from .model import (
    ConnectivityEvent,
    Epoch,
    MeasurementRecord,
    QueryReport,
    SystemConfig,
    assign_epoch,
    bucket_events,
    canonical_device_id,
    stream_origin,
)
from .generator import generate_synthetic_events
from .oracle import CleartextRelation, Violation
from .publisher import NotificationRegistry, Publisher

__all__ = [
    "ConnectivityEvent",
    "Epoch",
    "MeasurementRecord",
    "QueryReport",
    "SystemConfig",
    "assign_epoch",
    "bucket_events",
    "canonical_device_id",
    "stream_origin",
    "generate_synthetic_events",
    "CleartextRelation",
    "Violation",
    "NotificationRegistry",
    "Publisher",
]

__version__ = "0.1.0"
