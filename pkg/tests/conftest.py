"""Shared fixtures: the four-row worked epoch and small random deployments."""

from __future__ import annotations

import numpy as np
import pytest

from wifitrace.cquest import CipherSuite, CquestClient, CquestEncrypter
from wifitrace.generator import device_name, generate_synthetic_events, location_name
from wifitrace.iquest import IquestClient, IquestEncrypter
from wifitrace.model import ConnectivityEvent, SystemConfig, bucket_events, stream_origin
from wifitrace.oracle import CleartextRelation
from wifitrace.publisher import NotificationRegistry, Publisher
from wifitrace.servers import ShareCluster, TokenStoreServer

# the canonical four-row epoch: d1@l1, d2@l2, d1@l2, d1@l1 inside one epoch
D1 = "0000000000D1"
D2 = "0000000000D2"


@pytest.fixture
def fixture_cfg() -> SystemConfig:
    # capacity 8 at distance index 0.125 puts the alarm threshold at 1 occupant
    return SystemConfig(capacities={"l1": 8, "l2": 8}, distance_index=0.125)


@pytest.fixture
def fixture_events() -> list[ConnectivityEvent]:
    return [
        ConnectivityEvent(D1, "l1", 1_000),
        ConnectivityEvent(D2, "l2", 2_000),
        ConnectivityEvent(D1, "l2", 3_000),
        ConnectivityEvent(D1, "l1", 4_000),
    ]


@pytest.fixture
def fixture_epoch(fixture_events, fixture_cfg):
    epochs = bucket_events(fixture_events, fixture_cfg)
    assert len(epochs) == 1
    return epochs[0]


class Deployment:
    """Both protocols plus the oracle over one event stream."""

    def __init__(self, events, cfg, infected, seed=0, contacts=None):
        self.events = events
        self.cfg = cfg
        self.origin = stream_origin(events[0].timestamp_ms, cfg)
        self.epochs = bucket_events(events, cfg, self.origin)
        self.oracle = CleartextRelation(events, cfg, self.origin)
        self.lo = min(self.oracle.epoch_ids)
        self.hi = max(self.oracle.epoch_ids)
        self.publisher = Publisher.from_device_ids(infected)
        self.registry = NotificationRegistry(
            contacts=contacts if contacts is not None else {})
        rng = np.random.default_rng(seed)

        self.suite = CipherSuite(b"\x11" * 32, b"\x22" * 32, cfg)
        self.cq_encrypter = CquestEncrypter(self.suite, cfg, rng)
        self.cq_server = TokenStoreServer(expansion_cipher=self.suite.u_outer)
        self.cq_summaries = [self.cq_encrypter.ingest(ep, self.cq_server) for ep in self.epochs]
        self.cq = CquestClient(self.suite, cfg, self.cq_server,
                               self.cq_encrypter.counters, self.publisher, self.registry)

        self.iq_encrypter = IquestEncrypter(cfg, np.random.default_rng(seed + 1),
                                            digest_key=b"\x33" * 32)
        self.cluster = ShareCluster(cfg.server_count, cfg.field_prime)
        for ep in self.epochs:
            self.iq_encrypter.ingest(ep, self.cluster)
        self.iq = IquestClient(cfg, self.cluster, self.iq_encrypter, self.publisher,
                               NotificationRegistry(contacts=dict(self.registry.contacts)),
                               rng=np.random.default_rng(seed + 2))


@pytest.fixture
def fixture_deployment(fixture_events, fixture_cfg):
    return Deployment(fixture_events, fixture_cfg, infected=[D1],
                      contacts={D2: "contact-d2@example.org"})


def small_random_deployment(seed: int, devices=12, locations=5, days=0.05,
                            rate=300.0, distance_index=0.25, capacity=8,
                            infected_count=2) -> Deployment:
    events = generate_synthetic_events(devices, locations, days, rate_model=rate, seed=seed)
    cfg = SystemConfig(
        capacities={location_name(i): capacity for i in range(locations)},
        distance_index=distance_index,
    )
    infected = [device_name(i) for i in range(infected_count)]
    contacts = {device_name(i): f"c{i}@example.org" for i in range(devices) if i % 3}
    return Deployment(events, cfg, infected, seed=seed, contacts=contacts)


@pytest.fixture
def random_deployment():
    return small_random_deployment(seed=23)
