"""Encryption-engine checks: the four-row worked epoch must reproduce the
pinned relation structure and query answers; random epochs must replay the
encryption logic in cleartext; all optimization modes must agree."""

import numpy as np
import pytest

from wifitrace.cquest import CipherSuite, CquestEncrypter, notify
from wifitrace.errors import (
    EncodingError,
    QueryError,
    SealedEpochError,
    UnauthorizedQueryError,
)
from wifitrace.generator import generate_synthetic_events, location_name
from wifitrace.model import SystemConfig, bucket_events
from wifitrace.publisher import NotificationRegistry, Publisher

from conftest import D1, D2, small_random_deployment


def _decrypt_rows(deployment, epoch_id):
    suite, server = deployment.suite, deployment.cq_server
    out = []
    for j in range(server.row_count(epoch_id)):
        row = server.get_row(epoch_id, j)
        out.append({
            "id": suite.id.decrypt(row["a_id"]),
            "u": suite.decrypt_u(row["a_u"]),
            "l": suite.l.decrypt(row["a_l"]),
            "cl": suite.cl.decrypt(row["a_cl"]),
            "delta": suite.delta.decrypt(row["a_delta"]),
        })
    return out


def test_fixture_epoch_reproduces_pinned_structure(fixture_deployment):
    rows = _decrypt_rows(fixture_deployment, 0)
    x = 0
    # row 1: first appearance of d1 -> searchable id, own location list (l1, l2)
    assert rows[0]["id"] == (D1, 1, x)
    assert rows[0]["u"] == (1, 1, x)
    assert rows[0]["l"] == ("l1", 1)
    assert rows[0]["cl"][0] == 1 and rows[0]["cl"][2:] == ("l1", "l2")
    # row 2: first appearance of d2 -> searchable, list is d2's own (l2)
    assert rows[1]["id"] == (D2, 1, x)
    assert rows[1]["u"] == (1, 2, x)
    assert rows[1]["l"] == ("l2", 1)
    assert rows[1]["cl"][0] == 1 and rows[1]["cl"][2:] == ("l2",)
    # row 3: d1 again at a new location -> nonce id, unique bit, counter (l2, 2)
    assert rows[2]["id"][0] == D1 and rows[2]["id"][1] not in (0, 1) and rows[2]["id"][2] == x
    assert rows[2]["u"][0] == 1 and rows[2]["u"][1] == 3
    assert rows[2]["l"] == ("l2", 2)
    assert rows[2]["cl"][0] == 0  # fake payload
    # row 4: d1 back at a seen location -> uniqueness bit 0, counter (l1, 2)
    assert rows[3]["id"][0] == D1 and rows[3]["id"][1] not in (0, 1)
    assert rows[3]["u"][0] == 0
    assert rows[3]["l"] == ("l1", 2)
    assert rows[3]["cl"][0] == 0
    assert all(r["delta"] == (x,) for r in rows)
    assert fixture_deployment.cq_encrypter.counters.c_max == 2


def test_single_event_epoch(fixture_cfg):
    from wifitrace.model import ConnectivityEvent

    events = [ConnectivityEvent(D1, "l1", 500)]
    epoch = bucket_events(events, fixture_cfg)[0]
    suite = CipherSuite(b"a" * 16, b"b" * 16, fixture_cfg)
    encrypter = CquestEncrypter(suite, fixture_cfg, np.random.default_rng(0))
    rows, summary = encrypter.encrypt_epoch(epoch)
    assert len(rows) == 1
    assert encrypter.counters.c_max == 1
    assert suite.cl.decrypt(rows[0].a_cl)[2:] == ("l1",)
    assert summary.unique_counts == {"l1": 1}


def _shadow_replay(epoch):
    """Independent cleartext replay of the per-epoch encryption bookkeeping."""
    lists: dict[str, list[str]] = {}
    for ev in epoch.events:
        seen_locs = lists.setdefault(ev.device_id, [])
        if ev.location_id not in seen_locs:
            seen_locs.append(ev.location_id)
    seen, alpha, counter = set(), {}, {}
    rows = []
    for y, ev in enumerate(epoch.events, start=1):
        d, loc = ev.device_id, ev.location_id
        counter[loc] = counter.get(loc, 0) + 1
        if d not in seen:
            kind, unique = "first", 1
            seen.add(d)
            alpha[d] = {loc}
        elif loc not in alpha[d]:
            kind, unique = "moved", 1
            alpha[d].add(loc)
        else:
            kind, unique = "repeat", 0
        rows.append({
            "device": d, "kind": kind, "unique": unique, "row": y,
            "location": loc, "counter": counter[loc],
            "cl": tuple(lists[d]) if kind == "first" else None,
        })
    return rows


def test_random_epoch_matches_cleartext_shadow():
    cfg = SystemConfig(capacities={location_name(i): 8 for i in range(6)})
    events = generate_synthetic_events(50, 6, 0.01, rate_model=1200, seed=17)
    epochs = bucket_events(events, cfg)
    epoch = max(epochs, key=len)
    assert len(epoch) >= 500
    suite = CipherSuite(b"a" * 16, b"b" * 16, cfg)
    encrypter = CquestEncrypter(suite, cfg, np.random.default_rng(2))
    rows, summary = encrypter.encrypt_epoch(epoch)
    shadow = _shadow_replay(epoch)
    for enc, ref in zip(rows, shadow):
        device, second, x = suite.id.decrypt(enc.a_id)
        assert device == ref["device"] and x == epoch.epoch_id
        assert (second == 1) == (ref["kind"] == "first")
        bit, row_index, payload = suite.decrypt_u(enc.a_u)
        assert bit == ref["unique"]
        if bit == 1:
            assert (row_index, payload) == (ref["row"], epoch.epoch_id)
        assert suite.l.decrypt(enc.a_l) == (ref["location"], ref["counter"])
        cl = suite.cl.decrypt(enc.a_cl)
        if ref["cl"] is None:
            assert cl[0] == 0
        else:
            assert cl[0] == 1 and cl[2:] == ref["cl"]
    assert summary.row_count == len(shadow)


def test_frequency_flatness_within_epoch():
    deployment = small_random_deployment(seed=31)
    server = deployment.cq_server
    for epoch_id in server.epochs_in(deployment.lo, deployment.hi):
        for column in ("a_id", "a_u", "a_l"):
            values = [server.get_row(epoch_id, j)[column]
                      for j in range(server.row_count(epoch_id))]
            assert len(set(values)) == len(values), (epoch_id, column)


def test_searchability_one_hit_per_present_device_epoch():
    deployment = small_random_deployment(seed=32)
    suite, server = deployment.suite, deployment.cq_server
    present: dict[tuple[str, int], int] = {}
    for ev in deployment.events:
        eid = deployment.oracle.epoch_of(ev)
        present[(ev.device_id, eid)] = present.get((ev.device_id, eid), 0) + 1
    for (device, eid) in present:
        token = suite.id.encrypt((device, 1, eid))
        response = server.select_equal("a_id", [token], eid, eid, ["a_cl"])
        assert len(response.cells) == 1


def test_location_trace_fixture(fixture_deployment):
    report = fixture_deployment.cq.location_trace(D1, 0, 0)
    assert report.answer == {"l1", "l2"}
    assert report.extras["per_epoch"] == {0: {"l1", "l2"}}


def test_unverified_device_refused_before_server_contact(fixture_deployment):
    fixture_deployment.cq_server.logging_enabled = True
    with pytest.raises(UnauthorizedQueryError):
        fixture_deployment.cq.location_trace(D2, 0, 0)
    assert fixture_deployment.publisher.audit_log[-1]["result"] == "rejected"


def test_user_trace_fixture_trapdoors_and_answer(fixture_deployment):
    report = fixture_deployment.cq.user_trace(D1, 0, 0)
    assert report.answer == {D2}
    # c_max = 2, locations {l1, l2}: trapdoors E(l1,1), E(l1,2), E(l2,1), E(l2,2)
    assert report.extras["trapdoor_count"] == 4
    assert report.extras["notified"] == [D2]


def test_user_trace_infected_alone(fixture_cfg):
    from wifitrace.model import ConnectivityEvent

    events = [ConnectivityEvent(D1, "l1", 100), ConnectivityEvent(D1, "l2", 200)]
    from conftest import Deployment

    deployment = Deployment(events, fixture_cfg, infected=[D1])
    assert deployment.cq.user_trace(D1, 0, 0).answer == set()


def test_counter_modes_agree_and_order_trapdoor_counts():
    deployment = small_random_deployment(seed=33)
    device = deployment.events[0].device_id
    deployment.publisher = Publisher.from_device_ids([device])
    deployment.cq.publisher = deployment.publisher
    counts = {}
    answers = {}
    for mode in ("cmax", "epoch", "epoch-location"):
        report = deployment.cq.user_trace(device, deployment.lo, deployment.hi,
                                          counter_mode=mode)
        counts[mode] = report.extras["trapdoor_count"]
        answers[mode] = report.answer
    assert answers["cmax"] == answers["epoch"] == answers["epoch-location"]
    assert counts["epoch-location"] <= counts["epoch"] <= counts["cmax"]
    assert counts["epoch-location"] < counts["cmax"]  # strictly fewer on mixed data
    assert answers["cmax"] == deployment.oracle.user_trace(device, deployment.lo, deployment.hi)


def test_social_distance_modes_agree(random_deployment):
    d = random_deployment
    expected = [(v.location_id, v.epoch_id, v.unique_count)
                for v in d.oracle.social_distance(d.lo, d.hi)]
    assert expected, "dataset should produce violations"
    for opt in ("none", "token", "htab"):
        report = d.cq.social_distance(d.lo, d.hi, opt=opt)
        assert report.answer == expected, opt
    with pytest.raises(QueryError):
        d.cq.social_distance(d.lo, d.hi, opt="bogus")


def test_social_distance_offenders_match_oracle_sets(random_deployment):
    d = random_deployment
    base = d.cq.social_distance(d.lo, d.hi, opt="none")
    htab = d.cq.social_distance(d.lo, d.hi, opt="htab")
    for (loc, eid, _count) in base.answer:
        expected = {dev for ev in d.events
                    if ev.location_id == loc and d.oracle.epoch_of(ev) == eid
                    for dev in [ev.device_id]}
        assert set(base.extras["offenders"][(loc, eid)]) == expected
        assert set(htab.extras["offenders"][(loc, eid)]) == expected


def test_token_mode_shrinks_request_htab_shrinks_response(random_deployment):
    d = random_deployment
    base = d.cq.social_distance(d.lo, d.hi, opt="none", include_offenders=False)
    token = d.cq.social_distance(d.lo, d.hi, opt="token", include_offenders=False)
    htab = d.cq.social_distance(d.lo, d.hi, opt="htab", include_offenders=False)
    assert token.record.total_sent < base.record.total_sent
    assert token.record.total_received == base.record.total_received
    assert htab.record.total_received < base.record.total_received


def test_crowd_flow_fixture_and_bounds(fixture_deployment):
    report = fixture_deployment.cq.crowd_flow(0, 0, 2)
    assert report.answer == [("l2", 2), ("l1", 1)]
    assert fixture_deployment.cq.crowd_flow(0, 0, 99).answer == [("l2", 2), ("l1", 1)]
    with pytest.raises(QueryError):
        fixture_deployment.cq.crowd_flow(0, 0, 0)


def test_crowd_flow_modes_match_oracle(random_deployment):
    d = random_deployment
    expected = d.oracle.crowd_flow(d.lo, d.hi, 4)
    for opt in ("none", "counters", "token", "htab"):
        assert d.cq.crowd_flow(d.lo, d.hi, 4, opt=opt).answer == expected


def test_crowd_flow_k1_finds_designed_hotspot():
    """Sparse visit schedules keep per-location visitor sets unsaturated, so
    the generator's weighted hotspot must rank first."""
    from wifitrace.generator import hotspot_index
    from conftest import Deployment

    locations = 20
    events = generate_synthetic_events(40, locations, 1.0, rate_model=10, seed=61)
    cfg = SystemConfig(capacities={location_name(i): 40 for i in range(locations)},
                       distance_index=1.0)
    d = Deployment(events, cfg, infected=[events[0].device_id])
    hotspot = location_name(hotspot_index(locations))
    assert d.oracle.crowd_flow(d.lo, d.hi, 1)[0][0] == hotspot
    assert d.cq.crowd_flow(d.lo, d.hi, 1).answer[0][0] == hotspot
    assert d.iq.crowd_flow(d.lo, d.hi, 1).answer[0][0] == hotspot


def test_notify_is_registry_intersection():
    registry = NotificationRegistry(contacts={D1: "x"})
    assert notify(set(), registry) == []
    assert notify({D2}, registry) == []
    assert notify({D1, D2}, registry) == [D1]


def test_cl_slots_overflow_raises():
    cfg = SystemConfig(capacities={}, cl_slots=2)
    from wifitrace.model import ConnectivityEvent

    events = [ConnectivityEvent(D1, f"loc{i}", 100 + i) for i in range(3)]
    epoch = bucket_events(events, cfg)[0]
    encrypter = CquestEncrypter(CipherSuite(b"a" * 16, b"b" * 16, cfg), cfg,
                                np.random.default_rng(0))
    with pytest.raises(EncodingError):
        encrypter.encrypt_epoch(epoch)


def test_server_rejects_duplicate_epoch(fixture_deployment, fixture_epoch):
    rows, summary = fixture_deployment.cq_encrypter.encrypt_epoch(fixture_epoch)
    with pytest.raises(SealedEpochError):
        fixture_deployment.cq_server.ingest_epoch(
            fixture_epoch.epoch_id, [r.as_cells() for r in rows], summary.table_blob)
