import numpy as np
import pytest

from wifitrace.errors import CapabilityError, QueryError, SealedEpochError, ShapeError
from wifitrace.field import M61
from wifitrace.servers import (
    EpochShareBlock,
    ShareCluster,
    ShareServer,
    TokenStoreServer,
    access_log_csv,
    transfer_csv,
)
from wifitrace.sharing import make_sss

from conftest import D1, small_random_deployment


def _cells(n, tag):
    return {
        "a_id": f"id-{tag}-{n}".encode(),
        "a_u": f"u-{tag}-{n}".encode(),
        "a_l": f"l-{tag}-{n}".encode(),
        "a_cl": f"cl-{tag}-{n}".encode(),
        "a_delta": f"d-{tag}".encode(),
    }


def test_ingest_empty_and_readback():
    server = TokenStoreServer()
    server.ingest_epoch(0, [])
    assert server.row_count(0) == 0
    rows = [_cells(n, "e1") for n in range(5)]
    server.ingest_epoch(1, rows)
    for n in range(5):
        assert server.get_row(1, n) == rows[n]
    with pytest.raises(SealedEpochError):
        server.ingest_epoch(1, rows)


def test_large_ingest_readback():
    server = TokenStoreServer()
    for e in range(10):
        server.ingest_epoch(e, [_cells(n, f"e{e}") for n in range(1000)])
    assert server.total_rows(0, 9) == 10_000
    assert server.get_row(7, 431)["a_id"] == b"id-e7-431"


def test_select_equal_semantics():
    server = TokenStoreServer()
    server.ingest_epoch(0, [_cells(n, "x") for n in range(4)])
    server.ingest_epoch(5, [_cells(n, "y") for n in range(4)])
    hit = server.select_equal("a_id", [b"id-x-2"], 0, 9, ["a_cl"])
    assert [(c.epoch_id, c.row_index, c.payload) for c in hit.cells] == [(0, 2, b"cl-x-2")]
    # epoch range filters
    assert server.select_equal("a_id", [b"id-x-2"], 1, 9, ["a_cl"]).cells == []
    assert server.select_equal("a_id", [b"absent"], 0, 9, ["a_cl"]).cells == []
    # multi-token equals union of single-token results
    multi = server.select_equal("a_id", [b"id-x-1", b"id-y-3"], 0, 9, ["a_l"])
    singles = [server.select_equal("a_id", [t], 0, 9, ["a_l"]).cells
               for t in (b"id-x-1", b"id-y-3")]
    assert multi.cells == sorted(
        (c for cells in singles for c in cells), key=lambda c: (c.epoch_id, c.row_index))
    with pytest.raises(QueryError):
        server.select_equal("a_cl", [b"t"], 0, 9, ["a_id"])
    with pytest.raises(QueryError):
        server.select_equal("a_id", [b"t"], 0, 9, ["bogus"])


def test_select_determinism_and_log_completeness():
    server = TokenStoreServer()
    server.logging_enabled = True
    server.ingest_epoch(0, [_cells(n, "x") for n in range(6)])
    tokens = [b"id-x-5", b"id-x-0", b"id-x-3"]
    a = server.select_equal("a_id", tokens, 0, 0, ["a_l", "a_id"])
    b = server.select_equal("a_id", tokens, 0, 0, ["a_l", "a_id"])
    assert a.cells == b.cells and a.touches == b.touches
    logged_rows = {(e, r) for e, r, _ in a.touches}
    assert {(c.epoch_id, c.row_index) for c in a.cells} <= logged_rows


def test_expansion_requires_capability_and_matches_baseline(fixture_deployment):
    d = fixture_deployment
    gamma = d.suite.uniqueness_gamma(0)
    expanded = d.cq_server.expand_and_select(gamma, 0, 0, ["a_l"])
    tokens = [d.suite.uniqueness_trapdoor(0, y) for y in range(1, 5)]
    baseline = d.cq_server.select_equal("a_u", tokens, 0, 0, ["a_l"])
    assert expanded.cells == baseline.cells
    assert expanded.request_bytes < baseline.request_bytes
    bare = TokenStoreServer()
    bare.ingest_epoch(0, [_cells(n, "x") for n in range(2)])
    with pytest.raises(CapabilityError):
        bare.expand_and_select(gamma, 0, 0, ["a_l"])


def test_expand_empty_epoch(fixture_deployment):
    resp = fixture_deployment.cq_server.expand_and_select(
        fixture_deployment.suite.uniqueness_gamma(99), 99, 99, ["a_l"])
    assert resp.cells == []


def test_fetch_tables(fixture_deployment):
    resp = fixture_deployment.cq_server.fetch_location_tables(0, 0)
    assert len(resp.blobs) == 1 and resp.blobs[0][0] == 0
    table = fixture_deployment.suite.decrypt_table(resp.blobs[0][1])
    assert table == {"l1": 1, "l2": 2}


def _tiny_blocks(rows=3, servers=3, epoch=0):
    rng = np.random.default_rng(0)
    blocks = []
    for i in range(1, servers + 1):
        blocks.append(EpochShareBlock(
            server_index=i, epoch_id=epoch,
            smid=rng.integers(0, M61, (rows, 3, 16), dtype=np.uint64),
            sid=rng.integers(0, M61, rows, dtype=np.uint64),
            su=rng.integers(0, M61, rows, dtype=np.uint64),
            sml=rng.integers(0, M61, (rows, 3, 16), dtype=np.uint64),
            sl=rng.integers(0, M61, rows, dtype=np.uint64),
        ))
    return blocks


def test_share_server_rejects_foreign_blocks_and_fragments():
    server = ShareServer(2, M61)
    blocks = _tiny_blocks()
    with pytest.raises(ShapeError):
        server.ingest_epoch(blocks[0])  # block built for server 1
    server.ingest_epoch(blocks[1])
    with pytest.raises(SealedEpochError):
        server.ingest_epoch(blocks[1])
    frag = make_sss("ABC", 3, rng=np.random.default_rng(1))[0]  # server 1's fragment
    with pytest.raises(ShapeError):
        server.eval_location_trace(frag, 0, 0)
    bad_shape = make_sss("AB", 3, rng=np.random.default_rng(1))[1]
    with pytest.raises(ShapeError):
        server.eval_location_trace(bad_shape, 0, 0)


def test_cluster_isolation_poison_seam(fixture_deployment):
    """Evaluating one server must never read another server's store."""

    class Poison:
        def __getattr__(self, name):
            raise AssertionError("cross-server store access")

    d = fixture_deployment
    target = d.cluster.servers[0]
    saved = [s._blocks for s in d.cluster.servers[1:]]
    for s in d.cluster.servers[1:]:
        s._blocks = Poison()
    try:
        frag = make_sss(d.iq_encrypter.digests.digest_str(D1), 9,
                        rng=np.random.default_rng(2))[0]
        response = target.eval_location_trace(frag, 0, 0)
        assert response.share_count == 4
        assert target.eval_social_distance(0, 0).share_count == 4
    finally:
        for s, blocks in zip(d.cluster.servers[1:], saved):
            s._blocks = blocks


def test_program_logging_transparent_and_full_range(fixture_deployment):
    d = fixture_deployment
    server = d.cluster.servers[0]
    frag = make_sss("000", 9, rng=np.random.default_rng(3))[0]
    quiet = server.eval_location_trace(frag, 0, 0)
    server.logging_enabled = True
    logged = server.eval_location_trace(frag, 0, 0)
    server.logging_enabled = False
    assert quiet.data[0].tolist() == logged.data[0].tolist()
    assert quiet.touches is None
    assert [t[:2] for t in logged.touches] == [(0, r) for r in range(4)]


def test_program_touch_sequences_param_independent():
    d = small_random_deployment(seed=51)
    d.cluster.set_logging(True)
    rng = np.random.default_rng(9)
    sequences = set()
    for draw in range(10):
        probe = f"{int(rng.integers(1, 16**3)):03X}"
        frag = make_sss(probe, 9, rng=rng)[0]
        resp = d.cluster.servers[0].eval_location_trace(frag, d.lo, d.hi)
        sequences.add(tuple(resp.touches))
    assert len(sequences) == 1


def test_cluster_ingest_shape_check():
    cluster = ShareCluster(3, M61)
    with pytest.raises(ShapeError):
        cluster.ingest_epoch(_tiny_blocks(servers=2))


def test_log_and_transfer_csv_render(random_deployment):
    d = random_deployment
    d.cluster.set_logging(True)
    device = d.events[0].device_id
    from wifitrace.publisher import Publisher

    d.iq.publisher = Publisher.from_device_ids([device])
    report = d.iq.location_trace(device, d.lo, d.lo)
    log = access_log_csv([report.record])
    header, *lines = log.strip().splitlines()
    assert header == "query_id,server,epoch_id,row_index,column"
    assert all(len(line.split(",")) == 5 for line in lines)
    assert len(lines) == 8 * d.cluster.servers[0].stored_block(d.lo).row_count
    tcsv = transfer_csv([report])
    assert tcsv.startswith("query_id,kind,bytes_sent,bytes_received")
    assert report.query_id in tcsv
