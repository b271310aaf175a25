"""Store serialization and flat-file persistence.

A store directory holds everything a later query run needs: the config and
dataset copy (the oracle replays it), the publisher files, and the server
contents — encrypted rows as length-prefixed binary cells, share rows in
the share/fragment wire encoding, one file per epoch.  The per-epoch
encoders double as the outsourcing wire format, so ingest throughput
accounts for producing them.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cquest import CipherSuite, CounterStore
from .errors import ConfigError
from .iquest import DigestRegistry, IquestEncrypter, LocationRegistry
from .model import SystemConfig
from .servers import ALL_COLUMNS, EpochShareBlock, ShareCluster, TokenStoreServer
from .sharing import (
    Share,
    SssFragment,
    decode_fragment,
    decode_share,
    encode_fragment,
    encode_share,
)

_U32 = struct.Struct("<I")
_BLOCK_HEADER = struct.Struct("<BQIB")  # server_index, epoch_id, rows, symbols
SHARE_RECORD_SHARES = 10  # bytes per plain share record
_ALL_EPOCHS = (-(1 << 62), 1 << 62)


# -- encrypted rows ---------------------------------------------------------------


def encode_token_epoch(rows: list[dict[str, bytes]]) -> bytes:
    out = io.BytesIO()
    out.write(_U32.pack(len(rows)))
    for row in rows:
        for col in ALL_COLUMNS:
            cell = row[col]
            out.write(_U32.pack(len(cell)))
            out.write(cell)
    return out.getvalue()


def decode_token_epoch(buf: bytes) -> list[dict[str, bytes]]:
    view = memoryview(buf)
    (count,) = _U32.unpack_from(view, 0)
    off = _U32.size
    rows = []
    for _ in range(count):
        cells = {}
        for col in ALL_COLUMNS:
            (n,) = _U32.unpack_from(view, off)
            off += _U32.size
            cells[col] = bytes(view[off : off + n])
            off += n
        rows.append(cells)
    return rows


# -- share rows -------------------------------------------------------------------


def encode_share_epoch(block: EpochShareBlock) -> bytes:
    """Row records: fragment(smid) | share(sid) | share(su) | fragment(sml) | share(sl)."""
    out = io.BytesIO()
    out.write(_BLOCK_HEADER.pack(block.server_index, block.epoch_id,
                                 block.row_count, block.smid.shape[1]))
    si = block.server_index
    for j in range(block.row_count):
        out.write(encode_fragment(SssFragment(si, block.smid[j])))
        out.write(encode_share(Share(si, int(block.sid[j]))))
        out.write(encode_share(Share(si, int(block.su[j]))))
        out.write(encode_fragment(SssFragment(si, block.sml[j])))
        out.write(encode_share(Share(si, int(block.sl[j]))))
    return out.getvalue()


def decode_share_epoch(buf: bytes, alphabet_size: int = 16) -> EpochShareBlock:
    view = memoryview(buf)
    server_index, epoch_id, rows, v = _BLOCK_HEADER.unpack_from(view, 0)
    off = _BLOCK_HEADER.size
    frag_bytes = 4 + v * alphabet_size * 8
    smid = np.zeros((rows, v, alphabet_size), dtype=np.uint64)
    sml = np.zeros_like(smid)
    sid = np.zeros(rows, dtype=np.uint64)
    su = np.zeros(rows, dtype=np.uint64)
    sl = np.zeros(rows, dtype=np.uint64)
    for j in range(rows):
        smid[j] = decode_fragment(bytes(view[off : off + frag_bytes])).bits
        off += frag_bytes
        sid[j] = decode_share(bytes(view[off : off + SHARE_RECORD_SHARES])).value
        off += SHARE_RECORD_SHARES
        su[j] = decode_share(bytes(view[off : off + SHARE_RECORD_SHARES])).value
        off += SHARE_RECORD_SHARES
        sml[j] = decode_fragment(bytes(view[off : off + frag_bytes])).bits
        off += frag_bytes
        sl[j] = decode_share(bytes(view[off : off + SHARE_RECORD_SHARES])).value
        off += SHARE_RECORD_SHARES
    return EpochShareBlock(server_index, epoch_id, smid, sid, su, sml, sl)


# -- store directories ----------------------------------------------------------------


def save_token_store(directory: Path, server: TokenStoreServer):
    rows_dir = directory / "rows"
    rows_dir.mkdir(parents=True, exist_ok=True)
    for epoch_id in server.epochs_in(*_ALL_EPOCHS):
        rows = [server.get_row(epoch_id, j) for j in range(server.row_count(epoch_id))]
        (rows_dir / f"epoch_{epoch_id}.bin").write_bytes(encode_token_epoch(rows))
        blob = server.stored_table(epoch_id)
        if blob is not None:
            (directory / "tables").mkdir(exist_ok=True)
            (directory / "tables" / f"epoch_{epoch_id}.bin").write_bytes(blob)


def load_token_store(directory: Path, suite: CipherSuite) -> TokenStoreServer:
    server = TokenStoreServer(expansion_cipher=suite.u_outer)
    for path in sorted((directory / "rows").glob("epoch_*.bin"),
                       key=lambda p: int(p.stem.split("_")[1])):
        epoch_id = int(path.stem.split("_")[1])
        table_path = directory / "tables" / f"epoch_{epoch_id}.bin"
        server.ingest_epoch(
            epoch_id,
            decode_token_epoch(path.read_bytes()),
            table_path.read_bytes() if table_path.exists() else None,
        )
    return server


def save_share_cluster(directory: Path, cluster: ShareCluster):
    for server in cluster.servers:
        server_dir = directory / f"server_{server.server_index}"
        server_dir.mkdir(parents=True, exist_ok=True)
        for epoch_id in server.epochs_in(*_ALL_EPOCHS):
            (server_dir / f"epoch_{epoch_id}.bin").write_bytes(
                encode_share_epoch(server.stored_block(epoch_id)))


def load_share_cluster(directory: Path, cfg: SystemConfig) -> ShareCluster:
    cluster = ShareCluster(cfg.server_count, cfg.field_prime)
    for server in cluster.servers:
        server_dir = directory / f"server_{server.server_index}"
        if not server_dir.exists():
            raise ConfigError(f"store is missing {server_dir}")
        for path in sorted(server_dir.glob("epoch_*.bin"),
                           key=lambda p: int(p.stem.split("_")[1])):
            server.ingest_epoch(decode_share_epoch(path.read_bytes(), cfg.alphabet_size))
    return cluster


# -- trusted-side state ------------------------------------------------------------------


@dataclass
class CquestState:
    s_q: bytes
    k_pko: bytes
    counters: CounterStore
    origin_ms: int
    summaries_meta: dict[int, int]  # epoch -> transient metadata bytes at seal


def save_cquest_state(path: Path, state: CquestState):
    doc = {
        "s_q": state.s_q.hex(),
        "k_pko": state.k_pko.hex(),
        "origin_ms": state.origin_ms,
        "c_max": state.counters.c_max,
        "rows_per_epoch": state.counters.rows_per_epoch,
        "epoch_max": state.counters.epoch_max,
        "epoch_location_max": state.counters.epoch_location_max,
        "summaries_meta": state.summaries_meta,
    }
    path.write_text(json.dumps(doc, indent=2))


def load_cquest_state(path: Path) -> CquestState:
    doc = json.loads(path.read_text())
    counters = CounterStore(
        c_max=doc["c_max"],
        rows_per_epoch={int(k): v for k, v in doc["rows_per_epoch"].items()},
        epoch_max={int(k): v for k, v in doc["epoch_max"].items()},
        epoch_location_max={int(k): dict(v) for k, v in doc["epoch_location_max"].items()},
    )
    return CquestState(
        s_q=bytes.fromhex(doc["s_q"]),
        k_pko=bytes.fromhex(doc["k_pko"]),
        counters=counters,
        origin_ms=doc["origin_ms"],
        summaries_meta={int(k): v for k, v in doc["summaries_meta"].items()},
    )


def save_iquest_state(path: Path, encrypter: IquestEncrypter, origin_ms: int):
    doc = {
        "origin_ms": origin_ms,
        "digests": encrypter.digests.to_dict(),
        "locations": encrypter.locations.to_dict(),
    }
    path.write_text(json.dumps(doc, indent=2))


def load_iquest_state(path: Path, cfg: SystemConfig) -> tuple[IquestEncrypter, int]:
    doc = json.loads(path.read_text())
    encrypter = IquestEncrypter(cfg, digest_key=bytes.fromhex(doc["digests"]["key"]))
    encrypter.digests = DigestRegistry.from_dict(doc["digests"])
    encrypter.locations = LocationRegistry.from_dict(doc["locations"])
    return encrypter, doc["origin_ms"]
