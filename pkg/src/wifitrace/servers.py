"""In-process untrusted servers.

Two server kinds back the two protocols: a single token-matching store that
answers equality selections over encrypted columns (and can optionally
expand trapdoors server-side), and a cluster of N isolated share servers
that evaluate the same linear/product program over every stored row of the
requested epochs.  Both kinds meter request/response bytes and, when
logging is enabled, record the exact (epoch, row, column) touch sequence a
query caused.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cipher import DeterministicCipher
from .errors import CapabilityError, QueryError, SealedEpochError, ShapeError
from .field import mul_vec, prod_vec, sum_vec
from .sharing import SssFragment, fragment_wire_bytes, share_vector_wire_bytes

SEARCHABLE_COLUMNS = ("a_id", "a_u", "a_l")
ALL_COLUMNS = ("a_id", "a_u", "a_l", "a_cl", "a_delta")

# wire framing: selections carry length-prefixed tokens; cells come back
# tagged with (epoch u64, row u32, column u8, len u32)
_CELL_TAG_BYTES = 13 + 4
_RANGE_HEADER_BYTES = 16
_LIST_HEADER_BYTES = 4
_EPOCH_META_BYTES = 12


def token_request_bytes(tokens: list[bytes]) -> int:
    return _LIST_HEADER_BYTES + sum(4 + len(t) for t in tokens)


def cell_response_bytes(cells: list["CellHit"]) -> int:
    return _LIST_HEADER_BYTES + sum(_CELL_TAG_BYTES + len(c.payload) for c in cells)


def blob_response_bytes(blobs: list[tuple[int, bytes]]) -> int:
    return _LIST_HEADER_BYTES + sum(_EPOCH_META_BYTES + len(b) for _, b in blobs)


def fragment_request_bytes(fragment_count: int, symbols: int) -> int:
    return _LIST_HEADER_BYTES + fragment_count * fragment_wire_bytes(symbols)


def vector_response_bytes(counts: list[int]) -> int:
    return _LIST_HEADER_BYTES + sum(_EPOCH_META_BYTES + share_vector_wire_bytes(n) for n in counts)


@dataclass(frozen=True)
class CellHit:
    epoch_id: int
    row_index: int
    column: str
    payload: bytes


@dataclass
class SelectResponse:
    cells: list[CellHit]
    request_bytes: int
    response_bytes: int
    touches: list[tuple[int, int, str]] | None


@dataclass
class TableResponse:
    blobs: list[tuple[int, bytes]]
    request_bytes: int
    response_bytes: int
    touches: list[tuple[int, int, str]] | None


@dataclass
class ProgramResponse:
    """Share vectors/matrices keyed by epoch, plus accounting."""

    data: dict
    degree: int
    epoch_rows: list[tuple[int, int]]
    share_count: int
    request_bytes: int
    response_bytes: int
    touches: list[tuple[int, int, str]] | None


class TokenStoreServer:
    """Single untrusted store for the encryption-based protocol.

    Rows are kept per epoch at dense indexes with byte-equality indexes on
    the searchable columns.  The server can only match bytes; it decrypts
    nothing (the optional expansion key lets it derive outer trapdoor
    layers, never remove them).
    """

    def __init__(self, expansion_cipher: DeterministicCipher | None = None):
        self._rows: dict[int, list[dict[str, bytes]]] = {}
        self._index: dict[str, dict[bytes, list[tuple[int, int]]]] = {
            col: {} for col in SEARCHABLE_COLUMNS
        }
        self._tables: dict[int, bytes] = {}
        self._expansion = expansion_cipher
        self.logging_enabled = False

    # -- ingestion -------------------------------------------------------------

    def ingest_epoch(self, epoch_id: int, rows: list[dict[str, bytes]],
                     location_table: bytes | None = None):
        if epoch_id in self._rows:
            raise SealedEpochError(f"epoch {epoch_id} already ingested and sealed")
        stored = []
        for row_index, row in enumerate(rows):
            cells = {col: row[col] for col in ALL_COLUMNS}
            stored.append(cells)
            for col in SEARCHABLE_COLUMNS:
                self._index[col].setdefault(cells[col], []).append((epoch_id, row_index))
        self._rows[epoch_id] = stored
        if location_table is not None:
            self._tables[epoch_id] = location_table

    def epochs_in(self, epoch_from: int, epoch_to: int) -> list[int]:
        return sorted(e for e in self._rows if epoch_from <= e <= epoch_to)

    def row_count(self, epoch_id: int) -> int:
        return len(self._rows.get(epoch_id, ()))

    def total_rows(self, epoch_from: int, epoch_to: int) -> int:
        return sum(self.row_count(e) for e in self.epochs_in(epoch_from, epoch_to))

    def get_row(self, epoch_id: int, row_index: int) -> dict[str, bytes]:
        return self._rows[epoch_id][row_index]

    def stored_table(self, epoch_id: int) -> bytes | None:
        return self._tables.get(epoch_id)

    def storage_bytes(self) -> int:
        total = 0
        for rows in self._rows.values():
            for row in rows:
                total += sum(len(v) for v in row.values())
        total += sum(len(b) for b in self._tables.values())
        return total

    # -- queries ---------------------------------------------------------------

    def select_equal(self, column: str, tokens: list[bytes], epoch_from: int,
                     epoch_to: int, project: list[str]) -> SelectResponse:
        """Cells of `project` columns from rows whose `column` equals any token."""
        if column not in SEARCHABLE_COLUMNS:
            raise QueryError(f"column {column!r} is not searchable")
        for col in project:
            if col not in ALL_COLUMNS:
                raise QueryError(f"unknown projection column {col!r}")
        matched: set[tuple[int, int]] = set()
        index = self._index[column]
        for token in tokens:
            for epoch_id, row_index in index.get(token, ()):
                if epoch_from <= epoch_id <= epoch_to:
                    matched.add((epoch_id, row_index))
        cells, touches = self._project(sorted(matched), project)
        return SelectResponse(
            cells=cells,
            request_bytes=_RANGE_HEADER_BYTES + token_request_bytes(tokens),
            response_bytes=cell_response_bytes(cells),
            touches=touches,
        )

    def expand_and_select(self, gamma: bytes, epoch_from: int, epoch_to: int,
                          project: list[str]) -> SelectResponse:
        """Derive row trapdoors E_k(gamma, y) locally and select on a_u.

        Only the request shrinks: computation and response match the
        client-generated trapdoor path exactly.
        """
        if self._expansion is None:
            raise CapabilityError("server holds no trapdoor-expansion key")
        matched: set[tuple[int, int]] = set()
        for epoch_id in self.epochs_in(epoch_from, epoch_to):
            for y in range(1, self.row_count(epoch_id) + 1):
                token = self._expansion.encrypt((gamma, y))
                for hit_epoch, row_index in self._index["a_u"].get(token, ()):
                    if hit_epoch == epoch_id:
                        matched.add((hit_epoch, row_index))
        cells, touches = self._project(sorted(matched), project)
        return SelectResponse(
            cells=cells,
            request_bytes=_RANGE_HEADER_BYTES + token_request_bytes([gamma]),
            response_bytes=cell_response_bytes(cells),
            touches=touches,
        )

    def fetch_location_tables(self, epoch_from: int, epoch_to: int) -> TableResponse:
        blobs = [(e, self._tables[e]) for e in sorted(self._tables)
                 if epoch_from <= e <= epoch_to]
        touches = [(e, -1, "htab") for e, _ in blobs] if self.logging_enabled else None
        return TableResponse(
            blobs=blobs,
            request_bytes=_RANGE_HEADER_BYTES,
            response_bytes=blob_response_bytes(blobs),
            touches=touches,
        )

    def _project(self, positions: list[tuple[int, int]],
                 project: list[str]) -> tuple[list[CellHit], list | None]:
        cells = []
        touches = [] if self.logging_enabled else None
        for epoch_id, row_index in positions:
            row = self._rows[epoch_id][row_index]
            for col in project:
                cells.append(CellHit(epoch_id, row_index, col, row[col]))
                if touches is not None:
                    touches.append((epoch_id, row_index, col))
        return cells, touches


@dataclass
class EpochShareBlock:
    """One server's column arrays for one epoch of the shared relation."""

    server_index: int
    epoch_id: int
    smid: np.ndarray   # (rows, v, 16) one-hot shares of the device digest
    sid: np.ndarray    # (rows,) shares of the digest value
    su: np.ndarray     # (rows,) shares of the uniqueness bit
    sml: np.ndarray    # (rows, v, 16) one-hot shares of the location code
    sl: np.ndarray     # (rows,) shares of the location code value

    @property
    def row_count(self) -> int:
        return self.sid.shape[0]


class ShareServer:
    """One of N isolated servers for the secret-sharing protocol.

    Every program touches every row of the requested epochs, in order, and
    combines only shares this server holds; the caller provides this
    server's own query fragments (cross-server fragments are rejected).
    """

    def __init__(self, server_index: int, prime: int):
        self.server_index = server_index
        self.prime = prime
        self._blocks: dict[int, EpochShareBlock] = {}
        self.logging_enabled = False

    def ingest_epoch(self, block: EpochShareBlock):
        if block.server_index != self.server_index:
            raise ShapeError(
                f"server {self.server_index} given fragments for server {block.server_index}"
            )
        if block.epoch_id in self._blocks:
            raise SealedEpochError(f"epoch {block.epoch_id} already ingested and sealed")
        self._blocks[block.epoch_id] = block

    def epochs_in(self, epoch_from: int, epoch_to: int) -> list[int]:
        return sorted(e for e in self._blocks if epoch_from <= e <= epoch_to)

    def stored_block(self, epoch_id: int) -> EpochShareBlock:
        return self._blocks[epoch_id]

    def epoch_rows(self, epoch_from: int, epoch_to: int) -> list[tuple[int, int]]:
        return [(e, self._blocks[e].row_count) for e in self.epochs_in(epoch_from, epoch_to)]

    def storage_bytes(self) -> int:
        total = 0
        for b in self._blocks.values():
            total += sum(arr.nbytes for arr in (b.smid, b.sid, b.su, b.sml, b.sl))
            total += b.row_count * 8  # cleartext epoch column
        return total

    def _check_fragment(self, frag: SssFragment, symbols: int):
        if frag.server_index != self.server_index:
            raise ShapeError(
                f"server {self.server_index} given a fragment for server {frag.server_index}"
            )
        if frag.bits.shape != (symbols, 16):
            raise ShapeError(f"expected fragment shape {(symbols, 16)}, got {frag.bits.shape}")

    def _match(self, bits: np.ndarray, frag: SssFragment) -> np.ndarray:
        prod = mul_vec(bits, frag.bits[None, :, :], self.prime)
        per_position = sum_vec(prod, self.prime, axis=-1)
        return prod_vec(per_position, self.prime, axis=-1)

    def _touch_pass(self, touches, epoch_id: int, rows: int, columns: str, repeat: int = 1):
        if touches is None:
            return
        for _ in range(repeat):
            for r in range(rows):
                touches.append((epoch_id, r, columns))

    # -- oblivious programs ------------------------------------------------------

    def eval_location_trace(self, query: SssFragment, epoch_from: int,
                            epoch_to: int) -> ProgramResponse:
        """Per row: match(smid, query) * sl — a share of the row's location
        code if the row belongs to the queried digest, else of zero."""
        epoch_rows = self.epoch_rows(epoch_from, epoch_to)
        v = None
        vectors: dict[int, np.ndarray] = {}
        touches = [] if self.logging_enabled else None
        for epoch_id, rows in epoch_rows:
            block = self._blocks[epoch_id]
            if v is None:
                v = block.smid.shape[1]
                self._check_fragment(query, v)
            vectors[epoch_id] = mul_vec(self._match(block.smid, query), block.sl, self.prime)
            self._touch_pass(touches, epoch_id, rows, "a_smid*a_sl")
        if v is None:
            self._check_fragment(query, query.symbol_count)
        degree = 2 * query.symbol_count + 1
        share_count = sum(n for _, n in epoch_rows)
        return ProgramResponse(
            data=vectors,
            degree=degree,
            epoch_rows=epoch_rows,
            share_count=share_count,
            request_bytes=_RANGE_HEADER_BYTES + fragment_request_bytes(1, query.symbol_count),
            response_bytes=vector_response_bytes([n for _, n in epoch_rows]),
            touches=touches,
        )

    def eval_user_trace(self, queries: dict[int, list[SssFragment]]) -> ProgramResponse:
        """Per epoch and per queried location: match(sml, loc) * sid over all rows."""
        matrices: dict[int, np.ndarray] = {}
        epoch_rows = []
        touches = [] if self.logging_enabled else None
        share_count = 0
        fragment_count = 0
        symbols = 0
        for epoch_id in sorted(queries):
            frags = queries[epoch_id]
            if epoch_id not in self._blocks:
                continue
            block = self._blocks[epoch_id]
            rows = block.row_count
            epoch_rows.append((epoch_id, rows))
            out = np.zeros((len(frags), rows), dtype=np.uint64)
            for i, frag in enumerate(frags):
                symbols = frag.symbol_count
                self._check_fragment(frag, block.sml.shape[1])
                out[i] = mul_vec(self._match(block.sml, frag), block.sid, self.prime)
                self._touch_pass(touches, epoch_id, rows, "a_sml*a_sid")
            matrices[epoch_id] = out
            share_count += len(frags) * rows
            fragment_count += len(frags)
        degree = 2 * symbols + 1 if symbols else 0
        return ProgramResponse(
            data=matrices,
            degree=degree,
            epoch_rows=epoch_rows,
            share_count=share_count,
            request_bytes=_RANGE_HEADER_BYTES + fragment_request_bytes(fragment_count, max(symbols, 1)),
            response_bytes=vector_response_bytes(
                [m.size for m in matrices.values()] or [0]
            ),
            touches=touches,
        )

    def eval_social_distance(self, epoch_from: int, epoch_to: int) -> ProgramResponse:
        """Per row: su * sl — location code share where the row is a first
        appearance, zero share otherwise."""
        return self._rowwise_product("su", "sl", "a_su*a_sl", epoch_from, epoch_to)

    def eval_sd_offenders(self, epoch_from: int, epoch_to: int) -> ProgramResponse:
        """Per row: su * sid — digest share on first-appearance rows."""
        return self._rowwise_product("su", "sid", "a_su*a_sid", epoch_from, epoch_to)

    def _rowwise_product(self, left: str, right: str, label: str,
                         epoch_from: int, epoch_to: int) -> ProgramResponse:
        epoch_rows = self.epoch_rows(epoch_from, epoch_to)
        vectors = {}
        touches = [] if self.logging_enabled else None
        for epoch_id, rows in epoch_rows:
            block = self._blocks[epoch_id]
            vectors[epoch_id] = mul_vec(getattr(block, left), getattr(block, right), self.prime)
            self._touch_pass(touches, epoch_id, rows, label)
        return ProgramResponse(
            data=vectors,
            degree=2,
            epoch_rows=epoch_rows,
            share_count=sum(n for _, n in epoch_rows),
            request_bytes=_RANGE_HEADER_BYTES,
            response_bytes=vector_response_bytes([n for _, n in epoch_rows]),
            touches=touches,
        )

    def eval_aggregated_sd(self, queries: list[SssFragment], epoch_from: int,
                           epoch_to: int) -> ProgramResponse:
        """One summed share per (queried location, epoch): sum over rows of
        match(sml, loc) * su — the distinct-device count in shared form."""
        epoch_rows = self.epoch_rows(epoch_from, epoch_to)
        touches = [] if self.logging_enabled else None
        symbols = queries[0].symbol_count if queries else 1
        out = np.zeros((len(queries), len(epoch_rows)), dtype=np.uint64)
        for j, (epoch_id, rows) in enumerate(epoch_rows):
            block = self._blocks[epoch_id]
            for i, frag in enumerate(queries):
                self._check_fragment(frag, block.sml.shape[1])
                term = mul_vec(self._match(block.sml, frag), block.su, self.prime)
                out[i, j] = sum_vec(term, self.prime, axis=-1) if rows else 0
                self._touch_pass(touches, epoch_id, rows, "a_sml*a_su")
        return ProgramResponse(
            data={"counts": out, "epochs": [e for e, _ in epoch_rows]},
            degree=2 * symbols + 1,
            epoch_rows=epoch_rows,
            share_count=out.size,
            request_bytes=_RANGE_HEADER_BYTES + fragment_request_bytes(len(queries), symbols),
            response_bytes=vector_response_bytes([out.size]),
            touches=touches,
        )


class ShareCluster:
    """The N non-communicating share servers plus ingest fan-out."""

    def __init__(self, server_count: int, prime: int):
        self.servers = [ShareServer(i + 1, prime) for i in range(server_count)]

    def ingest_epoch(self, blocks: list[EpochShareBlock]):
        if len(blocks) != len(self.servers):
            raise ShapeError(f"expected {len(self.servers)} blocks, got {len(blocks)}")
        for server, block in zip(self.servers, blocks):
            server.ingest_epoch(block)

    def epochs_in(self, epoch_from: int, epoch_to: int) -> list[int]:
        return self.servers[0].epochs_in(epoch_from, epoch_to)

    def set_logging(self, enabled: bool):
        for s in self.servers:
            s.logging_enabled = enabled

    def storage_bytes(self) -> int:
        return sum(s.storage_bytes() for s in self.servers)


def access_log_csv(records: list) -> str:
    """Render MeasurementRecords' touch traces as the log interchange CSV."""
    lines = ["query_id,server,epoch_id,row_index,column"]
    for record in records:
        for server_index in sorted(record.accessed_rows):
            for epoch_id, row_index, column in record.accessed_rows[server_index]:
                lines.append(f"{record.query_id},{server_index},{epoch_id},{row_index},{column}")
    return "\n".join(lines) + "\n"


def transfer_csv(reports: list) -> str:
    """Render per-query byte counters as CSV."""
    lines = ["query_id,kind,bytes_sent,bytes_received,wall_time_s"]
    for report in reports:
        rec = report.record
        lines.append(
            f"{rec.query_id},{report.kind},{rec.total_sent},{rec.total_received},{rec.wall_time_s:.6f}"
        )
    return "\n".join(lines) + "\n"
