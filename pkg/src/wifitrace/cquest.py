"""Encryption-based protection: epoch encryption and trapdoor queries.

Ingest encrypts each epoch into a five-column relation r(A_id, A_u, A_L,
A_CL, A_delta).  A device's first appearance in an epoch gets the
searchable id form E(d, 1, x); repeats carry a fresh nonce so ciphertexts
never repeat at rest.  The uniqueness column marks a device's first row at
each location (enabling distinct counts without decrypting ids), the
location column carries a per-epoch appearance counter, and the
combined-location column stores the device's full location list on its
first row, padded fakes elsewhere.

Queries are equality selections driven by client-generated trapdoors; three
optimizations cut trapdoor volume (tighter counters), request size
(server-side trapdoor expansion), and response size (outsourced per-epoch
location count tables).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .cipher import DeterministicCipher, SIV_OVERHEAD, encoded_width
from .errors import ConfigError, EncodingError, KeyDerivationError, QueryError, UnauthorizedQueryError
from .model import (
    DEVICE_ID_DIGITS,
    Epoch,
    MeasurementRecord,
    QueryReport,
    QueryTimer,
    SystemConfig,
    canonical_device_id,
)
from .oracle import Violation
from .publisher import NotificationRegistry, Publisher
from .servers import TokenStoreServer

ATTR_ID, ATTR_U, ATTR_L, ATTR_CL, ATTR_DELTA = 1, 2, 3, 4, 5
_AUX_HTAB, _AUX_EXPAND = 6, 7

_CL_REAL, _CL_FAKE = 1, 0  # tag distinguishing real location lists from padding

COUNTER_MODES = ("cmax", "epoch", "epoch-location")
SD_MODES = ("none", "token", "htab")


@dataclass(frozen=True)
class AttributeKey:
    """Per-attribute key material: (s_q XOR k_pko) || attribute_id."""

    attribute_id: int
    key_bytes: bytes


def derive_keys(s_q: bytes, k_pko: bytes) -> dict[int, AttributeKey]:
    """The five column keys; distinct per attribute and per organization key."""
    return {i: _derive_key(s_q, k_pko, i) for i in (ATTR_ID, ATTR_U, ATTR_L, ATTR_CL, ATTR_DELTA)}


def _derive_key(s_q: bytes, k_pko: bytes, attribute_id: int) -> AttributeKey:
    if len(s_q) != len(k_pko):
        raise KeyDerivationError(
            f"secret key ({len(s_q)} bytes) and organization key ({len(k_pko)} bytes) differ in length"
        )
    if not s_q:
        raise KeyDerivationError("empty key material")
    xored = bytes(a ^ b for a, b in zip(s_q, k_pko))
    return AttributeKey(attribute_id, xored + bytes([attribute_id]))


class CipherSuite:
    """All column ciphers for one organization, with fixed plaintext widths.

    Widths are derived from the configuration so every ciphertext within a
    column has one length regardless of content.
    """

    def __init__(self, s_q: bytes, k_pko: bytes, cfg: SystemConfig):
        keys = derive_keys(s_q, k_pko)
        self.cfg = cfg
        max_loc = "x" * cfg.location_pad
        big = (1 << 61) - 1

        w_id = encoded_width(("F" * DEVICE_ID_DIGITS, big, big))
        w_u_inner = encoded_width((1, big))
        w_u_outer = encoded_width((bytes(w_u_inner + SIV_OVERHEAD), big))
        w_l = encoded_width((max_loc, big))
        w_cl = encoded_width(tuple([_CL_REAL, big] + [max_loc] * cfg.cl_slots))
        w_delta = encoded_width((big,))
        self.htab_slots = max(len(cfg.capacities), 4)
        w_htab = encoded_width(
            tuple(itertools.chain.from_iterable((max_loc, big) for _ in range(self.htab_slots)))
        )

        self.id = DeterministicCipher(keys[ATTR_ID].key_bytes, w_id)
        self.u_inner = DeterministicCipher(keys[ATTR_U].key_bytes, w_u_inner)
        self.l = DeterministicCipher(keys[ATTR_L].key_bytes, w_l)
        self.cl = DeterministicCipher(keys[ATTR_CL].key_bytes, w_cl)
        self.delta = DeterministicCipher(keys[ATTR_DELTA].key_bytes, w_delta)
        self.htab = DeterministicCipher(_derive_key(s_q, k_pko, _AUX_HTAB).key_bytes, w_htab)
        # the outer layer of A_u; its cipher is handed to the server so it
        # can expand trapdoors, but the inner layer stays client-only
        self.u_outer = DeterministicCipher(_derive_key(s_q, k_pko, _AUX_EXPAND).key_bytes, w_u_outer)

    def _check_location(self, location_id: str):
        if len(location_id.encode("utf-8")) > self.cfg.location_pad:
            raise ConfigError(
                f"location id {location_id!r} exceeds location_pad={self.cfg.location_pad}"
            )

    # A_u is stored as outer(inner(bit, epoch-or-nonce), row_index): the
    # outer layer is what trapdoors match, whether generated client-side or
    # expanded at the server from the inner ciphertext alone.
    def encrypt_u(self, bit: int, second: int, row_index: int) -> bytes:
        return self.u_outer.encrypt((self.u_inner.encrypt((bit, second)), row_index))

    def decrypt_u(self, ciphertext: bytes) -> tuple[int, int, int]:
        """Returns (bit, row_index, epoch-or-nonce)."""
        inner_ct, row_index = self.u_outer.decrypt(ciphertext)
        bit, second = self.u_inner.decrypt(inner_ct)
        return bit, row_index, second

    def uniqueness_trapdoor(self, epoch_id: int, row_index: int) -> bytes:
        return self.u_outer.encrypt((self.uniqueness_gamma(epoch_id), row_index))

    def uniqueness_gamma(self, epoch_id: int) -> bytes:
        return self.u_inner.encrypt((1, epoch_id))

    def encrypt_table(self, unique_counts: dict[str, int]) -> bytes:
        if len(unique_counts) > self.htab_slots:
            raise ConfigError(
                f"epoch has {len(unique_counts)} locations, table holds {self.htab_slots}; "
                "register capacities for every location"
            )
        flat: list = []
        for loc in sorted(unique_counts):
            self._check_location(loc)
            flat += [loc, unique_counts[loc]]
        return self.htab.encrypt(tuple(flat))

    def decrypt_table(self, blob: bytes) -> dict[str, int]:
        fields = self.htab.decrypt(blob)
        return {fields[i]: fields[i + 1] for i in range(0, len(fields), 2)}


@dataclass(frozen=True)
class EncryptedRow:
    a_id: bytes
    a_u: bytes
    a_l: bytes
    a_cl: bytes
    a_delta: bytes

    def as_cells(self) -> dict[str, bytes]:
        return {
            "a_id": self.a_id,
            "a_u": self.a_u,
            "a_l": self.a_l,
            "a_cl": self.a_cl,
            "a_delta": self.a_delta,
        }


@dataclass
class EpochSummary:
    """What the trusted side keeps (or measures) after sealing an epoch."""

    epoch_id: int
    row_count: int
    location_counters: dict[str, int]
    unique_counts: dict[str, int]
    table_blob: bytes
    metadata_bytes: int


@dataclass
class CounterStore:
    """Client-side counter metadata feeding trapdoor generation."""

    c_max: int = 0
    rows_per_epoch: dict[int, int] = field(default_factory=dict)
    epoch_max: dict[int, int] = field(default_factory=dict)
    epoch_location_max: dict[int, dict[str, int]] = field(default_factory=dict)

    def absorb(self, summary: EpochSummary):
        counters = summary.location_counters
        epoch_max = max(counters.values(), default=0)
        self.c_max = max(self.c_max, epoch_max)
        self.rows_per_epoch[summary.epoch_id] = summary.row_count
        self.epoch_max[summary.epoch_id] = epoch_max
        self.epoch_location_max[summary.epoch_id] = dict(counters)

    def bound(self, mode: str, epoch_id: int, location_id: str) -> int:
        if mode == "cmax":
            return self.c_max
        if mode == "epoch":
            return self.epoch_max.get(epoch_id, 0)
        if mode == "epoch-location":
            return self.epoch_location_max.get(epoch_id, {}).get(location_id, 0)
        raise QueryError(f"unknown counter mode {mode!r}")


class CquestEncrypter:
    """Epoch-at-a-time bulk encrypter; per-epoch tables are discarded at seal."""

    def __init__(self, suite: CipherSuite, cfg: SystemConfig,
                 rng: np.random.Generator | None = None):
        self.suite = suite
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng()
        self.counters = CounterStore()

    def _nonce(self) -> int:
        # nonces share the integer slot with the literal 1 that marks
        # searchable first appearances, so never draw 0 or 1
        return int(self.rng.integers(2, 1 << 61))

    def encrypt_epoch(self, epoch: Epoch) -> tuple[list[EncryptedRow], EpochSummary]:
        suite, x = self.suite, epoch.epoch_id
        device_locations: dict[str, list[str]] = {}
        for ev in epoch.events:
            locs = device_locations.setdefault(ev.device_id, [])
            if ev.location_id not in locs:
                locs.append(ev.location_id)

        seen: set[str] = set()
        alpha: dict[str, set[str]] = {}
        loc_counter: dict[str, int] = {}
        unique_counts: dict[str, int] = {}
        rows: list[EncryptedRow] = []
        a_delta = suite.delta.encrypt((x,))

        for y, ev in enumerate(epoch.events, start=1):
            d, loc = ev.device_id, ev.location_id
            suite._check_location(loc)
            if len(device_locations[d]) > self.cfg.cl_slots:
                raise EncodingError(
                    f"device {d} visited {len(device_locations[d])} locations in epoch {x}, "
                    f"cl_slots={self.cfg.cl_slots}"
                )
            first = d not in seen
            if first:
                a_id = suite.id.encrypt((d, 1, x))
                a_u = suite.encrypt_u(1, x, y)
                alpha[d] = {loc}
                unique = True
            elif loc not in alpha[d]:
                a_id = suite.id.encrypt((d, self._nonce(), x))
                a_u = suite.encrypt_u(1, x, y)
                alpha[d].add(loc)
                unique = True
            else:
                a_id = suite.id.encrypt((d, self._nonce(), x))
                a_u = suite.encrypt_u(0, self._nonce(), y)
                unique = False

            loc_counter[loc] = loc_counter.get(loc, 0) + 1
            a_l = suite.l.encrypt((loc, loc_counter[loc]))
            if first:
                a_cl = suite.cl.encrypt(tuple([_CL_REAL, self._nonce()] + device_locations[d]))
                seen.add(d)
            else:
                a_cl = suite.cl.encrypt((_CL_FAKE, self._nonce()))
            if unique:
                unique_counts[loc] = unique_counts.get(loc, 0) + 1

            rows.append(EncryptedRow(a_id, a_u, a_l, a_cl, a_delta))

        for column in ("a_id", "a_u", "a_l"):
            values = [getattr(r, column) for r in rows]
            if len(set(values)) != len(values):
                raise EncodingError(f"nonce collision produced repeated {column} ciphertexts")

        metadata_bytes = (
            sum(len(k) for k in seen)
            + sum(len(k) + 8 for k in loc_counter)
            + sum(len(d) + sum(len(l) for l in locs) for d, locs in device_locations.items())
            + sum(len(k) + 8 for k in unique_counts)
        )
        summary = EpochSummary(
            epoch_id=x,
            row_count=len(rows),
            location_counters=loc_counter,
            unique_counts=unique_counts,
            table_blob=suite.encrypt_table(unique_counts),
            metadata_bytes=metadata_bytes,
        )
        self.counters.absorb(summary)
        return rows, summary

    def ingest(self, epoch: Epoch, server: TokenStoreServer) -> EpochSummary:
        rows, summary = self.encrypt_epoch(epoch)
        server.ingest_epoch(epoch.epoch_id, [r.as_cells() for r in rows], summary.table_blob)
        return summary


def notify(device_ids: set[str], registry: NotificationRegistry) -> list[str]:
    """Notify the opted-in subset; returns the ids actually delivered to."""
    return registry.record_notifications(device_ids)


class CquestClient:
    """Trapdoor generator and result post-processor."""

    def __init__(self, suite: CipherSuite, cfg: SystemConfig, server: TokenStoreServer,
                 counters: CounterStore, publisher: Publisher,
                 registry: NotificationRegistry | None = None):
        self.suite = suite
        self.cfg = cfg
        self.server = server
        self.counters = counters
        self.publisher = publisher
        self.registry = registry if registry is not None else NotificationRegistry()
        self._query_seq = 0

    def _new_record(self, kind: str) -> MeasurementRecord:
        self._query_seq += 1
        return MeasurementRecord(query_id=f"cq{self._query_seq:04d}-{kind}")

    def _absorb(self, record: MeasurementRecord, response):
        record.add_transfer(0, sent=response.request_bytes, received=response.response_bytes)
        if response.touches is not None:
            prev = record.accessed_rows.get(0, ())
            record.accessed_rows[0] = tuple(prev) + tuple(response.touches)

    def _verify(self, device_id: str):
        if not self.publisher.verify(device_id):
            raise UnauthorizedQueryError(f"publisher rejected device {device_id}")

    # -- location tracing --------------------------------------------------------

    def location_trace(self, device_id: str, epoch_from: int, epoch_to: int) -> QueryReport:
        device_id = canonical_device_id(device_id)
        self._verify(device_id)
        record = self._new_record("location-trace")
        with QueryTimer(record):
            per_epoch = self._locations_per_epoch(device_id, epoch_from, epoch_to, record)
            answer = set().union(*per_epoch.values()) if per_epoch else set()
        return QueryReport(
            query_id=record.query_id,
            kind="location-trace",
            params={"device_id": device_id, "from": epoch_from, "to": epoch_to},
            answer=answer,
            extras={"per_epoch": per_epoch, "trapdoor_count": epoch_to - epoch_from + 1},
            record=record,
        )

    def _locations_per_epoch(self, device_id: str, epoch_from: int, epoch_to: int,
                             record: MeasurementRecord) -> dict[int, set[str]]:
        tokens = [self.suite.id.encrypt((device_id, 1, e))
                  for e in range(epoch_from, epoch_to + 1)]
        response = self.server.select_equal("a_id", tokens, epoch_from, epoch_to, ["a_cl"])
        self._absorb(record, response)
        per_epoch: dict[int, set[str]] = {}
        for cell in response.cells:
            fields = self.suite.cl.decrypt(cell.payload)
            if fields[0] == _CL_REAL:
                per_epoch.setdefault(cell.epoch_id, set()).update(fields[2:])
        return per_epoch

    # -- user (contact) tracing ----------------------------------------------------

    def user_trace(self, device_id: str, epoch_from: int, epoch_to: int,
                   counter_mode: str = "cmax") -> QueryReport:
        if counter_mode not in COUNTER_MODES:
            raise QueryError(f"counter_mode must be one of {COUNTER_MODES}")
        device_id = canonical_device_id(device_id)
        self._verify(device_id)
        record = self._new_record("user-trace")
        with QueryTimer(record):
            per_epoch = self._locations_per_epoch(device_id, epoch_from, epoch_to, record)
            answer: set[str] = set()
            trapdoor_count = 0
            for epoch_id in sorted(per_epoch):
                for loc in sorted(per_epoch[epoch_id]):
                    bound = self.counters.bound(counter_mode, epoch_id, loc)
                    tokens = [self.suite.l.encrypt((loc, m)) for m in range(1, bound + 1)]
                    trapdoor_count += len(tokens)
                    response = self.server.select_equal("a_l", tokens, epoch_id, epoch_id, ["a_id"])
                    self._absorb(record, response)
                    for cell in response.cells:
                        answer.add(self.suite.id.decrypt(cell.payload)[0])
            answer.discard(device_id)
            delivered = notify(answer, self.registry)
        return QueryReport(
            query_id=record.query_id,
            kind="user-trace",
            params={"device_id": device_id, "from": epoch_from, "to": epoch_to,
                    "counter_mode": counter_mode},
            answer=answer,
            extras={"trapdoor_count": trapdoor_count, "notified": delivered},
            record=record,
        )

    # -- social distancing -----------------------------------------------------------

    def social_distance(self, epoch_from: int, epoch_to: int, opt: str = "none",
                        include_offenders: bool = True) -> QueryReport:
        if opt not in SD_MODES:
            raise QueryError(f"opt must be one of {SD_MODES}")
        record = self._new_record("social-distance")
        with QueryTimer(record):
            if opt == "htab":
                counts = self._counts_from_tables(epoch_from, epoch_to, record)
                devices_at: dict[tuple[str, int], set[str]] = {}
            else:
                counts, devices_at = self._counts_from_rows(
                    epoch_from, epoch_to, record, expand=(opt == "token"),
                    project_ids=include_offenders,
                )
            violations = self._violations(counts)
            if opt == "htab" and include_offenders:
                devices_at = self._fetch_offenders(violations, record)
            offenders = {
                (v.location_id, v.epoch_id): sorted(devices_at.get((v.location_id, v.epoch_id), ()))
                for v in violations
            } if include_offenders else {}
        return QueryReport(
            query_id=record.query_id,
            kind="social-distance",
            params={"from": epoch_from, "to": epoch_to, "opt": opt},
            answer=[(v.location_id, v.epoch_id, v.unique_count) for v in violations],
            extras={"counts": counts, "offenders": offenders, "violations": violations},
            record=record,
        )

    def _counts_from_rows(self, epoch_from: int, epoch_to: int, record: MeasurementRecord,
                          expand: bool, project_ids: bool):
        project = ["a_l", "a_id"] if project_ids else ["a_l"]
        counts: dict[tuple[str, int], int] = {}
        devices_at: dict[tuple[str, int], set[str]] = {}
        for epoch_id in range(epoch_from, epoch_to + 1):
            n = self.counters.rows_per_epoch.get(epoch_id, 0)
            if n == 0:
                continue
            if expand:
                response = self.server.expand_and_select(
                    self.suite.uniqueness_gamma(epoch_id), epoch_id, epoch_id, project)
            else:
                tokens = [self.suite.uniqueness_trapdoor(epoch_id, y) for y in range(1, n + 1)]
                response = self.server.select_equal("a_u", tokens, epoch_id, epoch_id, project)
            self._absorb(record, response)
            by_row: dict[int, dict[str, bytes]] = {}
            for cell in response.cells:
                by_row.setdefault(cell.row_index, {})[cell.column] = cell.payload
            for cells in by_row.values():
                loc = self.suite.l.decrypt(cells["a_l"])[0]
                counts[(loc, epoch_id)] = counts.get((loc, epoch_id), 0) + 1
                if project_ids:
                    devices_at.setdefault((loc, epoch_id), set()).add(
                        self.suite.id.decrypt(cells["a_id"])[0])
        return counts, devices_at

    def _counts_from_tables(self, epoch_from: int, epoch_to: int,
                            record: MeasurementRecord) -> dict[tuple[str, int], int]:
        response = self.server.fetch_location_tables(epoch_from, epoch_to)
        self._absorb(record, response)
        counts: dict[tuple[str, int], int] = {}
        for epoch_id, blob in response.blobs:
            for loc, count in self.suite.decrypt_table(blob).items():
                counts[(loc, epoch_id)] = count
        return counts

    def _violations(self, counts: dict[tuple[str, int], int]) -> list[Violation]:
        out = []
        for (loc, epoch_id), count in sorted(counts.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            if count > self.cfg.capacity_of(loc) * self.cfg.distance_index:
                out.append(Violation(loc, epoch_id, count))
        return out

    def _fetch_offenders(self, violations: list[Violation],
                         record: MeasurementRecord) -> dict[tuple[str, int], set[str]]:
        devices_at: dict[tuple[str, int], set[str]] = {}
        for v in violations:
            bound = self.counters.bound("epoch-location", v.epoch_id, v.location_id)
            tokens = [self.suite.l.encrypt((v.location_id, m)) for m in range(1, bound + 1)]
            response = self.server.select_equal("a_l", tokens, v.epoch_id, v.epoch_id, ["a_id"])
            self._absorb(record, response)
            for cell in response.cells:
                devices_at.setdefault((v.location_id, v.epoch_id), set()).add(
                    self.suite.id.decrypt(cell.payload)[0])
        return devices_at

    # -- crowd flow --------------------------------------------------------------------

    def crowd_flow(self, epoch_from: int, epoch_to: int, k: int | None = None,
                   opt: str = "none") -> QueryReport:
        """Top-k locations by distinct visitors over the range.

        Ranking needs per-device rows (per-epoch count tables cannot tell a
        returning visitor from a new one), so every mode fetches the
        uniqueness rows; `token` shrinks the request and `htab` additionally
        cross-checks the per-epoch counts against the outsourced tables.
        """
        k = self.cfg.top_k if k is None else k
        if k <= 0:
            raise QueryError("crowd flow requires k > 0")
        if opt not in ("none", "counters", "token", "htab"):
            raise QueryError(f"unknown crowd-flow opt {opt!r}")
        record = self._new_record("crowd-flow")
        with QueryTimer(record):
            counts, devices_at = self._counts_from_rows(
                epoch_from, epoch_to, record, expand=(opt == "token"), project_ids=True)
            if opt == "htab":
                table_counts = self._counts_from_tables(epoch_from, epoch_to, record)
                if table_counts != counts:
                    raise QueryError("outsourced count tables disagree with row fetch")
            visitors: dict[str, set[str]] = {}
            for (loc, _), devices in devices_at.items():
                visitors.setdefault(loc, set()).update(devices)
            ranked = sorted(visitors.items(), key=lambda kv: (-len(kv[1]), kv[0]))
            answer = [(loc, len(devs)) for loc, devs in ranked[:k]]
        return QueryReport(
            query_id=record.query_id,
            kind="crowd-flow",
            params={"from": epoch_from, "to": epoch_to, "k": k, "opt": opt},
            answer=answer,
            extras={"per_epoch_counts": counts},
            record=record,
        )
