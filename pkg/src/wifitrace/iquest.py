"""Secret-sharing protection: share creation and oblivious queries.

Each event becomes one six-column row per server: one-hot Shamir fragments
of the device digest and of the location code (for oblivious string
matching), plain degree-1 shares of both values (for cheap retrieval), a
shared uniqueness bit, and the epoch id in cleartext.  Servers evaluate the
same product program over every row of the requested epochs, so the rows
touched never depend on what is being asked, and no server ever sees
another server's shares.

Device digests are v hex symbols derived from a keyed hash known only to
this engine; the engine keeps the digest and location code maps bijective
(probing past collisions and past the ambiguous value 0) so reconstructed
answers map back to exact identities.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets as _secrets
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, QueryError, RegistryError, ThresholdError, UnauthorizedQueryError
from .field import interpolate_rows_at_zero, mul_vec
from .model import (
    Epoch,
    HEX_ALPHABET,
    MeasurementRecord,
    QueryReport,
    QueryTimer,
    SystemConfig,
    canonical_device_id,
)
from .oracle import Violation
from .publisher import NotificationRegistry, Publisher
from .servers import EpochShareBlock, ShareCluster
from .sharing import Share, SssFragment, make_sss, symbol_indexes

from .cquest import notify  # same notification path for both protocols


class DigestRegistry:
    """Keyed device digests, kept injective.

    The raw digest is the last v hex digits of HMAC-SHA256 under an
    engine-private key.  Truncation can collide at desk scale, and the value
    0 would be indistinguishable from "no match" after reconstruction, so
    assignment probes forward over [1, 16^v) until a free value is found.
    """

    def __init__(self, key: bytes, digits: int):
        self.key = key
        self.digits = digits
        self.space = len(HEX_ALPHABET) ** digits
        self._by_device: dict[str, int] = {}
        self._by_value: dict[int, str] = {}

    def digest(self, device_id: str) -> int:
        device_id = canonical_device_id(device_id)
        if device_id in self._by_device:
            return self._by_device[device_id]
        if len(self._by_device) >= self.space - 1:
            raise ConfigError(f"digest space 16^{self.digits} exhausted")
        raw = hmac.new(self.key, device_id.encode("utf-8"), hashlib.sha256).hexdigest()
        value = int(raw[-self.digits:], 16) % (self.space - 1) + 1
        while value in self._by_value:
            value = value % (self.space - 1) + 1
        self._by_device[device_id] = value
        self._by_value[value] = device_id
        return value

    def digest_str(self, device_id: str) -> str:
        return f"{self.digest(device_id):0{self.digits}X}"

    def device_of(self, value: int) -> str:
        return self._by_value[value]

    def known_values(self) -> set[int]:
        return set(self._by_value)

    def to_dict(self) -> dict:
        return {"key": self.key.hex(), "digits": self.digits, "devices": dict(self._by_device)}

    @classmethod
    def from_dict(cls, doc: dict) -> "DigestRegistry":
        reg = cls(bytes.fromhex(doc["key"]), doc["digits"])
        for device, value in doc["devices"].items():
            reg._by_device[device] = value
            reg._by_value[value] = device
        return reg


class LocationRegistry:
    """Engine-private bijection location id <-> code in [1, 16^v).

    Codes are assigned densely in first-seen order; 0 is reserved so a
    reconstructed 0 always means "no match".
    """

    def __init__(self, digits: int):
        self.digits = digits
        self.space = len(HEX_ALPHABET) ** digits
        self._by_location: dict[str, int] = {}
        self._by_code: dict[int, str] = {}
        self.frozen = False

    def code(self, location_id: str) -> int:
        if location_id in self._by_location:
            return self._by_location[location_id]
        if self.frozen:
            raise RegistryError(f"location {location_id!r} not registered and registry is frozen")
        value = len(self._by_location) + 1
        if value >= self.space:
            raise ConfigError(f"location code space 16^{self.digits} exhausted")
        self._by_location[location_id] = value
        self._by_code[value] = location_id
        return value

    def code_str(self, location_id: str) -> str:
        return f"{self.code(location_id):0{self.digits}X}"

    def location_of(self, code: int) -> str:
        return self._by_code[code]

    def all_locations(self) -> list[str]:
        return sorted(self._by_location, key=self._by_location.get)

    def to_dict(self) -> dict:
        return {"digits": self.digits, "locations": dict(self._by_location)}

    @classmethod
    def from_dict(cls, doc: dict) -> "LocationRegistry":
        reg = cls(doc["digits"])
        for loc, value in doc["locations"].items():
            reg._by_location[loc] = value
            reg._by_code[value] = loc
        return reg


@dataclass(frozen=True)
class SharedRow:
    """Row view of one server's fragments (tests and spot checks)."""

    a_smid: SssFragment
    a_sid: Share
    a_su: Share
    a_sml: SssFragment
    a_sl: Share
    a_delta: int


class IquestEncrypter:
    """Turns sealed epochs into per-server share blocks."""

    def __init__(self, cfg: SystemConfig, rng: np.random.Generator | None = None,
                 digest_key: bytes | None = None):
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng()
        if digest_key is None:
            digest_key = _secrets.token_bytes(32)
        self.digests = DigestRegistry(digest_key, cfg.digest_digits)
        self.locations = LocationRegistry(cfg.digest_digits)

    def _one_hot(self, strings: list[str]) -> np.ndarray:
        v, m = self.cfg.digest_digits, self.cfg.alphabet_size
        out = np.zeros((len(strings), v, m), dtype=np.uint64)
        for i, s in enumerate(strings):
            out[i, np.arange(v), symbol_indexes(s, HEX_ALPHABET)] = 1
        return out

    def share_epoch(self, epoch: Epoch) -> list[EpochShareBlock]:
        """One block per server; per-epoch uniqueness state dies with the call."""
        cfg, p = self.cfg, self.cfg.field_prime
        seen: set[str] = set()
        alpha: dict[str, set[str]] = {}
        digest_vals, digest_strs, su_bits, loc_vals, loc_strs = [], [], [], [], []
        for ev in epoch.events:
            d, loc = ev.device_id, ev.location_id
            digest_vals.append(self.digests.digest(d))
            digest_strs.append(self.digests.digest_str(d))
            loc_vals.append(self.locations.code(loc))
            loc_strs.append(self.locations.code_str(loc))
            if d not in seen:
                su_bits.append(1)
                seen.add(d)
                alpha[d] = {loc}
            elif loc not in alpha[d]:
                su_bits.append(1)
                alpha[d].add(loc)
            else:
                su_bits.append(0)

        rows = len(epoch.events)
        scalar_secrets = np.array([digest_vals, su_bits, loc_vals], dtype=np.uint64)  # (3, rows)
        scalar_coeffs = self.rng.integers(0, p, size=(3, rows), dtype=np.uint64)
        smid_secrets = self._one_hot(digest_strs)
        smid_coeffs = self.rng.integers(0, p, size=smid_secrets.shape, dtype=np.uint64)
        sml_secrets = self._one_hot(loc_strs)
        sml_coeffs = self.rng.integers(0, p, size=sml_secrets.shape, dtype=np.uint64)

        blocks = []
        for x in range(1, cfg.server_count + 1):
            scalars = _eval_degree1(scalar_secrets, scalar_coeffs, x, p)
            blocks.append(EpochShareBlock(
                server_index=x,
                epoch_id=epoch.epoch_id,
                smid=_eval_degree1(smid_secrets, smid_coeffs, x, p),
                sid=scalars[0],
                su=scalars[1],
                sml=_eval_degree1(sml_secrets, sml_coeffs, x, p),
                sl=scalars[2],
            ))
        return blocks

    def ingest(self, epoch: Epoch, cluster: ShareCluster) -> int:
        blocks = self.share_epoch(epoch)
        cluster.ingest_epoch(blocks)
        return len(epoch.events)

    def metadata_bytes(self) -> int:
        """Size of the engine-held registries (the per-epoch table is transient)."""
        reg = self.digests.to_dict()["devices"]
        loc = self.locations.to_dict()["locations"]
        return sum(len(k) + 8 for k in reg) + sum(len(k) + 8 for k in loc)


def _eval_degree1(secrets: np.ndarray, coeffs: np.ndarray, x: int, p: int) -> np.ndarray:
    vals = secrets + mul_vec(coeffs, np.uint64(x), p)
    pp = np.uint64(p)
    return vals - np.where(vals >= pp, pp, np.uint64(0))


def create_shares_epoch(epoch: Epoch, cfg: SystemConfig,
                        rng: np.random.Generator | None = None,
                        encrypter: IquestEncrypter | None = None) -> list[list[SharedRow]]:
    """Row-object form of share_epoch: N lists of SharedRow, one per server."""
    if encrypter is None:
        encrypter = IquestEncrypter(cfg, rng)
    blocks = encrypter.share_epoch(epoch)
    out = []
    for block in blocks:
        rows = []
        for j in range(block.row_count):
            rows.append(SharedRow(
                a_smid=SssFragment(block.server_index, block.smid[j]),
                a_sid=Share(block.server_index, int(block.sid[j])),
                a_su=Share(block.server_index, int(block.su[j])),
                a_sml=SssFragment(block.server_index, block.sml[j]),
                a_sl=Share(block.server_index, int(block.sl[j])),
                a_delta=block.epoch_id,
            ))
        out.append(rows)
    return out


class IquestClient:
    """Builds per-server query fragments and reconstructs the answers."""

    def __init__(self, cfg: SystemConfig, cluster: ShareCluster, encrypter: IquestEncrypter,
                 publisher: Publisher, registry: NotificationRegistry | None = None,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.cluster = cluster
        self.encrypter = encrypter
        self.publisher = publisher
        self.registry = registry if registry is not None else NotificationRegistry()
        self.rng = rng if rng is not None else np.random.default_rng()
        self._query_seq = 0

    # -- plumbing ------------------------------------------------------------------

    def _new_record(self, kind: str) -> MeasurementRecord:
        self._query_seq += 1
        return MeasurementRecord(query_id=f"iq{self._query_seq:04d}-{kind}")

    def _responsive(self, needed: int):
        servers = self.cluster.servers
        if len(servers) < needed:
            raise ThresholdError(
                f"reconstruction needs {needed} responsive servers, cluster has {len(servers)}"
            )
        return servers[:needed]

    def _fragments(self, value: str) -> list[SssFragment]:
        return make_sss(value, len(self.cluster.servers), self.cfg.field_prime, self.rng)

    def _verify(self, device_id: str):
        if not self.publisher.verify(device_id):
            raise UnauthorizedQueryError(f"publisher rejected device {device_id}")

    def _absorb(self, record: MeasurementRecord, server_index: int, response):
        record.add_transfer(server_index, sent=response.request_bytes,
                            received=response.response_bytes)
        if response.touches is not None:
            prev = record.accessed_rows.get(server_index, ())
            record.accessed_rows[server_index] = tuple(prev) + tuple(response.touches)

    def _reconstruct_vectors(self, responses: list, p: int) -> dict[int, np.ndarray]:
        """Interpolate per-epoch response vectors across servers at x=0."""
        xs = [srv.server_index for srv, _ in responses]
        out: dict[int, np.ndarray] = {}
        for epoch_id, _ in responses[0][1].epoch_rows:
            stacked = np.stack([resp.data[epoch_id] for _, resp in responses])
            out[epoch_id] = interpolate_rows_at_zero(xs, stacked, p)
        return out

    # -- location tracing ------------------------------------------------------------

    def location_trace(self, device_id: str, epoch_from: int, epoch_to: int) -> QueryReport:
        device_id = canonical_device_id(device_id)
        self._verify(device_id)
        record = self._new_record("location-trace")
        with QueryTimer(record):
            per_epoch, codes = self._trace_codes(device_id, epoch_from, epoch_to, record)
            answer = set().union(*per_epoch.values()) if per_epoch else set()
        return QueryReport(
            query_id=record.query_id,
            kind="location-trace",
            params={"device_id": device_id, "from": epoch_from, "to": epoch_to},
            answer=answer,
            extras={"per_epoch": per_epoch, "code_vectors": codes},
            record=record,
        )

    def _trace_codes(self, device_id: str, epoch_from: int, epoch_to: int,
                     record: MeasurementRecord):
        degree = 2 * self.cfg.digest_digits + 1
        servers = self._responsive(degree + 1)
        fragments = self._fragments(self.encrypter.digests.digest_str(device_id))
        responses = []
        for srv in servers:
            resp = srv.eval_location_trace(fragments[srv.server_index - 1], epoch_from, epoch_to)
            self._absorb(record, srv.server_index, resp)
            responses.append((srv, resp))
        codes = self._reconstruct_vectors(responses, self.cfg.field_prime)
        per_epoch: dict[int, set[str]] = {}
        for epoch_id, vec in codes.items():
            locs = {self.encrypter.locations.location_of(int(c)) for c in vec if c != 0}
            if locs:
                per_epoch[epoch_id] = locs
        return per_epoch, codes

    # -- user (contact) tracing ---------------------------------------------------------

    def user_trace(self, device_id: str, epoch_from: int, epoch_to: int) -> QueryReport:
        device_id = canonical_device_id(device_id)
        self._verify(device_id)
        record = self._new_record("user-trace")
        p = self.cfg.field_prime
        with QueryTimer(record):
            per_epoch, _ = self._trace_codes(device_id, epoch_from, epoch_to, record)
            # per epoch, share every location impacted in that epoch; the
            # servers emit the |locations| x |rows| product matrix
            queries_per_server: dict[int, dict[int, list[SssFragment]]] = {}
            for epoch_id, locs in per_epoch.items():
                for loc in sorted(locs):
                    frags = self._fragments(self.encrypter.locations.code_str(loc))
                    for frag in frags:
                        queries_per_server.setdefault(frag.server_index, {}).setdefault(
                            epoch_id, []).append(frag)
            answer: set[str] = set()
            if queries_per_server:
                degree = 2 * self.cfg.digest_digits + 1
                servers = self._responsive(degree + 1)
                responses = []
                for srv in servers:
                    resp = srv.eval_user_trace(queries_per_server[srv.server_index])
                    self._absorb(record, srv.server_index, resp)
                    responses.append((srv, resp))
                own = self.encrypter.digests.digest(device_id)
                xs = [srv.server_index for srv, _ in responses]
                for epoch_id, _ in responses[0][1].epoch_rows:
                    stacked = np.stack([resp.data[epoch_id] for _, resp in responses])
                    values = interpolate_rows_at_zero(xs, stacked, p)
                    for value in values.ravel():
                        if value != 0 and int(value) != own:
                            answer.add(self.encrypter.digests.device_of(int(value)))
            delivered = notify(answer, self.registry)
        return QueryReport(
            query_id=record.query_id,
            kind="user-trace",
            params={"device_id": device_id, "from": epoch_from, "to": epoch_to},
            answer=answer,
            extras={"impacted": per_epoch, "notified": delivered},
            record=record,
        )

    # -- social distancing ----------------------------------------------------------------

    def social_distance(self, epoch_from: int, epoch_to: int, aggregated: bool = False,
                        include_offenders: bool = False) -> QueryReport:
        record = self._new_record("social-distance")
        with QueryTimer(record):
            if aggregated:
                counts = self._counts_aggregated(epoch_from, epoch_to, record)
                devices_at = {}
            else:
                counts, devices_at = self._counts_baseline(
                    epoch_from, epoch_to, record, with_offenders=include_offenders)
            violations = self._violations(counts)
            if aggregated and include_offenders:
                devices_at = self._offenders_for(violations, record)
            offenders = {
                (v.location_id, v.epoch_id): sorted(devices_at.get((v.location_id, v.epoch_id), ()))
                for v in violations
            } if include_offenders else {}
        return QueryReport(
            query_id=record.query_id,
            kind="social-distance",
            params={"from": epoch_from, "to": epoch_to, "aggregated": aggregated},
            answer=[(v.location_id, v.epoch_id, v.unique_count) for v in violations],
            extras={"counts": counts, "offenders": offenders, "violations": violations},
            record=record,
        )

    def _counts_baseline(self, epoch_from: int, epoch_to: int, record: MeasurementRecord,
                         with_offenders: bool):
        p = self.cfg.field_prime
        servers = self._responsive(3)  # su*sl has degree 2
        responses = []
        for srv in servers:
            resp = srv.eval_social_distance(epoch_from, epoch_to)
            self._absorb(record, srv.server_index, resp)
            responses.append((srv, resp))
        code_vectors = self._reconstruct_vectors(responses, p)
        digest_vectors = {}
        if with_offenders:
            off_responses = []
            for srv in servers:
                resp = srv.eval_sd_offenders(epoch_from, epoch_to)
                self._absorb(record, srv.server_index, resp)
                off_responses.append((srv, resp))
            digest_vectors = self._reconstruct_vectors(off_responses, p)
        counts: dict[tuple[str, int], int] = {}
        devices_at: dict[tuple[str, int], set[str]] = {}
        for epoch_id, vec in code_vectors.items():
            for j, code in enumerate(vec):
                if code == 0:
                    continue
                loc = self.encrypter.locations.location_of(int(code))
                counts[(loc, epoch_id)] = counts.get((loc, epoch_id), 0) + 1
                if with_offenders:
                    digest = int(digest_vectors[epoch_id][j])
                    devices_at.setdefault((loc, epoch_id), set()).add(
                        self.encrypter.digests.device_of(digest))
        return counts, devices_at

    def _counts_aggregated(self, epoch_from: int, epoch_to: int,
                           record: MeasurementRecord) -> dict[tuple[str, int], int]:
        p = self.cfg.field_prime
        locations = self.encrypter.locations.all_locations()
        degree = 2 * self.cfg.digest_digits + 1
        servers = self._responsive(degree + 1)
        per_server_frags: dict[int, list[SssFragment]] = {s.server_index: [] for s in servers}
        for loc in locations:
            for frag in self._fragments(self.encrypter.locations.code_str(loc)):
                if frag.server_index in per_server_frags:
                    per_server_frags[frag.server_index].append(frag)
        responses = []
        for srv in servers:
            resp = srv.eval_aggregated_sd(per_server_frags[srv.server_index], epoch_from, epoch_to)
            self._absorb(record, srv.server_index, resp)
            responses.append((srv, resp))
        xs = [srv.server_index for srv, _ in responses]
        stacked = np.stack([resp.data["counts"] for _, resp in responses])
        counts_matrix = interpolate_rows_at_zero(xs, stacked, p)
        epochs = responses[0][1].data["epochs"]
        counts: dict[tuple[str, int], int] = {}
        for i, loc in enumerate(locations):
            for j, epoch_id in enumerate(epochs):
                count = int(counts_matrix[i, j])
                if count:
                    counts[(loc, epoch_id)] = count
        return counts

    def _offenders_for(self, violations: list[Violation],
                       record: MeasurementRecord) -> dict[tuple[str, int], set[str]]:
        """Devices present at each violating (location, epoch), via the
        location-match x digest program restricted to that epoch."""
        p = self.cfg.field_prime
        degree = 2 * self.cfg.digest_digits + 1
        servers = self._responsive(degree + 1)
        devices_at: dict[tuple[str, int], set[str]] = {}
        for v in violations:
            frags = self._fragments(self.encrypter.locations.code_str(v.location_id))
            responses = []
            for srv in servers:
                resp = srv.eval_user_trace({v.epoch_id: [frags[srv.server_index - 1]]})
                self._absorb(record, srv.server_index, resp)
                responses.append((srv, resp))
            xs = [srv.server_index for srv, _ in responses]
            stacked = np.stack([resp.data[v.epoch_id] for _, resp in responses])
            values = interpolate_rows_at_zero(xs, stacked, p)
            for value in values.ravel():
                if value != 0:
                    devices_at.setdefault((v.location_id, v.epoch_id), set()).add(
                        self.encrypter.digests.device_of(int(value)))
        return devices_at

    def _violations(self, counts: dict[tuple[str, int], int]) -> list[Violation]:
        out = []
        for (loc, epoch_id), count in sorted(counts.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            if count > self.cfg.capacity_of(loc) * self.cfg.distance_index:
                out.append(Violation(loc, epoch_id, count))
        return out

    # -- crowd flow ---------------------------------------------------------------------------

    def crowd_flow(self, epoch_from: int, epoch_to: int, k: int | None = None,
                   aggregated: bool = False) -> QueryReport:
        """Top-k locations by distinct visitors over the range.

        Distinct-over-range needs per-row device identities, so the ranking
        always comes from the row-wise uniqueness products; with
        `aggregated` the summed per-epoch counts are fetched too and
        cross-checked against that tabulation.
        """
        k = self.cfg.top_k if k is None else k
        if k <= 0:
            raise QueryError("crowd flow requires k > 0")
        record = self._new_record("crowd-flow")
        with QueryTimer(record):
            counts, devices_at = self._counts_baseline(
                epoch_from, epoch_to, record, with_offenders=True)
            if aggregated:
                agg = self._counts_aggregated(epoch_from, epoch_to, record)
                if agg != counts:
                    raise QueryError("aggregated counts disagree with row-wise tabulation")
            visitors: dict[str, set[str]] = {}
            for (loc, _), devices in devices_at.items():
                visitors.setdefault(loc, set()).update(devices)
            ranked = sorted(visitors.items(), key=lambda kv: (-len(kv[1]), kv[0]))
            answer = [(loc, len(devs)) for loc, devs in ranked[:k]]
        return QueryReport(
            query_id=record.query_id,
            kind="crowd-flow",
            params={"from": epoch_from, "to": epoch_to, "k": k, "aggregated": aggregated},
            answer=answer,
            extras={"per_epoch_counts": counts},
            record=record,
        )
