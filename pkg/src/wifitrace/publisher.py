"""Mock trusted publisher and opt-in notification registry.

The publisher attests which device ids belong to confirmed-infected
persons; trace queries are gated on its verification.  The list is held as
a salted-hash set so raw ids never sit on disk, every verification is
audit-logged, and a missing list fails closed.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import UnauthorizedQueryError
from .model import canonical_device_id


def _hash_id(salt: str, device_id: str) -> str:
    return hashlib.sha256((salt + device_id).encode("utf-8")).hexdigest()


@dataclass
class Publisher:
    """Holds the salted-hash infected list and answers verify() calls."""

    salt: str
    hashed_ids: frozenset[str]
    issued_at_ms: int
    audit_log: list[dict] = field(default_factory=list)
    audit_path: Path | None = None

    @classmethod
    def from_device_ids(cls, device_ids: list[str], salt: str = "wifitrace",
                        issued_at_ms: int | None = None) -> "Publisher":
        hashed = frozenset(_hash_id(salt, canonical_device_id(d)) for d in device_ids)
        if issued_at_ms is None:
            issued_at_ms = int(time.time() * 1000)
        return cls(salt=salt, hashed_ids=hashed, issued_at_ms=issued_at_ms)

    @classmethod
    def unavailable(cls) -> "Publisher":
        """A publisher whose list could not be loaded; verify() fails closed."""
        pub = cls(salt="", hashed_ids=frozenset(), issued_at_ms=0)
        pub._unavailable = True
        return pub

    def verify(self, device_id: str) -> bool:
        """True iff the id is on the infected list.  Always audit-logged."""
        device_id = canonical_device_id(device_id)
        entry = {"device_id": device_id, "time_ms": int(time.time() * 1000)}
        if getattr(self, "_unavailable", False):
            entry["result"] = "error"
            self._audit(entry)
            raise UnauthorizedQueryError("infected list unavailable; verification fails closed")
        ok = _hash_id(self.salt, device_id) in self.hashed_ids
        entry["result"] = "accepted" if ok else "rejected"
        self._audit(entry)
        return ok

    def _audit(self, entry: dict):
        self.audit_log.append(entry)
        if self.audit_path is not None:
            with open(self.audit_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")

    def save(self, path: str | Path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {"salt": self.salt, "issued_at_ms": self.issued_at_ms,
                 "hashed_ids": sorted(self.hashed_ids)},
                fh, indent=2,
            )

    @classmethod
    def load(cls, path: str | Path) -> "Publisher":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(salt=doc["salt"], hashed_ids=frozenset(doc["hashed_ids"]),
                   issued_at_ms=doc["issued_at_ms"])


@dataclass
class NotificationRegistry:
    """Opt-in map device id -> contact handle; absent devices are never notified."""

    contacts: dict[str, str] = field(default_factory=dict)
    deliveries: list[dict] = field(default_factory=list)

    def record_notifications(self, device_ids: set[str] | list[str]) -> list[str]:
        """Deliver (log only) to the ids present in the registry; returns them sorted."""
        delivered = sorted(d for d in device_ids if d in self.contacts)
        now = int(time.time() * 1000)
        for d in delivered:
            self.deliveries.append({"device_id": d, "contact": self.contacts[d], "time_ms": now})
        return delivered

    def save(self, path: str | Path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.contacts, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "NotificationRegistry":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(contacts=json.load(fh))
