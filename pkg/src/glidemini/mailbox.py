"""Factory-hosted latest-value mailbox for client requests and entry status."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Optional

from .core import canonical
from .credentials import BAD_SIGNATURE, AuthorityState, Token, TokenRejected, sign_envelope, verify_envelope

STALE_SEQUENCE = "stale-sequence"
DEFAULT_REQUEST_TTL_S = 60.0


class MailboxRejected(Exception):
    """A put was refused; ``reason`` is a token rejection reason or stale-sequence."""

    def __init__(self, reason: str) -> None:
        self.reason = reason
        super().__init__(reason)


@dataclass(frozen=True)
class RequestMessage:
    client_id: str
    entry_id: str
    seq: int
    req_pressure: int
    req_max_run: int
    credential: Token
    sent_at: float
    signature: str = ""

    def __post_init__(self) -> None:
        if self.seq < 0 or self.req_pressure < 0 or self.req_max_run < 0:
            raise ValueError("seq, req_pressure and req_max_run must be non-negative")

    def envelope(self) -> bytes:
        """Bytes covered by the envelope signature."""
        d = self.to_dict()
        del d["signature"]
        return canonical(d)

    def signed(self, authority: AuthorityState) -> RequestMessage:
        return replace(self, signature=sign_envelope(authority, self.envelope()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "client_id": self.client_id,
            "entry_id": self.entry_id,
            "seq": self.seq,
            "req_pressure": self.req_pressure,
            "req_max_run": self.req_max_run,
            "credential": self.credential.to_dict(),
            "sent_at": self.sent_at,
            "signature": self.signature,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RequestMessage:
        return cls(
            client_id=str(d["client_id"]),
            entry_id=str(d["entry_id"]),
            seq=int(d["seq"]),
            req_pressure=int(d["req_pressure"]),
            req_max_run=int(d["req_max_run"]),
            credential=Token.from_dict(d["credential"]),
            sent_at=d["sent_at"],
            signature=str(d.get("signature", "")),
        )


@dataclass(frozen=True)
class FactoryStatusMessage:
    """Per-entry glidein counts, keyed client -> state -> count."""

    entry_id: str
    seq: int
    counts: Mapping[str, Mapping[str, int]]
    sent_at: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "entry_id": self.entry_id,
            "seq": self.seq,
            "counts": {c: dict(v) for c, v in self.counts.items()},
            "sent_at": self.sent_at,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FactoryStatusMessage:
        counts = {str(c): {str(s): int(n) for s, n in v.items()} for c, v in d["counts"].items()}
        return cls(str(d["entry_id"]), int(d["seq"]), counts, d["sent_at"])

    def count(self, client_id: str, states) -> int:
        per = self.counts.get(client_id, {})
        return sum(per.get(getattr(s, "value", s), 0) for s in states)


@dataclass
class Mailbox:
    """Latest-wins store. ``audience`` names the Factory host for write tokens."""

    authority: AuthorityState
    audience: str
    requests: dict[tuple[str, str], RequestMessage] = field(default_factory=dict)
    statuses: dict[str, FactoryStatusMessage] = field(default_factory=dict)
    _last_seq: dict[tuple[str, str], int] = field(default_factory=dict)

    def put_request(self, msg: RequestMessage, now: float, token: Optional[Token] = None) -> int:
        """Store ``msg`` if its write token, envelope and sequence are valid.

        Returns the stored seq; raises MailboxRejected otherwise.
        """
        if token is None:
            raise MailboxRejected(BAD_SIGNATURE)
        try:
            self.authority.verify(token, self.audience, "mailbox.write", now)
        except TokenRejected as exc:
            raise MailboxRejected(exc.reason) from None
        if not verify_envelope(self.authority, msg.envelope(), msg.signature):
            raise MailboxRejected(BAD_SIGNATURE)
        key = (msg.client_id, msg.entry_id)
        last = self._last_seq.get(key)
        if last is not None and msg.seq <= last:
            raise MailboxRejected(STALE_SEQUENCE)
        self._last_seq[key] = msg.seq
        self.requests[key] = msg
        return msg.seq

    def fetch_requests(self, entry_id: str, now: float, ttl_s: float = DEFAULT_REQUEST_TTL_S) -> list[RequestMessage]:
        """Fresh requests for ``entry_id``, one per client, ordered by client_id.

        Requests older than ``ttl_s`` are purged (the sequence high-water mark
        is kept, so a replayed old message still counts as stale).
        """
        if not ttl_s > 0:
            raise ValueError("ttl_s must be positive")
        out = []
        for key in sorted(k for k in self.requests if k[1] == entry_id):
            msg = self.requests[key]
            if now - msg.sent_at > ttl_s:
                del self.requests[key]
            else:
                out.append(msg)
        return out

    def publish_status(self, status: FactoryStatusMessage) -> None:
        cur = self.statuses.get(status.entry_id)
        if cur is None or status.seq >= cur.seq:
            self.statuses[status.entry_id] = status

    def fetch_status(self, client_id: Optional[str] = None) -> list[FactoryStatusMessage]:
        """Latest status for every entry, ordered by entry_id.

        With ``client_id`` the counts are narrowed to that client.
        """
        out = []
        for entry_id in sorted(self.statuses):
            st = self.statuses[entry_id]
            if client_id is not None:
                st = replace(st, counts={client_id: dict(st.counts.get(client_id, {}))})
            out.append(st)
        return out


def put_request(box: Mailbox, msg: RequestMessage, now: float, token: Optional[Token] = None) -> int:
    return box.put_request(msg, now, token)


def fetch_requests(box: Mailbox, entry_id: str, now: float, ttl_s: float = DEFAULT_REQUEST_TTL_S) -> list[RequestMessage]:
    return box.fetch_requests(entry_id, now, ttl_s)


def publish_status(box: Mailbox, status: FactoryStatusMessage) -> None:
    box.publish_status(status)


def fetch_status(box: Mailbox, client_id: Optional[str] = None) -> list[FactoryStatusMessage]:
    return box.fetch_status(client_id)
