"""Line-delimited, signed message framing for procs mode."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Mapping

from ..core import canonical
from ..credentials import AuthorityState
from .services import MESSAGE_TYPES

MAX_LINE = 1 << 20


class WireError(ValueError):
    """Undecodable, unsigned or unknown-type message."""


@dataclass(frozen=True)
class Message:
    type: str
    sender: str
    seq: int
    payload: Mapping[str, Any]

    def body(self) -> dict[str, Any]:
        return {"type": self.type, "sender": self.sender, "seq": self.seq, "payload": self.payload}


def encode(msg: Message, authority: AuthorityState) -> bytes:
    body = msg.body()
    if msg.type not in MESSAGE_TYPES:
        raise WireError(f"unknown message type {msg.type!r}")
    body["signature"] = authority.sign(canonical(body))
    return canonical(body) + b"\n"


def decode(line: bytes, authority: AuthorityState) -> Message:
    try:
        d = json.loads(line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise WireError(f"undecodable line: {exc}") from None
    if not isinstance(d, dict) or set(d) != {"type", "sender", "seq", "payload", "signature"}:
        raise WireError("message must have exactly type, sender, seq, payload, signature")
    sig = d.pop("signature")
    if not authority.check(canonical(d), sig):
        raise WireError("bad message signature")
    if d["type"] not in MESSAGE_TYPES:
        raise WireError(f"unknown message type {d['type']!r}")
    if not isinstance(d["payload"], dict):
        raise WireError("payload must be an object")
    return Message(str(d["type"]), str(d["sender"]), int(d["seq"]), d["payload"])
