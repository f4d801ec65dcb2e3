"""Local token authority: scoped, audience-bound, expiring bearer tokens.

Tokens and mailbox envelopes are authenticated with HMAC-SHA256 over the
canonical serialization, keyed by one shared secret per topology.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import os
import random
import stat
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .core import canonical, tadd

log = logging.getLogger(__name__)

SECRET_FILE = "authority.key"
SECRET_BYTES = 32
SCOPES = ("compute.create", "job.submit", "mailbox.write")

BAD_SIGNATURE = "bad-signature"
WRONG_AUDIENCE = "wrong-audience"
WRONG_SCOPE = "wrong-scope"
EXPIRED = "expired"
NOT_YET_VALID = "not-yet-valid"
REJECTION_REASONS = (BAD_SIGNATURE, WRONG_AUDIENCE, WRONG_SCOPE, EXPIRED, NOT_YET_VALID)


class CredentialError(Exception):
    """Secret directory unusable or secret file corrupt."""


class TokenRejected(Exception):
    """Token failed verification; ``reason`` is one of REJECTION_REASONS."""

    def __init__(self, reason: str, subject: Optional[str] = None) -> None:
        self.reason = reason
        self.subject = subject
        super().__init__(reason)


@dataclass(frozen=True)
class Token:
    subject: str
    audience: str
    scope: str
    issued_at: float
    expires_at: float
    signature: str = ""

    def claims(self) -> dict[str, Any]:
        return {
            "subject": self.subject,
            "audience": self.audience,
            "scope": self.scope,
            "issued_at": self.issued_at,
            "expires_at": self.expires_at,
        }

    def to_dict(self) -> dict[str, Any]:
        d = self.claims()
        d["signature"] = self.signature
        return d

    def to_wire(self) -> str:
        return canonical(self).decode("utf-8")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Token:
        return cls(
            subject=str(d["subject"]),
            audience=str(d["audience"]),
            scope=str(d["scope"]),
            issued_at=d["issued_at"],
            expires_at=d["expires_at"],
            signature=str(d.get("signature", "")),
        )


@dataclass
class AuthorityState:
    """Shared secret plus an append-only log of issued tokens."""

    secret: bytes
    secret_dir: Optional[Path] = None
    issued_log: list[tuple[str, str, str, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.secret) < SECRET_BYTES:
            raise CredentialError(f"secret must be at least {SECRET_BYTES} bytes")

    # operations are also exposed as methods for convenience
    def issue(self, subject: str, audience: str, scope: str, ttl_s: float, now: float) -> Token:
        return issue_token(self, subject, audience, scope, ttl_s, now)

    def verify(self, token: Token, expected_audience: str, required_scope: str, now: float) -> str:
        return verify_token(self, token, expected_audience, required_scope, now)

    def sign(self, payload: bytes) -> str:
        return sign_envelope(self, payload)

    def check(self, payload: bytes, signature: str) -> bool:
        return verify_envelope(self, payload, signature)


def _mac(secret: bytes, payload: bytes) -> str:
    return hmac.new(secret, payload, hashlib.sha256).hexdigest()


def init_authority(secret_dir: Union[str, Path, None], seed: Optional[int] = None) -> AuthorityState:
    """Create or load the topology secret.

    With ``secret_dir=None`` a seed is required and the authority lives in
    memory only (simulation mode). With a directory, an existing
    ``authority.key`` is loaded byte-for-byte; otherwise a new one is written
    with owner-only permissions, derived from ``seed`` when given.
    """
    if secret_dir is None:
        if seed is None:
            raise CredentialError("an in-memory authority needs a seed")
        return AuthorityState(secret=random.Random(seed).randbytes(SECRET_BYTES))

    d = Path(secret_dir)
    path = d / SECRET_FILE
    if path.exists():
        try:
            secret = path.read_bytes()
        except OSError as exc:
            raise CredentialError(f"cannot read {path}: {exc}") from exc
        if len(secret) < SECRET_BYTES:
            raise CredentialError(f"corrupt secret file {path}: {len(secret)} bytes")
        return AuthorityState(secret=secret, secret_dir=d)

    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CredentialError(f"cannot create {d}: {exc}") from exc
    if not os.access(d, os.W_OK):
        raise CredentialError(f"secret dir {d} is not writable")
    secret = random.Random(seed).randbytes(SECRET_BYTES) if seed is not None else os.urandom(SECRET_BYTES)
    try:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, stat.S_IRUSR | stat.S_IWUSR)
        with os.fdopen(fd, "wb") as fh:
            fh.write(secret)
    except OSError as exc:
        raise CredentialError(f"cannot write {path}: {exc}") from exc
    log.info("created authority secret in %s", d)
    return AuthorityState(secret=secret, secret_dir=d)


def issue_token(authority: AuthorityState, subject: str, audience: str, scope: str, ttl_s: float, now: float) -> Token:
    if not ttl_s > 0:
        raise ValueError("ttl_s must be positive")
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    unsigned = Token(subject, audience, scope, now, tadd(now, ttl_s))
    token = replace(unsigned, signature=_mac(authority.secret, canonical(unsigned.claims())))
    authority.issued_log.append((subject, audience, scope, token.expires_at))
    return token


def verify_token(authority: AuthorityState, token: Token, expected_audience: str, required_scope: str, now: float) -> str:
    """Return the token subject, or raise TokenRejected with the first failing reason."""
    expected = _mac(authority.secret, canonical(token.claims()))
    if not isinstance(token.signature, str) or not hmac.compare_digest(expected, token.signature):
        raise TokenRejected(BAD_SIGNATURE, token.subject)
    if token.audience != expected_audience:
        raise TokenRejected(WRONG_AUDIENCE, token.subject)
    if token.scope != required_scope:
        raise TokenRejected(WRONG_SCOPE, token.subject)
    if now < token.issued_at:
        raise TokenRejected(NOT_YET_VALID, token.subject)
    if now >= token.expires_at:
        raise TokenRejected(EXPIRED, token.subject)
    return token.subject


def refresh_token(authority: AuthorityState, token: Token, ttl_s: float, now: float) -> Token:
    """Reissue ``token`` with a new expiry; freshness is not required but the signature is."""
    if not hmac.compare_digest(_mac(authority.secret, canonical(token.claims())), token.signature):
        raise TokenRejected(BAD_SIGNATURE, token.subject)
    return issue_token(authority, token.subject, token.audience, token.scope, ttl_s, now)


def sign_envelope(authority: AuthorityState, payload: bytes) -> str:
    return _mac(authority.secret, payload)


def verify_envelope(authority: AuthorityState, payload: bytes, signature: str) -> bool:
    return isinstance(signature, str) and hmac.compare_digest(_mac(authority.secret, payload), signature)
