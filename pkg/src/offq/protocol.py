"""Wire protocol: envelopes, canonical JSON codec, routing keys, manifests.

Every message on the broker is an Envelope. Encoding is canonical JSON
(sorted keys, compact separators, UTF-8) so equal envelopes encode to equal
bytes; identifiers are lowercase hex GUIDs.
"""

from __future__ import annotations

import json
import re
import uuid
from dataclasses import dataclass, field
from typing import Any

# Every message type that may appear on the wire. Flows reject anything else.
MESSAGE_TYPES = frozenset(
    {
        "clientRegister",
        "workerRegister",
        "sessionGrant",
        "clientConnect",
        "workerConnect",
        "startNewTask",
        "newTaskAck",
        "taskUploadCompleted",
        "jobAssignment",
        "checkpointManifest",
        "heartbeat",
        "jobResult",
        "resultReady",
        "cancelJob",
        "jobStatusRequest",
        "jobStatusReply",
        "lockRequest",
        "lockAck",
        "changePublish",
        "promoteBackup",
    }
)

_GUID_RE = re.compile(r"^[0-9a-f]{32}$")

ENVELOPE_FIELDS = ("msg_id", "msg_type", "sender", "reply_to", "body")


class ProtocolError(ValueError):
    """Raised when an envelope or routing key fails validation."""


def new_guid() -> str:
    """Fresh random identifier as 32 lowercase hex chars."""
    return uuid.uuid4().hex


def is_guid(value: Any) -> bool:
    return isinstance(value, str) and _GUID_RE.match(value) is not None


def canonical_json(obj: Any) -> str:
    """Deterministic JSON: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class Envelope:
    """One protocol message: identity, type, addressing, and a JSON body."""

    msg_id: str
    msg_type: str
    sender: str
    reply_to: str
    body: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not is_guid(self.msg_id):
            raise ProtocolError(f"msg_id must be a 32-char lowercase hex GUID, got {self.msg_id!r}")
        if self.msg_type not in MESSAGE_TYPES:
            raise ProtocolError(f"unknown msg_type {self.msg_type!r}")
        if not isinstance(self.sender, str) or not self.sender:
            raise ProtocolError(f"sender must be a non-empty string, got {self.sender!r}")
        if not isinstance(self.reply_to, str):
            raise ProtocolError(f"reply_to must be a string, got {self.reply_to!r}")
        if not isinstance(self.body, dict):
            raise ProtocolError(f"body must be a dict, got {type(self.body).__name__}")


def make_envelope(
    msg_type: str,
    sender: str,
    body: dict[str, Any] | None = None,
    reply_to: str = "",
    msg_id: str | None = None,
) -> Envelope:
    """Envelope with a fresh msg_id unless one is supplied."""
    return Envelope(
        msg_id=msg_id if msg_id is not None else new_guid(),
        msg_type=msg_type,
        sender=sender,
        reply_to=reply_to,
        body=dict(body) if body else {},
    )


def encode_envelope(env: Envelope) -> bytes:
    """Envelope -> canonical JSON bytes. decode(encode(e)) == e."""
    payload = {
        "msg_id": env.msg_id,
        "msg_type": env.msg_type,
        "sender": env.sender,
        "reply_to": env.reply_to,
        "body": env.body,
    }
    return canonical_json(payload).encode("utf-8")


def envelope_to_json(env: Envelope) -> dict[str, Any]:
    """Envelope as a plain dict (for embedding in broker frames)."""
    return {
        "msg_id": env.msg_id,
        "msg_type": env.msg_type,
        "sender": env.sender,
        "reply_to": env.reply_to,
        "body": env.body,
    }


def envelope_from_json(payload: Any) -> Envelope:
    """Validate a decoded JSON object into an Envelope, naming bad fields."""
    if not isinstance(payload, dict):
        raise ProtocolError(f"envelope must be a JSON object, got {type(payload).__name__}")
    unknown = set(payload) - set(ENVELOPE_FIELDS)
    if unknown:
        raise ProtocolError(f"unknown envelope fields: {sorted(unknown)}")
    missing = [f for f in ENVELOPE_FIELDS if f not in payload]
    if missing:
        raise ProtocolError(f"missing envelope fields: {missing}")
    return Envelope(
        msg_id=payload["msg_id"],
        msg_type=payload["msg_type"],
        sender=payload["sender"],
        reply_to=payload["reply_to"],
        body=payload["body"],
    )


def decode_envelope(data: bytes) -> Envelope:
    """Canonical JSON bytes -> Envelope. Errors name the offending field."""
    try:
        payload = json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"envelope is not valid UTF-8: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"envelope is not valid JSON: {exc}") from exc
    return envelope_from_json(payload)


# ---------------------------------------------------------------------------
# Routing keys.
#
# Grammar over the named exchanges (the fanout exchange ignores keys):
#   key := "clientRegister" | "workerRegister"
#        | orch "." "clientConnect" | orch "." "workerConnect"
#        | orch "." principal_guid
#        | principal_guid
# where orch is an orchestrator name (no dots) and principal_guid is a
# client or worker id.

_NAME_RE = re.compile(r"^[A-Za-z0-9_-]+$")

CLIENT_REGISTER_KEY = "clientRegister"
WORKER_REGISTER_KEY = "workerRegister"


def is_node_name(value: str) -> bool:
    """Orchestrator/worker display names: dot-free, non-empty."""
    return isinstance(value, str) and _NAME_RE.match(value) is not None


def client_connect_key(orch: str) -> str:
    return f"{_checked_name(orch)}.clientConnect"


def worker_connect_key(orch: str) -> str:
    return f"{_checked_name(orch)}.workerConnect"


def to_orchestrator_key(orch: str, principal_id: str) -> str:
    """Key a client or worker uses to reach its serving orchestrator."""
    if not is_guid(principal_id):
        raise ProtocolError(f"principal id must be a GUID, got {principal_id!r}")
    return f"{_checked_name(orch)}.{principal_id}"


def to_principal_key(principal_id: str) -> str:
    """Key the orchestrator uses on the client/worker exchanges."""
    if not is_guid(principal_id):
        raise ProtocolError(f"principal id must be a GUID, got {principal_id!r}")
    return principal_id


def _checked_name(orch: str) -> str:
    if not is_node_name(orch):
        raise ProtocolError(f"orchestrator name must match [A-Za-z0-9_-]+, got {orch!r}")
    return orch


@dataclass(frozen=True)
class ParsedKey:
    """Classified routing key: which production it matches."""

    kind: str  # clientRegister | workerRegister | connect | to_orchestrator | to_principal
    orch: str | None = None
    principal_id: str | None = None


def parse_routing_key(key: str) -> ParsedKey:
    """Classify a routing key under the grammar; raise ProtocolError if none fits."""
    if key == CLIENT_REGISTER_KEY:
        return ParsedKey("clientRegister")
    if key == WORKER_REGISTER_KEY:
        return ParsedKey("workerRegister")
    if is_guid(key):
        return ParsedKey("to_principal", principal_id=key)
    parts = key.split(".")
    if len(parts) == 2 and is_node_name(parts[0]):
        if parts[1] in ("clientConnect", "workerConnect"):
            return ParsedKey("connect", orch=parts[0])
        if is_guid(parts[1]):
            return ParsedKey("to_orchestrator", orch=parts[0], principal_id=parts[1])
    raise ProtocolError(f"routing key {key!r} matches no grammar production")


# ---------------------------------------------------------------------------
# Checkpoint manifests (wire schema; replicated by the orchestrator).


@dataclass(frozen=True)
class CheckpointManifest:
    """Descriptor of one uploaded checkpoint of a running job."""

    job_id: str
    seq: int
    step_counter: int
    accumulated_exec_s: float
    state_ref: str
    worker_id: str

    def to_json(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "seq": self.seq,
            "step_counter": self.step_counter,
            "accumulated_exec_s": self.accumulated_exec_s,
            "state_ref": self.state_ref,
            "worker_id": self.worker_id,
        }

    @classmethod
    def from_json(cls, payload: dict[str, Any]) -> "CheckpointManifest":
        try:
            manifest = cls(
                job_id=payload["job_id"],
                seq=payload["seq"],
                step_counter=payload["step_counter"],
                accumulated_exec_s=payload["accumulated_exec_s"],
                state_ref=payload["state_ref"],
                worker_id=payload["worker_id"],
            )
        except KeyError as exc:
            raise ProtocolError(f"manifest missing field {exc.args[0]!r}") from exc
        if not isinstance(manifest.seq, int) or manifest.seq < 1:
            raise ProtocolError(f"manifest seq must be an int >= 1, got {manifest.seq!r}")
        if not isinstance(manifest.step_counter, int) or manifest.step_counter < 0:
            raise ProtocolError(
                f"manifest step_counter must be an int >= 0, got {manifest.step_counter!r}"
            )
        return manifest
