"""Newline-delimited JSON wire protocol: framing and payload codecs.

Binary values travel hex-encoded.  MACs are always computed over canonical
bytes, never over this JSON, so the wire encoding carries no authority.
"""

from __future__ import annotations

import json
from typing import IO, Optional

from .module import Certificate, RequestEnvelope, VerifyResponse

OPS = ("CREATE", "MODIFY", "ACL_SET", "INFO", "FETCH", "BENCH_PREPOPULATE")

STATUS_OK = "ok"
STATUS_DENIED = "denied"
STATUS_REJECTED = "rejected"
STATUS_ERROR = "error"


class WireError(Exception):
    pass


def write_message(fp: IO[bytes], obj: dict) -> None:
    fp.write(json.dumps(obj, separators=(",", ":")).encode("utf-8") + b"\n")
    fp.flush()


def read_message(fp: IO[bytes]) -> Optional[dict]:
    line = fp.readline()
    if not line:
        return None
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise WireError(f"undecodable message: {exc}") from exc
    if not isinstance(obj, dict):
        raise WireError("message must be a JSON object")
    return obj


def envelope_to_json(env: RequestEnvelope) -> dict:
    return {
        "kind": int(env.kind),
        "idx": env.idx,
        "counter": env.counter,
        "value": env.value.hex(),
        "user": env.user_idx,
        "sig": env.sig.hex(),
    }


def envelope_from_json(obj: dict) -> RequestEnvelope:
    try:
        return RequestEnvelope(
            kind=int(obj["kind"]),
            idx=int(obj["idx"]),
            counter=int(obj["counter"]),
            value=bytes.fromhex(obj["value"]),
            user_idx=int(obj["user"]),
            sig=bytes.fromhex(obj["sig"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise WireError(f"bad request envelope: {exc}") from exc


def cert_to_json(cert: Certificate) -> dict:
    return {
        "kind": int(cert.kind),
        "values": [v.hex() if isinstance(v, bytes) else v for v in cert.values],
        "mac": cert.mac.hex(),
    }


def response_to_json(resp: VerifyResponse) -> dict:
    if resp.denied:
        return {
            "kind": "denial",
            "idx": resp.idx,
            "nonce": resp.nonce.hex(),
            "tag": resp.tag.hex(),
        }
    return {
        "kind": "full",
        "idx": resp.idx,
        "nonce": resp.nonce.hex(),
        "tag": resp.tag.hex(),
        "counter": resp.counter,
        "max_version": resp.max_version,
        "requested_version": resp.requested_version,
        "acl_root": resp.acl_root.hex(),
        "content_digest": resp.content_digest.hex(),
    }


def response_from_json(obj: dict) -> VerifyResponse:
    try:
        if obj["kind"] == "denial":
            return VerifyResponse(
                idx=int(obj["idx"]),
                nonce=bytes.fromhex(obj["nonce"]),
                tag=bytes.fromhex(obj["tag"]),
            )
        return VerifyResponse(
            idx=int(obj["idx"]),
            nonce=bytes.fromhex(obj["nonce"]),
            tag=bytes.fromhex(obj["tag"]),
            counter=int(obj["counter"]),
            max_version=int(obj["max_version"]),
            requested_version=int(obj["requested_version"]),
            acl_root=bytes.fromhex(obj["acl_root"]),
            content_digest=bytes.fromhex(obj["content_digest"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise WireError(f"bad verify response: {exc}") from exc
