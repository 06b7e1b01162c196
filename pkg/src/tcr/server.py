"""TCP front end for the service: one JSON message per line, one reply each.

Run with ``tcr-server --listen 127.0.0.1:7700 --db repo.db --module-state
module.bin --height 16 --data-dir blobs``.
"""

from __future__ import annotations

import argparse
import json
import socketserver
import sys
from pathlib import Path
from typing import Optional

from .iomt import IomtError
from .module import ModuleState, TrustedModule, load_state, save_state
from .service import ProtocolError, Service
from .storage import BlobSet, Storage, StorageError
from .wire import (
    STATUS_DENIED,
    STATUS_ERROR,
    STATUS_OK,
    STATUS_REJECTED,
    WireError,
    cert_to_json,
    envelope_from_json,
    read_message,
    response_to_json,
    write_message,
)

_LOOPBACK = ("127.0.0.1", "::1", "::ffff:127.0.0.1")


class RepositoryServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], service: Service,
                 state: Optional[ModuleState] = None,
                 state_path: Optional[Path] = None) -> None:
        super().__init__(address, _ConnectionHandler)
        self.service = service
        self.module_state = state
        self.state_path = state_path

    def dispatch(self, op: str, payload: dict, peer: str) -> tuple[str, dict]:
        try:
            return self._dispatch(op, payload, peer)
        except ProtocolError as exc:
            body: dict = {"message": str(exc)}
            if exc.hints is not None:
                body["hints"] = exc.hints
            return STATUS_ERROR, body
        except (WireError, IomtError, StorageError, KeyError, ValueError) as exc:
            return STATUS_ERROR, {"message": f"malformed request: {exc}"}

    def _dispatch(self, op: str, payload: dict, peer: str) -> tuple[str, dict]:
        service = self.service
        if op == "CREATE":
            result = service.handle_create(envelope_from_json(payload))
            if result is None:
                return STATUS_REJECTED, {}
            return STATUS_OK, {
                "ack": result.ack.hex(),
                "record": cert_to_json(result.record_cert),
            }

        if op == "MODIFY":
            blobs = BlobSet(
                bytes.fromhex(payload["image"]),
                bytes.fromhex(payload["build"]),
                bytes.fromhex(payload["compose"]),
            )
            wrapped = payload.get("wrapped_secret")
            commitment = payload.get("secret_commitment")
            result = service.handle_modify(
                envelope_from_json(payload),
                blobs,
                wrapped_secret=bytes.fromhex(wrapped) if wrapped else None,
                secret_commitment=bytes.fromhex(commitment) if commitment else None,
            )
            if result is None:
                return STATUS_REJECTED, {}
            return STATUS_OK, {
                "ack": result.ack.hex(),
                "version": result.version,
                "record": cert_to_json(result.record_cert),
                "version_record": cert_to_json(result.version_cert),
            }

        if op == "ACL_SET":
            result = service.handle_acl_set(
                envelope_from_json(payload),
                int(payload["target_user"]),
                int(payload["level"]),
            )
            if result is None:
                return STATUS_REJECTED, {}
            return STATUS_OK, {"ack": result.ack.hex(), "record": cert_to_json(result.record_cert)}

        if op == "INFO":
            info = service.handle_info(
                int(payload["idx"]),
                int(payload["requested_version"]),
                bytes.fromhex(payload["nonce"]),
                int(payload["user"]),
            )
            body = {"response": response_to_json(info.response)}
            if info.hints is not None:
                body["hints"] = info.hints
            status = STATUS_DENIED if info.response.denied else STATUS_OK
            return status, body

        if op == "FETCH":
            nonce = payload.get("nonce")
            result = service.handle_fetch(
                int(payload["idx"]),
                int(payload["version"]),
                int(payload["user"]),
                nonce=bytes.fromhex(nonce) if nonce else None,
            )
            body = {
                "version": result.version,
                "image": result.blobs.image.hex(),
                "build": result.blobs.build.hex(),
                "compose": result.blobs.compose.hex(),
                "secret_commitment": result.secret_commitment.hex(),
            }
            if result.sealed_for_user is not None:
                body["sealed_for_user"] = result.sealed_for_user.hex()
            if result.verify is not None:
                body["verify"] = response_to_json(result.verify.response)
                if result.verify.hints is not None:
                    body["hints"] = result.verify.hints
            return STATUS_OK, body

        if op == "BENCH_PREPOPULATE":
            if peer not in _LOOPBACK:
                return STATUS_ERROR, {"message": "administrative operation: loopback only"}
            if self.module_state is None:
                return STATUS_ERROR, {"message": "server holds no provisionable module state"}
            root = service.prepopulate(
                int(payload["count"]), int(payload["owner"]), self.module_state
            )
            if self.state_path is not None:
                save_state(self.module_state, self.state_path)
            return STATUS_OK, {"root": root.hex()}

        return STATUS_ERROR, {"message": f"unknown operation {op!r}"}


class _ConnectionHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        while True:
            try:
                message = read_message(self.rfile)
            except WireError as exc:
                write_message(self.wfile, {"status": STATUS_ERROR, "payload": {"message": str(exc)}})
                return
            if message is None:
                return
            op = message.get("op", "")
            payload = message.get("payload") or {}
            status, body = self.server.dispatch(op, payload, self.client_address[0])
            write_message(
                self.wfile,
                {"request_id": message.get("request_id"), "status": status, "payload": body},
            )


def _parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"bad address {text!r}; expected host:port")
    return host, int(port)


def _load_or_init_state(state_path: Path, users_path: Optional[Path]) -> ModuleState:
    if state_path.exists():
        return load_state(state_path)
    if users_path is None:
        raise SystemExit(
            "no module state found; pass --users <json file of {index: hex key}> to provision one"
        )
    raw = json.loads(users_path.read_text())
    keys = {int(idx): bytes.fromhex(key) for idx, key in raw.items()}
    state = ModuleState.fresh(keys)
    save_state(state, state_path)
    return state


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="tcr-server", description=__doc__)
    parser.add_argument("--listen", type=_parse_address, default=("127.0.0.1", 7700))
    parser.add_argument("--db", required=True, help="sqlite database path")
    parser.add_argument("--module-state", required=True, help="sealed module state file")
    parser.add_argument("--height", type=int, required=True, help="container tree height")
    parser.add_argument("--data-dir", required=True, help="content-addressed blob directory")
    parser.add_argument("--acl-height", type=int, default=8)
    parser.add_argument("--users", type=Path, default=None,
                        help="JSON user-key map for first-run provisioning")
    parser.add_argument("--no-cert-cache", action="store_true")
    args = parser.parse_args(argv)

    state = _load_or_init_state(Path(args.module_state), args.users)
    storage = Storage(args.db, args.data_dir)
    service = Service(
        storage,
        TrustedModule(state),
        args.height,
        acl_height=args.acl_height,
        use_cert_cache=not args.no_cert_cache,
    )
    server = RepositoryServer(args.listen, service, state=state, state_path=Path(args.module_state))
    host, port = server.server_address[:2]
    print(f"listening on {host}:{port}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        storage.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
