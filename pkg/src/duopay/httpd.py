"""Customer-facing HTTP front end for the merchant.

GET /catalog, POST /checkout, GET /receipt/{txn_id}, plus optional static
file serving for the storefront build. Decline responses are deliberately
generic; the verdict detail stays in the server log.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .errors import (
    BadProviderSignature,
    DuopayError,
    PaymentDeclined,
    ProviderUnreachable,
    UnknownItem,
)
from .merchant import MerchantCore

log = logging.getLogger("duopay.httpd")

MAX_BODY = 64 * 1024


class MerchantHTTPServer(ThreadingHTTPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], core: MerchantCore, static_dir: Path | None = None):
        self.core = core
        self.static_dir = Path(static_dir).resolve() if static_dir else None
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def serve_in_thread(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


class _Handler(BaseHTTPRequestHandler):
    server: MerchantHTTPServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route through logging, not stderr
        log.info("%s " + fmt, self.client_address[0], *args)

    def _send_json(self, status: int, payload: dict | list) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self._cors()
        self.end_headers()
        self.wfile.write(body)

    def _cors(self) -> None:
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")

    def do_OPTIONS(self) -> None:  # CORS preflight
        self.send_response(204)
        self._cors()
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self) -> None:
        path = self.path.split("?", 1)[0]
        if path == "/catalog":
            items = [item.to_wire() for item in self.server.core.list_catalog()]
            self._send_json(200, items)
            return
        if path.startswith("/receipt/"):
            txn_id = path[len("/receipt/"):]
            receipt = self.server.core.receipt(txn_id)
            if receipt is None:
                self._send_json(404, {"error": "no such receipt"})
            else:
                self._send_json(200, receipt.to_wire())
            return
        if self.server.static_dir is not None:
            self._serve_static(path)
            return
        self._send_json(404, {"error": "not found"})

    def _serve_static(self, path: str) -> None:
        name = path.lstrip("/") or "index.html"
        target = (self.server.static_dir / name).resolve()
        if not str(target).startswith(str(self.server.static_dir)) or not target.is_file():
            self._send_json(404, {"error": "not found"})
            return
        body = target.read_bytes()
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self._cors()
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self) -> None:
        if self.path.split("?", 1)[0] != "/checkout":
            self._send_json(404, {"error": "not found"})
            return
        length = int(self.headers.get("Content-Length", "0"))
        if length > MAX_BODY:
            self._send_json(413, {"error": "request too large"})
            return
        try:
            payload = json.loads(self.rfile.read(length).decode("utf-8"))
        except ValueError:
            self._send_json(400, {"error": "invalid JSON body"})
            return
        required = ("item_id", "card_number", "secret", "password", "provider_id")
        if not isinstance(payload, dict) or not all(
            isinstance(payload.get(k), str) and payload.get(k) for k in required
        ):
            self._send_json(400, {"error": "missing checkout fields"})
            return
        try:
            receipt = self.server.core.checkout(
                payload["item_id"],
                payload["card_number"],
                payload["secret"],
                payload["password"],
                payload["provider_id"],
            )
        except UnknownItem:
            self._send_json(404, {"error": "unknown item"})
        except PaymentDeclined as exc:
            log.info("checkout declined: %s", exc.reason)
            self._send_json(402, {"error": "payment declined"})
        except ProviderUnreachable:
            self._send_json(503, {"error": "card provider unreachable, please retry"})
        except BadProviderSignature:
            self._send_json(502, {"error": "payment failed"})
        except DuopayError as exc:
            log.error("checkout failed unexpectedly: %s", exc)
            self._send_json(500, {"error": "internal error"})
        else:
            self._send_json(200, receipt.to_wire())
