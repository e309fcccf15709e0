"""Service-to-service transport.

Two modes, selected by configuration:

* secure (default): a mutually authenticated encrypted channel. Each side
  holds an X25519 ephemeral key; both hellos are signed with the parties'
  Ed25519 identity keys over the handshake transcript, the shared secret is
  HKDF-expanded into one ChaCha20-Poly1305 key per direction, and every
  message rides in one authenticated frame. An unknown or forged peer never
  gets past the handshake.

* plaintext allowlist: newline-delimited envelopes in the clear, with peers
  restricted by source address. This is the modeled firewall, meant for
  tests and closed lab networks only; envelope signatures still apply.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import x25519
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .canon import canonical_decode, canonical_encode
from .errors import BadEnvelope, DuopayError, ProviderUnreachable, UnknownParty
from .keys import KeyRegistry
from . import wire

log = logging.getLogger("duopay.channel")

CHANNEL_VERSION = 1
MAX_FRAME = 8 * 1024 * 1024
_HKDF_INFO = b"duopay-channel-v1"
_FRAME_AAD = b"duopay-frame"


class ChannelError(DuopayError):
    code = "channel_error"


# ---------------------------------------------------------------------------
# framing
# ---------------------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ChannelError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def _send_frame(sock: socket.socket, data: bytes) -> None:
    if len(data) > MAX_FRAME:
        raise ChannelError("frame too large")
    sock.sendall(struct.pack(">I", len(data)) + data)


def _recv_frame(sock: socket.socket) -> bytes:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length > MAX_FRAME:
        raise ChannelError("oversized frame announced")
    return _recv_exact(sock, length)


# ---------------------------------------------------------------------------
# messengers
# ---------------------------------------------------------------------------

class PlainMessenger:
    """Newline-delimited messages straight over the socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._rfile = sock.makefile("rb")

    def send_message(self, data: bytes) -> None:
        self.sock.sendall(data + b"\n")

    def recv_message(self) -> bytes:
        line = self._rfile.readline(MAX_FRAME)
        if not line:
            raise ChannelError("peer closed the connection")
        if not line.endswith(b"\n"):
            raise ChannelError("unterminated line")
        return line.rstrip(b"\n")

    def close(self) -> None:
        try:
            self._rfile.close()
        finally:
            self.sock.close()


class EncryptedMessenger:
    """One ChaCha20-Poly1305 key per direction, counter nonces, framed."""

    def __init__(self, sock: socket.socket, send_key: bytes, recv_key: bytes):
        self.sock = sock
        self._sender = ChaCha20Poly1305(send_key)
        self._receiver = ChaCha20Poly1305(recv_key)
        self._send_seq = 0
        self._recv_seq = 0
        self._send_lock = threading.Lock()

    @staticmethod
    def _nonce(seq: int) -> bytes:
        return seq.to_bytes(12, "big")

    def send_message(self, data: bytes) -> None:
        with self._send_lock:
            nonce = self._nonce(self._send_seq)
            self._send_seq += 1
            _send_frame(self.sock, self._sender.encrypt(nonce, data, _FRAME_AAD))

    def recv_message(self) -> bytes:
        frame = _recv_frame(self.sock)
        nonce = self._nonce(self._recv_seq)
        self._recv_seq += 1
        try:
            return self._receiver.decrypt(nonce, frame, _FRAME_AAD)
        except InvalidTag:
            raise ChannelError("frame failed authentication")

    def close(self) -> None:
        self.sock.close()


# ---------------------------------------------------------------------------
# handshake
# ---------------------------------------------------------------------------

def _hello(party_id: str, eph_public: bytes) -> dict:
    return {
        "v": CHANNEL_VERSION,
        "kx": "hello",
        "party": party_id,
        "eph": eph_public.hex(),
    }


def _transcript(role: str, client_hello: dict, server_hello: dict) -> bytes:
    return canonical_encode(
        {"kx": "transcript", "role": role, "client": client_hello, "server": server_hello}
    )


def _derive_keys(shared: bytes, transcript: bytes) -> tuple[bytes, bytes]:
    material = HKDF(
        algorithm=hashes.SHA256(), length=64, salt=transcript, info=_HKDF_INFO
    ).derive(shared)
    return material[:32], material[32:]  # client->server, server->client


def _eph_keypair() -> tuple[x25519.X25519PrivateKey, bytes]:
    private = x25519.X25519PrivateKey.generate()
    public = private.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return private, public


def client_handshake(
    sock: socket.socket, registry: KeyRegistry, expect_peer: str
) -> EncryptedMessenger:
    private, public = _eph_keypair()
    client_hello = _hello(registry.own_id, public)
    _send_frame(sock, canonical_encode(client_hello))

    server_msg = canonical_decode(_recv_frame(sock))
    if not isinstance(server_msg, dict) or server_msg.get("kx") != "hello-reply":
        raise ChannelError("bad server hello")
    server_hello = {k: v for k, v in server_msg.items() if k != "sig"}
    party = server_hello.get("party")
    if party != expect_peer:
        raise ChannelError("expected peer %r, got %r" % (expect_peer, party))
    try:
        sig = bytes.fromhex(server_msg["sig"])
        peer_eph = bytes.fromhex(server_hello["eph"])
    except (KeyError, ValueError, TypeError):
        raise ChannelError("malformed server hello")
    if not registry.verify(party, _transcript("server", client_hello, server_hello), sig):
        raise ChannelError("server handshake signature invalid")

    confirm_sig = registry.sign(_transcript("client", client_hello, server_hello))
    _send_frame(
        sock,
        canonical_encode({"v": CHANNEL_VERSION, "kx": "confirm", "sig": confirm_sig.hex()}),
    )

    shared = private.exchange(x25519.X25519PublicKey.from_public_bytes(peer_eph))
    c2s, s2c = _derive_keys(shared, _transcript("keys", client_hello, server_hello))
    return EncryptedMessenger(sock, send_key=c2s, recv_key=s2c)


def server_handshake(
    sock: socket.socket, registry: KeyRegistry
) -> tuple[EncryptedMessenger, str]:
    client_hello = canonical_decode(_recv_frame(sock))
    if not isinstance(client_hello, dict) or client_hello.get("kx") != "hello":
        raise ChannelError("bad client hello")
    peer = client_hello.get("party")
    if not isinstance(peer, str) or not registry.knows(peer):
        raise UnknownParty("unregistered channel peer %r" % peer)
    try:
        peer_eph = bytes.fromhex(client_hello["eph"])
    except (KeyError, ValueError, TypeError):
        raise ChannelError("malformed client hello")

    private, public = _eph_keypair()
    server_hello = {
        "v": CHANNEL_VERSION,
        "kx": "hello-reply",
        "party": registry.own_id,
        "eph": public.hex(),
    }
    sig = registry.sign(_transcript("server", client_hello, server_hello))
    _send_frame(sock, canonical_encode({**server_hello, "sig": sig.hex()}))

    confirm = canonical_decode(_recv_frame(sock))
    if not isinstance(confirm, dict) or confirm.get("kx") != "confirm":
        raise ChannelError("bad confirm")
    try:
        confirm_sig = bytes.fromhex(confirm["sig"])
    except (KeyError, ValueError, TypeError):
        raise ChannelError("malformed confirm")
    if not registry.verify(peer, _transcript("client", client_hello, server_hello), confirm_sig):
        raise ChannelError("client handshake signature invalid")

    shared = private.exchange(x25519.X25519PublicKey.from_public_bytes(peer_eph))
    c2s, s2c = _derive_keys(shared, _transcript("keys", client_hello, server_hello))
    return EncryptedMessenger(sock, send_key=s2c, recv_key=c2s), peer


# ---------------------------------------------------------------------------
# provider-side TCP server
# ---------------------------------------------------------------------------

class ProviderTCPServer(socketserver.ThreadingTCPServer):
    """Listens on the provider's defined port and feeds envelopes to the core."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(
        self,
        address: tuple[str, int],
        core,
        *,
        plaintext: bool = False,
        allowlist: list[str] | None = None,
        max_workers: int = 0,
    ):
        self.core = core
        self.plaintext = plaintext
        self.allowlist = set(allowlist or [])
        self.worker_gate = threading.Semaphore(max_workers) if max_workers > 0 else None
        super().__init__(address, _ProviderHandler)

    @property
    def port(self) -> int:
        return self.server_address[1]


class _ProviderHandler(socketserver.BaseRequestHandler):
    server: ProviderTCPServer

    def handle(self) -> None:
        gate = self.server.worker_gate
        if gate is not None:
            gate.acquire()
        try:
            self._serve()
        except (ChannelError, UnknownParty, ConnectionError, OSError) as exc:
            log.info("connection from %s dropped: %s", self.client_address, exc)
        finally:
            if gate is not None:
                gate.release()

    def _serve(self) -> None:
        peer_id: str | None = None
        if self.server.plaintext:
            host = self.client_address[0]
            if host not in self.server.allowlist:
                log.warning("refused plaintext peer %s (not allowlisted)", host)
                self.request.close()
                return
            messenger = PlainMessenger(self.request)
        else:
            messenger, peer_id = server_handshake(self.request, self.server.core.registry)
        try:
            while True:
                data = messenger.recv_message()
                reply = self.server.core.handle_envelope(data, peer_id=peer_id)
                messenger.send_message(reply)
        except ChannelError:
            pass  # normal disconnect
        finally:
            messenger.close()


def serve_provider_forever(server: ProviderTCPServer) -> None:  # pragma: no cover
    log.info(
        "provider %s listening on %s:%d (%s)",
        server.core.party_id,
        server.server_address[0],
        server.port,
        "plaintext" if server.plaintext else "secure",
    )
    server.serve_forever()


# ---------------------------------------------------------------------------
# merchant-side TCP client
# ---------------------------------------------------------------------------

class TcpProviderClient:
    """Connect-per-call client; satisfies merchant.ProviderClient."""

    def __init__(
        self,
        address: tuple[str, int],
        registry: KeyRegistry,
        provider_id: str,
        *,
        plaintext: bool = False,
        timeout: float = 5.0,
    ):
        self.address = address
        self.registry = registry
        self.provider_id = provider_id
        self.plaintext = plaintext
        self.timeout = timeout

    def send(self, data: bytes, timeout: float | None = None) -> bytes:
        timeout = self.timeout if timeout is None else timeout
        try:
            sock = socket.create_connection(self.address, timeout=timeout)
        except OSError as exc:
            raise ProviderUnreachable("cannot connect to provider: %s" % exc)
        try:
            sock.settimeout(timeout)
            if self.plaintext:
                messenger = PlainMessenger(sock)
            else:
                messenger = client_handshake(sock, self.registry, self.provider_id)
            messenger.send_message(data)
            return messenger.recv_message()
        except (ChannelError, OSError) as exc:
            raise ProviderUnreachable("provider connection failed: %s" % exc)
        finally:
            sock.close()
