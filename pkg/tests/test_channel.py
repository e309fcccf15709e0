"""Transport tests over real loopback sockets."""

import socket
import threading

import pytest

from duopay.channel import (
    ChannelError,
    EncryptedMessenger,
    ProviderTCPServer,
    TcpProviderClient,
    client_handshake,
    server_handshake,
)
from duopay.errors import ProviderUnreachable
from duopay.keys import KeyRegistry, keypair_from_seed
from duopay import wire

from conftest import MERCHANT_ID, PROVIDER_ID, activate_all, load_test_cards, make_provider

PASSWORD = "pw-1234"


def handshake_pair(keyring):
    """Run both handshake halves over a socketpair."""
    left, right = socket.socketpair()
    result = {}

    def server():
        result["server"] = server_handshake(right, keyring["provider"])

    thread = threading.Thread(target=server)
    thread.start()
    client = client_handshake(left, keyring["merchant"], PROVIDER_ID)
    thread.join()
    server_messenger, peer = result["server"]
    return client, server_messenger, peer


def test_handshake_and_round_trip(keyring):
    client, server, peer = handshake_pair(keyring)
    assert peer == MERCHANT_ID
    client.send_message(b"ping")
    assert server.recv_message() == b"ping"
    server.send_message(b"pong")
    assert client.recv_message() == b"pong"
    client.close()
    server.close()


def test_handshake_rejects_unknown_peer(keyring):
    stranger_priv, _ = keypair_from_seed("stranger")
    stranger = KeyRegistry(
        "stranger", stranger_priv, {PROVIDER_ID: keyring["provider"].public_hex()}
    )
    left, right = socket.socketpair()
    errors = {}

    def server():
        try:
            server_handshake(right, keyring["provider"])
        except Exception as exc:
            errors["server"] = exc
            right.close()  # the real handler drops the connection too

    thread = threading.Thread(target=server)
    thread.start()
    with pytest.raises(ChannelError):
        client_handshake(left, stranger, PROVIDER_ID)
    thread.join()
    assert "server" in errors
    left.close()


def test_tampered_frame_rejected(keyring):
    client, server, _ = handshake_pair(keyring)
    try:
        client._send_seq = 5  # desynchronized nonce == tampered stream
        client.send_message(b"hello")
        with pytest.raises(ChannelError):
            server.recv_message()
    finally:
        client.close()
        server.close()


@pytest.fixture
def served_provider(tmp_path, keyring, clock):
    core = make_provider(tmp_path, keyring, clock)
    batch = load_test_cards(core, denomination=900)
    activate_all(core, batch)
    server = ProviderTCPServer(("127.0.0.1", 0), core)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield core, server, batch
    server.shutdown()
    server.server_close()
    core.close()


def balance_envelope(keyring, card, ts):
    return wire.build_envelope(
        wire.BALANCE,
        {"card_number": card.card_number, "secret": card.secret, "password": PASSWORD},
        keyring["merchant"],
        timestamp=ts,
    )


def test_secure_client_server_round_trip(served_provider, keyring, clock):
    core, server, batch = served_provider
    client = TcpProviderClient(
        ("127.0.0.1", server.port), keyring["merchant"], PROVIDER_ID, timeout=5
    )
    reply = client.send(balance_envelope(keyring, batch.cards[0], clock.now))
    decoded = wire.decode_envelope(reply, keyring["merchant"])
    assert decoded.type == wire.BALANCE_RESULT
    assert decoded.body["available"] == 900


def test_unreachable_provider(keyring):
    client = TcpProviderClient(
        ("127.0.0.1", 1), keyring["merchant"], PROVIDER_ID, timeout=0.5
    )
    with pytest.raises(ProviderUnreachable):
        client.send(b"{}")


def test_plaintext_allowlist_accepts_and_refuses(tmp_path, keyring, clock):
    core = make_provider(tmp_path, keyring, clock)
    batch = load_test_cards(core, denomination=700)
    activate_all(core, batch)

    allowed = ProviderTCPServer(
        ("127.0.0.1", 0), core, plaintext=True, allowlist=["127.0.0.1"]
    )
    thread = threading.Thread(target=allowed.serve_forever, daemon=True)
    thread.start()
    client = TcpProviderClient(
        ("127.0.0.1", allowed.port), keyring["merchant"], PROVIDER_ID,
        plaintext=True, timeout=5,
    )
    reply = client.send(balance_envelope(keyring, batch.cards[0], clock.now))
    assert wire.decode_envelope(reply, keyring["merchant"]).body["available"] == 700
    allowed.shutdown()
    allowed.server_close()

    refused = ProviderTCPServer(
        ("127.0.0.1", 0), core, plaintext=True, allowlist=["203.0.113.9"]
    )
    thread = threading.Thread(target=refused.serve_forever, daemon=True)
    thread.start()
    client = TcpProviderClient(
        ("127.0.0.1", refused.port), keyring["merchant"], PROVIDER_ID,
        plaintext=True, timeout=1,
    )
    with pytest.raises(ProviderUnreachable):
        client.send(balance_envelope(keyring, batch.cards[0], clock.now))
    refused.shutdown()
    refused.server_close()
    core.close()
