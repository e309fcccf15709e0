"""Service configuration files.

Plain JSON, hand-editable. Relative paths resolve against the config file's
own directory, so a fixtures directory can be moved around as a unit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigInvalid
from .keys import KeyRegistry
from .merchant import MerchantConfig, MerchantCore, load_catalog
from .provider import ProviderConfig, ProviderCore


def _load_json(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigInvalid("cannot read config %s: %s" % (path, exc))
    if not isinstance(data, dict):
        raise ConfigInvalid("config must be a JSON object")
    return data


def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else (base / path)


@dataclass
class TransportConfig:
    mode: str = "secure"  # "secure" | "plaintext"
    allowlist: list[str] = field(default_factory=list)

    @classmethod
    def from_json(cls, data: dict | None) -> "TransportConfig":
        if data is None:
            return cls()
        mode = data.get("mode", "secure")
        if mode not in ("secure", "plaintext"):
            raise ConfigInvalid("transport mode must be 'secure' or 'plaintext'")
        allowlist = [str(a) for a in data.get("allowlist", [])]
        if mode == "plaintext" and not allowlist:
            raise ConfigInvalid("plaintext transport requires an allowlist")
        return cls(mode=mode, allowlist=allowlist)

    @property
    def plaintext(self) -> bool:
        return self.mode == "plaintext"


@dataclass
class ProviderServiceConfig:
    party_id: str
    signing_key_hex: str
    peers: dict[str, str]
    data_dir: Path
    host: str = "127.0.0.1"
    port: int = 7402
    hold_ttl: int = 900
    fee_rate_bp: int = 100
    request_window: int = 300
    snapshot_every: int = 1000
    fsync: bool = True
    transport: TransportConfig = field(default_factory=TransportConfig)

    @classmethod
    def load(cls, path: str | Path) -> "ProviderServiceConfig":
        path = Path(path).resolve()
        data = _load_json(path)
        base = path.parent
        try:
            listen = data.get("listen", {})
            return cls(
                party_id=str(data["party_id"]),
                signing_key_hex=str(data["signing_key_hex"]),
                peers={str(k): str(v) for k, v in data.get("peers", {}).items()},
                data_dir=_resolve(base, data.get("data_dir", "provider-data")),
                host=str(listen.get("host", "127.0.0.1")),
                port=int(listen.get("port", 7402)),
                hold_ttl=int(data.get("hold_ttl", 900)),
                fee_rate_bp=int(data.get("fee_rate_bp", 100)),
                request_window=int(data.get("request_window", 300)),
                snapshot_every=int(data.get("snapshot_every", 1000)),
                fsync=bool(data.get("fsync", True)),
                transport=TransportConfig.from_json(data.get("transport")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid("bad provider config: %s" % exc)

    def build_registry(self) -> KeyRegistry:
        return KeyRegistry(self.party_id, self.signing_key_hex, self.peers)

    def build_core(self) -> ProviderCore:
        return ProviderCore(
            ProviderConfig(
                party_id=self.party_id,
                registry=self.build_registry(),
                data_dir=self.data_dir,
                hold_ttl=self.hold_ttl,
                fee_rate_bp=self.fee_rate_bp,
                request_window=self.request_window,
                fsync=self.fsync,
                snapshot_every=self.snapshot_every,
            )
        )


@dataclass
class MerchantServiceConfig:
    party_id: str
    signing_key_hex: str
    peers: dict[str, str]
    provider_id: str
    data_dir: Path
    catalog_path: Path
    provider_host: str = "127.0.0.1"
    provider_port: int = 7402
    http_host: str = "127.0.0.1"
    http_port: int = 8080
    request_timeout: float = 5.0
    settle_retries: int = 5
    static_dir: Path | None = None
    transport: TransportConfig = field(default_factory=TransportConfig)

    @classmethod
    def load(cls, path: str | Path) -> "MerchantServiceConfig":
        path = Path(path).resolve()
        data = _load_json(path)
        base = path.parent
        try:
            provider = data.get("provider_address", {})
            http = data.get("http", {})
            static_dir = data.get("static_dir")
            return cls(
                party_id=str(data["party_id"]),
                signing_key_hex=str(data["signing_key_hex"]),
                peers={str(k): str(v) for k, v in data.get("peers", {}).items()},
                provider_id=str(data["provider_id"]),
                data_dir=_resolve(base, data.get("data_dir", "merchant-data")),
                catalog_path=_resolve(base, data.get("catalog_path", "catalog.json")),
                provider_host=str(provider.get("host", "127.0.0.1")),
                provider_port=int(provider.get("port", 7402)),
                http_host=str(http.get("host", "127.0.0.1")),
                http_port=int(http.get("port", 8080)),
                request_timeout=float(data.get("request_timeout", 5.0)),
                settle_retries=int(data.get("settle_retries", 5)),
                static_dir=None if static_dir is None else _resolve(base, static_dir),
                transport=TransportConfig.from_json(data.get("transport")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid("bad merchant config: %s" % exc)

    def build_registry(self) -> KeyRegistry:
        return KeyRegistry(self.party_id, self.signing_key_hex, self.peers)

    def build_core(self, client) -> MerchantCore:
        return MerchantCore(
            MerchantConfig(
                party_id=self.party_id,
                registry=self.build_registry(),
                provider_id=self.provider_id,
                data_dir=self.data_dir,
                catalog=load_catalog(self.catalog_path),
                request_timeout=self.request_timeout,
                settle_retries=self.settle_retries,
            ),
            client,
        )

    def build_client(self):
        from .channel import TcpProviderClient

        return TcpProviderClient(
            (self.provider_host, self.provider_port),
            self.build_registry(),
            self.provider_id,
            plaintext=self.transport.plaintext,
            timeout=self.request_timeout,
        )
