"""Per-set pipeline configuration.

One JSON file describes one expert set: the classifier endpoint, the expert
endpoints, the embedding provider and where the map, knowledge base and
checkpoint live. Switching sets means switching files, never code.
Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .dataset import Dataset
from .errors import ConfigurationError
from .leaderboard import ExpertRef
from .llm_client import ChatProvider, EndpointConfig, HttpChatProvider, make_mock_provider
from .retrieval import DEFAULT_K

_PATH_KEYS = ("map", "kb", "checkpoint", "matrix")


@dataclass
class SetConfig:
    name: str
    classifier: EndpointConfig | None
    experts: list[EndpointConfig]
    embedding: dict | None = None
    map: Path | None = None
    kb: Path | None = None
    matrix: Path | None = None
    checkpoint: Path | None = None
    run_id: str | None = None
    k: int = DEFAULT_K
    normalize: bool = False
    exclude_self: bool = False
    parallelism: int = 4
    tasks: list[str] | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def expert_refs(self) -> list[ExpertRef]:
        return [ExpertRef(e.name, e.base_url or None) for e in self.experts]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Path) -> "SetConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        for key in _PATH_KEYS:
            if data.get(key):
                p = Path(data[key])
                data[key] = p if p.is_absolute() else base_dir / p
        clf = data.get("classifier")
        data["classifier"] = EndpointConfig.from_dict(_resolve_mock(clf, base_dir)) if clf else None
        data["experts"] = [EndpointConfig.from_dict(_resolve_mock(e, base_dir)) for e in data.get("experts", [])]
        names = [e.name for e in data["experts"]]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate expert names in config: {names}")
        data.setdefault("name", base_dir.name)
        k = int(data.get("k", DEFAULT_K))
        if k < 1:
            raise ConfigurationError("k must be >= 1")
        par = int(data.get("parallelism", 4))
        if par < 1:
            raise ConfigurationError("parallelism must be >= 1")
        return cls(base_dir=base_dir, **data)

    @classmethod
    def load(cls, path: str | Path) -> "SetConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(data, path.parent.resolve())

    def expert(self, name: str) -> EndpointConfig:
        for e in self.experts:
            if e.name == name:
                return e
        raise ConfigurationError(f"expert {name!r} is not configured in set {self.name}")


def _resolve_mock(endpoint: Mapping[str, Any], base_dir: Path) -> dict:
    endpoint = dict(endpoint)
    mock = endpoint.get("mock")
    if mock:
        mock = dict(mock)
        if "path" in mock and not Path(mock["path"]).is_absolute():
            mock["path"] = str(base_dir / mock["path"])
        if "fallback" in mock and mock["fallback"]:
            mock["fallback"] = _resolve_mock({"name": "", "mock": mock["fallback"]}, base_dir)["mock"]
        endpoint["mock"] = mock
    return endpoint


def provider_for(cfg: EndpointConfig, mode: str = "auto", dataset: Dataset | None = None) -> ChatProvider:
    """Pick a provider for ``cfg``.

    ``mode`` is ``auto`` (mock when configured, else live), ``mock`` (the
    endpoint must define one) or ``live`` (ignore mock definitions).
    """
    if mode not in ("auto", "mock", "live"):
        raise ConfigurationError(f"unknown provider mode {mode!r}")
    if mode == "live" or (mode == "auto" and not cfg.mock):
        return HttpChatProvider()
    if not cfg.mock:
        raise ConfigurationError(f"endpoint {cfg.name} has no mock definition")
    return make_mock_provider(cfg.mock, dataset, name=cfg.name)
