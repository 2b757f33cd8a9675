"""Flat ``key = value`` run configuration covering network, training and data settings.

One setting per line, ``#`` starts a comment, lists are comma-separated.
Unknown keys are errors. Every key can also be overridden from the command
line as ``--key value``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .network import NetworkConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    init_seed: int = 0       # parameter initialization
    val_count: int = 20      # pairs held out from the end of --data when val_data is empty
    val_data: str = ""


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    SECTIONS = ("network", "train", "data")

    @classmethod
    def keys(cls) -> dict:
        """Map every key to (section, example default) in file order."""
        out = {}
        base = cls()
        for sec in cls.SECTIONS:
            for f in dataclasses.fields(getattr(base, sec)):
                if f.name in out:
                    raise AssertionError(f"duplicate config key {f.name}")
                out[f.name] = (sec, getattr(getattr(base, sec), f.name))
        return out

    def set(self, key: str, raw: str) -> None:
        table = self.keys()
        if key not in table:
            raise ConfigError(f"unknown config key {key!r}")
        sec, default = table[key]
        setattr(getattr(self, sec), key, _coerce(key, raw, default))

    def get(self, key: str):
        sec, _ = self.keys()[key]
        return getattr(getattr(self, sec), key)

    def validate(self) -> None:
        self.network.validate()
        self.train.validate()
        if self.data.val_count < 0:
            raise ConfigError("val_count must be >= 0")

    def to_text(self) -> str:
        lines = []
        for sec in self.SECTIONS:
            lines.append(f"# {sec}")
            for f in dataclasses.fields(getattr(self, sec)):
                lines.append(f"{f.name} = {_render(getattr(getattr(self, sec), f.name))}")
        return "\n".join(lines) + "\n"


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str, default):
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            return [int(v) for v in text.replace(" ", "").split(",") if v]
        return text
    except ValueError as exc:
        kind = type(default).__name__
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from exc


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{n}: key {key!r} given twice")
        out[key] = value
    return out


def load(path=None, overrides: dict = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (values as strings)."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        for key, value in parse_text(text, str(p)).items():
            cfg.set(key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg.set(key, value)
    cfg.validate()
    return cfg
