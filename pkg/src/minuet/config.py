"""Cluster configuration: a flat key=value file with a fixed schema.

The schema is documented in docs/config.md. Unknown keys are rejected so a
typo cannot silently fall back to a default.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import ConfigError

MODE_LINEAR = "linear"
MODE_BRANCHING = "branching"
VALIDATION_DIRTY = "dirty"
VALIDATION_FULL = "full"


@dataclass
class ClusterConfig:
    memnodes: list = field(default_factory=lambda: ["127.0.0.1:7101"])
    proxies: list = field(default_factory=lambda: ["127.0.0.1:7201"])
    scs: str = "127.0.0.1:7301"
    node_size: int = 4096
    address_space: int = 4 * 1024 * 1024
    mode: str = MODE_LINEAR
    beta: int = 2
    validation: str = VALIDATION_DIRTY
    block_threshold_ms: float = 50.0
    snapshot_interval_k: float = 0.0
    # Client-side policy knobs (defaults per the retry design).
    max_attempts: int = 32
    backoff_initial_ms: float = 1.0
    txn_recovery_ms: float = 5000.0
    request_timeout_ms: float = 5000.0
    # Catalog sizing (branching mode only).
    catalog_leaves: int = 8
    # Test hooks: cap entries per node below the size-derived limit. 0 = off.
    max_leaf_entries: int = 0
    max_internal_entries: int = 0

    @property
    def memnode_count(self) -> int:
        return len(self.memnodes)

    def validate(self) -> "ClusterConfig":
        if not self.memnodes:
            raise ConfigError("at least one memnode required")
        if self.node_size < 256:
            raise ConfigError("node_size must be >= 256 bytes")
        if self.address_space % self.node_size != 0:
            raise ConfigError(
                f"node_size {self.node_size} does not divide "
                f"address_space {self.address_space}")
        if self.mode not in (MODE_LINEAR, MODE_BRANCHING):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.validation not in (VALIDATION_DIRTY, VALIDATION_FULL):
            raise ConfigError(f"unknown validation {self.validation!r}")
        if self.beta < 2:
            raise ConfigError("beta must be >= 2")
        if self.snapshot_interval_k < 0:
            raise ConfigError("snapshot_interval_k must be >= 0")
        if len(set(self.memnodes)) != len(self.memnodes):
            raise ConfigError("duplicate memnode addresses")
        return self

    def with_overrides(self, **kw) -> "ClusterConfig":
        return replace(self, **kw).validate()


_LIST_KEYS = {"memnodes", "proxies"}
_STR_KEYS = {"scs", "mode", "validation"}
_INT_KEYS = {"node_size", "address_space", "beta", "max_attempts",
             "catalog_leaves", "max_leaf_entries", "max_internal_entries"}
_FLOAT_KEYS = {"block_threshold_ms", "snapshot_interval_k",
               "backoff_initial_ms", "txn_recovery_ms", "request_timeout_ms"}


def parse_config(text: str) -> ClusterConfig:
    """Parse the flat key=value format. Lines starting with # are comments."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in _LIST_KEYS:
            values[key] = [p.strip() for p in val.split(",") if p.strip()]
        elif key in _STR_KEYS:
            values[key] = val
        elif key in _INT_KEYS:
            values[key] = int(val)
        elif key in _FLOAT_KEYS:
            values[key] = float(val)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return ClusterConfig(**values).validate()


def load_config(path: str) -> ClusterConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: ClusterConfig) -> str:
    lines = [
        "memnodes=" + ",".join(cfg.memnodes),
        "proxies=" + ",".join(cfg.proxies),
        f"scs={cfg.scs}",
        f"node_size={cfg.node_size}",
        f"address_space={cfg.address_space}",
        f"mode={cfg.mode}",
        f"beta={cfg.beta}",
        f"validation={cfg.validation}",
        f"block_threshold_ms={cfg.block_threshold_ms}",
        f"snapshot_interval_k={cfg.snapshot_interval_k}",
        f"max_attempts={cfg.max_attempts}",
        f"backoff_initial_ms={cfg.backoff_initial_ms}",
        f"txn_recovery_ms={cfg.txn_recovery_ms}",
        f"request_timeout_ms={cfg.request_timeout_ms}",
        f"catalog_leaves={cfg.catalog_leaves}",
    ]
    if cfg.max_leaf_entries:
        lines.append(f"max_leaf_entries={cfg.max_leaf_entries}")
    if cfg.max_internal_entries:
        lines.append(f"max_internal_entries={cfg.max_internal_entries}")
    return "\n".join(lines) + "\n"
