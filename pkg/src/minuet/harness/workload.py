"""Deterministic workload generation in the style of cloud-serving
benchmarks: a load phase inserting a keyspace, then an operation mix drawn
from configured proportions with uniform or zipfian key popularity. The seed
fully determines the stream.
"""
from __future__ import annotations

import bisect
import random
from dataclasses import dataclass, field, replace

from ..errors import WorkloadError

KINDS = ("read", "update", "insert", "scan", "remove")


@dataclass(frozen=True)
class Op:
    kind: str
    key: bytes = b""
    value: bytes = b""
    count: int = 0

    def line(self) -> str:
        return f"{self.kind} {self.key.hex()} {self.value.hex()} {self.count}"


@dataclass
class WorkloadSpec:
    record_count: int = 1000
    operation_count: int = 5000
    proportions: dict = field(default_factory=lambda: {
        "read": 0.5, "update": 0.35, "insert": 0.05, "scan": 0.05,
        "remove": 0.05})
    scan_length: int = 20
    key_distribution: str = "uniform"   # or "zipfian"
    theta: float = 0.99
    seed: int = 1
    threads_per_proxy: int = 2
    key_len: int = 14
    value_len: int = 8
    snapshot_interval_k: float = 0.0

    def validate(self) -> "WorkloadSpec":
        if self.record_count < 0 or self.operation_count < 0:
            raise WorkloadError("counts must be nonnegative")
        if set(self.proportions) - set(KINDS):
            raise WorkloadError(f"unknown op kinds {set(self.proportions) - set(KINDS)}")
        if any(p < 0 or p > 1 for p in self.proportions.values()):
            raise WorkloadError("proportions must lie in [0, 1]")
        total = sum(self.proportions.values())
        if abs(total - 1.0) > 1e-9:
            raise WorkloadError(f"proportions sum to {total}, expected 1")
        if self.key_distribution not in ("uniform", "zipfian"):
            raise WorkloadError(f"unknown distribution {self.key_distribution!r}")
        if self.scan_length < 0 or self.threads_per_proxy < 1:
            raise WorkloadError("bad scan_length or threads_per_proxy")
        if not 1 <= self.key_len <= 64:
            raise WorkloadError("key_len outside 1..64")
        return self


class ZipfianSampler:
    """Rank popularity proportional to 1/rank^theta over n items."""

    def __init__(self, n: int, theta: float):
        if n < 1:
            raise WorkloadError("zipfian needs at least one key")
        self.n = n
        self.theta = theta
        acc, self._cdf = 0.0, []
        for rank in range(1, n + 1):
            acc += 1.0 / rank ** theta
            self._cdf.append(acc)
        self.total = acc

    def mass(self, rank: int) -> float:
        """Analytic probability of the given 1-based rank."""
        return (1.0 / rank ** self.theta) / self.total

    def sample(self, rng: random.Random) -> int:
        """0-based item index; index 0 is the most popular."""
        x = rng.random() * self.total
        return bisect.bisect_left(self._cdf, x)


def _key(spec: WorkloadSpec, index: int) -> bytes:
    return str(index).rjust(spec.key_len, "0").encode()


def generate(spec: WorkloadSpec):
    """(load_ops, run_ops) lists. Same spec (same seed) gives a byte-identical
    stream; see stream_bytes."""
    spec.validate()
    rng = random.Random(spec.seed)
    load = [Op("insert", _key(spec, i), rng.randbytes(spec.value_len))
            for i in range(spec.record_count)]
    kinds = list(spec.proportions)
    weights = [spec.proportions[k] for k in kinds]
    zipf = None
    run = []
    next_insert = spec.record_count

    def pick_existing() -> int:
        nonlocal zipf
        population = max(next_insert, 1)
        if spec.key_distribution == "uniform":
            return rng.randrange(population)
        if zipf is None or zipf.n != population:
            zipf = ZipfianSampler(population, spec.theta)
        return zipf.sample(rng)

    for _ in range(spec.operation_count):
        kind = rng.choices(kinds, weights)[0]
        if kind == "insert":
            op = Op("insert", _key(spec, next_insert), rng.randbytes(spec.value_len))
            next_insert += 1
        elif kind == "scan":
            op = Op("scan", _key(spec, pick_existing()), count=spec.scan_length)
        elif kind == "update":
            op = Op("update", _key(spec, pick_existing()), rng.randbytes(spec.value_len))
        else:
            op = Op(kind, _key(spec, pick_existing()))
        run.append(op)
    return load, run


def stream_bytes(spec: WorkloadSpec) -> bytes:
    load, run = generate(spec)
    return "\n".join(op.line() for op in load + run).encode()


_SPEC_KEYS = {
    "record_count": int, "operation_count": int, "scan_length": int,
    "seed": int, "threads_per_proxy": int, "key_len": int, "value_len": int,
    "theta": float, "snapshot_interval_k": float,
    "distribution": str,
}


def parse_workload(text: str) -> WorkloadSpec:
    """Flat key=value format; read/update/insert/scan/remove set the mix."""
    spec = WorkloadSpec()
    proportions = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise WorkloadError(f"line {lineno}: expected key=value")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in KINDS:
            proportions[key] = float(val)
        elif key == "distribution":
            spec = replace(spec, key_distribution=val)
        elif key in _SPEC_KEYS:
            spec = replace(spec, **{key: _SPEC_KEYS[key](val)})
        else:
            raise WorkloadError(f"line {lineno}: unknown key {key!r}")
    if proportions:
        missing = {k: 0.0 for k in KINDS if k not in proportions}
        proportions.update(missing)
        spec = replace(spec, proportions=proportions)
    return spec.validate()
