"""Built-in adversarial scenarios over the deterministic scheduler.

Each scenario builds a fresh in-process cluster with gated transports, runs a
scripted set of workers, and returns a ScenarioRun: the step trace (identical
bytes for identical scenario and seed), a pass/fail verdict, and details.

    fig2_sibling_split       a reader traverses while a sibling leaf splits;
                             with dirty traversals the reader commits, with
                             full path validation it must abort
    fig3_internal_split_race a lookup races an internal-node split across
                             every interleaving; no schedule may return a
                             wrong "absent"
    fig4_cow_path            updating a stale leaf under a fresh root copies
                             exactly leaf and parent, never the root
    borrow_race              concurrent snapshot requests share creations;
                             every borrowed snapshot's creation lies inside
                             the borrower's request interval
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..cluster import LocalCluster
from ..config import ClusterConfig
from ..errors import RetriesExhausted, UnknownScenario
from ..nodestore import TIP_ROOT_LOC
from .fixtures import NodeSpec, install_tree
from .sim import SchedLock, Scheduler, explore_interleavings, run_random, run_schedule


@dataclass
class ScenarioRun:
    name: str
    ok: bool
    outcome: dict
    steps: list = field(default_factory=list)

    def trace_bytes(self) -> bytes:
        payload = {
            "name": self.name,
            "ok": self.ok,
            "outcome": self.outcome,
            "steps": [{"i": s.index, "worker": s.worker, "info": s.info}
                      for s in self.steps],
        }
        return json.dumps(payload, sort_keys=True).encode()


def scenario_names():
    return sorted(_SCENARIOS)


def simulate(name: str, seed: int = 0) -> ScenarioRun:
    try:
        fn = _SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(f"no scenario named {name!r}; "
                              f"have {scenario_names()}") from None
    return fn(seed)


# ------------------------------------------------------------------- fig 2

def _fig2_cluster(validation: str, gate):
    cfg = ClusterConfig(memnodes=["m0", "m1"], node_size=1024,
                        address_space=128 * 1024, validation=validation,
                        max_leaf_entries=4, max_internal_entries=8,
                        backoff_initial_ms=0.1)
    cluster = LocalCluster(cfg, proxy_count=2, gate=gate)
    install_tree(cluster, {
        "root": NodeSpec(1, 0, entries=[(b"", "left"), (b"m", "right")],
                         memnode=0),
        "left": NodeSpec(0, 0, high=b"m", entries=[(b"apple", b"red")],
                         memnode=1),
        "right": NodeSpec(0, 0, low=b"m",
                          entries=[(b"m1", b"x"), (b"m2", b"x"),
                                   (b"m3", b"x"), (b"m4", b"x")],
                          memnode=0),
    }, "root", tip_sid=0)
    return cluster


def _fig2_run(validation: str, seed: int):
    outcome = {}

    def factory(scheduler: Scheduler):
        cluster = _fig2_cluster(validation, scheduler.gate)
        reader_tree = cluster.tree(0)
        if validation == "dirty":
            # warm the reader's internal-node cache so its traversal happens
            # entirely before its single leaf exchange
            reader_tree.get(b"apple")
        reader_cfg = cluster.config.with_overrides(max_attempts=1)
        from ..btree import BTree
        reader = BTree(cluster.proxy(0), reader_cfg)
        writer = cluster.tree(1)

        def read_op():
            try:
                return ("committed", reader.get(b"apple"))
            except RetriesExhausted:
                return ("aborted", None)

        def write_op():
            writer.put(b"m5", b"x")  # fills the sibling past capacity
            return ("committed", None)

        scheduler.spawn("reader", read_op)
        scheduler.spawn("writer", write_op)
        return lambda: (reader, writer)

    # reader performs its traversal, the writer splits the sibling leaf
    # (updating the shared parent), then the reader finishes; in full mode
    # the traversal costs gates of its own (tip refresh, then root fetch)
    warmup_steps = 1 if validation == "dirty" else 3
    steps, results, _ = run_schedule(
        factory, [("reader", warmup_steps), ("writer", "drain"),
                  ("reader", "drain")], seed=seed)
    state, value = results["reader"]
    outcome["reader"] = state
    outcome["reader_value"] = value.decode() if value else None
    outcome["writer"] = results["writer"][0]
    return steps, outcome


def fig2_sibling_split(seed: int = 0) -> ScenarioRun:
    steps_dirty, dirty = _fig2_run("dirty", seed)
    _, full = _fig2_run("full", seed)
    ok = (dirty["reader"] == "committed"
          and dirty["reader_value"] == "red"
          and full["reader"] == "aborted"
          and dirty["writer"] == full["writer"] == "committed")
    return ScenarioRun("fig2_sibling_split", ok,
                       {"dirty": dirty, "full": full}, steps_dirty)


# ------------------------------------------------------------------- fig 3

def _fig3_cluster(gate):
    # One memnode keeps every commit one-phase: the lookup can never hit a
    # prepared lock, so each worker has a fixed, small gate count and the
    # interleaving space stays exhaustively checkable. The race under test
    # (dirty reads against a committed internal split) does not involve the
    # memnode count.
    cfg = ClusterConfig(memnodes=["m0"], node_size=1024,
                        address_space=128 * 1024,
                        max_leaf_entries=4, max_internal_entries=4,
                        backoff_initial_ms=0.05)
    cluster = LocalCluster(cfg, proxy_count=2, gate=gate)
    install_tree(cluster, {
        "root": NodeSpec(2, 0, entries=[(b"", "A"), (b"20", "B")]),
        "A": NodeSpec(1, 0, high=b"20",
                      entries=[(b"", "L1"), (b"08", "L2"),
                               (b"10", "L3"), (b"15", "L4")]),
        "B": NodeSpec(1, 0, low=b"20", entries=[(b"20", "L5")]),
        "L1": NodeSpec(0, 0, high=b"08", entries=[(b"05", b"v05")]),
        "L2": NodeSpec(0, 0, low=b"08", high=b"10",
                       entries=[(b"08", b"v08")]),
        "L3": NodeSpec(0, 0, low=b"10", high=b"15",
                       entries=[(b"11", b"v11"), (b"12", b"v12"),
                                (b"13", b"v13"), (b"14", b"v14")]),
        "L4": NodeSpec(0, 0, low=b"15", high=b"20",
                       entries=[(b"15", b"v15")]),
        "L5": NodeSpec(0, 0, low=b"20", entries=[(b"25", b"v25")]),
    }, "root", tip_sid=0)
    return cluster


def fig3_factory(warm_cache: bool):
    def factory(scheduler: Scheduler):
        cluster = _fig3_cluster(scheduler.gate)
        from ..btree import BTree
        searcher = BTree(cluster.proxy(0),
                         cluster.config.with_overrides(max_attempts=1))
        if warm_cache:
            cluster.tree(0).get(b"05")  # caches root and A at proxy 0
        splitter = cluster.tree(1)

        def search_op():
            try:
                return ("committed", searcher.get(b"11"))
            except RetriesExhausted:
                return ("aborted", None)

        def split_op():
            # a fifth key in L3's range splits the leaf and then A itself
            splitter.put(b"12x", b"split")
            return ("committed", None)

        scheduler.spawn("searcher", search_op)
        scheduler.spawn("splitter", split_op)
        return lambda: None

    return factory


def fig3_internal_split_race(seed: int = 0) -> ScenarioRun:
    total = 0
    wrong = []
    aborted = 0
    committed = 0
    for warm in (True, False):
        for choices, steps, results, _outcome in explore_interleavings(
                fig3_factory(warm)):
            total += 1
            searcher = results["searcher"]
            if isinstance(searcher, BaseException):
                raise searcher
            state, value = searcher
            splitter = results["splitter"]
            if isinstance(splitter, BaseException):
                raise splitter
            if state == "aborted":
                aborted += 1
            elif value == b"v11":
                committed += 1
            else:
                wrong.append({"warm": warm, "choices": list(choices),
                              "value": None if value is None else value.decode()})
    ok = not wrong and committed > 0 and aborted > 0
    return ScenarioRun("fig3_internal_split_race", ok,
                       {"interleavings": total, "committed_correct": committed,
                        "aborted": aborted, "wrong": wrong})


# ------------------------------------------------------------------- fig 4

def fig4_cow_path(seed: int = 0) -> ScenarioRun:
    cfg = ClusterConfig(memnodes=["m0", "m1", "m2"], node_size=1024,
                        address_space=128 * 1024)
    cluster = LocalCluster(cfg, proxy_count=1)
    install_tree(cluster, {
        "root": NodeSpec(2, 5, entries=[(b"", "parent")]),
        "parent": NodeSpec(1, 3, entries=[(b"", "leaf")]),
        "leaf": NodeSpec(0, 3, entries=[(b"k", b"old")]),
    }, "root", tip_sid=5)
    tree = cluster.tree(0)
    root_off = cluster.layout.replicated_ref(TIP_ROOT_LOC).offset
    root_before = cluster.memnodes[0].peek(root_off + 8, 16)
    tree.put(b"k", b"new")
    root_after = cluster.memnodes[0].peek(root_off + 8, 16)
    copies = tree.proxy.counters.copies
    ok = (copies == 2 and root_after == root_before
          and tree.get(b"k") == b"new")
    return ScenarioRun("fig4_cow_path", ok,
                       {"copies": copies, "root_moved": root_after != root_before})


# --------------------------------------------------------------- borrow race

def borrow_race(seed: int = 0) -> ScenarioRun:
    audit = {}

    def factory(scheduler: Scheduler):
        cfg = ClusterConfig(memnodes=["m0", "m1"], node_size=1024,
                            address_space=128 * 1024,
                            backoff_initial_ms=0.05)
        cluster = LocalCluster(cfg, proxy_count=2, gate=scheduler.gate,
                               scs_lock_factory=lambda: SchedLock(scheduler))
        writer = cluster.tree(0)
        writer.put(b"seed-key", b"0")

        def snap_worker():
            return [cluster.scs.create_snapshot()[0] for _ in range(2)]

        def write_worker():
            for i in range(3):
                writer.put(b"seed-key", str(i).encode())
            return "done"

        for w in range(3):
            scheduler.spawn(f"snap{w}", snap_worker)
        scheduler.spawn("writer", write_worker)

        def finish():
            return cluster.scs

        return finish

    steps, results, scs = run_random(factory, seed=seed)
    for name, res in results.items():
        if isinstance(res, BaseException):
            raise res
    violations = []
    for rec in scs.request_log:
        if not rec.borrowed:
            continue
        start, end = scs.creation_log[rec.sid]
        if not (rec.invoke < start and end < rec.response):
            violations.append(rec.sid)
    audit = {"requests": len(scs.request_log), "created": scs.created_count,
             "borrowed": scs.borrowed_count, "violations": violations}
    ok = (not violations
          and scs.created_count + scs.borrowed_count == len(scs.request_log))
    return ScenarioRun("borrow_race", ok, audit, steps)


_SCENARIOS = {
    "fig2_sibling_split": fig2_sibling_split,
    "fig3_internal_split_race": fig3_internal_split_race,
    "fig4_cow_path": fig4_cow_path,
    "borrow_race": borrow_race,
}


# ----------------------------------------------------- abort-rate comparison

def contended_abort_counts(seed: int = 0, inserts_per_worker: int = 15,
                           reads_per_worker: int = 25) -> dict:
    """Contended load under the deterministic scheduler, once with dirty
    traversals and once with full path validation; returns each mode's abort
    count. Identical seeds drive identical keys and an identical schedule
    shape, so the counts are reproducible.

    The scheduler interleaves workers at every memnode exchange, so an
    operation's window genuinely overlaps concurrent splits. Under full
    validation any operation whose traversed path was touched by a
    concurrent split aborts at commit even though it reached the correct,
    unmodified leaf; a dirty traversal validates only the leaf and commits."""
    import random as _random

    out = {}
    for validation in ("dirty", "full"):
        def factory(scheduler: Scheduler, validation=validation):
            cfg = ClusterConfig(memnodes=["m0", "m1"], node_size=1024,
                                address_space=512 * 1024, validation=validation,
                                max_leaf_entries=4, max_internal_entries=6,
                                backoff_initial_ms=0.01)
            cluster = LocalCluster(cfg, proxy_count=4, gate=scheduler.gate)
            warm = cluster.tree(0)
            for i in range(8):
                warm.put(f"{i * 100_000:07d}".encode(), b"seed")

            def inserter(tree, wseed):
                def run():
                    rng = _random.Random(wseed)
                    for _ in range(inserts_per_worker):
                        key = f"{rng.randrange(10_000_000):07d}".encode()
                        tree.put(key, rng.randbytes(4))
                return run

            def reader(tree, wseed):
                def run():
                    rng = _random.Random(wseed)
                    for _ in range(reads_per_worker):
                        tree.get(f"{rng.randrange(10_000_000):07d}".encode())
                return run

            scheduler.spawn("ins0", inserter(cluster.trees[0], seed * 100 + 1))
            scheduler.spawn("ins1", inserter(cluster.trees[1], seed * 100 + 2))
            scheduler.spawn("rd0", reader(cluster.trees[2], seed * 100 + 3))
            scheduler.spawn("rd1", reader(cluster.trees[3], seed * 100 + 4))
            return lambda: sum(p.counters.aborts for p in cluster.proxies)

        _steps, results, aborts = run_random(factory, seed=seed)
        for res in results.values():
            if isinstance(res, BaseException):
                raise res
        out[validation] = aborts
    return out
