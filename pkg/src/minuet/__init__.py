"""Distributed in-memory multiversion B-tree.

Key-value store built from optimistic dynamic transactions over
compare/read/write minitransactions, with dirty-read traversals,
copy-on-write snapshots, borrowed snapshots, writable branching clones,
and garbage collection. See README.md for a tour.
"""

from .cluster import LocalCluster
from .config import ClusterConfig, load_config, parse_config

__all__ = ["ClusterConfig", "LocalCluster", "load_config", "parse_config"]
