import pytest

from minuet.cluster import LocalCluster
from minuet.config import ClusterConfig


def small_config(**kw):
    base = dict(memnodes=["m0", "m1", "m2"], node_size=1024,
                address_space=512 * 1024, backoff_initial_ms=0.2)
    base.update(kw)
    return ClusterConfig(**base)


@pytest.fixture
def cluster():
    return LocalCluster(small_config(), proxy_count=2)


@pytest.fixture
def tiny_tree_cluster():
    """Splits early: at most 4 entries per node."""
    return LocalCluster(small_config(max_leaf_entries=4, max_internal_entries=4),
                        proxy_count=2)


@pytest.fixture
def branching_cluster():
    return LocalCluster(
        small_config(mode="branching", beta=2, catalog_leaves=16,
                     max_leaf_entries=4, max_internal_entries=4),
        proxy_count=2)
