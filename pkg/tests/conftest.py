from __future__ import annotations

import pytest

from disagg_moe.config import default_config
from disagg_moe.scheduler import ReplicaMap


@pytest.fixture
def cfg():
    return default_config()


@pytest.fixture
def hand_trace():
    """Two instances; experts 0 and 2 pinned, 1 and 3 on both.

    Experts 0..3 stand for E1..E4, instances 0/1 for g1/g2.
    """
    rmap = ReplicaMap.from_hosts([(0,), (0, 1), (1,), (0, 1)], 2)
    rows = [(0, 1), (2, 1), (3, 0)]
    return rows, rmap
