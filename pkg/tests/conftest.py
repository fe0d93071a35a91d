import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dag_edges(rng, n, density=0.5, delta_w=True):
    """Edges ``u -> v`` of a random DAG over a random topological order."""
    perm = rng.permutation(n)
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < density:
                edges.append((int(perm[i]), int(perm[j]), float(rng.random()) if delta_w else 1.0))
    return edges


# --- acceptance summary ------------------------------------------------------

SESSION_START = time.perf_counter()
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_collection_modifyitems(items):
    # the runtime budget check measures the whole session, so it goes last
    items.sort(key=lambda item: item.get_closest_marker("run_last") is not None)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
