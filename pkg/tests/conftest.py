import numpy as np
import pytest

from arborart.geometry import Box, SplitRecord, TreePartition


def random_tree(rng, p, n_splits, grid=None):
    """Random split history; split points drawn from ``grid`` values if given."""
    splits = []
    tree = TreePartition(Box.unit(p))
    for _ in range(n_splits):
        leaves = list(tree.leaf_nodes)
        rng.shuffle(leaves)
        for node in leaves:
            box = tree.box(node)
            j = int(rng.integers(p))
            if grid is not None:
                vals = grid[(grid > box.lo[j]) & (grid < box.hi[j])]
                if vals.size == 0:
                    continue
                tau = float(rng.choice(vals))
            else:
                if box.hi[j] - box.lo[j] < 1e-6:
                    continue
                tau = float(rng.uniform(box.lo[j], box.hi[j]))
                if not box.lo[j] < tau < box.hi[j]:
                    continue
            splits.append(SplitRecord(node, j, tau))
            tree = TreePartition(Box.unit(p), tuple(splits))
            break
    return tree


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)``; lines are echoed now and in the summary."""

    def record(k: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[k] = (bool(passed), detail)
        print(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
