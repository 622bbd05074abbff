import numpy as np
import pytest

from symctl.symbolic import SymbolicModel


def random_model(rng, num_states, num_inputs, density=0.3, max_succ=3):
    """Random nondeterministic model; every pair has 1..max_succ successors."""
    triples = []
    for s in range(num_states):
        for u in range(num_inputs):
            if rng.random() < density:
                k = rng.integers(1, max_succ + 1)
                for t in rng.choice(num_states, size=min(k, num_states), replace=False):
                    triples.append((s, u, int(t)))
    return SymbolicModel(num_states, num_inputs, triples)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []  # (criterion, check, passed, detail), filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted({c for c, *_ in ACCEPTANCE}):
        rows = [r for r in ACCEPTANCE if r[0] == crit]
        verdict = "PASS" if all(r[2] for r in rows) else "FAIL"
        parts = "; ".join(f"{name} {'ok' if ok else 'FAILED'} ({detail})" for _, name, ok, detail in rows)
        terminalreporter.write_line(f"criterion {crit}: {verdict} - {parts}")
