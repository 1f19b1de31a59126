import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from switchgeo.alrnn import AlrnnParams

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def random_params(rng, M, P, N, scale=0.3, stable=False):
    a = rng.uniform(-0.9, 0.9, M) if not stable else rng.uniform(0.2, 0.7, M)
    W = rng.normal(0, scale, (M, M))
    if stable:
        W *= 0.3 / max(1e-12, np.abs(np.linalg.eigvals(np.diag(a) + W)).max())
    h = rng.normal(0, 0.2, M)
    E = rng.normal(0, 0.5, (M, N))
    return AlrnnParams(a, W, h, E, P)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; printed in the terminal summary."""
    def record(n, checks: dict, detail: str = ""):
        failed = [name for name, ok in checks.items() if not ok]
        line = f"{'FAIL' if failed else 'PASS'} criterion {n}: {detail}"
        if failed:
            line += f" [failed: {', '.join(failed)}]"
        request.config.stash.setdefault(_VERDICTS, []).append((n, line))
        return not failed
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda item: item[0]):
            terminalreporter.write_line(line)
