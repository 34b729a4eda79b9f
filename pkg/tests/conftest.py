import numpy as np
import pytest

from compmdp.model import LinearSubsystem, room_network

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance line; printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def room15():
    return room_network(15)


@pytest.fixture(scope="session")
def room():
    return room_network(3).subsystems[0]


def random_linear(rng, n, diagonal_noise=True):
    """Stable random subsystem on ``[-1, 1]^n`` with scalar inputs."""
    A = rng.uniform(-0.6, 0.6, (n, n))
    A *= 0.8 / max(1.0, np.max(np.abs(np.linalg.eigvals(A))))
    if diagonal_noise:
        N = np.diag(rng.uniform(0.05, 0.4, n))
    else:
        N = rng.uniform(0.05, 0.3, (n, n))
    return LinearSubsystem(
        A=A, B=rng.uniform(-0.5, 0.5, (n, 1)), D=rng.uniform(-0.3, 0.3, (n, 1)), N=N,
        C1=np.eye(n), C2=np.eye(n)[:1], state_box=[(-1.0, 1.0)] * n, input_box=[(-1.0, 1.0)],
        internal_box=[(-1.0, 1.0)], drift=rng.uniform(-0.1, 0.1, n),
    )
