import numpy as np
import pytest

from sgdm_volterra import Hyperparams, explicit_spectrum, mp_spectrum


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def mp2():
    return mp_spectrum(2.0)


@pytest.fixture
def single_mode():
    """One unit eigenvalue with a step that makes every quantity hand-computable."""
    return explicit_spectrum([1.0]), Hyperparams(gamma=0.5, delta=0.0, zeta=0.5)


def random_explicit(rng, max_modes=32):
    m = int(rng.integers(1, max_modes + 1))
    return explicit_spectrum(rng.uniform(0.05, 3.0, m), rng.dirichlet(np.ones(m)))


def random_params(rng, spectrum, convergent=True):
    """Hyperparameters inside the learning-rate bound; optionally also the trace bound."""
    while True:
        delta = float(rng.uniform(0.0, 0.95))
        zeta = float(rng.uniform(0.05, 1.0))
        gamma = float(rng.uniform(0.01, 0.99) * (1.0 + delta) / (zeta * spectrum.sigma2_max))
        if not convergent:
            return Hyperparams(gamma, delta, zeta)
        if (1.0 - zeta) * gamma * spectrum.mean / (1.0 - delta) < 1.0:
            return Hyperparams(gamma, delta, zeta)


# ---------------------------------------------------------------------------
# Acceptance report: every criterion appends one line, printed after the run.

def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance(request):
    lines = request.config.acceptance_lines

    def record(label: str, title: str, ok: bool | None, detail: str) -> bool:
        status = {True: "PASS", False: "FAIL", None: "INFO"}[ok]
        lines.append(f"{status} [{label}] {title}: {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
