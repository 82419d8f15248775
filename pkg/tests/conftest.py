import numpy as np
import pytest
from hypothesis import settings

from cyclese.features import N_AUGMENTED, N_STATIC
from cyclese.nn import Discriminator, DiscriminatorSpec, MappingNetwork, MappingSpec

settings.register_profile("repo", deadline=None, max_examples=40)
settings.load_profile("repo")

# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, title, passed, detail):
    ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"[criterion {number}] {'PASS' if passed else 'FAIL'}  {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  [{number}] {title} -- {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_F():
    return MappingNetwork(MappingSpec(N_AUGMENTED, N_STATIC, hidden=8, proj=4, layers=2), seed=11)


@pytest.fixture
def tiny_G():
    return MappingNetwork(MappingSpec(N_STATIC, N_AUGMENTED, hidden=8, proj=4, layers=2), seed=12)


@pytest.fixture
def tiny_DU():
    return Discriminator(DiscriminatorSpec(N_AUGMENTED, hidden=16, layers=2), seed=13)


@pytest.fixture
def tiny_DV():
    return Discriminator(DiscriminatorSpec(N_STATIC, hidden=16, layers=2), seed=14)


def toy_parallel(n=2, seed=0, frames=(6, 9)):
    """Small raw parallel corpus of random log-mel-like values."""
    r = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        T = int(r.integers(frames[0], frames[1] + 1))
        y = r.normal(-8.0, 2.0, size=(T, N_STATIC))
        x = np.hstack([y + r.normal(1.0, 1.0, size=(T, N_STATIC)), r.normal(size=(T, 2 * N_STATIC))])
        pairs.append((x, y))
    return pairs
