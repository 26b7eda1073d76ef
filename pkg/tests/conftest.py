import numpy as np
import pytest
from hypothesis import settings

from auctionnet import diffcore as dc

settings.register_profile("pkg", max_examples=40, deadline=None)
settings.load_profile("pkg")


@pytest.fixture(autouse=True)
def strict_numerics():
    # NaN/Inf operands raise inside tests; training loops run without it
    dc.set_strict(True)
    yield
    dc.set_strict(False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, printed as one line per criterion at the end of the session
ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture(scope="session")
def acceptance(request):
    return request.config.stash[ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(results):
        ok, detail = results[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
