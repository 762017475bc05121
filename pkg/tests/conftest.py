import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset():
    from midvcl.shapes import make_shape_texture_dataset

    return make_shape_texture_dataset(0, 4, 4, 5, 32, 32)


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory):
    """Run cache for desk-scale experiments, shared by every test in the session.

    Set MIDVCL_DESK_CACHE to keep runs between sessions; runs are keyed by
    their config hash, so a stale entry is retrained, never reused.
    """
    import os

    cache = os.environ.get("MIDVCL_DESK_CACHE")
    if cache:
        Path(cache).mkdir(parents=True, exist_ok=True)
        return Path(cache)
    return tmp_path_factory.mktemp("desk")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
