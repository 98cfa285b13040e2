import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ccloc import csi, dataset, scene

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

# acceptance criteria register their verdicts here; printed at the end of the run
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def los_scene():
    return scene.build_scene(scene.SceneConfig(bs_mode="los_dominant"))


@pytest.fixture(scope="session")
def nlos_scene():
    return scene.build_scene(scene.SceneConfig(bs_mode="nlos_dominant"))


@pytest.fixture(scope="session")
def small_dataset(los_scene):
    """40 labeled + 60 unlabeled UEs, split and scaled."""
    ds = dataset.build_dataset(los_scene, 40, 60, csi.PilotConfig(), seed=3)
    return dataset.fit_scaler(dataset.split(ds, 0.85, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("desk")

