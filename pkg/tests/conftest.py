import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session", autouse=True)
def _cache_dir(tmp_path_factory):
    os.environ["POLYENT_CACHE_DIR"] = str(tmp_path_factory.mktemp("cache"))
    yield


@pytest.fixture(scope="session")
def pmodel():
    from polyent.model_flows import default_pmodel

    return default_pmodel()


@pytest.fixture(scope="session")
def tame_pmodel():
    from polyent.model_flows import default_pmodel

    return default_pmodel(xi_variant="tame-plateau")
