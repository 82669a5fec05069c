# conftest.py
import numpy as np
import pytest

from body_model import ModelDims, build_template
from geometry import Camera
from learn import LossConfig, ModelSpec, NetworkConfig, init_state
from synth import ExpertFeatureMaps, FeatureDims, NoiseProfile, generate_scene, simulate


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the slow benchmark tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training benchmarks (opt in with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def dims():
    return ModelDims.toy()


@pytest.fixture(scope="session")
def tpl(dims):
    return build_template(dims, seed=0)


@pytest.fixture(scope="session")
def camera():
    return Camera(focal_length=1000.0, principal_point=(512.0, 512.0), subject_depth=3.0)


@pytest.fixture(scope="session")
def feature_dims():
    return FeatureDims.toy()


@pytest.fixture(scope="session")
def feature_maps(dims, feature_dims):
    return ExpertFeatureMaps(dims, feature_dims, seed=0)


@pytest.fixture(scope="session")
def loss_cfg(feature_dims):
    return LossConfig(feature_dims=feature_dims)


@pytest.fixture(scope="session")
def network():
    return NetworkConfig(hidden=(16, 16), student_features=FeatureDims(body=6, face=4, hand=4))


@pytest.fixture
def state(tpl, network, feature_dims):
    spec = ModelSpec.build(tpl, network, feature_dims)
    return init_state(spec, seed=3, head_scale=0.1)


@pytest.fixture
def clean_entry(dims, tpl, camera, feature_maps):
    scene = generate_scene(11, dims, 0.3, camera)
    return simulate(scene, tpl, NoiseProfile(), feature_maps)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
