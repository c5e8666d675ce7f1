import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sparsekit.model import Model
from sparsekit.tensor import BatchNormParams, LayerSpec

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_conv_chain(rng, channels=(3, 4, 5), size=8, classes=4, bias=True, bn=False):
    """conv -> [bn] -> relu -> conv -> [bn] -> relu -> fc -> relu -> fc."""
    layers = []
    c_in = channels[0]
    for i, c_out in enumerate(channels[1:], start=1):
        w = rng.normal(0, 0.5, (c_out, c_in, 3, 3)).astype(np.float32)
        b = rng.normal(0, 0.1, c_out).astype(np.float32) if bias else None
        layers.append(LayerSpec("conv2d", f"conv{i}", w, b, stride=1, padding=1))
        if bn:
            layers.append(LayerSpec("batchnorm", f"bn{i}", bn=BatchNormParams(
                rng.uniform(0.5, 2, c_out), rng.normal(0, 0.3, c_out),
                rng.normal(0, 0.3, c_out), rng.uniform(0.5, 2, c_out))))
        layers.append(LayerSpec("relu", f"relu{i}"))
        c_in = c_out
    feat = c_in * size * size
    layers.append(LayerSpec("fully_connected", "fc1", rng.normal(0, 0.2, (16, feat)),
                            rng.normal(0, 0.1, 16) if bias else None))
    layers.append(LayerSpec("relu", "relu_fc"))
    layers.append(LayerSpec("fully_connected", "fc2", rng.normal(0, 0.3, (classes, 16)),
                            rng.normal(0, 0.1, classes)))
    return Model(layers, (channels[0], size, size), classes)


@pytest.fixture
def conv_chain(rng):
    return random_conv_chain(rng)


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    outcome = "PASS" if call.excinfo is None else "FAIL"
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    ACCEPTANCE_RESULTS[number] = (title, outcome, detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, outcome, detail = ACCEPTANCE_RESULTS[number]
        line = f"criterion {number:2d} {outcome}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
