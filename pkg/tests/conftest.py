import numpy as np
import pytest

from emg_iae.forward_model import FibreParams, VolumeConductorConfig
from emg_iae.informed_ae.decoder import DecoderContext
from emg_iae.synth import ArrayConfig, SynthConfig


@pytest.fixture(scope="session")
def array_cfg():
    return ArrayConfig()


@pytest.fixture(scope="session")
def vc():
    return VolumeConductorConfig()


@pytest.fixture(scope="session")
def template():
    return SynthConfig().template_fibre()


@pytest.fixture(scope="session")
def ctx(array_cfg, template, vc):
    return DecoderContext(array_cfg.electrode_array(), array_cfg.sampling_grid(), template, vc)


@pytest.fixture
def shallow_fibre():
    return FibreParams(iz=0.002, v=4.0, length=0.15, depth=0.01)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
