import numpy as np
import pytest

from av_geometry import MicPairConfig, ScenePoint, default_mic_config
from mixture import MixtureParams, OutlierDomain


@pytest.fixture
def mic() -> MicPairConfig:
    """10 cm baseline along x, no correction."""
    return default_mic_config()


@pytest.fixture
def domain(mic) -> OutlierDomain:
    return OutlierDomain.from_mic_config(mic, 0.1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def unit_domain() -> OutlierDomain:
    """Generic-units domain for the hand-computed mixture examples."""
    return OutlierDomain(-10.0, 10.0)


@pytest.fixture
def two_speakers():
    """Two static scene positions on either side of the sagittal plane."""
    return ScenePoint(-0.8, 0.0, 2.0), ScenePoint(0.8, 0.0, 2.0)


@pytest.fixture
def two_gaussians(unit_domain) -> MixtureParams:
    return MixtureParams(
        weights=[0.45, 0.45, 0.1],
        means=[-1.0, 1.0],
        stddevs=[0.5, 0.5],
        domain=unit_domain,
    )
