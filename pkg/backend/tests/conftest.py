# backend/tests/conftest.py
import numpy as np
import pytest
from scipy.signal import lfilter

FS = 16000


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="module")
def echo_scenario():
    """
    Stationary echo: 7 s of white far-end noise (sigma 0.1) through a 100-tap decaying random
    path, plus measurement noise 40 dB below the echo. No near-end talker.
    """
    gen = np.random.default_rng(7)
    n = 7 * FS
    x = 0.1 * gen.standard_normal(n)
    taps = np.arange(100)
    path = gen.standard_normal(100) * np.exp(-taps / 20.0)
    echo = lfilter(path, [1.0], x)
    noise = gen.standard_normal(n) * np.sqrt(np.mean(echo ** 2)) * 1e-2
    return {"x": x, "d": echo + noise, "echo": echo, "path": path, "noise": noise, "fs": FS}


def white_noise(n: int, seed: int = 0, scale: float = 0.1) -> np.ndarray:
    return scale * np.random.default_rng(seed).standard_normal(n)
