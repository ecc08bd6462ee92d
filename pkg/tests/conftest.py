import warnings

import numpy as np
import pytest
import torch

from monoindoor.geometry import CameraIntrinsics, RigidTransform, pose_vector_to_transform

torch.set_default_dtype(torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def k8():
    return CameraIntrinsics(fx=10.0, fy=12.0, cx=3.5, cy=3.4, width=8, height=8)


def random_transform(rng, angle=0.3, trans=0.2, batch=None) -> RigidTransform:
    shape = (3,) if batch is None else (batch, 3)
    axis = rng.normal(size=shape)
    axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
    vec = np.concatenate([axis * angle, rng.normal(scale=trans, size=shape)], -1)
    return pose_vector_to_transform(torch.tensor(vec))


def smooth_image(h, w, channels=3, seed=0, batch=1):
    """Band-limited test image in [0.1, 0.9]."""
    r = np.random.default_rng(seed)
    v, u = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = np.zeros((batch, channels, h, w))
    for b in range(batch):
        for c in range(channels):
            f1, f2 = r.uniform(0.15, 0.45, size=2)
            p1, p2 = r.uniform(0, 2 * np.pi, size=2)
            img[b, c] = 0.5 + 0.2 * np.sin(f1 * u + p1) * np.cos(f2 * v + p2) + 0.15 * np.sin(0.3 * (u + v) + p2)
    return torch.tensor(img)


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
