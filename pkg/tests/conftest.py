import numpy as np
import pytest

from igsplat.core import Camera, GaussianAttributes


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_camera(width=16, height=16, fx=20.0, fy=20.0, dist=2.5):
    return Camera(
        rotation=np.eye(3),
        translation=np.array([0.0, 0.0, dist]),
        fx=fx, fy=fy,
        cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
        near=0.1, far=100.0,
    )


def random_attrs(rng, n, sh_degree=1, opacity=(0.3, 0.8), scale=(-3.5, -2.4)):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianAttributes(
        opacity=rng.uniform(*opacity, size=n),
        scale_exp=rng.uniform(*scale, size=(n, 3)),
        rotation=q,
        sh=rng.normal(scale=0.3, size=(n, 3, (sh_degree + 1) ** 2)),
    )


@pytest.fixture
def camera():
    return make_camera()
