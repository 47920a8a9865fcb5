import numpy as np
import pytest

from deflect_gaze.render import render_correspondence
from deflect_gaze.scene import (default_scene, decode_scene,
                                eye_surface_hit_batch)
from deflect_gaze.stereo import reconstruct_field


@pytest.fixture(scope="session")
def scene():
    return default_scene()


@pytest.fixture(scope="session")
def dec_scene():
    return decode_scene()


@pytest.fixture(scope="session")
def corr_pair(scene):
    return (render_correspondence(scene, 0), render_correspondence(scene, 1))


@pytest.fixture(scope="session")
def truth_cam0(scene):
    """Ground-truth surface points/normals/regions per cam0 pixel."""
    origin, dirs = scene.cameras[0].pixel_rays()
    points, normals, region, hit = eye_surface_hit_batch(scene.eye, origin,
                                                         dirs)
    return {"points": points, "normals": normals, "region": region,
            "hit": hit, "origin": origin, "dirs": dirs}


@pytest.fixture(scope="session")
def field(scene, corr_pair):
    return reconstruct_field(scene, corr_pair[0], corr_pair[1])


def rng(seed=0):
    return np.random.default_rng(seed)
