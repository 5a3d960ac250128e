import json

import numpy as np
import pytest

from vvstream import create_app
from vvstream.capture import FrameDescriptor, TaggedFrame, frame_timestamp
from vvstream.geometry import PointCloud

SCENE = {
    'seed': 3,
    'fps': 8,
    'duration_s': 1.0,
    'background': {'primitives': [
        {'type': 'box', 'min': [-2, -2, 0], 'max': [2, 2, 2.5], 'points': 3000, 'color': [180, 170, 160]},
    ]},
    'cameras': [
        {'id': 0, 'position': [1.8, 0.0, 1.5], 'look_at': [0, 0, 1]},
        {'id': 1, 'position': [-1.8, 0.0, 1.5], 'look_at': [0, 0, 1]},
        {'id': 2, 'position': [0.0, 1.8, 1.5], 'look_at': [0, 0, 1]},
    ],
    'body': {'points': 1500, 'keyframes': [{'t': 0, 'position': [0, 0, 0], 'yaw_deg': 0}],
             'arm_swing': {'amplitude_deg': 20, 'period_s': 1.0}},
}


@pytest.fixture
def app(tmp_path):
    app = create_app({
        'TESTING': True,
        'FRAMES_PER_CHUNK': 4,
        'LOG_LEVEL': 'DEBUG',
    })
    yield app


@pytest.fixture
def client(app):
    return app.test_client()


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture
def scene_doc():
    return json.loads(json.dumps(SCENE))


@pytest.fixture
def scene_script(tmp_path, scene_doc):
    path = tmp_path / 'scene.json'
    path.write_text(json.dumps(scene_doc))
    return path


def random_cloud(rng, n, scale=1.0):
    return PointCloud(rng.uniform(-scale, scale, size=(n, 3)), rng.integers(0, 256, size=(n, 3)))


def tagged(camera_id, index, fps=24, cloud=None, skeleton=None):
    cloud = cloud if cloud is not None else PointCloud(np.zeros((1, 3)), np.zeros((1, 3)))
    descriptor = FrameDescriptor(camera_id, frame_timestamp(index, fps), index, len(cloud))
    return TaggedFrame(descriptor, cloud, skeleton)
