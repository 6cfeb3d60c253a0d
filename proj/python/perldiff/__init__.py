"""Python bindings for the perldiff core."""

import json

from . import _core
from ._core import ConfigError, IoError, SchemaError, ShapeError

__all__ = [
    "ConfigError", "IoError", "SchemaError", "ShapeError", "Model",
    "generate_scene", "box_mask", "road_mask", "render", "score", "evaluate_oracle", "default_config",
]


def _dump(scene):
    return scene if isinstance(scene, str) else json.dumps(scene)


def generate_scene(seed, scene_id="scene", width=48, height=32):
    return json.loads(_core.generate_scene_json(seed, scene_id, width, height))


def box_mask(scene, camera, box):
    return _core.box_mask(_dump(scene), camera, box)


def road_mask(scene, camera):
    return _core.road_mask(_dump(scene), camera)


def render(scene, camera):
    return _core.render(_dump(scene), camera)


def score(images, scene):
    return _core.score(list(images), _dump(scene))


def evaluate_oracle(scenes):
    return _core.evaluate_oracle([_dump(s) for s in scenes])


def default_config(overrides=None):
    return json.loads(_core.config_json(json.dumps(overrides or {})))


class Model:
    def __init__(self, checkpoint):
        self._m = _core.Model(str(checkpoint))

    def generate(self, scene, seed=0, steps=50, scale=5.0, eta=0.0):
        return self._m.generate(_dump(scene), seed, steps, scale, eta)

    def save(self, path):
        self._m.save(str(path))

    @property
    def size(self):
        return self._m.height, self._m.width

    @property
    def parameter_count(self):
        return self._m.parameter_count
