"""Model registration: model_id -> (load_fn, infer_fn).

load_fn(params, device) runs once per LOAD and returns opaque state;
infer_fn(state, tensors) maps named input tensors to named output tensors
and must not depend on request ordering.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class ModelEntry:
    load_fn: callable
    infer_fn: callable
    devices: tuple = ("cpu",)


class ModelRegistry:
    def __init__(self):
        self._models = {}

    def register(self, model_id, load_fn, infer_fn, devices=("cpu",)):
        self._models[model_id] = ModelEntry(load_fn, infer_fn, tuple(devices))

    def get(self, model_id):
        return self._models.get(model_id)

    def ids(self):
        return sorted(self._models)


def registration(registry, model_id, devices=("cpu",)):
    """Decorator form: the function loads the model and returns infer_fn."""

    def wrap(load_fn):
        def load(params, device):
            return load_fn(params, device)

        def infer(state, tensors):
            return state(tensors)

        registry.register(model_id, load, infer, devices)
        return load_fn

    return wrap
