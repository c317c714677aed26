"""Save and restore fitted models in the shared binary container."""

import dataclasses

import numpy as np

from . import fileformat
from .datagen import Normalizer
from .diffusion import DiffusionTransitionModel
from .exceptions import FormatError
from .invariants import BlackBoxCdn, PolynomialCdn, StructuredEnergyNet
from .neuralcore import LrSchedule

_CLASSES = {c.__name__: c for c in
            (BlackBoxCdn, PolynomialCdn, StructuredEnergyNet, DiffusionTransitionModel)}


def _jsonable(value):
    if isinstance(value, LrSchedule):
        d = dataclasses.asdict(value)
        d["kind"] = value.kind.value
        return {"__schedule__": d}
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, np.generic):
        return value.item()
    return value


def _from_json(value):
    if isinstance(value, dict) and "__schedule__" in value:
        return LrSchedule(**value["__schedule__"])
    return value


def save_model(model, path, extra: dict = None) -> None:
    """Write ``model`` with its constructor params, fitted arrays and history."""
    params = {k: _jsonable(v) for k, v in model.get_params().items()}
    norm = getattr(model, "normalizer_", None)
    meta = {
        "class": type(model).__name__,
        "params": params,
        "dim": int(getattr(model, "n_features_in_", getattr(model, "state_dim_", 0))),
        "system": getattr(model, "system_", None),
        "normalizer": None if norm is None else norm.to_dict(),
        "history": getattr(model, "history_", []),
        "extra": extra or {},
    }
    fileformat.write_container(path, fileformat.CHECKPOINT_MAGIC, meta, model.state_arrays())


def load_model(path, with_meta=False):
    meta, arrays = fileformat.read_container(path, fileformat.CHECKPOINT_MAGIC)
    cls = _CLASSES.get(meta.get("class"))
    if cls is None:
        raise FormatError(f"{path}: unknown model class {meta.get('class')!r}")
    params = {k: _from_json(v) for k, v in meta["params"].items()}
    if "hidden" in params:
        params["hidden"] = tuple(params["hidden"])
    model = cls(**params)
    norm = None if meta["normalizer"] is None else Normalizer.from_dict(meta["normalizer"])
    if cls is DiffusionTransitionModel:
        model.load_state_arrays(arrays, meta["dim"], normalizer=norm)
    else:
        model.load_state_arrays(arrays, meta["dim"], system=meta["system"], normalizer=norm)
    model.history_ = meta.get("history", [])
    return (model, meta) if with_meta else model
