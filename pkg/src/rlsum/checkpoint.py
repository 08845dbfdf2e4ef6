"""Checkpoint directories: a parameter container plus a JSON sidecar."""

import json
from pathlib import Path

from . import nn

PARAMS_FILE = "model.rlsn"
META_FILE = "model.json"


def save_checkpoint(model, directory, extra: dict | None = None) -> None:
    """Write any model exposing ``params`` and ``meta()``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nn.save_parameters(model.params, directory / PARAMS_FILE)
    meta = model.meta()
    if extra:
        meta.update(extra)
    (directory / META_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_meta(directory) -> dict:
    return json.loads((Path(directory) / META_FILE).read_text(encoding="utf-8"))


def read_params(directory) -> nn.ParameterSet:
    return nn.load_parameters(Path(directory) / PARAMS_FILE)
