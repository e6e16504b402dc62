"""Checkpoint archives.

A checkpoint is a zip archive holding ``meta.json`` plus one ``.npy`` entry
per parameter, stored as little-endian float64 under its dotted path. Entry
timestamps are fixed so identical models serialise to identical bytes.

* full checkpoint: every parameter, the ModelConfig and (if adapted) the
  PeftSpec, trainable flags and the base checksum.
* delta checkpoint: only the trainable PEFT parameters, the PeftSpec and the
  checksum of the base model they were trained against.
"""

import io
import json
import zipfile

import numpy as np

from .errors import ChecksumError, InputError, StateError
from .model import GroundingModel, ModelConfig
from .peft import Method, PeftSpec, inject, model_checksum

FORMAT = "vgpeft-checkpoint/1"
DELTA_FORMAT = "vgpeft-delta/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_archive(path, meta, arrays):
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, indent=2, sort_keys=True))
        for name, arr in arrays:
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype="<f8"),
                                      allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"params/{name}.npy", date_time=_EPOCH), buf.getvalue())


def _read_archive(path):
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for name in zf.namelist():
                if name.startswith("params/") and name.endswith(".npy"):
                    with zf.open(name) as fh:
                        arr = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
                    arrays[name[len("params/"):-len(".npy")]] = arr.astype(np.float64)
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as e:
        raise InputError(f"cannot read checkpoint {path}: {e}") from None
    return meta, arrays


def _load_into(model, arrays, paths):
    params = model.params
    for path in paths:
        if path not in arrays:
            raise InputError(f"checkpoint is missing parameter {path!r}")
        if path not in params:
            raise InputError(f"checkpoint parameter {path!r} does not exist in the model")
        p = params[path]
        if arrays[path].shape != p.shape:
            raise InputError(f"shape mismatch for {path!r}: {arrays[path].shape} vs {p.shape}")
        p.data[...] = arrays[path]


def save_checkpoint(model, path):
    meta = {"format": FORMAT, "config": model.config.to_dict(), "peft": None}
    if model.peft is not None:
        meta["peft"] = {
            "spec": model.peft["spec"].to_dict(),
            "base_checksum": model.peft["base_checksum"],
        }
    meta["trainable"] = [p for p, t in model.named_parameters() if t.trainable]
    _write_archive(path, meta, [(p, t.data) for p, t in model.named_parameters()])


def load_checkpoint(path):
    """Rebuild the model stored at ``path``, re-injecting PEFT structure if present."""
    meta, arrays = _read_archive(path)
    if meta.get("format") != FORMAT:
        raise InputError(f"{path} is not a full checkpoint (format={meta.get('format')!r})")
    model = GroundingModel(ModelConfig.from_dict(meta["config"]))
    if meta.get("peft"):
        inject(model, PeftSpec.from_dict(meta["peft"]["spec"]))
        model.peft["base_checksum"] = meta["peft"]["base_checksum"]
    params = model.params
    if set(arrays) != set(params):
        extra, missing = sorted(set(arrays) - set(params)), sorted(set(params) - set(arrays))
        raise InputError(f"checkpoint/model parameter mismatch: extra={extra} missing={missing}")
    _load_into(model, arrays, list(params))
    trainable = set(meta.get("trainable", params))
    for p_path, p in params.items():
        p.trainable = p_path in trainable
    return model


def save_delta(model, path):
    """Write only the PEFT-trainable parameters of an adapted model."""
    if model.peft is None:
        raise StateError("model has no PEFT structure; nothing to write as a delta")
    trainable = [(p, t.data) for p, t in model.named_parameters() if t.trainable]
    meta = {
        "format": DELTA_FORMAT,
        "config": model.config.to_dict(),
        "spec": model.peft["spec"].to_dict(),
        "base_checksum": model.peft["base_checksum"],
        "paths": [p for p, _ in trainable],
    }
    _write_archive(path, meta, trainable)


def read_delta(path):
    meta, arrays = _read_archive(path)
    if meta.get("format") != DELTA_FORMAT:
        raise InputError(f"{path} is not a delta checkpoint (format={meta.get('format')!r})")
    return meta, arrays


def delta_spec(path):
    return PeftSpec.from_dict(read_delta(path)[0]["spec"])


def apply_delta(base_model, path):
    """Inject the stored spec into ``base_model`` and load the delta parameters.

    The base must match the checksum recorded when the delta was trained.
    Mutates and returns ``base_model``.
    """
    meta, arrays = read_delta(path)
    if base_model.peft is not None:
        raise StateError("apply_delta needs a plain base model")
    found = model_checksum(base_model)
    if found != meta["base_checksum"]:
        raise ChecksumError(
            f"base model checksum {found[:12]} does not match delta base {meta['base_checksum'][:12]}")
    inject(base_model, PeftSpec.from_dict(meta["spec"]))
    _load_into(base_model, arrays, meta["paths"])
    return base_model


def is_lora_delta(path):
    return delta_spec(path).method is Method.LORA
