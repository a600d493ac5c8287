"""Deterministic checkpoint container and its binary file format.

Layout: an unsigned 64-bit little-endian byte length, then a UTF-8 JSON
header (format_version, config snapshot, epoch, rng state, optimizer step
counts, tensor directory), then the tensor payloads as raw little-endian
float32 in directory order. Tensor names are sorted and the header is dumped
with sorted keys, so save -> load -> save is byte-identical.

Model weights are stored under stable names: ``backbone.*`` for the
encoder-decoder and ``pd.*`` for the privileged dictionary and its
projections. Adam moments ride along as ``opt.<name>.m`` / ``opt.<name>.v``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DataError

FORMAT_VERSION = 1


def _to_native(obj):
    if isinstance(obj, dict):
        return {k: _to_native(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_native(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _store_name(state_key: str) -> str:
    if state_key.startswith("fusion."):
        return "pd." + state_key[len("fusion."):]
    return state_key


def _model_name(store_key: str) -> str:
    if store_key.startswith("pd."):
        return "fusion." + store_key[len("pd."):]
    return store_key


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    tensors: dict                      # name -> float32 ndarray
    rng_state: dict = field(default_factory=dict)
    opt_steps: dict | None = None      # name -> int (Adam step counts)
    format_version: int = FORMAT_VERSION

    # -- construction ------------------------------------------------------

    @classmethod
    def from_model(cls, model, config: dict, epoch: int, rng_state: dict | None = None,
                   optimizer: torch.optim.Optimizer | None = None) -> "Checkpoint":
        tensors = {}
        for key, value in model.state_dict().items():
            tensors[_store_name(key)] = value.detach().cpu().numpy().astype(np.float32)
        opt_steps = None
        if optimizer is not None:
            opt_steps = {}
            named = {id(p): _store_name(k) for k, p in model.named_parameters()}
            for p, state in optimizer.state.items():
                name = named[id(p)]
                tensors[f"opt.{name}.m"] = state["exp_avg"].detach().numpy().astype(np.float32)
                tensors[f"opt.{name}.v"] = state["exp_avg_sq"].detach().numpy().astype(np.float32)
                opt_steps[name] = int(state["step"].item())
        return cls(config=_to_native(config), epoch=epoch, tensors=tensors,
                   rng_state=_to_native(rng_state or {}), opt_steps=opt_steps)

    # -- application -------------------------------------------------------

    def model_tensors(self) -> dict:
        return {k: v for k, v in self.tensors.items() if not k.startswith("opt.")}

    def apply_to_model(self, model) -> None:
        state = {_model_name(k): torch.from_numpy(v.copy())
                 for k, v in self.model_tensors().items()}
        missing, unexpected = model.load_state_dict(state, strict=True), None
        del missing, unexpected

    def build_model(self):
        from .restore import RestorationModel
        if "model" not in self.config:
            raise ConfigError("checkpoint config lacks a 'model' section")
        model = RestorationModel.from_build_config(self.config["model"])
        self.apply_to_model(model)
        return model

    def restore_optimizer(self, optimizer: torch.optim.Optimizer, model) -> None:
        if self.opt_steps is None:
            raise ConfigError("checkpoint carries no optimizer state")
        by_name = {_store_name(k): p for k, p in model.named_parameters()}
        for name, step in self.opt_steps.items():
            p = by_name[name]
            optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.from_numpy(self.tensors[f"opt.{name}.m"].copy()),
                "exp_avg_sq": torch.from_numpy(self.tensors[f"opt.{name}.v"].copy()),
            }

    # -- serialization -----------------------------------------------------

    def save(self, path: str) -> None:
        names = sorted(self.tensors)
        header = {
            "format_version": self.format_version,
            "config": self.config,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "opt_steps": self.opt_steps,
            "tensors": [{"name": n, "shape": list(self.tensors[n].shape)} for n in names],
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for n in names:
                arr = np.ascontiguousarray(self.tensors[n], dtype="<f4")
                fh.write(arr.tobytes())

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        with open(path, "rb") as fh:
            raw = fh.read(8)
            if len(raw) != 8:
                raise DataError(f"{path}: truncated header length")
            (hlen,) = struct.unpack("<Q", raw)
            try:
                header = json.loads(fh.read(hlen).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise DataError(f"{path}: bad checkpoint header: {e}") from e
            if "format_version" not in header:
                raise DataError(f"{path}: header lacks format_version")
            if header["format_version"] != FORMAT_VERSION:
                raise DataError(f"{path}: unsupported format_version "
                                f"{header['format_version']}")
            tensors = {}
            for entry in header["tensors"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(4 * count)
                if len(buf) != 4 * count:
                    raise DataError(f"{path}: truncated payload for {entry['name']}")
                tensors[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        return cls(config=header["config"], epoch=header["epoch"], tensors=tensors,
                   rng_state=header.get("rng_state", {}),
                   opt_steps=header.get("opt_steps"),
                   format_version=header["format_version"])
