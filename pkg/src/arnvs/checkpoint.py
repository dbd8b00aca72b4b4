"""Single-file checkpoint format.

Byte layout (all integers unsigned 64-bit little-endian):

    [ 8 bytes ] magic b"ARNVSCP1"
    [ 8 bytes ] header_len
    [ header_len bytes ] UTF-8 JSON: {"config", "step", "schedule", "opt"}
    [ 8 bytes ] index_len
    [ index_len bytes ] UTF-8 JSON: list of {"name", "shape", "offset", "nbytes"}
    [ data ] concatenated raw little-endian float32 arrays, C order,
             offsets relative to the start of the data section

Stored arrays: "params.<n>" and "ema.<n>" for every parameter, plus Adam
moments "opt_m.<n>" / "opt_v.<n>" so training resumes bitwise.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .denoiser import DenoiserConfig
from .diffusion import NoiseSchedule, make_schedule
from .training import OptimizerConfig, TrainState

MAGIC = b"ARNVSCP1"


class CheckpointError(RuntimeError):
    pass


def _named_arrays(state: TrainState) -> dict:
    out = {}
    for name, arr in state.params.items():
        out[f"params.{name}"] = arr
        out[f"ema.{name}"] = state.ema[name]
        out[f"opt_m.{name}"] = state.m[name]
        out[f"opt_v.{name}"] = state.v[name]
    return out


def save_checkpoint(
    path,
    state: TrainState,
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    opt: OptimizerConfig,
) -> None:
    header = {
        "config": config.to_json(),
        "step": state.step,
        "schedule": schedule.to_json(),
        "opt": opt.to_json(),
    }
    arrays = _named_arrays(state)
    index = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header_b = json.dumps(header).encode()
    index_b = json.dumps(index).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_b)))
        f.write(header_b)
        f.write(struct.pack("<Q", len(index_b)))
        f.write(index_b)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns (TrainState, DenoiserConfig, NoiseSchedule, OptimizerConfig)."""
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode())
        (index_len,) = struct.unpack("<Q", f.read(8))
        index = json.loads(f.read(index_len).decode())
        data = f.read()

    config = DenoiserConfig.from_json(header["config"])
    schedule = make_schedule(header["schedule"]["kind"], header["schedule"]["T"])
    opt = OptimizerConfig.from_json(header["opt"])
    dt = config.np_dtype

    arrays = {}
    for ent in index:
        raw = data[ent["offset"] : ent["offset"] + ent["nbytes"]]
        if len(raw) != ent["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {ent['name']}")
        arrays[ent["name"]] = np.frombuffer(raw, dtype="<f4").reshape(ent["shape"]).astype(dt)

    groups = {"params": {}, "ema": {}, "opt_m": {}, "opt_v": {}}
    for name, arr in arrays.items():
        prefix, _, rest = name.partition(".")
        if prefix not in groups:
            raise CheckpointError(f"{path}: unknown array group {prefix!r}")
        groups[prefix][rest] = arr
    state = TrainState(
        params=groups["params"],
        ema=groups["ema"],
        m=groups["opt_m"],
        v=groups["opt_v"],
        step=int(header["step"]),
    )
    return state, config, schedule, opt
