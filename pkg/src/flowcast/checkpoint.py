"""Binary checkpoint container for model parameters and optimizer state.

Layout (little-endian):

    magic   b"FCST"
    body    u32 version
            config block: u8 mode, u32 n_input, u32 num_classes,
                          u64/u64 channel_scale (numerator, denominator),
                          u32 height, u32 width
            parameter section:  u32 count, then per record
                u32 name length, utf-8 name, u8 dtype tag (0 = float64),
                u32 ndim, u32 dims..., raw float64 payload
            optimizer section:  same record format (count may be 0)
    crc32   u32 over the body (everything after the magic)

Records are written in sorted name order so identical state always
produces identical bytes.
"""

from __future__ import annotations

import struct
import zlib
from fractions import Fraction
from io import BytesIO

import numpy as np

from .errors import FormatError
from .model import ModelConfig, ModelParams, bn_sites, init_params, parameter_spec

MAGIC = b"FCST"
VERSION = 1
_DTYPE_F64 = 0
_MODES = ("rgb", "semantic")


def _pack_records(arrays: dict[str, np.ndarray]) -> bytes:
    buf = BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BI", _DTYPE_F64, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_records(reader: _Reader) -> dict[str, np.ndarray]:
    (count,) = reader.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        tag, ndim = reader.unpack("<BI")
        if tag != _DTYPE_F64:
            raise FormatError(f"{reader.path}: unknown dtype tag {tag}")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(shape).copy()
    return arrays


def _pack_config(config: ModelConfig) -> bytes:
    scale = Fraction(config.channel_scale)
    return struct.pack(
        "<BIIQQII",
        _MODES.index(config.mode),
        config.n_input,
        config.num_classes,
        scale.numerator,
        scale.denominator,
        config.height,
        config.width,
    )


def _unpack_config(reader: _Reader) -> ModelConfig:
    mode_tag, n_input, num_classes, num, den, height, width = reader.unpack("<BIIQQII")
    if mode_tag >= len(_MODES):
        raise FormatError(f"{reader.path}: unknown mode tag {mode_tag}")
    if den == 0:
        raise FormatError(f"{reader.path}: zero channel_scale denominator")
    return ModelConfig(
        mode=_MODES[mode_tag],
        n_input=n_input,
        num_classes=num_classes,
        channel_scale=Fraction(int(num), int(den)),
        height=height,
        width=width,
    )


def _params_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    arrays = {name: t.data for name, t in params.tensors.items()}
    for name, state in params.bn.items():
        arrays[f"{name}.running_mean"] = state.mean
        arrays[f"{name}.running_var"] = state.var
        arrays[f"{name}.updates"] = np.array(float(state.updates))
    return arrays


def save_checkpoint(params: ModelParams, adam_state, path) -> None:
    """Serialize parameters, statistics, and optional optimizer state."""
    body = BytesIO()
    body.write(struct.pack("<I", VERSION))
    body.write(_pack_config(params.config))
    body.write(_pack_records(_params_arrays(params)))
    if adam_state is None:
        body.write(_pack_records({}))
    else:
        opt = {f"m.{name}": arr for name, arr in adam_state.m.items()}
        opt.update({f"v.{name}": arr for name, arr in adam_state.v.items()})
        opt["t"] = np.array(float(adam_state.t))
        opt["lr"] = np.array(adam_state.lr)
        opt["beta1"] = np.array(adam_state.beta1)
        opt["beta2"] = np.array(adam_state.beta2)
        opt["epsilon"] = np.array(adam_state.epsilon)
        body.write(_pack_records(opt))
    payload = body.getvalue()
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(payload)
        fp.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path):
    """Restore (ModelParams, AdamState | None); validates magic and CRC."""
    from .train import AdamState  # local import breaks the cycle

    blob = open(path, "rb").read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: checksum mismatch, file is corrupt")

    reader = _Reader(body, path)
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config = _unpack_config(reader)
    arrays = _unpack_records(reader)
    opt_arrays = _unpack_records(reader)

    params = init_params(0, config)
    for name, shape in parameter_spec(config).items():
        if name not in arrays:
            raise FormatError(f"{path}: missing parameter {name}")
        if arrays[name].shape != shape:
            raise FormatError(
                f"{path}: parameter {name} has shape {arrays[name].shape}, expected {shape}"
            )
        params.tensors[name].data = np.ascontiguousarray(arrays[name])
    for name in bn_sites(config):
        state = params.bn[name]
        try:
            state.mean = np.ascontiguousarray(arrays[f"{name}.running_mean"])
            state.var = np.ascontiguousarray(arrays[f"{name}.running_var"])
            state.updates = int(arrays[f"{name}.updates"].item())
        except KeyError as missing:
            raise FormatError(f"{path}: missing statistic {missing}") from None

    if not opt_arrays:
        return params, None
    state = AdamState(
        m={}, v={}, t=int(opt_arrays["t"].item()),
        lr=float(opt_arrays["lr"].item()),
        beta1=float(opt_arrays["beta1"].item()),
        beta2=float(opt_arrays["beta2"].item()),
        epsilon=float(opt_arrays["epsilon"].item()),
    )
    for name in parameter_spec(config):
        try:
            state.m[name] = np.ascontiguousarray(opt_arrays[f"m.{name}"])
            state.v[name] = np.ascontiguousarray(opt_arrays[f"v.{name}"])
        except KeyError as missing:
            raise FormatError(f"{path}: missing optimizer moment {missing}") from None
    return params, state
