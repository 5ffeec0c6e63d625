"""Model and dataset files.

Model file (``QKMODEL1``)::

    QKMODEL1 <manifest_nbytes>\\n
    <manifest: UTF-8 JSON, sorted keys>
    <blob: little-endian float32 tensors, back to back>

The manifest lists layers in order with their tensor names, attributes and
quantization config, plus shape/offset/nbytes for every tensor in the blob.
Scales are stored as 16-hex-digit float64 bit patterns so params round-trip
bit-exactly.

Dataset file (``QKDATA1``), all integers little-endian uint32::

    QKDATA1\\n
    x_ndim, x_dims...      (x_dims[0] is the sample count)
    label_kind (0 = int32 class ids, 1 = float32 targets), y_ndim, y_dims...
    x as float32, then y
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from qkit.calib import float_to_hex, hex_to_float
from qkit.graph import Layer, LayerKind, Model, QuantConfig
from qkit.quant import QuantParams, Scheme

MODEL_MAGIC = b"QKMODEL1"
DATA_MAGIC = b"QKDATA1\n"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


class FormatError(ValueError):
    pass


# -- quant params <-> json ---------------------------------------------------

def params_to_dict(p: Optional[QuantParams]) -> Optional[dict]:
    if p is None:
        return None
    return {
        "scheme": p.scheme.value,
        "bits": p.bit_width,
        "axis": p.axis,
        "scale": [float_to_hex(s) for s in np.atleast_1d(p.scale)],
        "zero_point": [int(z) for z in np.atleast_1d(p.zero_point)],
    }


def params_from_dict(d: Optional[dict]) -> Optional[QuantParams]:
    if d is None:
        return None
    scale = np.array([hex_to_float(s) for s in d["scale"]])
    zp = np.array(d["zero_point"], dtype=np.int64)
    if d["axis"] is None:
        return QuantParams(Scheme(d["scheme"]), d["bits"], float(scale[0]), int(zp[0]))
    return QuantParams(Scheme(d["scheme"]), d["bits"], scale, zp, d["axis"])


def _layer_to_dict(layer: Layer) -> dict:
    q = layer.quant
    return {
        "kind": layer.kind.value,
        "name": layer.name,
        "tensors": dict(layer.tensors),
        "attrs": dict(layer.attrs),
        "quant": {
            "enabled": q.enabled,
            "weight": params_to_dict(q.weight_params),
            "activation": params_to_dict(q.activation_params),
        },
    }


def _layer_from_dict(d: dict) -> Layer:
    q = d.get("quant") or {}
    attrs = dict(d.get("attrs") or {})
    if d["kind"] == LayerKind.BATCHNORM.value:
        attrs.setdefault("eps", 1e-5)
    return Layer(
        LayerKind(d["kind"]), d["name"], d.get("tensors") or {}, attrs,
        QuantConfig(bool(q.get("enabled", False)), params_from_dict(q.get("weight")),
                    params_from_dict(q.get("activation"))))


# -- model file --------------------------------------------------------------

def model_to_bytes(model: Model) -> bytes:
    blob = io.BytesIO()
    tensors = {}
    for name in sorted(model.weights):
        arr = np.ascontiguousarray(model.weights[name], dtype="<f4")
        tensors[name] = {"shape": list(arr.shape), "offset": blob.tell(), "nbytes": arr.nbytes}
        blob.write(arr.tobytes())
    manifest = {
        "version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "layers": [_layer_to_dict(l) for l in model.layers],
        "tensors": tensors,
        "blob_bytes": blob.tell(),
    }
    text = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
    return MODEL_MAGIC + b" %d\n" % len(text) + text + blob.getvalue()


def model_from_bytes(data: bytes) -> Model:
    head, sep, rest = data.partition(b"\n")
    parts = head.split(b" ")
    if not sep or len(parts) != 2 or parts[0] != MODEL_MAGIC:
        raise FormatError("not a QKMODEL1 file")
    n = int(parts[1])
    manifest = json.loads(rest[:n].decode("utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported model version {manifest.get('version')}")
    blob = rest[n:]
    if len(blob) != manifest["blob_bytes"]:
        raise FormatError(f"blob is {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    weights = {}
    for name, t in manifest["tensors"].items():
        raw = blob[t["offset"]:t["offset"] + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise FormatError(f"tensor {name!r} runs past the end of the blob")
        weights[name] = np.frombuffer(raw, dtype="<f4").reshape(t["shape"]).astype(np.float32)
    layers = [_layer_from_dict(d) for d in manifest["layers"]]
    return Model(tuple(layers), weights, tuple(manifest["input_shape"]))


def save_model(path: PathLike, model: Model) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: PathLike) -> Model:
    return model_from_bytes(Path(path).read_bytes())


# -- dataset file ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float32)
        y = np.asarray(self.y)
        y = y.astype(np.int32) if np.issubdtype(y.dtype, np.integer) else y.astype(np.float32)
        if x.ndim < 1 or y.ndim < 1 or len(x) != len(y):
            raise ValueError(f"{len(x)} samples but {len(y)} labels")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def is_classification(self) -> bool:
        return self.y.dtype == np.int32

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


def _dims(a: np.ndarray) -> bytes:
    return struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)


def dataset_to_bytes(ds: Dataset) -> bytes:
    kind = 0 if ds.is_classification else 1
    y = ds.y.astype("<i4" if kind == 0 else "<f4")
    return (DATA_MAGIC + _dims(ds.x) + struct.pack("<I", kind) + _dims(y)
            + ds.x.astype("<f4").tobytes() + y.tobytes())


def dataset_from_bytes(data: bytes) -> Dataset:
    if not data.startswith(DATA_MAGIC):
        raise FormatError("not a QKDATA1 file")
    off = len(DATA_MAGIC)

    def read_u32(count: int) -> tuple[int, ...]:
        nonlocal off
        vals = struct.unpack_from(f"<{count}I", data, off)
        off += 4 * count
        return vals

    try:
        (xnd,) = read_u32(1)
        xshape = read_u32(xnd)
        kind, ynd = read_u32(2)
        yshape = read_u32(ynd)
    except struct.error as exc:
        raise FormatError(f"truncated dataset header: {exc}") from None
    if kind not in (0, 1):
        raise FormatError(f"unknown label kind {kind}")
    nx, ny = int(np.prod(xshape)), int(np.prod(yshape))
    if len(data) - off != 4 * (nx + ny):
        raise FormatError("dataset payload size does not match header")
    x = np.frombuffer(data, dtype="<f4", count=nx, offset=off).reshape(xshape)
    y = np.frombuffer(data, dtype="<i4" if kind == 0 else "<f4", count=ny, offset=off + 4 * nx).reshape(yshape)
    return Dataset(x, y)


def save_dataset(path: PathLike, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path: PathLike) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
