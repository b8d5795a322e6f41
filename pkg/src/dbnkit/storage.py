"""Self-describing binary containers for models and datasets.

Layout: 4-byte magic, uint32 little-endian header length, canonical JSON
header, then the raw little-endian float64 payload of each array in header
order.  Writing the same content always produces the same bytes, so
fixed-seed runs can be compared file-wise.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .models import GRBM, RBM, SRBM, Grbm, ModelError, Rbm, Srbm

MAGIC = b"DBNK"
FORMAT_VERSION = 1


class StorageError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_container(path, kind, meta, arrays):
    """Write named float64 arrays with a JSON header; order is preserved."""
    entries = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = canonical_json(
        {
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "meta": meta,
            "arrays": entries,
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def read_container(path, expect_kind=None):
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"no such file: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise StorageError(f"{path} is not a dbnkit container")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise StorageError(f"unsupported format version in {path}")
        if expect_kind is not None and header["kind"] != expect_kind:
            raise StorageError(
                f"{path} holds a {header['kind']!r} container, expected {expect_kind!r}"
            )
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            arrays[entry["name"]] = data.copy()
    return header["kind"], header["meta"], arrays


def save_model(model, path):
    """Serialize a layer model; round-trips bit-exactly."""
    meta = {
        "variant": model.variant,
        "n_visible": model.n_visible,
        "n_hidden": model.n_hidden,
    }
    arrays = {
        "weights": model.weights,
        "visible_bias": model.visible_bias,
        "hidden_bias": model.hidden_bias,
    }
    if model.variant == GRBM:
        meta["sigma"] = model.sigma
    elif model.variant == SRBM:
        arrays["lateral"] = model.lateral
    write_container(path, "layer_model", meta, arrays)


def load_model(path):
    _, meta, arrays = read_container(path, expect_kind="layer_model")
    variant = meta["variant"]
    if variant == RBM:
        return Rbm(arrays["weights"], arrays["visible_bias"], arrays["hidden_bias"])
    if variant == GRBM:
        return Grbm(
            arrays["weights"],
            arrays["visible_bias"],
            arrays["hidden_bias"],
            meta["sigma"],
        )
    if variant == SRBM:
        return Srbm(
            arrays["weights"],
            arrays["visible_bias"],
            arrays["hidden_bias"],
            arrays["lateral"],
        )
    raise ModelError(f"unknown variant {variant!r} in {path}")
