"""Single-file tensor container used for model checkpoints and optimiser state.

Layout::

    8 bytes   magic b"SLEEPCMT"
    4 bytes   container version (uint32, little-endian)
    8 bytes   header length in bytes (uint64, little-endian)
    header    UTF-8 JSON: {"format", "kind", "config", "tensors": [{name, shape, offset}], "meta"}
    payload   float32 little-endian values of every tensor, in header order;
              ``offset`` counts float32 elements from the payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, InputError
from .model import ModelConfig, build_model
from .nn import Module

MAGIC = b"SLEEPCMT"
CONTAINER_VERSION = 1


def write_container(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, offset = [], 0
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size)
    head = dict(header, tensors=entries)
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CONTAINER_VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise InputError(f"{path} is not a sleepcmt checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CONTAINER_VERSION:
        raise InputError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f4", offset=20 + hlen)
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arrays[t["name"]] = payload[t["offset"]:t["offset"] + n].reshape(t["shape"]).astype(np.float32)
    return header, arrays


def save_model(path: str | Path, model: Module, meta: dict | None = None) -> None:
    header = {
        "format": "sleepcmt-model",
        "package_version": __version__,
        "kind": model.kind,
        "config": model.cfg.to_dict(),
        "meta": meta or {},
    }
    write_container(path, header, model.state_dict())


def load_model(path: str | Path, expect_config: ModelConfig | None = None, expect_kind: str | None = None):
    """Rebuild a model from a checkpoint; returns ``(model, meta)``.

    Raises ConfigError when the stored config or kind differs from the
    expected one.
    """
    header, arrays = read_container(path)
    if header.get("format") != "sleepcmt-model":
        raise InputError(f"{path} is not a model checkpoint")
    cfg = ModelConfig.from_dict(header["config"])
    if expect_config is not None and cfg.to_dict() != expect_config.to_dict():
        diff = {k: (v, expect_config.to_dict()[k]) for k, v in cfg.to_dict().items()
                if expect_config.to_dict()[k] != v}
        raise ConfigError(f"checkpoint config does not match (stored, expected): {diff}")
    if expect_kind is not None and header["kind"] != expect_kind:
        raise ConfigError(f"checkpoint holds a {header['kind']} model, expected {expect_kind}")
    model = build_model(header["kind"], cfg)
    model.load_state_dict(arrays)
    model.eval()
    return model, header.get("meta", {})
