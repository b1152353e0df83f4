"""Binary weight checkpoints (``SDMW``) with a JSON sidecar."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from sdmkit.nn.network import Network

MAGIC = b"SDMW"
VERSION = 1


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_weights(net: Network, path, meta: dict | None = None) -> None:
    """Layer-ordered little-endian f32 blobs; parameters then buffers per layer."""
    state = net.state()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(state)))
        for name, arr in state:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    side = {"network": net.spec(), "seed": net.seed}
    side.update(meta or {})
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def read_blobs(path) -> list[tuple[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an SDMW checkpoint")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        out.append((name, arr.astype(np.float32)))
    return out


def load_weights(path) -> tuple[Network, dict]:
    meta = json.loads(sidecar_path(path).read_text())
    net = Network.from_spec(meta["network"], seed=meta.get("seed", 0))
    net.load_state([arr for _, arr in read_blobs(path)])
    return net, meta
