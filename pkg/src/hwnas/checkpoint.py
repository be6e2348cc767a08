"""Text checkpoint container for named arrays.

Format (one record per line, space separated):

    hwnas-checkpoint v1
    <name> <dtype> <ndim> <d1> ... <dk> <base64 little-endian raw bytes>

Names must not contain whitespace. Values round-trip bit-exactly; saving a
loaded checkpoint reproduces the file byte for byte (records are written in
sorted name order).
"""

from __future__ import annotations

import base64
from pathlib import Path

import numpy as np

MAGIC = "hwnas-checkpoint v1"


def save_state(path, state: dict[str, np.ndarray]) -> None:
    lines = [MAGIC]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        if " " in name:
            raise ValueError(f"checkpoint name may not contain spaces: {name!r}")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        payload = base64.b64encode(le.tobytes()).decode("ascii")
        dims = " ".join(str(d) for d in arr.shape)
        rec = f"{name} {arr.dtype.name} {arr.ndim}"
        if dims:
            rec += f" {dims}"
        lines.append(f"{rec} {payload}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_state(path) -> dict[str, np.ndarray]:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != MAGIC:
        raise ValueError(f"{path}: not a {MAGIC!r} file")
    state: dict[str, np.ndarray] = {}
    for line in text[1:]:
        if not line.strip():
            continue
        parts = line.split(" ")
        name, dtype_name, ndim = parts[0], parts[1], int(parts[2])
        dims = tuple(int(d) for d in parts[3:3 + ndim])
        payload = parts[3 + ndim]
        dt = np.dtype(dtype_name).newbyteorder("<")
        arr = np.frombuffer(base64.b64decode(payload), dtype=dt)
        state[name] = arr.reshape(dims).astype(np.dtype(dtype_name))
    return state
