"""GLAB1 checkpoint files: named float64 arrays in one binary blob.

Layout: the magic string ``GLAB1``, one compact JSON header line terminated
by ``\\n`` (``{"names": [...], "shapes": [...], "dtype": "f64"}``), then the
raw little-endian row-major payloads concatenated in header order.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

MAGIC = b"GLAB1"


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write named arrays atomically (temp file + rename)."""
    names = list(named.keys())
    arrays = [np.asarray(named[n], dtype=np.float64, order="C") for n in names]
    header = json.dumps(
        {"names": names, "shapes": [list(a.shape) for a in arrays], "dtype": "f64"},
        separators=(",", ":"),
    )
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(header.encode("utf-8"))
            fh.write(b"\n")
            for a in arrays:
                fh.write(a.astype("<f8", copy=False).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a GLAB1 file (magic {magic!r})")
        header_bytes = bytearray()
        while True:
            b = fh.read(1)
            if not b:
                raise ValueError(f"{path}: truncated header")
            if b == b"\n":
                break
            header_bytes.extend(b)
        header = json.loads(header_bytes.decode("utf-8"))
        if header.get("dtype") != "f64":
            raise ValueError(f"{path}: unsupported dtype {header.get('dtype')!r}")
        out: dict[str, np.ndarray] = {}
        for name, shape in zip(header["names"], header["shapes"]):
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
        return out
