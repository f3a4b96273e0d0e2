"""Small shared helpers: deterministic seed derivation and array blob files."""

import hashlib
import json
from pathlib import Path

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a sequence of labels (strings, ints)."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def save_arrays(path, arrays: list) -> Path:
    """Write a list of float64 arrays as a JSON shape manifest plus raw payload."""
    manifest = {"shapes": [list(a.shape) for a in arrays], "dtype": "f64"}
    p = Path(path)
    with open(p, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8"))
        fh.write(b"\n")
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return p


def load_arrays(path) -> list:
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n")
    manifest = json.loads(raw[:sep].decode("utf-8"))
    payload = raw[sep + 1:]
    arrays = []
    offset = 0
    for shape in manifest["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").reshape(shape)
        arrays.append(arr.astype(np.float64))
        offset += nbytes
    return arrays
