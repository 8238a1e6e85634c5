"""Binary tensor files and config hashing.

A tensor file is a single JSON header line (dtype, shape) followed by the raw
little-endian array bytes.
"""

import hashlib
import json

import numpy as np


def write_tensor(path, array):
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    header = json.dumps({"dtype": dtype.str, "shape": list(array.shape)})
    with open(path, "wb") as f:
        f.write(header.encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_tensor(path):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        data = f.read()
    array = np.frombuffer(data, dtype=np.dtype(header["dtype"]))
    return array.reshape(header["shape"]).copy()


def config_hash(config: dict) -> str:
    """Stable hash of a JSON-serializable config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)
