"""Named-tensor binary container.

Layout: a 16-character zero-padded ASCII decimal giving the header length,
a newline, the JSON header listing {name, dtype, shape, offset} per tensor,
then the little-endian raw payloads at the stated offsets (relative to the
end of the header).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import PersistenceError

_PREFIX_LEN = 17  # 16 digits + newline
_DTYPE_CODES = {torch.float32: "f4", torch.float64: "f8", torch.int64: "i8"}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_tensor_file(path, tensors: dict[str, torch.Tensor]) -> None:
    entries = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        tensor = tensors[name].detach().contiguous()
        code = _DTYPE_CODES.get(tensor.dtype)
        if code is None:
            raise PersistenceError(f"unsupported dtype {tensor.dtype} for tensor {name!r}")
        raw = tensor.cpu().numpy().astype(f"<{code}", copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(tensor.shape), "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(f"{len(header):016d}\n".encode("ascii"))
            f.write(header)
            for raw in payloads:
                f.write(raw)
    except OSError as exc:
        raise PersistenceError(f"cannot write tensor file {path}: {exc}") from exc


def read_tensor_file(path) -> dict[str, torch.Tensor]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read tensor file {path}: {exc}") from exc
    try:
        header_len = int(blob[: _PREFIX_LEN - 1])
        header = json.loads(blob[_PREFIX_LEN : _PREFIX_LEN + header_len])
        body = blob[_PREFIX_LEN + header_len :]
        tensors = {}
        for entry in header["tensors"]:
            dtype = _CODE_DTYPES[entry["dtype"]]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            arr = np.frombuffer(
                body, dtype=f"<{entry['dtype']}", count=count, offset=start
            ).reshape(shape)
            tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(dtype)
        return tensors
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise PersistenceError(f"malformed tensor file {path}: {exc}") from exc
