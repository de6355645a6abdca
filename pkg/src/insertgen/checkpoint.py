"""Parameter checkpoints: a text manifest followed by raw float32 payloads.

Layout of a .ckpt file:

    CKPT 1 <n_tensors>\n
    <name> <d0>x<d1>x... <byte_offset>\n      (one line per tensor)
    END\n
    <payload: little-endian float32, concatenated in manifest order>

Offsets are relative to the first payload byte. Values are stored as
float32, so a save/load round trip truncates float64 parameters; loading
returns float64 arrays with that truncation applied. Scalars use the shape
string "-".

A companion key=value text file records the model configuration and kind.
"""

from __future__ import annotations

import numpy as np


class CheckpointError(Exception):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    names = list(params)
    header_lines = [f"CKPT 1 {len(names)}"]
    offset = 0
    blobs = []
    for name in names:
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        src = np.asarray(params[name])
        # ascontiguousarray promotes 0-d to 1-d; the manifest keeps the true shape
        arr = np.ascontiguousarray(src, dtype="<f4")
        shape = "x".join(str(d) for d in src.shape) or "-"
        header_lines.append(f"{name} {shape} {offset}")
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header_lines.append("END")
    with open(path, "wb") as f:
        f.write(("\n".join(header_lines) + "\n").encode("ascii"))
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0 or not raw[:nl].startswith(b"CKPT 1 "):
        raise CheckpointError(f"{path}: not a checkpoint file")
    count = int(raw[:nl].split()[2])
    entries = []
    pos = nl + 1
    for _ in range(count):
        nl = raw.find(b"\n", pos)
        name, shape_s, offset_s = raw[pos:nl].decode("ascii").split(" ")
        shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split("x"))
        entries.append((name, shape, int(offset_s)))
        pos = nl + 1
    nl = raw.find(b"\n", pos)
    if raw[pos:nl] != b"END":
        raise CheckpointError(f"{path}: manifest not terminated by END")
    payload = raw[nl + 1 :]
    params: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
        params[name] = arr.reshape(shape).astype(np.float64)
    if len(params) != count:
        raise CheckpointError(f"{path}: duplicate tensor names in manifest")
    return params


def save_manifest(path, fields: dict[str, str]) -> None:
    with open(path, "w") as f:
        for k, v in fields.items():
            if "=" in k or "\n" in k or "\n" in str(v):
                raise CheckpointError(f"bad manifest field {k!r}")
            f.write(f"{k}={v}\n")


def load_manifest(path) -> dict[str, str]:
    fields: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            k, sep, v = line.partition("=")
            if not sep:
                raise CheckpointError(f"{path}:{lineno}: expected key=value")
            fields[k] = v
    return fields
