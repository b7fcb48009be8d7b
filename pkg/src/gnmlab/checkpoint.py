"""Trained-parameter checkpoints: text header + raw little-endian float64.

Only trainable parameters are stored; a frozen backbone is regenerated from
its fixed seed at load time by whoever rebuilds the model. The header lists
names and shapes in order, so the payload layout is self-describing:

    gnmlab-checkpoint v1
    params <count>
    <name> <dim0> <dim1> ...
    ...
    end-header
    <float64 little-endian payload in header order>
"""

from __future__ import annotations

import numpy as np

from gnmlab.autodiff import ParamSet

__all__ = ["save_checkpoint", "load_checkpoint"]

MAGIC = "gnmlab-checkpoint v1"


def save_checkpoint(params: ParamSet, path) -> None:
    """Write the ParamSet to ``path``; byte-exact round-trip with load_checkpoint."""
    lines = [MAGIC, f"params {len(params)}"]
    for name, t in params.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"parameter name {name!r} contains whitespace; cannot checkpoint")
        lines.append(" ".join([name, *(str(d) for d in t.data.shape)]))
    lines.append("end-header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(params.to_bytes())


def load_checkpoint(path, requires_grad: bool = True) -> ParamSet:
    """Read a checkpoint back into a fresh ParamSet (same names, order, bytes)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"end-header\n"
    cut = blob.find(marker)
    if cut < 0:
        raise ValueError(f"{path}: not a checkpoint (missing end-header)")
    header = blob[:cut].decode("ascii").splitlines()
    payload = blob[cut + len(marker):]
    if not header or header[0] != MAGIC:
        raise ValueError(f"{path}: bad magic line {header[0] if header else ''!r}")
    if len(header) < 2 or not header[1].startswith("params "):
        raise ValueError(f"{path}: missing 'params <count>' line")
    count = int(header[1].split()[1])
    specs = header[2:]
    if len(specs) != count:
        raise ValueError(f"{path}: header promises {count} params, lists {len(specs)}")
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for line in specs:
        parts = line.split()
        shapes.append((parts[0], tuple(int(d) for d in parts[1:])))
    total = sum(int(np.prod(s, dtype=np.int64)) for _, s in shapes)
    flat = np.frombuffer(payload, dtype="<f8")
    if flat.size != total:
        raise ValueError(f"{path}: payload holds {flat.size} floats, header needs {total}")
    arrays, lo = {}, 0
    for name, shape in shapes:
        k = int(np.prod(shape, dtype=np.int64))
        arrays[name] = flat[lo:lo + k].reshape(shape).astype(np.float64)
        lo += k
    return ParamSet.from_arrays(arrays, requires_grad=requires_grad)
