"""Binary tensor checkpoints with a JSON sidecar for optimizer state.

Layout: 4-byte magic, u32 version, u32 tensor count, then per tensor
(u32 name length, utf-8 name, u32 rank, rank x u32 dims, u32 dtype code),
followed by every payload as little-endian float32 in table order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import InputError

VERSION = 1
F32 = 0
MAGIC_NET = b"UVFM"
MAGIC_ADAPTER = b"UVLA"


def write_tensors(path, tensors, magic=MAGIC_NET):
    """`tensors`: ordered mapping name -> tensor/array.  Values are stored as float32."""
    # np.asarray with order="C" keeps 0-d tensors 0-d (ascontiguousarray would promote them)
    arrays = [(name, np.asarray(t.detach().cpu() if torch.is_tensor(t) else t, dtype="<f4", order="C"))
              for name, t in tensors.items()]
    head = [magic, struct.pack("<II", VERSION, len(arrays))]
    for name, a in arrays:
        raw = name.encode("utf-8")
        head.append(struct.pack("<I", len(raw)) + raw)
        head.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        head.append(struct.pack("<I", F32))
    with open(path, "wb") as fh:
        fh.write(b"".join(head))
        for _, a in arrays:
            fh.write(a.tobytes(order="C"))


def read_tensors(path, magic=MAGIC_NET):
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise InputError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    off = 12
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        dims = struct.unpack_from(f"<{rank}I", data, off + 4)
        off += 4 + 4 * rank
        (code,) = struct.unpack_from("<I", data, off)
        off += 4
        if code != F32:
            raise InputError(f"{path}: tensor {name} has unsupported dtype code {code}")
        table.append((name, dims))
    out = {}
    for name, dims in table:
        size = int(np.prod(dims)) if dims else 1
        a = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        out[name] = torch.from_numpy(a.astype(np.float32))
    if off != len(data):
        raise InputError(f"{path}: {len(data) - off} trailing bytes")
    return out


def save_net(path, net, optimizer=None, step=0, extra=None):
    path = Path(path)
    write_tensors(path, net.state_dict(), MAGIC_NET)
    sidecar = {"step": int(step), "extra": extra or {}}
    if optimizer is not None:
        sidecar["optimizer"] = _optimizer_json(optimizer, net)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_net(path, net):
    state = read_tensors(path, MAGIC_NET)
    net.load_state_dict(state)
    side = Path(path).with_suffix(".json")
    return json.loads(side.read_text()) if side.exists() else {}


def save_adapter(path, adapter):
    path = Path(path)
    tensors = {}
    for name in adapter.layers:
        key = name.replace(".", "__")
        tensors[f"{name}.down"] = adapter.down[key]
        tensors[f"{name}.up"] = adapter.up[key]
    write_tensors(path, tensors, MAGIC_ADAPTER)
    meta = {"rank": adapter.rank, "alpha": adapter.alpha, "layers": adapter.layers}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_adapter(path, net):
    from .personalize import AdapterParams

    meta = json.loads(Path(path).with_suffix(".json").read_text())
    adapter = AdapterParams(net, rank=meta["rank"], alpha=meta["alpha"], layers=meta["layers"])
    tensors = read_tensors(path, MAGIC_ADAPTER)
    with torch.no_grad():
        for name in adapter.layers:
            key = name.replace(".", "__")
            adapter.down[key].copy_(tensors[f"{name}.down"])
            adapter.up[key].copy_(tensors[f"{name}.up"])
    return adapter


def _optimizer_json(optimizer, net):
    """Adam moments keyed by parameter name, as nested lists (small nets only)."""
    names = {id(p): n for n, p in net.named_parameters()}
    state = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            s = optimizer.state.get(p)
            if not s:
                continue
            state[names.get(id(p), str(id(p)))] = {
                "step": float(s["step"]),
                "exp_avg": s["exp_avg"].flatten().tolist(),
                "exp_avg_sq": s["exp_avg_sq"].flatten().tolist(),
            }
    hyper = {k: v for k, v in optimizer.param_groups[0].items() if k != "params" and isinstance(v, (int, float, tuple, bool))}
    return {"hyper": hyper, "state": state}


def restore_optimizer(optimizer, net, payload):
    params = dict(net.named_parameters())
    for name, s in payload.get("state", {}).items():
        p = params[name]
        optimizer.state[p] = {
            "step": torch.tensor(s["step"]),
            "exp_avg": torch.tensor(s["exp_avg"], dtype=p.dtype).reshape(p.shape),
            "exp_avg_sq": torch.tensor(s["exp_avg_sq"], dtype=p.dtype).reshape(p.shape),
        }
