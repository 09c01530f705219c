"""Parameter containers, dense layers and PVTM checkpoints."""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ModelError, ModelMismatchError


class Module:
    """Base class; parameters are discovered from attributes recursively."""

    def named_parameters(self, prefix: str = ""):
        out = OrderedDict()
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        ad.zero_grad(self.parameters())

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ModelMismatchError(
                f"parameter names differ: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}"
            )
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ModelMismatchError(f"parameter {k}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.dtype).copy()


def param(data, name=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else ad.kaiming_uniform(rng, d_in, (d_in, d_out))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class MLP(Module):
    """Stack of Linear layers with relu between them (not after the last)."""

    def __init__(self, dims, rng: np.random.Generator, zero_last: bool = False, final_relu: bool = False):
        self.layers = [
            Linear(a, b, rng, zero=zero_last and i == len(dims) - 2)
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]
        self.final_relu = final_relu

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = ad.relu(x)
        return x


def zero_parameters(module: Module) -> None:
    for p in module.parameters():
        p.data[...] = 0


# ------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"PVTM"
CKPT_VERSION = 1


def save_checkpoint(path, module: Module, meta: str = "") -> None:
    """Write parameters as float32 with an optional UTF-8 metadata block."""
    params = module.named_parameters()
    meta_b = meta.encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(meta_b)), meta_b,
              struct.pack("<I", len(params))]
    for name, p in params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def read_checkpoint(path):
    """Return (metadata text, ordered name -> float32 array)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CKPT_MAGIC:
        raise ModelError(f"{path}: not a PVTM checkpoint")
    try:
        version, mlen = struct.unpack_from("<BI", data, 4)
        if version != CKPT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {version}")
        pos = 9
        meta = data[pos:pos + mlen].decode("utf-8")
        pos += mlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        state = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 4
            if pos + size > len(data):
                raise ModelError(f"{path}: truncated parameter {name}")
            state[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
            pos += size
    except struct.error:
        raise ModelError(f"{path}: truncated checkpoint") from None
    if pos != len(data):
        raise ModelError(f"{path}: trailing bytes in checkpoint")
    return meta, state


def round_to_float32(module: Module) -> None:
    """Round parameters to the precision stored in checkpoints."""
    for p in module.parameters():
        p.data = p.data.astype(np.float32).astype(p.dtype)
