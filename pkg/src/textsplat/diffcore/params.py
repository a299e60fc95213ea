"""Named parameter storage, deterministic initialization, checkpoint IO.

Every trainable array lives in a ParameterStore under a hierarchical name
("ttg.xy.block0.conv1.weight"). Initial values are drawn from a per-entry
RNG keyed on (store seed, entry name), so re-initializing with the same
seed reproduces every value bit-for-bit regardless of registration order.

Checkpoint format (little-endian throughout):
  magic "ASPT", version u32, then one record per entry:
  name_len u32, name bytes (utf-8), dtype u8 (0=f32, 1=f64), rank u32,
  extents u32[rank], payload scalars. Optimizer moment buffers are ordinary
  entries under the reserved "opt." prefix.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterator

import numpy as np

from .tensor import Tensor

_MAGIC = b"ASPT"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

OPT_PREFIX = "opt."


def _entry_seed(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{seed}|{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _draw(kind: str, shape: tuple, fan_in: int | None, rng: np.random.Generator, dtype) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape, dtype=dtype)
    if kind == "ones":
        return np.ones(shape, dtype=dtype)
    if kind == "uniform_fanin":
        if not fan_in or fan_in <= 0:
            raise ValueError(f"uniform_fanin initializer needs fan_in > 0, got {fan_in}")
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    raise ValueError(f"unknown initializer kind {kind!r}")


class ParameterStore:
    """Ordered map from hierarchical names to trainable tensors."""

    def __init__(self, seed: int, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, Tensor] = {}
        self._init_spec: dict[str, tuple] = {}

    def param(self, name: str, shape, init: str = "zeros", fan_in: int | None = None) -> Tensor:
        """Register (or fetch) a trainable entry; values drawn from init_spec."""
        shape = tuple(int(s) for s in shape)
        if name in self._entries:
            t = self._entries[name]
            if t.shape != shape:
                raise ValueError(f"parameter {name!r} re-registered with shape {shape}, existing {t.shape}")
            return t
        if name.startswith(OPT_PREFIX):
            raise ValueError(f"parameter name {name!r} uses the reserved {OPT_PREFIX!r} prefix")
        rng = np.random.Generator(np.random.PCG64(_entry_seed(self.seed, name)))
        t = Tensor(_draw(init, shape, fan_in, rng, self.dtype), requires_grad=True)
        self._entries[name] = t
        self._init_spec[name] = (init, shape, fan_in)
        return t

    def buffer(self, name: str, shape, dtype=None) -> Tensor:
        """Register (or fetch) a non-trainable entry (optimizer state etc.)."""
        shape = tuple(int(s) for s in shape)
        if name in self._entries:
            return self._entries[name]
        t = Tensor(np.zeros(shape, dtype=dtype or self.dtype), requires_grad=False)
        self._entries[name] = t
        self._init_spec[name] = ("zeros", shape, None)
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def names(self) -> list[str]:
        return list(self._entries.keys())

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self._entries.items():
            if not name.startswith(OPT_PREFIX):
                yield name, t

    def reinitialize(self, seed: int | None = None) -> None:
        """Redraw every entry from its init_spec; same seed gives identical bits."""
        if seed is not None:
            self.seed = int(seed)
        for name, (kind, shape, fan_in) in self._init_spec.items():
            rng = np.random.Generator(np.random.PCG64(_entry_seed(self.seed, name)))
            self._entries[name].data = _draw(kind, shape, fan_in, rng, self._entries[name].dtype)
            self._entries[name].grad = None

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    # -- checkpoint IO ---------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", _VERSION))
            for name, t in self._entries.items():
                raw = name.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                code = _DTYPE_CODES[t.dtype]
                f.write(struct.pack("<BI", code, t.ndim))
                for ext in t.shape:
                    f.write(struct.pack("<I", ext))
                f.write(np.ascontiguousarray(t.data, dtype=_CODE_DTYPES[code]).tobytes())

    def load(self, path) -> None:
        """Load a checkpoint into the registered entries; shapes must match."""
        records = read_checkpoint(path)
        for name, arr in records.items():
            if name not in self._entries:
                if name.startswith(OPT_PREFIX):
                    self.buffer(name, arr.shape, dtype=arr.dtype)
                else:
                    raise ValueError(f"checkpoint entry {name!r} is not registered in this store")
            t = self._entries[name]
            if t.shape != arr.shape:
                raise ValueError(f"checkpoint entry {name!r} has shape {arr.shape}, store expects {t.shape}")
            t.data = arr
            t.grad = None
        missing = [n for n in self._entries if n not in records and not n.startswith(OPT_PREFIX)]
        if missing:
            raise ValueError(f"checkpoint is missing entries: {missing[:4]}{'...' if len(missing) > 4 else ''}")


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Read all records of an ASPT checkpoint (EOF-terminated)."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}, expected {_MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = f.read(nlen).decode("utf-8")
            code, rank = struct.unpack("<BI", f.read(5))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
            dt = _CODE_DTYPES[code]
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(count * dt.itemsize), dtype=dt).reshape(shape)
            out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return out
