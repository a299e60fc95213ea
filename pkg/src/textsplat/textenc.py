"""Deterministic word-level prompt embeddings.

Stands in for a frozen pretrained text encoder: each distinct token maps
through a seeded hash to a fixed unit-norm row, so embeddings are a pure
function of (prompt, L, D, seed) while keeping the word-level structure
the attention layers consume. Externally computed embeddings can be
imported from a TEMB container and used interchangeably.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass

import numpy as np

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_MAGIC = b"TEMB"
_VERSION = 1

_BEGIN = "\x00begin"
_PAD = "\x00pad"


@dataclass
class TextEmbedding:
    """L x D matrix of word-level embeddings for one prompt."""

    matrix: np.ndarray

    @property
    def length(self) -> int:
        return self.matrix.shape[0]

    @property
    def width(self) -> int:
        return self.matrix.shape[1]


@dataclass
class PromptSet:
    """Unique prompts with stable integer ids (position in the list)."""

    prompts: list

    def __post_init__(self):
        if not self.prompts:
            raise ValueError("PromptSet needs at least one prompt")
        if len(set(self.prompts)) != len(self.prompts):
            raise ValueError("PromptSet prompts must be unique")

    def __len__(self) -> int:
        return len(self.prompts)

    def __getitem__(self, idx: int) -> str:
        return self.prompts[idx]


def tokenize(prompt: str) -> list:
    return _TOKEN_RE.findall(prompt.lower())


def _token_row(token: str, width: int, seed: int, dtype) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}|{token}".encode(), digest_size=8).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    v = rng.standard_normal(width)
    return (v / np.linalg.norm(v)).astype(dtype)


def embed(prompt: str, length: int, width: int, seed: int, dtype=np.float32) -> TextEmbedding:
    """Embed one prompt as an L x D matrix.

    Row 0 is a begin marker; token rows follow, truncated to fit; remaining
    rows are a fixed pad vector (unit-norm, distinct from zero).
    """
    if not prompt.strip():
        raise ValueError("cannot embed an empty prompt")
    tokens = tokenize(prompt)
    rows = [_token_row(_BEGIN, width, seed, dtype)]
    for tok in tokens[: length - 1]:
        rows.append(_token_row(tok, width, seed, dtype))
    pad = _token_row(_PAD, width, seed, dtype)
    while len(rows) < length:
        rows.append(pad)
    return TextEmbedding(np.stack(rows, axis=0))


def augment_direction(prompt: str, azimuth: float) -> str:
    """Append a view suffix by azimuth sector (front/back/side).

    Sectors are half-open toward increasing azimuth with boundaries at
    45/135/225/315 degrees: front is [315,45), back is [135,225), the two
    remaining quadrants are side.
    """
    az = float(azimuth) % 360.0
    if az < 45.0 or az >= 315.0:
        suffix = "front view"
    elif 135.0 <= az < 225.0:
        suffix = "back view"
    else:
        suffix = "side view"
    return f"{prompt}, {suffix}"


def interpolate(a: TextEmbedding, b: TextEmbedding, t: float) -> TextEmbedding:
    """Rowwise linear interpolation (1-t)*a + t*b; endpoints exact."""
    if a.matrix.shape != b.matrix.shape:
        raise ValueError(f"embedding shapes differ: {a.matrix.shape} vs {b.matrix.shape}")
    if t == 0.0:
        return TextEmbedding(a.matrix.copy())
    if t == 1.0:
        return TextEmbedding(b.matrix.copy())
    return TextEmbedding(((1.0 - t) * a.matrix + t * b.matrix).astype(a.matrix.dtype))


def write_embeddings(path, embeddings: dict) -> None:
    """Write a {prompt_id: TextEmbedding} map as a TEMB container (f32)."""
    if not embeddings:
        raise ValueError("nothing to write")
    shapes = {e.matrix.shape for e in embeddings.values()}
    if len(shapes) != 1:
        raise ValueError(f"embeddings disagree on (L, D): {sorted(shapes)}")
    (length, width) = shapes.pop()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIII", _VERSION, len(embeddings), length, width))
        for pid, emb in embeddings.items():
            f.write(struct.pack("<I", int(pid)))
            f.write(np.ascontiguousarray(emb.matrix, dtype="<f4").tobytes())


def read_embeddings(path, length: int | None = None, width: int | None = None) -> dict:
    """Read a TEMB container; optionally validate (L, D) against a config."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad embedding container magic {magic!r}, expected {_MAGIC!r}")
        version, count, file_l, file_d = struct.unpack("<IIII", f.read(16))
        if version != _VERSION:
            raise ValueError(f"unsupported embedding container version {version}")
        if length is not None and file_l != length:
            raise ValueError(f"embedding container has L={file_l}, config expects L={length}")
        if width is not None and file_d != width:
            raise ValueError(f"embedding container has D={file_d}, config expects D={width}")
        out = {}
        for _ in range(count):
            (pid,) = struct.unpack("<I", f.read(4))
            arr = np.frombuffer(f.read(file_l * file_d * 4), dtype="<f4")
            out[pid] = TextEmbedding(arr.reshape(file_l, file_d).astype(np.float32, copy=True))
        return out
