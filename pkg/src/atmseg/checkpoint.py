"""Binary checkpoint container.

Layout (all integers little-endian): magic ``SGV2``, version u32, tensor
count u32, then per tensor a u32 name length, UTF-8 name, u32 rank, u64
dims, and float32 data.  Compute stays float64; float32 is storage
precision only.  A config echo and the random-generator state travel as
reserved-name tensors when supplied.
"""

from __future__ import annotations

import struct

import numpy as np

from atmseg.tensor import ContractViolation, Rng, Tensor

MAGIC = b"SGV2"
VERSION = 1
CONFIG_KEY = "__config__"
RNG_KEY = "__rng__"


class FormatError(ValueError):
    """Checkpoint blob does not parse."""


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    out = [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
    for d in arr.shape:
        out.append(struct.pack("<Q", d))
    out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(table, path: str, config_text: str | None = None,
                    rng: Rng | None = None):
    """Write named tensors (a dict or a model with named_parameters)."""
    if hasattr(table, "named_parameters"):
        table = table.named_parameters()
    items = []
    for name, value in table.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        items.append((name, np.asarray(arr, dtype=np.float64)))
    if config_text is not None:
        echo = np.frombuffer(config_text.encode("utf-8"), dtype=np.uint8)
        items.append((CONFIG_KEY, echo.astype(np.float64)))
    if rng is not None:
        words = rng.state_words()
        limbs = np.zeros((words.size, 4), dtype=np.float64)
        for j in range(4):
            limbs[:, j] = ((words >> np.uint64(16 * j)) & np.uint64(0xFFFF)).astype(np.float64)
        items.append((RNG_KEY, limbs))
    blob = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(items))]
    for name, arr in items:
        blob.append(_pack_tensor(name, arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


class _Cursor:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"truncated checkpoint: reading {what} at byte {self.pos}"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_checkpoint(path: str):
    """Read back (tensor table as float64 arrays, config text, Rng or None)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    cur = _Cursor(blob)
    if cur.take(4, "magic") != MAGIC:
        raise FormatError("bad magic; not a checkpoint file")
    version = cur.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    count = cur.u32("tensor count")
    table = {}
    for _ in range(count):
        nlen = cur.u32("name length")
        name = cur.take(nlen, "name").decode("utf-8")
        rank = cur.u32("rank")
        dims = tuple(cur.u64("dim") for _ in range(rank))
        n = 1
        for d in dims:
            n *= d
        raw = cur.take(4 * n, f"data of {name}")
        table[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
    if cur.pos != len(blob):
        raise FormatError(f"trailing bytes after tensor table (byte {cur.pos})")

    config_text = None
    echo = table.pop(CONFIG_KEY, None)
    if echo is not None:
        config_text = bytes(echo.astype(np.uint8)).decode("utf-8")
    rng = None
    limbs = table.pop(RNG_KEY, None)
    if limbs is not None:
        words = np.zeros(limbs.shape[0], dtype=np.uint64)
        for j in range(4):
            words |= limbs[:, j].astype(np.uint64) << np.uint64(16 * j)
        rng = Rng.from_state_words(words)
    return table, config_text, rng


def assign_parameters(model, table):
    """Copy a loaded tensor table into a model's parameters by name."""
    params = model.named_parameters()
    missing = set(params) - set(table)
    extra = set(table) - set(params)
    if missing or extra:
        raise FormatError(
            f"parameter names do not match (missing {sorted(missing)[:3]}..., "
            f"extra {sorted(extra)[:3]}...)" if len(missing) + len(extra) > 6
            else f"parameter names do not match (missing {sorted(missing)}, "
                 f"extra {sorted(extra)})"
        )
    for name, tensor in params.items():
        arr = table[name]
        if arr.shape != tensor.data.shape:
            raise FormatError(
                f"shape mismatch for {name}: {arr.shape} vs {tensor.data.shape}"
            )
        tensor.data = np.ascontiguousarray(arr, dtype=np.float64)
    return model
