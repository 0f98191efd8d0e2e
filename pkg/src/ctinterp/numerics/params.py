"""Named parameter storage and the ``IFCK`` checkpoint container."""
from __future__ import annotations

import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np
from filelock import FileLock

from .tensor import DEFAULT_DTYPE, Tensor

MAGIC = b"IFCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file, or a checkpoint that does not fit a ParamStore."""


class ParamStore:
    """Ordered mapping of parameter name to a gradient-carrying :class:`Tensor`.

    Insertion order is preserved so optimizer state lines up across runs.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._entries: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.asarray(value)
        dtype = value.dtype if np.issubdtype(value.dtype, np.floating) else DEFAULT_DTYPE
        t = Tensor(np.array(value, dtype=dtype), requires_grad=True, name=name)
        t.zero_grad()
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = np.zeros_like(t.data)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore(self.rng_seed)
        for name, t in self._entries.items():
            out.add(name, t.data.astype(dtype or t.dtype, copy=True))
        return out

    def frozen(self) -> "ParamStore":
        """A view sharing values but excluded from gradient recording."""
        out = ParamStore(self.rng_seed)
        for name, t in self._entries.items():
            view = Tensor(t.data, requires_grad=False, name=name)
            view.grad = np.zeros_like(t.data)
            out._entries[name] = view
        return out

    def grad_norms(self) -> dict[str, float]:
        return {name: float(np.linalg.norm(t.grad)) for name, t in self._entries.items()}

    def assert_compatible(self, other: "ParamStore") -> None:
        for name, t in self._entries.items():
            if name not in other:
                raise CheckpointError(f"checkpoint is missing entry {name!r}")
            if other[name].shape != t.shape:
                raise CheckpointError(f"entry {name!r}: checkpoint shape {other[name].shape} != model shape {t.shape}")
        extra = [n for n in other if n not in self._entries]
        if extra:
            raise CheckpointError(f"checkpoint has unexpected entries {extra}")

    def load_values(self, other: "ParamStore") -> None:
        self.assert_compatible(other)
        for name, t in self._entries.items():
            t.data[...] = other[name].data

    def equal(self, other: "ParamStore") -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        for name, t in self._entries.items():
            o = other[name]
            if t.shape != o.shape or t.dtype != o.dtype or t.data.tobytes() != o.data.tobytes():
                return False
        return True


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DEFAULT_DTYPE)


# --------------------------------------------------------------------------
# checkpoint container


def _encode(store: ParamStore) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, t in store.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(store: ParamStore, path: str | os.PathLike) -> None:
    """Write ``store`` atomically; a sibling lock file guards concurrent writers."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = _encode(store)
    with FileLock(str(path) + ".lock"):
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def load_checkpoint(path: str | os.PathLike) -> ParamStore:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an IFCK checkpoint (bad magic)")
    if len(blob) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    store = ParamStore()
    pos = 8
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(blob):
                raise CheckpointError(f"{path}: entry {name!r} payload truncated")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            store.add(name, arr.astype(np.float32))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated entry table ({exc})") from None
    return store
