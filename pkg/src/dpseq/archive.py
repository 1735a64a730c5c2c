"""Named-tensor archive.

Layout::

    dpseq-archive <version>
    meta <single-line JSON>
    tensor <name> float32 <d0>x<d1>x...
    ...
    end
    <raw little-endian float32 payloads, in header order>

Scalars use the shape token ``-``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MAGIC = "dpseq-archive"
_LE_F32 = np.dtype("<f4")


class ArchiveError(ValueError):
    pass


class CorruptArchiveError(ArchiveError):
    pass


class ArchiveVersionError(ArchiveError):
    pass


def _shape_token(shape: tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape) if shape else "-"


def _parse_shape(token: str) -> tuple[int, ...]:
    if token == "-":
        return ()
    return tuple(int(d) for d in token.split("x"))


def save_archive(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    lines = [f"{MAGIC} {FORMAT_VERSION}", "meta " + json.dumps(meta or {}, sort_keys=True)]
    payloads = []
    for name, arr in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise ArchiveError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr, dtype=_LE_F32, order="C")
        lines.append(f"tensor {name} float32 {_shape_token(arr.shape)}")
        payloads.append(arr.tobytes())
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for p in payloads:
            fh.write(p)
    os.replace(tmp, path)


def load_archive(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive, returning ``(tensors, meta)``.

    Raises :class:`CorruptArchiveError` on a malformed header or a payload
    that is shorter or longer than the header declares.
    """
    raw = Path(path).read_bytes()
    entries: list[tuple[str, tuple[int, ...]]] = []
    meta: dict = {}
    pos = 0
    first = True
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise CorruptArchiveError(f"{path}: header not terminated")
        line = raw[pos:nl].decode("utf-8", errors="replace")
        pos = nl + 1
        if first:
            parts = line.split()
            if len(parts) != 2 or parts[0] != MAGIC:
                raise CorruptArchiveError(f"{path}: not a dpseq archive")
            try:
                version = int(parts[1])
            except ValueError:
                raise CorruptArchiveError(f"{path}: bad version field {parts[1]!r}") from None
            if version != FORMAT_VERSION:
                raise ArchiveVersionError(
                    f"{path}: archive version {version}, supported {FORMAT_VERSION}")
            first = False
            continue
        if line == "end":
            break
        if line.startswith("meta "):
            try:
                meta = json.loads(line[5:])
            except json.JSONDecodeError as exc:
                raise CorruptArchiveError(f"{path}: bad meta line: {exc}") from None
            continue
        parts = line.split()
        if len(parts) != 4 or parts[0] != "tensor" or parts[2] != "float32":
            raise CorruptArchiveError(f"{path}: bad header line {line!r}")
        try:
            entries.append((parts[1], _parse_shape(parts[3])))
        except ValueError:
            raise CorruptArchiveError(f"{path}: bad shape in {line!r}") from None

    tensors: dict[str, np.ndarray] = {}
    for name, shape in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        chunk = raw[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise CorruptArchiveError(f"{path}: payload truncated at {name!r}")
        tensors[name] = np.frombuffer(chunk, dtype=_LE_F32).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(raw):
        raise CorruptArchiveError(f"{path}: {len(raw) - pos} trailing bytes after payload")
    return tensors, meta
