"""Binary checkpoint container shared by the embedding model and the
alignment map.

Layout: 7-byte magic, 8-byte little-endian header length, UTF-8 JSON header,
then raw little-endian array bytes back to back.  The header carries a
section table (name, dtype, shape, byte offset relative to the data region)
plus arbitrary JSON metadata.  Round-trips are exact: float64 / complex128
payloads come back bit-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ParseError

MAGIC = b"LECKG1\n"
FORMAT_VERSION = 1

# allowed on-disk dtypes, all little-endian
_DTYPES = {"<f8": np.dtype("<f8"), "<c16": np.dtype("<c16"), "<i8": np.dtype("<i8")}


def save_checkpoint(
    path: str | Path, meta: dict, sections: dict[str, np.ndarray]
) -> None:
    """Write metadata plus named arrays; keys ordered as given."""
    table = []
    blobs = []
    offset = 0
    for name, arr in sections.items():
        if arr.dtype == np.float64:
            disk = arr.astype("<f8", copy=False)
        elif arr.dtype == np.complex128:
            disk = arr.astype("<c16", copy=False)
        elif arr.dtype == np.int64:
            disk = arr.astype("<i8", copy=False)
        else:
            raise IntegrityError(
                f"section {name!r}: unsupported dtype {arr.dtype}, "
                "use float64, complex128 or int64"
            )
        raw = np.ascontiguousarray(disk).tobytes()
        table.append(
            {
                "name": name,
                "dtype": disk.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)

    header = {"format_version": FORMAT_VERSION, "meta": meta, "sections": table}
    header_bytes = json.dumps(
        header, ensure_ascii=False, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")

    out = Path(path)
    tmp = out.with_name(out.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)
    tmp.replace(out)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise ParseError(f"{path}: bad magic, not a checkpoint file")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise ParseError(f"{path}: truncated header length")
    (header_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) < pos + header_len:
        raise ParseError(f"{path}: truncated header")
    try:
        header = json.loads(blob[pos : pos + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: header is not valid JSON: {exc}") from exc
    pos += header_len

    if header.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(
            f"{path}: format version {header.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}"
        )
    data = blob[pos:]
    sections: dict[str, np.ndarray] = {}
    for row in header["sections"]:
        dtype = _DTYPES.get(row["dtype"])
        if dtype is None:
            raise IntegrityError(f"{path}: section {row['name']!r}: bad dtype {row['dtype']!r}")
        lo, hi = row["offset"], row["offset"] + row["nbytes"]
        if hi > len(data):
            raise IntegrityError(f"{path}: section {row['name']!r} exceeds file size")
        arr = np.frombuffer(data[lo:hi], dtype=dtype).reshape(row["shape"]).copy()
        sections[row["name"]] = arr
    return header["meta"], sections
