"""Weight container file: versioned manifest + raw little-endian float32 payload.

Byte layout (all integers little-endian):

    offset 0   : 8-byte magic  b"COFIWT1\\n"
    offset 8   : uint32 manifest length M (bytes)
    offset 12  : UTF-8 JSON manifest, M bytes:
                   {"version": 1,
                    "meta": {...arbitrary JSON metadata...},
                    "entries": [{"name": str, "shape": [int,...], "offset": int}, ...]}
    offset 12+M: payload, concatenated raw little-endian float32 buffers;
                 each entry's "offset" is relative to the payload start and
                 entries are laid out in manifest order with no padding.

Entry names are unique.  The manifest is serialized with sorted keys and no
extra whitespace so identical content yields identical bytes.
"""

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"COFIWT1\n"
VERSION = 1


def save_weights(path, arrays, meta=None):
    """Write named float32 arrays (dict name -> ndarray) plus JSON metadata."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(buf.shape), "offset": offset})
        chunks.append(buf.tobytes())
        offset += buf.nbytes
    manifest = json.dumps(
        {"version": VERSION, "meta": meta or {}, "entries": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for chunk in chunks:
            fh.write(chunk)


def load_weights(path):
    """Read a weight container; returns (dict name -> float32 ndarray, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4:
        raise FormatError(f"{path}: truncated container, {len(blob)} bytes")
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    (mlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    header_end = len(MAGIC) + 4 + mlen
    if len(blob) < header_end:
        raise FormatError(
            f"{path}: manifest extends to byte {header_end} but file has {len(blob)}")
    try:
        manifest = json.loads(blob[len(MAGIC) + 4:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {manifest.get('version')!r}")
    payload = blob[header_end:]
    arrays = {}
    for entry in manifest["entries"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = off + 4 * n
        if end > len(payload):
            raise FormatError(
                f"{path}: entry {name!r} needs payload bytes [{off}, {end}) "
                f"but payload has {len(payload)}")
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=off) \
            .reshape(shape).copy()
    return arrays, manifest.get("meta", {})
