"""3D scalar volumes and integer label maps, with a simple on-disk format.

File layout: a text header of ``key: value`` lines terminated by an
``end_header`` line, followed by the raw payload.  Header keys:

    cofiseg_volume: 1          format tag + version (first line, required)
    kind: image | label
    dtype: float32 | uint8     (image payloads are float32, labels uint8)
    channels: C                (labels must have channels 1)
    dims: D H W
    spacing: sd sh sw          (mm; optional, defaults to 1.0 1.0 1.0)
    byteorder: little          (only little-endian payloads are supported)

Payload length must be exactly channels*D*H*W items of the stated dtype.
Dataset directory layout: ``case_0000/image.vol`` + ``case_0000/label.seg``.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError

FORMAT_KEY = "cofiseg_volume"
FORMAT_VERSION = 1
DEFAULT_SPACING = (1.0, 1.0, 1.0)

_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


@dataclass
class Volume:
    """A (C, D, H, W) float32 intensity grid with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple = DEFAULT_SPACING

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise DimensionError(f"volume data must be (C, D, H, W), got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DimensionError(f"spacing must be 3 positive floats, got {self.spacing}")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1:]


@dataclass
class LabelMap:
    """A (D, H, W) uint8 grid of class labels in {0..K}, geometry as its Volume."""

    labels: np.ndarray
    spacing: tuple = DEFAULT_SPACING

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise DimensionError(f"labels must be (D, H, W), got {self.labels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DimensionError(f"spacing must be 3 positive floats, got {self.spacing}")

    @property
    def dims(self):
        return self.labels.shape


def _write(path, kind, dtype_name, channels, dims, spacing, payload):
    lines = [
        f"{FORMAT_KEY}: {FORMAT_VERSION}",
        f"kind: {kind}",
        f"dtype: {dtype_name}",
        f"channels: {channels}",
        f"dims: {dims[0]} {dims[1]} {dims[2]}",
        f"spacing: {spacing[0]!r} {spacing[1]!r} {spacing[2]!r}",
        "byteorder: little",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(payload)


def _parse_header(path, blob):
    pos = 0
    fields = {}
    first = True
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"{path}: header not terminated by end_header "
                              f"within {len(blob)} bytes")
        line = blob[pos:nl].decode("ascii", errors="replace")
        pos = nl + 1
        if line == "end_header":
            return fields, pos
        if ":" not in line:
            raise FormatError(f"{path}: malformed header line {line!r} at byte {pos}")
        key, value = line.split(":", 1)
        key, value = key.strip(), value.strip()
        if first:
            if key != FORMAT_KEY:
                raise FormatError(f"{path}: not a cofiseg volume (first line {line!r})")
            first = False
        if key in fields:
            raise FormatError(f"{path}: duplicate header key {key!r}")
        fields[key] = value


_KNOWN_KEYS = {FORMAT_KEY, "kind", "dtype", "channels", "dims", "spacing", "byteorder"}


def _load_raw(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    fields, payload_start = _parse_header(path, blob)
    unknown = set(fields) - _KNOWN_KEYS
    if unknown:
        raise FormatError(f"{path}: unknown header keys {sorted(unknown)}")
    if fields.get(FORMAT_KEY) != str(FORMAT_VERSION):
        raise FormatError(f"{path}: unsupported format version {fields.get(FORMAT_KEY)!r}")
    if fields.get("byteorder", "little") != "little":
        raise FormatError(f"{path}: unsupported byteorder {fields['byteorder']!r}")
    dtype_name = fields.get("dtype", "float32")
    if dtype_name not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype {dtype_name!r}")
    dtype = _DTYPES[dtype_name]
    try:
        channels = int(fields.get("channels", "1"))
        dims = tuple(int(v) for v in fields["dims"].split())
        spacing = tuple(float(v) for v in fields.get("spacing", "1 1 1").split())
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad header field: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1 or channels < 1:
        raise FormatError(f"{path}: bad geometry channels={channels} dims={dims}")
    n_items = channels * dims[0] * dims[1] * dims[2]
    expected = n_items * dtype.itemsize
    actual = len(blob) - payload_start
    if actual != expected:
        raise FormatError(
            f"{path}: payload at byte {payload_start} should be {expected} bytes "
            f"({n_items} x {dtype_name}), found {actual}")
    data = np.frombuffer(blob, dtype=dtype, count=n_items, offset=payload_start)
    return fields.get("kind", "image"), data.reshape(channels, *dims).copy(), spacing


def save_volume(path, vol: Volume):
    _write(path, "image", "float32", vol.channels, vol.dims, vol.spacing,
           np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def load_volume(path) -> Volume:
    kind, data, spacing = _load_raw(path)
    if kind != "image":
        raise FormatError(f"{path}: expected an image volume, found kind {kind!r}")
    return Volume(data=data.astype(np.float32), spacing=spacing)


def save_labels(path, lab: LabelMap):
    _write(path, "label", "uint8", 1, lab.dims, lab.spacing,
           np.ascontiguousarray(lab.labels, dtype="u1").tobytes())


def load_labels(path) -> LabelMap:
    kind, data, spacing = _load_raw(path)
    if kind != "label":
        raise FormatError(f"{path}: expected a label map, found kind {kind!r}")
    return LabelMap(labels=data[0], spacing=spacing)


# dataset directory helpers -------------------------------------------------

IMAGE_NAME = "image.vol"
LABEL_NAME = "label.seg"


def case_dir_name(index):
    return f"case_{index:04d}"


def write_case(root, index, vol: Volume, lab: LabelMap):
    case = os.path.join(root, case_dir_name(index))
    os.makedirs(case, exist_ok=True)
    save_volume(os.path.join(case, IMAGE_NAME), vol)
    save_labels(os.path.join(case, LABEL_NAME), lab)
    return case


def list_cases(root):
    """Sorted case directory names under a dataset root."""
    if not os.path.isdir(root):
        return []
    return sorted(d for d in os.listdir(root)
                  if d.startswith("case_") and os.path.isdir(os.path.join(root, d)))


def read_case(root, case):
    vol = load_volume(os.path.join(root, case, IMAGE_NAME))
    lab = load_labels(os.path.join(root, case, LABEL_NAME))
    return vol, lab
