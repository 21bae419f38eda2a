"""On-disk formats: the tensor container shared by checkpoints, rep stores and
sample batches, plus binary PGM images.

Container layout::

    b"RCGCKPT1" | u32 LE header length | UTF-8 JSON header | payloads

The header is ``{"version", "config", "tensors"}`` where ``tensors`` maps
name -> {"shape", "dtype", "offset"}, sorted by name; offsets are relative to the first
payload byte and payloads are little-endian, packed in directory order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, UsageError

MAGIC = b"RCGCKPT1"
VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


@dataclass
class ModelCheckpoint:
    config: dict
    tensors: dict = field(default_factory=dict)
    version: int = VERSION


def _dtype_tag(arr):
    if np.issubdtype(arr.dtype, np.floating):
        return "f32"
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return "i32"
    raise UsageError(f"unsupported tensor dtype {arr.dtype}")


def encode_checkpoint(config, tensors) -> bytes:
    # payloads follow the (sorted) order the JSON directory is written in
    directory, payloads, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        directory[name] = {"shape": list(arr.shape), "dtype": tag, "offset": offset}
        payloads.append(raw)
        offset += len(raw)
    header = {"version": VERSION, "config": config, "tensors": directory}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(payloads)


def decode_checkpoint(data: bytes) -> ModelCheckpoint:
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic: not an RCG container")
    (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    if start + hlen > len(data):
        raise FormatError("truncated header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    if header.get("version") != VERSION:
        raise FormatError(f"unsupported container version {header.get('version')!r}")
    base = start + hlen
    tensors, expected = {}, 0
    for name, entry in header.get("tensors", {}).items():
        dtype = DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise FormatError(f"tensor {name!r}: unknown dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if entry["offset"] != expected:
            raise FormatError(f"tensor {name!r}: offset {entry['offset']} != expected {expected}")
        lo = base + expected
        if lo + nbytes > len(data):
            raise FormatError(f"truncated payload for tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=lo).reshape(shape).copy()
        expected += nbytes
    if base + expected != len(data):
        raise FormatError(f"{len(data) - base - expected} trailing bytes after last tensor")
    return ModelCheckpoint(header["config"], tensors, header["version"])


def save_checkpoint(path, config, tensors):
    data = encode_checkpoint(config, tensors)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> ModelCheckpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    return decode_checkpoint(data)


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# representation store
# ---------------------------------------------------------------------------


def save_rep_store(path, reps, labels=None, config=None):
    reps = np.asarray(reps)
    labels = np.full(reps.shape[0], -1) if labels is None else np.asarray(labels)
    if labels.shape != (reps.shape[0],):
        raise UsageError("labels must have one entry per representation")
    return save_checkpoint(path, dict(config or {}, kind="rep_store"),
                           {"reps": reps, "labels": labels})


def load_rep_store(path):
    ckpt = load_checkpoint(path)
    if "reps" not in ckpt.tensors or "labels" not in ckpt.tensors:
        raise FormatError(f"{path} is not a representation store")
    return ckpt.tensors["reps"], ckpt.tensors["labels"], ckpt.config


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def to_bytes(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image):
    """Binary P5, maxval 255; ``image`` is [H, W] in [0, 1]."""
    pix = to_bytes(image)
    H, W = pix.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (W, H))
        fh.write(pix.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    W, H, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported")
    pix = data[pos + 1:]
    if len(pix) != W * H:
        raise FormatError(f"{path}: expected {W * H} pixel bytes, found {len(pix)}")
    return np.frombuffer(pix, dtype=np.uint8).reshape(H, W).astype(np.float64) / 255.0


def image_grid(images, cols=None, pad=1, pad_value=1.0):
    """Tile [n, H, W] into one image, row-major, with ``pad``-pixel separators."""
    images = np.asarray(images, dtype=np.float64)
    n, H, W = images.shape
    cols = cols or max(1, int(np.ceil(np.sqrt(n))))
    rows = max(1, int(np.ceil(n / cols)))
    grid = np.full((rows * H + (rows - 1) * pad, cols * W + (cols - 1) * pad), pad_value)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        grid[r * (H + pad):r * (H + pad) + H, c * (W + pad):c * (W + pad) + W] = img
    return grid
