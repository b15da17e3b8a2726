"""Dataset ingestion, image codec and geometry, seeded sampling, checkpoints.

Tensor archives use a fixed binary layout: an 8-byte little-endian unsigned
header length N, then N bytes of UTF-8 JSON metadata mapping each tensor name
to {dtype, shape, offset, length} plus any scalar fields, then one contiguous
little-endian float32 payload. Offsets and lengths are in bytes relative to
the payload start. Writes are atomic (temp file + rename).
"""

import functools
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import (
    CodecError,
    ConfigError,
    CorruptArchiveError,
    DataError,
    DimensionError,
    FormatVersionError,
)
from .params import ParamSet

ARCHIVE_FORMAT_VERSION = 1
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}

_HEADER = struct.Struct("<Q")
_RESERVED_FIELDS = {"format_version", "tensors", "payload_crc32"}


# ---------------------------------------------------------------------------
# Named-tensor archive
# ---------------------------------------------------------------------------

def write_archive(path, tensors, fields=None):
    """Write named float32 arrays plus scalar fields atomically to ``path``."""
    path = Path(path)
    fields = dict(fields or {})
    bad = _RESERVED_FIELDS & fields.keys()
    if bad:
        raise ConfigError(f"archive fields use reserved names: {sorted(bad)}")

    index = {}
    chunks = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value), dtype="<f4")
        raw = arr.tobytes()
        index[name] = {
            "dtype": "float32",
            "shape": list(arr.shape),
            "offset": offset,
            "length": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    meta = {"format_version": ARCHIVE_FORMAT_VERSION, "tensors": index,
            "payload_crc32": zlib.crc32(payload)}
    meta.update(fields)
    meta_bytes = json.dumps(meta, sort_keys=False).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_HEADER.pack(len(meta_bytes)))
            f.write(meta_bytes)
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_archive(path):
    """Read an archive back into (tensors, fields). Validates layout and CRC."""
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()

    if len(raw) < _HEADER.size:
        raise CorruptArchiveError(f"{path}: truncated header ({len(raw)} bytes)")
    (meta_len,) = _HEADER.unpack_from(raw, 0)
    meta_end = _HEADER.size + meta_len
    if len(raw) < meta_end:
        raise CorruptArchiveError(f"{path}: truncated metadata (need {meta_len} bytes)")
    try:
        meta = json.loads(raw[_HEADER.size:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArchiveError(f"{path}: unreadable metadata: {exc}") from exc

    version = meta.get("format_version")
    if version != ARCHIVE_FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: format version {version}, this build supports version "
            f"{ARCHIVE_FORMAT_VERSION}")

    payload = raw[meta_end:]
    if meta.get("payload_crc32") != zlib.crc32(payload):
        raise CorruptArchiveError(f"{path}: payload checksum mismatch")

    tensors = {}
    for name, entry in meta.get("tensors", {}).items():
        if entry.get("dtype") != "float32":
            raise CorruptArchiveError(f"{path}: tensor {name!r} has dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        off, length = entry["offset"], entry["length"]
        expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if length != expected or off < 0 or off + length > len(payload):
            raise CorruptArchiveError(
                f"{path}: tensor {name!r} offset/length inconsistent with payload")
        arr = np.frombuffer(payload, dtype="<f4", count=length // 4, offset=off)
        tensors[name] = arr.reshape(shape).copy()

    fields = {k: v for k, v in meta.items() if k not in _RESERVED_FIELDS}
    return tensors, fields


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=512)
def _decode_cached(path_str, target_size, mtime_ns):
    del mtime_ns  # cache-key component only
    return _decode(path_str, target_size)


def _decode(path_str, target_size):
    try:
        with Image.open(path_str) as img:
            img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise CodecError(f"cannot decode image {path_str}: {exc}") from exc

    t = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    if target_size is None:
        return t
    _, h, w = t.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    t = t[:, top:top + side, left:left + side]
    t = F.interpolate(t.unsqueeze(0), size=(target_size, target_size),
                      mode="bilinear", align_corners=False).squeeze(0)
    return t.clamp(0.0, 1.0)


def load_image(path, target_size):
    """Decode -> RGB -> center square crop -> bilinear resize -> [0,1] tensor.

    Grayscale files are replicated to 3 channels; alpha is discarded. The
    resize samples with corner alignment disabled (half-pixel centers) and no
    antialias prefilter, so outputs are reproducible across platforms.
    """
    try:
        mtime_ns = os.stat(path).st_mtime_ns
    except OSError as exc:
        raise CodecError(f"cannot decode image {path}: {exc}") from exc
    return _decode_cached(str(path), int(target_size), mtime_ns).clone()


def read_image(path):
    """Decode an image at its native size, no crop or resize."""
    return _decode(str(path), None)


def save_image(img, path):
    """Quantize values with round(255*v) and write a PNG."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected a 3xHxW image, got {tuple(img.shape)}")
    arr = torch.round(img.detach().clamp(0.0, 1.0) * 255.0).to(torch.uint8)
    pil = Image.fromarray(arr.permute(1, 2, 0).numpy())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        pil.save(path, format="PNG")
    except OSError as exc:
        raise CodecError(f"cannot write image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Datasets and sampling
# ---------------------------------------------------------------------------

@dataclass
class DatasetHandle:
    """A directory of images with a deterministic, sorted index."""

    root: Path
    index: list = field(default_factory=list)
    split_tag: str = "content_train"

    def __len__(self):
        return len(self.index)


def open_dataset(root, split_tag="content_train"):
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    index = sorted(p for p in root.rglob("*")
                   if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    return DatasetHandle(root=root, index=index, split_tag=split_tag)


def split_dataset(handle, val_fraction=0.1, seed=0):
    """Seeded split of one handle into disjoint train/val handles."""
    n = len(handle.index)
    if n < 2:
        raise DataError(f"cannot split a dataset of {n} image(s)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    val_ids = set(order[:n_val].tolist())
    train = [p for i, p in enumerate(handle.index) if i not in val_ids]
    val = [p for i, p in enumerate(handle.index) if i in val_ids]
    return (DatasetHandle(handle.root, train, "content_train"),
            DatasetHandle(handle.root, val, "content_val"))


def sample_indices(handle, batch, rng):
    """Uniform without replacement; deterministic given the rng state."""
    n = len(handle.index)
    if batch > n:
        raise DataError(f"batch size {batch} exceeds dataset size {n} ({handle.root})")
    return [int(i) for i in rng.choice(n, size=batch, replace=False)]


def sample_batch(handle, batch, rng, target_size=256):
    """Draw ``batch`` distinct images, decoded at ``target_size``."""
    return [load_image(handle.index[i], target_size) for i in sample_indices(handle, batch, rng)]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_PARAM_PREFIX = "params."
_OPT_PREFIX = "opt."


@dataclass
class Checkpoint:
    params: ParamSet
    optimizer_state: dict
    iteration: int
    config: dict
    format_version: int = ARCHIVE_FORMAT_VERSION


def save_checkpoint(ckpt, path):
    tensors = {}
    for name, t in ckpt.params.entries.items():
        tensors[_PARAM_PREFIX + name] = t.detach().cpu().numpy()
    for name, arr in ckpt.optimizer_state.items():
        tensors[_OPT_PREFIX + name] = np.asarray(arr)
    fields = {"kind": "checkpoint", "iteration": int(ckpt.iteration), "config": ckpt.config}
    write_archive(path, tensors, fields)


def load_checkpoint(path):
    tensors, fields = read_archive(path)
    if fields.get("kind") != "checkpoint":
        raise CorruptArchiveError(f"{path}: archive is not a checkpoint")
    entries = {}
    opt = {}
    for name, arr in tensors.items():
        if name.startswith(_PARAM_PREFIX):
            entries[name[len(_PARAM_PREFIX):]] = torch.from_numpy(arr)
        elif name.startswith(_OPT_PREFIX):
            opt[name[len(_OPT_PREFIX):]] = arr
        else:
            raise CorruptArchiveError(f"{path}: unexpected tensor {name!r} in checkpoint")
    return Checkpoint(params=ParamSet(entries), optimizer_state=opt,
                      iteration=int(fields.get("iteration", 0)),
                      config=fields.get("config", {}),
                      format_version=ARCHIVE_FORMAT_VERSION)
