"""Bit-exact persistence: tensor container, dataset manifest, checkpoints,
results CSV, and filter-grid graymap export.

Binary layouts are little-endian with mandatory magic and version fields;
every writer/reader pair round-trips bitwise on valid data and parse errors
always carry a byte offset or line number.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .classifier import PARAM_NAMES, ClassifierParams
from .dictionary import Dictionary
from .errors import ParseError

__all__ = [
    "TENSOR_MAGIC",
    "CHECKPOINT_MAGIC",
    "FORMAT_VERSION",
    "write_tensor",
    "read_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "ManifestEntry",
    "DatasetManifest",
    "write_manifest",
    "read_manifest",
    "save_checkpoint",
    "load_checkpoint",
    "write_results_csv",
    "export_filter_grid",
]

TENSOR_MAGIC = b"PLCA"
CHECKPOINT_MAGIC = b"PLCK"
FORMAT_VERSION = 1
MAX_RANK = 8

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {"f4": 0, "f8": 1}


# ---------------------------------------------------------------------------
# Tensor container


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize a float32/float64 array: magic, version, dtype, rank, shape, payload."""
    arr = np.asarray(arr)
    key = arr.dtype.str.lstrip("<>|=")
    if key not in _CODE_FOR_KIND:
        raise ValueError(f"only float32/float64 tensors are supported, got {arr.dtype}")
    if arr.ndim > MAX_RANK:
        raise ValueError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
    out = io.BytesIO()
    out.write(TENSOR_MAGIC)
    out.write(struct.pack("<HBB", FORMAT_VERSION, _CODE_FOR_KIND[key], arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    out.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return out.getvalue()


def tensor_from_bytes(data: bytes, path: str = "<bytes>") -> np.ndarray:
    if len(data) < 8:
        raise ParseError(f"truncated header: {len(data)} bytes", path=path, offset=0)
    if data[:4] != TENSOR_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}, expected {TENSOR_MAGIC!r}",
                         path=path, offset=0)
    version, dtype_code, rank = struct.unpack_from("<HBB", data, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {version}, "
                         f"expected {FORMAT_VERSION}", path=path, offset=4)
    if dtype_code not in _DTYPE_CODES:
        raise ParseError(f"unknown dtype code {dtype_code}", path=path, offset=6)
    if rank > MAX_RANK:
        raise ParseError(f"rank {rank} exceeds maximum {MAX_RANK}", path=path,
                         offset=7)
    header_end = 8 + 8 * rank
    if len(data) < header_end:
        raise ParseError(f"truncated shape: need {header_end} bytes, have "
                         f"{len(data)}", path=path, offset=8)
    shape = struct.unpack_from(f"<{rank}Q", data, 8)
    dtype = _DTYPE_CODES[dtype_code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(data) - header_end
    if actual != expected:
        raise ParseError(f"payload length mismatch: expected {expected} bytes "
                         f"for shape {tuple(shape)}, found {actual}",
                         path=path, offset=header_end)
    arr = np.frombuffer(data, dtype=dtype, count=-1, offset=header_end)
    return arr.reshape(shape).copy()


def write_tensor(path, arr: np.ndarray):
    data = tensor_to_bytes(arr)
    with open(path, "wb") as fh:
        fh.write(data)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read(), path=str(path))


# ---------------------------------------------------------------------------
# Dataset manifest (tab-separated text, '#' comments)


@dataclass
class ManifestEntry:
    path: str
    label: int
    group_id: str
    split: str = "train"
    boxes: Optional[dict] = None     # frame index -> (x, y, w, h)
    extras: list = field(default_factory=list)  # unknown fields, kept verbatim


@dataclass
class DatasetManifest:
    entries: list
    base_dir: str = "."

    def count(self, label: int) -> int:
        return sum(1 for e in self.entries if e.label == label)

    def for_split(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]


def _boxes_to_field(boxes: dict) -> str:
    parts = [f"{f}:{x}:{y}:{w}:{h}" for f, (x, y, w, h) in sorted(boxes.items())]
    return "boxes=" + ";".join(parts)


def _boxes_from_field(text: str, path: str, line_no: int) -> dict:
    boxes = {}
    for part in text.split(";"):
        pieces = part.split(":")
        if len(pieces) != 5:
            raise ParseError(f"malformed box field {part!r}", path=path, line=line_no)
        try:
            f, x, y, w, h = (int(p) for p in pieces)
        except ValueError:
            raise ParseError(f"non-integer box field {part!r}", path=path,
                             line=line_no) from None
        boxes[f] = (x, y, w, h)
    return boxes


def write_manifest(path, manifest: DatasetManifest, header_comments=()):
    lines = [f"# {c}" for c in header_comments]
    for e in manifest.entries:
        fields = [e.path, str(int(e.label)), e.group_id, e.split]
        if e.boxes:
            fields.append(_boxes_to_field(e.boxes))
        fields.extend(e.extras)
        lines.append("\t".join(fields))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path, check_paths: bool = True) -> DatasetManifest:
    base_dir = os.path.dirname(os.path.abspath(str(path)))
    entries = []
    seen_paths = set()
    with open(path, "r") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) < 4:
                raise ParseError(f"expected at least 4 tab-separated fields, "
                                 f"got {len(fields)}", path=str(path), line=line_no)
            rel, label_s, group_id, split = fields[:4]
            if rel in seen_paths:
                raise ParseError(f"duplicate path {rel!r}", path=str(path),
                                 line=line_no)
            seen_paths.add(rel)
            try:
                label = int(label_s)
            except ValueError:
                raise ParseError(f"label {label_s!r} is not an integer",
                                 path=str(path), line=line_no) from None
            if label not in (0, 1):
                raise ParseError(f"label must be 0 or 1, got {label}",
                                 path=str(path), line=line_no)
            if not group_id:
                raise ParseError("empty group_id", path=str(path), line=line_no)
            boxes = None
            extras = []
            for extra in fields[4:]:
                if boxes is None and extra.startswith("boxes="):
                    boxes = _boxes_from_field(extra[len("boxes="):], str(path),
                                              line_no)
                else:
                    extras.append(extra)
            if check_paths and not os.path.exists(os.path.join(base_dir, rel)):
                raise ParseError(f"referenced file {rel!r} does not exist",
                                 path=str(path), line=line_no)
            entries.append(ManifestEntry(path=rel, label=label, group_id=group_id,
                                         split=split, boxes=boxes, extras=extras))
    return DatasetManifest(entries=entries, base_dir=base_dir)


# ---------------------------------------------------------------------------
# Checkpoints (dictionary / classifier)

_KIND_DICT = 1
_KIND_CLF = 2


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack_body(meta: dict, tensors: dict) -> bytes:
    body = io.BytesIO()
    mb = _meta_bytes(meta)
    body.write(struct.pack("<I", len(mb)))
    body.write(mb)
    body.write(struct.pack("<H", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        blob = tensor_to_bytes(arr)
        body.write(struct.pack("<H", len(nb)))
        body.write(nb)
        body.write(struct.pack("<Q", len(blob)))
        body.write(blob)
    return body.getvalue()


def save_checkpoint(path, obj, extra_meta: Optional[dict] = None):
    """Persist a Dictionary or ClassifierParams with metadata and a body CRC."""
    if isinstance(obj, Dictionary):
        kind = _KIND_DICT
        meta = {
            "kind": "dictionary",
            "shape": [int(n) for n in obj.filters.shape],
            "lambda_trained_with": obj.lambda_trained_with,
            "epochs_trained": obj.epochs_trained,
            "source_tag": obj.source_tag,
            "config": obj.config_echo,
        }
        tensors = {"filters": obj.filters}
    elif isinstance(obj, ClassifierParams):
        kind = _KIND_CLF
        meta = {
            "kind": "classifier",
            "k_atoms": int(obj.k_atoms),
            "config": obj.config_echo,
        }
        tensors = obj.tensors()
    else:
        raise ValueError(f"cannot checkpoint object of type {type(obj).__name__}")
    if extra_meta:
        meta["config"] = {**meta["config"], **extra_meta}

    body = _pack_body(meta, tensors)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HB", FORMAT_VERSION, kind))
        fh.write(struct.pack("<I", zlib.crc32(body)))
        fh.write(body)


def load_checkpoint(path):
    """Load a checkpoint written by save_checkpoint; validates magic, version,
    and the body checksum, so any corrupted byte is reported."""
    with open(path, "rb") as fh:
        data = fh.read()
    p = str(path)
    if len(data) < 11:
        raise ParseError(f"truncated checkpoint: {len(data)} bytes", path=p, offset=0)
    if data[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}",
                         path=p, offset=0)
    version, kind = struct.unpack_from("<HB", data, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}, expected "
                         f"{FORMAT_VERSION}", path=p, offset=4)
    (crc,) = struct.unpack_from("<I", data, 7)
    body = data[11:]
    if zlib.crc32(body) != crc:
        raise ParseError("checksum mismatch: checkpoint body is corrupted",
                         path=p, offset=11)

    off = 0
    (meta_len,) = struct.unpack_from("<I", body, off)
    off += 4
    try:
        meta = json.loads(body[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad metadata block: {exc}", path=p, offset=11 + off) \
            from exc
    off += meta_len
    (n_tensors,) = struct.unpack_from("<H", body, off)
    off += 2
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        (blob_len,) = struct.unpack_from("<Q", body, off)
        off += 8
        tensors[name] = tensor_from_bytes(body[off:off + blob_len], path=p)
        off += blob_len

    if kind == _KIND_DICT:
        return Dictionary(
            filters=tensors["filters"],
            lambda_trained_with=float(meta.get("lambda_trained_with", 0.0)),
            epochs_trained=int(meta.get("epochs_trained", 0)),
            source_tag=meta.get("source_tag", "random"),
            config_echo=meta.get("config", {}),
        )
    if kind == _KIND_CLF:
        missing = [n for n in PARAM_NAMES if n not in tensors]
        if missing:
            raise ParseError(f"classifier checkpoint missing tensors {missing}",
                             path=p, offset=11)
        return ClassifierParams(**{n: tensors[n] for n in PARAM_NAMES},
                                config_echo=meta.get("config", {}))
    raise ParseError(f"unknown checkpoint kind {kind}", path=p, offset=6)


# ---------------------------------------------------------------------------
# Results CSV


def write_results_csv(predictions, path):
    """One row per video, sorted by source_id, with per-clip column groups.

    Probabilities are fixed-point with 6 decimals; the newline is "\\n".
    Raises on an empty prediction list before creating any file.
    """
    preds = sorted(predictions, key=lambda p: p.source_id)
    if not preds:
        raise ValueError("no predictions to write")
    max_clips = max(len(p.clip_predictions) for p in preds)
    header = ["source_id", "video_label", "mean_probability", "tie_broken"]
    for i in range(max_clips):
        header += [f"clip{i}_center_frame", f"clip{i}_box_x", f"clip{i}_box_y",
                   f"clip{i}_box_w", f"clip{i}_box_h", f"clip{i}_probability",
                   f"clip{i}_label"]
    lines = [",".join(header)]
    for p in preds:
        row = [p.source_id, str(int(p.label)), f"{p.mean_probability:.6f}",
               "true" if p.tie_broken else "false"]
        for cp in p.clip_predictions:
            row += [str(int(cp.center_frame)), str(int(cp.box.x)),
                    str(int(cp.box.y)), str(int(cp.box.w)), str(int(cp.box.h)),
                    f"{cp.probability:.6f}", str(int(cp.label))]
        row += [""] * (7 * (max_clips - len(p.clip_predictions)))
        lines.append(",".join(row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Filter-grid export (binary PGM, one image per temporal slice)


def _atom_tile(slice_2d: np.ndarray) -> np.ndarray:
    lo = float(slice_2d.min())
    hi = float(slice_2d.max())
    if hi - lo <= 0:
        return np.full(slice_2d.shape, 128, dtype=np.uint8)
    scaled = (slice_2d - lo) / (hi - lo) * 255.0
    return np.rint(scaled).astype(np.uint8)


def export_filter_grid(dictionary: Dictionary, path_prefix) -> list:
    """Write one PGM per temporal slice: a ceil(sqrt(K)) grid of atom tiles,
    each min-max normalized independently, with 1-px black separators."""
    filters = dictionary.filters
    k, d, p, q = filters.shape
    grid = int(np.ceil(np.sqrt(k)))
    side_h = grid * p + grid + 1
    side_w = grid * q + grid + 1
    paths = []
    for t in range(d):
        canvas = np.zeros((side_h, side_w), dtype=np.uint8)
        for idx in range(k):
            r, c = divmod(idx, grid)
            y = 1 + r * (p + 1)
            x = 1 + c * (q + 1)
            canvas[y:y + p, x:x + q] = _atom_tile(filters[idx, t])
        out_path = f"{path_prefix}_t{t}.pgm"
        with open(out_path, "wb") as fh:
            fh.write(f"P5\n{side_w} {side_h}\n255\n".encode("ascii"))
            fh.write(canvas.tobytes())
        paths.append(out_path)
    return paths
