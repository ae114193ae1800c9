"""Tensor files and dataset manifests.

Tensors use the ``.npy`` v1.0 layout restricted to little-endian ``<f4`` and
``<f8``, C order. Files written here load with ``numpy.load`` and vice versa,
but the reader is our own so that every defect maps to a classified error.
"""

from __future__ import annotations

import ast
import enum
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    GeometryError,
    IoFailure,
    MalformedHeader,
    MissingFile,
    SchemaError,
    ShapeDataMismatch,
    UnsupportedDtype,
)
from .reduce import PoolingConfig

MAGIC = b"\x93NUMPY"
ALIGN = 64
SUPPORTED_DESCR = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}
_HEADER_KEYS = {"descr", "fortran_order", "shape"}


def _header_bytes(descr: str, shape: tuple[int, ...]) -> bytes:
    header = "{'descr': %r, 'fortran_order': False, 'shape': %r, }" % (descr, tuple(shape))
    hlen = len(header) + 1  # trailing newline
    fixed = len(MAGIC) + 2 + 2
    if fixed + hlen > 0xFFFF:
        raise MalformedHeader(f"header for shape {shape} does not fit a v1.0 file")
    pad = -(fixed + hlen) % ALIGN
    header = header + " " * pad + "\n"
    return MAGIC + b"\x01\x00" + struct.pack("<H", len(header)) + header.encode("latin1")


def tensor_bytes(array) -> bytes:
    """Serialize a float32/float64 array to the exact bytes of a tensor file."""
    arr = np.asarray(array)
    if arr.ndim == 0 or any(int(s) <= 0 for s in arr.shape):
        raise ValueError(f"tensor shape must be non-empty with positive dims, got {arr.shape}")
    if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
        raise UnsupportedDtype(f"only float32/float64 tensors are supported, got {arr.dtype}")
    descr = "<f4" if arr.dtype.itemsize == 4 else "<f8"
    data = np.ascontiguousarray(arr, dtype=SUPPORTED_DESCR[descr])
    return _header_bytes(descr, data.shape) + data.tobytes(order="C")


def write_atomic(payload: bytes, path) -> None:
    """Write ``payload`` via a temporary sibling file renamed into place.

    Missing parent directories are created. Readers never observe a
    half-written file.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_tensor(array, path) -> None:
    """Write a float32/float64 array as a v1.0 tensor file (atomically)."""
    write_atomic(tensor_bytes(array), path)


def _parse_header(raw: bytes, path) -> tuple[np.dtype, tuple[int, ...], int]:
    if len(raw) < 10 or raw[:6] != MAGIC:
        raise MalformedHeader(f"{path}: missing tensor magic bytes")
    major = raw[6]
    if major == 1:
        (hlen,) = struct.unpack("<H", raw[8:10])
        start = 10
    elif major in (2, 3):
        if len(raw) < 12:
            raise MalformedHeader(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<I", raw[8:12])
        start = 12
    else:
        raise MalformedHeader(f"{path}: unsupported format version {major}.{raw[7]}")
    if len(raw) < start + hlen:
        raise MalformedHeader(f"{path}: header truncated")
    try:
        text = raw[start : start + hlen].decode("latin1")
        header = ast.literal_eval(text)
    except (SyntaxError, ValueError) as exc:
        raise MalformedHeader(f"{path}: header is not a literal dict") from exc
    if not isinstance(header, dict) or set(header) != _HEADER_KEYS:
        raise MalformedHeader(f"{path}: header keys must be exactly {sorted(_HEADER_KEYS)}")

    descr = header["descr"]
    if not isinstance(descr, str):
        raise MalformedHeader(f"{path}: descr must be a string")
    if descr not in SUPPORTED_DESCR:
        raise UnsupportedDtype(f"{path}: dtype {descr!r} not supported (little-endian f4/f8 only)")
    if header["fortran_order"] is not False:
        raise MalformedHeader(f"{path}: fortran_order must be False")
    shape = header["shape"]
    if (
        not isinstance(shape, tuple)
        or len(shape) == 0
        or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in shape)
    ):
        raise MalformedHeader(f"{path}: shape must be a non-empty tuple of positive ints, got {shape!r}")
    return SUPPORTED_DESCR[descr], shape, start + hlen


def read_tensor(path) -> np.ndarray:
    """Read a tensor file.

    Returns:
        A read-only C-ordered array with the stored dtype and shape.

    Raises:
        MalformedHeader, UnsupportedDtype, ShapeDataMismatch, IoFailure.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read tensor {path}: {exc}") from exc
    return tensor_from_bytes(raw, path)


def tensor_from_bytes(raw: bytes, path="<bytes>") -> np.ndarray:
    dtype, shape, offset = _parse_header(raw, path)
    expected = math.prod(shape) * dtype.itemsize
    got = len(raw) - offset
    if got != expected:
        raise ShapeDataMismatch(f"{path}: shape {shape} needs {expected} data bytes, file has {got}")
    return np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape)


# ---------------------------------------------------------------------------
# manifests


class Split(str, enum.Enum):
    ID_TRAIN = "ID_TRAIN"
    ID_VAL = "ID_VAL"
    ID_TEST = "ID_TEST"
    OOD = "OOD"


@dataclass(frozen=True)
class SubjectEntry:
    id: str
    split: Split
    image_shape: tuple[int, int, int]
    feature_files: tuple[Path, ...] = ()
    patch_origins: tuple[tuple[int, int, int], ...] = ()
    softmax_file: Path | None = None
    logits_file: Path | None = None
    mc_sample_files: tuple[Path, ...] | None = None
    prediction_file: Path | None = None
    groundtruth_file: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    subjects: tuple[SubjectEntry, ...]
    patch_size: tuple[int, int, int]
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    root: Path = Path(".")

    def by_split(self, *splits: Split) -> list[SubjectEntry]:
        return [s for s in self.subjects if s.split in splits]

    def subject(self, subject_id: str) -> SubjectEntry:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise KeyError(subject_id)


_SUBJECT_KEYS = {
    "id",
    "split",
    "image_shape",
    "feature_files",
    "patch_origins",
    "softmax_file",
    "logits_file",
    "mc_sample_files",
    "prediction_file",
    "groundtruth_file",
}
_TOP_KEYS = {"patch_size", "pooling", "subjects", "meta"}


def _int_triple(value, what, subject_id=None, allow_zero=False) -> tuple[int, int, int]:
    lo = 0 if allow_zero else 1
    if (
        not isinstance(value, list)
        or len(value) != 3
        or not all(isinstance(v, int) and not isinstance(v, bool) and v >= lo for v in value)
    ):
        kind = "non-negative" if allow_zero else "positive"
        raise SchemaError(f"expected 3 {kind} integers, got {value!r}", subject_id, what)
    return tuple(value)


def _resolve(root: Path, rel, subject_id, what) -> Path:
    if not isinstance(rel, str) or not rel:
        raise SchemaError(f"expected a file path string, got {rel!r}", subject_id, what)
    p = Path(rel)
    p = p if p.is_absolute() else root / p
    if not p.is_file():
        raise MissingFile(f"file not found: {p}", subject_id, what)
    return p


def _parse_pooling(doc) -> PoolingConfig:
    if doc is None:
        return PoolingConfig()
    if not isinstance(doc, dict) or not set(doc) <= {"kernel", "stride", "max_elements"}:
        raise SchemaError("pooling must be an object with kernel/stride/max_elements", field="pooling")
    kw = {}
    for key in ("kernel", "stride"):
        if key in doc:
            kw[key] = _int_triple(doc[key], f"pooling.{key}")
    if "max_elements" in doc:
        m = doc["max_elements"]
        if not isinstance(m, int) or isinstance(m, bool) or m < 1:
            raise SchemaError(f"max_elements must be a positive integer, got {m!r}", field="pooling.max_elements")
        kw["max_elements"] = m
    return PoolingConfig(**kw)


def _parse_subject(doc, root: Path, patch_size) -> SubjectEntry:
    if not isinstance(doc, dict):
        raise SchemaError("subject entry must be an object", field="subjects")
    sid = doc.get("id")
    if not isinstance(sid, str) or not sid:
        raise SchemaError(f"subject id must be a non-empty string, got {sid!r}", field="id")
    unknown = set(doc) - _SUBJECT_KEYS
    if unknown:
        raise SchemaError(f"unknown keys {sorted(unknown)}", sid)
    try:
        split = Split(doc.get("split"))
    except ValueError:
        raise SchemaError(f"split must be one of {[s.value for s in Split]}", sid, "split") from None
    image_shape = _int_triple(doc.get("image_shape"), "image_shape", sid)

    features = doc.get("feature_files", [])
    origins = doc.get("patch_origins", [])
    if not isinstance(features, list) or not isinstance(origins, list):
        raise SchemaError("feature_files and patch_origins must be lists", sid)
    if len(features) != len(origins):
        raise SchemaError(
            f"{len(features)} feature files but {len(origins)} patch origins", sid, "patch_origins"
        )
    parsed_origins = []
    for i, o in enumerate(origins):
        o = _int_triple(o, f"patch_origins[{i}]", sid, allow_zero=True)
        if any(a + p > s for a, p, s in zip(o, patch_size, image_shape)):
            raise GeometryError(
                f"patch at origin {o} with size {patch_size} exceeds image shape {image_shape}",
                sid,
                f"patch_origins[{i}]",
            )
        parsed_origins.append(o)
    feature_paths = tuple(_resolve(root, f, sid, f"feature_files[{i}]") for i, f in enumerate(features))

    def opt(key):
        return _resolve(root, doc[key], sid, key) if doc.get(key) is not None else None

    mc = doc.get("mc_sample_files")
    if mc is not None:
        if not isinstance(mc, list):
            raise SchemaError("mc_sample_files must be a list", sid, "mc_sample_files")
        mc = tuple(_resolve(root, f, sid, f"mc_sample_files[{i}]") for i, f in enumerate(mc))

    return SubjectEntry(
        id=sid,
        split=split,
        image_shape=image_shape,
        feature_files=feature_paths,
        patch_origins=tuple(parsed_origins),
        softmax_file=opt("softmax_file"),
        logits_file=opt("logits_file"),
        mc_sample_files=mc,
        prediction_file=opt("prediction_file"),
        groundtruth_file=opt("groundtruth_file"),
    )


def parse_manifest(doc, root) -> DatasetManifest:
    """Validate an already-decoded manifest document; paths resolve against ``root``."""
    root = Path(root)
    if not isinstance(doc, dict):
        raise SchemaError("manifest must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise SchemaError(f"unknown top-level keys {sorted(unknown)}")
    patch_size = _int_triple(doc.get("patch_size"), "patch_size")
    pooling = _parse_pooling(doc.get("pooling"))
    subjects_doc = doc.get("subjects")
    if not isinstance(subjects_doc, list) or not subjects_doc:
        raise SchemaError("subjects must be a non-empty list", field="subjects")

    subjects = []
    seen = set()
    for entry in subjects_doc:
        subj = _parse_subject(entry, root, patch_size)
        if subj.id in seen:
            raise SchemaError("duplicate subject id", subj.id, "id")
        seen.add(subj.id)
        subjects.append(subj)
    return DatasetManifest(subjects=tuple(subjects), patch_size=patch_size, pooling=pooling, root=root)


def load_manifest(path) -> DatasetManifest:
    """Load and fully validate a manifest, checking every referenced file exists."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise MissingFile(f"manifest not found: {path}") from None
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}") from exc
    return parse_manifest(doc, path.parent)
