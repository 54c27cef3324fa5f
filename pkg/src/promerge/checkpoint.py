"""Weight containers, task-vector arithmetic and on-disk serialization.

The file format is a UTF-8 text manifest followed by a raw little-endian
float64 payload, split by a `---` line; see docs/checkpoint-format.md for the
byte-exact layout. Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import Tensor

ParamKey = tuple[str, str]

FORMAT_MAGIC = "PROMERGE-CONTAINER"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Base class for container parsing failures."""


class MalformedHeaderError(CheckpointFormatError):
    pass


class UnsupportedVersionError(CheckpointFormatError):
    pass


class TruncatedPayloadError(CheckpointFormatError):
    pass


class PayloadMismatchError(CheckpointFormatError):
    """Manifest shapes/counts disagree with the payload."""


class IncompatibleWeightsError(ValueError):
    """Two weight sets do not share architecture/keys/shapes."""


@dataclass
class ModelWeights:
    """Named parameter tensors keyed by (layer name, role)."""

    entries: dict[ParamKey, Tensor]
    arch_fingerprint: str
    meta: dict[str, str] = field(default_factory=dict)

    def keys(self) -> list[ParamKey]:
        return sorted(self.entries)

    def total_params(self) -> int:
        return sum(t.size for t in self.entries.values())


@dataclass
class TaskVector:
    """Entrywise difference between a fine-tuned and a base weight set."""

    entries: dict[ParamKey, Tensor]
    source_task: str
    arch_fingerprint: str = ""
    meta: dict[str, str] = field(default_factory=dict)

    def keys(self) -> list[ParamKey]:
        return sorted(self.entries)


def check_compatible(a, b) -> None:
    """Raise IncompatibleWeightsError naming the first offending key."""
    fp_a = getattr(a, "arch_fingerprint", "")
    fp_b = getattr(b, "arch_fingerprint", "")
    if fp_a and fp_b and fp_a != fp_b:
        raise IncompatibleWeightsError(
            f"architecture fingerprints differ: {fp_a} vs {fp_b}"
        )
    keys_a, keys_b = sorted(a.entries), sorted(b.entries)
    for key in keys_a:
        if key not in b.entries:
            raise IncompatibleWeightsError(f"key {key} missing from second weight set")
    for key in keys_b:
        if key not in a.entries:
            raise IncompatibleWeightsError(f"key {key} missing from first weight set")
    for key in keys_a:
        if a.entries[key].shape != b.entries[key].shape:
            raise IncompatibleWeightsError(
                f"key {key} has shape {a.entries[key].shape} vs {b.entries[key].shape}"
            )


def task_vector(theta_i: ModelWeights, theta_0: ModelWeights, source_task: str = "") -> TaskVector:
    """Entrywise theta_i - theta_0 for compatible weight sets."""
    check_compatible(theta_i, theta_0)
    entries = {
        key: Tensor(theta_i.entries[key].array - theta_0.entries[key].array)
        for key in theta_i.keys()
    }
    return TaskVector(entries, source_task, theta_i.arch_fingerprint)


def apply_task_vector(theta_0: ModelWeights, tau: TaskVector, coeff: float = 1.0) -> ModelWeights:
    check_compatible(theta_0, tau)
    entries = {
        key: Tensor(theta_0.entries[key].array + coeff * tau.entries[key].array)
        for key in theta_0.keys()
    }
    return ModelWeights(entries, theta_0.arch_fingerprint)


# -- serialization -------------------------------------------------------------

_SEPARATOR = b"---\n"


def _format_shape(shape: tuple[int, ...]) -> str:
    return "x".join(str(s) for s in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "-":
        return ()
    try:
        dims = tuple(int(p) for p in text.split("x"))
    except ValueError:
        raise MalformedHeaderError(f"bad shape field {text!r}") from None
    if any(d <= 0 for d in dims):
        raise MalformedHeaderError(f"bad shape field {text!r}")
    return dims


def _encode_key(key: ParamKey) -> str:
    layer, role = key
    for part in (layer, role):
        if "/" in part or any(c.isspace() for c in part):
            raise ValueError(f"key part {part!r} may not contain '/' or whitespace")
    return f"{layer}/{role}"


def _decode_key(text: str) -> ParamKey:
    if text.count("/") != 1:
        raise MalformedHeaderError(f"bad tensor key {text!r}")
    layer, role = text.split("/")
    return layer, role


def save(obj: ModelWeights | TaskVector, path: str, meta: dict[str, str] | None = None) -> None:
    """Write a weight set or task vector; load(save(x)) is bit-exact."""
    if isinstance(obj, ModelWeights):
        kind = "weights"
    elif isinstance(obj, TaskVector):
        kind = "task_vector"
    else:
        raise TypeError(f"cannot save object of type {type(obj).__name__}")

    keys = obj.keys()
    lines = [f"{FORMAT_MAGIC} {FORMAT_VERSION}", f"kind: {kind}"]
    if obj.arch_fingerprint:
        lines.append(f"arch: {obj.arch_fingerprint}")
    if kind == "task_vector":
        lines.append(f"task: {obj.source_task}")
    combined_meta = dict(obj.meta)
    if meta:
        combined_meta.update(meta)
    for mkey in sorted(combined_meta):
        value = combined_meta[mkey]
        if "\n" in mkey or "\n" in str(value):
            raise ValueError("metadata must be single-line")
        lines.append(f"meta.{mkey}: {value}")

    lines.append(f"tensors: {len(keys)}")
    offset = 0
    chunks = []
    for key in keys:
        tensor = obj.entries[key]
        lines.append(
            f"tensor: {_encode_key(key)} {_format_shape(tensor.shape)} {offset} {tensor.size}"
        )
        chunks.append(tensor.flat.astype("<f8").tobytes())
        offset += tensor.size
    lines.append(f"payload: {offset}")

    blob = ("\n".join(lines) + "\n").encode() + _SEPARATOR + b"".join(chunks)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _header_field(lines: list[str], index: int, prefix: str) -> str:
    if index >= len(lines) or not lines[index].startswith(prefix):
        raise MalformedHeaderError(f"expected {prefix!r} line in header")
    return lines[index][len(prefix):].strip()


def load(path: str) -> ModelWeights | TaskVector:
    """Read a container; returns the object kind recorded in the manifest."""
    with open(path, "rb") as handle:
        blob = handle.read()

    sep = blob.find(b"\n" + _SEPARATOR)
    if sep < 0:
        raise MalformedHeaderError("no manifest/payload separator found")
    try:
        header = blob[:sep].decode()
    except UnicodeDecodeError:
        raise MalformedHeaderError("manifest is not valid UTF-8") from None
    payload = blob[sep + 1 + len(_SEPARATOR):]

    lines = header.split("\n")
    magic = lines[0].split(" ")
    if len(magic) != 2 or magic[0] != FORMAT_MAGIC:
        raise MalformedHeaderError(f"bad magic line {lines[0]!r}")
    try:
        version = int(magic[1])
    except ValueError:
        raise MalformedHeaderError(f"bad version field {magic[1]!r}") from None
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")

    kind = _header_field(lines, 1, "kind: ")
    if kind not in ("weights", "task_vector"):
        raise MalformedHeaderError(f"unknown kind {kind!r}")

    idx = 2
    arch = ""
    if idx < len(lines) and lines[idx].startswith("arch: "):
        arch = lines[idx][len("arch: "):].strip()
        idx += 1
    source_task = ""
    if kind == "task_vector":
        source_task = _header_field(lines, idx, "task: ")
        idx += 1
    meta: dict[str, str] = {}
    while idx < len(lines) and lines[idx].startswith("meta."):
        mkey, _, value = lines[idx][len("meta."):].partition(": ")
        meta[mkey] = value
        idx += 1

    count_text = _header_field(lines, idx, "tensors: ")
    try:
        tensor_count = int(count_text)
    except ValueError:
        raise MalformedHeaderError(f"bad tensor count {count_text!r}") from None
    idx += 1

    records = []
    for _ in range(tensor_count):
        fields = _header_field(lines, idx, "tensor: ").split(" ")
        if len(fields) != 4:
            raise MalformedHeaderError(f"bad tensor line {lines[idx]!r}")
        key = _decode_key(fields[0])
        shape = _parse_shape(fields[1])
        try:
            offset, size = int(fields[2]), int(fields[3])
        except ValueError:
            raise MalformedHeaderError(f"bad tensor line {lines[idx]!r}") from None
        records.append((key, shape, offset, size))
        idx += 1

    total_text = _header_field(lines, idx, "payload: ")
    try:
        total = int(total_text)
    except ValueError:
        raise MalformedHeaderError(f"bad payload count {total_text!r}") from None

    if len(payload) < 8 * total:
        raise TruncatedPayloadError(
            f"unexpected end of payload: have {len(payload)} bytes, need {8 * total}"
        )
    if len(payload) > 8 * total:
        raise PayloadMismatchError(
            f"payload has {len(payload)} bytes, manifest declares {8 * total}"
        )

    flat = np.frombuffer(payload, dtype="<f8")
    entries: dict[ParamKey, Tensor] = {}
    for key, shape, offset, size in records:
        expected = 1
        for dim in shape:
            expected *= dim
        if expected != size:
            raise PayloadMismatchError(
                f"tensor {key} declares shape {shape} but {size} elements"
            )
        if offset < 0 or offset + size > total:
            raise PayloadMismatchError(f"tensor {key} overruns the payload")
        entries[key] = Tensor(flat[offset:offset + size].astype(np.float64), shape=shape)

    if kind == "weights":
        return ModelWeights(entries, arch, meta)
    return TaskVector(entries, source_task, arch, meta)


def load_weights(path: str) -> ModelWeights:
    obj = load(path)
    if not isinstance(obj, ModelWeights):
        raise CheckpointFormatError(f"{path} holds a {type(obj).__name__}, not weights")
    return obj


def load_task_vector(path: str) -> TaskVector:
    obj = load(path)
    if not isinstance(obj, TaskVector):
        raise CheckpointFormatError(f"{path} holds a {type(obj).__name__}, not a task vector")
    return obj


def iter_entries(obj) -> Iterator[tuple[ParamKey, Tensor]]:
    for key in obj.keys():
        yield key, obj.entries[key]
