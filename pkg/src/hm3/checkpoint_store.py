"""Checkpoint value type and its on-disk format.

File layout::

    [0:8)      u64 little-endian manifest length n
    [8:8+n)    UTF-8 JSON manifest
    [8+n:)     payload: raw little-endian float32 tensor data

Manifest tensor offsets are relative to the payload start.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

FAMILIES = ("tiny_text_v1",)
ROLES = ("base", "fine_tuned", "merged", "expanded")
HEAD_TENSORS = ("head.weight", "head.bias")


class CheckpointError(ValueError):
    """Base class for checkpoint validation and format errors."""


class InvariantError(CheckpointError):
    pass


class MalformedHeaderError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class UnknownFamilyError(CheckpointError):
    pass


class PayloadLengthMismatchError(CheckpointError):
    pass


class OverlappingExtentsError(CheckpointError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    family: str
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    head_out_dim: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UnknownFamilyError(f"unknown architecture family {self.family!r}")
        for name in ("vocab_size", "embed_dim", "hidden_dim", "head_out_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise InvariantError(f"{name} must be a positive int, got {value!r}")

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "embed.weight": (self.vocab_size, self.embed_dim),
            "dense.weight": (self.embed_dim, self.hidden_dim),
            "dense.bias": (self.hidden_dim,),
            "head.weight": (self.hidden_dim, self.head_out_dim),
            "head.bias": (self.head_out_dim,),
        }

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "head_out_dim": self.head_out_dim,
        }


def validate_labels(labels: Sequence[str]) -> tuple[str, ...]:
    labels = tuple(labels)
    if not labels:
        raise InvariantError("label space is empty")
    for label in labels:
        if not isinstance(label, str):
            raise InvariantError(f"labels must be strings, got {label!r}")
    seen = set()
    dupes = [lab for lab in labels if lab in seen or seen.add(lab)]
    if dupes:
        raise InvariantError(f"duplicate labels: {sorted(set(dupes))}")
    return labels


@dataclass(frozen=True)
class Checkpoint:
    """Named float32 tensors plus architecture, labels and role.

    ``layout`` and ``recipe`` are raw manifest blocks (lists/dicts) so this
    module stays independent of the transform and merge modules.
    """

    arch: ArchDescriptor
    tensors: Mapping[str, np.ndarray]
    labels: tuple[str, ...]
    role: str = "fine_tuned"
    layout: list | None = None
    recipe: dict | None = None
    meta: dict = field(default_factory=dict)

    def validate(self) -> "Checkpoint":
        if self.role not in ROLES:
            raise InvariantError(f"unknown role {self.role!r}")
        labels = validate_labels(self.labels)
        # empty labels are allowed in fine-tuned models; they are repaired by sanitize_labels
        if len(labels) != self.arch.head_out_dim:
            raise InvariantError(
                f"head_out_dim {self.arch.head_out_dim} != number of labels {len(labels)}"
            )
        expected = self.arch.tensor_shapes()
        missing = sorted(set(expected) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(expected))
        if missing or extra:
            raise InvariantError(f"tensor names mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.dtype != np.float32:
                raise InvariantError(f"{name}: dtype {t.dtype}, expected float32")
            if tuple(t.shape) != shape:
                raise InvariantError(f"{name}: shape {list(t.shape)}, expected {list(shape)}")
            if not np.all(np.isfinite(t)):
                raise InvariantError(f"{name}: contains NaN or Inf")
        return self

    def with_tensors(self, tensors: Mapping[str, np.ndarray], **changes) -> "Checkpoint":
        return replace(self, tensors=dict(tensors), **changes)


def make_checkpoint(arch: ArchDescriptor, tensors: Mapping[str, Any], labels: Sequence[str],
                    role: str = "fine_tuned", **kw) -> Checkpoint:
    """Build and validate a checkpoint, coercing tensors to read-only float32."""
    frozen = {}
    for name, value in tensors.items():
        arr = np.array(value, dtype=np.float32, order="C")
        arr.setflags(write=False)
        frozen[name] = arr
    return Checkpoint(arch, frozen, tuple(labels), role, **kw).validate()


def tensors_equal(a: Checkpoint, b: Checkpoint) -> bool:
    """Bitwise equality of tensor data (and names/shapes)."""
    if set(a.tensors) != set(b.tensors):
        return False
    for name in a.tensors:
        x, y = a.tensors[name], b.tensors[name]
        if x.shape != y.shape or x.tobytes() != y.tobytes():
            return False
    return True


def _manifest(cp: Checkpoint) -> tuple[dict, list[np.ndarray]]:
    entries, blobs, offset = [], [], 0
    for name in cp.arch.tensor_shapes():
        arr = np.ascontiguousarray(cp.tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32",
                        "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr)
        offset += arr.nbytes
    manifest: dict[str, Any] = {
        "arch": cp.arch.to_dict(),
        "labels": list(cp.labels),
        "role": cp.role,
        "tensors": entries,
    }
    if cp.layout is not None:
        manifest["layout"] = cp.layout
    if cp.recipe is not None:
        manifest["recipe"] = cp.recipe
    if cp.meta:
        manifest["meta"] = cp.meta
    return manifest, blobs


def dumps(cp: Checkpoint) -> bytes:
    cp.validate()
    manifest, blobs = _manifest(cp)
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([struct.pack("<Q", len(header)), header, *(b.tobytes() for b in blobs)])


def save(cp: Checkpoint, path: str | os.PathLike) -> None:
    data = dumps(cp)
    with open(path, "wb") as f:
        f.write(data)


def _require(manifest: dict, key: str, kind):
    if key not in manifest or not isinstance(manifest[key], kind):
        raise MalformedHeaderError(f"manifest field {key!r} missing or not {kind.__name__}")
    return manifest[key]


def loads(data: bytes) -> Checkpoint:
    if len(data) < 8:
        raise MalformedHeaderError("file shorter than the 8-byte manifest length prefix")
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise MalformedHeaderError(f"manifest length {n} exceeds file size {len(data)}")
    try:
        manifest = json.loads(data[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeaderError(f"manifest is not valid UTF-8 JSON: {e}") from None
    if not isinstance(manifest, dict):
        raise MalformedHeaderError("manifest is not a JSON object")

    arch_raw = _require(manifest, "arch", dict)
    if arch_raw.get("family") not in FAMILIES:
        raise UnknownFamilyError(f"unknown architecture family {arch_raw.get('family')!r}")
    try:
        arch = ArchDescriptor(**arch_raw)
    except TypeError as e:
        raise MalformedHeaderError(f"bad arch block: {e}") from None
    labels = _require(manifest, "labels", list)
    role = _require(manifest, "role", str)
    entries = _require(manifest, "tensors", list)

    payload = memoryview(data)[8 + n:]
    extents, tensors = [], {}
    for entry in entries:
        if not isinstance(entry, dict):
            raise MalformedHeaderError("tensor entry is not an object")
        try:
            name, shape = entry["name"], [int(s) for s in entry["shape"]]
            offset, nbytes, dtype = int(entry["offset"]), int(entry["nbytes"]), entry["dtype"]
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedHeaderError(f"bad tensor entry {entry!r}: {e}") from None
        if dtype != "f32":
            raise MalformedHeaderError(f"{name}: unsupported dtype {dtype!r}")
        if offset < 0 or nbytes < 0 or any(s <= 0 for s in shape):
            raise MalformedHeaderError(f"{name}: negative offset/size or non-positive shape")
        if nbytes != 4 * math.prod(shape):
            raise PayloadLengthMismatchError(
                f"{name}: nbytes {nbytes} does not match shape {shape} (expected {4 * math.prod(shape)})"
            )
        if name in tensors:
            raise MalformedHeaderError(f"duplicate tensor name {name!r}")
        if offset + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"truncated payload: {name} needs bytes [{offset}, {offset + nbytes}) "
                f"but payload has {len(payload)}"
            )
        extents.append((offset, offset + nbytes, name))
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4").astype(np.float32).reshape(shape)
        arr.setflags(write=False)
        tensors[name] = arr

    extents.sort()
    for (s0, e0, a), (s1, e1, b) in zip(extents, extents[1:]):
        if s1 < e0:
            raise OverlappingExtentsError(f"overlapping tensor extents: {a} and {b}")
    used = sum(e - s for s, e, _ in extents)
    if used != len(payload):
        raise PayloadLengthMismatchError(
            f"manifest describes {used} payload bytes but file carries {len(payload)}"
        )
    cp = Checkpoint(arch, tensors, tuple(labels), role,
                    layout=manifest.get("layout"), recipe=manifest.get("recipe"),
                    meta=manifest.get("meta", {}))
    return cp.validate()


def load(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        return loads(f.read())


def compatible_for_merge(cps: Sequence[Checkpoint]) -> tuple[bool, list[str]]:
    """Check that checkpoints share everything except the head width.

    Returns ``(ok, diagnostics)``; diagnostics list every mismatch against
    the first checkpoint.
    """
    if len(cps) < 2:
        return False, [f"need at least 2 checkpoints, got {len(cps)}"]
    ref = cps[0]
    diags = []
    for i, cp in enumerate(cps[1:], start=1):
        for fld in ("family", "vocab_size", "embed_dim", "hidden_dim"):
            a, b = getattr(ref.arch, fld), getattr(cp.arch, fld)
            if a != b:
                diags.append(f"checkpoint {i}: arch.{fld} {b!r} != {a!r} (checkpoint 0)")
        for name, t in ref.tensors.items():
            if name in HEAD_TENSORS:
                continue
            other = cp.tensors.get(name)
            if other is None:
                diags.append(f"checkpoint {i}: missing tensor {name}")
            elif other.shape != t.shape:
                diags.append(
                    f"checkpoint {i}: {name} shape {list(other.shape)} != {list(t.shape)} (checkpoint 0)"
                )
        for name in cp.tensors:
            if name not in ref.tensors:
                diags.append(f"checkpoint {i}: unexpected tensor {name}")
    return not diags, diags
