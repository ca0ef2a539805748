"""Checkpoint reading/writing and grouping of matrices into transformer blocks.

Two on-disk formats are supported:

``safetensors``
    8-byte little-endian header length, a UTF-8 JSON header mapping tensor
    names to ``{"dtype", "shape", "data_offsets"}``, then the data region.

``rawbin``
    A JSON manifest ``{"format": "rawbin", "tensors": [{name, shape, dtype,
    file}, ...]}`` next to one little-endian row-major blob per tensor.
    Blobs are encoded in the tensor's recorded dtype so that f16/bf16
    tensors survive a round trip bit-for-bit.

Tensors keep their storage dtype. :meth:`Tensor.values` widens f16/bf16 to
float32 exactly; :meth:`WeightStore.replace` narrows results back.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import math
import os
import re
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from ._io import atomic_write_bytes, atomic_write_json
from .errors import CheckpointFormatError, GroupingError

logger = logging.getLogger(__name__)

# storage numpy dtype per logical dtype; bf16 is carried as raw uint16 bits
STORAGE_DTYPES = {
    "f32": np.dtype("<f4"),
    "f16": np.dtype("<f2"),
    "bf16": np.dtype("<u2"),
}
SAFETENSORS_CODES = {"F32": "f32", "F16": "f16", "BF16": "bf16"}
SAFETENSORS_NAMES = {v: k for k, v in SAFETENSORS_CODES.items()}
FORMATS = ("safetensors", "rawbin")


def bf16_to_f32(bits: np.ndarray) -> np.ndarray:
    """Exact widening: the bf16 bits become the high half of an f32."""
    return (np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


def f32_to_bf16(values: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even narrowing to bf16 bit patterns (NaN stays NaN)."""
    u = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    rounding = ((u >> 16) & 1) + np.uint32(0x7FFF)
    out = ((u + rounding) >> 16).astype(np.uint16)
    nan = np.isnan(values)
    if nan.any():
        out[nan] = ((u[nan] >> 16) | 0x0040).astype(np.uint16)
    return out


@dataclass(frozen=True)
class Tensor:
    shape: tuple[int, ...]
    dtype: str
    data: np.ndarray  # storage array, shaped, read-only

    def __post_init__(self):
        if self.dtype not in STORAGE_DTYPES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if len(self.shape) < 1 or any(int(s) <= 0 for s in self.shape):
            raise ValueError(f"shape must have >=1 positive extents, got {self.shape}")
        if self.data.dtype != STORAGE_DTYPES[self.dtype]:
            raise ValueError(f"storage dtype {self.data.dtype} does not match {self.dtype}")
        if tuple(self.data.shape) != tuple(self.shape):
            raise ValueError(f"buffer shape {self.data.shape} != declared {self.shape}")

    @classmethod
    def from_array(cls, array: np.ndarray, dtype: str = "f32") -> "Tensor":
        """Build from float values, narrowing to ``dtype``."""
        array = np.asarray(array)
        if dtype == "f32":
            data = array.astype("<f4", copy=True)
        elif dtype == "f16":
            data = array.astype("<f2", copy=True)
        elif dtype == "bf16":
            data = f32_to_bf16(array.astype(np.float32)).astype("<u2")
        else:
            raise ValueError(f"unsupported dtype {dtype!r}")
        data = np.ascontiguousarray(data).reshape(array.shape)
        data.setflags(write=False)
        return cls(tuple(int(s) for s in array.shape), dtype, data)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def values(self) -> np.ndarray:
        """Float32 view of the data (exact for every supported dtype)."""
        if self.dtype == "f32":
            return self.data
        if self.dtype == "f16":
            return self.data.astype(np.float32)
        return bf16_to_f32(self.data).reshape(self.shape)

    def tobytes(self) -> bytes:
        return np.ascontiguousarray(self.data).tobytes()


class WeightStore(Mapping[str, Tensor]):
    """Immutable ordered mapping of tensor name to :class:`Tensor`."""

    def __init__(self, entries: Mapping[str, Tensor] | None = None, metadata: Mapping[str, str] | None = None):
        self._entries: OrderedDict[str, Tensor] = OrderedDict(entries or {})
        self.metadata: dict[str, str] = dict(metadata or {})

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype: str = "f32") -> "WeightStore":
        return cls({name: Tensor.from_array(a, dtype) for name, a in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"WeightStore({len(self)} tensors)"

    def matrix(self, name: str) -> np.ndarray:
        """Float32 values of a 2-D tensor."""
        t = self._entries[name]
        if t.ndim != 2:
            raise ValueError(f"tensor {name!r} is {t.ndim}-D, expected a matrix")
        return t.values()

    def param_count(self, name: str) -> int:
        return self._entries[name].size

    def replace(self, updates: Mapping[str, np.ndarray]) -> "WeightStore":
        """New store with the given tensors replaced, each kept in its original dtype."""
        missing = [n for n in updates if n not in self._entries]
        if missing:
            raise KeyError(f"unknown tensors: {missing}")
        entries = OrderedDict()
        for name, t in self._entries.items():
            if name in updates:
                new = np.asarray(updates[name])
                if tuple(new.shape) != t.shape:
                    raise ValueError(f"shape mismatch for {name!r}: {new.shape} vs {t.shape}")
                entries[name] = Tensor.from_array(new, t.dtype)
            else:
                entries[name] = t
        return WeightStore(entries, self.metadata)

    def equal_bits(self, other: "WeightStore") -> bool:
        """True if names, order, shapes, dtypes and raw bytes all match."""
        if list(self) != list(other):
            return False
        for name in self:
            a, b = self[name], other[name]
            if a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes():
                return False
        return True


# --------------------------------------------------------------------------
# format detection and dispatch


def detect_format(path: str | os.PathLike) -> str:
    p = str(path)
    if p.endswith(".safetensors"):
        return "safetensors"
    if p.endswith(".json"):
        return "rawbin"
    with open(p, "rb") as fh:
        head = fh.read(1)
    return "rawbin" if head in (b"{", b"[") else "safetensors"


def load_checkpoint(path: str | os.PathLike, format: str | None = None) -> WeightStore:
    format = format or detect_format(path)
    if format == "safetensors":
        return _load_safetensors(Path(path))
    if format == "rawbin":
        return _load_rawbin(Path(path))
    raise ValueError(f"unknown checkpoint format {format!r}; expected one of {FORMATS}")


def save_checkpoint(store: WeightStore, path: str | os.PathLike, format: str | None = None) -> None:
    format = format or ("rawbin" if str(path).endswith(".json") else "safetensors")
    if format == "safetensors":
        atomic_write_bytes(path, safetensors_bytes(store))
    elif format == "rawbin":
        _save_rawbin(store, Path(path))
    else:
        raise ValueError(f"unknown checkpoint format {format!r}; expected one of {FORMATS}")


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise _DuplicateKey(key)
        out[key] = value
    return out


class _DuplicateKey(Exception):
    def __init__(self, key):
        self.key = key


def _parse_json(raw: bytes, base_offset: int, what: str):
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"{what} is not valid UTF-8", base_offset + exc.start) from None
    try:
        return json.loads(text, object_pairs_hook=_reject_duplicates)
    except _DuplicateKey as exc:
        pos = text.find(json.dumps(exc.key))
        raise CheckpointFormatError(
            f"duplicate tensor name {exc.key!r} in {what}", base_offset + max(pos, 0)
        ) from None
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{what} is not valid JSON: {exc.msg}", base_offset + exc.pos) from None


def _check_shape(shape, name: str, offset: int) -> tuple[int, ...]:
    if (
        not isinstance(shape, list)
        or len(shape) < 1
        or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in shape)
    ):
        raise CheckpointFormatError(f"tensor {name!r} has invalid shape {shape!r}", offset)
    return tuple(shape)


# --------------------------------------------------------------------------
# safetensors


def _load_safetensors(path: Path) -> WeightStore:
    blob = path.read_bytes()
    size = len(blob)
    if size < 8:
        raise CheckpointFormatError("file shorter than the 8-byte header length field", 0)
    (header_len,) = struct.unpack_from("<Q", blob, 0)
    if 8 + header_len > size:
        raise CheckpointFormatError(
            f"header length {header_len} exceeds file size {size}", 0
        )
    header = _parse_json(blob[8 : 8 + header_len], 8, "safetensors header")
    if not isinstance(header, dict):
        raise CheckpointFormatError("safetensors header is not a JSON object", 8)
    data_start = 8 + header_len
    metadata = header.pop("__metadata__", None) or {}

    entries = OrderedDict()
    # data order, not JSON order, so offsets are validated sequentially
    items = []
    for name, info in header.items():
        if not isinstance(info, dict) or not {"dtype", "shape", "data_offsets"} <= info.keys():
            raise CheckpointFormatError(f"malformed header entry for {name!r}", 8)
        offsets = info["data_offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and o >= 0 for o in offsets)
            or offsets[1] < offsets[0]
        ):
            raise CheckpointFormatError(f"invalid data_offsets for {name!r}: {offsets!r}", 8)
        items.append((offsets[0], name, info))
    items.sort(key=lambda it: (it[0], it[1]))

    for begin, name, info in items:
        end = info["data_offsets"][1]
        abs_begin = data_start + begin
        dtype = SAFETENSORS_CODES.get(info["dtype"])
        if dtype is None:
            raise CheckpointFormatError(f"unsupported dtype {info['dtype']!r} for {name!r}", abs_begin)
        shape = _check_shape(info["shape"], name, abs_begin)
        itemsize = STORAGE_DTYPES[dtype].itemsize
        if end - begin != math.prod(shape) * itemsize:
            raise CheckpointFormatError(
                f"byte range of {name!r} ({end - begin}) does not match shape {shape} x {itemsize}",
                abs_begin,
            )
        if data_start + end > size:
            raise CheckpointFormatError(f"data for {name!r} truncated (file has {size} bytes)", size)
        data = np.frombuffer(blob, dtype=STORAGE_DTYPES[dtype], count=math.prod(shape), offset=abs_begin)
        data = data.reshape(shape).copy()
        data.setflags(write=False)
        entries[name] = (begin, Tensor(shape, dtype, data))

    # keep header order for the store
    ordered = OrderedDict((name, entries[name][1]) for name in header)
    return WeightStore(ordered, {str(k): str(v) for k, v in metadata.items()})


def safetensors_bytes(store: WeightStore) -> bytes:
    header: dict = {}
    if store.metadata:
        header["__metadata__"] = dict(store.metadata)
    offset = 0
    chunks = []
    for name, t in store.items():
        if t.dtype not in SAFETENSORS_NAMES:
            raise CheckpointFormatError(f"dtype {t.dtype!r} not representable in safetensors")
        raw = t.tobytes()
        header[name] = {
            "dtype": SAFETENSORS_NAMES[t.dtype],
            "shape": list(t.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        offset += len(raw)
        chunks.append(raw)
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    head += b" " * (-len(head) % 8)
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


# --------------------------------------------------------------------------
# rawbin


def _load_rawbin(manifest_path: Path) -> WeightStore:
    raw = manifest_path.read_bytes()
    manifest = _parse_json(raw, 0, "rawbin manifest")
    if isinstance(manifest, dict):
        tensors = manifest.get("tensors")
        metadata = manifest.get("metadata") or {}
    else:
        tensors, metadata = manifest, {}
    if not isinstance(tensors, list):
        raise CheckpointFormatError("rawbin manifest has no 'tensors' list", 0)

    root = manifest_path.parent
    entries = OrderedDict()
    for i, entry in enumerate(tensors):
        if not isinstance(entry, dict) or not {"name", "shape", "dtype", "file"} <= entry.keys():
            raise CheckpointFormatError(f"manifest entry {i} lacks name/shape/dtype/file", 0)
        name = entry["name"]
        if name in entries:
            pos = raw.find(json.dumps(name).encode())
            raise CheckpointFormatError(f"duplicate tensor name {name!r}", max(pos, 0))
        dtype = entry["dtype"]
        if dtype not in STORAGE_DTYPES:
            raise CheckpointFormatError(f"unsupported dtype {dtype!r} for {name!r}", 0)
        shape = _check_shape(entry["shape"], name, 0)
        blob_path = root / entry["file"]
        try:
            blob = blob_path.read_bytes()
        except FileNotFoundError:
            raise CheckpointFormatError(f"blob file {entry['file']!r} for {name!r} not found", 0) from None
        want = math.prod(shape) * STORAGE_DTYPES[dtype].itemsize
        if len(blob) < want:
            raise CheckpointFormatError(
                f"blob for {name!r} truncated: {len(blob)} of {want} bytes", len(blob)
            )
        if len(blob) > want:
            raise CheckpointFormatError(f"blob for {name!r} has {len(blob) - want} trailing bytes", want)
        data = np.frombuffer(blob, dtype=STORAGE_DTYPES[dtype]).reshape(shape).copy()
        data.setflags(write=False)
        entries[name] = Tensor(shape, dtype, data)
    return WeightStore(entries, {str(k): str(v) for k, v in metadata.items()})


def _blob_name(index: int, name: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", name)
    return f"{index:05d}_{safe}.bin"


def _save_rawbin(store: WeightStore, manifest_path: Path) -> None:
    root = manifest_path.parent
    stem = manifest_path.name[:-5] if manifest_path.name.endswith(".json") else manifest_path.name
    blob_dir = f"{stem}.blobs"
    tensors = []
    for i, (name, t) in enumerate(store.items()):
        rel = f"{blob_dir}/{_blob_name(i, name)}"
        atomic_write_bytes(root / rel, t.tobytes())
        tensors.append({"name": name, "shape": list(t.shape), "dtype": t.dtype, "file": rel})
    manifest = {"format": "rawbin", "version": 1, "tensors": tensors}
    if store.metadata:
        manifest["metadata"] = dict(store.metadata)
    atomic_write_json(manifest_path, manifest)


# --------------------------------------------------------------------------
# block grouping


@dataclass(frozen=True)
class GroupingRules:
    """``block_pattern`` is either a template using ``{i}`` for the block
    index and ``*`` as wildcard (``"enc.{i}.*"``), or a regular expression
    whose first capture group is the index. ``exclude_patterns`` are
    shell-style globs."""

    block_pattern: str
    exclude_patterns: tuple[str, ...] = ()

    def compile(self) -> re.Pattern:
        pat = self.block_pattern
        if "{i}" in pat:
            parts = []
            for chunk in re.split(r"(\{i\}|\*)", pat):
                if chunk == "{i}":
                    parts.append(r"(\d+)")
                elif chunk == "*":
                    parts.append(".*")
                else:
                    parts.append(re.escape(chunk))
            # templates are prefixes unless they end in an explicit wildcard
            return re.compile("^" + "".join(parts))
        try:
            rx = re.compile(pat)
        except re.error as exc:
            raise GroupingError(f"invalid block_pattern {pat!r}: {exc}") from None
        if rx.groups < 1:
            raise GroupingError(f"block_pattern {pat!r} needs a capture group for the block index")
        return rx

    def excluded(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, p) for p in self.exclude_patterns)


PRESETS: dict[str, GroupingRules] = {
    "llama": GroupingRules(
        "model.layers.{i}.",
        ("*embed_tokens*", "lm_head*", "*norm*"),
    ),
    "gpt2": GroupingRules(
        r"^(?:transformer\.)?h\.(\d+)\.",
        ("*wte*", "*wpe*", "lm_head*", "*ln_*"),
    ),
}


def load_rules(spec: str | os.PathLike | GroupingRules) -> GroupingRules:
    """Resolve a preset name, a rules JSON file path, or pass rules through."""
    if isinstance(spec, GroupingRules):
        return spec
    key = str(spec)
    if key in PRESETS:
        return PRESETS[key]
    path = Path(key)
    if not path.exists():
        raise GroupingError(f"unknown grouping preset or missing rules file: {key!r}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GroupingError(f"rules file {key!r} is not valid JSON: {exc}") from None
    if not isinstance(obj, dict) or not isinstance(obj.get("block_pattern"), str):
        raise GroupingError(f"rules file {key!r} must contain a string 'block_pattern'")
    excludes = obj.get("exclude_patterns", [])
    if not isinstance(excludes, list) or not all(isinstance(p, str) for p in excludes):
        raise GroupingError("'exclude_patterns' must be a list of strings")
    return GroupingRules(obj["block_pattern"], tuple(excludes))


@dataclass(frozen=True)
class Block:
    index: int
    names: tuple[str, ...]


@dataclass(frozen=True)
class BlockGrouping:
    blocks: tuple[Block, ...]
    ungrouped: tuple[str, ...]
    # 2-D tensors that matched neither the block pattern nor an exclusion
    unmatched: tuple[str, ...] = field(default=())

    @property
    def grouped_names(self) -> list[str]:
        return [n for b in self.blocks for n in b.names]

    def block_of(self) -> dict[str, int]:
        return {n: b.index for b in self.blocks for n in b.names}


def group_blocks(store: Mapping[str, Tensor], rules: GroupingRules | str) -> BlockGrouping:
    """Assign every 2-D tensor to a block or to the ungrouped list.

    Output is independent of the store's iteration order: member names are
    sorted within each block and blocks are sorted by index.
    """
    rules = load_rules(rules)
    rx = rules.compile()
    members: dict[int, list[str]] = {}
    ungrouped: list[str] = []
    unmatched: list[str] = []
    for name in sorted(store):
        t = store[name]
        if t.ndim != 2 or rules.excluded(name):
            ungrouped.append(name)
            continue
        m = rx.search(name)
        if m is None:
            unmatched.append(name)
            ungrouped.append(name)
            continue
        members.setdefault(int(m.group(1)), []).append(name)

    if unmatched:
        logger.warning("%d 2-D tensors matched no grouping rule: %s", len(unmatched), ", ".join(unmatched))
    indices = sorted(members)
    if indices and indices != list(range(indices[0], indices[0] + len(indices))):
        raise GroupingError(f"block indices are not contiguous: {indices}")
    blocks = tuple(Block(i, tuple(members[i])) for i in indices)
    return BlockGrouping(blocks, tuple(ungrouped), tuple(unmatched))
