"""Named, tagged parameter trees: the unit of sharing, aggregation, and filtering.

A :class:`ParamTree` maps dotted parameter names ("layer3.gamma") to float64
arrays, each carrying a structural :class:`ParamTag`. All cross-client traffic
(broadcasts, uploads, aggregates) is expressed as trees or filtered subtrees,
so what is shared and what stays local is decided by tags, never by ad-hoc
name lists.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Mapping

import numpy as np

from .errors import CongruenceError, FedsimError


class ParamTag(Enum):
    """Structural role of a parameter, derived from layer kind and position."""

    BODY = "body"
    BN_STAT = "bn_stat"
    BN_LEARNABLE = "bn_learnable"
    HEAD = "head"

    @property
    def is_bn(self) -> bool:
        return self in (ParamTag.BN_STAT, ParamTag.BN_LEARNABLE)


class ShareFilter(Enum):
    """Which tagged parameters a strategy shares with the server.

    EXCLUDE_BN keeps every batch-norm slot local (FedBN), EXCLUDE_BN_STAT
    keeps only running statistics local (Fed-sta), EXCLUDE_BN_LEARNABLE keeps
    only gamma/beta local (Fed-para), BODY_ONLY keeps the classifier head
    local (FedRep; batch-norm slots travel with the body).
    """

    ALL = "all"
    EXCLUDE_BN = "exclude_bn"
    EXCLUDE_BN_STAT = "exclude_bn_stat"
    EXCLUDE_BN_LEARNABLE = "exclude_bn_learnable"
    BODY_ONLY = "body_only"

    def admits(self, tag: ParamTag) -> bool:
        if self is ShareFilter.ALL:
            return True
        if self is ShareFilter.EXCLUDE_BN:
            return not tag.is_bn
        if self is ShareFilter.EXCLUDE_BN_STAT:
            return tag is not ParamTag.BN_STAT
        if self is ShareFilter.EXCLUDE_BN_LEARNABLE:
            return tag is not ParamTag.BN_LEARNABLE
        return tag is not ParamTag.HEAD  # BODY_ONLY


def _freeze(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, order="C")
    arr.setflags(write=False)
    return arr


class ParamTree:
    """Immutable map from dotted names to (float64 array, tag).

    Values are copied in and marked read-only, so trees can be shared across
    clients and rounds without defensive copying.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, tuple[np.ndarray, ParamTag]]):
        self._entries = {
            name: (_freeze(arr), tag) for name, (arr, tag) in entries.items()
        }

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray],
                    tags: Mapping[str, ParamTag] | None = None) -> "ParamTree":
        tags = tags or {}
        return cls({n: (a, tags.get(n, ParamTag.BODY)) for n, a in arrays.items()})

    def names(self) -> list[str]:
        return sorted(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def get(self, name: str) -> np.ndarray:
        return self._entries[name][0]

    def tag(self, name: str) -> ParamTag:
        return self._entries[name][1]

    def items(self) -> Iterator[tuple[str, np.ndarray, ParamTag]]:
        for name in self.names():
            arr, tag = self._entries[name]
            yield name, arr, tag

    def congruent(self, other: "ParamTree") -> bool:
        if self.names() != other.names():
            return False
        return all(self.get(n).shape == other.get(n).shape for n in self.names())

    def num_values(self) -> int:
        return sum(self.get(n).size for n in self.names())

    def flatten(self) -> np.ndarray:
        """Concatenate all entries, names in sorted order, into one vector."""
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([self.get(n).ravel() for n in self.names()])

    def zeros_like(self) -> "ParamTree":
        return ParamTree(
            {n: (np.zeros_like(a), t) for n, a, t in self.items()}
        )

    def equal(self, other: "ParamTree") -> bool:
        """Bitwise equality: same names, tags, shapes, and values."""
        if self.names() != other.names():
            return False
        for name, arr, tag in self.items():
            if tag is not other.tag(name):
                return False
            o = other.get(name)
            if arr.shape != o.shape or not np.array_equal(arr, o):
                return False
        return True

    def __repr__(self) -> str:
        return f"ParamTree({len(self._entries)} entries, {self.num_values()} values)"


@dataclass(frozen=True)
class ModelUpdate:
    """A client's upload: a parameter delta plus its training-set size.

    ``client_id`` is carried for sorted-order aggregation and audit logging;
    it does not enter the arithmetic.
    """

    delta: ParamTree
    sample_count: int
    client_id: int | None = None

    def __post_init__(self):
        if self.sample_count <= 0:
            raise FedsimError(f"sample_count must be positive, got {self.sample_count}")


def _require_congruent(x: ParamTree, y: ParamTree, op: str) -> None:
    if not x.congruent(y):
        raise CongruenceError(f"{op}: trees are not congruent "
                              f"({len(x)} vs {len(y)} entries)")


def tree_axpy(a: float, x: ParamTree, y: ParamTree) -> ParamTree:
    """Elementwise a*x + y over congruent trees."""
    _require_congruent(x, y, "tree_axpy")
    return ParamTree(
        {n: (a * x.get(n) + y.get(n), t) for n, _, t in y.items()}
    )


def tree_scale(a: float, x: ParamTree) -> ParamTree:
    """Elementwise a*x."""
    return ParamTree({n: (a * arr, t) for n, arr, t in x.items()})

def tree_sub(x: ParamTree, y: ParamTree) -> ParamTree:
    """Elementwise x - y over congruent trees."""
    _require_congruent(x, y, "tree_sub")
    return ParamTree({n: (x.get(n) - y.get(n), t) for n, _, t in x.items()})


def tree_l2_distance(x: ParamTree, y: ParamTree) -> float:
    """Euclidean distance between two congruent trees, all entries flattened."""
    _require_congruent(x, y, "tree_l2_distance")
    total = 0.0
    for name in x.names():
        d = x.get(name) - y.get(name)
        total += float(np.dot(d.ravel(), d.ravel()))
    return float(np.sqrt(total))


def tree_l2_norm(x: ParamTree) -> float:
    total = 0.0
    for name in x.names():
        v = x.get(name).ravel()
        total += float(np.dot(v, v))
    return float(np.sqrt(total))


def apply_filter(tree: ParamTree, f: ShareFilter) -> ParamTree:
    """Keep exactly the entries whose tag the policy admits."""
    return ParamTree(
        {n: (arr, tag) for n, arr, tag in tree.items() if f.admits(tag)}
    )


def merge_into(model: ParamTree, partial: ParamTree) -> ParamTree:
    """Overwrite ``model``'s named entries with ``partial``'s values.

    Entries absent from ``partial`` (the personalized part) are untouched.
    Unknown or mis-shaped names raise.
    """
    merged = {n: (arr, tag) for n, arr, tag in model.items()}
    for name, arr, _ in partial.items():
        if name not in merged:
            raise CongruenceError(f"merge_into: unknown parameter {name!r}")
        if merged[name][0].shape != arr.shape:
            raise CongruenceError(
                f"merge_into: shape mismatch for {name!r}: "
                f"{merged[name][0].shape} vs {arr.shape}")
        merged[name] = (arr, merged[name][1])
    return ParamTree(merged)


# ---------------------------------------------------------------------------
# Serialization: deterministic binary layout used for checkpoints and for
# asserting on upload wire bytes. Names sorted; per entry:
#   u32 name length | name bytes (utf-8) | u32 dim count | u32 dims | f64 data
# All integers and floats little-endian.
# ---------------------------------------------------------------------------

def tree_to_bytes(tree: ParamTree) -> bytes:
    out = bytearray()
    for name in tree.names():
        arr = tree.get(name)
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw))
        out += raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f8", copy=False).tobytes(order="C")
    return bytes(out)


def tree_from_bytes(data: bytes, tags: Mapping[str, ParamTag] | None = None) -> ParamTree:
    tags = tags or {}
    entries: dict[str, tuple[np.ndarray, ParamTag]] = {}
    pos = 0
    n = len(data)
    while pos < n:
        if pos + 4 > n:
            raise FedsimError("truncated parameter blob (name length)")
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        entries[name] = (arr, tags.get(name, ParamTag.BODY))
    return ParamTree(entries)


def names_in_bytes(data: bytes) -> list[str]:
    """Parameter names present in a serialized blob, in stored (sorted) order."""
    names = []
    pos = 0
    while pos < len(data):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        names.append(data[pos:pos + name_len].decode("utf-8"))
        pos += name_len
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim + 8 * int(np.prod(dims) if ndim else 1)
    return names


def tag_manifest(tree: ParamTree) -> str:
    """Text manifest (name <TAB> tag) emitted alongside binary checkpoints."""
    return "".join(f"{n}\t{t.value}\n" for n, _, t in tree.items())


def parse_tag_manifest(text: str) -> dict[str, ParamTag]:
    tags = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        name, _, value = line.partition("\t")
        tags[name] = ParamTag(value)
    return tags
