"""Named parameters, share-groups, and the binary checkpoint codec.

Tied parameters are aliases: every name in a group points at the same
:class:`~semi3net.tensor.Tensor` object, so gradients from every branch that
uses it accumulate into one entry and the optimizer updates it once.
"""

from __future__ import annotations

import fnmatch
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"S3NET001"

STRATEGIES = ("semi3", "all_sharing", "fc_only", "sketch_edgemap_only")

# Head parameters (FC stack, embedding layer, classifier) share one suffix
# pattern across roles; convolution parameters another.
_CONV = "{role}.conv*"
_HEAD = ("{role}.fc*", "{role}.embed.*", "{role}.cls.*")


class CheckpointFormatError(ValueError):
    """A checkpoint file is truncated, corrupt, or internally inconsistent."""


@dataclass(frozen=True)
class SharePlan:
    """Which parameter-name patterns are tied together, per sharing strategy."""

    strategy: str
    rules: tuple[tuple[str, str], ...] = field(default=())

    @classmethod
    def from_strategy(cls, strategy: str) -> "SharePlan":
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown share strategy {strategy!r}; expected one of {STRATEGIES}")
        rules: list[tuple[str, str]] = []
        conv_roles = {
            "semi3": ("sketch", "edgemap"),
            "sketch_edgemap_only": ("sketch", "edgemap"),
            "all_sharing": ("sketch", "image", "edgemap"),
            "fc_only": (),
        }[strategy]
        conv_group = "conv-all" if strategy == "all_sharing" else "SE-conv"
        for role in conv_roles:
            rules.append((_CONV.format(role=role), conv_group))
        if strategy in ("semi3", "all_sharing", "fc_only"):
            for role in ("sketch", "image", "edgemap"):
                for pat in _HEAD:
                    rules.append((pat.format(role=role), "FC-all"))
        return cls(strategy, tuple(rules))

    def group_members(self, names) -> dict[str, list[list[str]]]:
        """Resolve rules against ``names``.

        Returns ``group_id -> list of alias sets``; each alias set holds the
        names (one per role) that must become one tensor, e.g.
        ``["sketch.conv1_1.weight", "edgemap.conv1_1.weight"]``.
        """
        by_group: dict[str, dict[str, list[str]]] = {}
        for pattern, gid in self.rules:
            role = pattern.split(".", 1)[0]
            for name in names:
                if fnmatch.fnmatchcase(name, pattern):
                    suffix = name[len(role) + 1:]
                    by_group.setdefault(gid, {}).setdefault(suffix, []).append(name)
        return {gid: list(sets.values()) for gid, sets in by_group.items()}


class ParameterStore:
    """Registry of trainable tensors plus their tying topology.

    ``entries`` preserves registration order, which is also the order in
    which the seeded generator draws initial values.
    """

    def __init__(self, seed: int = 0):
        self.entries: dict[str, Tensor] = {}
        self.groups: dict[str, list[list[str]]] = {}
        self.momentum: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(seed)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def names(self) -> list[str]:
        return list(self.entries)

    def register(self, name: str, shape, init: str = "zeros", sigma: float = 0.01) -> Tensor:
        """Create a trainable tensor; ``init`` is ``gaussian``, ``zeros`` or ``identity``."""
        if name in self.entries:
            raise KeyError(f"parameter {name!r} already registered")
        shape = tuple(int(s) for s in shape)
        if init == "gaussian":
            data = self.rng.normal(0.0, sigma, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "identity":
            if len(shape) != 2:
                raise ValueError("identity init needs a 2-D shape")
            data = np.eye(*shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.entries[name] = t
        return t

    def unique(self) -> list[tuple[str, Tensor]]:
        """One ``(canonical name, tensor)`` per underlying tensor, in registration order."""
        seen: set[int] = set()
        out = []
        for name, t in self.entries.items():
            if id(t) not in seen:
                seen.add(id(t))
                out.append((name, t))
        return out

    def canonical_name(self, name: str) -> str:
        t = self.entries[name]
        for n, u in self.entries.items():
            if u is t:
                return n
        raise KeyError(name)

    def tie(self, plan: SharePlan) -> None:
        """Alias every alias set in ``plan``; the first-registered member donates its values."""
        resolved = plan.group_members(self.entries)
        order = {n: i for i, n in enumerate(self.entries)}
        for gid, alias_sets in resolved.items():
            for members in alias_sets:
                members.sort(key=order.__getitem__)
                donor = self.entries[members[0]]
                for m in members[1:]:
                    if self.entries[m].shape != donor.shape:
                        raise ValueError(
                            f"cannot tie {m} {self.entries[m].shape} to {members[0]} {donor.shape}")
                for m in members[1:]:
                    self.entries[m] = donor
            self.groups[gid] = alias_sets
        # Buffers accumulated by untied members no longer describe one tensor.
        self.momentum.clear()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.entries.items()}


@dataclass
class TieReport:
    groups: dict[str, bool]

    @property
    def ok(self) -> bool:
        return all(self.groups.values())

    def failed(self) -> list[str]:
        return [g for g, good in self.groups.items() if not good]


def assert_tied(store: ParameterStore, plan: SharePlan | None = None) -> TieReport:
    """Check, per group, that every alias set is bitwise identical."""
    groups = plan.group_members(store.entries) if plan is not None else store.groups
    report = {}
    for gid, alias_sets in groups.items():
        good = True
        for members in alias_sets:
            ref = store.entries[members[0]].data
            for m in members[1:]:
                other = store.entries[m].data
                if other.shape != ref.shape or other.tobytes() != ref.tobytes():
                    good = False
        report[gid] = good
    return TieReport(report)


# ---------------------------------------------------------------------------
# Checkpoint codec
# ---------------------------------------------------------------------------


def encode(store: ParameterStore) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(store.entries))]
    for name, t in store.entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    table = [(name, gid) for gid, sets in store.groups.items() for members in sets for name in members]
    parts.append(struct.pack("<I", len(table)))
    for name, gid in table:
        for s in (name, gid):
            raw = s.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], list[tuple[str, str]]]:
    """Parse checkpoint bytes into ``(name -> array, [(name, group_id), ...])``."""
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    (count,) = r.unpack("<I", "parameter count")
    arrays: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = r.unpack("<I", f"name length of parameter #{i}")
        raw = r.take(nlen, f"name of parameter #{i}")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"parameter #{i}: name is not utf-8") from exc
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = r.take(8 * n, f"values of {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(dims)
    (tcount,) = r.unpack("<I", "group table size")
    table = []
    for i in range(tcount):
        (nlen,) = r.unpack("<I", f"group entry #{i}")
        name = r.take(nlen, f"group entry #{i}").decode("utf-8")
        (glen,) = r.unpack("<I", f"group id for {name}")
        gid = r.take(glen, f"group id for {name}").decode("utf-8")
        if name not in arrays:
            raise CheckpointFormatError(f"group table names unknown parameter {name}")
        table.append((name, gid))
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after group table")
    return arrays, table


def restore_groups(store: ParameterStore, table: list[tuple[str, str]]) -> None:
    """Re-alias ``store`` from a decoded group table (suffix-matched alias sets)."""
    by_group: dict[str, dict[str, list[str]]] = {}
    for name, gid in table:
        suffix = name.split(".", 1)[1]
        by_group.setdefault(gid, {}).setdefault(suffix, []).append(name)
    order = {n: i for i, n in enumerate(store.entries)}
    for gid, sets in by_group.items():
        alias_sets = []
        for members in sets.values():
            members.sort(key=order.__getitem__)
            donor = store.entries[members[0]]
            for m in members[1:]:
                if store.entries[m].data.tobytes() != donor.data.tobytes():
                    raise CheckpointFormatError(f"tied parameter {m} differs from {members[0]}")
                store.entries[m] = donor
            alias_sets.append(members)
        store.groups[gid] = alias_sets


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
