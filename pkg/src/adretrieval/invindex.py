"""Capped inverted indexes compiled from a model-scored network.

The rewriting index maps signal triggers to key terms, the ad-selecting
index maps key triggers to ad terms.  Every posting entry is
self-scoring: its weight is the edge's sparse model weight plus the dot
product of the layer's continuous weights with the edge's stored stats,
so serving never touches the network again.

Binary container: fixed header (magic, version, kind, cap, metadata)
followed by per-trigger blocks sorted by trigger; integers are
little-endian, reals are 64-bit IEEE-754.  Round trips are byte-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple, TextIO

from .model import (IntegrityError, LrModel, edge_feature, edge_stats_vector, model_digest)
from .network import (AD, Edge, EdgeStats, HierNetwork, KEY, Node, REWRITING, SELECTING,
                      SIGNAL, network_digest, validate_node)

MAGIC = b"ADIX"
VERSION = 1
STATS_LEN = 5

_KIND_CODES = {REWRITING: 0, SELECTING: 1}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}
_LAYER_CODES = {SIGNAL: 0, KEY: 1, AD: 2}
_CODE_LAYERS = {v: k for k, v in _LAYER_CODES.items()}


class IndexLoadError(ValueError):
    """Corrupt, truncated, or incompatible index file."""


class PostingEntry(NamedTuple):
    term: Node
    weight: float
    stats: tuple[float, ...]  # length STATS_LEN


def entry_sort_key(entry: PostingEntry) -> tuple:
    # weight descending, then term id ascending (kind disambiguates)
    return (-entry.weight, entry.term.id, entry.term.kind)


@dataclass(frozen=True)
class PostingList:
    trigger: Node
    entries: tuple[PostingEntry, ...]

    def validate(self, cap: int) -> None:
        if len(self.entries) > cap:
            raise ValueError(f"posting list for {self.trigger} exceeds cap {cap}")
        keys = [entry_sort_key(e) for e in self.entries]
        if keys != sorted(keys):
            raise ValueError(f"posting list for {self.trigger} is not sorted")


@dataclass
class InvertedIndex:
    kind: str  # REWRITING or SELECTING
    cap: int
    lists: dict[Node, PostingList]
    model_digest: str = ""
    network_digest: str = ""
    built_at: int = 0  # fixed timestamp by default so rebuilds are byte-identical

    def validate(self) -> None:
        trigger_layer = SIGNAL if self.kind == REWRITING else KEY
        term_layer = KEY if self.kind == REWRITING else AD
        for trigger, plist in self.lists.items():
            if trigger != plist.trigger:
                raise ValueError(f"trigger mismatch for {trigger}")
            if trigger.layer != trigger_layer:
                raise ValueError(f"{self.kind} trigger must be a {trigger_layer} node: {trigger}")
            validate_node(trigger)
            for entry in plist.entries:
                if entry.term.layer != term_layer:
                    raise ValueError(f"{self.kind} term must be a {term_layer} node: {entry.term}")
                validate_node(entry.term)
                if len(entry.stats) != STATS_LEN:
                    raise ValueError(f"entry stats must have length {STATS_LEN}")
            plist.validate(self.cap)


def entry_weight(model: LrModel, layer_pair: str, edge: Edge, stats: EdgeStats,
                 use_transforms: bool = True) -> float:
    """Self-contained ranking weight of one edge under the model."""
    name = edge_feature(layer_pair, edge)
    sparse_w = model.weights.get(name)
    if sparse_w is None:
        raise IntegrityError(f"model has no weight for edge feature {name!r}")
    vec = edge_stats_vector(stats.clicks, stats.presents, use_transforms)
    offset = 0 if layer_pair == REWRITING else 5
    cont = model.cont_weights[offset:offset + 5]
    return sparse_w + float(sum(c * v for c, v in zip(cont, vec)))


def _check_compat(net: HierNetwork, model: LrModel) -> str:
    digest = network_digest(net)
    if model.network_digest and model.network_digest != digest:
        raise IntegrityError(
            f"model was trained on a different network: expected {model.network_digest}, "
            f"found {digest}")
    return digest


def _build(net: HierNetwork, model: LrModel, cap: int, layer_pair: str) -> InvertedIndex:
    if cap < 1:
        raise ValueError("cap must be >= 1")
    digest = _check_compat(net, model)
    use_transforms = model.hyper.use_transforms
    grouped: dict[Node, list[PostingEntry]] = {}
    for edge, stats in net.edges(layer_pair).items():
        src, dst = edge
        weight = entry_weight(model, layer_pair, edge, stats, use_transforms)
        grouped.setdefault(src, []).append(PostingEntry(
            term=dst, weight=weight,
            stats=edge_stats_vector(stats.clicks, stats.presents, use_transforms)))
    lists = {}
    for trigger, entries in grouped.items():
        entries.sort(key=entry_sort_key)
        lists[trigger] = PostingList(trigger=trigger, entries=tuple(entries[:cap]))
    return InvertedIndex(kind=layer_pair, cap=cap, lists=lists,
                         model_digest=model_digest(model), network_digest=digest)


def build_rewriting_index(net: HierNetwork, model: LrModel, cap: int = 100) -> InvertedIndex:
    """Top-`cap` keys per signal by per-edge model weight."""
    return _build(net, model, cap, REWRITING)


def build_selecting_index(net: HierNetwork, model: LrModel, cap: int = 300) -> InvertedIndex:
    """Top-`cap` ads per key by per-edge model weight."""
    return _build(net, model, cap, SELECTING)


# ---------------------------------------------------------------------------
# binary container

def _pack_str(value: str, width: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack(f"<{width}", len(raw)) + raw


def _pack_node(node: Node) -> bytes:
    return (struct.pack("<B", _LAYER_CODES[node.layer])
            + _pack_str(node.kind, "B")
            + _pack_str(node.id, "H"))


def index_to_bytes(index: InvertedIndex) -> bytes:
    parts = [MAGIC,
             struct.pack("<IBIQ", VERSION, _KIND_CODES[index.kind], index.cap, index.built_at),
             _pack_str(index.model_digest, "H"),
             _pack_str(index.network_digest, "H"),
             struct.pack("<I", len(index.lists))]
    for trigger in sorted(index.lists):
        plist = index.lists[trigger]
        parts.append(_pack_node(trigger))
        parts.append(struct.pack("<I", len(plist.entries)))
        for entry in plist.entries:
            parts.append(_pack_node(entry.term))
            parts.append(struct.pack("<d", entry.weight))
            parts.append(struct.pack(f"<{STATS_LEN}d", *entry.stats))
    return b"".join(parts)


def serialize_index(index: InvertedIndex, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(index_to_bytes(index))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise IndexLoadError(f"{self.path}: truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def read_str(self, width: str, what: str) -> str:
        (n,) = self.unpack(f"<{width}", what)
        return self.take(n, what).decode("utf-8")

    def read_node(self, what: str) -> Node:
        (layer_code,) = self.unpack("<B", what)
        layer = _CODE_LAYERS.get(layer_code)
        if layer is None:
            raise IndexLoadError(f"{self.path}: invalid layer code {layer_code} in {what}")
        kind = self.read_str("B", what)
        node_id = self.read_str("H", what)
        node = Node(layer, kind, node_id)
        try:
            validate_node(node)
        except ValueError as exc:
            raise IndexLoadError(f"{self.path}: {exc}") from exc
        return node


def index_from_bytes(data: bytes, path: str = "<bytes>") -> InvertedIndex:
    reader = _Reader(data, path)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise IndexLoadError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, kind_code, cap, built_at = reader.unpack("<IBIQ", "header")
    if version != VERSION:
        raise IndexLoadError(f"{path}: unsupported version {version}, expected {VERSION}")
    kind = _CODE_KINDS.get(kind_code)
    if kind is None:
        raise IndexLoadError(f"{path}: invalid index kind code {kind_code}")
    model_digest = reader.read_str("H", "model digest")
    net_digest = reader.read_str("H", "network digest")
    (n_triggers,) = reader.unpack("<I", "trigger count")
    lists: dict[Node, PostingList] = {}
    previous = None
    for _ in range(n_triggers):
        trigger = reader.read_node("trigger")
        if previous is not None and trigger <= previous:
            raise IndexLoadError(f"{path}: triggers out of order at {trigger}")
        previous = trigger
        (n_entries,) = reader.unpack("<I", f"entry count of {trigger}")
        entries = []
        for _ in range(n_entries):
            term = reader.read_node(f"entry of {trigger}")
            (weight,) = reader.unpack("<d", f"weight of {trigger}")
            stats = reader.unpack(f"<{STATS_LEN}d", f"stats of {trigger}")
            entries.append(PostingEntry(term=term, weight=weight, stats=stats))
        plist = PostingList(trigger=trigger, entries=tuple(entries))
        try:
            plist.validate(cap)
        except ValueError as exc:
            raise IndexLoadError(f"{path}: {exc}") from exc
        lists[trigger] = plist
    if reader.pos != len(data):
        raise IndexLoadError(f"{path}: {len(data) - reader.pos} trailing bytes")
    index = InvertedIndex(kind=kind, cap=cap, lists=lists, model_digest=model_digest,
                          network_digest=net_digest, built_at=built_at)
    try:
        index.validate()
    except ValueError as exc:
        raise IndexLoadError(f"{path}: {exc}") from exc
    return index


def load_index(path: str) -> InvertedIndex:
    """Parse and fully validate an index file; never returns a partial index."""
    with open(path, "rb") as fh:
        data = fh.read()
    return index_from_bytes(data, path)


def dump_index(index: InvertedIndex, out: TextIO) -> None:
    """Human-readable one-line-per-entry dump for diffing."""
    out.write(f"# kind={index.kind} cap={index.cap} triggers={len(index.lists)} "
              f"model={index.model_digest[:12]} network={index.network_digest[:12]}\n")
    for trigger in sorted(index.lists):
        for entry in index.lists[trigger].entries:
            stats = ",".join(repr(x) for x in entry.stats)
            out.write(f"{trigger.kind}:{trigger.id}\t{entry.term.kind}:{entry.term.id}\t"
                      f"{entry.weight!r}\t{stats}\n")
