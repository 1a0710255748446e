"""Three-layer signal→key→ad network with click/present statistics.

Rewriting edges connect signals (query, rt/lt click item, profile) to
keys (query, item, shop, brand); ad-selecting edges connect keys to ads.
Three initialization methods propose edges (click-count threshold,
modified information value, and session-based relevance) and their
union forms the starting network that the model later prunes by weight.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, NamedTuple

from .clicklog import Catalog, ImpressionRecord, Session, SIGNAL_KINDS
from .jsonl import ParseError, dump_json_line, expect_fields, iter_json_lines

SIGNAL, KEY, AD = "signal", "key", "ad"
KEY_KINDS = ("query", "item", "shop", "brand")
REWRITING, SELECTING = "rewriting", "selecting"


class Node(NamedTuple):
    layer: str
    kind: str
    id: str


Edge = tuple[Node, Node]


def signal_node(kind: str, node_id: str) -> Node:
    node = Node(SIGNAL, kind, node_id)
    validate_node(node)
    return node


def key_node(kind: str, node_id: str) -> Node:
    node = Node(KEY, kind, node_id)
    validate_node(node)
    return node


def ad_node(node_id: str) -> Node:
    node = Node(AD, "ad", node_id)
    validate_node(node)
    return node


def validate_node(node: Node) -> None:
    if not node.id:
        raise ValueError("node id must be nonempty")
    if node.layer == SIGNAL:
        if node.kind not in SIGNAL_KINDS:
            raise ValueError(f"invalid signal kind {node.kind!r}")
    elif node.layer == KEY:
        if node.kind not in KEY_KINDS:
            raise ValueError(f"invalid key kind {node.kind!r}")
    elif node.layer == AD:
        if node.kind != "ad":
            raise ValueError(f"invalid ad kind {node.kind!r}")
    else:
        raise ValueError(f"invalid layer {node.layer!r}")


@dataclass(slots=True)
class EdgeStats:
    clicks: int = 0
    presents: int = 0

    def add(self, clicked: bool) -> None:
        self.presents += 1
        self.clicks += 1 if clicked else 0

    def copy(self) -> "EdgeStats":
        return EdgeStats(self.clicks, self.presents)

    def validate(self) -> None:
        if not 0 <= self.clicks <= self.presents:
            raise ValueError(f"need 0 <= clicks <= presents, got {self}")


@dataclass
class HierNetwork:
    """Immutable once built; totals and adjacency views are cached lazily."""

    nodes: frozenset[Node]
    rewriting: dict[Edge, EdgeStats]
    selecting: dict[Edge, EdgeStats]

    @classmethod
    def from_edges(cls, rewriting: dict[Edge, EdgeStats],
                   selecting: dict[Edge, EdgeStats]) -> "HierNetwork":
        nodes = set()
        for src, dst in rewriting:
            nodes.add(src)
            nodes.add(dst)
        for src, dst in selecting:
            nodes.add(src)
            nodes.add(dst)
        net = cls(frozenset(nodes), rewriting, selecting)
        net.validate()
        return net

    def edges(self, layer_pair: str) -> dict[Edge, EdgeStats]:
        if layer_pair == REWRITING:
            return self.rewriting
        if layer_pair == SELECTING:
            return self.selecting
        raise ValueError(f"unknown layer pair {layer_pair!r}")

    def totals(self, layer_pair: str) -> tuple[int, int]:
        return self.rewriting_totals if layer_pair == REWRITING else self.selecting_totals

    @cached_property
    def rewriting_totals(self) -> tuple[int, int]:
        return (sum(s.clicks for s in self.rewriting.values()),
                sum(s.presents for s in self.rewriting.values()))

    @cached_property
    def selecting_totals(self) -> tuple[int, int]:
        return (sum(s.clicks for s in self.selecting.values()),
                sum(s.presents for s in self.selecting.values()))

    @cached_property
    def rw_out(self) -> dict[Node, dict[Node, EdgeStats]]:
        out: dict[Node, dict[Node, EdgeStats]] = {}
        for (src, dst), stats in self.rewriting.items():
            out.setdefault(src, {})[dst] = stats
        return out

    @cached_property
    def sel_out(self) -> dict[Node, dict[Node, EdgeStats]]:
        out: dict[Node, dict[Node, EdgeStats]] = {}
        for (src, dst), stats in self.selecting.items():
            out.setdefault(src, {})[dst] = stats
        return out

    @cached_property
    def sel_in(self) -> dict[Node, dict[Node, EdgeStats]]:
        out: dict[Node, dict[Node, EdgeStats]] = {}
        for (src, dst), stats in self.selecting.items():
            out.setdefault(dst, {})[src] = stats
        return out

    def validate(self) -> None:
        for node in self.nodes:
            validate_node(node)
        for (src, dst), stats in self.rewriting.items():
            if src.layer != SIGNAL or dst.layer != KEY:
                raise ValueError(f"rewriting edge must be signal->key, got {src}->{dst}")
            if src not in self.nodes or dst not in self.nodes:
                raise ValueError(f"edge endpoint missing from nodes: {src}->{dst}")
            stats.validate()
        for (src, dst), stats in self.selecting.items():
            if src.layer != KEY or dst.layer != AD:
                raise ValueError(f"selecting edge must be key->ad, got {src}->{dst}")
            if src not in self.nodes or dst not in self.nodes:
                raise ValueError(f"edge endpoint missing from nodes: {src}->{dst}")
            stats.validate()


def count_edge_stats(records: Iterable[ImpressionRecord], catalog: Catalog) -> HierNetwork:
    """Accrue presents/clicks on every candidate edge observed in the log.

    Candidate keys of an impression are the shown ad's item, shop, and
    brand plus the request query; every request signal pairs with every
    candidate key, and every candidate key pairs with the shown ad.
    """
    rewriting: dict[Edge, EdgeStats] = {}
    selecting: dict[Edge, EdgeStats] = {}
    sig_cache: dict[tuple[str, str], Node] = {}
    key_cache: dict[tuple[str, str], Node] = {}
    ad_cache: dict[str, Node] = {}
    count = 0
    for rec in records:
        count += 1
        try:
            ad = catalog.ads[rec.ad_id]
        except KeyError:
            raise ValueError(f"record {rec.request_id}: ad {rec.ad_id} not in catalog") from None
        adn = ad_cache.get(rec.ad_id)
        if adn is None:
            adn = ad_cache[rec.ad_id] = ad_node(rec.ad_id)
        keys = []
        for kind, kid in (("item", ad.item_id), ("shop", ad.shop_id), ("brand", ad.brand_id)):
            node = key_cache.get((kind, kid))
            if node is None:
                node = key_cache[(kind, kid)] = Node(KEY, kind, kid)
            keys.append(node)
        sigs = []
        for sig in rec.signals:
            node = sig_cache.get(sig)
            if node is None:
                node = sig_cache[sig] = Node(SIGNAL, sig.kind, sig.id)
            sigs.append(node)
            if sig.kind == "query":
                qnode = key_cache.get(("query", sig.id))
                if qnode is None:
                    qnode = key_cache[("query", sig.id)] = Node(KEY, "query", sig.id)
                keys.append(qnode)
        clicked = rec.clicked
        for knode in keys:
            stats = selecting.get((knode, adn))
            if stats is None:
                stats = selecting[(knode, adn)] = EdgeStats()
            stats.add(clicked)
            for snode in sigs:
                stats = rewriting.get((snode, knode))
                if stats is None:
                    stats = rewriting[(snode, knode)] = EdgeStats()
                stats.add(clicked)
    if count == 0:
        raise ValueError("cannot count edge stats over an empty log")
    return HierNetwork.from_edges(rewriting, selecting)


def init_by_click_count(net: HierNetwork, threshold: int = 2) -> set[Edge]:
    """Edges whose click count strictly exceeds the threshold."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    keep = {e for e, s in net.rewriting.items() if s.clicks > threshold}
    keep.update(e for e, s in net.selecting.items() if s.clicks > threshold)
    return keep


def modified_iv(stats: EdgeStats, totals: tuple[int, int]) -> float:
    """Importance of one edge from its click and present shares.

    Returns (Click/ΣClick) · ln((Click/ΣClick) / (Pre/ΣPre)); zero-click
    edges score 0 by the 0·ln 0 convention.
    """
    total_clicks, total_presents = totals
    if total_clicks <= 0 or total_presents <= 0:
        raise ValueError(f"totals must be strictly positive, got {totals}")
    if stats.presents < 1:
        raise ValueError("edge presents must be >= 1")
    if stats.clicks == 0:
        return 0.0
    click_share = stats.clicks / total_clicks
    present_share = stats.presents / total_presents
    return click_share * math.log(click_share / present_share)


def init_by_iv(net: HierNetwork, *, min_iv: float | None = None, top_k: int | None = None,
               per_source: bool = False) -> set[Edge]:
    """Keep high-IV edges: either everything at or above `min_iv`, or the
    `top_k` best per layer (per source node when `per_source`).

    Ties break toward higher clicks, then lexicographic edge identity.
    """
    if (min_iv is None) == (top_k is None):
        raise ValueError("specify exactly one of min_iv or top_k")
    keep: set[Edge] = set()
    for layer_pair in (REWRITING, SELECTING):
        edges = net.edges(layer_pair)
        if not edges:
            continue
        totals = net.totals(layer_pair)
        scored = [(modified_iv(stats, totals), stats.clicks, edge)
                  for edge, stats in edges.items()]
        if min_iv is not None:
            keep.update(edge for iv, _, edge in scored if iv >= min_iv)
            continue
        if per_source:
            by_src: dict[Node, list[tuple[float, int, Edge]]] = {}
            for entry in scored:
                by_src.setdefault(entry[2][0], []).append(entry)
            groups = by_src.values()
        else:
            groups = [scored]
        for group in groups:
            group.sort(key=lambda t: (-t[0], -t[1], t[2]))
            keep.update(edge for _, _, edge in group[:top_k])
    return keep


def session_nodes(session: Session) -> set[Node]:
    """Nodes a session's actions touch, mapped into the network's layers."""
    nodes: set[Node] = set()
    for act in session.actions:
        if act.kind == "SubmitQuery":
            nodes.add(Node(SIGNAL, "query", act.ref))
            nodes.add(Node(KEY, "query", act.ref))
        elif act.kind == "ClickItem":
            nodes.add(Node(KEY, "item", act.ref))
            nodes.add(Node(SIGNAL, "rt_click_item", act.ref))
            nodes.add(Node(SIGNAL, "lt_click_item", act.ref))
        elif act.kind == "ClickAd":
            nodes.add(Node(AD, "ad", act.ref))
    return nodes


def session_cosine(a: Node, b: Node, sessions: list[Session]) -> float:
    """Cosine of the binary session-occurrence vectors of two nodes."""
    occ_a, occ_b = set(), set()
    for i, session in enumerate(sessions):
        nodes = session_nodes(session)
        if a in nodes:
            occ_a.add(i)
        if b in nodes:
            occ_b.add(i)
    if not occ_a:
        raise ValueError(f"node {a} occurs in no session")
    if not occ_b:
        raise ValueError(f"node {b} occurs in no session")
    return len(occ_a & occ_b) / math.sqrt(len(occ_a) * len(occ_b))


def init_by_session_relevance(sessions: list[Session], min_cos: float = 0.1) -> set[Edge]:
    """Candidate signal→key and key→ad pairs co-occurring in sessions with
    occurrence-vector cosine at or above `min_cos`."""
    if not 0.0 < min_cos <= 1.0:
        raise ValueError("min_cos must be in (0,1]")
    occurrences: Counter[Node] = Counter()
    co: Counter[Edge] = Counter()
    for session in sessions:
        nodes = session_nodes(session)
        occurrences.update(nodes)
        signals = [n for n in nodes if n.layer == SIGNAL]
        keys = [n for n in nodes if n.layer == KEY]
        ads = [n for n in nodes if n.layer == AD]
        for snode in signals:
            for knode in keys:
                co[(snode, knode)] += 1
        for knode in keys:
            for anode in ads:
                co[(knode, anode)] += 1
    return {
        edge for edge, shared in co.items()
        if shared / math.sqrt(occurrences[edge[0]] * occurrences[edge[1]]) >= min_cos
    }


def merge_initializations(e1: set[Edge], e2: set[Edge], e3: set[Edge],
                          net: HierNetwork) -> HierNetwork:
    """Union of the three proposals; edges keep their counted stats, and
    session-only edges that were never counted carry (0, 0)."""
    rewriting: dict[Edge, EdgeStats] = {}
    selecting: dict[Edge, EdgeStats] = {}
    for edge in set(e1) | set(e2) | set(e3):
        src, dst = edge
        if src.layer == SIGNAL and dst.layer == KEY:
            stats = net.rewriting.get(edge)
            rewriting[edge] = stats.copy() if stats else EdgeStats(0, 0)
        elif src.layer == KEY and dst.layer == AD:
            stats = net.selecting.get(edge)
            selecting[edge] = stats.copy() if stats else EdgeStats(0, 0)
        else:
            raise ValueError(f"edge with invalid layer pair: {src.layer}->{dst.layer}")
    return HierNetwork.from_edges(rewriting, selecting)


def drop_generic_keys(net: HierNetwork,
                      max_fanout: int = 5000) -> tuple[HierNetwork, dict[Node, int]]:
    """Drop keys linking to more than `max_fanout` ads; returns the pruned
    network and a {key: fanout} report of what was removed."""
    if max_fanout < 1:
        raise ValueError("max_fanout must be >= 1")
    fanout: Counter[Node] = Counter()
    for src, _ in net.selecting:
        fanout[src] += 1
    dropped = {key: n for key, n in fanout.items() if n > max_fanout}
    if not dropped:
        return net, {}
    rewriting = {e: s.copy() for e, s in net.rewriting.items() if e[1] not in dropped}
    selecting = {e: s.copy() for e, s in net.selecting.items() if e[0] not in dropped}
    return HierNetwork.from_edges(rewriting, selecting), dropped


# ---------------------------------------------------------------------------
# dump format

def network_to_lines(net: HierNetwork) -> list[str]:
    lines = []
    for node in sorted(net.nodes):
        lines.append(dump_json_line(
            {"record": "node", "layer": node.layer, "kind": node.kind, "id": node.id}))
    for layer_pair in (REWRITING, SELECTING):
        for (src, dst), stats in sorted(net.edges(layer_pair).items()):
            lines.append(dump_json_line({
                "record": "edge",
                "src": [src.layer, src.kind, src.id],
                "dst": [dst.layer, dst.kind, dst.id],
                "layer_pair": layer_pair,
                "clicks": stats.clicks,
                "presents": stats.presents,
            }))
    return lines


def write_network(path: str, net: HierNetwork) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in network_to_lines(net):
            fh.write(line)
            fh.write("\n")


def network_digest(net: HierNetwork) -> str:
    digest = hashlib.sha256()
    for line in network_to_lines(net):
        digest.update(line.encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


def _parse_node(path: str, line_no: int, raw: object) -> Node:
    if not isinstance(raw, list) or len(raw) != 3 or not all(isinstance(x, str) for x in raw):
        raise ParseError(path, line_no, "node reference must be [layer, kind, id]")
    node = Node(raw[0], raw[1], raw[2])
    try:
        validate_node(node)
    except ValueError as exc:
        raise ParseError(path, line_no, str(exc)) from exc
    return node


def read_network(path: str) -> HierNetwork:
    nodes: set[Node] = set()
    rewriting: dict[Edge, EdgeStats] = {}
    selecting: dict[Edge, EdgeStats] = {}
    for line_no, obj in iter_json_lines(path):
        record = obj.get("record")
        if record == "node":
            expect_fields(path, line_no, obj, frozenset({"record", "layer", "kind", "id"}))
            node = _parse_node(path, line_no, [obj["layer"], obj["kind"], obj["id"]])
            nodes.add(node)
        elif record == "edge":
            expect_fields(path, line_no, obj,
                          frozenset({"record", "src", "dst", "layer_pair", "clicks", "presents"}))
            src = _parse_node(path, line_no, obj["src"])
            dst = _parse_node(path, line_no, obj["dst"])
            clicks, presents = obj["clicks"], obj["presents"]
            if not isinstance(clicks, int) or not isinstance(presents, int):
                raise ParseError(path, line_no, "clicks/presents must be integers")
            if src not in nodes or dst not in nodes:
                raise ParseError(path, line_no, "edge references an undeclared node")
            target = {REWRITING: rewriting, SELECTING: selecting}.get(obj["layer_pair"])
            if target is None:
                raise ParseError(path, line_no, f"unknown layer_pair {obj['layer_pair']!r}")
            target[(src, dst)] = EdgeStats(clicks, presents)
        else:
            raise ParseError(path, line_no, f"unknown record type {record!r}")
    net = HierNetwork(frozenset(nodes), rewriting, selecting)
    try:
        net.validate()
    except ValueError as exc:
        raise ParseError(path, 0, str(exc)) from exc
    return net
