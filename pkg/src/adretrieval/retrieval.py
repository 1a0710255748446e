"""Top-N ad retrieval: signals → rewriting index → keys → ad index → ads.

Per-ad scoring follows set semantics over activated edges and
reproduces the training-time score for the activation set: the sum of
the distinct edges' sparse weights plus the continuous weights applied
to the per-layer aggregate statistics of those edges.  Stored posting
weights are per-edge self-scores (used for list ordering and caps);
the sparse part is recovered by subtracting each entry's own nonlinear
stat terms, while the linear clicks/presents terms transfer between
the per-edge and aggregate forms unchanged.  Ranking ties break by ad
id ascending.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

from .clicklog import SIGNAL_KINDS, SignalRef
from .invindex import InvertedIndex
from .jsonl import ParseError
from .model import LrModel, sigmoid
from .network import Node, signal_node

MAX_SIGNALS = 16


class PricerLike(Protocol):
    def price(self, ad_id: str) -> float: ...


@dataclass(frozen=True, slots=True)
class RetrievalRequest:
    signals: tuple[SignalRef, ...]
    n: int

    def __post_init__(self) -> None:
        if not self.signals:
            raise ValueError("request needs at least one signal")
        if self.n < 1:
            raise ValueError(f"result count must be >= 1, got {self.n}")
        for sig in self.signals:
            if sig.kind not in SIGNAL_KINDS:
                raise ValueError(f"unknown signal kind {sig.kind!r}")


@dataclass(frozen=True, slots=True)
class RetrievalResult:
    ad_id: str
    score: float
    paths: tuple[tuple[Node, Node], ...]  # (signal, key) pairs that reached the ad
    ocpc_price: float

    def __post_init__(self) -> None:
        if not self.paths:
            raise ValueError(f"result for ad {self.ad_id} has no paths")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of range: {self.score}")


@dataclass(slots=True)
class RetrievalStats:
    """Work counters for one or more requests; lets callers assert the
    per-request bound lookups ≤ |signals| + |signals|·cap_rw."""

    signals_seen: int = 0
    signals_missing: int = 0
    index_lookups: int = 0
    candidates_examined: int = 0


def aggregate_paths(req: RetrievalRequest, rw_index: InvertedIndex, sel_index: InvertedIndex,
                    stats: RetrievalStats | None = None,
                    cont_weights: Sequence[float] | None = None,
                    use_transforms: bool = True, limit: int | None = None,
                    ) -> list[tuple[Node, float, tuple[tuple[Node, Node], ...]]]:
    """Shared traversal: returns (ad, pre-sigmoid value, paths) ranked by
    value descending with ad-id tie-break.  Each distinct edge counts
    once even when several paths share it.

    Without `cont_weights` the value is the plain sum of stored entry
    weights (the click-count baseline ranks on that).  With the model's
    continuous weight vector, the value equals the training-score
    contract for the activation set: Σ sparse edge weights plus the
    continuous weights applied to the aggregated edge statistics.
    `limit` bounds how many ads get their path list materialized; the
    ranking itself always covers every reachable ad.
    """
    if stats is None:
        stats = RetrievalStats()
    if cont_weights is not None:
        w = [float(v) for v in cont_weights]
        rw_nl = (w[2], w[3], w[4])
        sel_nl = (w[7], w[8], w[9])
    signals = sorted({signal_node(s.kind, s.id) for s in req.signals})
    # per activated key: summed rewriting contribution and reaching signals
    key_sum: dict[Node, float] = {}
    key_clicks: dict[Node, float] = {}
    key_presents: dict[Node, float] = {}
    key_signals: dict[Node, list[Node]] = {}
    for snode in signals:
        stats.signals_seen += 1
        stats.index_lookups += 1
        plist = rw_index.lists.get(snode)
        if plist is None:
            stats.signals_missing += 1
            continue
        for entry in plist.entries:
            term = entry.term
            value = entry.weight
            if cont_weights is not None:
                s = entry.stats
                value -= rw_nl[0] * s[2] + rw_nl[1] * s[3] + rw_nl[2] * s[4]
                key_clicks[term] = key_clicks.get(term, 0.0) + s[0]
                key_presents[term] = key_presents.get(term, 0.0) + s[1]
            key_sum[term] = key_sum.get(term, 0.0) + value
            key_signals.setdefault(term, []).append(snode)
    # per ad: [value, rw clicks, rw presents, sel clicks, sel presents]
    acc: dict[Node, list[float]] = {}
    ad_keys: dict[Node, list[Node]] = {}
    for knode in sorted(key_sum):
        stats.index_lookups += 1
        plist = sel_index.lists.get(knode)
        if plist is None:
            continue
        ksum = key_sum[knode]
        if cont_weights is not None:
            kc = key_clicks[knode]
            kp = key_presents[knode]
        for entry in plist.entries:
            stats.candidates_examined += 1
            term = entry.term
            slot = acc.get(term)
            if slot is None:
                slot = acc[term] = [0.0, 0.0, 0.0, 0.0, 0.0]
                ad_keys[term] = []
            if cont_weights is not None:
                s = entry.stats
                slot[0] += ksum + entry.weight - (sel_nl[0] * s[2] + sel_nl[1] * s[3]
                                                  + sel_nl[2] * s[4])
                slot[1] += kc
                slot[2] += kp
                slot[3] += s[0]
                slot[4] += s[1]
            else:
                slot[0] += ksum + entry.weight
            ad_keys[term].append(knode)
    scored: list[tuple[Node, float]] = []
    for adn, slot in acc.items():
        value = slot[0]
        if cont_weights is not None:
            rw_c, rw_p, sel_c, sel_p = slot[1], slot[2], slot[3], slot[4]
            value += rw_nl[0] * (rw_c / rw_p if rw_p else 0.0)
            value += sel_nl[0] * (sel_c / sel_p if sel_p else 0.0)
            if use_transforms:
                value += rw_nl[1] * math.log1p(rw_c) + rw_nl[2] * math.log1p(rw_p)
                value += sel_nl[1] * math.log1p(sel_c) + sel_nl[2] * math.log1p(sel_p)
        scored.append((adn, value))
    scored.sort(key=lambda kv: (-kv[1], kv[0].id))
    if limit is not None:
        scored = scored[:limit]
    out = []
    for adn, value in scored:
        paths = tuple(sorted((snode, knode) for knode in ad_keys[adn]
                             for snode in key_signals[knode]))
        out.append((adn, value, paths))
    return out


def retrieve(req: RetrievalRequest, rw_index: InvertedIndex, sel_index: InvertedIndex,
             model: LrModel, pricer: PricerLike, stats: RetrievalStats | None = None,
             score_floor: float | None = None) -> list[RetrievalResult]:
    """Score = sigmoid(bias + training-contract value of the distinct
    activated edges); unknown signals are skipped (counted), zero
    reachable ads is an empty result.  The score is monotone in the
    ranking value, so a floor only ever shortens the top-n prefix."""
    ranked = aggregate_paths(req, rw_index, sel_index, stats,
                             cont_weights=model.cont_weights,
                             use_transforms=model.hyper.use_transforms, limit=req.n)
    results = []
    for adn, value, paths in ranked:
        ad_score = sigmoid(model.bias + value)
        if score_floor is not None and ad_score < score_floor:
            break
        results.append(RetrievalResult(ad_id=adn.id, score=ad_score, paths=paths,
                                       ocpc_price=pricer.price(adn.id)))
    return results


def extract_signals(raw: Mapping, max_signals: int = MAX_SIGNALS) -> tuple[SignalRef, ...]:
    """Turn a raw request record into deduplicated signals, most recent
    first, capped at `max_signals` with the query always kept.

    Expected shape: {"query": str?, "rt_click_items": [{"id","ts"}...],
    "lt_click_items": [...], "segments": [str...]}.
    """
    allowed = {"query", "rt_click_items", "lt_click_items", "segments"}
    unknown = set(raw) - allowed
    if unknown:
        raise ParseError("<request>", 0, f"unknown field {sorted(unknown)[0]!r}")
    best_ts: dict[SignalRef, float] = {}

    def see(sig: SignalRef, ts: float) -> None:
        if sig not in best_ts or ts > best_ts[sig]:
            best_ts[sig] = ts

    query = raw.get("query")
    if query is not None:
        if not isinstance(query, str):
            raise ParseError("<request>", 0, "field 'query' must be a string")
        see(SignalRef("query", query), math.inf)
    for kind, fieldname in (("rt_click_item", "rt_click_items"),
                            ("lt_click_item", "lt_click_items")):
        for entry in raw.get(fieldname, []):
            if not isinstance(entry, Mapping) or set(entry) != {"id", "ts"}:
                raise ParseError("<request>", 0, f"entries of {fieldname!r} must be {{id, ts}}")
            see(SignalRef(kind, entry["id"]), float(entry["ts"]))
    for seg in raw.get("segments", []):
        if not isinstance(seg, str):
            raise ParseError("<request>", 0, "segments must be strings")
        see(SignalRef("profile", seg), 0.0)
    if not best_ts:
        raise ParseError("<request>", 0, "request carries no signals")
    ordered = sorted(best_ts, key=lambda sig: (-best_ts[sig], sig.kind, sig.id))
    return tuple(ordered[:max_signals])
