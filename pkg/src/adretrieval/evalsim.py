"""Offline AUC evaluation and paired closed-loop simulation.

Offline: score train/test/next sample splits with any set of scorers
and tabulate AUC per cell.  Online: replay one seeded request stream
against two engines (shared uniform draws per presented slot) and
report CTR, RPM, and present-rate with lifts of the new engine over
the baseline.  The baseline engine runs the same index traversal but
ranks edges by raw click counts.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .clicklog import Catalog, SignalRef, iter_request_contexts
from .invindex import InvertedIndex, PostingEntry, PostingList
from .model import LrModel, TrainingSample, auc, edge_stats_vector, featurize, score, sigmoid
from .network import HierNetwork, Node, REWRITING, SELECTING
from .pricing import ConstantPricer
from .retrieval import (PricerLike, RetrievalRequest, RetrievalResult, RetrievalStats,
                        aggregate_paths, retrieve)

Engine = Callable[[RetrievalRequest], list[RetrievalResult]]
Scorer = Callable[[Sequence[TrainingSample]], list[float]]


@dataclass(slots=True)
class SimMetrics:
    request_counts: int = 0
    presented_requests: int = 0
    present_counts: int = 0
    click_counts: int = 0
    revenue: float = 0.0

    @property
    def ctr(self) -> float:
        return self.click_counts / self.present_counts if self.present_counts else 0.0

    @property
    def rpm(self) -> float:
        return self.revenue / self.present_counts * 1000.0 if self.present_counts else 0.0

    @property
    def pr(self) -> float:
        return self.presented_requests / self.request_counts if self.request_counts else 0.0

    def as_dict(self) -> dict:
        return {
            "request_counts": self.request_counts,
            "presented_requests": self.presented_requests,
            "present_counts": self.present_counts,
            "click_counts": self.click_counts,
            "revenue": self.revenue,
            "ctr": self.ctr,
            "rpm": self.rpm,
            "pr": self.pr,
        }


# ---------------------------------------------------------------------------
# offline evaluation

def model_scorer(model: LrModel, net: HierNetwork) -> Scorer:
    def run(samples: Sequence[TrainingSample]) -> list[float]:
        use_transforms = model.hyper.use_transforms
        return [score(model, featurize(s, net, use_transforms)) for s in samples]
    return run


def click_count_scorer(net: HierNetwork) -> Scorer:
    """Relevance-only baseline: a sample scores the total click count of
    its activated edges, squashed monotonically into (0,1)."""
    def run(samples: Sequence[TrainingSample]) -> list[float]:
        out = []
        for sample in samples:
            clicks = sum(net.rewriting[e].clicks for e in sample.rewriting_edges)
            clicks += sum(net.selecting[e].clicks for e in sample.selecting_edges)
            out.append(sigmoid(math.log1p(clicks)))
        return out
    return run


def offline_eval(scorers: Mapping[str, Scorer],
                 splits: Mapping[str, Sequence[TrainingSample]],
                 ) -> dict[str, dict[str, float | None]]:
    """AUC per (scorer, split); single-class splits report None."""
    table: dict[str, dict[str, float | None]] = {}
    for scorer_name, scorer in scorers.items():
        row: dict[str, float | None] = {}
        for split_name, samples in splits.items():
            labels = [s.label for s in samples]
            if len(set(labels)) < 2:
                row[split_name] = None
                continue
            row[split_name] = auc(scorer(list(samples)), labels)
        table[scorer_name] = row
    return table


def format_eval_table(table: Mapping[str, Mapping[str, float | None]],
                      split_order: Sequence[str] = ("train", "test", "next")) -> str:
    splits = [s for s in split_order if any(s in row for row in table.values())]
    width = max((len(name) for name in table), default=8)
    lines = ["".ljust(width) + "".join(f"{s:>12}" for s in splits)]
    for name in sorted(table):
        cells = []
        for s in splits:
            value = table[name].get(s)
            cells.append(f"{value:>12.4f}" if value is not None else f"{'n/a':>12}")
        lines.append(name.ljust(width) + "".join(cells))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# engines

def make_model_engine(rw_index: InvertedIndex, sel_index: InvertedIndex, model: LrModel,
                      pricer: PricerLike, stats: RetrievalStats | None = None,
                      score_floor: float | None = None) -> Engine:
    def engine(req: RetrievalRequest) -> list[RetrievalResult]:
        return retrieve(req, rw_index, sel_index, model, pricer, stats, score_floor)
    return engine


def build_baseline_indexes(net: HierNetwork, cap_rewrite: int = 100,
                           cap_select: int = 300) -> tuple[InvertedIndex, InvertedIndex]:
    """Same index shape, entries weighted by raw edge click counts."""
    indexes = []
    for layer_pair, cap in ((REWRITING, cap_rewrite), (SELECTING, cap_select)):
        if cap < 1:
            raise ValueError("cap must be >= 1")
        grouped: dict[Node, list[PostingEntry]] = {}
        for (src, dst), stats in net.edges(layer_pair).items():
            grouped.setdefault(src, []).append(PostingEntry(
                term=dst, weight=float(stats.clicks),
                stats=edge_stats_vector(stats.clicks, stats.presents)))
        lists = {}
        for trigger, entries in grouped.items():
            entries.sort(key=lambda e: (-e.weight, e.term.id, e.term.kind))
            lists[trigger] = PostingList(trigger=trigger, entries=tuple(entries[:cap]))
        indexes.append(InvertedIndex(kind=layer_pair, cap=cap, lists=lists,
                                     model_digest="clickcount-baseline"))
    return indexes[0], indexes[1]


def _baseline_results(req: RetrievalRequest, rw_index: InvertedIndex,
                      sel_index: InvertedIndex, pricer: PricerLike,
                      stats: RetrievalStats | None = None) -> list[RetrievalResult]:
    ranked = aggregate_paths(req, rw_index, sel_index, stats, limit=req.n)
    results = []
    for adn, clicks, paths in ranked:
        results.append(RetrievalResult(
            ad_id=adn.id,
            # click mass squashed monotonically into (0,1): order-faithful
            score=sigmoid(math.log1p(max(clicks, 0.0))),
            paths=paths,
            ocpc_price=pricer.price(adn.id)))
    return results


def baseline_retrieve(net: HierNetwork, req: RetrievalRequest,
                      caps: tuple[int, int] = (100, 300),
                      pricer: PricerLike | None = None) -> list[RetrievalResult]:
    """Click-count engine over a network; builds its indexes on the fly
    (use make_baseline_engine to reuse them across requests)."""
    rw_index, sel_index = build_baseline_indexes(net, caps[0], caps[1])
    return _baseline_results(req, rw_index, sel_index, pricer or ConstantPricer(0.0))


def make_baseline_engine(net: HierNetwork, cap_rewrite: int, cap_select: int,
                         pricer: PricerLike, stats: RetrievalStats | None = None) -> Engine:
    rw_index, sel_index = build_baseline_indexes(net, cap_rewrite, cap_select)
    def engine(req: RetrievalRequest) -> list[RetrievalResult]:
        return _baseline_results(req, rw_index, sel_index, pricer, stats)
    return engine


# ---------------------------------------------------------------------------
# closed-loop simulation

@dataclass(frozen=True, slots=True)
class SimRequest:
    request_id: str
    user_id: str
    category_id: str
    ts: int
    query_id: str
    signals: tuple[SignalRef, ...]
    click_draws: tuple[float, ...]  # one uniform draw per presented slot


class UserOracle:
    """Engine-independent request stream plus the click ground truth.

    Requests reuse the generator's user model (sessions, rt/lt click
    history from organic item clicks), so both engines in a paired run
    see exactly the same stream; clicks use the latent affinity of the
    request's dominant signal, the query.
    """

    def __init__(self, catalog: Catalog, slate_size: int = 1):
        if slate_size < 1:
            raise ValueError("slate_size must be >= 1")
        self.catalog = catalog
        self.slate_size = slate_size

    def requests(self, n: int, seed: int | str) -> list[SimRequest]:
        draw_rng = random.Random(f"{seed}/simclick")
        out = []
        for ctx in iter_request_contexts(self.catalog, n, f"{seed}/sim"):
            out.append(SimRequest(
                request_id=ctx.request_id,
                user_id=ctx.user_id,
                category_id=ctx.category_id,
                ts=ctx.ts,
                query_id=ctx.query_id,
                signals=ctx.signals,
                click_draws=tuple(draw_rng.random() for _ in range(self.slate_size)),
            ))
        return out

    def click_prob(self, req: SimRequest, ad_id: str) -> float:
        return self.catalog.affinity(ad_id, SignalRef("query", req.query_id))


def run_engine(engine: Engine, requests: Sequence[SimRequest], oracle: UserOracle) -> SimMetrics:
    metrics = SimMetrics()
    for req in requests:
        metrics.request_counts += 1
        results = engine(RetrievalRequest(signals=req.signals, n=oracle.slate_size))
        if results:
            metrics.presented_requests += 1
        for slot, result in enumerate(results[:oracle.slate_size]):
            metrics.present_counts += 1
            if req.click_draws[slot] < oracle.click_prob(req, result.ad_id):
                metrics.click_counts += 1
                metrics.revenue += result.ocpc_price
    return metrics


def simulate_online(engine: Engine, baseline_engine: Engine, catalog: Catalog,
                    oracle: UserOracle, n_requests: int, seed: int | str,
                    ) -> tuple[SimMetrics, SimMetrics, dict[str, float | None]]:
    """Paired run over one request stream; lifts are (new−base)/base per
    metric (None when the baseline value is 0)."""
    if n_requests < 1:
        raise ValueError("n_requests must be >= 1")
    requests = oracle.requests(n_requests, seed)
    metrics_new = run_engine(engine, requests, oracle)
    metrics_base = run_engine(baseline_engine, requests, oracle)
    lifts: dict[str, float | None] = {}
    for name in ("ctr", "rpm", "pr"):
        new, base = getattr(metrics_new, name), getattr(metrics_base, name)
        lifts[name] = (new - base) / base if base else None
    return metrics_new, metrics_base, lifts


def format_sim_report(metrics_new: SimMetrics, metrics_base: SimMetrics,
                      lifts: Mapping[str, float | None]) -> str:
    lines = [f"{'':10}{'engine':>14}{'baseline':>14}{'lift':>10}"]
    for name in ("ctr", "rpm", "pr"):
        lift = lifts.get(name)
        lift_txt = f"{lift:+10.2%}" if lift is not None else f"{'n/a':>10}"
        lines.append(f"{name:10}{getattr(metrics_new, name):>14.5f}"
                     f"{getattr(metrics_base, name):>14.5f}{lift_txt}")
    lines.append(f"{'requests':10}{metrics_new.request_counts:>14}"
                 f"{metrics_base.request_counts:>14}")
    lines.append(f"{'presents':10}{metrics_new.present_counts:>14}"
                 f"{metrics_base.present_counts:>14}")
    lines.append(f"{'clicks':10}{metrics_new.click_counts:>14}"
                 f"{metrics_base.click_counts:>14}")
    lines.append(f"{'revenue':10}{metrics_new.revenue:>14.4f}"
                 f"{metrics_base.revenue:>14.4f}")
    return "\n".join(lines)


def sim_report_records(metrics_new: SimMetrics, metrics_base: SimMetrics,
                       lifts: Mapping[str, float | None]) -> list[dict]:
    return [
        {"record": "metrics", "engine": "model", **metrics_new.as_dict()},
        {"record": "metrics", "engine": "baseline", **metrics_base.as_dict()},
        {"record": "lifts", **dict(lifts)},
    ]
