"""Synthetic marketplace catalogs, click/conversion logs, and sessions.

The generator draws a catalog of ads with latent per-signal click
affinities, then simulates a request stream: users submit queries in
bursts, click items organically (feeding real-time and long-time click
signals), and click presented ads according to the latent affinities.
Everything is a pure function of (config, seed).

Records and sessions persist as line-delimited JSON; the catalog file
interleaves entity kinds behind a leading ``entity`` discriminator.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, fields as dataclass_fields
from functools import cached_property
from typing import Iterable, Iterator, NamedTuple

from .jsonl import ParseError, expect_fields, iter_json_lines, write_json_lines

SIGNAL_KINDS = ("query", "rt_click_item", "lt_click_item", "profile")
ACTION_KINDS = ("SubmitQuery", "ClickItem", "ClickAd")


class ConfigError(ValueError):
    """Invalid generator configuration."""


class SignalRef(NamedTuple):
    kind: str
    id: str


class Action(NamedTuple):
    kind: str
    ref: str
    ts: int


@dataclass(frozen=True, slots=True)
class ImpressionRecord:
    request_id: str
    user_id: str
    ts: int
    signals: tuple[SignalRef, ...]
    ad_id: str
    clicked: bool
    converted: bool
    ad_price: float
    session_id: str
    category_id: str

    def __post_init__(self) -> None:
        if not self.signals:
            raise ValueError(f"record {self.request_id}: signals must be nonempty")
        n_query = 0
        for sig in self.signals:
            if sig.kind not in SIGNAL_KINDS:
                raise ValueError(f"record {self.request_id}: unknown signal kind {sig.kind!r}")
            n_query += sig.kind == "query"
        if n_query > 1:
            raise ValueError(f"record {self.request_id}: at most one query signal allowed")
        if self.converted and not self.clicked:
            raise ValueError(f"record {self.request_id}: converted implies clicked")

    @property
    def query_id(self) -> str | None:
        for sig in self.signals:
            if sig.kind == "query":
                return sig.id
        return None


@dataclass(frozen=True, slots=True)
class Session:
    session_id: str
    user_id: str
    category_id: str
    actions: tuple[Action, ...]

    def __post_init__(self) -> None:
        last_ts = None
        for act in self.actions:
            if act.kind not in ACTION_KINDS:
                raise ValueError(f"session {self.session_id}: unknown action kind {act.kind!r}")
            if last_ts is not None and act.ts < last_ts:
                raise ValueError(f"session {self.session_id}: actions out of timestamp order")
            last_ts = act.ts


@dataclass(frozen=True, slots=True)
class GenConfig:
    """World-model parameters for catalog and log generation."""

    n_ads: int = 150
    n_items: int = 240
    n_shops: int = 30
    n_brands: int = 20
    n_categories: int = 5
    n_queries: int = 120
    n_users: int = 80
    n_segments: int = 32
    taking_rate: float = 0.05
    session_gap: int = 1800
    # latent affinity shape: each ad gets a few predictive queries, items,
    # and profile segments; everything else falls back to base_affinity
    base_affinity: float = 0.005
    affinity_queries_per_ad: int = 3
    affinity_items_per_ad: int = 3
    affinity_segments_per_ad: int = 2
    min_affinity: float = 0.05
    max_affinity: float = 0.35
    min_segment_affinity: float = 0.02
    max_segment_affinity: float = 0.12
    min_cvr: float = 0.01
    max_cvr: float = 0.06
    min_item_price: float = 20.0
    max_item_price: float = 100.0
    # exposure bias of the logging policy: presentation odds multiplier
    # exp(U(0, promo_strength)), independent of ad quality
    promo_strength: float = 3.0
    # traffic shape
    explore_rate: float = 0.2
    home_category_rate: float = 0.7
    organic_click_rate: float = 0.35
    burst_max: int = 4
    rt_signal_max: int = 3
    lt_signal_max: int = 3

    def validate(self) -> None:
        sizes = {
            "n_ads": self.n_ads,
            "n_items": self.n_items,
            "n_shops": self.n_shops,
            "n_brands": self.n_brands,
            "n_categories": self.n_categories,
            "n_queries": self.n_queries,
            "n_users": self.n_users,
            "n_segments": self.n_segments,
        }
        for name, value in sizes.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.n_queries < self.n_categories:
            raise ConfigError("need at least one query per category")
        if self.n_items < self.n_categories:
            raise ConfigError("need at least one item per category")
        if not 0.0 < self.taking_rate < 1.0:
            raise ConfigError(f"taking_rate must be in (0,1), got {self.taking_rate}")
        if self.session_gap < 1:
            raise ConfigError("session_gap must be >= 1")
        if not 0.0 < self.base_affinity <= 1.0:
            raise ConfigError("base_affinity must be in (0,1]")
        for lo, hi, label in (
            (self.min_affinity, self.max_affinity, "affinity"),
            (self.min_segment_affinity, self.max_segment_affinity, "segment_affinity"),
            (self.min_cvr, self.max_cvr, "cvr"),
        ):
            if not 0.0 < lo <= hi <= 1.0:
                raise ConfigError(f"{label} range must satisfy 0 < min <= max <= 1")
        if not 0.0 < self.min_item_price <= self.max_item_price:
            raise ConfigError("item price range must be positive")
        if self.promo_strength < 0.0:
            raise ConfigError("promo_strength must be >= 0")
        for name, rate in (
            ("explore_rate", self.explore_rate),
            ("home_category_rate", self.home_category_rate),
            ("organic_click_rate", self.organic_click_rate),
        ):
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"{name} must be in [0,1]")
        if self.burst_max < 1:
            raise ConfigError("burst_max must be >= 1")
        if self.rt_signal_max < 0 or self.lt_signal_max < 0:
            raise ConfigError("signal maxima must be >= 0")


class Item(NamedTuple):
    id: str
    price: float
    category_id: str


class Query(NamedTuple):
    id: str
    category_id: str


class User(NamedTuple):
    id: str
    segments: tuple[str, ...]
    home_categories: tuple[str, ...]


@dataclass(frozen=True)
class Ad:
    id: str
    item_id: str
    shop_id: str
    brand_id: str
    category_id: str
    conversion_rate: float
    taking_rate: float
    promo_weight: float
    base_affinity: float
    affinities: dict[str, float]  # "q:<query>" | "i:<item>" | "p:<segment>" -> click prob


def _affinity_key(signal: SignalRef) -> str:
    if signal.kind == "query":
        return f"q:{signal.id}"
    if signal.kind in ("rt_click_item", "lt_click_item"):
        return f"i:{signal.id}"
    if signal.kind == "profile":
        return f"p:{signal.id}"
    raise ValueError(f"unknown signal kind {signal.kind!r}")


@dataclass
class Catalog:
    config: GenConfig
    categories: tuple[str, ...]
    items: dict[str, Item]
    shops: tuple[str, ...]
    brands: tuple[str, ...]
    queries: dict[str, Query]
    users: dict[str, User]
    ads: dict[str, Ad]

    def validate(self) -> None:
        shop_set, brand_set, cat_set = set(self.shops), set(self.brands), set(self.categories)
        for item in self.items.values():
            if item.category_id not in cat_set:
                raise ValueError(f"item {item.id}: unknown category {item.category_id}")
            if item.price <= 0:
                raise ValueError(f"item {item.id}: price must be > 0")
        for query in self.queries.values():
            if query.category_id not in cat_set:
                raise ValueError(f"query {query.id}: unknown category {query.category_id}")
        for user in self.users.values():
            for cat in user.home_categories:
                if cat not in cat_set:
                    raise ValueError(f"user {user.id}: unknown category {cat}")
        for ad in self.ads.values():
            if ad.item_id not in self.items:
                raise ValueError(f"ad {ad.id}: unknown item {ad.item_id}")
            if ad.shop_id not in shop_set:
                raise ValueError(f"ad {ad.id}: unknown shop {ad.shop_id}")
            if ad.brand_id not in brand_set:
                raise ValueError(f"ad {ad.id}: unknown brand {ad.brand_id}")
            if ad.category_id not in cat_set:
                raise ValueError(f"ad {ad.id}: unknown category {ad.category_id}")
            if not 0.0 < ad.conversion_rate <= 1.0:
                raise ValueError(f"ad {ad.id}: conversion rate out of (0,1]")
            if not 0.0 < ad.taking_rate < 1.0:
                raise ValueError(f"ad {ad.id}: taking rate out of (0,1)")
            if not 0.0 < ad.base_affinity <= 1.0:
                raise ValueError(f"ad {ad.id}: base affinity out of (0,1]")
            for key, prob in ad.affinities.items():
                if not 0.0 <= prob <= 1.0:
                    raise ValueError(f"ad {ad.id}: affinity {key} out of [0,1]")

    @cached_property
    def ad_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.ads))

    @cached_property
    def queries_by_category(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {c: [] for c in self.categories}
        for qid in sorted(self.queries):
            out[self.queries[qid].category_id].append(qid)
        return {c: tuple(qs) for c, qs in out.items()}

    @cached_property
    def items_by_category(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {c: [] for c in self.categories}
        for iid in sorted(self.items):
            out[self.items[iid].category_id].append(iid)
        return {c: tuple(ids) for c, ids in out.items()}

    @cached_property
    def ads_by_category(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {c: [] for c in self.categories}
        for aid in self.ad_ids:
            out[self.ads[aid].category_id].append(aid)
        return {c: tuple(ids) for c, ids in out.items()}

    @cached_property
    def ads_by_query(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {}
        for aid in self.ad_ids:
            for key in self.ads[aid].affinities:
                if key.startswith("q:"):
                    out.setdefault(key[2:], []).append(aid)
        return {q: tuple(ids) for q, ids in out.items()}

    def affinity(self, ad_id: str, signal: SignalRef) -> float:
        ad = self.ads[ad_id]
        return ad.affinities.get(_affinity_key(signal), ad.base_affinity)

    def click_price(self, ad_id: str) -> float:
        """Expected per-click charge of an ad from its latent commerce fields."""
        ad = self.ads[ad_id]
        return ad.conversion_rate * self.items[ad.item_id].price * ad.taking_rate


def click_probability(catalog: Catalog, signals: Iterable[SignalRef], ad_id: str) -> float:
    """Latent click probability: the strongest single signal wins."""
    best = 0.0
    for sig in signals:
        best = max(best, catalog.affinity(ad_id, sig))
    if best == 0.0:
        best = catalog.ads[ad_id].base_affinity
    return best


def generate_catalog(config: GenConfig, seed: int) -> Catalog:
    config.validate()
    rng = random.Random(f"{seed}/catalog")
    categories = tuple(f"c{i:02d}" for i in range(config.n_categories))
    items = {}
    for i in range(config.n_items):
        iid = f"i{i:04d}"
        items[iid] = Item(iid, round(rng.uniform(config.min_item_price, config.max_item_price), 2),
                          categories[i % config.n_categories])
    shops = tuple(f"s{i:03d}" for i in range(config.n_shops))
    brands = tuple(f"b{i:03d}" for i in range(config.n_brands))
    queries = {}
    for i in range(config.n_queries):
        qid = f"q{i:04d}"
        queries[qid] = Query(qid, categories[i % config.n_categories])
    segments = [f"g{i:03d}" for i in range(config.n_segments)]
    users = {}
    for i in range(config.n_users):
        uid = f"u{i:04d}"
        segs = tuple(sorted(rng.sample(segments, k=rng.randint(1, min(2, config.n_segments)))))
        homes = tuple(sorted(rng.sample(categories, k=rng.randint(1, min(2, config.n_categories)))))
        users[uid] = User(uid, segs, homes)

    items_by_cat: dict[str, list[str]] = {c: [] for c in categories}
    for iid in sorted(items):
        items_by_cat[items[iid].category_id].append(iid)
    queries_by_cat: dict[str, list[str]] = {c: [] for c in categories}
    for qid in sorted(queries):
        queries_by_cat[queries[qid].category_id].append(qid)

    ads = {}
    for i in range(config.n_ads):
        aid = f"a{i:04d}"
        item_id = f"i{rng.randrange(config.n_items):04d}"
        category = items[item_id].category_id
        affinities: dict[str, float] = {}
        cat_queries = queries_by_cat[category]
        for qid in rng.sample(cat_queries, k=min(config.affinity_queries_per_ad, len(cat_queries))):
            affinities[f"q:{qid}"] = round(rng.uniform(config.min_affinity, config.max_affinity), 6)
        cat_items = items_by_cat[category]
        for iid in rng.sample(cat_items, k=min(config.affinity_items_per_ad, len(cat_items))):
            affinities[f"i:{iid}"] = round(rng.uniform(config.min_affinity, config.max_affinity), 6)
        n_segs = rng.randint(1, max(1, config.affinity_segments_per_ad))
        for seg in rng.sample(segments, k=min(n_segs, config.n_segments)):
            affinities[f"p:{seg}"] = round(
                rng.uniform(config.min_segment_affinity, config.max_segment_affinity), 6)
        ads[aid] = Ad(
            id=aid,
            item_id=item_id,
            shop_id=shops[rng.randrange(config.n_shops)],
            brand_id=brands[rng.randrange(config.n_brands)],
            category_id=category,
            conversion_rate=round(rng.uniform(config.min_cvr, config.max_cvr), 6),
            taking_rate=config.taking_rate,
            promo_weight=round(math.exp(rng.uniform(0.0, config.promo_strength)), 6),
            base_affinity=config.base_affinity,
            affinities=affinities,
        )
    catalog = Catalog(config, categories, items, shops, brands, queries, users, ads)
    catalog.validate()
    return catalog


class RequestContext(NamedTuple):
    """One simulated request before any ad is chosen for it."""

    request_id: str
    user_id: str
    category_id: str
    ts: int
    session_id: str
    query_id: str
    signals: tuple[SignalRef, ...]
    organic_clicks: tuple[tuple[str, int], ...]  # (item_id, ts) after this request


_HISTORY_CAP = 50  # per-user item-click memory


def iter_request_contexts(catalog: Catalog, n_requests: int, seed: int | str) -> Iterator[RequestContext]:
    """Simulate the request stream shared by log generation and simulation.

    Sessions follow the inactivity-gap rule per (user, category); organic
    item clicks feed the rt/lt click-item signals of later requests and
    are independent of whatever ads get presented.
    """
    if n_requests < 1:
        raise ValueError("n_requests must be >= 1")
    cfg = catalog.config
    rng = random.Random(f"{seed}/stream")
    user_ids = sorted(catalog.users)
    live: dict[tuple[str, str], tuple[str, int]] = {}  # (user, category) -> (session, last ts)
    history: dict[str, list[tuple[str, int, str]]] = {u: [] for u in user_ids}
    clock = 0
    session_seq = 0
    emitted = 0
    while emitted < n_requests:
        user_id = user_ids[rng.randrange(len(user_ids))]
        user = catalog.users[user_id]
        if rng.random() < cfg.home_category_rate:
            category = user.home_categories[rng.randrange(len(user.home_categories))]
        else:
            category = catalog.categories[rng.randrange(len(catalog.categories))]
        clock += rng.randint(5, 40)
        for _ in range(rng.randint(1, cfg.burst_max)):
            if emitted >= n_requests:
                break
            clock += rng.randint(1, 10)
            skey = (user_id, category)
            session = live.get(skey)
            if session is None or clock - session[1] > cfg.session_gap:
                session_seq += 1
                session_id = f"s{session_seq:07d}"
            else:
                session_id = session[0]
            live[skey] = (session_id, clock)
            cat_queries = catalog.queries_by_category[category]
            query_id = cat_queries[rng.randrange(len(cat_queries))]

            hist = history[user_id]
            rt = [e[0] for e in reversed(hist) if e[2] == session_id][: cfg.rt_signal_max]
            lt = [e[0] for e in reversed(hist) if e[2] != session_id][: cfg.lt_signal_max]
            signals = [SignalRef("query", query_id)]
            signals += [SignalRef("rt_click_item", iid) for iid in rt]
            signals += [SignalRef("lt_click_item", iid) for iid in lt]
            signals += [SignalRef("profile", seg) for seg in user.segments]

            organic: list[tuple[str, int]] = []
            if rng.random() < cfg.organic_click_rate:
                cat_items = catalog.items_by_category[category]
                item_id = cat_items[rng.randrange(len(cat_items))]
                click_ts = clock + rng.randint(1, 10)
                organic.append((item_id, click_ts))
                hist.append((item_id, click_ts, session_id))
                if len(hist) > _HISTORY_CAP:
                    del hist[: len(hist) - _HISTORY_CAP]
                live[skey] = (session_id, click_ts)

            emitted += 1
            yield RequestContext(
                request_id=f"r{emitted:07d}",
                user_id=user_id,
                category_id=category,
                ts=clock,
                session_id=session_id,
                query_id=query_id,
                signals=tuple(dict.fromkeys(signals)),
                organic_clicks=tuple(organic),
            )


def _present_ad(catalog: Catalog, ctx: RequestContext, rng: random.Random) -> str:
    """Serving policy of the simulated platform: mostly query-relevant ads
    weighted by an affinity-independent promotion weight, plus exploration."""
    cfg = catalog.config
    if rng.random() < cfg.explore_rate:
        return catalog.ad_ids[rng.randrange(len(catalog.ad_ids))]
    candidates = catalog.ads_by_query.get(ctx.query_id)
    if not candidates:
        candidates = catalog.ads_by_category.get(ctx.category_id) or catalog.ad_ids
    weights = [catalog.ads[aid].promo_weight for aid in candidates]
    return rng.choices(candidates, weights=weights, k=1)[0]


def generate_log(catalog: Catalog, n_requests: int,
                 seed: int | str) -> tuple[list[ImpressionRecord], list[Session]]:
    policy_rng = random.Random(f"{seed}/policy")
    click_rng = random.Random(f"{seed}/click")
    records: list[ImpressionRecord] = []
    session_actions: dict[str, list[Action]] = {}
    session_meta: dict[str, tuple[str, str]] = {}
    for ctx in iter_request_contexts(catalog, n_requests, seed):
        acts = session_actions.setdefault(ctx.session_id, [])
        session_meta[ctx.session_id] = (ctx.user_id, ctx.category_id)
        acts.append(Action("SubmitQuery", ctx.query_id, ctx.ts))
        ad_id = _present_ad(catalog, ctx, policy_rng)
        clicked = click_rng.random() < click_probability(catalog, ctx.signals, ad_id)
        converted = clicked and click_rng.random() < catalog.ads[ad_id].conversion_rate
        if clicked:
            acts.append(Action("ClickAd", ad_id, ctx.ts))
        for item_id, click_ts in ctx.organic_clicks:
            acts.append(Action("ClickItem", item_id, click_ts))
        records.append(ImpressionRecord(
            request_id=ctx.request_id,
            user_id=ctx.user_id,
            ts=ctx.ts,
            signals=ctx.signals,
            ad_id=ad_id,
            clicked=clicked,
            converted=converted,
            ad_price=round(catalog.click_price(ad_id), 6),
            session_id=ctx.session_id,
            category_id=ctx.category_id,
        ))
    sessions = [
        # organic clicks land a few ticks late, so stable-sort by ts
        Session(sid, session_meta[sid][0], session_meta[sid][1],
                tuple(sorted(acts, key=lambda a: a.ts)))
        for sid, acts in sorted(session_actions.items())
    ]
    return records, sessions


# ---------------------------------------------------------------------------
# file formats

_LOG_FIELDS = frozenset({
    "request_id", "user_id", "ts", "signals", "ad_id", "clicked", "converted",
    "ad_price", "session_id", "category_id",
})


def write_log(path: str, records: Iterable[ImpressionRecord]) -> None:
    write_json_lines(path, (
        {
            "request_id": r.request_id,
            "user_id": r.user_id,
            "ts": r.ts,
            "signals": [{"kind": s.kind, "id": s.id} for s in r.signals],
            "ad_id": r.ad_id,
            "clicked": r.clicked,
            "converted": r.converted,
            "ad_price": r.ad_price,
            "session_id": r.session_id,
            "category_id": r.category_id,
        }
        for r in records
    ))


def _as_str(path: str, line_no: int, obj: dict, key: str) -> str:
    value = obj[key]
    if not isinstance(value, str):
        raise ParseError(path, line_no, f"field {key!r} must be a string")
    return value


def _as_int(path: str, line_no: int, obj: dict, key: str) -> int:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(path, line_no, f"field {key!r} must be an integer")
    return value


def _as_bool(path: str, line_no: int, obj: dict, key: str) -> bool:
    value = obj[key]
    if not isinstance(value, bool):
        raise ParseError(path, line_no, f"field {key!r} must be a boolean")
    return value


def _as_number(path: str, line_no: int, obj: dict, key: str) -> float:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(path, line_no, f"field {key!r} must be a number")
    return float(value)


def _parse_signals(path: str, line_no: int, raw: object) -> tuple[SignalRef, ...]:
    if not isinstance(raw, list):
        raise ParseError(path, line_no, "field 'signals' must be a list")
    out = []
    for entry in raw:
        if not isinstance(entry, dict):
            raise ParseError(path, line_no, "signal entries must be objects")
        expect_fields(path, line_no, entry, frozenset({"kind", "id"}))
        kind, sid = entry["kind"], entry["id"]
        if kind not in SIGNAL_KINDS:
            raise ParseError(path, line_no, f"unknown signal kind {kind!r}")
        if not isinstance(sid, str):
            raise ParseError(path, line_no, "signal id must be a string")
        out.append(SignalRef(kind, sid))
    return tuple(out)


def read_log(path: str) -> list[ImpressionRecord]:
    records = []
    for line_no, obj in iter_json_lines(path):
        expect_fields(path, line_no, obj, _LOG_FIELDS)
        try:
            records.append(ImpressionRecord(
                request_id=_as_str(path, line_no, obj, "request_id"),
                user_id=_as_str(path, line_no, obj, "user_id"),
                ts=_as_int(path, line_no, obj, "ts"),
                signals=_parse_signals(path, line_no, obj["signals"]),
                ad_id=_as_str(path, line_no, obj, "ad_id"),
                clicked=_as_bool(path, line_no, obj, "clicked"),
                converted=_as_bool(path, line_no, obj, "converted"),
                ad_price=_as_number(path, line_no, obj, "ad_price"),
                session_id=_as_str(path, line_no, obj, "session_id"),
                category_id=_as_str(path, line_no, obj, "category_id"),
            ))
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from exc
    return records


def write_sessions(path: str, sessions: Iterable[Session]) -> None:
    write_json_lines(path, (
        {
            "session_id": s.session_id,
            "user_id": s.user_id,
            "category_id": s.category_id,
            "actions": [{"kind": a.kind, "ref": a.ref, "ts": a.ts} for a in s.actions],
        }
        for s in sessions
    ))


_SESSION_FIELDS = frozenset({"session_id", "user_id", "category_id", "actions"})


def read_sessions(path: str) -> list[Session]:
    sessions = []
    for line_no, obj in iter_json_lines(path):
        expect_fields(path, line_no, obj, _SESSION_FIELDS)
        raw_actions = obj["actions"]
        if not isinstance(raw_actions, list):
            raise ParseError(path, line_no, "field 'actions' must be a list")
        actions = []
        for entry in raw_actions:
            if not isinstance(entry, dict):
                raise ParseError(path, line_no, "action entries must be objects")
            expect_fields(path, line_no, entry, frozenset({"kind", "ref", "ts"}))
            actions.append(Action(
                _as_str(path, line_no, entry, "kind"),
                _as_str(path, line_no, entry, "ref"),
                _as_int(path, line_no, entry, "ts"),
            ))
        try:
            sessions.append(Session(
                session_id=_as_str(path, line_no, obj, "session_id"),
                user_id=_as_str(path, line_no, obj, "user_id"),
                category_id=_as_str(path, line_no, obj, "category_id"),
                actions=tuple(actions),
            ))
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from exc
    return sessions


def write_catalog(path: str, catalog: Catalog) -> None:
    def lines() -> Iterator[dict]:
        cfg = {f.name: getattr(catalog.config, f.name) for f in dataclass_fields(GenConfig)}
        yield {"entity": "config", **cfg}
        for cat in catalog.categories:
            yield {"entity": "category", "id": cat}
        for iid in sorted(catalog.items):
            item = catalog.items[iid]
            yield {"entity": "item", "id": item.id, "price": item.price,
                   "category_id": item.category_id}
        for shop in catalog.shops:
            yield {"entity": "shop", "id": shop}
        for brand in catalog.brands:
            yield {"entity": "brand", "id": brand}
        for qid in sorted(catalog.queries):
            query = catalog.queries[qid]
            yield {"entity": "query", "id": query.id, "category_id": query.category_id}
        for uid in sorted(catalog.users):
            user = catalog.users[uid]
            yield {"entity": "user", "id": user.id, "segments": list(user.segments),
                   "home_categories": list(user.home_categories)}
        for aid in sorted(catalog.ads):
            ad = catalog.ads[aid]
            yield {"entity": "ad", "id": ad.id, "item_id": ad.item_id, "shop_id": ad.shop_id,
                   "brand_id": ad.brand_id, "category_id": ad.category_id,
                   "conversion_rate": ad.conversion_rate, "taking_rate": ad.taking_rate,
                   "promo_weight": ad.promo_weight, "base_affinity": ad.base_affinity,
                   "affinities": ad.affinities}
    write_json_lines(path, lines())


def read_catalog(path: str) -> Catalog:
    config: GenConfig | None = None
    categories: list[str] = []
    items: dict[str, Item] = {}
    shops: list[str] = []
    brands: list[str] = []
    queries: dict[str, Query] = {}
    users: dict[str, User] = {}
    ads: dict[str, Ad] = {}
    config_field_names = {f.name for f in dataclass_fields(GenConfig)}
    for line_no, obj in iter_json_lines(path):
        entity = obj.get("entity")
        if entity == "config":
            expect_fields(path, line_no, obj, frozenset(config_field_names | {"entity"}))
            try:
                config = GenConfig(**{k: v for k, v in obj.items() if k != "entity"})
            except TypeError as exc:
                raise ParseError(path, line_no, f"bad config: {exc}") from exc
        elif entity == "category":
            categories.append(_as_str(path, line_no, obj, "id"))
        elif entity == "item":
            items[obj["id"]] = Item(_as_str(path, line_no, obj, "id"),
                                    _as_number(path, line_no, obj, "price"),
                                    _as_str(path, line_no, obj, "category_id"))
        elif entity == "shop":
            shops.append(_as_str(path, line_no, obj, "id"))
        elif entity == "brand":
            brands.append(_as_str(path, line_no, obj, "id"))
        elif entity == "query":
            queries[obj["id"]] = Query(_as_str(path, line_no, obj, "id"),
                                       _as_str(path, line_no, obj, "category_id"))
        elif entity == "user":
            users[obj["id"]] = User(_as_str(path, line_no, obj, "id"),
                                    tuple(obj["segments"]), tuple(obj["home_categories"]))
        elif entity == "ad":
            ads[obj["id"]] = Ad(
                id=_as_str(path, line_no, obj, "id"),
                item_id=_as_str(path, line_no, obj, "item_id"),
                shop_id=_as_str(path, line_no, obj, "shop_id"),
                brand_id=_as_str(path, line_no, obj, "brand_id"),
                category_id=_as_str(path, line_no, obj, "category_id"),
                conversion_rate=_as_number(path, line_no, obj, "conversion_rate"),
                taking_rate=_as_number(path, line_no, obj, "taking_rate"),
                promo_weight=_as_number(path, line_no, obj, "promo_weight"),
                base_affinity=_as_number(path, line_no, obj, "base_affinity"),
                affinities=dict(obj["affinities"]),
            )
        else:
            raise ParseError(path, line_no, f"unknown entity {entity!r}")
    if config is None:
        raise ParseError(path, 0, "catalog file has no config line")
    catalog = Catalog(config, tuple(categories), items, tuple(shops), tuple(brands),
                      queries, users, ads)
    try:
        catalog.validate()
    except ValueError as exc:
        raise ParseError(path, 0, str(exc)) from exc
    return catalog


def split_by_time(records: list[ImpressionRecord],
                  next_frac: float) -> tuple[list[ImpressionRecord], list[ImpressionRecord]]:
    """Split off the trailing `next_frac` of records (by timestamp) as the
    out-of-time period."""
    if not 0.0 < next_frac < 1.0:
        raise ValueError("next_frac must be in (0,1)")
    ordered = sorted(records, key=lambda r: (r.ts, r.request_id))
    cut = len(ordered) - int(len(ordered) * next_frac)
    return ordered[:cut], ordered[cut:]


def split_random(records: list[ImpressionRecord], test_frac: float,
                 seed: int | str) -> tuple[list[ImpressionRecord], list[ImpressionRecord]]:
    """Seeded held-out split; order within each part follows the input."""
    if not 0.0 < test_frac < 1.0:
        raise ValueError("test_frac must be in (0,1)")
    rng = random.Random(f"{seed}/split")
    n_test = max(1, int(len(records) * test_frac))
    test_idx = set(rng.sample(range(len(records)), k=n_test))
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test
