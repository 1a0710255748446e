from __future__ import annotations

import time
from dataclasses import dataclass

import pytest
from hypothesis import HealthCheck, settings

from adretrieval.clicklog import (Catalog, GenConfig, ImpressionRecord, Session,
                                  generate_catalog, generate_log, split_by_time, split_random)
from adretrieval.invindex import InvertedIndex, build_rewriting_index, build_selecting_index
from adretrieval.model import LrModel, TrainConfig, TrainingSample, extract_samples, train_lr
from adretrieval.network import (HierNetwork, count_edge_stats, drop_generic_keys,
                                 init_by_click_count, init_by_iv, init_by_session_relevance,
                                 merge_initializations, network_digest)
from adretrieval.pricing import Pricer

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True)
settings.load_profile("default")


@dataclass
class World:
    """A generated corpus with everything built from it."""

    config: GenConfig
    seed: int
    catalog: Catalog
    records: list[ImpressionRecord]
    sessions: list[Session]
    train: list[ImpressionRecord]
    test: list[ImpressionRecord]
    next_period: list[ImpressionRecord]
    boundary_ts: int
    net: HierNetwork
    net_digest: str
    samples: list[TrainingSample]
    model: LrModel
    rw_index: InvertedIndex
    sel_index: InvertedIndex
    pricer: Pricer
    build_seconds: float


def build_world(config: GenConfig, seed: int, n_records: int, hyper: TrainConfig,
                objective: str = "rpm", test_frac: float = 0.05,
                next_frac: float = 1.0 / 6.0, click_threshold: int = 2,
                iv_top_k: int = 50, min_cosine: float = 0.1,
                caps: tuple[int, int] = (100, 300)) -> World:
    started = time.perf_counter()
    catalog = generate_catalog(config, seed)
    records, sessions = generate_log(catalog, n_records, seed)
    main, next_period = split_by_time(records, next_frac)
    train, test = split_random(main, test_frac, seed)
    boundary_ts = main[-1].ts
    full = count_edge_stats(train, catalog)
    edges = merge_initializations(
        init_by_click_count(full, click_threshold),
        init_by_iv(full, top_k=iv_top_k, per_source=True),
        init_by_session_relevance(
            [s for s in sessions if s.actions[-1].ts <= boundary_ts], min_cosine),
        full)
    net, _ = drop_generic_keys(edges)
    digest = network_digest(net)
    samples, _ = extract_samples(net, train)
    model = train_lr(samples, net, hyper, objective, network_digest=digest)
    rw_index = build_rewriting_index(net, model, caps[0])
    sel_index = build_selecting_index(net, model, caps[1])
    pricer = Pricer.from_history(catalog, train)
    return World(config=config, seed=seed, catalog=catalog, records=records,
                 sessions=sessions, train=train, test=test, next_period=next_period,
                 boundary_ts=boundary_ts, net=net, net_digest=digest, samples=samples,
                 model=model, rw_index=rw_index, sel_index=sel_index, pricer=pricer,
                 build_seconds=time.perf_counter() - started)


SMALL_CONFIG = GenConfig(n_ads=40, n_items=60, n_shops=8, n_brands=6, n_categories=3,
                         n_queries=30, n_users=25, n_segments=10)


@pytest.fixture(scope="session")
def small_world() -> World:
    """Fast corpus for unit tests: 4000 impressions, light training."""
    return build_world(SMALL_CONFIG, seed=7, n_records=4000,
                       hyper=TrainConfig(epochs=6, seed=7), click_threshold=1,
                       iv_top_k=30)


@pytest.fixture(scope="session")
def full_world() -> World:
    """The seeded learnable corpus at full scale (shared by the
    acceptance experiments): 120000 impressions, default training."""
    return build_world(GenConfig(), seed=101, n_records=120000,
                       hyper=TrainConfig(seed=101))
