"""Personalized ad retrieval from click logs.

Pipeline: synthetic click logs -> signal/key/ad hierarchical network
(click-count, information-value, and session-relevance initializations)
-> logistic edge-weight model (CTR or price-weighted RPM objective)
-> capped inverted indexes -> top-N retrieval with multi-path score
aggregation and OCPC pricing -> offline AUC and paired closed-loop
simulation.
"""

from __future__ import annotations

from .clicklog import (Catalog, GenConfig, ImpressionRecord, Session, SignalRef,
                       generate_catalog, generate_log, read_catalog, read_log,
                       read_sessions, split_by_time, split_random, write_catalog,
                       write_log, write_sessions)
from .network import (EdgeStats, HierNetwork, Node, count_edge_stats, drop_generic_keys,
                      init_by_click_count, init_by_iv, init_by_session_relevance,
                      merge_initializations, modified_iv, network_digest, read_network,
                      session_cosine, write_network)
from .model import (LrModel, TrainConfig, TrainingSample, auc, extract_samples, featurize,
                    load_model, model_digest, save_model, score, sigmoid, train_lr)
from .invindex import (InvertedIndex, PostingEntry, PostingList, build_rewriting_index,
                       build_selecting_index, dump_index, load_index, serialize_index)
from .retrieval import (RetrievalRequest, RetrievalResult, RetrievalStats, aggregate_paths,
                        extract_signals, retrieve)
from .pricing import AdCommerceStats, ConstantPricer, Pricer, estimate_cvr, ocpc_price
from .evalsim import (SimMetrics, UserOracle, baseline_retrieve, click_count_scorer,
                      make_baseline_engine, make_model_engine, model_scorer, offline_eval,
                      simulate_online)

__version__ = "0.1.0"

__all__ = [
    "AdCommerceStats", "Catalog", "ConstantPricer", "EdgeStats", "GenConfig",
    "HierNetwork", "ImpressionRecord", "InvertedIndex", "LrModel", "Node",
    "PostingEntry", "PostingList", "Pricer", "RetrievalRequest", "RetrievalResult",
    "RetrievalStats", "Session", "SignalRef", "SimMetrics", "TrainConfig",
    "TrainingSample", "UserOracle", "aggregate_paths", "auc", "baseline_retrieve",
    "build_rewriting_index", "build_selecting_index", "click_count_scorer",
    "count_edge_stats", "drop_generic_keys", "dump_index", "estimate_cvr",
    "extract_samples", "extract_signals", "featurize", "generate_catalog",
    "generate_log", "init_by_click_count", "init_by_iv", "init_by_session_relevance",
    "load_index", "load_model", "make_baseline_engine", "make_model_engine",
    "merge_initializations", "model_digest", "model_scorer", "modified_iv",
    "network_digest", "ocpc_price", "offline_eval", "read_catalog", "read_log",
    "read_network", "read_sessions", "retrieve", "save_model", "score",
    "serialize_index", "session_cosine", "sigmoid", "simulate_online",
    "split_by_time", "split_random", "train_lr", "write_catalog", "write_log",
    "write_network", "write_sessions",
]
