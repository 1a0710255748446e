"""Logistic edge-weight model over signal→key→ad paths.

Samples carry the activated edge sets of one impression; features are
sparse node/edge identifiers plus per-layer continuous aggregates of
edge statistics.  Training minimizes weighted logistic loss with L2 by
(mini-batch) gradient descent; under the RPM objective positives are
weighted by ad price so the learned score tracks revenue odds.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse, special

from .clicklog import ImpressionRecord
from .jsonl import ParseError, dump_json_line, iter_json_lines
from .network import (Edge, HierNetwork, Node, REWRITING, SELECTING,
                      ad_node, signal_node)

OBJECTIVES = ("ctr", "rpm")

CONT_FEATURES = (
    "c|rw|clicks", "c|rw|presents", "c|rw|ctr", "c|rw|log1p_clicks", "c|rw|log1p_presents",
    "c|sel|clicks", "c|sel|presents", "c|sel|ctr", "c|sel|log1p_clicks", "c|sel|log1p_presents",
)
_TRANSFORM_SLOTS = (3, 4, 8, 9)  # log1p entries within CONT_FEATURES


class IntegrityError(ValueError):
    """Sample, model, and network disagree about what exists."""


class TrainingError(ValueError):
    """Training preconditions violated (e.g. single-class data)."""


def node_feature(node: Node) -> str:
    return f"n|{node.layer}|{node.kind}|{node.id}"


def edge_feature(layer_pair: str, edge: Edge) -> str:
    prefix = "rw" if layer_pair == REWRITING else "sel"
    src, dst = edge
    return f"{prefix}|{src.kind}|{src.id}|{dst.kind}|{dst.id}"


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass(frozen=True, slots=True)
class TrainingSample:
    """Activated edges of one impression: ⟨{signal→key}, {key→ad}, label⟩."""

    rewriting_edges: tuple[Edge, ...]
    selecting_edges: tuple[Edge, ...]
    label: int
    ad_price: float
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not self.selecting_edges:
            raise ValueError("sample needs at least one selecting edge")
        ads = {dst for _, dst in self.selecting_edges}
        if len(ads) != 1:
            raise ValueError(f"selecting edges point at multiple ads: {sorted(ads)}")
        keys = {src for src, _ in self.selecting_edges}
        for _, key in self.rewriting_edges:
            if key not in keys:
                raise ValueError(f"rewriting edge key {key} has no selecting edge")
        if not self.rewriting_edges:
            raise ValueError("sample needs at least one rewriting edge")
        if self.weight <= 0:
            raise ValueError(f"weight must be > 0, got {self.weight}")

    @property
    def ad_id(self) -> str:
        return self.selecting_edges[0][1].id


def extract_samples(net: HierNetwork,
                    records: Iterable[ImpressionRecord]) -> tuple[list[TrainingSample], int]:
    """Mine each impression's signal→key→ad paths through the network.

    Impressions whose shown ad is unreachable from their signals are
    dropped; the second return value counts them.
    """
    rw_keysets = {src: frozenset(out) for src, out in net.rw_out.items()}
    in_keysets = {adn: frozenset(keys) for adn, keys in net.sel_in.items()}
    samples: list[TrainingSample] = []
    dropped = 0
    for rec in records:
        adn = ad_node(rec.ad_id)
        in_keys = in_keysets.get(adn)
        if not in_keys:
            dropped += 1
            continue
        rewriting: list[Edge] = []
        keys_used: set[Node] = set()
        for sig in rec.signals:
            snode = signal_node(sig.kind, sig.id)
            out = rw_keysets.get(snode)
            if not out:
                continue
            shared = out & in_keys
            if shared:
                keys_used.update(shared)
                rewriting.extend((snode, knode) for knode in shared)
        if not rewriting:
            dropped += 1
            continue
        samples.append(TrainingSample(
            rewriting_edges=tuple(sorted(rewriting)),
            selecting_edges=tuple(sorted((knode, adn) for knode in keys_used)),
            label=1 if rec.clicked else 0,
            ad_price=rec.ad_price,
        ))
    return samples, dropped


@dataclass(frozen=True, eq=False)
class FeatureVector:
    sparse: tuple[str, ...]  # sorted, unique feature names
    continuous: np.ndarray   # aligned with CONT_FEATURES


def edge_stats_vector(clicks: int, presents: int, use_transforms: bool = True) -> tuple[float, ...]:
    """Per-edge continuous block: clicks, presents, CTR, log1p transforms."""
    ctr = clicks / presents if presents else 0.0
    if use_transforms:
        return (float(clicks), float(presents), ctr, math.log1p(clicks), math.log1p(presents))
    return (float(clicks), float(presents), ctr, 0.0, 0.0)


def featurize(sample: TrainingSample, net: HierNetwork,
              use_transforms: bool = True) -> FeatureVector:
    """Sparse ids for every node and edge of the sample plus the two
    per-layer aggregate blocks."""
    names: set[str] = set()
    continuous = np.zeros(len(CONT_FEATURES))
    for offset, layer_pair, edges in (
        (0, REWRITING, sample.rewriting_edges),
        (5, SELECTING, sample.selecting_edges),
    ):
        emap = net.edges(layer_pair)
        clicks = presents = 0
        for edge in edges:
            stats = emap.get(edge)
            if stats is None:
                raise IntegrityError(f"sample edge missing from network: {edge}")
            clicks += stats.clicks
            presents += stats.presents
            names.add(edge_feature(layer_pair, edge))
            names.add(node_feature(edge[0]))
            names.add(node_feature(edge[1]))
        continuous[offset:offset + 5] = edge_stats_vector(clicks, presents, use_transforms)
    return FeatureVector(sparse=tuple(sorted(names)), continuous=continuous)


def weight_samples(samples: Sequence[TrainingSample], objective: str) -> list[TrainingSample]:
    """CTR: unit weights.  RPM: positives weighted by their ad price."""
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if objective == "ctr":
        return [replace(s, weight=1.0) for s in samples]
    out = []
    for s in samples:
        if s.label == 1:
            if s.ad_price <= 0:
                raise ValueError(f"positive sample for ad {s.ad_id} has nonpositive price")
            out.append(replace(s, weight=float(s.ad_price)))
        else:
            out.append(replace(s, weight=1.0))
    return out


@dataclass(frozen=True, slots=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 20
    l2: float = 1e-4
    batch_size: int | None = 256  # None = full batch
    seed: int = 0
    standardize: bool = True
    use_transforms: bool = True


@dataclass(eq=False)
class LrModel:
    objective: str
    bias: float
    weights: dict[str, float]  # node/edge feature names plus CONT_FEATURES
    l2: float
    hyper: TrainConfig
    network_digest: str = ""
    train_loss: float = float("nan")
    loss_history: tuple[float, ...] = ()

    @property
    def cont_weights(self) -> np.ndarray:
        cached = getattr(self, "_cont_cache", None)
        if cached is None:
            cached = np.array([self.weights.get(name, 0.0) for name in CONT_FEATURES])
            object.__setattr__(self, "_cont_cache", cached)
        return cached


def score(model: LrModel, features: FeatureVector) -> float:
    z = model.bias
    weights = model.weights
    for name in features.sparse:
        z += weights.get(name, 0.0)
    z += float(np.dot(model.cont_weights, features.continuous))
    return sigmoid(z)


def model_digest(model: LrModel) -> str:
    """Content identity of a model: objective, bias, and full weight table."""
    digest = hashlib.sha256()
    digest.update(dump_json_line({"objective": model.objective, "bias": model.bias,
                                  "l2": model.l2}).encode())
    for name in sorted(model.weights):
        digest.update(f"{name}={model.weights[name]!r}\n".encode())
    return digest.hexdigest()


def loss_and_grad(w_sparse: np.ndarray, w_cont: np.ndarray, bias: float,
                  x_sparse: sparse.csr_matrix, x_cont: np.ndarray, labels: np.ndarray,
                  weights: np.ndarray, l2: float) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Weighted logistic loss (normalized by total weight) with L2 penalty
    on all weights except the bias, and its analytic gradient."""
    z = x_sparse @ w_sparse + x_cont @ w_cont + bias
    # log(1 + exp(-|z|)) form keeps the loss finite for large |z|
    log_p = -np.logaddexp(0.0, -z)
    log_1mp = -np.logaddexp(0.0, z)
    total = weights.sum()
    loss = -(weights * (labels * log_p + (1.0 - labels) * log_1mp)).sum() / total
    loss += 0.5 * l2 * (float(w_sparse @ w_sparse) + float(w_cont @ w_cont))
    p = special.expit(z)
    resid = weights * (p - labels) / total
    grad_sparse = x_sparse.T @ resid + l2 * w_sparse
    grad_cont = x_cont.T @ resid + l2 * w_cont
    grad_bias = float(resid.sum())
    return float(loss), np.asarray(grad_sparse).ravel(), grad_cont, grad_bias


def _feature_names(net: HierNetwork) -> list[str]:
    names = [node_feature(n) for n in net.nodes]
    names += [edge_feature(REWRITING, e) for e in net.rewriting]
    names += [edge_feature(SELECTING, e) for e in net.selecting]
    return sorted(names)


def _design(samples: Sequence[TrainingSample], net: HierNetwork, names: list[str],
            use_transforms: bool) -> tuple[sparse.csr_matrix, np.ndarray, np.ndarray, np.ndarray]:
    index = {name: i for i, name in enumerate(names)}
    indptr = [0]
    indices: list[int] = []
    x_cont = np.zeros((len(samples), len(CONT_FEATURES)))
    labels = np.zeros(len(samples))
    weights = np.zeros(len(samples))
    for row, sample in enumerate(samples):
        fv = featurize(sample, net, use_transforms)
        try:
            indices.extend(index[name] for name in fv.sparse)
        except KeyError as exc:
            raise IntegrityError(f"feature {exc.args[0]!r} missing from network space") from exc
        indptr.append(len(indices))
        x_cont[row] = fv.continuous
        labels[row] = sample.label
        weights[row] = sample.weight
    data = np.ones(len(indices))
    x_sparse = sparse.csr_matrix(
        (data, np.array(indices, dtype=np.int64), np.array(indptr, dtype=np.int64)),
        shape=(len(samples), len(names)))
    return x_sparse, x_cont, labels, weights


def train_lr(samples: Sequence[TrainingSample], net: HierNetwork,
             hyper: TrainConfig = TrainConfig(), objective: str = "ctr",
             network_digest: str = "") -> LrModel:
    """Gradient-descent fit of the edge-weight model.

    Deterministic per (samples, hyper): batch order is a pure function of
    the seed.  Continuous features are standardized internally and the
    scaling is folded back into raw-space weights afterwards, so the
    returned model scores raw feature vectors directly.
    """
    samples = weight_samples(samples, objective)
    n_pos = sum(s.label for s in samples)
    if n_pos == 0 or n_pos == len(samples):
        raise TrainingError("training needs at least one positive and one negative sample")
    names = _feature_names(net)
    x_sparse, x_cont, labels, weights = _design(samples, net, names, hyper.use_transforms)

    if hyper.standardize:
        mu = x_cont.mean(axis=0)
        sd = x_cont.std(axis=0)
        sd[sd == 0.0] = 1.0
    else:
        mu = np.zeros(x_cont.shape[1])
        sd = np.ones(x_cont.shape[1])
    x_std = (x_cont - mu) / sd

    n = len(samples)
    w_sparse = np.zeros(len(names))
    w_cont = np.zeros(x_cont.shape[1])
    bias = 0.0
    rng = np.random.default_rng(hyper.seed)
    batch = n if hyper.batch_size is None else min(hyper.batch_size, n)
    history = []
    for _ in range(hyper.epochs):
        order = rng.permutation(n) if batch < n else np.arange(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb = x_sparse[idx]
            _, g_sparse, g_cont, g_bias = loss_and_grad(
                w_sparse, w_cont, bias, xb, x_std[idx], labels[idx], weights[idx], hyper.l2)
            w_sparse -= hyper.learning_rate * g_sparse
            w_cont -= hyper.learning_rate * g_cont
            bias -= hyper.learning_rate * g_bias
        loss, _, _, _ = loss_and_grad(w_sparse, w_cont, bias, x_sparse, x_std, labels,
                                      weights, hyper.l2)
        history.append(loss)

    # fold standardization back into raw-space weights
    w_cont_raw = w_cont / sd
    bias_raw = bias - float((w_cont * mu / sd).sum())
    model_weights = {name: float(w) for name, w in zip(names, w_sparse)}
    for name, w in zip(CONT_FEATURES, w_cont_raw):
        model_weights[name] = float(w)
    return LrModel(
        objective=objective,
        bias=float(bias_raw),
        weights=model_weights,
        l2=hyper.l2,
        hyper=hyper,
        network_digest=network_digest,
        train_loss=history[-1] if history else float("nan"),
        loss_history=tuple(history),
    )


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based AUC with tied scores receiving average ranks:
    (Σ ranks of positives − M(M+1)/2) / (M·N)."""
    if len(scores) != len(labels):
        raise ValueError("scores and labels must have equal length")
    n = len(scores)
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    order = sorted(range(n), key=lambda i: scores[i])
    rank_sum_pos = 0.0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg_rank = (i + j + 2) / 2.0  # ranks are 1-based
        for k in range(i, j + 1):
            if labels[order[k]] == 1:
                rank_sum_pos += avg_rank
        i = j + 1
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# model file

_MODEL_FORMAT = "adretrieval-model"
_MODEL_VERSION = 1


def features_digest(names: Iterable[str]) -> str:
    digest = hashlib.sha256()
    for name in sorted(names):
        digest.update(name.encode())
        digest.update(b"\n")
    return digest.hexdigest()


def save_model(path: str, model: LrModel) -> None:
    header = {
        "format": _MODEL_FORMAT,
        "version": _MODEL_VERSION,
        "objective": model.objective,
        "bias": model.bias,
        "l2": model.l2,
        "hyper": {
            "learning_rate": model.hyper.learning_rate,
            "epochs": model.hyper.epochs,
            "l2": model.hyper.l2,
            "batch_size": model.hyper.batch_size,
            "seed": model.hyper.seed,
            "standardize": model.hyper.standardize,
            "use_transforms": model.hyper.use_transforms,
        },
        "network_digest": model.network_digest,
        "features_digest": features_digest(model.weights),
        "train_loss": model.train_loss,
        "loss_history": list(model.loss_history),
        "n_weights": len(model.weights),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_json_line(header))
        fh.write("\n")
        for name in sorted(model.weights):
            fh.write(dump_json_line({"f": name, "w": model.weights[name]}))
            fh.write("\n")


def load_model(path: str) -> LrModel:
    lines = iter_json_lines(path)
    try:
        line_no, header = next(lines)
    except StopIteration:
        raise ParseError(path, 0, "empty model file") from None
    if header.get("format") != _MODEL_FORMAT:
        raise ParseError(path, line_no, f"not a model file (format={header.get('format')!r})")
    if header.get("version") != _MODEL_VERSION:
        raise ParseError(path, line_no, f"unsupported model version {header.get('version')!r}")
    weights: dict[str, float] = {}
    for line_no, obj in lines:
        if set(obj) != {"f", "w"}:
            raise ParseError(path, line_no, "weight line must have exactly fields 'f' and 'w'")
        weights[obj["f"]] = float(obj["w"])
    if len(weights) != header["n_weights"]:
        raise ParseError(path, 0, f"expected {header['n_weights']} weights, found {len(weights)}")
    if features_digest(weights) != header["features_digest"]:
        raise ParseError(path, 0, "feature dictionary digest mismatch")
    hyper_raw = header["hyper"]
    hyper = TrainConfig(
        learning_rate=hyper_raw["learning_rate"],
        epochs=hyper_raw["epochs"],
        l2=hyper_raw["l2"],
        batch_size=hyper_raw["batch_size"],
        seed=hyper_raw["seed"],
        standardize=hyper_raw["standardize"],
        use_transforms=hyper_raw["use_transforms"],
    )
    return LrModel(
        objective=header["objective"],
        bias=float(header["bias"]),
        weights=weights,
        l2=float(header["l2"]),
        hyper=hyper,
        network_digest=header["network_digest"],
        train_loss=float(header["train_loss"]),
        loss_history=tuple(float(x) for x in header["loss_history"]),
    )
