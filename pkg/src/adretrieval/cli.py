"""Pipeline commands and the line-protocol serving loop.

Each stage reads its upstream artifacts, verifies the digest chain
(network → model → indexes), writes its own artifact atomically
(temp file + rename) and appends a manifest line with input/output
hashes.  Artifacts are pure functions of (inputs, config, seed), so
rerunning a stage reproduces byte-identical files.

Configuration uses an INI file with CLI-flag precedence:
flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import os
import signal as signals
import socketserver
import sys
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .clicklog import (ConfigError, GenConfig, ImpressionRecord, Session, generate_catalog,
                       generate_log, read_catalog, read_log, read_sessions, split_by_time,
                       split_random, write_catalog, write_log, write_sessions)
from .evalsim import (click_count_scorer, format_eval_table, format_sim_report,
                      make_baseline_engine, make_model_engine, model_scorer, offline_eval,
                      sim_report_records, simulate_online, UserOracle)
from .invindex import (IndexLoadError, build_rewriting_index, build_selecting_index,
                       dump_index, load_index, serialize_index)
from .jsonl import ParseError, dump_json_line, write_json_lines
from .model import (IntegrityError, OBJECTIVES, TrainConfig, TrainingError, extract_samples,
                    load_model, model_digest, save_model, train_lr)
from .network import (count_edge_stats, drop_generic_keys, init_by_click_count, init_by_iv,
                      init_by_session_relevance, merge_initializations, network_digest,
                      read_network, write_network)
from .pricing import Pricer
from .retrieval import RetrievalRequest, retrieve
from .clicklog import SIGNAL_KINDS, SignalRef


class StageError(Exception):
    """A stage cannot run: missing or digest-mismatched upstream artifact."""

    def __init__(self, message: str, expected: str | None = None, found: str | None = None):
        if expected is not None or found is not None:
            message = f"{message}: expected {expected}, found {found}"
        super().__init__(message)
        self.expected = expected
        self.found = found


# ---------------------------------------------------------------------------
# configuration

@dataclass(slots=True)
class PipelineConfig:
    # artifact file names, resolved against the --in/--out directories
    dir: str = "pipeline"
    log: str = "log.jsonl"
    sessions: str = "sessions.jsonl"
    catalog: str = "catalog.jsonl"
    network: str = "network.jsonl"
    model: str = "model.jsonl"
    index_rewrite: str = "rewrite.idx"
    index_select: str = "select.idx"
    manifest: str = "manifest.jsonl"
    eval_report: str = "eval.jsonl"
    sim_report: str = "sim.jsonl"
    seed: int = 101
    # generator
    n_records: int = 120000
    gen_overrides: dict = field(default_factory=dict)
    # splits shared by init-net / train / eval
    test_frac: float = 0.05
    next_frac: float = 1.0 / 6.0
    # network initialization
    click_threshold: int = 2
    iv_top_k: int = 50
    iv_per_source: bool = True
    min_cosine: float = 0.1
    max_fanout: int = 5000
    # training
    objective: str = "rpm"
    learning_rate: float = 0.1
    epochs: int = 20
    l2: float = 1e-4
    batch_size: int = 256  # 0 = full batch
    standardize: bool = True
    use_transforms: bool = True
    # indexes
    cap_rewrite: int = 100
    cap_select: int = 300
    # retrieval and serving
    topn: int = 10
    max_signals: int = 16
    score_floor: float | None = None
    host: str = "127.0.0.1"
    port: int = 7707
    # pricing smoothing
    cvr_alpha: float = 1.0
    cvr_beta: float = 49.0
    # simulation
    requests: int = 10000
    slate_size: int = 1

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        for name in ("cap_rewrite", "cap_select", "topn", "max_signals", "requests",
                     "slate_size", "epochs", "n_records"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("test_frac", "next_frac"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in (0,1)")
        for name in ("learning_rate",):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("l2", "min_cosine", "cvr_alpha", "cvr_beta"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0")
        if self.click_threshold < 0:
            raise ConfigError("click_threshold must be >= 0")
        if self.iv_top_k < 1:
            raise ConfigError("iv_top_k must be >= 1")
        if self.batch_size < 0:
            raise ConfigError("batch_size must be >= 0 (0 = full batch)")
        if not 0 <= self.port <= 65535:
            raise ConfigError("port must be in [0, 65535]")

    def digest(self) -> str:
        payload = dataclasses.asdict(self)
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def gen_config(self) -> GenConfig:
        return GenConfig(**self.gen_overrides)

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs, l2=self.l2,
                           batch_size=self.batch_size or None, seed=self.seed,
                           standardize=self.standardize, use_transforms=self.use_transforms)


_SECTIONS: dict[str, tuple[str, ...]] = {
    "paths": ("dir", "log", "sessions", "catalog", "network", "model", "index_rewrite",
              "index_select", "manifest", "eval_report", "sim_report"),
    "pipeline": ("seed",),
    "split": ("test_frac", "next_frac"),
    "network": ("click_threshold", "iv_top_k", "iv_per_source", "min_cosine", "max_fanout"),
    "train": ("objective", "learning_rate", "epochs", "l2", "batch_size", "standardize",
              "use_transforms"),
    "index": ("cap_rewrite", "cap_select"),
    "retrieval": ("topn", "max_signals", "score_floor"),
    "pricing": ("cvr_alpha", "cvr_beta"),
    "simulate": ("requests", "slate_size"),
    "serve": ("host", "port"),
}

_BOOL_OPTIONS = frozenset({"iv_per_source", "standardize", "use_transforms"})
_INT_OPTIONS = frozenset({"seed", "n_records", "click_threshold", "iv_top_k", "max_fanout",
                          "epochs", "batch_size", "cap_rewrite", "cap_select", "topn",
                          "max_signals", "port", "requests", "slate_size"})
_FLOAT_OPTIONS = frozenset({"test_frac", "next_frac", "min_cosine", "learning_rate", "l2",
                            "cvr_alpha", "cvr_beta"})
_TRUTHY = {"1": True, "true": True, "yes": True, "on": True,
           "0": False, "false": False, "no": False, "off": False}


def _coerce(option: str, text: str) -> object:
    text = text.strip()
    try:
        if option in _BOOL_OPTIONS:
            value = _TRUTHY.get(text.lower())
            if value is None:
                raise ValueError(text)
            return value
        if option in _INT_OPTIONS:
            return int(text)
        if option in _FLOAT_OPTIONS:
            return float(text)
        if option == "score_floor":
            return None if text.lower() in ("", "none") else float(text)
    except ValueError:
        raise ConfigError(f"bad value for {option}: {text!r}") from None
    return text


_GEN_FIELDS = {f.name: f for f in dataclasses.fields(GenConfig)}


def _coerce_gen(option: str, text: str) -> object:
    default = _GEN_FIELDS[option].default
    try:
        return int(text) if isinstance(default, int) else float(text)
    except ValueError:
        raise ConfigError(f"bad value for gen.{option}: {text!r}") from None


def load_config(path: str | None) -> PipelineConfig:
    config = PipelineConfig()
    if path is None:
        return config
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values: dict[str, object] = {}
    for section in parser.sections():
        if section == "gen":
            for option, text in parser.items(section):
                if option == "n_records":
                    values["n_records"] = _coerce("n_records", text)
                elif option in _GEN_FIELDS:
                    config.gen_overrides[option] = _coerce_gen(option, text)
                else:
                    raise ConfigError(f"{path}: unknown option gen.{option}")
            continue
        known = _SECTIONS.get(section)
        if known is None:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for option, text in parser.items(section):
            if option not in known:
                raise ConfigError(f"{path}: unknown option {section}.{option}")
            values[option] = _coerce(option, text)
    return dataclasses.replace(config, **values)


def apply_flags(config: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    overrides = {}
    for name in ("seed", "objective", "cap_rewrite", "cap_select", "topn", "port",
                 "n_records", "requests", "epochs", "learning_rate", "l2", "batch_size"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return dataclasses.replace(config, **overrides) if overrides else config


# ---------------------------------------------------------------------------
# artifact plumbing

def file_digest(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write(path: str, write: Callable[[str], None]) -> None:
    """Write via a sibling temp file and rename; never leaves a partial
    artifact at the target path."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=os.path.basename(path) + ".", dir=directory)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _require(path: str, stage: str) -> str:
    if not os.path.exists(path):
        raise StageError(f"{stage}: missing upstream artifact {path}")
    return path


def _append_manifest(config: PipelineConfig, out_dir: str, stage: str,
                     inputs: Sequence[str], outputs: Sequence[str], started: float) -> None:
    entry = {
        "stage": stage,
        "config_digest": config.digest(),
        "seed": config.seed,
        "inputs": {p: file_digest(p) for p in sorted(inputs)},
        "outputs": {p: file_digest(p) for p in sorted(outputs)},
        "duration_s": round(time.perf_counter() - started, 3),
        "ts": int(time.time()),
    }
    path = os.path.join(out_dir, config.manifest)
    os.makedirs(out_dir, exist_ok=True)
    with open(path, "a", encoding="utf-8", newline="\n") as handle:
        handle.write(dump_json_line(entry) + "\n")


def _path(config: PipelineConfig, name: str, base: str) -> str:
    value = getattr(config, name)
    return value if os.path.isabs(value) else os.path.join(base, value)


def split_records(config: PipelineConfig, records: list[ImpressionRecord],
                  ) -> tuple[list[ImpressionRecord], list[ImpressionRecord],
                             list[ImpressionRecord], int]:
    """(train, test, next, boundary_ts): trailing next_frac by time is the
    out-of-time split, then a seeded test_frac held out of the rest."""
    main, next_period = split_by_time(records, config.next_frac)
    if not main:
        raise StageError("split: no records before the out-of-time boundary")
    train, test = split_random(main, config.test_frac, config.seed)
    return train, test, next_period, main[-1].ts


def sessions_before(sessions: list[Session], boundary_ts: int) -> list[Session]:
    return [s for s in sessions if s.actions[-1].ts <= boundary_ts]


# ---------------------------------------------------------------------------
# stages

def cmd_gen(config: PipelineConfig, in_dir: str, out_dir: str) -> int:
    started = time.perf_counter()
    catalog = generate_catalog(config.gen_config(), config.seed)
    records, sessions = generate_log(catalog, config.n_records, config.seed)
    catalog_path = _path(config, "catalog", out_dir)
    log_path = _path(config, "log", out_dir)
    sessions_path = _path(config, "sessions", out_dir)
    atomic_write(catalog_path, lambda p: write_catalog(p, catalog))
    atomic_write(log_path, lambda p: write_log(p, records))
    atomic_write(sessions_path, lambda p: write_sessions(p, sessions))
    _append_manifest(config, out_dir, "gen", [], [catalog_path, log_path, sessions_path],
                     started)
    clicked = sum(r.clicked for r in records)
    print(f"gen: {len(records)} impressions ({clicked} clicked), "
          f"{len(sessions)} sessions, {len(catalog.ads)} ads -> {out_dir}")
    return 0


def cmd_init_net(config: PipelineConfig, in_dir: str, out_dir: str) -> int:
    started = time.perf_counter()
    log_path = _require(_path(config, "log", in_dir), "init-net")
    catalog_path = _require(_path(config, "catalog", in_dir), "init-net")
    sessions_path = _require(_path(config, "sessions", in_dir), "init-net")
    records = read_log(log_path)
    catalog = read_catalog(catalog_path)
    sessions = read_sessions(sessions_path)
    train, _, _, boundary_ts = split_records(config, records)
    full = count_edge_stats(train, catalog)
    by_count = init_by_click_count(full, config.click_threshold)
    by_iv = init_by_iv(full, top_k=config.iv_top_k, per_source=config.iv_per_source)
    by_session = init_by_session_relevance(sessions_before(sessions, boundary_ts),
                                           config.min_cosine)
    net = merge_initializations(by_count, by_iv, by_session, full)
    net, dropped = drop_generic_keys(net, config.max_fanout)
    net_path = _path(config, "network", out_dir)
    atomic_write(net_path, lambda p: write_network(p, net))
    _append_manifest(config, out_dir, "init-net",
                     [log_path, catalog_path, sessions_path], [net_path], started)
    print(f"init-net: {len(net.nodes)} nodes, {len(net.rewriting)} rewriting edges, "
          f"{len(net.selecting)} selecting edges, {len(dropped)} generic keys dropped "
          f"-> {net_path}")
    return 0


def cmd_train(config: PipelineConfig, in_dir: str, out_dir: str) -> int:
    started = time.perf_counter()
    log_path = _require(_path(config, "log", in_dir), "train")
    catalog_path = _require(_path(config, "catalog", in_dir), "train")
    net_path = _require(_path(config, "network", in_dir), "train")
    records = read_log(log_path)
    read_catalog(catalog_path)  # validated even though training keys off the network
    net = read_network(net_path)
    train, _, _, _ = split_records(config, records)
    samples, dropped = extract_samples(net, train)
    model = train_lr(samples, net, config.train_config(), config.objective,
                     network_digest=network_digest(net))
    model_path = _path(config, "model", out_dir)
    atomic_write(model_path, lambda p: save_model(p, model))
    _append_manifest(config, out_dir, "train", [log_path, catalog_path, net_path],
                     [model_path], started)
    print(f"train: {len(samples)} samples ({dropped} dropped), objective={config.objective}, "
          f"loss={model.train_loss:.5f} -> {model_path}")
    return 0


def cmd_build_index(config: PipelineConfig, in_dir: str, out_dir: str) -> int:
    started = time.perf_counter()
    net_path = _require(_path(config, "network", in_dir), "build-index")
    model_path = _require(_path(config, "model", in_dir), "build-index")
    net = read_network(net_path)
    model = load_model(model_path)
    found = network_digest(net)
    if model.network_digest and model.network_digest != found:
        raise StageError("build-index: model was trained on a different network",
                         expected=model.network_digest, found=found)
    rw_index = build_rewriting_index(net, model, config.cap_rewrite)
    sel_index = build_selecting_index(net, model, config.cap_select)
    rw_path = _path(config, "index_rewrite", out_dir)
    sel_path = _path(config, "index_select", out_dir)
    atomic_write(rw_path, lambda p: serialize_index(rw_index, p))
    atomic_write(sel_path, lambda p: serialize_index(sel_index, p))
    _append_manifest(config, out_dir, "build-index", [net_path, model_path],
                     [rw_path, sel_path], started)
    n_rw = sum(len(pl.entries) for pl in rw_index.lists.values())
    n_sel = sum(len(pl.entries) for pl in sel_index.lists.values())
    print(f"build-index: {len(rw_index.lists)} rewriting lists ({n_rw} entries), "
          f"{len(sel_index.lists)} selecting lists ({n_sel} entries) -> {out_dir}")
    return 0


def _check_chain(stage: str, model, net, rw_index, sel_index) -> None:
    found_net = network_digest(net)
    if model.network_digest and model.network_digest != found_net:
        raise StageError(f"{stage}: model was trained on a different network",
                         expected=model.network_digest, found=found_net)
    found_model = model_digest(model)
    for index in (rw_index, sel_index):
        if index.model_digest != found_model:
            raise StageError(f"{stage}: index was built from a different model",
                             expected=index.model_digest, found=found_model)
        if index.network_digest and index.network_digest != found_net:
            raise StageError(f"{stage}: index was built from a different network",
                             expected=index.network_digest, found=found_net)


def cmd_eval(config: PipelineConfig, in_dir: str, out_dir: str) -> int:
    started = time.perf_counter()
    log_path = _require(_path(config, "log", in_dir), "eval")
    net_path = _require(_path(config, "network", in_dir), "eval")
    model_path = _require(_path(config, "model", in_dir), "eval")
    records = read_log(log_path)
    net = read_network(net_path)
    model = load_model(model_path)
    found = network_digest(net)
    if model.network_digest and model.network_digest != found:
        raise StageError("eval: model was trained on a different network",
                         expected=model.network_digest, found=found)
    train, test, next_period, _ = split_records(config, records)
    splits = {}
    coverage = []
    for name, part in (("train", train), ("test", test), ("next", next_period)):
        samples, dropped = extract_samples(net, part)
        splits[name] = samples
        coverage.append({"record": "coverage", "split": name, "n_records": len(part),
                         "n_samples": len(samples), "n_dropped": dropped})
    scorers = {"lr": model_scorer(model, net), "click_count": click_count_scorer(net)}
    table = offline_eval(scorers, splits)
    print(format_eval_table(table))
    report_path = _path(config, "eval_report", out_dir)
    rows = [{"record": "auc", "scorer": scorer, "split": split, "auc": value}
            for scorer, row in sorted(table.items()) for split, value in sorted(row.items())]
    atomic_write(report_path, lambda p: write_json_lines(p, coverage + rows))
    _append_manifest(config, out_dir, "eval", [log_path, net_path, model_path],
                     [report_path], started)
    return 0


def _load_serving_state(config: PipelineConfig, in_dir: str, stage: str):
    log_path = _require(_path(config, "log", in_dir), stage)
    catalog_path = _require(_path(config, "catalog", in_dir), stage)
    net_path = _require(_path(config, "network", in_dir), stage)
    model_path = _require(_path(config, "model", in_dir), stage)
    rw_path = _require(_path(config, "index_rewrite", in_dir), stage)
    sel_path = _require(_path(config, "index_select", in_dir), stage)
    records = read_log(log_path)
    catalog = read_catalog(catalog_path)
    net = read_network(net_path)
    model = load_model(model_path)
    rw_index = load_index(rw_path)
    sel_index = load_index(sel_path)
    _check_chain(stage, model, net, rw_index, sel_index)
    train, _, _, _ = split_records(config, records)
    pricer = Pricer.from_history(catalog, train, (config.cvr_alpha, config.cvr_beta))
    inputs = [log_path, catalog_path, net_path, model_path, rw_path, sel_path]
    return catalog, net, model, rw_index, sel_index, pricer, inputs


def cmd_simulate(config: PipelineConfig, in_dir: str, out_dir: str) -> int:
    started = time.perf_counter()
    catalog, net, model, rw_index, sel_index, pricer, inputs = _load_serving_state(
        config, in_dir, "simulate")
    engine = make_model_engine(rw_index, sel_index, model, pricer,
                               score_floor=config.score_floor)
    baseline = make_baseline_engine(net, config.cap_rewrite, config.cap_select, pricer)
    oracle = UserOracle(catalog, config.slate_size)
    metrics_new, metrics_base, lifts = simulate_online(
        engine, baseline, catalog, oracle, config.requests, config.seed)
    print(format_sim_report(metrics_new, metrics_base, lifts))
    report_path = _path(config, "sim_report", out_dir)
    rows = sim_report_records(metrics_new, metrics_base, lifts)
    atomic_write(report_path, lambda p: write_json_lines(p, rows))
    _append_manifest(config, out_dir, "simulate", inputs, [report_path], started)
    return 0


def cmd_dump_index(config: PipelineConfig, path: str) -> int:
    index = load_index(_require(path, "dump-index"))
    dump_index(index, sys.stdout)
    return 0


# ---------------------------------------------------------------------------
# serving

def parse_serve_request(obj: object, default_n: int, max_signals: int) -> RetrievalRequest:
    if not isinstance(obj, dict):
        raise ValueError("request must be a JSON object")
    unknown = set(obj) - {"signals", "n"}
    if unknown:
        raise ValueError(f"unknown field '{sorted(unknown)[0]}'")
    if "signals" not in obj:
        raise ValueError("missing field 'signals'")
    raw_signals = obj["signals"]
    if not isinstance(raw_signals, list) or not raw_signals:
        raise ValueError("'signals' must be a non-empty array")
    if len(raw_signals) > max_signals:
        raise ValueError(f"too many signals (limit {max_signals})")
    signals = []
    for i, entry in enumerate(raw_signals):
        if not isinstance(entry, dict) or set(entry) != {"kind", "id"}:
            raise ValueError(f"signals[{i}]: must be an object with fields 'kind' and 'id'")
        kind, sid = entry["kind"], entry["id"]
        if kind not in SIGNAL_KINDS:
            raise ValueError(f"signals[{i}]: unknown signal kind {kind!r}")
        if not isinstance(sid, str) or not sid:
            raise ValueError(f"signals[{i}]: 'id' must be a non-empty string")
        signals.append(SignalRef(kind, sid))
    n = obj.get("n", default_n)
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise ValueError("'n' must be a positive integer")
    return RetrievalRequest(signals=tuple(signals), n=n)


class ServeState:
    """Immutable snapshot holder; reload() swaps in a fresh snapshot
    atomically so in-flight requests keep the one they started with."""

    def __init__(self, config: PipelineConfig, in_dir: str):
        self.config = config
        self.in_dir = in_dir
        self.snapshot = self._load()

    def _load(self):
        _, _, model, rw_index, sel_index, pricer, _ = _load_serving_state(
            self.config, self.in_dir, "serve")
        return rw_index, sel_index, model, pricer

    def reload(self) -> None:
        try:
            self.snapshot = self._load()
            print("serve: snapshot reloaded", file=sys.stderr, flush=True)
        except Exception as exc:  # keep serving the old snapshot
            print(f"serve: reload failed: {exc}", file=sys.stderr, flush=True)

    def answer(self, line: str) -> str:
        rw_index, sel_index, model, pricer = self.snapshot
        try:
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"bad JSON: {exc.msg}") from None
            req = parse_serve_request(obj, self.config.topn, self.config.max_signals)
            results = retrieve(req, rw_index, sel_index, model, pricer,
                               score_floor=self.config.score_floor)
            payload = {"results": [{"ad_id": r.ad_id, "score": r.score,
                                    "ocpc_price": r.ocpc_price} for r in results]}
            return dump_json_line(payload)
        except ValueError as exc:
            return dump_json_line({"error": str(exc)})


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            response = self.server.state.answer(line)  # type: ignore[attr-defined]
            self.wfile.write((response + "\n").encode("utf-8"))
            self.wfile.flush()


class Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], state: ServeState):
        super().__init__(address, _Handler)
        self.state = state


def build_server(config: PipelineConfig, in_dir: str) -> Server:
    state = ServeState(config, in_dir)
    return Server((config.host, config.port), state)


def cmd_serve(config: PipelineConfig, in_dir: str, out_dir: str) -> int:
    server = build_server(config, in_dir)
    if hasattr(signals, "SIGHUP"):
        try:
            signals.signal(signals.SIGHUP, lambda *_: server.state.reload())
        except ValueError:
            pass  # not in the main thread
    host, port = server.server_address[:2]
    print(f"serve: listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adretrieval",
        description="Click-log-driven ad retrieval pipeline: generate logs, build the "
                    "signal/key/ad network, train edge weights, compile inverted indexes, "
                    "evaluate, simulate, and serve.")
    parser.add_argument("--config", metavar="FILE", help="INI config file")
    parser.add_argument("--seed", type=int, help="pipeline seed")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, *, infile: bool = False):
        p = sub.add_parser(name, help=help_text)
        if infile:
            p.add_argument("--in", dest="in_path", metavar="FILE", required=True,
                           help="index file to dump")
        else:
            p.add_argument("--in", dest="in_path", metavar="DIR",
                           help="input artifact directory (default: paths.dir)")
            p.add_argument("--out", dest="out_path", metavar="DIR",
                           help="output artifact directory (default: paths.dir)")
        return p

    p = add("gen", "generate the catalog, click log, and session files")
    p.add_argument("--n-records", dest="n_records", type=int, help="impressions to generate")

    add("init-net", "build the signal/key/ad network from the click log")

    p = add("train", "fit edge weights on the training split")
    p.add_argument("--objective", choices=list(OBJECTIVES), help="training objective")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int, help="0 = full batch")

    p = add("build-index", "compile the rewriting and ad-selecting indexes")
    p.add_argument("--cap-rewrite", dest="cap_rewrite", type=int, help="rewriting list cap")
    p.add_argument("--cap-select", dest="cap_select", type=int, help="selecting list cap")

    add("eval", "AUC of the model and the click-count baseline per split")

    p = add("simulate", "paired closed-loop simulation vs the click-count baseline")
    p.add_argument("--requests", type=int, help="simulated requests")
    p.add_argument("--topn", type=int, help="slate size fallback for retrieval")

    p = add("serve", "serve retrieval over a line-protocol TCP socket")
    p.add_argument("--port", type=int, help="TCP port (0 picks a free port)")
    p.add_argument("--topn", type=int, help="default result count per request")

    add("dump-index", "print a loaded index as one line per posting entry", infile=True)
    return parser


_COMMANDS = {
    "gen": cmd_gen,
    "init-net": cmd_init_net,
    "train": cmd_train,
    "build-index": cmd_build_index,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "serve": cmd_serve,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = apply_flags(load_config(args.config), args)
        config.validate()
        if args.command == "dump-index":
            return cmd_dump_index(config, args.in_path)
        in_dir = args.in_path if args.in_path is not None else config.dir
        out_dir = args.out_path if args.out_path is not None else config.dir
        return _COMMANDS[args.command](config, in_dir, out_dir)
    except BrokenPipeError:
        # downstream closed early (e.g. piped into head); exit quietly and
        # keep the interpreter's shutdown flush from raising again
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 1
    except (StageError, ParseError, ConfigError, IntegrityError, TrainingError,
            IndexLoadError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
