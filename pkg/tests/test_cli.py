from __future__ import annotations

import argparse
import dataclasses
import json
import os
import socket
import threading

import pytest

from adretrieval.cli import (PipelineConfig, ServeState, apply_flags, atomic_write,
                             build_server, file_digest, load_config, main,
                             parse_serve_request, sessions_before, split_records)
from adretrieval.clicklog import ConfigError, read_log
from adretrieval.invindex import load_index
from adretrieval.jsonl import iter_json_lines
from adretrieval.retrieval import RetrievalRequest

TINY_INI = """\
[paths]
dir = {dir}

[pipeline]
seed = 5

[gen]
n_records = 900
n_ads = 30
n_items = 45
n_shops = 6
n_brands = 5
n_categories = 3
n_queries = 24
n_users = 18
n_segments = 8

[network]
click_threshold = 1
iv_top_k = 20

[train]
epochs = 3
objective = rpm

[simulate]
requests = 80
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny end-to-end pipeline run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    out = root / "artifacts"
    ini = root / "pipeline.ini"
    ini.write_text(TINY_INI.format(dir=out))
    for stage in ("gen", "init-net", "train", "build-index"):
        assert main(["--config", str(ini), stage]) == 0
    return str(ini), str(out)


class TestConfig:
    def test_defaults(self):
        config = load_config(None)
        assert config.seed == 101 and config.objective == "rpm"
        assert (config.cap_rewrite, config.cap_select, config.topn) == (100, 300, 10)

    def test_ini_overrides(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[pipeline]\nseed = 9\n[train]\nobjective = ctr\n"
                       "batch_size = 0\n[gen]\nn_records = 50\nn_ads = 7\n"
                       "[retrieval]\nscore_floor = 0.25\n")
        config = load_config(str(ini))
        assert config.seed == 9 and config.objective == "ctr"
        assert config.n_records == 50
        assert config.gen_overrides == {"n_ads": 7}
        assert config.gen_config().n_ads == 7
        assert config.score_floor == 0.25
        assert config.train_config().batch_size is None  # 0 means full batch

    def test_unknown_section_rejected(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[surprises]\nx = 1\n")
        with pytest.raises(ConfigError, match=r"unknown section \[surprises\]"):
            load_config(str(ini))

    def test_unknown_option_rejected(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[train]\nmomentum = 0.9\n")
        with pytest.raises(ConfigError, match="unknown option train.momentum"):
            load_config(str(ini))

    def test_bad_value_rejected(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[train]\nepochs = many\n")
        with pytest.raises(ConfigError, match="bad value for epochs"):
            load_config(str(ini))

    def test_flags_beat_file(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[pipeline]\nseed = 9\n[index]\ncap_rewrite = 40\n")
        args = argparse.Namespace(seed=77, cap_rewrite=None)
        config = apply_flags(load_config(str(ini)), args)
        assert config.seed == 77        # flag wins
        assert config.cap_rewrite == 40  # file survives absent flag

    def test_validate_catches_domain_errors(self):
        with pytest.raises(ConfigError, match="topn"):
            dataclasses.replace(PipelineConfig(), topn=0).validate()
        with pytest.raises(ConfigError, match="objective"):
            dataclasses.replace(PipelineConfig(), objective="profit").validate()

    def test_digest_tracks_content(self):
        a, b = PipelineConfig(), dataclasses.replace(PipelineConfig(), seed=6)
        assert a.digest() != b.digest()
        assert a.digest() == PipelineConfig().digest()


class TestPlumbing:
    def test_atomic_write_failure_leaves_no_trace(self, tmp_path):
        target = tmp_path / "out.bin"

        def boom(path):
            with open(path, "w") as fh:
                fh.write("partial")
            raise RuntimeError("disk on fire")

        with pytest.raises(RuntimeError):
            atomic_write(str(target), boom)
        assert list(tmp_path.iterdir()) == []

    def test_atomic_write_replaces_existing(self, tmp_path):
        target = tmp_path / "out.txt"
        target.write_text("old")
        atomic_write(str(target), lambda p: open(p, "w").write("new"))
        assert target.read_text() == "new"

    def test_split_records_matches_library_splits(self, small_world):
        config = dataclasses.replace(PipelineConfig(), seed=small_world.seed)
        train, test, nxt, boundary = split_records(config, small_world.records)
        assert train == small_world.train and test == small_world.test
        assert nxt == small_world.next_period and boundary == small_world.boundary_ts

    def test_sessions_before_filters_on_last_action(self, small_world):
        kept = sessions_before(small_world.sessions, small_world.boundary_ts)
        assert kept
        assert all(s.actions[-1].ts <= small_world.boundary_ts for s in kept)
        assert len(kept) < len(small_world.sessions)


class TestPipelineStages:
    def test_artifacts_exist(self, pipeline):
        _, out = pipeline
        for name in ("catalog.jsonl", "log.jsonl", "sessions.jsonl", "network.jsonl",
                     "model.jsonl", "rewrite.idx", "select.idx", "manifest.jsonl"):
            assert os.path.exists(os.path.join(out, name)), name

    def test_manifest_records_stages_and_digests(self, pipeline):
        _, out = pipeline
        entries = [obj for _, obj in iter_json_lines(os.path.join(out, "manifest.jsonl"))]
        stages = [e["stage"] for e in entries]
        assert stages[:4] == ["gen", "init-net", "train", "build-index"]
        for entry in entries:
            for path, digest in {**entry["inputs"], **entry["outputs"]}.items():
                if os.path.exists(path):
                    assert len(digest) == 64
        gen = entries[0]
        assert gen["inputs"] == {} and len(gen["outputs"]) == 3
        assert gen["seed"] == 5

    def test_indexes_load_and_chain_to_model(self, pipeline):
        _, out = pipeline
        rw_index = load_index(os.path.join(out, "rewrite.idx"))
        sel_index = load_index(os.path.join(out, "select.idx"))
        assert rw_index.kind == "rewriting" and sel_index.kind == "selecting"
        assert rw_index.model_digest == sel_index.model_digest
        assert rw_index.cap == 100 and sel_index.cap == 300

    def test_rerun_is_bit_identical(self, pipeline):
        ini, out = pipeline
        tracked = ["catalog.jsonl", "log.jsonl", "sessions.jsonl", "network.jsonl",
                   "model.jsonl", "rewrite.idx", "select.idx"]
        before = {n: file_digest(os.path.join(out, n)) for n in tracked}
        for stage in ("gen", "init-net", "train", "build-index"):
            assert main(["--config", ini, stage]) == 0
        after = {n: file_digest(os.path.join(out, n)) for n in tracked}
        assert after == before

    def test_eval_prints_table_and_writes_report(self, pipeline, capsys):
        ini, out = pipeline
        assert main(["--config", ini, "eval"]) == 0
        shown = capsys.readouterr().out
        assert "lr" in shown and "click_count" in shown and "train" in shown
        records = [obj for _, obj in iter_json_lines(os.path.join(out, "eval.jsonl"))]
        kinds = {r["record"] for r in records}
        assert kinds == {"coverage", "auc"}
        auc_rows = [r for r in records if r["record"] == "auc"]
        assert {r["scorer"] for r in auc_rows} == {"lr", "click_count"}
        assert {r["split"] for r in auc_rows} == {"train", "test", "next"}

    def test_simulate_writes_paired_report(self, pipeline, capsys):
        ini, out = pipeline
        assert main(["--config", ini, "simulate"]) == 0
        shown = capsys.readouterr().out
        assert "baseline" in shown and "ctr" in shown
        records = [obj for _, obj in iter_json_lines(os.path.join(out, "sim.jsonl"))]
        assert [r["record"] for r in records] == ["metrics", "metrics", "lifts"]
        engine_row = records[0]
        assert engine_row["request_counts"] == 80
        assert engine_row["ctr"] * engine_row["present_counts"] == \
            pytest.approx(engine_row["click_counts"])

    def test_dump_index_prints_entries(self, pipeline, capsys):
        ini, out = pipeline
        assert main(["--config", ini, "dump-index", "--in",
                     os.path.join(out, "rewrite.idx")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("# kind=rewriting")
        assert len(lines) > 1

    def test_gen_flag_overrides_record_count(self, pipeline, tmp_path, capsys):
        ini, _ = pipeline
        alt = tmp_path / "alt"
        assert main(["--config", ini, "gen", "--n-records", "120",
                     "--out", str(alt)]) == 0
        assert len(read_log(str(alt / "log.jsonl"))) == 120


class TestStageFailures:
    def test_missing_upstream_artifact(self, tmp_path, capsys):
        assert main(["train", "--in", str(tmp_path), "--out", str(tmp_path)]) == 1
        assert "missing upstream artifact" in capsys.readouterr().err

    def test_stale_network_digest_detected(self, pipeline, tmp_path, capsys):
        ini, out = pipeline
        stale = tmp_path / "stale"
        stale.mkdir()
        for name in ("catalog.jsonl", "log.jsonl", "sessions.jsonl", "model.jsonl"):
            (stale / name).write_bytes(
                open(os.path.join(out, name), "rb").read())
        # a different click threshold yields a different network than the
        # one the copied model was trained on
        ini2 = tmp_path / "stale.ini"
        ini2.write_text(TINY_INI.format(dir=stale).replace(
            "click_threshold = 1", "click_threshold = 0"))
        assert main(["--config", str(ini2), "init-net"]) == 0
        capsys.readouterr()
        assert main(["--config", str(ini2), "build-index"]) == 1
        err = capsys.readouterr().err
        assert "error:" in err and "expected" in err and "found" in err

    def test_dump_index_missing_file(self, tmp_path, capsys):
        assert main(["dump-index", "--in", str(tmp_path / "nope.idx")]) == 1
        assert "missing upstream artifact" in capsys.readouterr().err

    def test_bad_config_value_fails_cleanly(self, tmp_path, capsys):
        ini = tmp_path / "c.ini"
        ini.write_text("[index]\ncap_rewrite = -3\n")
        assert main(["--config", str(ini), "gen"]) == 1
        assert "cap_rewrite" in capsys.readouterr().err


class TestServeRequestParsing:
    def good(self):
        return {"signals": [{"kind": "query", "id": "q1"}]}

    def test_valid_request(self):
        req = parse_serve_request({"signals": [{"kind": "query", "id": "q1"},
                                               {"kind": "profile", "id": "g1"}],
                                   "n": 3}, default_n=10, max_signals=16)
        assert isinstance(req, RetrievalRequest)
        assert req.n == 3 and len(req.signals) == 2

    def test_n_defaults(self):
        req = parse_serve_request(self.good(), default_n=7, max_signals=16)
        assert req.n == 7

    @pytest.mark.parametrize("obj,message", [
        ([], "request must be a JSON object"),
        ({"signals": [{"kind": "query", "id": "q"}], "extra": 1}, "unknown field 'extra'"),
        ({}, "missing field 'signals'"),
        ({"signals": []}, "'signals' must be a non-empty array"),
        ({"signals": "q1"}, "'signals' must be a non-empty array"),
        ({"signals": ["q1"]}, "signals[0]: must be an object"),
        ({"signals": [{"kind": "zebra", "id": "x"}]},
         "signals[0]: unknown signal kind 'zebra'"),
        ({"signals": [{"kind": "query", "id": ""}]},
         "signals[0]: 'id' must be a non-empty string"),
        ({"signals": [{"kind": "query", "id": "q"}], "n": 0},
         "'n' must be a positive integer"),
        ({"signals": [{"kind": "query", "id": "q"}], "n": True},
         "'n' must be a positive integer"),
    ])
    def test_rejections_name_the_field(self, obj, message):
        with pytest.raises(ValueError) as err:
            parse_serve_request(obj, default_n=10, max_signals=16)
        assert message in str(err.value)

    def test_signal_cap(self):
        obj = {"signals": [{"kind": "profile", "id": f"g{k}"} for k in range(9)]}
        with pytest.raises(ValueError, match=r"too many signals \(limit 8\)"):
            parse_serve_request(obj, default_n=10, max_signals=8)


class TestServing:
    def query_with_results(self, out):
        rw_index = load_index(os.path.join(out, "rewrite.idx"))
        sel_index = load_index(os.path.join(out, "select.idx"))
        for trigger in sorted(rw_index.lists):
            if trigger.kind != "query":
                continue
            for entry in rw_index.lists[trigger].entries:
                if entry.term in sel_index.lists:
                    return trigger.id
        raise AssertionError("no servable query in the tiny index")

    def test_answer_round_trip(self, pipeline):
        ini, out = pipeline
        state = ServeState(load_config(ini), out)
        qid = self.query_with_results(out)
        reply = json.loads(state.answer(
            json.dumps({"signals": [{"kind": "query", "id": qid}], "n": 3})))
        assert reply["results"]
        top = reply["results"][0]
        assert set(top) == {"ad_id", "score", "ocpc_price"}
        assert 0.0 <= top["score"] <= 1.0 and top["ocpc_price"] > 0.0

    def test_answer_reports_errors_per_line(self, pipeline):
        ini, out = pipeline
        state = ServeState(load_config(ini), out)
        assert json.loads(state.answer("{not json"))["error"].startswith("bad JSON")
        assert json.loads(state.answer('{"signals": []}'))["error"] == \
            "'signals' must be a non-empty array"

    def test_socket_protocol(self, pipeline):
        ini, out = pipeline
        config = dataclasses.replace(load_config(ini), port=0)
        server = build_server(config, out)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            qid = self.query_with_results(out)
            with socket.create_connection(server.server_address[:2], timeout=5) as conn:
                fh = conn.makefile("rw", encoding="utf-8", newline="\n")
                payloads = [
                    {"signals": [{"kind": "query", "id": qid}], "n": 2},
                    {"signals": [{"kind": "zebra", "id": "x"}]},
                    {"signals": [{"kind": "query", "id": qid}]},
                ]
                replies = []
                for payload in payloads:
                    fh.write(json.dumps(payload) + "\n")
                    fh.flush()
                    replies.append(json.loads(fh.readline()))
            assert replies[0]["results"]
            assert replies[1] == {"error": "signals[0]: unknown signal kind 'zebra'"}
            assert replies[2]["results"]  # connection survived the error
        finally:
            server.shutdown()
            server.server_close()
            thread.join(timeout=5)

    def test_reload_keeps_old_snapshot_on_failure(self, pipeline, tmp_path, capsys):
        ini, out = pipeline
        state = ServeState(load_config(ini), out)
        snapshot = state.snapshot
        state.in_dir = str(tmp_path)  # nothing there
        state.reload()
        assert state.snapshot is snapshot
        assert "reload failed" in capsys.readouterr().err
