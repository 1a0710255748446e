from __future__ import annotations

import io
import math
import struct

import pytest

from adretrieval.invindex import (IndexLoadError, InvertedIndex, PostingEntry,
                                  PostingList, build_rewriting_index,
                                  build_selecting_index, dump_index, entry_sort_key,
                                  entry_weight, index_from_bytes, index_to_bytes,
                                  load_index, serialize_index)
from adretrieval.model import (CONT_FEATURES, IntegrityError, LrModel, TrainConfig,
                               edge_feature)
from adretrieval.network import (EdgeStats, HierNetwork, ad_node, key_node,
                                 network_digest, signal_node)


def uniform_model(net, sparse_value=0.0, cont=(), digest=""):
    weights = {}
    for node in net.nodes:
        weights[f"n|{node.layer}|{node.kind}|{node.id}"] = 0.0
    for e in net.rewriting:
        weights[edge_feature("rewriting", e)] = sparse_value
    for e in net.selecting:
        weights[edge_feature("selecting", e)] = sparse_value
    for name, value in cont:
        weights[name] = value
    return LrModel(objective="ctr", bias=0.0, weights=weights, l2=0.0,
                   hyper=TrainConfig(), network_digest=digest)


def fan_net(n_keys=6):
    s = signal_node("query", "q1")
    rewriting = {(s, key_node("item", f"i{k}")): EdgeStats(k, 10) for k in range(n_keys)}
    selecting = {(key_node("item", f"i{k}"), ad_node("a1")): EdgeStats(1, 5)
                 for k in range(n_keys)}
    return HierNetwork.from_edges(rewriting, selecting)


class TestEntryWeight:
    def test_combines_sparse_and_continuous(self):
        net = fan_net(2)
        edge = (signal_node("query", "q1"), key_node("item", "i1"))
        model = uniform_model(net, sparse_value=0.25,
                              cont=[("c|rw|clicks", 0.1), ("c|rw|ctr", 2.0)])
        got = entry_weight(model, "rewriting", edge, net.rewriting[edge])
        assert got == pytest.approx(0.25 + 0.1 * 1 + 2.0 * 0.1, abs=1e-15)

    def test_selecting_uses_second_block(self):
        net = fan_net(2)
        edge = (key_node("item", "i1"), ad_node("a1"))
        model = uniform_model(net, cont=[("c|rw|clicks", 9.0), ("c|sel|presents", 0.5)])
        got = entry_weight(model, "selecting", edge, net.selecting[edge])
        assert got == pytest.approx(0.5 * 5, abs=1e-15)

    def test_unknown_edge_rejected(self):
        net = fan_net(2)
        model = uniform_model(net)
        stray = (signal_node("query", "q9"), key_node("item", "i0"))
        with pytest.raises(IntegrityError, match="no weight"):
            entry_weight(model, "rewriting", stray, EdgeStats(1, 2))


class TestBuild:
    def test_cap_truncates_to_best_entries(self):
        net = fan_net(6)
        model = uniform_model(net, cont=[("c|rw|clicks", 1.0)])
        index = build_rewriting_index(net, model, cap=3)
        plist = index.lists[signal_node("query", "q1")]
        assert [e.term.id for e in plist.entries] == ["i5", "i4", "i3"]

    def test_small_candidate_set_kept_whole(self):
        net = fan_net(2)
        model = uniform_model(net)
        index = build_selecting_index(net, model, cap=300)
        for plist in index.lists.values():
            assert len(plist.entries) == 1

    def test_matches_independent_topk(self, small_world):
        net, model = small_world.net, small_world.model
        cap = 5
        index = build_rewriting_index(net, model, cap=cap)
        by_trigger = {}
        cont = [model.weights.get(n, 0.0) for n in CONT_FEATURES[:5]]
        for (src, dst), stats in net.rewriting.items():
            w = model.weights[edge_feature("rewriting", (src, dst))]
            vec = (float(stats.clicks), float(stats.presents),
                   stats.clicks / stats.presents if stats.presents else 0.0,
                   math.log1p(stats.clicks), math.log1p(stats.presents))
            w += sum(c * v for c, v in zip(cont, vec))
            by_trigger.setdefault(src, []).append((-w, dst.id, dst.kind, dst, vec))
        assert set(index.lists) == set(by_trigger)
        for trigger, rows in by_trigger.items():
            rows.sort(key=lambda r: r[:3])
            got = index.lists[trigger].entries
            assert len(got) == min(cap, len(rows))
            for entry, row in zip(got, rows):
                assert entry.term == row[3]
                assert entry.weight == pytest.approx(-row[0], abs=1e-12)
                assert entry.stats == pytest.approx(row[4], abs=1e-12)

    def test_equal_weights_break_ties_by_term_id(self):
        net = fan_net(4)
        model = uniform_model(net)  # all weights zero
        index = build_selecting_index(net, model, cap=300)
        sel_index = build_rewriting_index(net, model, cap=300)
        terms = [e.term.id for e in sel_index.lists[signal_node("query", "q1")].entries]
        assert terms == sorted(terms)
        assert index.lists[key_node("item", "i0")].entries[0].term == ad_node("a1")

    def test_cap_domain(self):
        net = fan_net(2)
        with pytest.raises(ValueError, match="cap"):
            build_rewriting_index(net, uniform_model(net), cap=0)

    def test_digest_mismatch_rejected(self):
        net = fan_net(2)
        model = uniform_model(net, digest="0" * 64)
        with pytest.raises(IntegrityError, match="different network"):
            build_rewriting_index(net, model, cap=10)

    def test_digests_stamped(self, small_world):
        assert small_world.rw_index.network_digest == small_world.net_digest
        assert small_world.rw_index.model_digest == small_world.sel_index.model_digest
        assert small_world.rw_index.cap == 100 and small_world.sel_index.cap == 300


class TestBinaryRoundTrip:
    def test_bytes_round_trip_equality(self, small_world):
        for index in (small_world.rw_index, small_world.sel_index):
            data = index_to_bytes(index)
            back = index_from_bytes(data)
            assert back == index
            assert index_to_bytes(back) == data

    def test_rebuild_is_byte_identical(self, small_world):
        again = build_rewriting_index(small_world.net, small_world.model, cap=100)
        assert index_to_bytes(again) == index_to_bytes(small_world.rw_index)

    def test_file_round_trip(self, small_world, tmp_path):
        path = str(tmp_path / "rw.idx")
        serialize_index(small_world.rw_index, path)
        assert load_index(path) == small_world.rw_index

    def test_truncations_never_return_partial_index(self, small_world):
        data = index_to_bytes(small_world.sel_index)
        for cut in [0, 3, 4, 10, 17, 40, len(data) // 2, len(data) - 1]:
            with pytest.raises(IndexLoadError, match="truncated|bad magic"):
                index_from_bytes(data[:cut])

    def test_bad_magic(self):
        with pytest.raises(IndexLoadError, match="bad magic"):
            index_from_bytes(b"NOPE" + b"\x00" * 40)

    def test_bad_version(self, small_world):
        data = bytearray(index_to_bytes(small_world.rw_index))
        data[4:8] = struct.pack("<I", 99)
        with pytest.raises(IndexLoadError, match="unsupported version"):
            index_from_bytes(bytes(data))

    def test_bad_kind_code(self, small_world):
        data = bytearray(index_to_bytes(small_world.rw_index))
        data[8] = 7
        with pytest.raises(IndexLoadError, match="kind code"):
            index_from_bytes(bytes(data))

    def test_trailing_bytes_rejected(self, small_world):
        data = index_to_bytes(small_world.rw_index)
        with pytest.raises(IndexLoadError, match="trailing bytes"):
            index_from_bytes(data + b"\x00")

    def test_unsorted_entries_rejected(self):
        s = signal_node("query", "q1")
        k1, k2 = key_node("item", "i1"), key_node("item", "i2")
        entries = (PostingEntry(k1, 1.0, (0.0,) * 5), PostingEntry(k2, 2.0, (0.0,) * 5))
        assert [entry_sort_key(e) for e in entries] != \
            sorted(entry_sort_key(e) for e in entries)
        bad = InvertedIndex(kind="rewriting", cap=10, lists={
            s: PostingList(trigger=s, entries=entries)})
        with pytest.raises(IndexLoadError, match="not sorted"):
            index_from_bytes(index_to_bytes(bad))

    def test_cap_violation_rejected(self):
        s = signal_node("query", "q1")
        entries = (PostingEntry(key_node("item", "i1"), 2.0, (0.0,) * 5),
                   PostingEntry(key_node("item", "i2"), 1.0, (0.0,) * 5))
        bad = InvertedIndex(kind="rewriting", cap=1, lists={
            s: PostingList(trigger=s, entries=entries)})
        with pytest.raises(IndexLoadError, match="exceeds cap"):
            index_from_bytes(index_to_bytes(bad))

    def test_out_of_order_triggers_rejected(self):
        def single(trigger_id):
            trigger = signal_node("query", trigger_id)
            plist = PostingList(trigger=trigger,
                                entries=(PostingEntry(key_node("item", "i1"), 1.0,
                                                      (0.0,) * 5),))
            return InvertedIndex(kind="rewriting", cap=10, lists={trigger: plist})

        data_a, data_b = index_to_bytes(single("q2")), index_to_bytes(single("q1"))
        header_len = 4 + struct.calcsize("<IBIQ") + 2 + 2 + 4
        header = bytearray(data_a[:header_len])
        header[-4:] = struct.pack("<I", 2)
        spliced = bytes(header) + data_a[header_len:] + data_b[header_len:]
        with pytest.raises(IndexLoadError, match="out of order"):
            index_from_bytes(spliced)


class TestValidate:
    def test_trigger_layer_checked(self):
        k = key_node("item", "i1")
        plist = PostingList(trigger=k, entries=())
        index = InvertedIndex(kind="rewriting", cap=10, lists={k: plist})
        with pytest.raises(ValueError, match="trigger must be a signal node"):
            index.validate()

    def test_term_layer_checked(self):
        s = signal_node("query", "q1")
        plist = PostingList(trigger=s,
                            entries=(PostingEntry(ad_node("a1"), 1.0, (0.0,) * 5),))
        index = InvertedIndex(kind="rewriting", cap=10, lists={s: plist})
        with pytest.raises(ValueError, match="term must be a key node"):
            index.validate()


def test_dump_index_format(small_world):
    out = io.StringIO()
    dump_index(small_world.rw_index, out)
    lines = out.getvalue().splitlines()
    assert lines[0].startswith("# kind=rewriting cap=100 triggers=")
    n_entries = sum(len(p.entries) for p in small_world.rw_index.lists.values())
    assert len(lines) == 1 + n_entries
    first = lines[1].split("\t")
    assert len(first) == 4 and ":" in first[0] and ":" in first[1]
    float(first[2])  # weight column parses
