"""Tests for log parsing, splitting, negative sampling, and synthetic logs."""

import io

import numpy as np
import pytest

from mixrec import data as d


def log_from_rows(rows):
    text = "\n".join("\t".join(str(c) for c in row) for row in rows) + "\n"
    return d.parse_interactions(io.StringIO(text))


class TestParsing:
    def test_counts_users_items_events(self):
        log = log_from_rows([("a", "x", 1), ("a", "y", 2), ("b", "x", 3)])
        assert len(log.events) == 3
        assert log.num_users == 2
        assert log.num_items == 2

    def test_index_maps_start_at_one_in_first_appearance_order(self):
        log = log_from_rows([("b", "y", 1), ("a", "x", 2)])
        assert log.user_index == {"b": 1, "a": 2}
        assert log.item_index == {"y": 1, "x": 2}
        assert log.items[0] is None  # index 0 reserved for padding

    def test_movielens_layout(self):
        text = "1::1193::5::978300760\n1::661::3::978302109\n2::1193::4::978298413\n"
        log = d.parse_interactions(io.BytesIO(text.encode()), d.ParseFormat.movielens_1m())
        assert len(log.events) == 3
        assert log.num_users == 2
        assert log.num_items == 2
        assert log.events[0][2] == 978300760

    def test_malformed_row_reports_line_number(self):
        text = "1::2::3::4\na::b\n"
        with pytest.raises(d.ParseError, match="line 2"):
            d.parse_interactions(io.StringIO(text), d.ParseFormat.movielens_1m())

    def test_bad_timestamp_reports_line_number(self):
        with pytest.raises(d.ParseError, match="line 1"):
            log_from_rows([("a", "x", "noon")])

    def test_empty_input_gives_empty_log(self):
        log = d.parse_interactions(io.StringIO(""))
        assert log.events == [] and log.num_users == 0


class TestFilterUsers:
    def make(self, counts):
        rows = []
        ts = 0
        for u, c in counts.items():
            for k in range(c):
                rows.append((u, f"i{u}_{k}", ts))
                ts += 1
        return log_from_rows(rows)

    def test_boundary_below(self):
        log = self.make({"a": 9, "b": 10})
        out = d.filter_users(log, 10)
        assert set(out.user_index) == {"b"}

    def test_boundary_at(self):
        log = self.make({"a": 10})
        out = d.filter_users(log, 10)
        assert set(out.user_index) == {"a"}

    def test_all_below_threshold_gives_empty_log(self):
        out = d.filter_users(self.make({"a": 2, "b": 3}), 10)
        assert out.events == [] and out.num_items == 0

    def test_item_index_rebuilt_over_survivors(self):
        log = log_from_rows([("a", "x", 1), ("b", "y", 2), ("b", "z", 3)])
        out = d.filter_users(log, 2)
        assert set(out.item_index) == {"y", "z"}
        assert out.item_index["y"] == 1

    def test_retained_users_satisfy_minimum(self):
        rng = np.random.default_rng(0)
        rows = [(f"u{rng.integers(6)}", f"i{rng.integers(20)}", t) for t in range(120)]
        out = d.filter_users(log_from_rows(rows), 15)
        per_user = {}
        for u, _, _, _ in out.events:
            per_user[u] = per_user.get(u, 0) + 1
        assert all(c >= 15 for c in per_user.values())
        assert len(out.events) >= 15 * len(per_user)


class TestBuildSequences:
    def test_hand_split(self):
        rows = [("u", item, t) for t, item in enumerate("abcde")]
        ds = d.build_sequences(log_from_rows(rows), max_len=4)
        # items a..e got indices 1..5
        by_split = {s: [(ex.input, ex.target) for ex in ds.split_examples(s)]
                    for s in ("train", "val", "test")}
        assert by_split["test"] == [((1, 2, 3, 4), 5)]
        assert by_split["val"] == [((0, 1, 2, 3), 4)]
        assert by_split["train"] == [((0, 0, 0, 1), 2), ((0, 0, 1, 2), 3)]

    def test_two_item_user_contributes_nothing(self):
        rows = [("u", "a", 1), ("u", "b", 2)]
        ds = d.build_sequences(log_from_rows(rows), max_len=4)
        assert ds.examples == []

    def test_truncation_keeps_most_recent(self):
        rows = [("u", item, t) for t, item in enumerate("abcdef")]
        ds = d.build_sequences(log_from_rows(rows), max_len=3)
        test = ds.split_examples("test")[0]
        assert test.input == (3, 4, 5)  # c, d, e
        assert test.target == 6

    def test_example_counts_per_user(self):
        rows = [("u", f"i{t}", t) for t in range(10)]
        ds = d.build_sequences(log_from_rows(rows), max_len=5)
        assert len(ds.split_examples("train")) == 7
        assert len(ds.split_examples("val")) == 1
        assert len(ds.split_examples("test")) == 1

    def test_timestamp_ties_broken_by_file_order(self):
        rows = [("u", "a", 5), ("u", "b", 5), ("u", "c", 5)]
        ds = d.build_sequences(log_from_rows(rows), max_len=3)
        assert ds.user_sequences[1] == [1, 2, 3]

    def test_no_input_contains_target_or_later_items(self):
        rng = np.random.default_rng(1)
        rows = []
        for u in range(8):
            for t in range(int(rng.integers(3, 15))):
                rows.append((f"u{u}", f"i{rng.integers(30)}", t))
        ds = d.build_sequences(log_from_rows(rows), max_len=6)
        for ex in ds.examples:
            seq = ds.user_sequences[ex.user]
            real = [i for i in ex.input if i != d.PAD]
            # the input must be exactly the window just before the target position
            pos = {"test": len(seq) - 1, "val": len(seq) - 2}.get(ex.split)
            if pos is None:
                pos = next(
                    t for t in range(1, len(seq) - 2)
                    if seq[t] == ex.target and tuple(real) == tuple(seq[:t][-6:])
                )
            assert seq[pos] == ex.target
            assert real == seq[:pos][-6:]

    def test_max_len_validation(self):
        with pytest.raises(ValueError):
            d.build_sequences(log_from_rows([("u", "a", 1)]), max_len=1)

    def test_roundtrip_serialization(self, tmp_path):
        rng = np.random.default_rng(2)
        rows = [(f"u{rng.integers(5)}", f"i{rng.integers(12)}", t) for t in range(60)]
        ds = d.build_sequences(log_from_rows(rows), max_len=4)
        path = tmp_path / "ds.jsonl"
        ds.save(path)
        back = d.SequenceDataset.load(path)
        assert back.examples == ds.examples
        assert back.user_sequences == ds.user_sequences
        np.testing.assert_array_equal(back.item_counts, ds.item_counts)
        # and a second save is byte-identical
        path2 = tmp_path / "ds2.jsonl"
        back.save(path2)
        assert path.read_bytes() == path2.read_bytes()


class TestSampleNegatives:
    def test_forced_complement(self):
        counts = np.zeros(102)
        counts[1:102] = 1
        dist = d.PopularityDist(counts)
        out = d.sample_negatives(dist, {50}, 100, np.random.default_rng(0))
        assert sorted(out) == [i for i in range(1, 102) if i != 50]

    def test_popularity_proportional(self):
        dist = d.PopularityDist([0, 90, 5, 5])
        rng = np.random.default_rng(123)
        hits = sum(d.sample_negatives(dist, set(), 1, rng)[0] == 1 for _ in range(10_000))
        assert 0.87 <= hits / 10_000 <= 0.93

    def test_exhausted_pool_raises(self):
        dist = d.PopularityDist([0, 3, 2, 1])
        with pytest.raises(d.SamplingError, match="pool has 0"):
            d.sample_negatives(dist, {1, 2, 3}, 1, np.random.default_rng(0))

    def test_never_returns_excluded_or_padding(self):
        dist = d.PopularityDist([0, 5, 5, 5, 5, 5, 5])
        rng = np.random.default_rng(9)
        for _ in range(200):
            out = d.sample_negatives(dist, {2, 4}, 3, rng)
            assert len(set(out)) == 3
            assert not {2, 4, d.PAD} & set(out)

    def test_deterministic_given_seed(self):
        counts = np.arange(50.0)
        out1 = d.sample_negatives(d.PopularityDist(counts), {3}, 20, np.random.default_rng(5))
        out2 = d.sample_negatives(d.PopularityDist(counts), {3}, 20, np.random.default_rng(5))
        assert out1 == out2


class TestSyntheticLog:
    def test_rule_collapse_for_window_one(self):
        log = d.synthesize_log(5, 20, 16, 1, 0.0, np.random.default_rng(0))
        ds = d.build_sequences(log, max_len=4)
        for seq in ds.user_sequences.values():
            for t in range(1, len(seq)):
                assert seq[t] == (2 * seq[t - 1]) % 16 + 1

    def test_noise_free_transitions_satisfy_rule(self):
        log = d.synthesize_log(10, 30, 50, 2, 0.0, np.random.default_rng(1))
        ds = d.build_sequences(log, max_len=8)
        for seq in ds.user_sequences.values():
            for t in range(2, len(seq)):
                assert seq[t] == d.planted_next(seq[t - 1], seq[t - 2], 50)

    def test_noise_rate_controls_violations(self):
        k, vocab = 2, 50
        log = d.synthesize_log(400, 27, vocab, k, 0.2, np.random.default_rng(2))
        ds = d.build_sequences(log, max_len=8)
        total = violations = 0
        for seq in ds.user_sequences.values():
            for t in range(k, len(seq)):
                total += 1
                violations += seq[t] != d.planted_next(seq[t - 1], seq[t - k], vocab)
        assert total >= 10_000
        assert 0.15 <= violations / total <= 0.25

    def test_timestamps_strictly_increase_per_user(self):
        log = d.synthesize_log(3, 10, 8, 1, 0.5, np.random.default_rng(3))
        per_user = {}
        for u, i, ts in log.indexed_events():
            per_user.setdefault(u, []).append(ts)
        for stamps in per_user.values():
            assert all(b > a for a, b in zip(stamps, stamps[1:]))

    def test_item_indices_are_identity_over_vocab(self):
        log = d.synthesize_log(2, 5, 10, 1, 0.0, np.random.default_rng(4))
        assert log.num_items == 10
        assert all(log.item_index[str(i)] == i for i in range(1, 11))

    def test_parameter_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            d.synthesize_log(1, 5, 10, 5, 0.0, rng)
        with pytest.raises(ValueError):
            d.synthesize_log(1, 5, 3, 1, 0.0, rng)
        with pytest.raises(ValueError):
            d.synthesize_log(1, 5, 10, 1, 1.0, rng)
