import pytest
from hypothesis import given, settings, strategies as st

from cilner.errors import ConfigError, DataError
from cilner.schema import (
    LabelSet,
    TokenSequence,
    build_schedule,
    format_conll,
    load_conll,
    parse_conll,
    slice_dataset,
)


def labels(n):
    return LabelSet.from_entities(f"E{i:02d}" for i in range(n))


class TestLabelSet:
    def test_o_first_and_sorted(self):
        ls = LabelSet.from_entities(["PER", "DATE", "GPE", "O"])
        assert ls.classes == ("O", "DATE", "GPE", "PER")

    def test_bytewise_order(self):
        # "Z" (0x5A) sorts before "a" (0x61); "é" is multi-byte and sorts last
        ls = LabelSet.from_entities(["é", "a", "Z"])
        assert ls.classes == ("O", "Z", "a", "é")

    @pytest.mark.parametrize("classes", [(), ("A", "O"), ("O", "B", "A"), ("O", "A", "A")])
    def test_invalid(self, classes):
        with pytest.raises(ConfigError):
            LabelSet(classes)

    def test_only_o(self):
        assert len(LabelSet(("O",))) == 1


class TestBuildSchedule:
    def test_six_classes_fg2_pg2(self):
        s = build_schedule(labels(6), 2, 2)
        assert s.partitions == ((1, 2), (3, 4), (5, 6))

    def test_i2b2_fg8_pg2_sizes(self):
        s = build_schedule(labels(16), 8, 2)
        assert [len(p) for p in s.partitions] == [8, 2, 2, 2, 2]

    def test_leftover_is_error(self):
        with pytest.raises(ConfigError):
            build_schedule(labels(5), 2, 2)

    def test_ragged_tail(self):
        s = build_schedule(labels(5), 2, 2, allow_ragged_tail=True)
        assert s.partitions == ((1, 2), (3, 4), (5,))

    def test_single_task(self):
        s = build_schedule(labels(4), 4, 1)
        assert s.num_tasks == 1

    @pytest.mark.parametrize("fg,pg", [(0, 1), (1, 0), (7, 1)])
    def test_bad_sizes(self, fg, pg):
        with pytest.raises(ConfigError):
            build_schedule(labels(6), fg, pg)

    def test_class_views(self):
        s = build_schedule(labels(6), 2, 2)
        assert s.old_classes(3) == (1, 2, 3, 4)
        assert s.learned_classes(2) == (1, 2, 3, 4)
        assert s.num_visible(1) == 3
        with pytest.raises(ConfigError):
            s.new_classes(4)

    @given(n=st.integers(1, 30), fg=st.integers(1, 30), pg=st.integers(1, 30))
    def test_partition_property(self, n, fg, pg):
        try:
            s = build_schedule(labels(n), fg, pg, allow_ragged_tail=True)
        except ConfigError:
            return
        flat = [c for p in s.partitions for c in p]
        assert flat == list(range(1, n + 1))


def corpus():
    # O=0, E00=1 .. E05=6
    return [
        TokenSequence(("a", "b", "c", "d"), (0, 1, 0, 3)),
        TokenSequence(("e", "f"), (0, 5)),
        TokenSequence(("g",), (0,)),
        TokenSequence(("h", "i", "j"), (4, 2, 6)),
    ]


class TestSliceDataset:
    def test_masks_other_tasks(self):
        sched = build_schedule(labels(6), 2, 2)
        ds = slice_dataset(corpus(), sched, 2)
        assert [list(l) for l in ds.current_labels] == [[0, 0, 0, 3], [4, 0, 0]]
        # full labels untouched
        assert ds.sequences[0].full_labels == (0, 1, 0, 3)

    def test_fig1_style_date_only(self):
        ls = LabelSet.from_entities(["DATE", "PER"])  # O, DATE=1, PER=2
        sched = build_schedule(ls, 1, 1)
        seq = TokenSequence(("Amy", "went", "home", "today"), (2, 0, 0, 1))
        seq2 = TokenSequence(("x", "PER", "O", "DATE"), (0, 2, 0, 1))
        ds = slice_dataset([seq2], sched, 1)
        assert ds.current_labels[0] == (0, 0, 0, 1)
        assert slice_dataset([seq], sched, 2).current_labels[0] == (2, 0, 0, 0)

    def test_drops_empty_unless_kept(self):
        sched = build_schedule(labels(6), 2, 2)
        assert len(slice_dataset(corpus(), sched, 1)) == 2
        assert len(slice_dataset(corpus(), sched, 1, keep_empty_sequences=True)) == 4

    def test_all_classes_identity(self):
        sched = build_schedule(labels(6), 6, 1)
        ds = slice_dataset(corpus(), sched, 1)
        assert all(c == s.full_labels for c, s in zip(ds.current_labels, ds.sequences))

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            slice_dataset(corpus(), build_schedule(labels(6), 2, 2), 0)

    @given(st.lists(st.lists(st.integers(0, 6), min_size=1, max_size=8), min_size=1, max_size=10), st.integers(1, 3))
    @settings(max_examples=60)
    def test_idempotence_and_conservation(self, rows, t):
        sched = build_schedule(labels(6), 2, 2)
        seqs = [TokenSequence(tuple("x" * len(r)), tuple(r)) for r in rows]
        once = slice_dataset(seqs, sched, t)
        twice = slice_dataset(list(once.sequences), sched, t)
        assert once.current_labels == twice.current_labels
        new = set(sched.new_classes(t))
        for seq, cur in zip(once.sequences, once.current_labels):
            masked = sum(1 for f, c in zip(seq.full_labels, cur) if f != 0 and c == 0)
            current = sum(1 for c in cur if c in new)
            already_o = sum(1 for f in seq.full_labels if f == 0)
            assert masked + current + already_o == len(seq)
            assert any(c in new for c in cur)


class TestConll:
    def test_bio_stripped(self):
        rows = parse_conll("John\tB-PER\nSmith\tI-PER\nran\tO\n\nMay\tB-DATE\n")
        assert rows == [(["John", "Smith", "ran"], ["PER", "PER", "O"]), (["May"], ["DATE"])]

    def test_bio_kept(self):
        rows = parse_conll("John\tB-PER\n", strip_prefixes=False)
        assert rows[0][1] == ["B-PER"]

    def test_malformed(self):
        with pytest.raises(DataError):
            parse_conll("no-tab-here\n")

    def test_roundtrip(self, tmp_path):
        ls = labels(6)
        text = format_conll(corpus(), ls)
        p = tmp_path / "c.conll"
        p.write_text(text, encoding="utf-8")
        back, ls2 = load_conll(p, ls)
        assert back == corpus() and ls2 == ls

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="nope.conll"):
            load_conll(tmp_path / "nope.conll")

    def test_unknown_label(self, tmp_path):
        p = tmp_path / "c.conll"
        p.write_text("a\tZZZ\n", encoding="utf-8")
        with pytest.raises(DataError):
            load_conll(p, labels(2))

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            TokenSequence(("a",), (0, 1))
