import datetime as dt
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from biphasic_cycle.dataio import (RAW_HEADER, REASONS, NotApplicable, ParseError,
                                   PreprocessReport, RawCycle, RawRecord, SchemaError,
                                   build_cycles, dump_json, load_csv, load_json, median,
                                   nearest_rank_bounds, preprocess, select_cycles,
                                   standardize_bbt, write_series_csv)

HEADER = ",".join(RAW_HEADER)
D0 = dt.date(2023, 1, 1)


def write(tmp_path, rows, header=HEADER, name="in.csv"):
    p = tmp_path / name
    p.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
    return p


def diary(subject, start, bbt, menses, age="25-29"):
    """CSV rows for consecutive days; ``None`` bbt is written as an empty cell."""
    rows = []
    for i, (b, m) in enumerate(zip(bbt, menses)):
        day = (start + dt.timedelta(days=i)).isoformat()
        rows.append(f"{subject},{day},{'' if b is None else b},{m},{age}")
    return rows


def cycle(length, age="25-29", cid=None):
    z = np.zeros(length + 1, dtype=np.int8)
    z[0] = z[-1] = 1
    return RawCycle("s", age, D0, np.full(length + 1, 36.5), z, True, cycle_id=cid or f"c{length}")


class TestLoadCsv:
    def test_rows(self, tmp_path):
        recs = load_csv(write(tmp_path, ["S1,2023-01-04,36.52,1,25-29", "S1,2023-01-05,,0,"]))
        assert recs[0] == RawRecord("S1", dt.date(2023, 1, 4), 36.52, 1, "25-29", row=2)
        assert recs[1].bbt is None and recs[1].age_group is None and recs[1].menses == 0

    def test_duplicate_names_both_rows(self, tmp_path):
        p = write(tmp_path, ["S1,2023-01-04,36.5,1,", "S1,2023-01-05,36.6,0,", "S1,2023-01-04,36.7,0,"])
        with pytest.raises(ParseError) as err:
            load_csv(p)
        (row, msg), = err.value.errors
        assert row == 4 and "row 2" in msg

    def test_malformed_rows_collected(self, tmp_path):
        p = write(tmp_path, ["S1,2023-01-04,abc,1,", "S1,2023-13-01,36.5,0,", "S1,2023-01-06,36.5,2,",
                              "S1,2023-01-07,36.5,0,25-29,extra", "S1,2023-01-08,36.5,0,17-18"])
        with pytest.raises(ParseError) as err:
            load_csv(p)
        assert [r for r, _ in err.value.errors] == [2, 3, 4, 5, 6]

    def test_schema(self, tmp_path):
        with pytest.raises(SchemaError):
            load_csv(write(tmp_path, ["S1,2023-01-04,36.5,1"], header="subject,date,bbt,menses"))
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        with pytest.raises(SchemaError):
            load_csv(empty)


class TestStandardize:
    def test_odd_median(self):
        bbt = [36.4, None, 36.5, 36.6, None, None, None, None, None, 36.9]
        c = build_cycles([RawRecord("s", D0 + dt.timedelta(days=i), b, int(i == 0))
                          for i, b in enumerate(bbt)])[0]
        y, offset = standardize_bbt(c)
        assert offset == pytest.approx(36.5)
        assert y[9] == pytest.approx(0.4)
        assert np.isnan(y[1])

    def test_even_median(self):
        assert median([36.6, 36.4]) == pytest.approx(36.5)
        assert median([1, 2, 3, 10]) == 2.5
        assert median([3, 1, 2]) == 2

    def test_only_first_seven_days_count(self):
        bbt = [None] * 7 + [36.6, 36.7]
        c = build_cycles([RawRecord("s", D0 + dt.timedelta(days=i), b, int(i == 0))
                          for i, b in enumerate(bbt)])[0]
        with pytest.raises(NotApplicable):
            standardize_bbt(c)


class TestTrim:
    def test_one_to_hundred(self):
        assert nearest_rank_bounds(range(1, 101)) == (6, 95)
        kept, rep = select_cycles([cycle(L) for L in range(1, 101)])
        assert sorted(c.length for c in kept) == list(range(6, 96))
        assert rep.counts()["trim_short"] == 5 and rep.counts()["trim_long"] == 5

    def test_identical_lengths(self):
        kept, rep = select_cycles([cycle(28, cid=f"c{i}") for i in range(100)])
        assert len(kept) == 100 and not rep.dropped

    def test_empty_group(self):
        kept, rep = select_cycles([])
        assert kept == [] and rep.counts()["kept"] == 0 and not rep.dropped

    def test_per_group(self):
        cycles = [cycle(L, "20-24", f"a{L}") for L in range(1, 101)] + \
                 [cycle(L, "40-44", f"b{L}") for L in range(51, 71)]
        _, rep = select_cycles(cycles)
        assert rep.bounds == {"20-24": [6, 95], "40-44": [52, 69]}

    @given(st.lists(st.integers(1, 120), min_size=1, max_size=300))
    def test_properties(self, lengths):
        lo, hi = nearest_rank_bounds(lengths)
        v = np.sort(lengths)
        n = v.size
        r = int(np.ceil(0.95 * n - 1e-9))
        assert lo <= hi
        # at most n - r values strictly on either side
        assert np.sum(v < lo) <= n - r and np.sum(v > hi) <= n - r
        # symmetric: reversing the ordering swaps the bounds
        lo_neg, hi_neg = nearest_rank_bounds([-x for x in lengths])
        assert (lo_neg, hi_neg) == (-hi, -lo)


class TestPreprocess:
    def fixture_rows(self):
        rows = []
        # two closed cycles and a trailing open one
        rows += diary("A", D0, [36.4, 36.5, 36.6] + [36.5] * 25 + [36.9], [1] + [0] * 27 + [1])
        rows += diary("A", D0 + dt.timedelta(days=29), [36.5] * 30 + [36.4], [0] * 29 + [1, 0])[:-1]
        rows += diary("A", D0 + dt.timedelta(days=59), [36.6] * 5, [0] * 5)
        # no BBT in the first seven days
        rows += diary("B", D0, [None] * 7 + [36.6] * 22 + [36.5], [1] + [0] * 28 + [1])
        # a six-day gap
        b = diary("C", D0, [36.5] * 31, [1] + [0] * 29 + [1])
        rows += b[:10] + b[16:]
        # a five-day gap is filled with missing days
        d = diary("D", D0, [36.5] * 31, [1] + [0] * 29 + [1])
        rows += d[:10] + d[15:]
        return rows

    def test_reasons(self, tmp_path):
        recs = load_csv(write(tmp_path, self.fixture_rows()))
        series, rep = preprocess(recs)
        # each diary's last onset opens a cycle that never closes
        assert rep.dropped == {"A/2023-02-28": "open_cycle", "B/2023-01-01": "no_early_bbt",
                               "B/2023-01-30": "open_cycle", "C/2023-01-01": "long_gap",
                               "C/2023-01-31": "open_cycle", "D/2023-01-31": "open_cycle"}
        assert sorted(rep.kept) == ["A/2023-01-01", "A/2023-01-29", "D/2023-01-01"]
        counts = rep.counts()
        assert set(REASONS) <= set(counts)
        assert sum(counts[r] for r in REASONS) + counts["kept"] == len(build_cycles(recs))
        first = next(s for s in series if s.subject_id == "A/2023-01-01")
        assert rep.offsets["A/2023-01-01"] == pytest.approx(36.5)
        assert first.y[-1] == pytest.approx(0.4)
        gap = next(s for s in series if s.subject_id == "D/2023-01-01")
        assert np.isnan(gap.y[10:15]).all() and gap.n_days == 31

    def test_include_open(self, tmp_path):
        recs = load_csv(write(tmp_path, self.fixture_rows()))
        series, _ = preprocess(recs, include_open=True)
        assert "A/2023-02-28" in [s.subject_id for s in series]

    def test_idempotent(self, tmp_path):
        recs = load_csv(write(tmp_path, self.fixture_rows()))
        s1, r1 = preprocess(recs)
        write_series_csv(s1, tmp_path / "p1.csv")
        s2, r2 = preprocess(load_csv(tmp_path / "p1.csv"))
        write_series_csv(s2, tmp_path / "p2.csv")
        assert (tmp_path / "p1.csv").read_bytes() == (tmp_path / "p2.csv").read_bytes()
        assert [s.subject_id for s in s1] == [s.subject_id for s in s2]
        for a, b in zip(s1, s2):
            assert np.allclose(a.y, b.y, equal_nan=True) and np.array_equal(a.z, b.z)
        assert r2.kept == r1.kept

    def test_report_round_trip(self, tmp_path):
        recs = load_csv(write(tmp_path, self.fixture_rows()))
        _, rep = preprocess(recs)
        dump_json(rep.to_dict(), tmp_path / "r.json")
        assert PreprocessReport.from_dict(load_json(tmp_path / "r.json")) == rep


def test_dump_json_is_sorted_and_atomic(tmp_path):
    dump_json({"b": np.float64(1.5), "a": np.arange(2)}, tmp_path / "x.json")
    text = (tmp_path / "x.json").read_text()
    assert json.loads(text) == {"a": [0, 1], "b": 1.5}
    assert text.index('"a"') < text.index('"b"')
    assert not (tmp_path / "x.json.tmp").exists()
