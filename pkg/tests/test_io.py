import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nfimaging import io as nio
from nfimaging import sim
from nfimaging.core import AtomRecord, Frame, GroundTruth, ImageSeries, RandomStream
from nfimaging.stats import build_histogram


@pytest.fixture(scope="module")
def series(cfg):
    return sim.render_series(cfg, RandomStream(11))


@pytest.mark.parametrize("binary", [False, True])
def test_series_round_trip(tmp_path, cfg, series, binary):
    p = tmp_path / "s.nfs"
    nio.write_series(p, series, binary)
    back = nio.read_series(p, cfg)
    assert len(back.frames) == len(series.frames)
    for a, b in zip(series.frames, back.frames):
        assert np.array_equal(a.counts, b.counts)
        assert b.exposure_s == pytest.approx(a.exposure_s)
        assert b.t_start_s == pytest.approx(a.t_start_s)
        assert b.kind == a.kind
    assert p.read_bytes().split(b"\n", 1)[0].endswith(b"u16le" if binary else b"ascii")


def test_ascii_layout(tmp_path, cfg, series):
    text = nio.series_to_bytes(series).decode()
    lines = text.split("\n")
    w, h, n = (int(t) for t in lines[0].split()[:3])
    assert (h, w) == series.frames[0].counts.shape and n == len(series.frames)
    assert lines[1 + h] == ""
    assert [int(v) for v in lines[1].split()] == series.frames[0].counts[0].tolist()


def _corrupt(tmp_path, data):
    p = tmp_path / "bad.nfs"
    p.write_bytes(data)
    with pytest.raises(nio.CorruptFile):
        nio.read_series(p)


def test_corrupt_series_files(tmp_path):
    _corrupt(tmp_path, b"no newline")
    _corrupt(tmp_path, b"2 2 1 150 0 0 jpeg\n1 2\n3 4\n")
    _corrupt(tmp_path, b"2 2 x 150 0 0 ascii\n1 2\n3 4\n")
    _corrupt(tmp_path, b"2 2 1 150 0 2 ascii\n1 2\n3 4\n")
    _corrupt(tmp_path, b"2 2 1 150 0 0 ascii\n1 2\n3\n")
    _corrupt(tmp_path, b"2 2 1 150 0 0 ascii\n1 2\n3 a\n")
    _corrupt(tmp_path, b"2 2 1 150 0 0 u16le\n" + b"\x00" * 7)


def test_small_container_and_binary_range(tmp_path):
    p = tmp_path / "ok.nfs"
    p.write_bytes(b"2 2 2 150 45 1 ascii\n1 2\n3 4\n\n5 6\n7 8\n")
    s = nio.read_series(p)
    assert s.frames[1].counts.tolist() == [[5, 6], [7, 8]]
    assert s.frames[1].t_start_s == pytest.approx(0.195)
    assert len(s.reference_frames) == 1
    big = Frame(np.array([[70_000]]), 0.15, 0.0)
    with pytest.raises(ValueError):
        nio.series_to_bytes(ImageSeries((big,)), binary=True)


@given(st.one_of(st.integers(-10**12, 10**12), st.floats(allow_nan=False, allow_infinity=False)))
def test_fmt_round_trips(x):
    text = nio.fmt(x)
    assert (int(text) if isinstance(x, int) else float(text)) == x


def test_fmt_special_values():
    assert nio.fmt(None) == ""
    assert nio.fmt(True) == "1"
    assert nio.fmt(np.int64(3)) == "3"
    assert nio.fmt(math.inf) == "inf" and nio.fmt(-math.inf) == "-inf" and nio.fmt(math.nan) == "nan"


def test_csv_round_trip_and_required_columns(tmp_path):
    p = tmp_path / "t.csv"
    nio.write_csv(p, ("a", "b"), [(1, 0.5), (2, None)])
    assert p.read_text() == "a,b\n1,0.5\n2,\n"
    assert nio.read_csv(p, ("a",)) == [{"a": "1", "b": "0.5"}, {"a": "2", "b": ""}]
    with pytest.raises(nio.CorruptFile):
        nio.read_csv(p, ("c",))


def test_truth_round_trip(tmp_path):
    t = GroundTruth((AtomRecord(400, 199.2, 0.0, 0.731), AtomRecord(410, 204.18, 0.0, math.inf)))
    p = tmp_path / "truth.csv"
    nio.write_csv(p, nio.TRUTH_HEADER, list(nio.truth_rows(3, t)) + list(nio.truth_rows(4, GroundTruth(()))))
    back = nio.read_truth(p)
    assert set(back) == {3}
    assert back[3] == t


def test_truth_rejects_bad_rows(tmp_path):
    p = tmp_path / "truth.csv"
    p.write_text("run,site,pos_um,load_s,loss_s\n1,x,2,0,1\n")
    with pytest.raises(nio.CorruptFile):
        nio.read_truth(p)


def test_spcm_round_trip(tmp_path):
    recs = [sim.SpcmRecord(0, 310, 0, (), "scatter_into_fiber"),
            sim.SpcmRecord(1, 420, 2, (200.0, 231.5), "scatter_into_fiber", "mixed"),
            sim.SpcmRecord(2, 4300, 1, (), "transmission")]
    p = tmp_path / "spcm.csv"
    nio.write_csv(p, nio.SPCM_HEADER, nio.spcm_rows(recs))
    assert nio.read_spcm(p) == recs


def test_histogram_rows():
    h = build_histogram([1, 2, 7], bin_width=5, start=0)
    rows = list(nio.histogram_rows(h, [2.5, 0.5]))
    assert rows == [(0.0, 5.0, 2, 2.5), (5.0, 10.0, 1, 0.5)]
    assert list(nio.histogram_rows(h))[0][3] is None


def test_manifest_round_trip_and_hash(tmp_path):
    m = nio.RunManifest("simulate", "c.cfg", 7, "out", "1.0", {"runs": 4}, {"config": "ab"})
    m.write(tmp_path / "m.json")
    assert nio.RunManifest.from_json((tmp_path / "m.json").read_text()) == m
    p = tmp_path / "x.bin"
    p.write_bytes(b"abc")
    assert nio.file_sha256(p) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_atomic_write_leaves_no_temporaries(tmp_path):
    nio.atomic_write(tmp_path / "sub" / "f.txt", "hello")
    assert (tmp_path / "sub" / "f.txt").read_text() == "hello"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]
