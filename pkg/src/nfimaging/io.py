"""File formats: image-series container, CSV tables and the run manifest.

Series container
----------------
One file per series.  The first line is a plain-text header::

    width height n_frames exposure_ms wait_ms n_reference format

where ``format`` is ``ascii`` or ``u16le``.  The grids follow in frame
order, reference frames last.  In ASCII mode each frame is ``height`` lines
of space-separated integers followed by a blank line; in binary mode the
header line is followed by ``n_frames * height * width`` little-endian
unsigned 16-bit values.

All writers go through :func:`atomic_write` (temporary file plus rename), so
a reader never sees a half-written file.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import AtomRecord, ExperimentConfig, Frame, GroundTruth, ImageSeries
from .sim import SpcmRecord

__all__ = [
    "CorruptFile", "atomic_write", "write_series", "read_series", "series_to_bytes",
    "write_csv", "read_csv", "truth_rows", "read_truth", "spcm_rows", "read_spcm",
    "histogram_rows", "RunManifest", "file_sha256", "fmt",
]

SERIES_FORMATS = ("ascii", "u16le")


class CorruptFile(ValueError):
    """An input file does not follow its documented layout."""


def atomic_write(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(x) -> str:
    """Shortest round-tripping text for numbers; integers stay integers."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    return "" if x is None else str(x)


# --- series container --------------------------------------------------------

def _ms(seconds: float) -> str:
    return repr(round(seconds * 1000.0, 9))


def series_to_bytes(series: ImageSeries, binary: bool = False) -> bytes:
    frames = series.frames
    if not frames:
        raise ValueError("cannot store an empty series")
    h, w = frames[0].counts.shape
    if any(f.counts.shape != (h, w) for f in frames):
        raise ValueError("all frames of a series must have the same shape")
    exposure = frames[0].exposure_s
    wait = (frames[1].t_start_s - frames[0].t_start_s - exposure) if len(frames) > 1 else 0.0
    n_ref = len(series.reference_frames)
    kind = "u16le" if binary else "ascii"
    header = f"{w} {h} {len(frames)} {_ms(exposure)} {_ms(wait)} {n_ref} {kind}\n".encode()
    stack = np.stack([f.counts for f in frames])
    if binary:
        if stack.max(initial=0) > np.iinfo(np.uint16).max:
            raise ValueError("counts exceed the 16-bit range of the binary format")
        return header + stack.astype("<u2").tobytes()
    buf = io.StringIO()
    for grid in stack:
        for row in grid:
            buf.write(" ".join(str(int(v)) for v in row))
            buf.write("\n")
        buf.write("\n")
    return header + buf.getvalue().encode()


def write_series(path: str | Path, series: ImageSeries, binary: bool = False) -> None:
    atomic_write(path, series_to_bytes(series, binary))


def read_series(path: str | Path, cfg: ExperimentConfig | None = None,
                truth: GroundTruth | None = None) -> ImageSeries:
    """Load a series written by :func:`write_series`.

    Frame start times are rebuilt from the header timing; ``cfg`` and
    ``truth`` are attached as given since the container stores neither.
    """
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CorruptFile(f"{path}: missing header line")
    tokens = raw[:nl].decode("ascii", "replace").split()
    if len(tokens) != 7 or tokens[6] not in SERIES_FORMATS:
        raise CorruptFile(f"{path}: malformed header {raw[:nl]!r}")
    try:
        w, h, n = (int(t) for t in tokens[:3])
        exposure, wait = float(tokens[3]) / 1000.0, float(tokens[4]) / 1000.0
        n_ref = int(tokens[5])
    except ValueError as exc:
        raise CorruptFile(f"{path}: malformed header ({exc})") from None
    if min(w, h, n) <= 0 or not 0 <= n_ref <= n:
        raise CorruptFile(f"{path}: inconsistent header values")
    body = raw[nl + 1:]
    if tokens[6] == "u16le":
        if len(body) != 2 * n * h * w:
            raise CorruptFile(f"{path}: expected {2 * n * h * w} data bytes, found {len(body)}")
        stack = np.frombuffer(body, dtype="<u2").reshape(n, h, w).astype(np.int64)
    else:
        try:
            values = np.array(body.split(), dtype=np.int64)
        except ValueError:
            raise CorruptFile(f"{path}: non-integer entry in ASCII grid") from None
        if values.size != n * h * w:
            raise CorruptFile(f"{path}: expected {n * h * w} values, found {values.size}")
        stack = values.reshape(n, h, w)
    period = exposure + wait
    frames = tuple(
        Frame(stack[i], exposure, i * period, "reference" if i >= n - n_ref else "signal")
        for i in range(n)
    )
    return ImageSeries(frames, cfg or ExperimentConfig(), truth)


# --- CSV ---------------------------------------------------------------------

def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([fmt(v) for v in row])
    atomic_write(path, buf.getvalue())


def read_csv(path: str | Path, required: Sequence[str] = ()) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        missing = [c for c in required if c not in (rd.fieldnames or [])]
        if missing:
            raise CorruptFile(f"{path}: missing columns {missing}")
        return list(rd)


TRUTH_HEADER = ("run", "site", "pos_um", "load_s", "loss_s")
SPCM_HEADER = ("run", "mode", "n_atoms", "counts", "pos1_um", "pos2_um", "coupling")
DETECTION_HEADER = ("series", "frame", "col", "pos_um", "peak", "raw3x3", "accepted")
PAIR_HEADER = ("series", "pos1_um", "pos2_um", "sep_um", "err1", "err2", "accepted")
HISTOGRAM_HEADER = ("left_edge", "right_edge", "count", "model_expected")
PERIODOGRAM_HEADER = ("freq_per_um", "power")


def truth_rows(run_id: int, truth: GroundTruth):
    for a in truth.atoms:
        yield (run_id, a.site_index, a.position_um, a.load_time_s, a.loss_time_s)


def read_truth(path: str | Path) -> dict[int, GroundTruth]:
    """Ground truth per run; runs without atoms are absent from the mapping."""
    per_run: dict[int, list[AtomRecord]] = {}
    try:
        for r in read_csv(path, TRUTH_HEADER):
            per_run.setdefault(int(r["run"]), []).append(AtomRecord(
                int(r["site"]), float(r["pos_um"]), float(r["load_s"]), float(r["loss_s"])))
    except (ValueError, KeyError) as exc:
        if isinstance(exc, CorruptFile):
            raise
        raise CorruptFile(f"{path}: {exc}") from None
    return {k: GroundTruth(tuple(v)) for k, v in per_run.items()}


def spcm_rows(records: Iterable[SpcmRecord]):
    for r in records:
        pos = list(r.atom_positions_um) + [None, None]
        yield (r.run_id, r.mode, r.n_atoms_true, r.detected_counts, pos[0], pos[1], r.coupling)


def read_spcm(path: str | Path) -> list[SpcmRecord]:
    out = []
    try:
        for r in read_csv(path, SPCM_HEADER):
            pos = tuple(float(r[k]) for k in ("pos1_um", "pos2_um") if r[k] != "")
            out.append(SpcmRecord(int(r["run"]), int(r["counts"]), int(r["n_atoms"]), pos,
                                  r["mode"], r.get("coupling", "")))
    except ValueError as exc:
        if isinstance(exc, CorruptFile):
            raise
        raise CorruptFile(f"{path}: {exc}") from None
    return out


def histogram_rows(hist, model_expected=None):
    model = [None] * len(hist.counts) if model_expected is None else list(model_expected)
    for lo, hi, c, m in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts, model):
        yield (float(lo), float(hi), int(c), m)


# --- manifest ----------------------------------------------------------------

def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass(frozen=True)
class RunManifest:
    """What a command was asked to do; written before any output."""

    command: str
    config_path: str
    seed: int
    out_dir: str
    tool_version: str
    parameters: dict = field(default_factory=dict)
    input_hashes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    def write(self, path: str | Path) -> None:
        atomic_write(path, self.to_json())
