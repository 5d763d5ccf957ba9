"""Loading, validation and saving of traces, maps, frames and manifests.

All formats are plain text or widely documented binary (CSV, PGM, raw
planar luma, JSON); docs/formats.md is the normative schema reference.
Loaders validate eagerly and reject non-finite fields with a diagnostic
naming the offender.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import ErpPlane, TileGrid, correction_vector
from .prediction import DT, HeadTrace, diff_angles, wrap_angle
from .quality import DistortionTable

TRACE_HEADER = ["t", "pan", "tilt", "roll"]
THROUGHPUT_HEADER = ["t", "bps"]


class DataError(Exception):
    """Malformed or inconsistent input data."""


def _parse_float(text: str, path, line: int, field: str) -> float:
    try:
        value = float(text)
    except ValueError as exc:
        raise DataError(f"{path}:{line}: field {field!r} is not a number: {text!r}") from exc
    if not np.isfinite(value):
        raise DataError(f"{path}:{line}: field {field!r} is not finite: {text!r}")
    return value


# ---------------------------------------------------------------------------
# Head traces (CSV: t,pan,tilt,roll; seconds and degrees)


def resample_trace(trace: HeadTrace, dt: float) -> HeadTrace:
    """Linear resampling onto a uniform dt grid with shortest-arc wrapping.

    The grid starts at the first timestamp and has floor(duration/dt)+1
    points, so both endpoints are preserved whenever the duration divides
    evenly.
    """
    n_new = int(np.floor(trace.duration / dt + 1e-9)) + 1
    if n_new < 2:
        raise DataError("trace too short to resample")
    new_times = trace.times[0] + dt * np.arange(n_new)
    # Unwrap pan/roll so interpolation never crosses the seam the long way.
    unwrapped = np.vstack(
        [trace.angles[0], trace.angles[0] + np.cumsum(diff_angles(trace.angles), axis=0)]
    )
    out = np.empty((n_new, 3))
    for axis in range(3):
        out[:, axis] = np.interp(new_times, trace.times, unwrapped[:, axis])
    out[:, 0] = wrap_angle(out[:, 0])
    out[:, 1] = np.clip(out[:, 1], -90.0, 90.0)
    out[:, 2] = wrap_angle(out[:, 2])
    return HeadTrace(new_times, out)


def load_head_trace(path, dt: float | None = DT) -> HeadTrace:
    """Load a head trace CSV; resample to dt when the source rate differs >1%.

    Out-of-range pan/roll values are wrapped with a warning; out-of-range
    tilt is an error.
    """
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRACE_HEADER:
            raise DataError(f"{path}:1: expected header {','.join(TRACE_HEADER)}")
        for i, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataError(f"{path}:{i}: expected 4 columns, got {len(row)}")
            rows.append(
                [_parse_float(v, path, i, name) for v, name in zip(row, TRACE_HEADER)]
            )
    if len(rows) < 2:
        raise DataError(f"{path}: trace needs at least two samples")
    data = np.array(rows)
    times, angles = data[:, 0], data[:, 1:]
    if (np.diff(times) <= 0).any():
        bad = int(np.argmax(np.diff(times) <= 0)) + 2
        raise DataError(f"{path}:{bad + 1}: non-monotone timestamp")
    for col, name in ((0, "pan"), (2, "roll")):
        wrapped = wrap_angle(angles[:, col])
        if not np.array_equal(wrapped, angles[:, col]):
            warnings.warn(f"{path}: {name} values outside [-180, 180) were wrapped")
            angles[:, col] = wrapped
    if np.abs(angles[:, 1]).max() > 90.0:
        bad = int(np.argmax(np.abs(angles[:, 1]) > 90.0)) + 2
        raise DataError(f"{path}:{bad}: tilt outside [-90, 90]")
    try:
        trace = HeadTrace(times, angles)
    except ValueError:
        trace = None  # non-uniform source rate: resample below
    if dt is None:
        if trace is None:
            raise DataError(f"{path}: non-uniform sampling and no target rate given")
        return trace
    if trace is not None and abs(trace.dt - dt) <= 0.01 * dt:
        return trace
    steps = np.diff(times)
    uniform = np.abs(steps - steps.mean()).max() <= 0.01 * steps.mean()
    if not uniform:
        raise DataError(f"{path}: sampling period varies by more than 1%")
    return resample_trace(HeadTrace(times, angles), dt)


def save_head_trace(trace: HeadTrace, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TRACE_HEADER) + "\n")
        for t, (pan, tilt, roll) in zip(trace.times, trace.angles):
            fh.write(f"{t!r},{pan!r},{tilt!r},{roll!r}\n")


# ---------------------------------------------------------------------------
# Gray maps (PGM, 8- or 16-bit; values rescale to [0, 1])


def load_graymap(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(data):
        # header tokens separated by whitespace, '#' starts a comment
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start < i:
            tokens.append(data[start:i])
    if len(tokens) < 4 or tokens[0] not in (b"P2", b"P5"):
        raise DataError(f"{path}: not a PGM file")
    magic = tokens[0]
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PGM header") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise DataError(f"{path}: invalid PGM dimensions or maxval")
    if magic == b"P5":
        i += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        count = width * height
        raw = np.frombuffer(data, dtype=dtype, count=count, offset=i)
        if raw.size != count:
            raise DataError(f"{path}: truncated PGM payload")
    else:
        values = data[i:].split()
        if len(values) != width * height:
            raise DataError(f"{path}: expected {width * height} samples")
        raw = np.array([int(v) for v in values])
    if raw.max(initial=0) > maxval:
        raise DataError(f"{path}: sample exceeds maxval")
    return raw.reshape(height, width).astype(np.float64) / maxval


def save_graymap(values: np.ndarray, path, bits: int = 8):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("graymap must be 2-D")
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValueError("graymap values must lie in [0, 1]")
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    maxval = (1 << bits) - 1
    quantized = np.rint(values * maxval)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        if bits == 8:
            fh.write(quantized.astype("u1").tobytes())
        else:
            fh.write(quantized.astype(">u2").tobytes())


def load_map_sequence(directory) -> tuple[np.ndarray, list[np.ndarray]]:
    """Load a timestamped map sequence: index.csv (t,path) plus PGM files."""
    directory = Path(directory)
    index = directory / "index.csv"
    times, maps = [], []
    with open(index, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "path"]:
            raise DataError(f"{index}:1: expected header t,path")
        for i, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DataError(f"{index}:{i}: expected 2 columns")
            times.append(_parse_float(row[0], index, i, "t"))
            maps.append(load_graymap(directory / row[1]))
    if not times:
        raise DataError(f"{index}: empty map sequence")
    t = np.array(times)
    if (np.diff(t) <= 0).any():
        raise DataError(f"{index}: timestamps must be strictly increasing")
    return t, maps


def save_map_sequence(times: np.ndarray, maps, directory, bits: int = 8):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "index.csv", "w", newline="") as fh:
        fh.write("t,path\n")
        for i, (t, m) in enumerate(zip(times, maps)):
            name = f"{i:06d}.pgm"
            save_graymap(m, directory / name, bits=bits)
            fh.write(f"{t!r},{name}\n")


# ---------------------------------------------------------------------------
# Raw planar luma frames (8-bit, row-major, Y plane first)


def load_frames(path, width: int, height: int, layout: str = "y") -> np.ndarray:
    """Load raw planar frames -> (n_frames, height, width) uint8 luma.

    layout "y" is bare luma; "yuv420" skips the chroma planes.
    """
    path = Path(path)
    data = np.fromfile(path, dtype=np.uint8)
    if layout == "y":
        stride = width * height
        offset = 0
    elif layout == "yuv420":
        stride = width * height * 3 // 2
        offset = 0
    else:
        raise ValueError(f"unknown frame layout {layout!r}")
    if data.size == 0 or data.size % stride:
        raise DataError(f"{path}: size {data.size} is not a whole number of frames")
    n = data.size // stride
    frames = np.empty((n, height, width), dtype=np.uint8)
    for i in range(n):
        plane = data[i * stride + offset : i * stride + offset + width * height]
        frames[i] = plane.reshape(height, width)
    return frames


def save_frames(frames: np.ndarray, path):
    frames = np.asarray(frames)
    if frames.dtype != np.uint8 or frames.ndim != 3:
        raise ValueError("frames must be (n, h, w) uint8")
    with open(path, "wb") as fh:
        fh.write(frames.tobytes())


# ---------------------------------------------------------------------------
# Manifests (JSON)


@dataclass(frozen=True)
class SegmentEntry:
    """One time segment: ladder measurements plus frame/map file references."""

    index: int
    original: str
    recon: list[str]  # one raw-frame file per representation
    rates: np.ndarray  # (n_tiles, n_reps) bits/second
    distortions: np.ndarray  # (n_tiles, n_reps) luma MSE
    saliency: list[str]


@dataclass(frozen=True)
class Manifest:
    """A tiled 360 video: geometry, encoding ladder, and per-segment files."""

    video_id: str
    plane: ErpPlane
    grid: TileGrid
    segment_duration: float
    max_value: int
    frames_per_segment: int
    qps: list[int]
    segments: list[SegmentEntry]
    base_dir: Path

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def duration(self) -> float:
        return self.n_segments * self.segment_duration

    def distortion_table(self, seg_index: int) -> DistortionTable:
        seg = self.segments[seg_index]
        return DistortionTable.from_ladders(
            seg.distortions, seg.rates, correction_vector(self.grid)
        )

    def original_frames(self, seg_index: int) -> np.ndarray:
        seg = self.segments[seg_index]
        return load_frames(self.base_dir / seg.original, self.plane.width, self.plane.height)

    def recon_frames(self, seg_index: int, rep: int) -> np.ndarray:
        seg = self.segments[seg_index]
        return load_frames(self.base_dir / seg.recon[rep], self.plane.width, self.plane.height)

    def saliency_maps(self, seg_index: int) -> list[np.ndarray]:
        seg = self.segments[seg_index]
        return [load_graymap(self.base_dir / p) for p in seg.saliency]


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    try:
        if doc.get("format") != "orbit-manifest":
            raise DataError(f"{path}: not an orbit manifest")
        plane = ErpPlane(int(doc["erp"]["width"]), int(doc["erp"]["height"]))
        grid = TileGrid(int(doc["grid"]["rows"]), int(doc["grid"]["cols"]), plane)
        qps = [int(q) for q in doc["qps"]]
        n_tiles = grid.n_tiles
        segments = []
        for seg in doc["segments"]:
            rates = np.asarray(seg["rates"], dtype=np.float64)
            dist = np.asarray(seg["distortions"], dtype=np.float64)
            if rates.shape != (n_tiles, len(qps)) or dist.shape != rates.shape:
                raise DataError(
                    f"{path}: segment {seg['index']}: ladder shape must be "
                    f"({n_tiles}, {len(qps)})"
                )
            if not np.isfinite(rates).all():
                raise DataError(f"{path}: segment {seg['index']}: field 'rates' not finite")
            if not np.isfinite(dist).all():
                raise DataError(
                    f"{path}: segment {seg['index']}: field 'distortions' not finite"
                )
            recon = [str(p) for p in seg["recon"]]
            if len(recon) != len(qps):
                raise DataError(
                    f"{path}: segment {seg['index']}: need one recon file per qp"
                )
            segments.append(
                SegmentEntry(
                    index=int(seg["index"]),
                    original=str(seg["original"]),
                    recon=recon,
                    rates=rates,
                    distortions=dist,
                    saliency=[str(p) for p in seg.get("saliency", [])],
                )
            )
        manifest = Manifest(
            video_id=str(doc["video_id"]),
            plane=plane,
            grid=grid,
            segment_duration=float(doc["segment_duration"]),
            max_value=int(doc.get("max_value", 255)),
            frames_per_segment=int(doc["frames_per_segment"]),
            qps=qps,
            segments=segments,
            base_dir=path.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed manifest: {exc}") from exc
    if manifest.segment_duration <= 0:
        raise DataError(f"{path}: segment_duration must be positive")
    for seg in manifest.segments:
        try:
            manifest.distortion_table(seg.index)  # monotone-ladder validation
        except ValueError as exc:
            raise DataError(f"{path}: segment {seg.index}: {exc}") from exc
    return manifest


def save_manifest(manifest: Manifest, path):
    doc = {
        "format": "orbit-manifest",
        "version": 1,
        "video_id": manifest.video_id,
        "erp": {"width": manifest.plane.width, "height": manifest.plane.height},
        "grid": {"rows": manifest.grid.rows, "cols": manifest.grid.cols},
        "segment_duration": manifest.segment_duration,
        "max_value": manifest.max_value,
        "frames_per_segment": manifest.frames_per_segment,
        "qps": manifest.qps,
        "segments": [
            {
                "index": seg.index,
                "original": seg.original,
                "recon": seg.recon,
                "rates": seg.rates.tolist(),
                "distortions": seg.distortions.tolist(),
                "saliency": seg.saliency,
            }
            for seg in manifest.segments
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Throughput traces (CSV: t,bps)


def load_throughput_csv(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    times, bps = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != THROUGHPUT_HEADER:
            raise DataError(f"{path}:1: expected header t,bps")
        for i, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DataError(f"{path}:{i}: expected 2 columns")
            times.append(_parse_float(row[0], path, i, "t"))
            bps.append(_parse_float(row[1], path, i, "bps"))
    if not times:
        raise DataError(f"{path}: empty throughput trace")
    t = np.array(times)
    c = np.array(bps)
    if (np.diff(t) <= 0).any():
        raise DataError(f"{path}: timestamps must be strictly increasing")
    if (c <= 0).any():
        raise DataError(f"{path}: capacities must be positive")
    return t, c


def save_throughput_csv(times: np.ndarray, bps: np.ndarray, path):
    with open(path, "w", newline="") as fh:
        fh.write("t,bps\n")
        for t, c in zip(times, bps):
            fh.write(f"{t!r},{c!r}\n")
