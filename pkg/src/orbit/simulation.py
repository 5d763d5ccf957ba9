"""Deterministic DASH-like streaming sessions over tiled 360 video.

A session walks the manifest segment by segment: estimate a target rate
from measured throughput and buffer level, predict the viewport trajectory
for the segment about to be requested, weight tiles, allocate
representations under the budget, advance the download clock, and score
the delivered tiles against the viewer's true viewport with WS-PSNR.

Head traces are indexed by media time; the decision gap for prediction is
the buffer level at decision time. Everything is deterministic for fixed
inputs: the seed parameter exists for predictors with stochastic state and
for interface stability.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fileio import Manifest
from .geometry import TileIndex, Viewport, tiles_in_viewport, viewport_pixel_mask
from .optimizer import Allocation, InfeasibleError, solve_heuristic, tile_weights
from .prediction import (
    CUE_WINDOW_S,
    HeadTrace,
    PredictionRequest,
    predict,
    saliency_centroid_cue,
    saliency_max_cue,
)
from .quality import segment_ws_psnr

log = logging.getLogger(__name__)

POLICY_ALIASES = {"tiled": "tiled-no-pred"}
SESSION_POLICIES = ("monolithic", "tiled-no-pred", "tiled-pred")

DEFAULT_FOV = (90.0, 90.0)
DEFAULT_BUFFER_S = 4.0
DEFAULT_STARTUP_BPS = 2e6


@dataclass(frozen=True)
class ThroughputTrace:
    """Piecewise-constant network capacity; the last value extends forever."""

    times: np.ndarray
    bps: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        c = np.asarray(self.bps, dtype=np.float64)
        if t.ndim != 1 or t.shape != c.shape or t.size == 0:
            raise ValueError("times and bps must be matching 1-D arrays")
        if (np.diff(t) <= 0).any():
            raise ValueError("timestamps must be strictly increasing")
        if (c <= 0).any():
            raise ValueError("capacities must be positive")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "bps", c)

    @classmethod
    def constant(cls, bps: float) -> "ThroughputTrace":
        return cls(times=np.array([0.0]), bps=np.array([float(bps)]))

    def capacity_at(self, t: float) -> float:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.bps[max(i, 0)])

    def download_seconds(self, t0: float, bits: float) -> float:
        """Time to move `bits` starting at t0 across the capacity steps."""
        if bits <= 0:
            return 0.0
        t = t0
        remaining = bits
        elapsed = 0.0
        while True:
            cap = self.capacity_at(t)
            nxt = self.times[self.times > t + 1e-12]
            horizon = float(nxt[0]) - t if nxt.size else np.inf
            possible = cap * horizon
            if possible >= remaining:
                return elapsed + remaining / cap
            remaining -= possible
            elapsed += horizon
            t += horizon


@dataclass(frozen=True)
class BufferState:
    """Seconds of buffered media versus the playout buffer capacity."""

    level: float
    capacity: float = DEFAULT_BUFFER_S

    def __post_init__(self):
        if not 0.0 <= self.level <= self.capacity + 1e-9:
            raise ValueError("buffer level outside [0, capacity]")


@dataclass(frozen=True)
class DownloadRecord:
    bits: float
    seconds: float

    @property
    def throughput(self) -> float:
        return self.bits / self.seconds


def estimate_target_rate(
    history: list[DownloadRecord],
    buffer: BufferState,
    startup_bps: float = DEFAULT_STARTUP_BPS,
    window: int = 3,
) -> float:
    """Target bitrate: harmonic mean of recent throughputs times a buffer factor.

    The factor is 0.5 below 25% occupancy, 1.0 in [25%, 75%], 1.1 above
    (a documented stand-in for the buffer-level controller of the source
    framework). With no completed downloads the configured startup rate is
    returned as-is.
    """
    if not history:
        return startup_bps
    recent = history[-window:]
    harmonic = len(recent) / sum(1.0 / r.throughput for r in recent)
    ratio = buffer.level / buffer.capacity
    if ratio < 0.25:
        factor = 0.5
    elif ratio <= 0.75:
        factor = 1.0
    else:
        factor = 1.1
    return harmonic * factor


# ---------------------------------------------------------------------------
# Predictors for the tiled-pred policy


class OraclePredictor:
    """Ground-truth future states; the upper bound for prediction quality."""

    name = "oracle"

    def states(self, hm: HeadTrace, playhead: float, t0: float, t1: float) -> np.ndarray:
        times = np.arange(t0, t1 - 1e-9, hm.dt)
        idx = np.clip(np.searchsorted(hm.times, times + 1e-9, side="right") - 1,
                      0, len(hm) - 1)
        return hm.angles[idx]


class PolicyPredictor:
    """Runs a prediction policy from the playhead; horizons cap at the model range.

    Segment media times beyond the reachable horizon fall back to the
    farthest predicted state.
    """

    def __init__(self, policy: str, model=None, map_timeline=None, window_s: float = 0.25):
        self.policy = policy
        self.model = model
        self.map_timeline = map_timeline  # (times, maps) in media time
        self.window_s = window_s
        self.name = policy

    def _cues(self, playhead, current):
        if self.model is None:
            return None
        cues = {}
        for name in self.model.spec.cue_inputs():
            times, maps = self.map_timeline if self.map_timeline else (np.array([]), [])
            sel = [
                m for t, m in zip(times, maps)
                if playhead - CUE_WINDOW_S < t <= playhead + 1e-9
            ]
            if not sel:
                from .prediction import SemanticCue

                cues[name] = SemanticCue(source="empty", trajectory=np.zeros((0, 2)),
                                         flagged=True)
            elif name == "s" and self.model.spec.cue_mode == "centroid":
                cues[name] = saliency_centroid_cue(sel, current)
            else:
                cues[name] = saliency_max_cue(sel, current)
        return cues

    def states(self, hm: HeadTrace, playhead: float, t0: float, t1: float) -> np.ndarray:
        times = np.arange(t0, t1 - 1e-9, hm.dt)
        end = hm.index_at(playhead)
        steps = int(round(self.window_s / hm.dt))
        if end < steps:
            cur = hm.angles[end]
            return np.tile(cur, (times.size, 1))
        window = hm.slice(end - steps, end + 1)
        request = PredictionRequest(trace=window, horizon=1.0)
        cues = self._cues(playhead, window.state(len(window) - 1))
        result = predict(request, self.policy, cues=cues, model=self.model)
        offsets = times - hm.times[end]
        idx = np.clip(np.rint(offsets / hm.dt).astype(int) - 1, 0, len(result) - 1)
        return result.angles[idx]


# ---------------------------------------------------------------------------
# Session state machine


@dataclass(frozen=True)
class SegmentRecord:
    index: int
    target_bps: float
    selected: np.ndarray
    total_bits: float
    download_s: float
    rebuffer_s: float
    ws_psnr_db: float
    viewport_tiles: int
    events: tuple[str, ...] = ()


@dataclass(frozen=True)
class SessionStats:
    """Per-segment records plus aggregates (all recomputable from the records)."""

    policy: str
    records: list[SegmentRecord]
    mean_ws_psnr_db: float
    total_bits: float
    total_rebuffer_s: float
    rebuffer_ratio: float
    mean_rate_bps: float

    @classmethod
    def from_records(cls, policy: str, records: list[SegmentRecord],
                     media_duration: float) -> "SessionStats":
        total_bits = float(sum(r.total_bits for r in records))
        rebuffer = float(sum(r.rebuffer_s for r in records))
        return cls(
            policy=policy,
            records=records,
            mean_ws_psnr_db=float(np.mean([r.ws_psnr_db for r in records])),
            total_bits=total_bits,
            total_rebuffer_s=rebuffer,
            rebuffer_ratio=rebuffer / media_duration,
            mean_rate_bps=total_bits / media_duration,
        )


def _monolithic_selection(table, target_bps: float) -> tuple[np.ndarray, list[str]]:
    """One common representation for every tile, the best that fits the budget."""
    n, b = table.n_tiles, table.n_reps
    common = [j for j in range(b) if table.valid[:, j].all()]
    if not common:
        raise ValueError("no representation index is valid for every tile")
    best = None
    for j in common:  # ladder indices are rate-sorted, keep the last that fits
        if table.rates[:, j].sum() <= target_bps:
            best = j
    if best is None:
        return np.full(n, common[0], dtype=np.int64), ["fallback-minimum-ladder"]
    return np.full(n, best, dtype=np.int64), []


def run_session(
    manifest: Manifest,
    throughput: ThroughputTrace,
    hm: HeadTrace,
    policy: str,
    nu: float = 0.5,
    seed: int = 0,
    predictor=None,
    fov: tuple[float, float] = DEFAULT_FOV,
    buffer_capacity: float = DEFAULT_BUFFER_S,
    startup_bps: float = DEFAULT_STARTUP_BPS,
) -> SessionStats:
    """Simulate one streaming session and score the true viewport per segment."""
    policy = POLICY_ALIASES.get(policy, policy)
    if policy not in SESSION_POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if policy == "tiled-pred" and predictor is None:
        predictor = OraclePredictor()
    grid, plane = manifest.grid, manifest.plane
    seg_dur = manifest.segment_duration
    n_segments = manifest.n_segments
    hm_span = float(hm.times[-1] - hm.times[0])
    if hm_span + 1e-9 < manifest.duration:
        n_segments = int(hm_span / seg_dur)
        warnings.warn(
            f"head trace covers {hm_span:.2f}s of {manifest.duration:.2f}s; "
            f"session truncated to {n_segments} segment(s)"
        )
    if n_segments == 0:
        raise ValueError("head trace too short for a single segment")

    t = 0.0
    level = 0.0
    history: list[DownloadRecord] = []
    records: list[SegmentRecord] = []
    all_tiles = set(grid.tiles())
    fov_h, fov_v = fov

    for k in range(n_segments):
        events: list[str] = []
        table = manifest.distortion_table(k)
        target = estimate_target_rate(
            history, BufferState(level, buffer_capacity), startup_bps
        )
        seg_t0, seg_t1 = k * seg_dur, (k + 1) * seg_dur
        playhead = max(0.0, seg_t0 - level)

        if policy == "monolithic":
            selected, mono_events = _monolithic_selection(table, target)
            events.extend(mono_events)
            vp_tiles = all_tiles
        else:
            if policy == "tiled-no-pred":
                cur = hm.state_at(playhead)
                states = cur.angles[None, :]
            else:
                states = predictor.states(hm, playhead, seg_t0, seg_t1)
            vp_tiles: set[TileIndex] = set()
            for pan, tilt, _ in states:
                vp_tiles |= tiles_in_viewport(grid, Viewport(pan, tilt, fov_h, fov_v))
            weights = tile_weights(grid, vp_tiles)
            try:
                alloc = solve_heuristic(table, weights, nu, target)
                selected = alloc.selected
            except InfeasibleError:
                selected = table.min_rate_reps()
                events.append("fallback-minimum-ladder")
                log.warning("segment %d: budget %.0f infeasible, minimum ladder used",
                            k, target)

        total_bits = float(
            table.rates[np.arange(grid.n_tiles), selected].sum() * seg_dur
        )
        dl = throughput.download_seconds(t, total_bits)
        rebuffer = max(0.0, dl - level) if k > 0 else 0.0
        level = max(0.0, level - dl) + seg_dur
        t += dl
        if level > buffer_capacity:
            t += level - buffer_capacity
            level = buffer_capacity
        history.append(DownloadRecord(bits=total_bits, seconds=dl))

        # Score the segment against the viewer's true trajectory.
        true_idx = np.flatnonzero((hm.times >= seg_t0 - 1e-9) & (hm.times < seg_t1 - 1e-9))
        true_states = hm.angles[true_idx]
        mask = viewport_pixel_mask(
            plane, [Viewport(p, ti, fov_h, fov_v) for p, ti, _ in true_states]
        )
        orig = manifest.original_frames(k)
        reps = {int(j) for j in selected}
        recon_by_rep = {j: manifest.recon_frames(k, j) for j in reps}
        mosaic = np.empty_like(orig)
        th, tw = plane.height // grid.rows, plane.width // grid.cols
        for tile in grid.tiles():
            r0, c0 = tile.row * th, tile.col * tw
            j = int(selected[grid.flat_index(tile)])
            mosaic[:, r0 : r0 + th, c0 : c0 + tw] = recon_by_rep[j][
                :, r0 : r0 + th, c0 : c0 + tw
            ]
        score = segment_ws_psnr(orig, mosaic, mask, plane, max_value=manifest.max_value)

        records.append(
            SegmentRecord(
                index=k,
                target_bps=target,
                selected=selected.copy(),
                total_bits=total_bits,
                download_s=dl,
                rebuffer_s=rebuffer,
                ws_psnr_db=score,
                viewport_tiles=len(vp_tiles),
                events=tuple(events),
            )
        )

    return SessionStats.from_records(policy, records, n_segments * seg_dur)


# ---------------------------------------------------------------------------
# Rate sweeps


@dataclass(frozen=True)
class SweepRow:
    policy: str
    rate_mbps: float
    fold: int
    mean_ws_psnr: float
    rebuffer_ratio: float
    total_bits: float


def sweep_rates(
    manifest: Manifest,
    rates_mbps: list[float],
    hm_traces: list[HeadTrace],
    policies: list[str],
    nu: float = 0.5,
    predictor_factory=None,
    fov: tuple[float, float] = DEFAULT_FOV,
    seed: int = 0,
) -> list[SweepRow]:
    """One session per (policy, rate, fold); folds are the provided traces.

    predictor_factory(hm) builds the tiled-pred predictor (oracle when
    omitted). ORBIT_THREADS caps the worker count; the result order is
    deterministic regardless of scheduling.
    """
    if not rates_mbps:
        raise ValueError("no rates to sweep")
    if not hm_traces:
        raise ValueError("no head traces")
    if predictor_factory is None:
        predictor_factory = lambda hm: OraclePredictor()  # noqa: E731

    jobs = [
        (policy, rate, fold)
        for policy in policies
        for rate in rates_mbps
        for fold in range(len(hm_traces))
    ]

    def run(job):
        policy, rate, fold = job
        hm = hm_traces[fold]
        stats = run_session(
            manifest,
            ThroughputTrace.constant(rate * 1e6),
            hm,
            policy,
            nu=nu,
            seed=seed,
            predictor=predictor_factory(hm)
            if POLICY_ALIASES.get(policy, policy) == "tiled-pred"
            else None,
            fov=fov,
        )
        return SweepRow(
            policy=policy,
            rate_mbps=float(rate),
            fold=fold,
            mean_ws_psnr=stats.mean_ws_psnr_db,
            rebuffer_ratio=stats.rebuffer_ratio,
            total_bits=stats.total_bits,
        )

    workers = max(1, int(os.environ.get("ORBIT_THREADS", "1")))
    if workers == 1:
        rows = [run(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, jobs))
    return rows


def summarize_sweep(rows: list[SweepRow]) -> list[dict]:
    """Mean and std of WS-PSNR over folds, per (policy, rate)."""
    keys = sorted({(r.policy, r.rate_mbps) for r in rows}, key=lambda k: (k[0], k[1]))
    out = []
    for policy, rate in keys:
        vals = [r.mean_ws_psnr for r in rows if r.policy == policy and r.rate_mbps == rate]
        out.append(
            {
                "policy": policy,
                "rate_mbps": rate,
                "mean_ws_psnr": float(np.mean(vals)),
                "std_ws_psnr": float(np.std(vals)),
                "folds": len(vals),
            }
        )
    return out
