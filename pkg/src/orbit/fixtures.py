"""Seeded fixture generators for desk-scale experiments.

Every generator is a pure function of its seed and parameters; the same
seed yields byte-identical files. Sample grids are half-open: a trace of
duration D at step dt has round(D/dt) samples at t = 0, dt, ...
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .fileio import (
    Manifest,
    SegmentEntry,
    save_frames,
    save_graymap,
    save_head_trace,
    save_manifest,
    save_map_sequence,
    save_throughput_csv,
)
from .geometry import ErpPlane, TileGrid
from .prediction import DT, HeadTrace, wrap_angle
from .quality import tile_mse

FIXTURE_KINDS = (
    "trace-sinusoid",
    "trace-constant",
    "trace-saccade",
    "saliency-blob",
    "frames-moving-block",
    "prediction-corpus",
    "stream",
)


def _time_grid(duration: float, dt: float) -> np.ndarray:
    n = int(round(duration / dt))
    return dt * np.arange(n)


def gen_head_trace(kind: str, seed: int, duration: float = 70.0, dt: float = DT,
                   **params) -> HeadTrace:
    """Synthetic head trace: 'sinusoid', 'constant' velocity, or 'saccade'."""
    rng = np.random.default_rng(seed)
    t = _time_grid(duration, dt)
    angles = np.zeros((t.size, 3))
    if kind == "sinusoid":
        amp = params.get("amplitude", 40.0)
        period = params.get("period", 4.0)
        amp_tilt = params.get("amplitude_tilt", 15.0)
        period_tilt = params.get("period_tilt", 5.0)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        angles[:, 0] = amp * np.sin(2 * np.pi * t / period + phase[0])
        angles[:, 1] = amp_tilt * np.sin(2 * np.pi * t / period_tilt + phase[1])
        angles[:, 2] = 5.0 * np.sin(2 * np.pi * t / 7.0 + phase[2])
    elif kind == "constant":
        velocity = params.get("velocity", 18.0)
        tilt = params.get("tilt", 10.0)
        angles[:, 0] = wrap_angle(velocity * t)
        angles[:, 1] = tilt
    elif kind == "saccade":
        pan_v = 0.0
        tilt_v = 0.0
        next_switch = 0.0
        pan = rng.uniform(-90, 90)
        tilt = rng.uniform(-20, 20)
        for i, ti in enumerate(t):
            if ti >= next_switch:
                pan_v = rng.choice([-1, 1]) * rng.uniform(15, 80)
                tilt_v = rng.choice([-1, 1]) * rng.uniform(3, 20)
                next_switch = ti + rng.uniform(0.4, 1.5)
            pan += pan_v * dt
            tilt = np.clip(tilt + tilt_v * dt, -60, 60)
            angles[i, 0] = wrap_angle(pan)
            angles[i, 1] = tilt
            angles[i, 2] = 4.0 * np.sin(2 * np.pi * ti / 6.0)
    else:
        raise ValueError(f"unknown trace kind {kind!r}")
    return HeadTrace(t, angles)


def gen_blob_map(pan: float, tilt: float, width: int = 64, height: int = 32,
                 sigma_px: float = 2.5) -> np.ndarray:
    """A normalized Gaussian blob at the given angles on a small ERP map."""
    x0 = (pan + 180.0) / 360.0 * width - 0.5
    y0 = (90.0 - tilt) / 180.0 * height - 0.5
    xs = np.arange(width, dtype=np.float64)
    dx = np.abs(xs - x0)
    dx = np.minimum(dx, width - dx)  # pan wraps on the ERP
    dy = np.arange(height, dtype=np.float64) - y0
    sq = dy[:, None] ** 2 + dx[None, :] ** 2
    blob = np.exp(-sq / (2.0 * sigma_px**2))
    return blob / blob.max()


def _smooth_trajectory(rng: np.random.Generator, t: np.ndarray,
                       pan_amp: tuple[float, float] = (25.0, 55.0),
                       tilt_amp: tuple[float, float] = (8.0, 20.0)) -> np.ndarray:
    """Two-sinusoid mixture per axis; periods and phases drawn per family."""
    out = np.zeros((t.size, 2))
    for axis, (lo, hi) in enumerate((pan_amp, tilt_amp)):
        a1 = rng.uniform(lo, hi)
        a2 = rng.uniform(0.3 * lo, 0.5 * hi)
        p1 = rng.uniform(3.0, 7.0)
        p2 = rng.uniform(1.6, 2.8)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        out[:, axis] = a1 * np.sin(2 * np.pi * t / p1 + ph[0]) + a2 * np.sin(
            2 * np.pi * t / p2 + ph[1]
        )
    return out


def gen_prediction_corpus(
    out_dir,
    seed: int,
    families: int = 6,
    duration: float = 60.0,
    dt: float = DT,
    map_rate: float = 20.0,
    map_size: tuple[int, int] = (64, 32),
    lead_s: float = 0.4,
) -> dict:
    """Traces plus saliency maps where salient content leads the viewer's gaze.

    Per family, a smooth blob trajectory is drawn; the head follows it with
    a lag of lead_s plus jitter, so the maps genuinely carry information
    about future head motion (the premise of semantic prediction).
    Layout: traces/famNN.csv, maps/famNN/{index.csv,*.pgm}, meta.json.
    """
    out_dir = Path(out_dir)
    (out_dir / "traces").mkdir(parents=True, exist_ok=True)
    width, height = map_size
    t = _time_grid(duration, dt)
    for fam in range(families):
        rng = np.random.default_rng(seed * 7919 + fam)
        # Blob trajectory on an extended grid so head(t) = blob(t - lead) exists.
        t_ext = np.concatenate([t, t[-1] + dt * np.arange(1, int(lead_s / dt) + 2)])
        blob = _smooth_trajectory(rng, t_ext)
        jitter = gaussian_filter1d(rng.normal(0.0, 1.2, size=(t.size, 2)), 40.0, axis=0)
        head = blob[: t.size] + jitter  # head trails: blob(t) leads head by lead_s
        angles = np.zeros((t.size, 3))
        angles[:, 0] = wrap_angle(head[:, 0])
        angles[:, 1] = np.clip(head[:, 1], -85.0, 85.0)
        angles[:, 2] = 6.0 * np.sin(2 * np.pi * t / 9.0 + rng.uniform(0, 2 * np.pi))
        save_head_trace(HeadTrace(t, angles), out_dir / "traces" / f"fam{fam:02d}.csv")

        map_t = _time_grid(duration, 1.0 / map_rate)
        lead_idx = np.minimum(
            np.rint((map_t + lead_s) / dt).astype(int), t_ext.size - 1
        )
        maps = [
            gen_blob_map(wrap_angle(blob[i, 0]), float(np.clip(blob[i, 1], -85, 85)),
                         width, height)
            for i in lead_idx
        ]
        save_map_sequence(map_t, maps, out_dir / "maps" / f"fam{fam:02d}")
    meta = {
        "kind": "prediction-corpus",
        "seed": seed,
        "families": families,
        "duration": duration,
        "dt": dt,
        "map_rate": map_rate,
        "map_size": [width, height],
        "lead_s": lead_s,
    }
    with open(out_dir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return meta


def gen_moving_block_frames(
    seed: int,
    n_frames: int = 8,
    width: int = 128,
    height: int = 64,
    block: int = 12,
    step: int = 3,
) -> np.ndarray:
    """A bright block marching across a static textured background (uint8)."""
    rng = np.random.default_rng(seed)
    background = gaussian_filter(rng.uniform(0, 255, size=(height, width)), 3.0)
    background = (background - background.min()) / np.ptp(background) * 140 + 40
    frames = np.empty((n_frames, height, width), dtype=np.uint8)
    y0 = height // 2 - block // 2
    for i in range(n_frames):
        frame = background.copy()
        x0 = (width // 4 + i * step) % (width - block)
        frame[y0 : y0 + block, x0 : x0 + block] = 235.0
        frames[i] = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
    return frames


def _stream_original_frames(
    rng: np.random.Generator, plane: ErpPlane, n_frames: int, block_angles: np.ndarray
) -> np.ndarray:
    base = gaussian_filter(rng.uniform(0, 255, size=(plane.height, plane.width)), 4.0)
    base = (base - base.min()) / np.ptp(base) * 150 + 30
    frames = np.empty((n_frames, plane.height, plane.width), dtype=np.uint8)
    blk = max(6, plane.height // 12)
    for i in range(n_frames):
        frame = base.copy()
        pan, tilt = block_angles[i]
        x0 = int((pan + 180.0) / 360.0 * plane.width) % plane.width
        y0 = int(np.clip((90.0 - tilt) / 180.0 * plane.height - blk / 2, 0,
                         plane.height - blk))
        for dx in range(blk):
            frame[y0 : y0 + blk, (x0 + dx) % plane.width] = 230.0
        frames[i] = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
    return frames


def gen_stream_fixture(
    out_dir,
    seed: int,
    segments: int = 10,
    frames_per_segment: int = 2,
    plane: ErpPlane | None = None,
    grid: TileGrid | None = None,
    folds: int = 2,
    base_sigma: float = 16.0,
    rate_growth: float = 1.8,
    min_total_mbps: float = 1.6,
) -> Path:
    """A complete streaming corpus: manifest + frames + hm traces + throughput.

    Reconstructions at representation b carry seeded noise of variance
    sigma^2 / 2^b (distortion roughly halves per ladder step); rates grow
    geometrically with per-tile content jitter. Ladder distortions are
    measured with tile_mse from the actual frames, so quality ordering in
    the simulator holds by construction.
    """
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    plane = plane or ErpPlane(192, 96)
    grid = grid or TileGrid(4, 8, plane)
    rng = np.random.default_rng(seed)
    qps = [22, 27, 32, 37, 42]
    n_reps = len(qps)
    n_tiles = grid.n_tiles
    duration = float(segments)
    th, tw = plane.height // grid.rows, plane.width // grid.cols

    # Scene content: a block wandering smoothly over the sphere.
    frame_times = _time_grid(duration, duration / (segments * frames_per_segment))
    content = _smooth_trajectory(rng, frame_times, (60.0, 120.0), (15.0, 30.0))

    # Per-tile base rates: lowest rep totals min_total_mbps across the grid.
    tile_jitter = rng.uniform(0.8, 1.2, size=n_tiles)
    base_rate = min_total_mbps * 1e6 / tile_jitter.sum() * tile_jitter

    entries = []
    for k in range(segments):
        f0 = k * frames_per_segment
        orig = _stream_original_frames(
            np.random.default_rng(seed * 65537 + k),
            plane,
            frames_per_segment,
            content[f0 : f0 + frames_per_segment],
        )
        orig_name = f"frames/seg{k:03d}_orig.y"
        save_frames(orig, out_dir / orig_name)
        recon_names = []
        distortions = np.zeros((n_tiles, n_reps))
        rates = np.zeros((n_tiles, n_reps))
        for b in range(n_reps):
            noise_rng = np.random.default_rng(seed * 104729 + k * 64 + b)
            sigma = base_sigma / np.sqrt(2.0) ** b
            noisy = orig.astype(np.float64) + noise_rng.normal(0, sigma, orig.shape)
            recon = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
            name = f"frames/seg{k:03d}_rep{b}.y"
            save_frames(recon, out_dir / name)
            recon_names.append(name)
            for tile in grid.tiles():
                r0, c0 = tile.row * th, tile.col * tw
                n = grid.flat_index(tile)
                distortions[n, b] = tile_mse(
                    orig[:, r0 : r0 + th, c0 : c0 + tw],
                    recon[:, r0 : r0 + th, c0 : c0 + tw],
                )
                rates[n, b] = base_rate[n] * rate_growth**b
        maps_dir = out_dir / "maps" / f"seg{k:03d}"
        map_names = []
        maps_dir.mkdir(parents=True, exist_ok=True)
        for i in range(frames_per_segment):
            pan, tilt = content[f0 + i]
            blob = gen_blob_map(float(wrap_angle(pan)), float(np.clip(tilt, -85, 85)))
            name = f"maps/seg{k:03d}/{i:03d}.pgm"
            save_graymap(blob, out_dir / name)
            map_names.append(name)
        entries.append(
            SegmentEntry(
                index=k,
                original=orig_name,
                recon=recon_names,
                rates=rates,
                distortions=distortions,
                saliency=map_names,
            )
        )

    manifest = Manifest(
        video_id=f"fixture-{seed}",
        plane=plane,
        grid=grid,
        segment_duration=1.0,
        max_value=255,
        frames_per_segment=frames_per_segment,
        qps=qps,
        segments=entries,
        base_dir=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")

    for fold in range(folds):
        trace = gen_head_trace(
            "sinusoid",
            seed * 31 + fold,
            duration=duration,
            amplitude=55.0 + 15.0 * fold,
            period=4.0 + 0.7 * fold,
            amplitude_tilt=18.0,
        )
        save_head_trace(trace, out_dir / f"hm_fold{fold}.csv")
    save_throughput_csv(
        np.array([0.0]), np.array([10e6]), out_dir / "throughput.csv"
    )
    return out_dir / "manifest.json"


def generate_fixture(kind: str, seed: int, out_dir, params: dict | None = None) -> list[str]:
    """Dispatch a fixture kind to its generator; returns the files written."""
    params = dict(params or {})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if kind.startswith("trace-"):
        trace = gen_head_trace(kind.removeprefix("trace-"), seed, **params)
        path = out_dir / f"{kind}-{seed}.csv"
        save_head_trace(trace, path)
        return [str(path)]
    if kind == "saliency-blob":
        pan = params.get("pan", 0.0)
        tilt = params.get("tilt", 0.0)
        blob = gen_blob_map(pan, tilt, params.get("width", 64), params.get("height", 32))
        path = out_dir / f"saliency-blob-{seed}.pgm"
        save_graymap(blob, path)
        return [str(path)]
    if kind == "frames-moving-block":
        frames = gen_moving_block_frames(seed, **params)
        path = out_dir / f"frames-moving-block-{seed}.y"
        save_frames(frames, path)
        meta = {"width": frames.shape[2], "height": frames.shape[1],
                "n_frames": frames.shape[0]}
        meta_path = out_dir / f"frames-moving-block-{seed}.json"
        with open(meta_path, "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return [str(path), str(meta_path)]
    if kind == "prediction-corpus":
        gen_prediction_corpus(out_dir, seed, **params)
        return sorted(str(p) for p in out_dir.rglob("*") if p.is_file())
    if kind == "stream":
        gen_stream_fixture(out_dir, seed, **params)
        return sorted(str(p) for p in out_dir.rglob("*") if p.is_file())
    raise ValueError(f"unknown fixture kind {kind!r}")
