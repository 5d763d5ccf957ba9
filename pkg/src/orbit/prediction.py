"""Head-motion preprocessing, scene-semantic cues, and viewport prediction policies.

The prediction pipeline works in a normalized differential domain: a head
trajectory window is differenced (shortest-arc), scaled per axis by the
window's max absolute difference, forecast there, and remapped to absolute
orientations by a cumulative sum. Saliency and motion maps contribute
relative target trajectories ("cues") that late-fusion models consume
alongside the head window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import wrap_angle

# Sampling defaults: 80 Hz head samples, 250 ms head window, 500 ms cue window.
DT = 0.0125
WINDOW_S = 0.25
CUE_WINDOW_S = 0.5
HORIZON_MIN_S = 0.1
HORIZON_MAX_S = 1.0

POLICIES = ("none", "linreg", "h-only", "fusion-max", "fusion-centroid")

# Pan, tilt, roll column order for all (n, 3) angle arrays.
AXES = ("pan", "tilt", "roll")


@dataclass(frozen=True)
class HeadState:
    """One timestamped head orientation (degrees). Pan/roll wrap, tilt must be valid."""

    t: float
    pan: float
    tilt: float
    roll: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "pan", float(wrap_angle(self.pan)))
        object.__setattr__(self, "roll", float(wrap_angle(self.roll)))
        if not -90.0 <= self.tilt <= 90.0:
            raise ValueError(f"tilt {self.tilt} outside [-90, 90]")

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.pan, self.tilt, self.roll], dtype=np.float64)


class HeadTrace:
    """A uniformly sampled head-orientation sequence.

    angles is (n, 3) in degrees, columns pan/tilt/roll; timestamps must be
    strictly increasing with a sampling period constant to within 1%.
    """

    def __init__(self, times: np.ndarray, angles: np.ndarray):
        times = np.asarray(times, dtype=np.float64)
        angles = np.asarray(angles, dtype=np.float64)
        if times.ndim != 1 or angles.shape != (times.size, 3):
            raise ValueError("expected times (n,) and angles (n, 3)")
        if times.size < 2:
            raise ValueError("trace needs at least two samples")
        steps = np.diff(times)
        if (steps <= 0).any():
            raise ValueError("timestamps must be strictly increasing")
        dt = float(np.mean(steps))
        if np.abs(steps - dt).max() > 0.01 * dt:
            raise ValueError("sampling period varies by more than 1%")
        if not np.isfinite(angles).all():
            raise ValueError("angles contain non-finite values")
        if np.abs(angles[:, 1]).max() > 90.0:
            raise ValueError("tilt outside [-90, 90]")
        ang = angles.copy()
        ang[:, 0] = wrap_angle(ang[:, 0])
        ang[:, 2] = wrap_angle(ang[:, 2])
        self.times = times
        self.angles = ang
        self.dt = dt

    def __len__(self) -> int:
        return self.times.size

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def state(self, i: int) -> HeadState:
        return HeadState(
            float(self.times[i]), *(float(v) for v in self.angles[i])
        )

    def index_at(self, t: float) -> int:
        """Index of the last sample with timestamp <= t (clamped to the trace)."""
        i = int(np.searchsorted(self.times, t + 1e-9, side="right")) - 1
        return min(max(i, 0), len(self) - 1)

    def state_at(self, t: float) -> HeadState:
        return self.state(self.index_at(t))

    def slice(self, start: int, stop: int) -> "HeadTrace":
        return HeadTrace(self.times[start:stop], self.angles[start:stop])

    def window_ending(self, end_index: int, window_s: float = WINDOW_S) -> "HeadTrace":
        """The window_s-long sub-trace whose last sample is end_index."""
        steps = int(round(window_s / self.dt))
        if end_index - steps < 0:
            raise ValueError("window too short")
        return self.slice(end_index - steps, end_index + 1)


def diff_angles(angles: np.ndarray) -> np.ndarray:
    """Consecutive shortest-arc differences of an (n, 3) angle array -> (n-1, 3)."""
    return wrap_angle(np.diff(np.asarray(angles, dtype=np.float64), axis=0))


@dataclass(frozen=True)
class DiffWindow:
    """A head window in the normalized differential domain.

    diffs is (steps, 3) in [-1, 1]; norm_scale is the per-axis max absolute
    difference (degrees per step) used for the normalization. A motionless
    axis gets scale 0 and all-zero diffs (the analytic limit).
    """

    diffs: np.ndarray
    norm_scale: np.ndarray

    def __post_init__(self):
        if np.abs(self.diffs).max(initial=0.0) > 1.0 + 1e-12:
            raise ValueError("normalized differences outside [-1, 1]")
        if (self.norm_scale < 0).any():
            raise ValueError("norm_scale must be non-negative")


def to_diff_window(trace_window: HeadTrace, window_s: float = WINDOW_S) -> DiffWindow:
    """Difference and normalize a head window (uses the last window_s of the trace)."""
    steps = int(round(window_s / trace_window.dt))
    if len(trace_window) < steps + 1:
        raise ValueError(
            f"window too short: need {steps + 1} samples, got {len(trace_window)}"
        )
    angles = trace_window.angles[-(steps + 1):]
    raw = diff_angles(angles)
    scale = np.abs(raw).max(axis=0)
    normalized = np.zeros_like(raw)
    moving = scale > 0
    normalized[:, moving] = raw[:, moving] / scale[moving]
    return DiffWindow(diffs=normalized, norm_scale=scale)


@dataclass(frozen=True)
class PredictionResult:
    """Absolute orientation forecasts at uniform dt steps after the request time."""

    times: np.ndarray
    angles: np.ndarray

    def __post_init__(self):
        if self.angles.shape != (self.times.size, 3):
            raise ValueError("angles must be (n, 3)")

    def __len__(self) -> int:
        return self.times.size

    def states(self) -> list[HeadState]:
        return [
            HeadState(float(t), *(float(v) for v in a))
            for t, a in zip(self.times, self.angles)
        ]


def remap(
    diff_forecast: np.ndarray,
    current: HeadState,
    norm_scale: np.ndarray,
    dt: float = DT,
) -> PredictionResult:
    """Integrate a normalized difference forecast back to absolute orientations.

    Inverse of the differencing/normalization: cumulative sum of the
    denormalized differences added to the current orientation, pan/roll
    wrapped, tilt clamped to its physical range.
    """
    forecast = np.asarray(diff_forecast, dtype=np.float64)
    if forecast.ndim != 2 or forecast.shape[1] != 3:
        raise ValueError("diff_forecast must be (steps, 3)")
    scale = np.asarray(norm_scale, dtype=np.float64).reshape(3)
    absolute = current.angles + np.cumsum(forecast * scale, axis=0)
    absolute[:, 0] = wrap_angle(absolute[:, 0])
    absolute[:, 1] = np.clip(absolute[:, 1], -90.0, 90.0)
    absolute[:, 2] = wrap_angle(absolute[:, 2])
    times = current.t + dt * np.arange(1, forecast.shape[0] + 1)
    return PredictionResult(times=times, angles=absolute)


# ---------------------------------------------------------------------------
# Scene-semantic cues


def pixel_to_angles(x: float, y: float, width: int, height: int) -> tuple[float, float]:
    """Map an ERP pixel (center convention) to (pan, tilt) in degrees."""
    pan = (x + 0.5) / width * 360.0 - 180.0
    tilt = 90.0 - (y + 0.5) / height * 180.0
    return pan, tilt


def map_target(
    gray: np.ndarray, current: HeadState, mode: str
) -> tuple[float, float, bool]:
    """Normalized relative (pan, tilt) of a map's point of interest.

    mode "max" picks the brightest pixel (row-major first on ties);
    "centroid" uses the intensity centroid from the spatial image moments.
    Angles are taken relative to the current head orientation
    (shortest arc) and normalized by 180 deg. An all-zero map yields
    (0, 0) with the flagged bit set.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or gray.size == 0:
        raise ValueError("map must be a non-empty 2-D array")
    h, w = gray.shape
    total = gray.sum()
    if total <= 0:
        return 0.0, 0.0, True
    if mode == "max":
        flat = int(np.argmax(gray))
        y, x = divmod(flat, w)
    elif mode == "centroid":
        xs = np.arange(w, dtype=np.float64)
        ys = np.arange(h, dtype=np.float64)
        x = float((gray.sum(axis=0) * xs).sum() / total)
        y = float((gray.sum(axis=1) * ys).sum() / total)
    else:
        raise ValueError(f"unknown exploitation mode {mode!r}")
    pan, tilt = pixel_to_angles(x, y, w, h)
    rel_pan = wrap_angle(pan - current.pan)
    rel_tilt = tilt - current.tilt
    return rel_pan / 180.0, rel_tilt / 180.0, False


@dataclass(frozen=True)
class SemanticCue:
    """A differential target trajectory extracted from saliency or motion maps.

    trajectory is (steps, 2) for (pan, tilt), normalized per axis like the
    head window; flagged marks degenerate (all-zero) source maps.
    """

    source: str
    trajectory: np.ndarray
    norm_scale: np.ndarray = field(default=None)  # type: ignore[assignment]
    flagged: bool = False

    def __post_init__(self):
        traj = np.asarray(self.trajectory, dtype=np.float64)
        if traj.ndim != 2 or traj.shape[1] != 2:
            raise ValueError("cue trajectory must be (steps, 2)")
        if traj.size and np.abs(traj).max() > 1.0 + 1e-12:
            raise ValueError("cue entries outside [-1, 1]")
        object.__setattr__(self, "trajectory", traj)
        scale = self.norm_scale
        if scale is None:
            scale = np.zeros(2)
        object.__setattr__(self, "norm_scale", np.asarray(scale, dtype=np.float64))


def _cue_from_targets(source: str, targets: np.ndarray, flagged: bool) -> SemanticCue:
    raw = np.diff(targets, axis=0)
    if raw.shape[0] == 0:
        return SemanticCue(source=source, trajectory=np.zeros((0, 2)), flagged=flagged)
    scale = np.abs(raw).max(axis=0)
    normalized = np.zeros_like(raw)
    moving = scale > 0
    normalized[:, moving] = raw[:, moving] / scale[moving]
    return SemanticCue(
        source=source, trajectory=normalized, norm_scale=scale, flagged=flagged
    )


def saliency_max_cue(maps: Sequence[np.ndarray], current: HeadState) -> SemanticCue:
    """Cue from the brightest-point trajectory of the saliency maps in the window."""
    if len(maps) == 0:
        raise ValueError("no maps in cue window")
    out = [map_target(m, current, "max") for m in maps]
    targets = np.array([[p, t] for p, t, _ in out])
    return _cue_from_targets("saliency-max", targets, any(f for _, _, f in out))


def saliency_centroid_cue(maps: Sequence[np.ndarray], current: HeadState) -> SemanticCue:
    """Cue from the image-moment centroid trajectory of the saliency maps."""
    if len(maps) == 0:
        raise ValueError("no maps in cue window")
    out = [map_target(m, current, "centroid") for m in maps]
    targets = np.array([[p, t] for p, t, _ in out])
    return _cue_from_targets("saliency-centroid", targets, any(f for _, _, f in out))


def motion_max_cue(maps: Sequence[np.ndarray], current: HeadState) -> SemanticCue:
    """Cue from motion maps; max-based exploitation only."""
    if len(maps) == 0:
        raise ValueError("no maps in cue window")
    out = [map_target(m, current, "max") for m in maps]
    targets = np.array([[p, t] for p, t, _ in out])
    return _cue_from_targets("motion-max", targets, any(f for _, _, f in out))


def resample_cue(cue: SemanticCue, steps: int) -> np.ndarray:
    """Nearest-index resampling of a cue trajectory to a fixed step count."""
    traj = cue.trajectory
    if traj.shape[0] == 0:
        return np.zeros((steps, 2))
    idx = np.rint(np.linspace(0.0, traj.shape[0] - 1, steps)).astype(int)
    return traj[idx]


# ---------------------------------------------------------------------------
# Motion maps


def dense_flow(frame_prev: np.ndarray, frame_curr: np.ndarray) -> np.ndarray:
    """Dense optical flow (h, w, 2) between two grayscale frames (Farneback)."""
    a = np.asarray(frame_prev)
    b = np.asarray(frame_curr)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("frames must be equal-size 2-D arrays")
    a8 = np.clip(a, 0, 255).astype(np.uint8)
    b8 = np.clip(b, 0, 255).astype(np.uint8)
    return cv2.calcOpticalFlowFarneback(
        a8, b8, None,
        pyr_scale=0.5, levels=3, winsize=15, iterations=3,
        poly_n=5, poly_sigma=1.2, flags=0,
    )


def ego_flow_field(
    state_prev: HeadState, state_curr: HeadState, shape: tuple[int, int]
) -> np.ndarray:
    """Apparent ERP pixel flow induced by the camera's own rotation.

    A pan by +d degrees shifts the (camera-fixed) ERP content left by
    d/360*width pixels; a tilt by +d shifts it down by d/180*height.
    Roll is ignored (pan/tilt information only).
    """
    h, w = shape
    dpan = wrap_angle(state_curr.pan - state_prev.pan)
    dtilt = state_curr.tilt - state_prev.tilt
    field = np.empty((h, w, 2), dtype=np.float64)
    field[..., 0] = -dpan / 360.0 * w
    field[..., 1] = dtilt / 180.0 * h
    return field


def motion_map(
    frame_prev: np.ndarray,
    frame_curr: np.ndarray,
    ego: tuple[HeadState, HeadState] | None = None,
    sigma: float = 5.0,
) -> np.ndarray:
    """Grayscale scene-motion distribution between two frames.

    Dense flow minus the analytic ego-motion field, magnitude mapped to
    [0, 1] and Gaussian-smoothed so the result resembles a saliency
    distribution.
    """
    flow = dense_flow(frame_prev, frame_curr)
    if ego is not None:
        flow = flow - ego_flow_field(ego[0], ego[1], flow.shape[:2])
    mag = np.hypot(flow[..., 0], flow[..., 1])
    smoothed = gaussian_filter(mag, sigma=sigma)
    peak = smoothed.max()
    if peak <= 1e-12:
        return np.zeros_like(smoothed)
    return smoothed / peak


# ---------------------------------------------------------------------------
# Prediction policies


@dataclass(frozen=True)
class PredictionRequest:
    """A head window plus the forecast horizon in seconds."""

    trace: HeadTrace
    horizon: float

    def __post_init__(self):
        if not HORIZON_MIN_S <= self.horizon <= HORIZON_MAX_S + 1e-9:
            raise ValueError(
                f"horizon {self.horizon} outside [{HORIZON_MIN_S}, {HORIZON_MAX_S}]"
            )

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.trace.dt))

    @property
    def current(self) -> HeadState:
        return self.trace.state(len(self.trace) - 1)


def _constant_forecast(request: PredictionRequest) -> PredictionResult:
    cur = request.current
    times = cur.t + request.trace.dt * np.arange(1, request.steps + 1)
    return PredictionResult(times=times, angles=np.tile(cur.angles, (request.steps, 1)))


def _linreg_forecast(request: PredictionRequest, window_s: float) -> PredictionResult:
    trace = request.trace
    steps = int(round(window_s / trace.dt))
    if len(trace) < steps + 1:
        raise ValueError("window too short")
    angles = trace.angles[-(steps + 1):]
    # Fit on unwrapped angles so the regression is blind to the +-180 seam.
    unwrapped = np.vstack(
        [angles[0], angles[0] + np.cumsum(diff_angles(angles), axis=0)]
    )
    x = np.arange(steps + 1, dtype=np.float64)
    coeffs = np.polynomial.polynomial.polyfit(x, unwrapped, deg=1)
    future_x = steps + np.arange(1, request.steps + 1, dtype=np.float64)
    pred = coeffs[0] + np.outer(future_x, coeffs[1])
    pred[:, 0] = wrap_angle(pred[:, 0])
    pred[:, 1] = np.clip(pred[:, 1], -90.0, 90.0)
    pred[:, 2] = wrap_angle(pred[:, 2])
    cur = request.current
    times = cur.t + trace.dt * np.arange(1, request.steps + 1)
    return PredictionResult(times=times, angles=pred)


def predict(
    request: PredictionRequest,
    policy: str,
    cues: dict[str, SemanticCue] | None = None,
    model=None,
    modified_policy: bool = True,
    window_s: float = WINDOW_S,
) -> PredictionResult:
    """Forecast absolute orientations under the chosen policy.

    Policies: "none" repeats the current state; "linreg" extrapolates a
    first-order least-squares fit of the window; "h-only" and the two
    fusion policies run a trained model over the normalized differential
    window (plus cues) and remap the output. With modified_policy (the
    default) the roll channel of every result is the current roll,
    regardless of policy: rolls are not predicted, the current value is
    the look-ahead.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if policy == "none":
        result = _constant_forecast(request)
    elif policy == "linreg":
        result = _linreg_forecast(request, window_s)
    else:
        if model is None:
            raise ValueError(f"policy {policy!r} requires a trained model")
        window = to_diff_window(request.trace, window_s)
        inputs = {"h": window.diffs[None, :, :]}
        for name in model.spec.cue_inputs():
            if cues is None or name not in cues:
                raise ValueError(f"policy {policy!r} requires cue {name!r}")
            inputs[name] = resample_cue(cues[name], model.spec.cue_steps)[None, :, :]
        forecast = model.predict(inputs)[0]
        forecast = forecast[: request.steps]
        if forecast.shape[0] < request.steps:
            raise ValueError(
                f"model horizon {forecast.shape[0]} steps < requested {request.steps}"
            )
        result = remap(forecast, request.current, window.norm_scale, request.trace.dt)
    if modified_policy:
        angles = result.angles.copy()
        angles[:, 2] = request.current.roll
        result = PredictionResult(times=result.times, angles=angles)
    return result


# ---------------------------------------------------------------------------
# Prediction error and compensation


def angular_errors(
    predicted: PredictionResult, truth: np.ndarray, include_roll: bool = False
) -> np.ndarray:
    """Per-step mean absolute angular error (shortest arc, degrees).

    truth is (steps, 3); averaging covers pan and tilt, plus roll only
    when include_roll is set (the modified policy excludes roll).
    """
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != predicted.angles.shape:
        raise ValueError("prediction/truth shape mismatch")
    err = np.abs(wrap_angle(predicted.angles - truth))
    cols = slice(0, 3) if include_roll else slice(0, 2)
    return err[:, cols].mean(axis=1)


@dataclass(frozen=True)
class CompensationReport:
    """Fraction of the baseline error removed by a predictor, per horizon step."""

    per_horizon: np.ndarray
    mean: float


def compensation_from_errors(
    predicted_err: np.ndarray, baseline_err: np.ndarray
) -> CompensationReport:
    """rate = 1 - predicted/baseline per horizon step, clamped to (-inf, 1]."""
    p = np.atleast_2d(np.asarray(predicted_err, dtype=np.float64))
    b = np.atleast_2d(np.asarray(baseline_err, dtype=np.float64))
    if p.shape != b.shape:
        raise ValueError("error arrays must have matching shapes")
    p_mean = p.mean(axis=0)
    b_mean = b.mean(axis=0)
    rates = np.empty_like(b_mean)
    for i, (pe, be) in enumerate(zip(p_mean, b_mean)):
        if be == 0.0:
            if pe == 0.0:
                rates[i] = 1.0
            else:
                raise ValueError("degenerate trace")
        else:
            rates[i] = min(1.0, 1.0 - pe / be)
    return CompensationReport(per_horizon=rates, mean=float(rates.mean()))


def compensation_rate(
    predicted: PredictionResult,
    truth: HeadTrace,
    baseline: PredictionResult,
    include_roll: bool = False,
) -> CompensationReport:
    """Compensation of one prediction against the no-prediction baseline.

    truth must cover the forecast timestamps; errors are aligned per
    horizon step.
    """
    if len(predicted) != len(baseline):
        raise ValueError("prediction and baseline horizons differ")
    start = truth.index_at(predicted.times[0])
    truth_angles = truth.angles[start : start + len(predicted)]
    if truth_angles.shape[0] != len(predicted):
        raise ValueError("truth trace does not cover the forecast horizon")
    pe = angular_errors(predicted, truth_angles, include_roll)
    be = angular_errors(baseline, truth_angles, include_roll)
    return compensation_from_errors(pe[None, :], be[None, :])


# ---------------------------------------------------------------------------
# Supervised window extraction for training


def cue_window_maps(
    map_times: np.ndarray, maps: Sequence[np.ndarray], t: float,
    cue_window_s: float = CUE_WINDOW_S,
) -> list[np.ndarray]:
    """The maps with timestamps in (t - cue_window_s, t]."""
    sel = (map_times > t - cue_window_s) & (map_times <= t + 1e-9)
    return [m for m, keep in zip(maps, sel) if keep]


def build_training_set(
    traces: Sequence[HeadTrace],
    saliency: Sequence[tuple[np.ndarray, Sequence[np.ndarray]]] | None,
    horizon_steps: int,
    cue_mode: str = "centroid",
    cue_steps: int = 20,
    motion: Sequence[tuple[np.ndarray, Sequence[np.ndarray]]] | None = None,
    window_s: float = WINDOW_S,
    cue_window_s: float = CUE_WINDOW_S,
    stride_s: float = 0.1,
):
    """Slide over traces to build supervised windows for fusion training.

    Targets are the future normalized differences under each window's own
    norm scale (the quantity the remapping consumes). One family id per
    trace. saliency/motion are (times, maps) pairs aligned to trace time;
    omit them for an h-only dataset.
    """
    from .neural import TrainingSet

    window_steps_n = None
    inputs_h, inputs_s, inputs_m, targets, families = [], [], [], [], []
    cue_fn = saliency_centroid_cue if cue_mode == "centroid" else saliency_max_cue
    for fam, trace in enumerate(traces):
        steps = int(round(window_s / trace.dt))
        window_steps_n = steps
        stride = max(1, int(round(stride_s / trace.dt)))
        start = steps
        if saliency is not None or motion is not None:
            start = max(start, int(np.ceil(cue_window_s / trace.dt)))
        for i in range(start, len(trace) - horizon_steps, stride):
            window = trace.slice(i - steps, i + 1)
            dwin = to_diff_window(window, window_s)
            future = diff_angles(trace.angles[i : i + horizon_steps + 1])
            target = np.zeros_like(future)
            moving = dwin.norm_scale > 0
            target[:, moving] = future[:, moving] / dwin.norm_scale[moving]
            current = trace.state(i)
            if saliency is not None:
                times_m, maps_m = saliency[fam]
                sel = cue_window_maps(times_m, maps_m, trace.times[i], cue_window_s)
                if not sel:
                    continue
                cue = cue_fn(sel, current)
                inputs_s.append(resample_cue(cue, cue_steps))
            if motion is not None:
                times_m, maps_m = motion[fam]
                sel = cue_window_maps(times_m, maps_m, trace.times[i], cue_window_s)
                if not sel:
                    continue
                inputs_m.append(resample_cue(motion_max_cue(sel, current), cue_steps))
            inputs_h.append(dwin.diffs)
            targets.append(target)
            families.append(fam)
    if not inputs_h:
        raise ValueError("no training windows could be extracted")
    data = {"h": np.array(inputs_h)}
    if saliency is not None:
        data["s"] = np.array(inputs_s)
    if motion is not None:
        data["m"] = np.array(inputs_m)
    assert window_steps_n is not None
    return TrainingSet(
        inputs=data,
        targets=np.array(targets),
        families=np.array(families, dtype=np.int64),
    )
