"""Distortion and spherical quality metrics for ERP video.

Metrics operate on luma (Y) planes only. The latitude weight implemented
here is cos((y - h/2 + 1/2) * pi / h); some prints of the weight show a
pi/2 angular scale, but only the pi/h form decreases from the equator to
the poles, which is the property the weighting exists to provide (and the
standard WS-PSNR definition).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import ErpPlane

# Sentinel for a zero-error comparison, so aggregates stay finite.
DEFAULT_PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class LumaFrame:
    """A single luma plane with its nominal peak value."""

    samples: np.ndarray
    max_value: int = 255

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("luma samples must be a non-empty 2-D array")
        if arr.min() < 0 or arr.max() > self.max_value:
            raise ValueError("luma samples outside [0, max_value]")
        object.__setattr__(self, "samples", arr)

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]


def _as_samples(frame) -> np.ndarray:
    if isinstance(frame, LumaFrame):
        return frame.samples
    return np.asarray(frame, dtype=np.float64)


def tile_mse(original, reconstructed) -> float:
    """Mean squared luma error; accepts 2-D frames or 3-D (frame, y, x) stacks.

    For stacks this equals the mean over frames of the per-frame MSE.
    """
    a = _as_samples(original)
    b = _as_samples(reconstructed)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def corrected_distortion(mse: float, correction: float) -> float:
    """Distortion of a tile as seen on the viewing sphere."""
    if mse < 0:
        raise ValueError("distortion must be non-negative")
    return mse * correction


def ws_weight(y: int, plane: ErpPlane) -> float:
    """Latitude weight of pixel row y (0 = top row)."""
    if not 0 <= y < plane.height:
        raise ValueError(f"row {y} outside ERP plane of height {plane.height}")
    return math.cos((y - plane.height / 2 + 0.5) * math.pi / plane.height)


def ws_weight_map(plane: ErpPlane) -> np.ndarray:
    """Per-row latitude weights, shape (height,)."""
    rows = np.arange(plane.height, dtype=np.float64)
    return np.cos((rows - plane.height / 2 + 0.5) * np.pi / plane.height)


def weighted_mse(original, reconstructed, viewport: np.ndarray, weights: np.ndarray) -> float:
    """Weight-normalized squared error over the viewport pixel set.

    viewport is a boolean (h, w) mask; weights broadcasts against the frame
    (a per-row column vector or a full map). Invariant under any uniform
    positive scaling of the weights.
    """
    a = _as_samples(original)
    b = _as_samples(reconstructed)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    mask = np.asarray(viewport, dtype=bool)
    if mask.shape != a.shape:
        raise ValueError("viewport mask shape must match the frames")
    if not mask.any():
        raise ValueError("empty viewport pixel set")
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), a.shape)[mask]
    err = (a[mask] - b[mask]) ** 2
    return float(np.sum(err * w) / np.sum(w))


def ws_psnr(
    original,
    reconstructed,
    viewport: np.ndarray,
    plane: ErpPlane,
    max_value: int | None = None,
    cap_db: float = DEFAULT_PSNR_CAP_DB,
    weights: np.ndarray | None = None,
) -> float:
    """Spherically weighted PSNR over the viewport pixels of an ERP frame.

    weights=None uses the latitude map for `plane`; passing an explicit map
    (e.g. all ones) is the regression hook back to plain PSNR. A zero error
    returns cap_db.
    """
    a = _as_samples(original)
    if max_value is None:
        max_value = original.max_value if isinstance(original, LumaFrame) else 255
    if weights is None:
        if a.shape[0] != plane.height or a.shape[1] != plane.width:
            raise ValueError("frame does not match the ERP plane")
        weights = ws_weight_map(plane)[:, None]
    wmse = weighted_mse(a, reconstructed, viewport, weights)
    if wmse <= 0.0:
        return cap_db
    return min(cap_db, 10.0 * math.log10(max_value**2 / wmse))


def segment_ws_psnr(
    original_frames,
    reconstructed_frames,
    viewport: np.ndarray,
    plane: ErpPlane,
    max_value: int = 255,
    cap_db: float = DEFAULT_PSNR_CAP_DB,
) -> float:
    """Mean of per-frame WS-PSNR (in dB) over a segment's frames."""
    frames = list(zip(original_frames, reconstructed_frames, strict=True))
    if not frames:
        raise ValueError("segment has no frames")
    scores = [
        ws_psnr(o, r, viewport, plane, max_value=max_value, cap_db=cap_db)
        for o, r in frames
    ]
    return float(np.mean(scores))


@dataclass(frozen=True)
class DistortionTable:
    """Per-tile bitrate ladders: raw MSE, sphere-corrected MSE, and bitrates.

    Arrays are (n_tiles, n_reps); `valid` masks ladder entries that survived
    dominance pruning. Within a tile the valid entries are strictly
    increasing in rate and strictly decreasing in distortion.
    """

    mse: np.ndarray
    corrected: np.ndarray
    rates: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        mse = np.asarray(self.mse, dtype=np.float64)
        rates = np.asarray(self.rates, dtype=np.float64)
        corrected = np.asarray(self.corrected, dtype=np.float64)
        if mse.ndim != 2 or mse.shape != rates.shape or mse.shape != corrected.shape:
            raise ValueError("mse, corrected and rates must share an (N, B) shape")
        if (mse < 0).any() or (corrected < 0).any() or (rates < 0).any():
            raise ValueError("ladder entries must be non-negative")
        valid = self.valid
        if valid is None:
            valid = np.ones(mse.shape, dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        for arr, name in ((mse, "mse"), (corrected, "corrected"), (rates, "rates"), (valid, "valid")):
            object.__setattr__(self, name, arr)
        self._validate_monotone()

    def _validate_monotone(self):
        for n in range(self.n_tiles):
            idx = np.flatnonzero(self.valid[n])
            if idx.size == 0:
                raise ValueError(f"tile {n} has no valid representations")
            r = self.rates[n, idx]
            d = self.corrected[n, idx]
            order = np.argsort(r, kind="stable")
            if not (np.diff(r[order]) > 0).all() or not (np.diff(d[order]) < 0).all():
                raise ValueError(
                    f"tile {n}: ladder is not monotone (rates must strictly rise as distortion falls)"
                )

    @classmethod
    def from_ladders(cls, mse, rates, corrections) -> "DistortionTable":
        """Build a table from measured ladders, pruning dominated representations.

        A representation is dominated when another one in the same tile has
        rate <= and distortion <= (one strictly); survivors form the Pareto
        frontier, which is monotone by construction. Pruning emits a warning.
        """
        mse = np.asarray(mse, dtype=np.float64)
        rates = np.asarray(rates, dtype=np.float64)
        corr = np.asarray(corrections, dtype=np.float64).reshape(-1, 1)
        if mse.shape[0] != corr.shape[0]:
            raise ValueError("corrections length must equal the tile count")
        corrected = mse * corr
        n_tiles, n_reps = mse.shape
        valid = np.ones((n_tiles, n_reps), dtype=bool)
        pruned = 0
        for n in range(n_tiles):
            for j in range(n_reps):
                for k in range(n_reps):
                    if j == k or not valid[n, j]:
                        continue
                    dominates = (
                        rates[n, k] <= rates[n, j]
                        and corrected[n, k] <= corrected[n, j]
                        and (
                            rates[n, k] < rates[n, j]
                            or corrected[n, k] < corrected[n, j]
                            or k < j  # exact duplicate: keep the lowest index
                        )
                    )
                    if dominates and valid[n, k]:
                        valid[n, j] = False
                        pruned += 1
                        break
        if pruned:
            warnings.warn(
                f"pruned {pruned} dominated ladder representation(s)", stacklevel=2
            )
        return cls(mse=mse, corrected=corrected, rates=rates, valid=valid)

    @property
    def n_tiles(self) -> int:
        return self.mse.shape[0]

    @property
    def n_reps(self) -> int:
        return self.mse.shape[1]

    def min_rate_reps(self) -> np.ndarray:
        """Per tile, the valid representation index with the lowest rate."""
        rates = np.where(self.valid, self.rates, np.inf)
        return np.argmin(rates, axis=1)

    def min_distortion_reps(self) -> np.ndarray:
        """Per tile, the valid representation index with the lowest corrected MSE."""
        d = np.where(self.valid, self.corrected, np.inf)
        return np.argmin(d, axis=1)
