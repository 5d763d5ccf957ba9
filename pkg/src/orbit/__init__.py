"""orbit: semantic viewport prediction and tile-based 360 streaming simulation.

Subpackages by concern:

- geometry: ERP tiling, viewport/tile intersection, spherical correction
- quality: tile MSE, WS-PSNR and friends
- prediction: head-window preprocessing, semantic cues, prediction policies
- neural: the from-scratch GRU/conv fusion stack and its training protocol
- optimizer: rate-distortion tile allocation (exact, heuristic, QCP export)
- simulation: DASH-like streaming sessions and rate sweeps
- fileio / fixtures: formats, loaders, and seeded synthetic corpora
"""

from .geometry import (
    ErpPlane,
    TileGrid,
    TileIndex,
    Viewport,
    spherical_correction,
    tile_distance,
    tiles_in_viewport,
)
from .optimizer import (
    Allocation,
    InfeasibleError,
    evaluate,
    export_qcp,
    solve_exact,
    solve_heuristic,
    tile_weights,
)
from .prediction import (
    DiffWindow,
    HeadState,
    HeadTrace,
    PredictionRequest,
    PredictionResult,
    SemanticCue,
    compensation_rate,
    motion_map,
    predict,
    remap,
    saliency_centroid_cue,
    saliency_max_cue,
    to_diff_window,
)
from .quality import DistortionTable, LumaFrame, tile_mse, ws_psnr, ws_weight
from .simulation import (
    BufferState,
    SessionStats,
    ThroughputTrace,
    estimate_target_rate,
    run_session,
    sweep_rates,
)

__version__ = "0.1.0"

__all__ = [
    "Allocation",
    "BufferState",
    "DiffWindow",
    "DistortionTable",
    "ErpPlane",
    "HeadState",
    "HeadTrace",
    "InfeasibleError",
    "LumaFrame",
    "PredictionRequest",
    "PredictionResult",
    "SemanticCue",
    "SessionStats",
    "ThroughputTrace",
    "TileGrid",
    "TileIndex",
    "Viewport",
    "compensation_rate",
    "estimate_target_rate",
    "evaluate",
    "export_qcp",
    "motion_map",
    "predict",
    "remap",
    "run_session",
    "saliency_centroid_cue",
    "saliency_max_cue",
    "solve_exact",
    "solve_heuristic",
    "spherical_correction",
    "sweep_rates",
    "tile_distance",
    "tile_mse",
    "tile_weights",
    "tiles_in_viewport",
    "to_diff_window",
    "ws_psnr",
    "ws_weight",
]
