"""Command-line interface: batch experiments producing CSV/metrics.

Commands mirror the library surface: fixture generation, predictor
evaluation, fusion training, one-shot tile allocation, streaming sessions
and rate sweeps. Exit codes: 0 success, 1 usage error, 2 data error,
3 infeasible allocation. All paths are interpreted relative to --workdir;
ORBIT_THREADS caps internal worker counts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio, fixtures, neural, simulation
from .fileio import DataError
from .geometry import Viewport, tiles_in_viewport
from .optimizer import (
    EXACT_GUARD,
    InfeasibleError,
    evaluate,
    export_qcp,
    solve_exact,
    solve_heuristic,
    tile_weights,
)
from .prediction import (
    HORIZON_MAX_S,
    HeadTrace,
    PredictionRequest,
    angular_errors,
    build_training_set,
    cue_window_maps,
    predict,
    saliency_centroid_cue,
    saliency_max_cue,
    to_diff_window,
    wrap_angle,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INFEASIBLE = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with the documented usage exit code (1, not argparse's 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _csv_floats(rows: list[list], header: list[str], path):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
            fh.write("\n")


def _parse_horizons(text: str) -> list[float]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = float(lo), float(hi)
        out = []
        h = lo
        while h <= hi + 1e-9:
            out.append(round(h, 6))
            h += 0.1
        return out
    return [float(v) for v in text.split(",") if v]


def _parse_params(text: str | None) -> dict:
    if not text:
        return {}
    try:
        params = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--params is not valid JSON: {exc}") from exc
    if not isinstance(params, dict):
        raise UsageError("--params must be a JSON object")
    return params


# ---------------------------------------------------------------------------
# Subcommand implementations


def _cmd_fixtures_generate(args) -> int:
    files = fixtures.generate_fixture(args.kind, args.seed, args.out,
                                      _parse_params(args.params))
    for f in files:
        print(f)
    return EXIT_OK


def _load_model_for_policy(args, policy: str):
    if policy in ("none", "linreg"):
        return None
    if not args.model:
        raise UsageError(f"policy {policy!r} requires --model")
    return neural.load_model(args.model)


def _cmd_predict_eval(args) -> int:
    trace = fileio.load_head_trace(args.trace)
    horizons = _parse_horizons(args.horizons)
    if not horizons:
        raise UsageError("no horizons given")
    model = _load_model_for_policy(args, args.policy)
    maps = fileio.load_map_sequence(args.saliency) if args.saliency else None
    motion = fileio.load_map_sequence(args.motion) if args.motion else None
    if model is not None:
        for cue in model.spec.cue_inputs():
            if cue == "s" and maps is None:
                raise UsageError("model consumes saliency cues: pass --saliency")
            if cue == "m" and motion is None:
                raise UsageError("model consumes motion cues: pass --motion")

    dt = trace.dt
    max_h = max(horizons)
    if max_h > HORIZON_MAX_S + 1e-9:
        raise UsageError(f"horizons beyond {HORIZON_MAX_S}s are unsupported")
    max_steps = int(round(max_h / dt))
    if model is not None and model.spec.horizon_steps < max_steps:
        raise UsageError(
            f"model predicts {model.spec.horizon_steps} steps; "
            f"horizon {max_h}s needs {max_steps}"
        )
    window_steps = int(round(0.25 / dt))
    start = max(window_steps, int(np.ceil(0.5 / dt)))
    stride = max(1, int(round(args.stride / dt)))
    pred_err, base_err = [], []
    cue_mode = model.spec.cue_mode if model is not None else "centroid"
    cue_fn = saliency_centroid_cue if cue_mode == "centroid" else saliency_max_cue
    for i in range(start, len(trace) - max_steps, stride):
        window = trace.slice(i - window_steps, i + 1)
        request = PredictionRequest(trace=window, horizon=max_h)
        cues = {}
        if model is not None:
            current = window.state(len(window) - 1)
            if "s" in model.spec.cue_inputs():
                sel = cue_window_maps(maps[0], maps[1], trace.times[i])
                if not sel:
                    continue
                cues["s"] = cue_fn(sel, current)
            if "m" in model.spec.cue_inputs():
                sel = cue_window_maps(motion[0], motion[1], trace.times[i])
                if not sel:
                    continue
                cues["m"] = saliency_max_cue(sel, current)
        result = predict(request, args.policy, cues=cues or None, model=model)
        baseline = predict(request, "none")
        truth = trace.angles[i + 1 : i + 1 + max_steps]
        pred_err.append(angular_errors(result, truth))
        base_err.append(angular_errors(baseline, truth))
    if not pred_err:
        raise DataError("trace too short for any evaluation window")
    pe = np.array(pred_err)
    be = np.array(base_err)
    rows = []
    for h in horizons:
        idx = int(round(h / dt)) - 1
        mae = float(pe[:, idx].mean())
        rmse = float(np.sqrt((pe[:, idx] ** 2).mean()))
        base = float(be[:, idx].mean())
        if base == 0.0:
            comp = 1.0 if mae == 0.0 else float("nan")
        else:
            comp = min(1.0, 1.0 - mae / base)
        rows.append([float(h), mae, rmse, float(comp)])
    _csv_floats(rows, ["horizon_s", "mae_deg", "rmse_deg", "comp_rate"], args.out)
    print(f"wrote {args.out} ({len(rows)} horizons, {pe.shape[0]} windows)")
    return EXIT_OK


def _cmd_train_fusion(args) -> int:
    with open(args.spec) as fh:
        spec = neural.NetworkSpec.from_dict(json.load(fh))
    with open(args.config) as fh:
        config = neural.TrainConfig.from_dict(json.load(fh))
    data_dir = Path(args.data)
    trace_files = sorted((data_dir / "traces").glob("*.csv"))
    if not trace_files:
        raise DataError(f"{data_dir}: no traces/*.csv found")
    traces = [fileio.load_head_trace(p) for p in trace_files]
    saliency = None
    if spec.cue_inputs():
        saliency = []
        for p in trace_files:
            maps_dir = data_dir / "maps" / p.stem
            if not maps_dir.exists():
                raise DataError(f"{maps_dir}: missing cue maps for {p.stem}")
            saliency.append(fileio.load_map_sequence(maps_dir))
    dataset = build_training_set(
        traces,
        saliency,
        horizon_steps=spec.horizon_steps,
        cue_mode=spec.cue_mode,
        cue_steps=spec.cue_steps,
        stride_s=args.stride,
    )
    model, metrics = neural.train(spec, dataset, config, seed=args.seed)
    neural.save_model(model, args.out)
    for m in metrics:
        print(
            f"fold {m.fold}: best_val={m.best_val_loss:.6f} "
            f"test={m.test_loss:.6f} epochs={m.epochs}"
        )
    print(f"saved {args.out}")
    return EXIT_OK


def _cmd_tiles_optimize(args) -> int:
    manifest = fileio.load_manifest(args.manifest)
    try:
        pan, tilt, fov_h, fov_v = (float(v) for v in args.viewport.split(","))
    except ValueError as exc:
        raise UsageError("--viewport must be pan,tilt,fovh,fovv") from exc
    table = manifest.distortion_table(args.segment)
    vp_tiles = tiles_in_viewport(manifest.grid, Viewport(pan, tilt, fov_h, fov_v))
    weights = tile_weights(manifest.grid, vp_tiles)
    solver = args.solver
    if solver == "auto":
        solver = "exact" if float(table.n_reps) ** table.n_tiles <= EXACT_GUARD else "heuristic"
    solve = solve_exact if solver == "exact" else solve_heuristic
    alloc = solve(table, weights, args.nu, args.budget)
    report = evaluate(alloc, table, weights, args.nu)
    grid = manifest.grid
    print(f"solver={solver} viewport_tiles={len(vp_tiles)}")
    for r in range(grid.rows):
        row = alloc.selected[r * grid.cols : (r + 1) * grid.cols]
        print(" ".join(str(int(j)) for j in row))
    print(f"weighted_distortion={report.weighted_distortion!r}")
    print(f"quality_variance={report.quality_variance!r}")
    print(f"total={report.total!r}")
    print(f"rate_used={report.rate_used!r} budget={float(args.budget)!r}")
    if args.export_qcp:
        with open(args.export_qcp, "w") as fh:
            fh.write(export_qcp(table, weights, args.nu, args.budget))
        print(f"wrote {args.export_qcp}")
    return EXIT_OK


def _map_timeline(manifest) -> tuple[np.ndarray, list[np.ndarray]]:
    times, maps = [], []
    for seg in manifest.segments:
        offsets = np.arange(len(seg.saliency)) * (
            manifest.segment_duration / max(1, len(seg.saliency))
        )
        for off, _ in zip(offsets, seg.saliency):
            times.append(seg.index * manifest.segment_duration + float(off))
        maps.extend(manifest.saliency_maps(seg.index))
    return np.array(times), maps


def _build_predictor(args, manifest):
    kind = args.predictor
    if kind == "oracle":
        return simulation.OraclePredictor()
    if kind == "linreg":
        return simulation.PolicyPredictor("linreg")
    if kind == "fusion":
        if not args.model:
            raise UsageError("--predictor fusion requires --model")
        model = neural.load_model(args.model)
        timeline = _map_timeline(manifest) if model.spec.cue_inputs() else None
        policy = "fusion-centroid" if model.spec.cue_mode == "centroid" else "fusion-max"
        if not model.spec.cue_inputs():
            policy = "h-only"
        return simulation.PolicyPredictor(policy, model=model, map_timeline=timeline)
    raise UsageError(f"unknown predictor {kind!r}")


def _session_rows(stats) -> list[list]:
    rows = []
    for r in stats.records:
        rows.append(
            [
                r.index,
                float(r.target_bps),
                float(r.total_bits),
                float(r.download_s),
                float(r.rebuffer_s),
                float(r.ws_psnr_db),
                r.viewport_tiles,
                ";".join(r.events),
            ]
        )
    return rows


def _cmd_stream_simulate(args) -> int:
    manifest = fileio.load_manifest(args.manifest)
    t, c = fileio.load_throughput_csv(args.throughput)
    throughput = simulation.ThroughputTrace(t, c)
    hm = fileio.load_head_trace(args.trace)
    policy = simulation.POLICY_ALIASES.get(args.policy, args.policy)
    predictor = _build_predictor(args, manifest) if policy == "tiled-pred" else None
    stats = simulation.run_session(
        manifest, throughput, hm, policy, nu=args.nu, seed=args.seed,
        predictor=predictor,
    )
    _csv_floats(
        _session_rows(stats),
        ["segment", "target_bps", "total_bits", "download_s", "rebuffer_s",
         "ws_psnr_db", "viewport_tiles", "events"],
        args.out,
    )
    print(
        f"policy={stats.policy} mean_ws_psnr={stats.mean_ws_psnr_db:.3f}dB "
        f"rate={stats.mean_rate_bps / 1e6:.3f}Mbps "
        f"rebuffer_ratio={stats.rebuffer_ratio:.4f}"
    )
    return EXIT_OK


def _cmd_stream_sweep(args) -> int:
    manifest = fileio.load_manifest(args.manifest)
    traces = [fileio.load_head_trace(p) for p in args.traces.split(",") if p]
    if not traces:
        raise UsageError("--traces needs at least one CSV")
    rates = [float(v) for v in args.rates.split(",") if v]
    policies = [p for p in args.policies.split(",") if p]
    predictor_factory = None
    if any(simulation.POLICY_ALIASES.get(p, p) == "tiled-pred" for p in policies):
        predictor_factory = lambda hm: _build_predictor(args, manifest)  # noqa: E731
    rows = simulation.sweep_rates(
        manifest, rates, traces, policies, nu=args.nu,
        predictor_factory=predictor_factory, seed=args.seed,
    )
    _csv_floats(
        [
            [r.policy, float(r.rate_mbps), r.fold, float(r.mean_ws_psnr),
             float(r.rebuffer_ratio), float(r.total_bits)]
            for r in rows
        ],
        ["policy", "rate_mbps", "fold", "mean_ws_psnr", "rebuffer_ratio", "total_bits"],
        args.out,
    )
    for entry in simulation.summarize_sweep(rows):
        print(
            f"{entry['policy']} @ {entry['rate_mbps']:g} Mbps: "
            f"{entry['mean_ws_psnr']:.3f} +- {entry['std_ws_psnr']:.3f} dB "
            f"({entry['folds']} folds)"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="orbit", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--workdir", default=None,
                        help="resolve all paths relative to this directory")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fix = sub.add_parser("fixtures", help="synthetic corpora").add_subparsers(
        dest="subcommand", required=True, parser_class=_Parser
    )
    gen = fix.add_parser("generate", help="generate a fixture")
    gen.add_argument("--kind", required=True, choices=fixtures.FIXTURE_KINDS)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--params", default=None, help="JSON object of generator params")
    gen.set_defaults(func=_cmd_fixtures_generate)

    pred = sub.add_parser("predict", help="viewport prediction").add_subparsers(
        dest="subcommand", required=True, parser_class=_Parser
    )
    ev = pred.add_parser("eval", help="per-horizon MAE/RMSE and compensation rate")
    ev.add_argument("--trace", required=True, help="head trace CSV")
    ev.add_argument("--policy", required=True,
                    choices=["none", "linreg", "h-only", "fusion-max", "fusion-centroid"])
    ev.add_argument("--model", default=None, help="fusion checkpoint")
    ev.add_argument("--saliency", default=None, help="saliency map directory")
    ev.add_argument("--motion", default=None, help="motion map directory")
    ev.add_argument("--horizons", default="0.1..1.0",
                    help="comma list or lo..hi (0.1 s steps)")
    ev.add_argument("--stride", type=float, default=0.1,
                    help="seconds between evaluation windows")
    ev.add_argument("--out", required=True, help="output CSV")
    ev.set_defaults(func=_cmd_predict_eval)

    tr = sub.add_parser("train", help="model training").add_subparsers(
        dest="subcommand", required=True, parser_class=_Parser
    )
    tf = tr.add_parser("fusion", help="pre-train cores, then train the fusion trunk")
    tf.add_argument("--spec", required=True, help="network spec JSON")
    tf.add_argument("--data", required=True, help="prediction-corpus directory")
    tf.add_argument("--config", required=True, help="train config JSON")
    tf.add_argument("--out", required=True, help="checkpoint path")
    tf.add_argument("--seed", type=int, default=0)
    tf.add_argument("--stride", type=float, default=0.1,
                    help="seconds between training windows")
    tf.set_defaults(func=_cmd_train_fusion)

    tiles = sub.add_parser("tiles", help="tile allocation").add_subparsers(
        dest="subcommand", required=True, parser_class=_Parser
    )
    opt = tiles.add_parser("optimize", help="rate-distortion optimal allocation")
    opt.add_argument("--manifest", required=True)
    opt.add_argument("--viewport", required=True, help="pan,tilt,fovh,fovv (degrees)")
    opt.add_argument("--budget", type=float, required=True, help="bits/second")
    opt.add_argument("--nu", type=float, default=0.5, help="variance weight")
    opt.add_argument("--segment", type=int, default=0)
    opt.add_argument("--solver", choices=["auto", "exact", "heuristic"], default="auto")
    opt.add_argument("--export-qcp", default=None, help="write the QCP text here")
    opt.set_defaults(func=_cmd_tiles_optimize)

    stream = sub.add_parser("stream", help="streaming simulation").add_subparsers(
        dest="subcommand", required=True, parser_class=_Parser
    )
    sim = stream.add_parser("simulate", help="one session")
    sim.add_argument("--manifest", required=True)
    sim.add_argument("--throughput", required=True, help="throughput CSV (t,bps)")
    sim.add_argument("--trace", required=True, help="head trace CSV")
    sim.add_argument("--policy", required=True,
                     choices=["monolithic", "tiled", "tiled-no-pred", "tiled-pred"])
    sim.add_argument("--predictor", choices=["oracle", "linreg", "fusion"],
                     default="oracle")
    sim.add_argument("--model", default=None, help="fusion checkpoint")
    sim.add_argument("--nu", type=float, default=0.5)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="per-segment CSV")
    sim.set_defaults(func=_cmd_stream_simulate)

    sweep = stream.add_parser("sweep", help="sessions over a rate grid")
    sweep.add_argument("--manifest", required=True)
    sweep.add_argument("--traces", required=True, help="comma-separated head trace CSVs")
    sweep.add_argument("--rates", default="6,8,10,12,14,16", help="Mbps values")
    sweep.add_argument("--policies", default="monolithic,tiled,tiled-pred")
    sweep.add_argument("--predictor", choices=["oracle", "linreg", "fusion"],
                       default="oracle")
    sweep.add_argument("--model", default=None, help="fusion checkpoint")
    sweep.add_argument("--nu", type=float, default=0.5)
    sweep.add_argument("--seed", type=int, default=0)
    sweep.add_argument("--out", required=True, help="per-fold CSV")
    sweep.set_defaults(func=_cmd_stream_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workdir:
        os.chdir(args.workdir)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"orbit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleError as exc:
        print(f"orbit: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DataError, OSError, ValueError, RuntimeError) as exc:
        print(f"orbit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
