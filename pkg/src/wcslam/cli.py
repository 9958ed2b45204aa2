"""Command-line entry point: generate, solve, eval, plotdata.

Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import backend as be
from .config import RunConfig, dump_defaults, load_config
from .evaluation import MissingGroundTruthPose, evaluate_estimate, LengthMismatch
from .frontend import run_frontend
from .graph_solver import GraphError, SingularSystem
from .liegroup import AngleNearPi
from .scenegen import ConfigError, generate_scene, simulate_measurements
from .serialization import (
    FORMAT_VERSION,
    DatasetError,
    SequenceMismatch,
    read_dataset,
    read_estimate,
    read_frontend,
    write_dataset,
    write_estimate,
    write_frontend,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    scene = generate_scene(cfg.scene)
    ms = simulate_measurements(scene, noise=cfg.noise, seed=cfg.seed)
    ds = write_dataset(args.out, scene, ms, seed=cfg.seed)
    n_static = len(scene.static_points)
    n_dyn = sum(len(o.body_points) for o in scene.objects.values())
    n_meas = sum(len(f) for f in ms.frames)
    print(f"sequence {ds.sequence_id}")
    print(f"frames {scene.num_frames}  objects {len(scene.objects)}  tracks {n_static + n_dyn} (static {n_static}, dynamic {n_dyn})  measurements {n_meas}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def _solve_config(args, seed: int) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config, seed=args.seed if args.seed is not None else seed)
    else:
        cfg = RunConfig().with_seed(args.seed if args.seed is not None else seed)
    if args.formulation is not None:
        cfg = replace(cfg, formulation=args.formulation)
    if args.window is not None:
        cfg = replace(cfg, window=args.window or None)
    if args.overlap is not None:
        cfg = replace(cfg, overlap=args.overlap)
    if cfg.backend.anchor == "explicit":
        raise ConfigError("anchor policy 'explicit' is only available through the Python API")
    cfg.validate()
    return cfg


def _stats_record(sequence_id: str, cfg: RunConfig, windows, stats, status: str, error: str | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "sequence_id": sequence_id,
        "status": status,
        "error": error,
        "formulation": cfg.formulation,
        "window": cfg.window,
        "overlap": cfg.overlap,
        "windows": [[w[0], w[-1]] for w in windows],
        "solves": [{k: v for k, v in st.to_dict().items() if k != "wall_time"} for st in stats],
        "config": cfg.to_dict(),
    }


def cmd_solve(args) -> int:
    ds = read_dataset(args.data)
    cfg = _solve_config(args, ds.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    fo = run_frontend(ds.measurements, cfg.frontend)
    t_fe = time.perf_counter() - t0
    write_frontend(out / "frontend.jsonl", fo, ds.sequence_id)
    windows = be.window_ranges(ds.measurements.num_frames, cfg.window, cfg.overlap)
    t0 = time.perf_counter()
    try:
        est = be.run_sliding_window(cfg.formulation, fo, cfg.window, cfg.overlap, cfg.backend, ground_truth=ds.scene) if cfg.window else be.run_batch(cfg.formulation, fo, cfg.backend, ground_truth=ds.scene)
    except (SingularSystem, GraphError, AngleNearPi, be.GapInMotionChain, be.EmptyWindow) as exc:
        partial = getattr(exc, "partial_stats", [])
        _write_json(out / "stats.json", _stats_record(ds.sequence_id, cfg, windows, partial, "failed", f"{type(exc).__name__}: {exc}"))
        print(f"error: back end failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    t_be = time.perf_counter() - t0
    write_estimate(out / "estimate.jsonl", est, ds.sequence_id)
    _write_json(out / "stats.json", _stats_record(ds.sequence_id, cfg, windows, est.stats, "ok"))
    _write_json(out / "timing.json", {"frontend_s": t_fe, "backend_s": t_be, "solves_s": [st.wall_time for st in est.stats]})
    final = sum(st.final_cost for st in est.stats)
    iters = sum(st.iterations for st in est.stats)
    print(f"{cfg.formulation} {'batch' if not cfg.window else f'window {cfg.window}/{cfg.overlap}'}: {len(windows)} solve(s), {iters} iterations, final cost {final:.6g}")
    print(f"front end {t_fe:.2f} s, back end {t_be:.2f} s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / plotdata
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    ds = read_dataset(args.data)
    est, seq = read_estimate(args.estimate)
    if seq != ds.sequence_id:
        raise SequenceMismatch(f"estimate sequence {seq!r} does not match dataset {ds.sequence_id!r}")
    fo = None
    fe_path = Path(args.frontend) if args.frontend else Path(args.estimate).with_name("frontend.jsonl")
    if args.frontend or fe_path.is_file():
        fo = read_frontend(fe_path, ds.measurements, ds.sequence_id)
    report = evaluate_estimate(est, ds.scene, fo, align=args.align, sequence_id=seq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.json").write_text(report.to_json())
    (out / "me_samples.csv").write_text(report.traces_csv())
    for r in report.results:
        print(f"{r.metric:4s} {r.target:10s} t={r.translation:.6g} m  r={r.rotation:.6g} deg  n={r.count}")
    me = report.object_average("me")
    if me is not None:
        print(f"sequence mean ME: t={me[0]:.6g} m  r={me[1]:.6g} deg")
    return EXIT_OK


def _read_samples(report_dir: Path) -> tuple[str, dict]:
    meta = json.loads((report_dir / "metrics.json").read_text())
    rows: dict = {}
    path = report_dir / "me_samples.csv"
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    with path.open() as fh:
        for n, row in enumerate(csv.DictReader(fh), start=2):
            try:
                key = (int(row["frame"]), int(row["object"]))
                rows.setdefault(row["stage"], {})[key] = (float(row["me_t_m"]), float(row["me_r_deg"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path.name}:{n}: {exc}") from None
    return meta["sequence_id"], rows


def cmd_plotdata(args) -> int:
    reports = [Path(p) for p in args.reports]
    labels = args.labels or [p.name for p in reports]
    if len(labels) != len(reports):
        raise InputError("need one label per report directory")
    series: list[tuple[str, dict]] = []
    seqs = set()
    for i, (label, rdir) in enumerate(zip(labels, reports)):
        seq, rows = _read_samples(rdir)
        seqs.add(seq)
        if "backend" in rows:
            series.append(("" if i == 0 else f"_{label}", rows["backend"]))
        if "frontend" in rows and i == 0:
            series.append(("_frontend", rows["frontend"]))
    if len(seqs) > 1:
        raise SequenceMismatch(f"reports come from different sequences: {sorted(seqs)}")
    if not series:
        raise InputError("reports contain no motion-error samples")
    keys = sorted(set().union(*(s.keys() for _, s in series)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["frame", "object"]
    for suffix, _ in series:
        header += [f"ME_t{suffix}", f"ME_r{suffix}"]
    with (out / "me_per_frame.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for key in keys:
            row = [key[0], key[1]]
            for _, s in series:
                row += [repr(s[key][0]), repr(s[key][1])] if key in s else ["", ""]
            w.writerow(row)
    print(f"wrote {len(keys)} rows to {out / 'me_per_frame.csv'}")
    if args.svg:
        from .plotting import write_me_svg

        for obj in sorted({k[1] for k in keys}):
            write_me_svg(out / f"me_object_{obj}.svg", obj, series, labels)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wcslam", description="Dynamic SLAM back ends on simulated RGB-D tracks.")
    p.add_argument("--dump-defaults", action="store_true", help="print the default configuration (TOML) and exit")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("generate", help="simulate a dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int, help="overrides [run] seed")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="run front end and back end on a dataset")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--config", help="run configuration (defaults when omitted)")
    s.add_argument("--seed", type=int, help="defaults to the dataset seed")
    s.add_argument("--formulation", choices=["wcme", "wcpe"])
    s.add_argument("--window", type=int, help="sliding-window size; 0 for full batch")
    s.add_argument("--overlap", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("eval", help="score an estimate against the dataset ground truth")
    e.add_argument("--estimate", required=True, help="estimate.jsonl")
    e.add_argument("--data", required=True)
    e.add_argument("--frontend", help="frontend.jsonl (default: next to the estimate)")
    e.add_argument("--align", action="store_true", help="rigidly align trajectories before ATE")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("plotdata", help="per-frame motion-error traces from eval reports")
    d.add_argument("--reports", nargs="+", required=True, help="eval output directories")
    d.add_argument("--labels", nargs="+")
    d.add_argument("--svg", action="store_true", help="also write SVG line charts (needs matplotlib)")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_plotdata)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_defaults:
        sys.stdout.write(dump_defaults())
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (ConfigError, DatasetError, InputError, MissingGroundTruthPose, LengthMismatch, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SingularSystem, GraphError, AngleNearPi) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
