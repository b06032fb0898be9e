"""Command-line entry point: ``hsglrt {simulate,estimate,detect,calibrate,eval}``.

Every option may also come from a JSON config file (``--config``); flags
given on the command line override file values. The resolved options are
embedded in every JSON output.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hsglrt.detector import (
    DetectorConfig,
    annulus_offsets,
    calibrate_threshold,
    false_alarm_rate,
    glrt_statistic,
    secondary_for_pixel,
    sliding_detect,
)
from hsglrt.errors import ConfigError, DataError, DomainError, SingularStatisticsError
from hsglrt.estimators import EstimatorConfig, estimate_oracle
from hsglrt.io import (
    BandMask,
    apply_band_mask,
    json_safe,
    read_cube,
    read_spectral_library,
    version_string,
    write_records,
    write_results,
)
from hsglrt.model import (
    STANDARD_ROWS,
    SceneConfig,
    generate_scene,
    synthesize_pixel,
    synthetic_vehicle_library,
    trial_seed,
    validate_abundances,
)
from hsglrt.montecarlo import ESTIMATOR_NAMES, STREAM_H1, h0_statistics, run_trials, simulate_rows
from hsglrt.stats import build_context, g_objective, whiten

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

COMMON_DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out": None,
    "estimator": "both",
    "n_iter": 15,
    "bg_grid": "0.1:0.9:0.01",
    "band_mask": "default",
    "library": None,
    "endmembers": None,
}
SCENE_DEFAULTS = {"k_secondary": 625, "noise_variance": 0.5}
WINDOW_DEFAULTS = {"bg_window": 55, "guard_window": 3, "subsample": None}
DEFAULTS = {
    "simulate": {
        **COMMON_DEFAULTS, **SCENE_DEFAULTS,
        "rows": "standard", "trials": 1000, "h0_trials": 20000, "pfa": 1e-3,
    },
    "estimate": {
        **COMMON_DEFAULTS, **SCENE_DEFAULTS, **WINDOW_DEFAULTS,
        "cube": None, "pixel": None, "alpha": None, "oracle": False, "grid_step": 1e-2,
    },
    "detect": {
        **COMMON_DEFAULTS, **WINDOW_DEFAULTS,
        "cube": None, "region": None, "threshold": None, "threshold_file": None,
        "reference": None, "truth": None,
    },
    "calibrate": {
        **COMMON_DEFAULTS, **SCENE_DEFAULTS, **WINDOW_DEFAULTS,
        "cube": None, "region": None, "trials": 10000, "pfa": 1e-2,
    },
    "eval": {
        **COMMON_DEFAULTS, **SCENE_DEFAULTS,
        "rows": "standard", "trials": 100, "oracle": False, "grid_step": 1e-2,
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Resolved options of one invocation (defaults < config file < flags)."""

    command: str
    options: dict

    def __getattr__(self, name):
        try:
            return self.options[name]
        except KeyError:
            raise AttributeError(name) from None

    def to_dict(self) -> dict:
        return {"command": self.command, **self.options}


# ---------------------------------------------------------------------------
# Option parsing
# ---------------------------------------------------------------------------

def parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).replace(" ", "").split(",") if v != ""]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def parse_rows(text) -> list[tuple[float, ...]]:
    """``"standard"`` or ``"a,b,c;a,b,c"``; lists of lists are accepted from JSON."""
    if isinstance(text, (list, tuple)):
        return [tuple(float(v) for v in row) for row in text]
    if str(text).strip().lower() == "standard":
        return [tuple(r) for r in STANDARD_ROWS]
    return [tuple(parse_floats(part)) for part in str(text).split(";") if part.strip()]


def parse_pixel(text) -> tuple[int, int]:
    if isinstance(text, (list, tuple)):
        vals = list(text)
    else:
        vals = str(text).replace(" ", "").split(",")
    try:
        r, c = (int(v) for v in vals)
    except ValueError as exc:
        raise ConfigError(f"pixel must be 'row,col', got {text!r}") from exc
    return r, c


def parse_pixels(text) -> list[tuple[int, int]]:
    if isinstance(text, (list, tuple)):
        return [parse_pixel(p) for p in text]
    return [parse_pixel(p) for p in str(text).split(";") if p.strip()]


def parse_region(text) -> tuple[int, int, int, int]:
    """``"r0:r1,c0:c1"`` (half-open) as ``(r0, r1, c0, c1)``."""
    if isinstance(text, (list, tuple)) and len(text) == 4:
        return tuple(int(v) for v in text)
    try:
        rows, cols = str(text).replace(" ", "").split(",")
        r0, r1 = (int(v) for v in rows.split(":"))
        c0, c1 = (int(v) for v in cols.split(":"))
    except ValueError as exc:
        raise ConfigError(f"region must be 'r0:r1,c0:c1', got {text!r}") from exc
    if not (r0 < r1 and c0 < c1):
        raise ConfigError(f"empty region {text!r}")
    return r0, r1, c0, c1


def parse_bg_grid(text) -> tuple[float, float, float]:
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        try:
            vals = [float(v) for v in str(text).split(":")]
        except ValueError as exc:
            raise ConfigError(f"bg-grid must be 'start:stop:step', got {text!r}") from exc
    if len(vals) != 3:
        raise ConfigError(f"bg-grid must be 'start:stop:step', got {text!r}")
    return tuple(vals)


def estimator_list(name: str) -> tuple[str, ...]:
    if name == "both":
        return ESTIMATOR_NAMES
    if name not in ESTIMATOR_NAMES:
        raise ConfigError(f"unknown estimator {name!r}")
    return (name,)


def estimator_config(rc: RunConfig) -> EstimatorConfig:
    return EstimatorConfig(n_iter=int(rc.n_iter), bg_grid=parse_bg_grid(rc.bg_grid))


def detector_config(rc: RunConfig, estimator: str, threshold=None) -> DetectorConfig:
    sub = rc.subsample
    return DetectorConfig(
        estimator=estimator,
        estimator_cfg=estimator_config(rc),
        bg_window=int(rc.bg_window),
        guard_window=int(rc.guard_window),
        threshold=threshold,
        subsample=None if sub is None else int(sub),
        seed=int(rc.seed),
    )


def load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return {str(k).replace("-", "_"): v for k, v in doc.items()}


def resolve(command: str, flags: dict, config_path=None) -> RunConfig:
    opts = dict(DEFAULTS[command])
    if config_path is not None:
        file_opts = load_config_file(config_path)
        unknown = sorted(set(file_opts) - set(opts))
        if unknown:
            raise ConfigError(f"unknown keys for {command}: {', '.join(unknown)}")
        opts.update(file_opts)
    opts.update({k: v for k, v in flags.items() if v is not None and k in opts})
    return RunConfig(command, opts)


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

def load_library(rc: RunConfig, mask: BandMask):
    if rc.library is None:
        lib = synthetic_vehicle_library()
    else:
        lib, _ = read_spectral_library(rc.library)
    lib = apply_band_mask(lib, mask)
    if rc.endmembers:
        names = rc.endmembers if isinstance(rc.endmembers, list) else str(rc.endmembers).split(",")
        try:
            lib = lib.subset([n.strip() for n in names])
        except ValueError as exc:
            raise ConfigError(f"endmembers {names} not all in library {lib.names}") from exc
    return lib


def load_inputs(rc: RunConfig, need_cube: bool = False):
    mask = BandMask.parse(str(rc.band_mask))
    lib = load_library(rc, mask)
    cube = None
    if rc.options.get("cube"):
        cube = apply_band_mask(read_cube(rc.cube), mask)
        if cube.n_bands != lib.n_bands:
            raise DataError(f"cube has {cube.n_bands} bands after masking, library {lib.n_bands}")
    elif need_cube:
        raise ConfigError(f"{rc.command} needs --cube")
    return lib, cube


def scene_config(rc: RunConfig, n_bands: int, seed=None) -> SceneConfig:
    return SceneConfig(
        n_bands, int(rc.k_secondary), float(rc.noise_variance),
        seed=int(rc.seed if seed is None else seed),
    )


def checked_rows(rc: RunConfig, r: int) -> list[tuple[float, ...]]:
    rows = parse_rows(rc.rows)
    for row in rows:
        if len(row) != r:
            raise ConfigError(f"abundance row {row} has {len(row)} entries, library has {r}")
        try:
            validate_abundances(row, r)
        except DomainError as exc:
            raise ConfigError(f"invalid abundance row {row}: {exc}") from exc
    return rows


def metadata(rc: RunConfig, **extra) -> dict:
    return {"config": rc.to_dict(), "seed": rc.seed, "version": version_string(), **extra}


def _out_dir(rc: RunConfig) -> Path | None:
    if rc.out is None:
        return None
    d = Path(rc.out)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {d}: {exc}") from exc
    return d


def _fmt_of(path) -> str:
    return "json" if Path(path).suffix.lower() == ".json" else "csv"


def _write_json(path, doc):
    try:
        Path(path).write_text(json.dumps(json_safe(doc), indent=1, allow_nan=False))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(rc: RunConfig) -> int:
    lib, _ = load_inputs(rc)
    rows = checked_rows(rc, lib.r)
    report = simulate_rows(
        scene_config(rc, lib.n_bands), lib, rows, int(rc.trials), int(rc.h0_trials),
        float(rc.pfa), estimator_list(rc.estimator), estimator_config(rc), int(rc.threads),
    )
    summary = report.summary_records(lib.names)
    traces = report.trace_records()
    print(f"thresholds at pfa={report.pfa:g}: " + ", ".join(f"{e}={t:.6g}" for e, t in report.thresholds.items()))
    for rec in summary:
        print(
            f"row {rec['row']:2d} sum {rec['alpha_sum']:.2f} {rec['estimator']:<11s} "
            f"rmse {rec['rmse']:.4f} pd {rec['pd']:.3f} mean "
            + " ".join(f"{rec[f'mean_alpha_hat_{n}']:.3f}" for n in lib.names)
        )
    out = _out_dir(rc)
    if out is not None:
        meta = metadata(rc, thresholds=report.thresholds, endmembers=list(lib.names))
        write_records(summary, out / "summary.csv")
        write_records(traces, out / "traces.csv")
        _write_json(out / "report.json", {"metadata": meta, "summary": summary, "traces": traces})
    return EXIT_OK


def _estimate_records(ctx, y, lib, rc: RunConfig, alpha_true=None):
    recs = []
    wp = whiten(ctx, y, lib)
    for e in estimator_list(rc.estimator):
        res = glrt_statistic(ctx, y, lib, detector_config(rc, e))
        recs.append({
            "estimator": e,
            "alpha_hat": res.alpha_hat.tolist(),
            "statistic": res.statistic,
            "g": g_objective(wp, ctx, res.alpha_hat),
            "l1": res.trace.l1_per_iteration.tolist(),
            "delta_l1": res.trace.delta_l1.tolist(),
            "converged": res.trace.converged,
        })
    if rc.oracle:
        a = estimate_oracle(wp, ctx, lib, float(rc.grid_step))
        recs.append({"estimator": "oracle", "alpha_hat": a.tolist(), "g": g_objective(wp, ctx, a)})
    if alpha_true is not None:
        for rec in recs:
            rec["alpha_true"] = list(alpha_true)
    return recs


def cmd_estimate(rc: RunConfig) -> int:
    lib, cube = load_inputs(rc)
    alpha = None
    if rc.alpha is not None:
        alpha = parse_floats(rc.alpha) if not isinstance(rc.alpha, list) else [float(v) for v in rc.alpha]
        try:
            alpha = validate_abundances(alpha, lib.r).tolist()
        except (DomainError, DataError) as exc:
            raise ConfigError(f"invalid --alpha: {exc}") from exc
    if cube is not None:
        if rc.pixel is None:
            raise ConfigError("estimate on a cube needs --pixel row,col")
        r, c = parse_pixel(rc.pixel)
        dcfg = detector_config(rc, estimator_list(rc.estimator)[0])
        h = dcfg.bg_window // 2
        rows, cols, _ = cube.data.shape
        if not (h <= r < rows - h and h <= c < cols - h):
            raise DataError(f"pixel {(r, c)} has no complete {dcfg.bg_window}x{dcfg.bg_window} window")
        data = cube.data.astype(float)
        secondary = secondary_for_pixel(data, r, c, annulus_offsets(dcfg.bg_window, dcfg.guard_window), dcfg)
        y = data[r, c]
        if alpha is not None:
            y = synthesize_pixel(lib, alpha, y)
        source = {"cube": str(rc.cube), "pixel": [r, c], "filled": alpha is not None}
    else:
        if alpha is None:
            raise ConfigError("estimate needs --cube/--pixel or a synthetic --alpha")
        y, secondary = generate_scene(scene_config(rc, lib.n_bands), lib, alpha)
        source = {"synthetic": True}
    ctx = build_context(secondary)
    recs = _estimate_records(ctx, y, lib, rc, alpha)
    for rec in recs:
        print(f"{rec['estimator']:<11s} alpha_hat " + " ".join(f"{v:.4f}" for v in rec["alpha_hat"])
              + (f"  statistic {rec['statistic']:.6g}" if "statistic" in rec else "")
              + f"  g {rec['g']:.6g}")
    if rc.out is not None:
        _write_json(rc.out, {
            "metadata": metadata(rc, endmembers=list(lib.names), source=source, K=ctx.K),
            "records": recs,
        })
    return EXIT_OK


def _threshold_for(rc: RunConfig, estimator: str):
    if rc.threshold is not None:
        return float(rc.threshold)
    if rc.threshold_file is not None:
        try:
            doc = json.loads(Path(rc.threshold_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read threshold file {rc.threshold_file}: {exc}") from exc
        table = doc.get("thresholds", {})
        if estimator not in table:
            raise DataError(f"threshold file has no entry for {estimator}")
        return float(table[estimator])
    return None


def _per_estimator_path(out, estimator: str, multi: bool) -> Path:
    p = Path(out)
    return p.with_name(f"{p.stem}.{estimator}{p.suffix}") if multi else p


def cmd_detect(rc: RunConfig) -> int:
    lib, cube = load_inputs(rc, need_cube=True)
    region = None if rc.region is None else parse_region(rc.region)
    truth = None
    if rc.truth is not None:
        truth = np.zeros(cube.data.shape[:2], bool)
        for r, c in parse_pixels(rc.truth):
            truth[r, c] = True
    ests = estimator_list(rc.estimator)
    for e in ests:
        thr = _threshold_for(rc, e)
        grid = sliding_detect(cube, lib, detector_config(rc, e, thr), region, int(rc.threads))
        n_valid = int(grid.valid.sum())
        line = f"{e}: {n_valid} pixels"
        if thr is not None:
            line += f", {int(grid.decision.sum())} above threshold {thr:.6g}"
            line += f", false-alarm rate {false_alarm_rate(grid, threshold=thr, truth_mask=truth):.5f}"
        if rc.reference is not None:
            ref = parse_pixel(rc.reference)
            line += f", rate above {ref}: {false_alarm_rate(grid, reference=ref, truth_mask=truth):.5f}"
        print(line)
        if rc.out is not None:
            path = _per_estimator_path(rc.out, e, len(ests) > 1)
            write_results(grid, path, _fmt_of(path), metadata(rc, estimator=e, endmembers=list(lib.names)))
    return EXIT_OK


def cmd_calibrate(rc: RunConfig) -> int:
    lib, cube = load_inputs(rc)
    ests = estimator_list(rc.estimator)
    pfa = float(rc.pfa)
    stats = {}
    if cube is not None:
        if rc.region is None:
            raise ConfigError("calibrating on a cube needs --region r0:r1,c0:c1")
        region = parse_region(rc.region)
        for e in ests:
            grid = sliding_detect(cube, lib, detector_config(rc, e), region, int(rc.threads))
            stats[e] = grid.statistics(region)
            if stats[e].size == 0:
                raise DataError(f"region {region} holds no pixel with a complete window")
        source = {"cube": str(rc.cube), "region": list(region)}
    else:
        stats = h0_statistics(
            scene_config(rc, lib.n_bands), lib, int(rc.trials), ests, estimator_config(rc),
            int(rc.threads),
        )
        source = {"synthetic": True}
    thresholds = {e: calibrate_threshold(s, pfa) for e, s in stats.items()}
    for e, t in thresholds.items():
        print(f"{e}: threshold {t:.10g} from {stats[e].size} statistics at pfa={pfa:g}")
    if rc.out is not None:
        _write_json(rc.out, {
            "metadata": metadata(rc, source=source, endmembers=list(lib.names)),
            "pfa": pfa,
            "thresholds": thresholds,
            "n_statistics": {e: int(s.size) for e, s in stats.items()},
        })
    return EXIT_OK


def cmd_eval(rc: RunConfig) -> int:
    lib, _ = load_inputs(rc)
    rows = checked_rows(rc, lib.r)
    ests = estimator_list(rc.estimator)
    ecfg = estimator_config(rc)
    scene = scene_config(rc, lib.n_bands)
    records = []
    for k, row in enumerate(rows):
        batches = run_trials(scene, lib, row, int(rc.trials), ests, ecfg, row=k, threads=int(rc.threads))
        gaps = {e: [] for e in ests}
        if rc.oracle:
            for i in range(int(rc.trials)):
                put, sec = generate_scene(scene.with_seed(trial_seed(scene.seed, STREAM_H1, k, i)), lib, row)
                ctx = build_context(sec)
                wp = whiten(ctx, put, lib)
                g_or = g_objective(wp, ctx, estimate_oracle(wp, ctx, lib, float(rc.grid_step)))
                for e in ests:
                    gaps[e].append(g_objective(wp, ctx, batches[e].alpha_hat[i]) - g_or)
        for e, b in batches.items():
            rec = {"row": k, "estimator": e, "alpha_sum": float(sum(row)), "rmse": b.rmse}
            for n, a, m in zip(lib.names, row, b.mean_abs_error):
                rec[f"alpha_{n}"] = float(a)
                rec[f"mean_abs_error_{n}"] = float(m)
            if rc.oracle:
                rec["mean_g_gap"] = float(np.mean(gaps[e]))
                rec["max_g_gap"] = float(np.max(gaps[e]))
            records.append(rec)
            print(
                f"row {k:2d} sum {rec['alpha_sum']:.2f} {e:<11s} rmse {b.rmse:.4f}"
                + (f" max g gap to oracle {rec['max_g_gap']:.3g}" if rc.oracle else "")
            )
    out = _out_dir(rc)
    if out is not None:
        write_records(records, out / "eval.csv")
        _write_json(out / "eval.json", {"metadata": metadata(rc, endmembers=list(lib.names)), "records": records})
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "detect": cmd_detect,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------------------
# Argument parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file of option values (flags override)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--estimator", choices=("heuristic", "constrained", "both"))
    p.add_argument("--n-iter", type=int)
    p.add_argument("--bg-grid", help="background grid start:stop:step")
    p.add_argument("--band-mask", help="1-based bands to drop, e.g. '1-3,63-66', 'default' or 'none'")
    p.add_argument("--library", help="spectral library file (default: built-in synthetic library)")
    p.add_argument("--endmembers", help="comma-separated subset of library names")


def _add_scene(p):
    p.add_argument("--k-secondary", type=int)
    p.add_argument("--noise-variance", type=float)


def _add_window(p):
    p.add_argument("--bg-window", type=int)
    p.add_argument("--guard-window", type=int)
    p.add_argument("--subsample", type=int, help="random subset size of the background ring")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsglrt", description="GLRT detection and abundance estimation of sub-pixel targets."
    )
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Monte-Carlo study over abundance rows")
    _add_common(p)
    _add_scene(p)
    p.add_argument("--rows", help="'standard' or 'a,b,c;a,b,c'")
    p.add_argument("--trials", type=int)
    p.add_argument("--h0-trials", type=int)
    p.add_argument("--pfa", type=float)

    p = sub.add_parser("estimate", help="abundances of one pixel")
    _add_common(p)
    _add_scene(p)
    _add_window(p)
    p.add_argument("--cube", help="ENVI header of the cube")
    p.add_argument("--pixel", help="row,col (0-based)")
    p.add_argument("--alpha", help="abundances to synthesize or to fill into --pixel")
    p.add_argument("--oracle", action="store_const", const=True)
    p.add_argument("--grid-step", type=float)

    p = sub.add_parser("detect", help="sliding-window detection over a cube")
    _add_common(p)
    _add_window(p)
    p.add_argument("--cube", help="ENVI header of the cube")
    p.add_argument("--region", help="r0:r1,c0:c1 (half-open, 0-based)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--threshold-file", help="JSON written by 'calibrate'")
    p.add_argument("--reference", help="row,col of the reference pixel for false-alarm counting")
    p.add_argument("--truth", help="target pixels 'r,c;r,c' excluded from false-alarm counts")

    p = sub.add_parser("calibrate", help="threshold at a false-alarm probability")
    _add_common(p)
    _add_scene(p)
    _add_window(p)
    p.add_argument("--cube", help="ENVI header of the cube (default: simulate)")
    p.add_argument("--region", help="background region r0:r1,c0:c1")
    p.add_argument("--trials", type=int)
    p.add_argument("--pfa", type=float)

    p = sub.add_parser("eval", help="estimation accuracy, optionally against the grid oracle")
    _add_common(p)
    _add_scene(p)
    p.add_argument("--rows", help="'standard' or 'a,b,c;a,b,c'")
    p.add_argument("--trials", type=int)
    p.add_argument("--oracle", action="store_const", const=True)
    p.add_argument("--grid-step", type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        rc = resolve(args.command, flags, args.config)
        return COMMANDS[args.command](rc)
    except ConfigError as exc:
        print(f"hsglrt: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"hsglrt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SingularStatisticsError, DomainError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"hsglrt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
