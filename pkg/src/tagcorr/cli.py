"""``tagcorr`` command line.

Exit codes: 0 ok, 2 bad config or usage, 3 I/O failure, 4 no significant
offset, 5 digest mismatch, 6 no coincidence peak.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, io
from .clockstats import overlapping_adev
from .correlation import (
    NoPeakError,
    NoSignificantOffsetError,
    coarse_correlation,
    coincidence_histogram,
    compensate,
    fit_peak,
    track_drift,
)
from .simulator import run_experiment

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NO_OFFSET = 4
EXIT_DIGEST = 5
EXIT_NO_PEAK = 6


class CliError(Exception):
    def __init__(self, code: int, message: str, payload: dict | None = None):
        super().__init__(message)
        self.code = code
        self.payload = payload


def _digest_inputs(paths: dict) -> dict:
    digests = {k: io.sha256_file(p) for k, p in paths.items()}
    combined = hashlib.sha256("".join(f"{k}={digests[k]};" for k in sorted(digests)).encode())
    return {"inputs": digests, "input_digest": combined.hexdigest()}


def _provenance(inputs: dict, n_events: int, seconds: float) -> dict:
    return {
        "tool": "tagcorr",
        "version": __version__,
        **_digest_inputs(inputs),
        "timing": {"seconds": round(seconds, 6),
                   "events_per_s": round(n_events / seconds, 1) if seconds > 0 else None},
    }


def _read(path):
    try:
        return io.read_stream(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from None
    except io.StreamFormatError as exc:
        raise CliError(EXIT_USAGE, f"{path}: {exc}") from None


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from None
    return out


def _write(path, data):
    try:
        io.atomic_write(path, data)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from None


def _fine_params(args) -> dict:
    span = int(round(2 * args.span_ns * 1000))
    bin_ps = int(args.bin_ps)
    if bin_ps < 1 or span % bin_ps:
        raise CliError(EXIT_USAGE, "--span-ns window must be a whole number of --bin-ps bins")
    return {
        "bin_width": bin_ps,
        "span": span,
        "coarse_bin": int(round(args.coarse_bin_ns * 1000)),
        "search_range": int(round(args.coarse_range_us * 1_000_000)),
    }


def _fit_dict(fit) -> dict:
    return {
        "center_ps": fit.center,
        "fwhm_ps": fit.fwhm,
        "amplitude": fit.amplitude,
        "background": fit.background,
        "residual_rms": fit.residual_rms,
        "converged": bool(fit.converged),
    }


def analyse_pair(a, b, params: dict):
    """Coarse search, histogram and fit with CLI error mapping. Returns ``(coarse, hist, fit)``."""
    search = min(params["search_range"], a.duration, b.duration) or params["search_range"]
    try:
        coarse = coarse_correlation(a, b, params["coarse_bin"], search)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    if coarse.significance < 3.0:
        err = NoSignificantOffsetError(coarse.offset, coarse.significance)
        raise CliError(EXIT_NO_OFFSET, str(err), {
            "error": "no significant offset",
            "best_offset_ps": coarse.offset,
            "significance": coarse.significance,
            "peak_counts": coarse.peak_counts,
            "background_per_lag": coarse.background,
            "blocks_used": coarse.n_blocks,
        })
    hist = coincidence_histogram(a, b, coarse.offset, params["span"], params["bin_width"])
    try:
        fit = fit_peak(hist)
    except NoPeakError as exc:
        raise CliError(EXIT_NO_PEAK, str(exc)) from None
    return coarse, hist, fit


# --- commands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    try:
        doc = io.load_config_dict(args.config)
    except (OSError, KeyError) as exc:
        raise CliError(EXIT_IO, f"cannot read config {args.config}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"config is not valid JSON: {exc}") from None
    try:
        cfg = io.config_from_dict(doc, seed=args.seed)
    except io.ConfigError as exc:
        raise CliError(EXIT_USAGE, f"invalid config at {exc.path}: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"invalid config: {exc}") from None

    out = _outdir(args.out)
    t0 = time.perf_counter()
    a, b = run_experiment(cfg)
    elapsed = time.perf_counter() - t0
    files = {"a": out / "a.ttg", "b": out / "b.ttg"}
    _write(files["a"], io.encode_stream(a))
    _write(files["b"], io.encode_stream(b))

    snapshot = io.config_to_dict(cfg)
    manifest = {
        "tool": "tagcorr",
        "version": __version__,
        "command": "simulate",
        "config": snapshot,
        "config_digest": hashlib.sha256(json.dumps(snapshot, sort_keys=True).encode()).hexdigest(),
        "seed": cfg.seed,
        "outputs": {k: {"path": p.name, "sha256": io.sha256_file(p), "events": len(s)}
                    for (k, p), s in zip(files.items(), (a, b))},
        "timing": {"seconds": round(elapsed, 6),
                   "events_per_s": round((len(a) + len(b)) / elapsed, 1) if elapsed > 0 else None},
    }
    _write(out / "manifest.json", io.dumps_json(manifest))
    print(f"wrote {len(a)} + {len(b)} events to {out}")
    return EXIT_OK


def cmd_correlate(args) -> int:
    params = _fine_params(args)
    a, b = _read(args.stream_a), _read(args.stream_b)
    out = _outdir(args.out)
    t0 = time.perf_counter()
    try:
        coarse, hist, fit = analyse_pair(a, b, params)
    except CliError as exc:
        if exc.payload is not None:
            _write(out / "diagnostic.json", io.dumps_json(exc.payload))
            print(json.dumps(exc.payload, sort_keys=True))
        raise
    elapsed = time.perf_counter() - t0
    _write(out / "histogram.csv", io.histogram_csv(hist))
    result = {
        "fit": _fit_dict(fit),
        "coarse_offset_ps": coarse.offset,
        "coarse_significance": coarse.significance,
        "histogram": {"center_offset_ps": hist.center_offset, "bin_width_ps": hist.bin_width,
                      "span_ps": hist.span, "n_a": hist.n_a, "n_b": hist.n_b,
                      "acq_duration_ps": hist.acq_duration},
        "manifest": _provenance({"a": args.stream_a, "b": args.stream_b}, len(a) + len(b), elapsed),
    }
    _write(out / "fit.json", io.dumps_json(result))
    print(f"fwhm_ps={fit.fwhm:.3f} center_ps={fit.center:.3f}")
    return EXIT_OK


def cmd_drift(args) -> int:
    params = _fine_params(args)
    a, b = _read(args.stream_a), _read(args.stream_b)
    out = _outdir(args.out)
    t0 = time.perf_counter()
    try:
        track = track_drift(a, b, args.slice_s, **params)
    except ValueError as exc:
        raise CliError(EXIT_NO_OFFSET, f"drift tracking failed: {exc}") from None
    elapsed = time.perf_counter() - t0

    rows = ["wall_time_s,center_ps,fwhm_ps"]
    rows += [f"{io._num(t)},{io._num(c)},{io._num(w)}" for t, c, w in track.slice_centers]
    _write(out / "slices.csv", "\n".join(rows) + "\n")
    result = {
        "slice_duration_s": track.slice_duration,
        "slope_ps_per_s": track.slope_ps_per_s,
        "fitted_y": track.fitted_y,
        "fitted_intercept_ps": track.fitted_intercept,
        "fit_residual_rms_ps": track.fit_residual_rms,
        "n_slices": int(track.wall_time.size),
        "failed_slices": [{"wall_time_s": t, "reason": r} for t, r in track.failed_slices],
        "manifest": _provenance({"a": args.stream_a, "b": args.stream_b}, len(a) + len(b), elapsed),
    }
    msg = f"slope_ps_per_s={track.slope_ps_per_s:.4f}"
    if args.compensate:
        b2 = compensate(b, track)
        _write(out / "b_compensated.ttg", io.encode_stream(b2))
        before = _safe_fwhm(a, b, params)
        after = _safe_fwhm(a, b2, params)
        result["compensation"] = {"stream": "b_compensated.ttg",
                                  "fwhm_before_ps": before, "fwhm_after_ps": after}
        msg += f" fwhm_before_ps={before} fwhm_after_ps={after}"
    _write(out / "drift.json", io.dumps_json(result))
    print(msg)
    return EXIT_OK


def _safe_fwhm(a, b, params):
    try:
        return analyse_pair(a, b, params)[2].fwhm
    except CliError:
        return None


def cmd_adev(args) -> int:
    try:
        phase = io.read_phase_csv(args.phase_csv)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {args.phase_csv}: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"{args.phase_csv}: {exc}") from None
    m_values = None
    if args.m_list:
        try:
            m_values = [int(m) for m in args.m_list.split(",") if m.strip()]
        except ValueError:
            raise CliError(EXIT_USAGE, "--m-list must be comma-separated integers") from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            curve = overlapping_adev(phase, m_values)
        except ValueError as exc:
            raise CliError(EXIT_USAGE, str(exc)) from None
    for w in caught:
        print(f"note: {w.message}", file=sys.stderr)
    text = io.adev_csv(curve)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _load_manifest(path: Path):
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"{path}: not JSON ({exc})") from None
    if manifest.get("command") != "simulate" or "outputs" not in manifest:
        raise CliError(EXIT_USAGE, f"{path}: not a simulate manifest")
    streams = {}
    for key in ("a", "b"):
        entry = manifest["outputs"][key]
        file = path.parent / entry["path"]
        try:
            digest = io.sha256_file(file)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read {file}: {exc}") from None
        if digest != entry["sha256"]:
            raise CliError(EXIT_DIGEST, f"{file}: digest mismatch with {path}")
        streams[key] = io.read_stream(file)
    return manifest, streams


def cmd_report(args) -> int:
    if not args.manifests:
        raise CliError(EXIT_USAGE, "report needs at least one manifest")
    params = _fine_params(args)
    out = _outdir(args.out)
    loaded = [(Path(p), *_load_manifest(Path(p))) for p in args.manifests]

    report = {"tool": "tagcorr", "version": __version__, "figures": {},
              "manifests": {str(p): io.sha256_file(p) for p, _, _ in loaded}}
    by_label = {}
    for path, manifest, streams in loaded:
        by_label.setdefault(manifest["config"].get("label", ""), []).append((path, manifest, streams))

    for label in ("a", "b"):
        if label in by_label:
            path, _, s = by_label[label][0]
            _, hist, fit = analyse_pair(s["a"], s["b"], params)
            _write(out / f"fig_{label}.csv", io.histogram_csv(hist))
            report["figures"][label] = {"manifest": str(path), **_fit_dict(fit)}

    if "c" in by_label:
        samples = sorted(by_label["c"], key=lambda e: e[1]["config"]["source"].get("start", 0))
        rows_c = ["sample,start_s,fwhm_ps,center_ps"]
        rows_d = ["sample,start_s,slope_ps_per_s"]
        starts, slopes, series = [], [], []
        for k, (path, manifest, s) in enumerate(samples, start=1):
            start = float(manifest["config"]["source"].get("start", 0))
            _, _, fit = analyse_pair(s["a"], s["b"], params)
            rows_c.append(f"s{k},{io._num(start)},{io._num(fit.fwhm)},{io._num(fit.center)}")
            entry = {"sample": f"s{k}", "start_s": start, "fwhm_ps": fit.fwhm,
                     "center_ps": fit.center, "manifest": str(path)}
            try:
                track = track_drift(s["a"], s["b"], args.slice_s, **params)
            except ValueError:
                track = None
            if track is not None:
                rows_d.append(f"s{k},{io._num(start)},{io._num(track.slope_ps_per_s)}")
                starts.append(start)
                slopes.append(track.slope_ps_per_s)
                entry["slope_ps_per_s"] = track.slope_ps_per_s
            series.append(entry)
        _write(out / "fig_c.csv", "\n".join(rows_c) + "\n")
        _write(out / "fig_d.csv", "\n".join(rows_d) + "\n")
        report["figures"]["c"] = series
        d_fit = {"samples": len(slopes)}
        if len(slopes) >= 2 and len(set(starts)) >= 2:
            rate, icpt = np.polyfit(starts, slopes, 1)
            d_fit.update({"drift_ps_per_s2": float(rate), "slope_at_zero_ps_per_s": float(icpt),
                          "freq_drift_rate_per_s": float(rate) * 1e-12})
        report["figures"]["d"] = d_fit

    _write(out / "report.json", io.dumps_json(report))
    print(f"report written to {out}")
    return EXIT_OK


# --- entry point -------------------------------------------------------------


def _add_fine_flags(p):
    p.add_argument("--bin-ps", type=int, default=5, help="fine histogram bin width (ps)")
    p.add_argument("--span-ns", type=float, default=50.0, help="fine window half-width (ns)")
    p.add_argument("--coarse-bin-ns", type=float, default=10.0, help="coarse search bin (ns)")
    p.add_argument("--coarse-range-us", type=float, default=1000.0,
                   help="coarse search half-range (us)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tagcorr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tagcorr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate two tagger streams from a config")
    p.add_argument("--config", required=True, help="config JSON path or preset name")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correlate", help="find and fit the coincidence peak")
    p.add_argument("stream_a")
    p.add_argument("stream_b")
    p.add_argument("--out", required=True, help="output directory")
    _add_fine_flags(p)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("drift", help="track the peak centre over time")
    p.add_argument("stream_a")
    p.add_argument("stream_b")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--slice-s", type=float, default=1.0, help="slice length (s)")
    p.add_argument("--compensate", action="store_true", help="also write a retimed stream B")
    _add_fine_flags(p)
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("adev", help="overlapping Allan deviation of a phase CSV")
    p.add_argument("phase_csv")
    p.add_argument("--m-list", default=None, help="comma-separated averaging factors")
    p.add_argument("--out", default=None, help="output CSV (default stdout)")
    p.set_defaults(func=cmd_adev)

    p = sub.add_parser("report", help="assemble figure data from simulate manifests")
    p.add_argument("manifests", nargs="*")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--slice-s", type=float, default=1.0, help="slice length for drift fits (s)")
    _add_fine_flags(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"tagcorr {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
