"""``mode-sleuth`` command line: simulate, fit, stream, compare, spectrum.

Exit codes: 0 success, 1 numerical failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import estimator, spectral
from .data import ChannelData, parse_stream_line, read_csv, write_csv
from .errors import (
    InvalidInput,
    ModeSleuthError,
    NoConvergence,
    NoEquilibrium,
    NotPsd,
    SingularInnovation,
    SpectrumOverlap,
    UnstableSystem,
)
from .grid import GridParams, build_grid, pmu_observation
from .model import FOU, OU, Langevin, ModeModel, mode_realize
from .simulator import observe_channels, sample_path, uniform_times

log = logging.getLogger("mode_sleuth")

NUMERICAL = (NoConvergence, SingularInnovation, UnstableSystem, NotPsd, NoEquilibrium, SpectrumOverlap,
             np.linalg.LinAlgError, FloatingPointError)


class UsageError(Exception):
    pass


def _sub_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


def _dump(obj, path: str | None, fmt: str = "json") -> None:
    text = json.dumps(obj, indent=2, sort_keys=False) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _builtin_system(args):
    if args.model == "ou":
        p = OU(args.mu, args.sigma)
        return p.realize(), np.array([[1.0]]), ("x",), {"kind": "ou", "mu": args.mu, "sigma": args.sigma}
    if args.model == "langevin":
        p = Langevin(args.m, args.beta, args.k, args.sigma)
        return p.realize(), np.array([[1.0, 0.0]]), ("x",), {
            "kind": "langevin", "m": args.m, "beta": args.beta, "k": args.k, "sigma": args.sigma, "regime": p.regime}
    if args.model == "fou":
        p = FOU(args.inertia, args.gamma, args.j, args.sigma)
        # state (p, f); observe the frequency
        return p.realize(), np.array([[0.0, 1.0]]), ("f",), {
            "kind": "fou", "M": args.inertia, "gamma": args.gamma, "J": args.j, "sigma": args.sigma}
    if args.model == "grid":
        raise UsageError("--model grid needs --grid <config.json>")
    raise UsageError(f"unknown builtin model {args.model!r}")


def cmd_simulate(args) -> int:
    seeds = _sub_seeds(args.seed, 3)
    means = None
    if args.grid:
        params = GridParams.from_json(Path(args.grid).read_text(encoding="utf-8"))
        jgs = build_grid(params)
        names = params.node_names()
        pmus = None
        if args.pmus:
            index = {n: i for i, n in enumerate(names)}
            try:
                pmus = [index[p.strip()] for p in args.pmus.split(",")]
            except KeyError as exc:
                raise UsageError(f"unknown PMU node {exc}") from None
        obs = pmu_observation(jgs, pmus)
        sys_, B, channels = jgs.system, obs.Z, obs.channels
        meta_model = {"kind": "grid", "grid": params.to_dict(), "pmus": [names[p] for p in obs.nodes]}
    elif args.model_json:
        m = ModeModel.from_json(Path(args.model_json).read_text(encoding="utf-8"))
        sys_, B, means = mode_realize(m)
        channels = m.channel_names or tuple(f"ch{j}" for j in range(m.n_channels))
        meta_model = {"kind": "mode-model", "model": m.to_dict()}
    elif args.model:
        sys_, B, channels, meta_model = _builtin_system(args)
    else:
        raise UsageError("one of --model, --model-json or --grid is required")
    if args.n < 1 or not args.dt > 0:
        raise UsageError("--n must be >= 1 and --dt > 0")
    times = uniform_times(args.n, args.dt)
    path = sample_path(sys_, times, seed=seeds[0])
    M = B.shape[0]
    means = np.zeros(M) if means is None else means
    H = np.eye(M) * args.noise
    if args.model_json and not args.noise:
        H = ModeModel.from_json(Path(args.model_json).read_text(encoding="utf-8")).meas_noise
    mask = None
    if args.missing:
        if not 0 <= args.missing < 1:
            raise UsageError("--missing must be in [0, 1)")
        mask = np.random.default_rng(seeds[1]).random((args.n, M)) >= args.missing
    Y = observe_channels(path, B, means, H, seed=seeds[2], mask=mask)
    data = ChannelData(times, Y, channels)
    write_csv(args.out, data)
    meta = {
        "model": meta_model,
        "scheme": {"dt": args.dt, "n": args.n, "noise_variance": float(args.noise), "missing": args.missing,
                   "channels": list(channels)},
        "seed": args.seed,
    }
    Path(str(args.out) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    log.info("wrote %d rows to %s", len(data), args.out)
    return 0


# ---------------------------------------------------------------------------
# fit / compare
# ---------------------------------------------------------------------------


def _load_data(path: str) -> ChannelData:
    try:
        return read_csv(path)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except (ValueError, StopIteration) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def _fit_table(res: estimator.FitResult) -> str:
    m = res.model
    lines = [f"family: {m.spec.n_real} real, {m.spec.n_complex} complex; log evidence {res.log_evidence:.4f}; "
             f"laplace log Z {res.laplace_log_z if res.laplace_ok else float('nan'):.4f}; BIC {res.bic:.4f}"]
    amps = m.mode_amplitudes()
    cols = m.spec.mode_columns()
    lines.append(f"{'mode':>6} {'lambda/alpha':>14} {'omega':>12} {'amplitude':>12}  shape")
    for i, c in enumerate(cols):
        if len(c) == 1:
            rate, w = m.spec.real_rates[i], float("nan")
        else:
            rate, w = m.spec.complex_modes[i - m.spec.n_real]
        amp = float(np.sqrt(np.sum(amps[list(c)] ** 2)))
        shape = " ".join(f"{v:+.4f}" for v in m.B[:, c].ravel(order="F"))
        lines.append(f"{i:>6} {rate:>14.6g} {w:>12.6g} {amp:>12.6g}  {shape}")
    return "\n".join(lines)


def _fit_kw(args) -> dict:
    return {"starts": args.starts, "seed": args.seed}


def cmd_fit(args) -> int:
    data = _load_data(args.data)
    try:
        res = estimator.fit_mle(data, args.real, args.complex, **_fit_kw(args))
    except NoConvergence as exc:
        diag_path = args.diagnostics or (str(args.out) + ".diagnostics.json" if args.out else "fit.diagnostics.json")
        Path(diag_path).write_text(json.dumps({"error": str(exc), "diagnostics": exc.diagnostics}, indent=2, default=str),
                                   encoding="utf-8")
        print(f"error: {exc} (diagnostics in {diag_path})", file=sys.stderr)
        return 1
    report = res.to_report()
    report["seed"] = args.seed
    if args.format == "csv":
        lines = ["label,value,posterior_sd"]
        lines += [f"{l},{v:.17g},{s:.17g}" for l, v, s in zip(res.chart.labels(), res.theta_hat, res.posterior_sd)]
        text = "\n".join(lines) + "\n"
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
    else:
        _dump(report, args.out)
    print(_fit_table(res), file=sys.stderr if args.out is None else sys.stdout)
    return 0


def _candidates(args) -> list[tuple[int, int]]:
    if args.candidates:
        out = []
        for item in args.candidates.split(";"):
            r, c = item.split(",")
            out.append((int(r), int(c)))
        return out
    return [(r, c) for r in range(args.max_real + 1) for c in range(args.max_complex + 1)]


def cmd_compare(args) -> int:
    data = _load_data(args.data)
    cands = _candidates(args)
    if len(cands) < 1:
        raise UsageError("no candidates")
    post = estimator.compare_models(cands, data, **_fit_kw(args))
    rep = post.to_report()
    rep["seed"] = args.seed
    if args.format == "csv":
        lines = ["n_real,n_complex,log_z,method,bic,posterior"]
        for row in rep["candidates"]:
            lines.append(f"{row['n_real']},{row['n_complex']},{row['log_z']:.10g},{row['method']},{row['bic']:.10g},{row['posterior']:.6g}")
        text = "\n".join(lines) + "\n"
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
    else:
        _dump(rep, args.out)
    width = max(len(str(c)) for c in cands)
    table = [f"{'candidate':>{max(width, 9)}} {'log Z':>14} {'BIC':>14} {'posterior':>10}"]
    for row in rep["candidates"]:
        c = f"({row['n_real']},{row['n_complex']})"
        table.append(f"{c:>{max(width, 9)}} {row['log_z']:>14.4f} {row['bic']:>14.4f} {row['posterior']:>10.4f}")
    table.append(f"selected: ({post.selected[0]},{post.selected[1]})")
    print("\n".join(table), file=sys.stderr if args.out is None else sys.stdout)
    return 0


# ---------------------------------------------------------------------------
# stream
# ---------------------------------------------------------------------------


def _read_stream(fh, channels: Sequence[str] | None, counter: dict):
    """Yield ``(t, {name: value})``; malformed lines are counted and skipped."""
    last_t = -math.inf
    for lineno, line in enumerate(fh, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            t, vals = parse_stream_line(line)
            if channels is not None:
                unknown = set(vals) - set(channels)
                if unknown:
                    raise ValueError(f"unknown channel(s) {sorted(unknown)}")
            if not t > last_t:
                raise ValueError("time does not increase")
        except ValueError as exc:
            counter["skipped"] += 1
            print(f"warning: line {lineno} skipped: {exc}", file=sys.stderr)
            continue
        last_t = t
        yield t, vals


def cmd_stream(args) -> int:
    if not args.forget > 0:
        raise UsageError("--forget must be a positive rate")
    fh = sys.stdin if args.input in (None, "-") else open(args.input, "r", encoding="utf-8")
    counter = {"skipped": 0}
    out = sys.stdout
    try:
        if args.model:
            model0 = ModeModel.from_json(Path(args.model).read_text(encoding="utf-8"))
            channels = model0.channel_names or tuple(f"ch{j}" for j in range(model0.n_channels))
            model0 = ModeModel(model0.spec, model0.shapes, model0.noise_factor, model0.channel_means,
                               model0.meas_noise, tuple(channels))
            records = _read_stream(fh, channels, counter)
            backlog = []
        else:
            if args.real is None or args.complex is None:
                raise UsageError("give --model, or --real/--complex for a warm-up fit")
            records = _read_stream(fh, None, counter)
            backlog = []
            names: list[str] = []
            for t, vals in records:
                for n in vals:
                    if n not in names:
                        names.append(n)
                backlog.append((t, vals))
                if len(backlog) >= args.warmup:
                    break
            if len(backlog) < 64:
                raise UsageError("not enough records for the warm-up fit")
            channels = tuple(names)
            Y = np.array([[vals.get(c, np.nan) for c in channels] for _, vals in backlog])
            data = ChannelData(np.array([t for t, _ in backlog]), Y, channels)
            res = estimator.fit_mle(data, args.real, args.complex, starts=args.starts, seed=args.seed)
            model0 = res.model
        tracker = estimator.StreamTracker(model0, args.forget, args.step_rule, step_size=args.step_size,
                                          warmup=args.burn_in)

        def rows():
            for t, vals in backlog:
                yield t, vals
            yield from records

        for t, vals in rows():
            row = [vals.get(c, np.nan) for c in channels]
            upd = tracker.update(t, row)
            out.write(json.dumps(upd.to_json_dict()) + "\n")
    finally:
        if fh is not sys.stdin:
            fh.close()
    print(f"stream finished; {counter['skipped']} malformed line(s) skipped", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# spectrum
# ---------------------------------------------------------------------------


def cmd_spectrum(args) -> int:
    try:
        t, x, name = spectral.read_series_csv(args.data, args.column)
    except FileNotFoundError:
        raise UsageError(f"no such file: {args.data}") from None
    dt = spectral.check_uniform(t)
    if args.segments > 1:
        pg = spectral.welch(x, dt, segments=args.segments)
    else:
        pg = spectral.periodogram(x, dt)
    if args.out:
        spectral.write_periodogram_csv(args.out, pg)
    slopes = []
    for band in args.band or []:
        lo, hi = (float(v) for v in band.split(","))
        fit = spectral.loglog_slope(pg, (lo, hi))
        slopes.append({"band_hz": [lo, hi], "slope": fit.slope, "stderr": fit.stderr, "bins": fit.n_bins})
    report = {"column": name, "dt": dt, "segments": pg.segments, "df_hz": pg.df, "slopes": slopes}
    if args.format == "csv":
        print("f_lo,f_hi,slope,stderr,bins")
        for s in slopes:
            print(f"{s['band_hz'][0]:.10g},{s['band_hz'][1]:.10g},{s['slope']:.6f},{s['stderr']:.6f},{s['bins']}")
    else:
        print(json.dumps(report, indent=2))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mode-sleuth", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a process and write a channel CSV")
    s.add_argument("--model", choices=["ou", "langevin", "fou", "grid"], help="builtin process ('grid' needs --grid)")
    s.add_argument("--model-json", help="mode-model/1 JSON file")
    s.add_argument("--grid", help="grid-model/1 JSON file")
    s.add_argument("--pmus", help="comma-separated PMU node names (grid only)")
    s.add_argument("--mu", type=float, default=1.0)
    s.add_argument("--sigma", type=float, default=math.sqrt(2))
    s.add_argument("--m", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=0.2)
    s.add_argument("--k", type=float, default=1.0)
    s.add_argument("--gamma", type=float, default=1 / math.e, help="FOU damping (Gamma = gamma / M)")
    s.add_argument("--inertia", type=float, default=1.0, help="FOU inertia M")
    s.add_argument("--j", type=float, default=math.e**2, help="FOU imbalance relaxation rate")
    s.add_argument("--dt", type=float, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.0, help="measurement noise variance per channel")
    s.add_argument("--missing", type=float, default=0.0, help="fraction of entries dropped at random")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    def fit_common(p):
        p.add_argument("--data", required=True)
        p.add_argument("--starts", type=int, default=8)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")
        p.add_argument("--format", choices=["json", "csv"], default="json")

    f = sub.add_parser("fit", help="fit a mode model to a channel CSV")
    fit_common(f)
    f.add_argument("--real", type=int, required=True)
    f.add_argument("--complex", type=int, required=True)
    f.add_argument("--diagnostics", help="where to write diagnostics on failure")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("compare", help="Bayesian comparison of mode counts")
    fit_common(c)
    c.add_argument("--max-real", type=int, default=1)
    c.add_argument("--max-complex", type=int, default=1)
    c.add_argument("--candidates", help="explicit list, e.g. '1,0;0,1;1,1'")
    c.set_defaults(func=cmd_compare)

    st = sub.add_parser("stream", help="track modes over a record stream")
    st.add_argument("--forget", type=float, required=True, help="forgetting rate (1/time)")
    st.add_argument("--input", help="record file (default stdin)")
    st.add_argument("--model", help="initial mode-model/1 JSON")
    st.add_argument("--real", type=int)
    st.add_argument("--complex", type=int)
    st.add_argument("--warmup", type=int, default=1000, help="records used for the initial fit")
    st.add_argument("--burn-in", type=float, default=None, help="time before parameter steps start")
    st.add_argument("--step-rule", choices=["diagonal", "full", "none"], default="diagonal")
    st.add_argument("--step-size", type=float, default=1.0)
    st.add_argument("--starts", type=int, default=4)
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(func=cmd_stream)

    sp = sub.add_parser("spectrum", help="Hann periodogram and log-log slopes")
    sp.add_argument("--data", required=True)
    sp.add_argument("--column")
    sp.add_argument("--segments", type=int, default=1, help="Welch segments (1 = single window)")
    sp.add_argument("--band", action="append", help="slope band 'f_lo,f_hi' in Hz (repeatable)")
    sp.add_argument("--out")
    sp.add_argument("--format", choices=["json", "csv"], default="json")
    sp.set_defaults(func=cmd_spectrum)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (ModeSleuthError, ValueError, KeyError, json.JSONDecodeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
