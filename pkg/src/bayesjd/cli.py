"""Command-line driver: ``bayesjd <subcommand> ...``.

Every subcommand takes ``--seed``.  Data generators draw from
``default_rng(seed)``; chain ``i`` draws from the stream spawned off the
same seed with key ``(i,)``.  Outputs never contain wall-clock values, so a
repeated invocation writes byte-identical files.

Exit codes: 0 success, 2 bad arguments or data, 3 I/O failure,
4 numerical abort (non-finite likelihood).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from bayesjd import __version__
from bayesjd.baseline import jacobi_jd, select_columns
from bayesjd.bingham import SCHEMES, ThetaScheme, sample_vector_bingham
from bayesjd.diagnostics import api, ess, ess_table, gelman_rubin, model_select, summarize
from bayesjd.gibbs import (
    INIT_METHODS,
    NumericalAbort,
    SamplerConfig,
    chain_seed_sequence,
    map_estimate,
    read_states_jsonl,
    read_trace_csv,
    run_chains,
    write_states_jsonl,
    write_trace_csv,
)
from bayesjd.model import HyperParams, MatrixSet
from bayesjd.synth import (
    class_covariances,
    csp_filter,
    gen_bss_problem,
    gen_cspa_dataset,
    gen_jd_dataset,
)

logger = logging.getLogger("bayesjd")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

TRACE_FILE = "trace.csv"
STATES_FILE = "states.jsonl"
SUMMARY_FILE = "summary.json"
DUMP_FILE = "abort_dump.json"


class UsageError(Exception):
    """Bad argument values or unusable input data (exit 2)."""


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)


def _read_json(path) -> dict:
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as err:
            raise UsageError(f"{path}: not valid JSON ({err})") from err


def _matrix_json(c: MatrixSet) -> str:
    return json.dumps(c.to_dict()) + "\n"


def _load_data(path) -> MatrixSet:
    d = _read_json(path)
    try:
        return MatrixSet.from_dict(d)
    except (KeyError, TypeError, ValueError) as err:
        raise UsageError(f"{path}: not a matrix set ({err})") from err


def _load_truth(path, n=None) -> np.ndarray:
    d = _read_json(path)
    try:
        flat = np.asarray(d["b_true"], dtype=float)
        rows = int(d.get("n", n or 0)) or None
    except (KeyError, TypeError, ValueError) as err:
        raise UsageError(f"{path}: not a truth file ({err})") from err
    if rows is None or flat.size % rows:
        raise UsageError(f"{path}: b_true does not reshape to {rows} rows")
    b = flat.reshape(rows, -1)
    if n is not None and rows != n:
        raise UsageError(f"truth has {rows} rows but the data are {n} x {n}")
    return b


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return repr(float(x))


def _finite_or_none(x):
    return float(x) if x is not None and math.isfinite(x) else None


# -- sampler plumbing -----------------------------------------------------------


def _config(args) -> SamplerConfig:
    hyper = None
    if args.a is not None or args.b is not None:
        hyper = HyperParams([args.a if args.a is not None else 1e-3], [args.b if args.b is not None else 1e-3])
    try:
        return SamplerConfig(
            n_samples=args.nsamps,
            burn_in=args.burnin,
            thin=args.thin,
            scheme=ThetaScheme(args.scheme),
            hyper=hyper,
            seed=args.seed,
            n_chains=args.chains,
            init=args.init,
            n_jobs=args.jobs,
        )
    except ValueError as err:
        raise UsageError(str(err)) from err


def _sample(c: MatrixSet, m: int, config: SamplerConfig, dump_dir: Path | None):
    if not 1 <= m <= c.n:
        raise UsageError(f"--m must be between 1 and N={c.n}")
    try:
        return run_chains(c, m, config)
    except NumericalAbort as err:
        if dump_dir is not None:
            path = dump_dir / DUMP_FILE
            _write_text(path, _dump_json(err.dump))
            print(f"numerical abort: {err}; state dump written to {path}", file=sys.stderr)
        else:
            print(f"numerical abort: {err}", file=sys.stderr)
        raise


def _series_ess(x):
    return ess(x) if len(x) >= 100 else None


def _chain_diagnostics(logliks, burn_in) -> dict:
    """ESS of each chain's post-burn-in loglik series and R over chains."""
    per_chain = [_series_ess(np.asarray(x)[burn_in:]) for x in logliks]
    r_hat = None
    if len(logliks) >= 2 and len(logliks[0]) >= 100:
        r_hat = _finite_or_none(gelman_rubin(logliks))
    known = [v for v in per_chain if v is not None]
    return {
        "ess": {"loglik": {"per_chain": per_chain, "min": min(known) if known else None}},
        "r_hat": r_hat,
    }


def _api_stats(states, map_state, b_true) -> dict:
    vals = [api(s.b, b_true) for s in states]
    out = summarize(vals)
    out["map"] = api(map_state.b, b_true)
    return out


# -- subcommands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    if args.kind == "jd":
        if not 1 <= args.m <= args.n or args.k < 1 or args.sigma2 < 0:
            raise UsageError("need 1 <= m <= n, k >= 1 and sigma2 >= 0")
        inst = gen_jd_dataset(args.n, args.m, args.k, args.sigma2, rng)
        _write_text(out / "data.json", _matrix_json(inst.c))
        _write_text(out / "truth.json", _dump_json({"kind": "jd", **inst.truth_dict(args.seed)}))
        print(f"jd: K={args.k} matrices of size {args.n}x{args.n}, M={args.m}, sigma2={args.sigma2} -> {out}")
    elif args.kind == "bss":
        if args.k < 1 or args.sigma < 0:
            raise UsageError("need k >= 1 lagged matrices and sigma >= 0")
        prob = gen_bss_problem(rng, n_sources=args.n, n_samples=args.samples, sigma=args.sigma, max_lag=args.k)
        g = prob.global_truth
        truth = {"kind": "bss", "n": g.shape[0], "m": g.shape[1], "b_true": g.ravel().tolist(), "seed": args.seed}
        _write_text(out / "data.json", _matrix_json(prob.c))
        _write_text(out / "truth.json", _dump_json(truth))
        print(f"bss: {args.n} sources, {args.samples} samples, sigma={args.sigma}, K={args.k} lagged covariances -> {out}")
    else:
        y1, y2, a = gen_cspa_dataset(rng, n_per_class=args.samples_per_class)
        w, mean, covs = class_covariances(y1, y2)
        rows = [[j + 1, _fmt(p[0]), _fmt(p[1])] for j, y in enumerate((y1, y2)) for p in y.T]
        truth = {"kind": "cspa", "a": a.ravel().tolist(), "w": w.ravel().tolist(), "mean": mean.ravel().tolist(), "seed": args.seed}
        _write_text(out / "data.json", _matrix_json(covs))
        _write_text(out / "samples.csv", _csv_text(["class", "y1", "y2"], rows))
        _write_text(out / "truth.json", _dump_json(truth))
        print(f"cspa: {y1.shape[1]} + {y2.shape[1]} samples in 2 classes -> {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    c = _load_data(args.data)
    config = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    traces = _sample(c, args.m, config, out)
    runtime = time.perf_counter() - t0
    write_trace_csv(traces, out / TRACE_FILE)
    write_states_jsonl(traces, out / STATES_FILE)
    summary = {
        "n": c.n,
        "m": args.m,
        "k": c.k,
        "chains": config.n_chains,
        "nsamps": config.n_samples,
        "burnin": config.burn_in,
        "thin": config.thin,
        "scheme": config.scheme.tag,
        "init": config.init,
        "seed": config.seed,
        "retained_per_chain": [len(t.states) for t in traces],
        "reorthonormalizations": [t.reorth_count for t in traces],
        "map_logpost": max(max(t.state_logpost) for t in traces if t.state_logpost),
        **_chain_diagnostics([t.loglik for t in traces], config.burn_in),
    }
    _write_text(out / SUMMARY_FILE, _dump_json(summary))
    r = summary["r_hat"]
    print(f"{config.n_chains} chain(s) x {config.n_samples} iterations, R = {r if r is None else round(r, 4)} -> {out}")
    print(f"runtime {runtime:.1f} s", file=sys.stderr)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    trace_dir = Path(args.trace)
    traces = read_trace_csv(trace_dir / TRACE_FILE)
    recs = read_states_jsonl(trace_dir / STATES_FILE)
    summary_path = trace_dir / SUMMARY_FILE
    logliks = [traces[ch]["loglik"] for ch in sorted(traces)]
    burn_in = _read_json(summary_path)["burnin"] if summary_path.exists() else len(logliks[0]) // 2
    result = _chain_diagnostics(logliks, burn_in)
    if args.truth:
        if not recs:
            raise UsageError("no retained states to score")
        n = recs[0]["state"].b.shape[0]
        b_true = _load_truth(args.truth, n)
        if b_true.shape[1] != recs[0]["state"].m:
            raise UsageError(f"truth has {b_true.shape[1]} columns but the states have {recs[0]['state'].m}")
        best, best_lp = None, -math.inf
        for rec in recs:
            if best is None or rec["logpost"] > best_lp:
                best, best_lp = rec["state"], rec["logpost"]
        result["api"] = _api_stats([r["state"] for r in recs], best, b_true)
    sys.stdout.write(_dump_json(result))
    return EXIT_OK


def _parse_range(text, n) -> list[int]:
    try:
        if ".." in text:
            lo, hi = text.split("..")
            ms = list(range(int(lo), int(hi) + 1))
        else:
            ms = [int(v) for v in text.split(",")]
    except ValueError as err:
        raise UsageError(f"bad --m-range {text!r}; use LO..HI or a comma list") from err
    if not ms or min(ms) < 1 or max(ms) > n:
        raise UsageError(f"--m-range must lie within 1..{n}")
    return ms


def cmd_model_select(args) -> int:
    c = _load_data(args.data)
    ms = _parse_range(args.m_range or f"1..{c.n}", c.n)
    config = _config(args)
    best, scores = model_select(c, ms, config)
    if not all(math.isfinite(s) for s in scores):
        raise NumericalAbort("non-finite BIC score", {"scores": scores})
    table = _csv_text(["m", "bic_log_marginal"], [[m, _fmt(s)] for m, s in zip(ms, scores)])
    if args.out:
        out = Path(args.out)
        _write_text(out / "bic.csv", table)
        _write_text(out / "model_select.json", _dump_json({"chosen_m": best, "m": ms, "bic_log_marginal": scores}))
    sys.stdout.write(table)
    print(f"chosen m = {best}", file=sys.stderr)
    return EXIT_OK


def _jacobi_estimate(c: MatrixSet, m: int) -> np.ndarray:
    v = jacobi_jd(c)
    return v if m == c.n else select_columns(v, c, m)


def cmd_compare(args) -> int:
    c = _load_data(args.data)
    b_true = _load_truth(args.truth, c.n)
    m = b_true.shape[1]
    traces = _sample(c, m, _config(args), Path(args.out) if args.out else None)
    state = map_estimate(traces)
    result = {
        "jacobi_api": api(_jacobi_estimate(c, m), b_true),
        "gibbs_map_api": api(state.b, b_true),
        "gibbs_api_stats": _api_stats([s for t in traces for s in t.states], state, b_true),
    }
    sys.stdout.write(_dump_json(result))
    return EXIT_OK


def cmd_bingham_bench(args) -> int:
    if args.m < 2 or args.nsamps < 100:
        raise UsageError("need --m >= 2 and --nsamps >= 100")
    schemes = [s.strip() for s in args.schemes.split(",") if s.strip()]
    bad = [s for s in schemes if s not in SCHEMES]
    if bad or not schemes:
        raise UsageError(f"unknown scheme(s) {bad}; choose from {SCHEMES}")
    g = np.random.default_rng(args.seed).standard_normal((args.m, args.m))
    sigma = 0.5 * (g + g.T)
    lam = np.linalg.eigvalsh(sigma)
    rows, bounds = [], []
    for i, tag in enumerate(schemes):
        rng = np.random.default_rng(chain_seed_sequence(args.seed, i))
        xs = sample_vector_bingham(sigma, args.nsamps, args.burnin, ThetaScheme(tag), rng)
        t = ess_table(xs)
        rows.append([tag, _fmt(t["min"]), _fmt(t["median"]), _fmt(t["mean"]), _fmt(t["max"])])
        q = np.einsum("ti,ij,tj->t", xs, sigma, xs)
        inside = bool(q.min() >= lam[0] - 1e-10 and q.max() <= lam[-1] + 1e-10)
        bounds.append([tag, _fmt(q.min()), _fmt(q.max()), _fmt(lam[0]), _fmt(lam[-1]), str(inside).lower()])
    table = _csv_text(["scheme", "min", "median", "mean", "max"], rows)
    if args.out:
        out = Path(args.out)
        _write_text(out / "ess.csv", table)
        _write_text(out / "bounds.csv", _csv_text(["scheme", "q_min", "q_max", "lambda_min", "lambda_max", "inside"], bounds))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_bss_demo(args) -> int:
    prob = gen_bss_problem(np.random.default_rng(args.seed))
    c, g = prob.c, prob.global_truth
    out = Path(args.out) if args.out else None
    traces = _sample(c, c.n, _config(args), out)
    state = map_estimate(traces)
    result = {
        "jacobi_api": api(jacobi_jd(c), g),
        "gibbs_map_api": api(state.b, g),
        "gibbs_api_stats": _api_stats([s for t in traces for s in t.states], state, g),
        "mixing_condition_number": float(np.linalg.cond(prob.mixing)),
    }
    if out:
        _write_text(out / "bss.json", _dump_json(result))
    sys.stdout.write(_dump_json(result))
    return EXIT_OK


def cspa_pipeline(seed, config: SamplerConfig):
    """Whiten two-class data, sample ``B`` for the two class covariances and filter.

    Columns of the MAP ``B`` are ordered by the class-1 eigenvalue, ascending,
    so the first filtered coordinate is the low-variance one for class 1.
    """
    y1, y2, a = gen_cspa_dataset(np.random.default_rng(seed))
    w, mean, covs = class_covariances(y1, y2)
    state = map_estimate(run_chains(covs, 2, config))
    b = state.b[:, np.argsort(state.u[0], kind="stable")]
    f1, f2 = csp_filter(b, w, y1, mean), csp_filter(b, w, y2, mean)
    pooled = np.hstack([f1, f2])
    pooled_cov = pooled @ pooled.T / pooled.shape[1]
    return {
        "filtered": (f1, f2),
        "variances": [f1.var(axis=1), f2.var(axis=1)],
        "pooled_offdiag": float(np.max(np.abs(pooled_cov - np.diag(np.diag(pooled_cov))))),
        "b": b,
        "a": a,
    }


def cmd_cspa_demo(args) -> int:
    res = cspa_pipeline(args.seed, _config(args))
    v1, v2 = res["variances"]
    result = {
        "class_variances": {"class_1": v1.tolist(), "class_2": v2.tolist()},
        "opposite_ordering": bool((v1[0] < v1[1]) and (v2[0] > v2[1])),
        "pooled_offdiag_cov": res["pooled_offdiag"],
    }
    if args.out:
        out = Path(args.out)
        f1, f2 = res["filtered"]
        rows = [[j + 1, _fmt(p[0]), _fmt(p[1])] for j, f in enumerate((f1, f2)) for p in f.T]
        _write_text(out / "filtered.csv", _csv_text(["class", "f1", "f2"], rows))
        var_rows = [[j + 1, _fmt(v[0]), _fmt(v[1])] for j, v in enumerate((v1, v2))]
        _write_text(out / "variances.csv", _csv_text(["class", "var_1", "var_2"], var_rows))
    sys.stdout.write(_dump_json(result))
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def _seed(text) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def _sampler_flags(p, nsamps=5000, burnin=2500, chains=1):
    g = p.add_argument_group("sampler")
    g.add_argument("--nsamps", type=int, default=nsamps, help="iterations per chain")
    g.add_argument("--burnin", type=int, default=burnin, help="iterations discarded per chain")
    g.add_argument("--thin", type=int, default=1)
    g.add_argument("--chains", type=int, default=chains)
    g.add_argument("--scheme", choices=SCHEMES, default="rejection", help="theta sampler inside the Bingham step")
    g.add_argument("--init", choices=INIT_METHODS, default="jacobi")
    g.add_argument("--jobs", type=int, default=1, help="worker processes for chains")
    g.add_argument("--a", type=float, default=None, help="inverse-Gamma shape (default 1e-3)")
    g.add_argument("--b", type=float, default=None, help="inverse-Gamma scale (default 1e-3)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesjd", description="Bayesian approximate joint diagonalization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic data set and its truth file")
    p.add_argument("--kind", choices=["jd", "bss", "cspa"], default="jd")
    p.add_argument("--n", type=int, default=10, help="matrix size (jd) or number of sources (bss)")
    p.add_argument("--m", type=int, default=5, help="number of planted columns (jd)")
    p.add_argument("--k", type=int, default=100, help="number of matrices / lagged covariances")
    p.add_argument("--sigma2", type=float, default=0.01, help="noise variance (jd)")
    p.add_argument("--sigma", type=float, default=0.1, help="sensor noise standard deviation (bss)")
    p.add_argument("--samples", type=int, default=1000, help="time points (bss)")
    p.add_argument("--samples-per-class", type=int, default=200, help="samples per class (cspa)")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sample", help="run the Gibbs sampler on a matrix set")
    p.add_argument("--data", required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=True)
    _sampler_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("diagnose", help="ESS, R and API summaries of a sampler run")
    p.add_argument("--trace", required=True, help="output directory of `sample`")
    p.add_argument("--truth")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("model-select", help="BIC score per number of columns")
    p.add_argument("--data", required=True)
    p.add_argument("--m-range", help="LO..HI or comma list (default 1..N)")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out")
    _sampler_flags(p, nsamps=2000, burnin=1000)
    p.set_defaults(func=cmd_model_select)

    p = sub.add_parser("compare", help="Jacobi and Gibbs MAP API against a truth file")
    p.add_argument("--data", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out")
    _sampler_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bingham-bench", help="per-coordinate ESS of the vector Bingham samplers")
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--nsamps", type=int, default=20_000)
    p.add_argument("--burnin", type=int, default=100)
    p.add_argument("--schemes", default=",".join(SCHEMES))
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bingham_bench)

    p = sub.add_parser("bss-demo", help="sine-source separation with Jacobi and Gibbs")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out")
    _sampler_flags(p)
    p.set_defaults(func=cmd_bss_demo)

    p = sub.add_parser("cspa-demo", help="two-class common spatial patterns toy example")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out")
    _sampler_flags(p, nsamps=2000, burnin=1000)
    p.set_defaults(func=cmd_cspa_demo)
    return parser


def _apply_config(parser, argv) -> None:
    """Load ``--config`` into subparser defaults so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        cfg = _read_json(known.config)
    except OSError as err:
        raise UsageError(f"cannot read config {known.config}: {err}") from err
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for sp in subparsers.choices.values():
        dests = {a.dest for a in sp._actions}
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items() if k.replace("-", "_") in dests})


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort:
        return EXIT_NUMERIC
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
