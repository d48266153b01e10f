"""Command-line front end: ``nsum {estimate,simulate,calibrate,diagnose,benchmark}``.

Machine-readable JSON goes to stdout, human summaries to stderr.
Exit codes: 0 ok, 1 data or model error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import sys
import warnings
from dataclasses import asdict, dataclass, field, replace
from importlib import metadata as importlib_metadata
from pathlib import Path

import numpy as np
import scipy

from . import calibration as cal
from .bayes.maltiel import MaltielPriors, fit_maltiel
from .bayes.mcmc import MCMCConfig, ModelError, PosteriorDraws, diagnostics, posterior_size
from .bayes.overdispersed import fit_overdispersed, renormalize_betas
from .bayes.teo import fit_teo
from .classic import EstimationError, get_estimator, gnsum, johnsen_bounds
from .simulate import ScenarioError, generate_ard, generate_world, load_scenario, run_benchmark
from .survey import ArdSurvey, SizeEstimate, SurveyError, _jsonable, load_enriched, load_survey, save_enriched, save_survey, write_sizes

CLASSIC = ("pimle", "mle", "mos", "wmle", "wmos")
MALTIEL = {
    "maltiel-random": "random_degree",
    "maltiel-barrier": "barrier",
    "maltiel-transmission": "transmission",
    "maltiel-combined": "combined",
}
TEO = {"teo": "transmission", "teo-barrier": "transmission_barrier"}
METHODS = (*CLASSIC, "johnsen", "gnsum", "zheng", *MALTIEL, *TEO)

# flags that never change results
_NEUTRAL_FLAGS = {"threads", "out_dir", "func", "quiet"}

DATA_ERRORS = (SurveyError, EstimationError, ModelError, cal.CalibrationError, ScenarioError, OSError)


class UsageError(Exception):
    pass


def _package_version() -> str:
    try:
        return importlib_metadata.version("artifact")
    except importlib_metadata.PackageNotFoundError:
        return "unknown"


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


@dataclass
class RunManifest:
    """Provenance of one CLI run.

    ``digest`` hashes the command, result-relevant flags and input bytes, so it
    changes iff one of those changes. The timestamp is taken from
    SOURCE_DATE_EPOCH when set and left null otherwise, keeping reruns
    byte-identical.
    """

    command: str
    flags: dict
    inputs: dict[str, str]
    seed: int | None
    decisions: list[str] = field(default_factory=list)
    outputs: dict[str, str] = field(default_factory=dict)
    versions: dict[str, str] = field(default_factory=dict)
    timestamp: int | None = None
    digest: str = ""

    @classmethod
    def build(cls, command: str, args: argparse.Namespace, input_paths: dict[str, str | None]) -> "RunManifest":
        flags = {
            k: v for k, v in sorted(vars(args).items()) if k not in _NEUTRAL_FLAGS and not callable(v)
        }
        flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in flags.items()}
        inputs = {k: _sha256(p) for k, p in sorted(input_paths.items()) if p}
        epoch = os.environ.get("SOURCE_DATE_EPOCH")
        m = cls(
            command=command,
            flags=flags,
            inputs=inputs,
            seed=getattr(args, "seed", None),
            versions={
                "artifact": _package_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            timestamp=int(epoch) if epoch and epoch.isdigit() else None,
        )
        payload = json.dumps({"command": command, "flags": _jsonable(flags), "inputs": inputs}, sort_keys=True)
        m.digest = hashlib.sha256(payload.encode()).hexdigest()
        return m

    def record(self, name: str, path: Path) -> None:
        self.outputs[name] = _sha256(path)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(_dumps(asdict(self)))
        return path


def _out_dir(args) -> Path | None:
    if not getattr(args, "out_dir", None):
        return None
    p = Path(args.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _emit(obj) -> None:
    sys.stdout.write(_dumps(obj))


def _say(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


def _mcmc_config(args) -> MCMCConfig:
    return MCMCConfig(chains=args.chains, burnin=args.burnin, keep=args.keep, seed=args.seed, threads=args.threads)


def _parse_pair(text: str, flag: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{flag} expects two comma-separated numbers, got {text!r}") from None
    return a, b


def _resolve_unknown(survey: ArdSurvey, unknown: str | None) -> str:
    if unknown is not None:
        if unknown not in survey.columns:
            raise SurveyError(f"column {unknown!r} not in survey")
        return unknown
    cands = survey.unknown_columns
    if len(cands) != 1:
        raise SurveyError(f"pass --unknown; survey has {len(cands)} columns without a known size")
    return cands[0]


def _load(args) -> ArdSurvey:
    return load_survey(args.survey, args.sizes)


# ---------------------------------------------------------------------------
# estimate


def _bayes_fit(args, survey: ArdSurvey, unknown: str) -> tuple[PosteriorDraws, str]:
    with warnings.catch_warnings():
        # convergence is reported by cmd_estimate itself
        warnings.filterwarnings("ignore", message="chains did not converge")
        return _bayes_fit_inner(args, survey, unknown)


def _bayes_fit_inner(args, survey: ArdSurvey, unknown: str) -> tuple[PosteriorDraws, str]:
    cfg = _mcmc_config(args)
    method = args.method
    if method == "zheng":
        draws = fit_overdispersed(survey, cfg)
        rare = args.rare.split(",") if args.rare else survey.known_columns
        draws = renormalize_betas(draws, rare)
    elif method in MALTIEL:
        tp = None
        if args.tau_prior:
            tp = {unknown: _parse_pair(args.tau_prior, "--tau-prior")}
        priors = MaltielPriors(rho_fixed=args.rho_fixed) if args.rho_fixed is not None else None
        draws = fit_maltiel(survey, MALTIEL[method], priors=priors, transmission_prior=tp, config=cfg)
    else:
        draws = fit_teo(survey, TEO[method], cfg)
    return draws, method


def cmd_estimate(args) -> int:
    survey = _load(args)
    inputs = {"survey": args.survey, "sizes": args.sizes, "enriched": args.enriched}
    manifest = RunManifest.build("estimate", args, inputs)
    out = _out_dir(args)
    unknown = _resolve_unknown(survey, args.unknown)
    if args.method == "johnsen":
        b = johnsen_bounds(survey, unknown)
        result = {
            "method": "johnsen",
            "lower": b.lower,
            "upper": b.upper,
            "ordering_position": b.ordering_position,
            "p_unknown": b.p_unknown,
            "p_known": b.p_known,
        }
        _say(args, f"johnsen: {unknown} in [{b.lower}, {b.upper}]")
    else:
        draws = None
        if args.method in CLASSIC:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                est = get_estimator(args.method)(survey, unknown)
            for w in caught:
                _say(args, f"warning: {w.message}")
        elif args.method == "gnsum":
            if not args.enriched:
                raise SurveyError("gnsum needs --enriched")
            enriched = load_enriched(args.enriched, survey.population_total)
            pi = None
            if survey.weights is not None:
                pi = 1.0 / np.asarray(survey.weights, float)
            else:
                pi = np.full(survey.n, survey.n / survey.population_total)
            est, _ = gnsum(enriched, survey, unknown, pi)
            est.metadata.setdefault("decisions", []).append(
                "frame inclusion = 1/weight when weights are present, else n/N"
            )
        else:
            draws, _ = _bayes_fit(args, survey, unknown)
            est = posterior_size(draws, unknown, method=args.method)
            if draws.metadata.get("converged") is False:
                _say(args, f"warning: chains not converged (max split-Rhat {draws.metadata['max_rhat']:.3f})")
        if args.tau is not None:
            est = cal.scale_by_visibility(est, cal.VisibilityFactor(args.tau, "cli"))
        est.metadata["manifest_digest"] = manifest.digest
        result = est.to_dict()
        if out is not None and draws is not None:
            draws.write(out / "draws.csv", out / "draws.json")
            manifest.record("draws.csv", out / "draws.csv")
            manifest.record("draws.json", out / "draws.json")
        se = "" if est.std_error is None else f" (se {est.std_error:.4g})"
        _say(args, f"{args.method}: {unknown} = {est.point:.6g}{se}")
    if out is not None:
        (out / "estimate.json").write_text(_dumps(result))
        manifest.record("estimate.json", out / "estimate.json")
        manifest.write(out)
    _emit(result)
    return 0


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    world_cfg, biases = load_scenario(args.scenario)
    world_cfg = replace(world_cfg, seed=args.seed)
    manifest = RunManifest.build("simulate", args, {"scenario": args.scenario})
    out = _out_dir(args) or Path(".")
    world = generate_ard(generate_world(world_cfg), biases)
    save_survey(world.survey, out / "survey.csv")
    write_sizes(world.survey, out / "sizes.json")
    files = ["survey.csv", "sizes.json"]
    if world.enriched is not None:
        save_enriched(world.enriched, out / "enriched.csv")
        files.append("enriched.csv")
    deg = np.asarray(world.degrees)
    truth = {
        "manifest": "manifest.json",
        "manifest_digest": manifest.digest,
        "population_total": world_cfg.population_total,
        "hidden": world_cfg.hidden_column,
        "true_size": world.truth(),
        "true_sizes": world.true_sizes,
        "degrees": {
            "mean": float(deg.mean()),
            "median": float(np.median(deg)),
            "sd": float(deg.std(ddof=1)) if deg.size > 1 else 0.0,
            "min": float(deg.min()),
            "max": float(deg.max()),
        },
        "respondent_degrees": {
            "mean": float(deg[world.respondents].mean()),
            "median": float(np.median(deg[world.respondents])),
        },
        "biases": asdict(biases),
        "seed": args.seed,
    }
    (out / "truth.json").write_text(_dumps(truth))
    files.append("truth.json")
    for f in files:
        manifest.record(f, out / f)
    manifest.write(out)
    _say(args, f"simulated {world.survey.n} respondents; {truth['hidden']} = {truth['true_size']} -> {out}")
    _emit({"out_dir": str(out), "files": files + ["manifest.json"], "manifest_digest": manifest.digest})
    return 0


# ---------------------------------------------------------------------------
# calibrate


def _read_input(path: str):
    """Return ("estimate", SizeEstimate) for JSON or ("draws", PosteriorDraws) for CSV."""
    p = Path(path)
    if p.suffix.lower() == ".json":
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise SurveyError(f"{p}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(data, dict) or "point" not in data:
            raise SurveyError(f"{p}: not an estimate JSON")
        return "estimate", SizeEstimate.from_dict(data)
    if p.suffix.lower() == ".csv":
        sidecar = p.with_suffix(".json")
        return "draws", PosteriorDraws.read_csv(p, sidecar if sidecar.exists() else None)
    raise SurveyError(f"{p}: expected an estimate .json or a draws .csv")


def _summarize_draws(x: np.ndarray, method: str, applied: tuple[str, ...], meta: dict) -> SizeEstimate:
    lo, med, hi = np.quantile(x, [0.025, 0.5, 0.975])
    return SizeEstimate(
        point=float(med),
        method=method,
        std_error=float(np.std(x, ddof=1)),
        interval=(float(lo), float(hi)),
        calibrations_applied=applied,
        metadata=meta,
    )


def cmd_calibrate(args) -> int:
    kind, obj = _read_input(args.input)
    inputs = {"input": args.input, "survey": args.survey, "sizes": args.sizes}
    manifest = RunManifest.build(f"calibrate {args.kind}", args, inputs)
    out = _out_dir(args)
    adjusted_draws = None
    if args.kind == "visibility":
        if args.tau is None:
            raise UsageError("calibrate visibility needs --tau")
        if kind != "estimate":
            raise cal.CalibrationError("visibility scaling takes an estimate JSON; summarize draws first")
        result = cal.scale_by_visibility(obj, cal.VisibilityFactor(args.tau, "cli"))
    else:
        if args.survey is None:
            raise UsageError(f"calibrate {args.kind} needs --survey (and --sizes for CSV) to fit on known columns")
        survey = _load(args)
        if args.kind == "eiv" and kind != "draws":
            raise cal.CalibrationError("eiv adjusts posterior draws; got a point estimate")
        N = survey.population_total
        if args.kind == "curve":
            rows = cal.loo_backestimates(survey, args.method)
            rows = [r for r in rows if r.backestimate > 0]
            curve = cal.fit_calibration_curve(
                [math.log(r.known_size / N) for r in rows],
                [math.log(r.backestimate / N) for r in rows],
                labels=[r.subpop for r in rows],
            )
            meta_fit = {"a": curve.a, "b": curve.b, "fitted_on": list(curve.fitted_on)}
            if kind == "estimate":
                f = lambda v: N * math.exp(cal.apply_calibration_curve(curve, math.log(v / N)))  # noqa: E731
                result = SizeEstimate(
                    point=f(obj.point),
                    method=obj.method,
                    std_error=None,
                    interval=None if obj.interval is None or obj.interval[0] <= 0 else tuple(map(f, obj.interval)),
                    calibrations_applied=(*obj.calibrations_applied, "curve"),
                    metadata={**obj.metadata, "curve": meta_fit},
                )
            else:
                unknown = _resolve_unknown(survey, args.unknown)
                x = obj.component("size", unknown)
                adj = np.vectorize(lambda v: N * math.exp(cal.apply_calibration_curve(curve, math.log(v / N))))(x)
                adjusted_draws = adj
                result = _summarize_draws(adj.ravel(), obj.metadata.get("method", "bayes"), ("curve",),
                                          {"curve": meta_fit})
        else:
            unknown = _resolve_unknown(survey, args.unknown)
            rows = cal.loo_backestimates(survey, args.method, bootstrap=args.bootstrap, seed=args.seed)
            x = obj.component("size", unknown)
            adj_log, fit = cal.eiv_recall_adjust(rows, np.log(x), seed=args.seed)
            adjusted_draws = np.exp(adj_log)
            result = _summarize_draws(
                adjusted_draws.ravel(),
                obj.metadata.get("method", "bayes"),
                ("eiv",),
                {"eiv": {"a": fit.a, "b": fit.b, "sigma_eps": fit.sigma_eps}},
            )
    result.metadata["manifest_digest"] = manifest.digest
    payload = result.to_dict()
    if out is not None:
        (out / "calibrated.json").write_text(_dumps(payload))
        manifest.record("calibrated.json", out / "calibrated.json")
        if adjusted_draws is not None:
            path = out / "calibrated_draws.csv"
            with open(path, "w") as fh:
                fh.write("chain,iter,param,value\n")
                for c in range(adjusted_draws.shape[0]):
                    fh.writelines(f"{c},{t},size[{unknown}],{v!r}\n" for t, v in enumerate(adjusted_draws[c].tolist()))
            manifest.record("calibrated_draws.csv", path)
        manifest.write(out)
    _say(args, f"{args.kind}: point {result.point:.6g}")
    _emit(payload)
    return 0


# ---------------------------------------------------------------------------
# diagnose


def cmd_diagnose(args) -> int:
    out = _out_dir(args)
    if args.kind == "chains":
        if not args.draws:
            raise UsageError("diagnose chains needs --draws")
        manifest = RunManifest.build("diagnose chains", args, {"draws": args.draws})
        _, draws = _read_input(args.draws)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            diag = diagnostics(draws)
        for w in caught:
            _say(args, f"warning: {w.message}")
        result = diag.to_dict()
        result["worst_rhat"] = diag.worst_rhat()
        result["min_ess"] = diag.min_ess()
        result["converged"] = diag.converged(args.rhat_threshold)
        name = "diagnostics.json"
        worst = diag.worst_rhat()
        _say(args, f"worst split-Rhat {'n/a' if worst is None else f'{worst:.4f}'}, min ESS {diag.min_ess():.0f}")
    else:
        if args.survey is None:
            raise UsageError(f"diagnose {args.kind} needs --survey")
        survey = _load(args)
        manifest = RunManifest.build(f"diagnose {args.kind}", args, {"survey": args.survey, "sizes": args.sizes})
        if args.kind == "loo":
            rows = cal.loo_backestimates(survey, args.method, bootstrap=args.bootstrap, seed=args.seed)
            result = {"method": args.method, "rows": [r.as_dict() for r in rows]}
            if out is not None:
                cal.write_loo_table(rows, out / "loo.csv")
                manifest.record("loo.csv", out / "loo.csv")
            name = "loo.json"
            for r in rows:
                _say(args, f"{r.subpop:>16s} known {r.known_size:>10d} est {r.backestimate:12.1f} log ratio {r.log_ratio:+.3f}")
        else:
            res = cal.trim_stepwise(survey, args.method, tolerance=args.tolerance)
            result = json.loads(res.log_json())
            result["remaining"] = res.survey.known_columns
            name = "trim_log.json"
            _say(args, f"removed: {', '.join(res.removed) or '(none)'}")
    result["manifest_digest"] = manifest.digest
    if out is not None:
        (out / name).write_text(_dumps(result))
        manifest.record(name, out / name)
        manifest.write(out)
    _emit(result)
    return 0


# ---------------------------------------------------------------------------
# benchmark


def cmd_benchmark(args) -> int:
    scenarios = []
    for path in args.scenario:
        w, b = load_scenario(path)
        scenarios.append((Path(path).stem, w, b))
    manifest = RunManifest.build("benchmark", args, {f"scenario{i}": p for i, p in enumerate(args.scenario)})
    methods = args.methods.split(",")
    for m in methods:
        if m != "gnsum":
            get_estimator(m)
    res = run_benchmark(scenarios, methods, args.replicates, seed=args.seed, threads=args.threads)
    out = _out_dir(args)
    if out is not None:
        res.write_csv(out / "benchmark.csv")
        manifest.record("benchmark.csv", out / "benchmark.csv")
        manifest.write(out)
    for s in res.summary:
        _say(args, f"{s['scenario']:>12s} {s['estimator']:>6s} median|rel err| {s['median_abs_rel_error']}")
    _emit({"summary": res.summary, "manifest_digest": manifest.digest})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsum", description="Network scale-up size estimation from ARD.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, mcmc=False):
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--quiet", action="store_true", help="no summary on stderr")
        if data:
            p.add_argument("--survey", default=None, help="survey CSV or self-contained JSON")
            p.add_argument("--sizes", default=None, help="known-sizes JSON for CSV surveys")
            p.add_argument("--unknown", default=None, help="column to estimate")
        if mcmc:
            p.add_argument("--chains", type=int, default=4)
            p.add_argument("--burnin", type=int, default=2000)
            p.add_argument("--keep", type=int, default=2000)

    p = sub.add_parser("estimate", help="estimate an unknown subpopulation size")
    common(p, mcmc=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--enriched", default=None, help="enriched ARD CSV (gnsum)")
    p.add_argument("--tau", type=float, default=None, help="divide the result by this visibility factor")
    p.add_argument("--tau-prior", default=None, help="eta,nu visibility prior (maltiel transmission/combined)")
    p.add_argument("--rho-fixed", type=float, default=None, help="fix the barrier dispersion (maltiel)")
    p.add_argument("--rare", default=None, help="comma-separated rare columns for zheng renormalization")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="generate a synthetic survey from a scenario")
    common(p, data=False)
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="post hoc bias corrections")
    p.add_argument("kind", choices=("visibility", "curve", "eiv"))
    common(p)
    p.add_argument("--input", required=True, help="estimate JSON or draws CSV")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--method", default="mle", choices=CLASSIC, help="estimator for back-estimates")
    p.add_argument("--bootstrap", type=int, default=200, help="resamples for back-estimate variances (eiv)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("diagnose", help="leave-one-out, trimming and chain diagnostics")
    p.add_argument("kind", choices=("loo", "trim", "chains"))
    common(p)
    p.add_argument("--method", default="mle", choices=CLASSIC)
    p.add_argument("--bootstrap", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=0.25, help="|log ratio| tolerance for trim")
    p.add_argument("--draws", default=None, help="draws CSV for chains")
    p.add_argument("--rhat-threshold", type=float, default=1.1)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("benchmark", help="replicate scenarios and score estimators")
    common(p, data=False)
    p.add_argument("--scenario", required=True, nargs="+")
    p.add_argument("--methods", default="pimle,mle,mos")
    p.add_argument("--replicates", type=int, default=20)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
