"""Ground-truth worlds and ARD synthesis with injectable reporting biases.

Two graph regimes are supported. ``implicit`` never materializes edges:
a respondent with degree d reports Binomial(round(d), p_k) alters in
subpopulation k. ``explicit`` draws an actual undirected graph (Chung-Lu
style, Erdos-Renyi when degrees are constant) and counts neighbours, so
in-reports and out-reports match exactly; it is meant for small N.

Every random stage draws from its own stream derived from (seed, stage),
so switching one bias on or off does not perturb the draws of another.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .survey import ArdSurvey, EnrichedArd, SizeEstimate

_STAGES = {
    "degrees": 1,
    "memberships": 2,
    "graph": 3,
    "respondents": 10,
    "barrier": 11,
    "mixing": 12,
    "counts": 13,
    "transmission": 14,
    "response": 15,
    "enriched": 16,
    "likert": 17,
}


class ScenarioError(ValueError):
    pass


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STAGES[stage]]))


@dataclass(frozen=True)
class SubpopSpec:
    name: str
    size: int
    known: bool = True


@dataclass(frozen=True)
class DegreeModel:
    kind: str = "lognormal"  # "constant" | "lognormal"
    value: float = 100.0
    mu: float = 5.0
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "lognormal"):
            raise ScenarioError(f"unknown degree model {self.kind!r}")
        if self.sigma < 0 or self.value < 0:
            raise ScenarioError("degree parameters must be nonnegative")

    @property
    def mean(self) -> float:
        if self.kind == "constant":
            return self.value
        return math.exp(self.mu + self.sigma**2 / 2)


@dataclass(frozen=True)
class WorldConfig:
    """Population, subpopulations, degree law and survey design.

    ``mixing`` maps subpopulation name to a propensity dispersion omega >= 1;
    counts in such a column are negative binomial with variance omega times
    the mean. ``respondents`` is the ARD sample size (drawn without
    replacement); ``hidden_sample`` > 0 also draws an enriched sample of that
    many members of ``hidden`` (default: the first unknown subpopulation).
    """

    population_total: int
    subpops: tuple[SubpopSpec, ...]
    degree: DegreeModel = DegreeModel()
    mixing: Mapping[str, float] = field(default_factory=dict)
    graph: str = "implicit"
    respondents: int = 500
    hidden_sample: int = 0
    hidden: str | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "subpops", tuple(self.subpops))
        object.__setattr__(self, "mixing", dict(self.mixing))
        N = self.population_total
        if N <= 0:
            raise ScenarioError("population_total must be positive")
        names = [s.name for s in self.subpops]
        if len(set(names)) != len(names):
            raise ScenarioError("duplicate subpopulation names")
        for s in self.subpops:
            if not 0 < s.size < N:
                raise ScenarioError(f"subpopulation {s.name!r} size must lie in (0, N)")
        for name, w in self.mixing.items():
            if name not in names:
                raise ScenarioError(f"mixing given for unknown subpopulation {name!r}")
            if w < 1:
                raise ScenarioError("propensity dispersion omega must be >= 1")
        if self.graph not in ("implicit", "explicit"):
            raise ScenarioError(f"unknown graph regime {self.graph!r}")
        if not 0 < self.respondents <= N:
            raise ScenarioError("respondents must lie in [1, N]")
        if self.hidden_sample:
            h = self.hidden_column
            size = next(s.size for s in self.subpops if s.name == h)
            if self.hidden_sample > size:
                raise ScenarioError("hidden_sample exceeds the hidden population")
        if self.graph == "explicit" and self.mixing:
            raise ScenarioError("propensity mixing is only available for the implicit graph")

    @property
    def hidden_column(self) -> str:
        if self.hidden is not None:
            if self.hidden not in [s.name for s in self.subpops]:
                raise ScenarioError(f"hidden subpopulation {self.hidden!r} not defined")
            return self.hidden
        for s in self.subpops:
            if not s.known:
                return s.name
        raise ScenarioError("no unknown subpopulation to treat as hidden")


@dataclass(frozen=True)
class BiasConfig:
    """Reporting biases. All off by default.

    transmission: visibility tau_k in (0, 1] per subpopulation.
    barrier: Beta dispersion rho_k in (0, 1) of respondent-specific q_ik.
    recall: (a, b) of the calibration curve applied to log-proportions.
    zero_inflation: probability a response is replaced by 0.
    rounding: counts above ``rounding_threshold`` go to the nearest multiple
    of ``rounding_multiple``.
    """

    transmission: Mapping[str, float] = field(default_factory=dict)
    barrier: Mapping[str, float] = field(default_factory=dict)
    recall: tuple[float, float] | None = None
    zero_inflation: Mapping[str, float] = field(default_factory=dict)
    rounding: bool = False
    rounding_threshold: int = 10
    rounding_multiple: int = 5

    def __post_init__(self) -> None:
        for name in ("transmission", "barrier", "zero_inflation"):
            object.__setattr__(self, name, dict(getattr(self, name)))
        if self.recall is not None:
            a, b = self.recall
            if not a > 0:
                raise ScenarioError("recall curve rate must be positive")
            object.__setattr__(self, "recall", (float(a), float(b)))
        for k, t in self.transmission.items():
            if not 0 < t <= 1:
                raise ScenarioError(f"transmission for {k!r} must lie in (0, 1]")
        for k, r in self.barrier.items():
            if not 0 < r < 1:
                raise ScenarioError(f"barrier dispersion for {k!r} must lie in (0, 1)")
        for k, z in self.zero_inflation.items():
            if not 0 <= z < 1:
                raise ScenarioError(f"zero-inflation for {k!r} must lie in [0, 1)")
        if self.rounding_multiple < 1:
            raise ScenarioError("rounding_multiple must be >= 1")


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    config: WorldConfig
    degrees: np.ndarray
    memberships: Mapping[str, np.ndarray]
    adjacency: sparse.csr_matrix | None = None
    survey: ArdSurvey | None = None
    enriched: EnrichedArd | None = None
    respondents: np.ndarray | None = None
    frame_inclusion: np.ndarray | None = None
    biases: BiasConfig | None = None

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def true_sizes(self) -> dict[str, int]:
        return {s.name: s.size for s in self.config.subpops}

    def truth(self, name: str | None = None) -> int:
        return self.true_sizes[name or self.config.hidden_column]


def generate_world(config: WorldConfig) -> SyntheticWorld:
    """Draw degrees, memberships and (for the explicit regime) the graph."""
    N = config.population_total
    rng = stage_rng(config.seed, "degrees")
    if config.degree.kind == "constant":
        degrees = np.full(N, float(config.degree.value))
    else:
        degrees = rng.lognormal(config.degree.mu, config.degree.sigma, size=N)
    rng = stage_rng(config.seed, "memberships")
    members = {}
    for s in config.subpops:
        idx = np.sort(rng.choice(N, size=s.size, replace=False))
        idx.setflags(write=False)
        members[s.name] = idx
    adj = None
    if config.graph == "explicit":
        adj = _chung_lu(degrees, stage_rng(config.seed, "graph"))
    degrees.setflags(write=False)
    return SyntheticWorld(config=config, degrees=degrees, memberships=members, adjacency=adj)


def _chung_lu(degrees: np.ndarray, rng: np.random.Generator) -> sparse.csr_matrix:
    """Undirected simple graph with expected degrees approximately ``degrees``.

    Draws round(sum(d)/2) edge slots with endpoints proportional to degree,
    then drops self-loops and duplicates.
    """
    N = len(degrees)
    total = degrees.sum()
    m = int(round(total / 2))
    if m == 0:
        return sparse.csr_matrix((N, N), dtype=np.int8)
    p = degrees / total
    u = rng.choice(N, size=m, p=p)
    v = rng.choice(N, size=m, p=p)
    keep = u != v
    a, b = np.minimum(u[keep], v[keep]), np.maximum(u[keep], v[keep])
    codes = np.unique(a.astype(np.int64) * N + b)
    a, b = codes // N, codes % N
    rows = np.concatenate([a, b])
    cols = np.concatenate([b, a])
    adj = sparse.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(N, N))
    adj.sort_indices()
    return adj


def thin(counts: np.ndarray, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Keep each reported alter independently with probability ``tau``."""
    if tau >= 1:
        return counts
    return rng.binomial(counts, tau)


def _round_counts(y: np.ndarray, threshold: int, multiple: int) -> np.ndarray:
    big = y > threshold
    out = y.copy()
    # nearest multiple, halves rounded up
    out[big] = (np.floor(y[big] / multiple + 0.5) * multiple).astype(y.dtype)
    return out


def generate_ard(world: SyntheticWorld, biases: BiasConfig | None = None) -> SyntheticWorld:
    """Sample respondents and synthesize their ARD under ``biases``.

    Returns a copy of ``world`` with ``survey`` (and ``enriched`` when the
    config asks for a hidden sample) filled in.
    """
    biases = biases or BiasConfig()
    cfg = world.config
    N = cfg.population_total
    names = [s.name for s in cfg.subpops]
    for mapping in (biases.transmission, biases.barrier, biases.zero_inflation):
        for k in mapping:
            if k not in names:
                raise ScenarioError(f"bias given for undefined subpopulation {k!r}")
    if cfg.graph == "explicit" and (biases.barrier or biases.recall):
        raise ScenarioError("barrier and recall biases need the implicit graph regime")

    n = cfg.respondents
    resp = np.sort(stage_rng(cfg.seed, "respondents").choice(N, size=n, replace=False))
    K = len(names)
    aware_graph = None
    if cfg.graph == "implicit":
        y = _implicit_counts(world, biases, resp)
    else:
        y, aware_graph = _explicit_counts(world, biases, resp)

    if biases.zero_inflation or biases.rounding:
        rng = stage_rng(cfg.seed, "response")
        for k, name in enumerate(names):
            z = biases.zero_inflation.get(name, 0.0)
            if z > 0:
                y[rng.random(n) < z, k] = 0
        if biases.rounding:
            y = _round_counts(y, biases.rounding_threshold, biases.rounding_multiple)

    survey = ArdSurvey(
        responses=y,
        columns=tuple(names),
        population_total=N,
        known_sizes={s.name: s.size for s in cfg.subpops if s.known},
        respondent_ids=tuple(f"r{i}" for i in resp),
    )
    enriched = None
    if cfg.hidden_sample:
        enriched = _enriched(world, biases, aware_graph)
    return replace(
        world,
        survey=survey,
        enriched=enriched,
        respondents=resp,
        frame_inclusion=np.full(n, n / N),
        biases=biases,
    )


def _implicit_counts(world: SyntheticWorld, biases: BiasConfig, resp: np.ndarray) -> np.ndarray:
    cfg = world.config
    N = cfg.population_total
    n, K = len(resp), len(cfg.subpops)
    d = np.rint(world.degrees[resp]).astype(np.int64)
    p = np.empty((n, K))
    brng = stage_rng(cfg.seed, "barrier")
    for k, s in enumerate(cfg.subpops):
        m = s.size / N
        rho = biases.barrier.get(s.name)
        if rho is None:
            p[:, k] = m
        else:
            conc = (1 - rho) / rho
            p[:, k] = brng.beta(m * conc, (1 - m) * conc, size=n)
    if biases.recall is not None:
        from .calibration import curve

        a, b = biases.recall
        for k, s in enumerate(cfg.subpops):
            beta = math.log(s.size / N)
            p[:, k] *= math.exp(curve(beta, a, b) - beta)
    np.clip(p, 0.0, 1.0, out=p)

    mrng = stage_rng(cfg.seed, "mixing")
    crng = stage_rng(cfg.seed, "counts")
    y = np.empty((n, K), dtype=np.int64)
    for k, s in enumerate(cfg.subpops):
        omega = cfg.mixing.get(s.name, 1.0)
        if omega > 1:
            mean = d * p[:, k]
            shape = mean / (omega - 1)
            lam = np.zeros(n)
            pos = shape > 0
            lam[pos] = mrng.gamma(shape[pos], omega - 1)
            y[:, k] = crng.poisson(lam)
        else:
            y[:, k] = crng.binomial(d, p[:, k])
    trng = stage_rng(cfg.seed, "transmission")
    for k, s in enumerate(cfg.subpops):
        tau = biases.transmission.get(s.name, 1.0)
        if tau < 1:
            y[:, k] = thin(y[:, k], tau, trng)
    return y


def _awareness(world: SyntheticWorld, biases: BiasConfig) -> dict[str, sparse.csr_matrix]:
    """Directed awareness of membership: entry (i, j) = 1 if i knows j is in k."""
    cfg = world.config
    adj = world.adjacency
    N = cfg.population_total
    rng = stage_rng(cfg.seed, "transmission")
    out = {}
    for s in cfg.subpops:
        mask = np.zeros(N, dtype=np.int8)
        mask[world.memberships[s.name]] = 1
        into = (adj @ sparse.diags(mask)).tocsr()
        into.eliminate_zeros()
        into.sort_indices()
        tau = biases.transmission.get(s.name, 1.0)
        if tau < 1:
            keep = rng.random(into.nnz) < tau
            into = sparse.csr_matrix(
                (into.data * keep.astype(np.int8), into.indices, into.indptr), shape=into.shape
            )
            into.eliminate_zeros()
        out[s.name] = into
    return out


def _explicit_counts(world, biases, resp):
    aware = _awareness(world, biases)
    y = np.column_stack(
        [np.asarray(aware[s.name][resp].sum(axis=1)).ravel() for s in world.config.subpops]
    ).astype(np.int64)
    return y, aware


def _enriched(world: SyntheticWorld, biases: BiasConfig, aware_graph) -> EnrichedArd:
    cfg = world.config
    h = cfg.hidden_column
    members = world.memberships[h]
    m = cfg.hidden_sample
    rng = stage_rng(cfg.seed, "enriched")
    sample = np.sort(rng.choice(members, size=m, replace=False))
    tau = biases.transmission.get(h, 1.0)
    if aware_graph is not None:
        out = np.asarray(world.adjacency[sample].sum(axis=1)).ravel()
        aware = np.asarray(aware_graph[h][:, sample].sum(axis=0)).ravel()
    else:
        out = np.rint(world.degrees[sample]).astype(np.int64)
        aware = rng.binomial(out, tau)
    return EnrichedArd(
        out_reports=out,
        aware_counts=aware,
        inclusion_probs=np.full(m, m / len(members)),
        frame_total=cfg.population_total,
        member_ids=tuple(f"h{j}" for j in sample),
    )


# ---------------------------------------------------------------------------
# covariate-driven regime for the Likert / covariate models


def simulate_covariate_ard(
    n: int,
    known_sizes: Mapping[str, int],
    unknown_sizes: Mapping[str, int],
    population_total: int,
    log_lambda: float,
    beta: Mapping[str, float],
    likert_upper: int = 5,
    sigma_alpha: float = 0.5,
    gamma: np.ndarray | None = None,
    seed: int = 0,
) -> tuple[ArdSurvey, dict]:
    """ARD with Poisson(lambda * alpha_i * exp(beta_k (x_ik - U)) * exp(z_i . gamma_k) * N_k).

    ``gamma`` has shape (p, K) over the columns in known-then-unknown order;
    covariates are standard normal and returned column-centered.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _STAGES["likert"]]))
    cols = [*known_sizes, *unknown_sizes]
    sizes = np.array([*known_sizes.values(), *unknown_sizes.values()], dtype=float)
    K = len(cols)
    x = rng.integers(1, likert_upper + 1, size=(n, K)).astype(float)
    log_alpha = rng.normal(0.0, sigma_alpha, size=n)
    eta = log_lambda + log_alpha[:, None] + np.log(sizes)[None, :]
    b = np.array([beta.get(c, 0.0) for c in cols])
    eta = eta + b[None, :] * (x - likert_upper)
    z = None
    if gamma is not None:
        gamma = np.asarray(gamma, dtype=float)
        z = rng.standard_normal((n, gamma.shape[0]))
        z = z - z.mean(axis=0)
        eta = eta + z @ gamma
    y = rng.poisson(np.exp(eta))
    survey = ArdSurvey(
        responses=y,
        columns=tuple(cols),
        population_total=population_total,
        known_sizes=dict(known_sizes),
        covariates=z,
        likert=x,
        likert_upper={c: float(likert_upper) for c in cols},
    )
    return survey, {"log_alpha": log_alpha, "beta": b, "gamma": gamma}


# ---------------------------------------------------------------------------
# scenarios and benchmarks


def scenario_from_dict(data: Mapping) -> tuple[WorldConfig, BiasConfig]:
    try:
        w = dict(data["world"])
        subs = tuple(SubpopSpec(**s) for s in w.pop("subpops"))
        degree = DegreeModel(**w.pop("degree", {}))
        world = WorldConfig(subpops=subs, degree=degree, **w)
        b = dict(data.get("biases", {}))
        if b.get("recall") is not None:
            b["recall"] = tuple(b["recall"])
        biases = BiasConfig(**b)
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"invalid scenario: {exc}") from None
    return world, biases


def scenario_to_dict(world: WorldConfig, biases: BiasConfig) -> dict:
    w = asdict(world)
    b = asdict(biases)
    if b["recall"] is not None:
        b["recall"] = list(b["recall"])
    return {"world": w, "biases": b}


def load_scenario(path: str | Path) -> tuple[WorldConfig, BiasConfig]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scenario_from_dict(data)


def replicate_seed(seed: int, scenario: int, replicate: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(scenario), int(replicate)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def simulate(world_cfg: WorldConfig, biases: BiasConfig | None = None, seed: int | None = None):
    cfg = world_cfg if seed is None else replace(world_cfg, seed=seed)
    return generate_ard(generate_world(cfg), biases)


@dataclass
class BenchmarkResult:
    rows: list[dict]
    summary: list[dict]

    def write_csv(self, path: str | Path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "estimator", "replicate", "point", "truth", "rel_error", "covered"])
            for r in self.rows:
                w.writerow(
                    [
                        r["scenario"],
                        r["estimator"],
                        r["replicate"],
                        "" if r["point"] is None else repr(r["point"]),
                        r["truth"],
                        "" if r["rel_error"] is None else repr(r["rel_error"]),
                        "" if r["covered"] is None else int(r["covered"]),
                    ]
                )


def _run_estimator(label, est, world: SyntheticWorld, unknown: str) -> SizeEstimate:
    if label == "gnsum":
        from .classic import gnsum

        return gnsum(world.enriched, world.survey, unknown, world.frame_inclusion)[0]
    return est(world.survey, unknown)


def run_benchmark(
    scenarios: Sequence[tuple[str, WorldConfig, BiasConfig]],
    estimators: Sequence[str] | Mapping[str, Callable],
    replicates: int,
    seed: int = 0,
    threads: int = 1,
) -> BenchmarkResult:
    """Replicate every scenario, run every estimator, tabulate errors and coverage.

    Replicate r of scenario s uses world seed ``replicate_seed(seed, s, r)``;
    estimator failures are recorded in the row's ``error`` field.
    """
    from .classic import get_estimator

    if isinstance(estimators, Mapping):
        ests = dict(estimators)
    else:
        ests = {e: (None if e == "gnsum" else get_estimator(e)) for e in estimators}

    def one(task):
        s_idx, (name, wcfg, bcfg), rep = task
        world = simulate(wcfg, bcfg, seed=replicate_seed(seed, s_idx, rep))
        unknown = wcfg.hidden_column
        truth = world.truth(unknown)
        out = []
        for label, est in ests.items():
            row = {"scenario": name, "estimator": label, "replicate": rep, "truth": truth,
                   "point": None, "rel_error": None, "covered": None, "error": None}
            try:
                e = _run_estimator(label, est, world, unknown)
                row["point"] = e.point
                row["rel_error"] = (e.point - truth) / truth
                if e.interval is not None:
                    row["covered"] = bool(e.interval[0] <= truth <= e.interval[1])
            except Exception as exc:  # failures are data, not fatal
                row["error"] = f"{type(exc).__name__}: {exc}"
            out.append(row)
        return out

    tasks = [(i, sc, r) for i, sc in enumerate(scenarios) for r in range(replicates)]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(one, tasks))
    else:
        chunks = [one(t) for t in tasks]
    rows = [r for chunk in chunks for r in chunk]
    return BenchmarkResult(rows=rows, summary=summarize_benchmark(rows))


def summarize_benchmark(rows: Sequence[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["scenario"], r["estimator"]), []).append(r)
    summary = []
    for (scen, est), rs in groups.items():
        ok = [r for r in rs if r["point"] is not None]
        pts = np.array([r["point"] for r in ok])
        rel = np.array([r["rel_error"] for r in ok])
        cov = [r["covered"] for r in ok if r["covered"] is not None]
        summary.append(
            {
                "scenario": scen,
                "estimator": est,
                "replicates": len(rs),
                "failures": len(rs) - len(ok),
                "median_abs_rel_error": float(np.median(np.abs(rel))) if len(ok) else None,
                "median_point": float(np.median(pts)) if len(ok) else None,
                "sd": float(np.std(pts, ddof=1)) if len(ok) > 1 else None,
                "coverage": float(np.mean(cov)) if cov else None,
            }
        )
    return summary
