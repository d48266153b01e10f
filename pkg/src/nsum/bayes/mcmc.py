"""Shared MCMC machinery: draws container, adaptive proposals, diagnostics."""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ..survey import SizeEstimate, _jsonable


class ModelError(ValueError):
    """A Bayesian model cannot be fitted to the given data or settings."""


@dataclass(frozen=True)
class MCMCConfig:
    chains: int = 4
    burnin: int = 2000
    keep: int = 2000
    thin: int = 1
    seed: int = 0
    threads: int = 1
    rhat_threshold: float = 1.1
    accept_band: tuple[float, float] = (0.2, 0.5)
    adapt_window: int = 50

    def __post_init__(self) -> None:
        if self.chains < 1 or self.keep < 1 or self.burnin < 0 or self.thin < 1:
            raise ModelError("chains/keep must be >= 1, burnin >= 0, thin >= 1")
        lo, hi = self.accept_band
        if not 0 < lo < hi < 1:
            raise ModelError("acceptance band must satisfy 0 < lo < hi < 1")

    @property
    def target_accept(self) -> float:
        return 0.5 * sum(self.accept_band)


class Proposal:
    """Random-walk proposal with one scale per component.

    Scales adapt toward the acceptance band every ``window`` iterations
    during burn-in and are frozen afterwards. Acceptance is tallied
    separately for the post-burn-in phase.
    """

    def __init__(self, shape=(), scale: float = 0.1, config: MCMCConfig | None = None):
        cfg = config or MCMCConfig()
        self.log_scale = np.full(shape, math.log(scale))
        self._acc = np.zeros(shape)
        self._n = 0
        self._windows = 0
        self.window = cfg.adapt_window
        self.target = cfg.target_accept
        self.kept_acc = np.zeros(shape)
        self.kept_n = 0

    @property
    def scale(self):
        return np.exp(self.log_scale)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self.scale * rng.standard_normal(self.log_scale.shape)

    def record(self, accepted, adapting: bool) -> None:
        if adapting:
            self._acc += accepted
            self._n += 1
            if self._n == self.window:
                self._windows += 1
                rate = self._acc / self._n
                gain = max(0.3, 2.0 / math.sqrt(self._windows))
                self.log_scale = self.log_scale + gain * (rate - self.target)
                self._acc[...] = 0
                self._n = 0
        else:
            self.kept_acc += accepted
            self.kept_n += 1

    def acceptance(self) -> float:
        if self.kept_n == 0:
            return math.nan
        return float(np.mean(self.kept_acc) / self.kept_n)


def mh_accept(log_ratio, rng: np.random.Generator):
    """Vectorized Metropolis acceptance; NaN ratios are rejected."""
    log_ratio = np.asarray(log_ratio, dtype=float)
    u = rng.random(log_ratio.shape)
    with np.errstate(invalid="ignore"):
        return np.log(u) < np.nan_to_num(log_ratio, nan=-np.inf)


@dataclass
class PosteriorDraws:
    """Labeled chains. ``params[name]`` has shape (chains, draws, *component_shape).

    ``labels[name]`` names the components of a vector parameter.
    """

    params: dict[str, np.ndarray]
    labels: dict[str, list[str]]
    seed: int
    burnin: int
    thin: int
    acceptance: dict[str, list[float]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        shapes = {v.shape[:2] for v in self.params.values()}
        if len(shapes) > 1:
            raise ModelError(f"chains of unequal shape: {shapes}")

    @property
    def n_chains(self) -> int:
        return next(iter(self.params.values())).shape[0]

    @property
    def n_draws(self) -> int:
        return next(iter(self.params.values())).shape[1]

    def scalar_chains(self):
        """Yield (label, (chains, draws) array) for every scalar component."""
        for name, arr in self.params.items():
            if arr.ndim == 2:
                yield name, arr
            else:
                flat = arr.reshape(arr.shape[0], arr.shape[1], -1)
                labels = self.labels.get(name) or [str(j) for j in range(flat.shape[2])]
                for j, lab in enumerate(labels):
                    yield f"{name}[{lab}]", flat[:, :, j]

    def component(self, name: str, label: str) -> np.ndarray:
        labels = self.labels.get(name, [])
        if label not in labels:
            raise ModelError(f"parameter {name!r} has no component {label!r}")
        return self.params[name][:, :, labels.index(label)]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("chain,iter,param,value\n")
            for label, arr in self.scalar_chains():
                C, T = arr.shape
                for c in range(C):
                    fh.writelines(f"{c},{t},{label},{v!r}\n" for t, v in enumerate(arr[c].tolist()))

    def manifest(self) -> dict:
        return _jsonable({
            "seed": self.seed,
            "burnin": self.burnin,
            "thin": self.thin,
            "chains": self.n_chains,
            "draws_per_chain": self.n_draws,
            "labels": self.labels,
            "acceptance": self.acceptance,
            "metadata": self.metadata,
        })

    def write(self, csv_path: str | Path, manifest_path: str | Path) -> None:
        self.write_csv(csv_path)
        Path(manifest_path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read_csv(cls, path: str | Path, manifest_path: str | Path | None = None) -> "PosteriorDraws":
        raw: dict[str, dict[int, list[tuple[int, float]]]] = {}
        order: list[str] = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["chain", "iter", "param", "value"]:
                raise ModelError(f"{path}: expected header chain,iter,param,value")
            for rec in reader:
                p = rec["param"]
                if p not in raw:
                    raw[p] = {}
                    order.append(p)
                raw[p].setdefault(int(rec["chain"]), []).append((int(rec["iter"]), float(rec["value"])))
        if not raw:
            raise ModelError(f"{path}: no draws")
        scalars: dict[str, np.ndarray] = {}
        for p in order:
            chains = raw[p]
            scalars[p] = np.array(
                [[v for _, v in sorted(chains[c])] for c in sorted(chains)], dtype=float
            )
        params: dict[str, list] = {}
        labels: dict[str, list[str]] = {}
        for p in order:
            if p.endswith("]") and "[" in p:
                base, lab = p[:-1].split("[", 1)
                params.setdefault(base, []).append(scalars[p])
                labels.setdefault(base, []).append(lab)
            else:
                params[p] = scalars[p]
        arrays = {
            k: (np.stack(v, axis=-1) if isinstance(v, list) else v) for k, v in params.items()
        }
        meta = {}
        seed, burnin, thin, acc = 0, 0, 1, {}
        if manifest_path is not None:
            m = json.loads(Path(manifest_path).read_text())
            seed, burnin, thin = m.get("seed", 0), m.get("burnin", 0), m.get("thin", 1)
            acc, meta = m.get("acceptance", {}), m.get("metadata", {})
        return cls(arrays, labels, seed, burnin, thin, acc, meta)


def spawn_seeds(seed: int, chains: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(int(seed)).spawn(chains)


def run_chains(
    chain_fn: Callable[[np.random.Generator, int], tuple[dict[str, np.ndarray], dict[str, float]]],
    config: MCMCConfig,
) -> tuple[dict[str, np.ndarray], dict[str, list[float]]]:
    """Run ``chain_fn(rng, chain_index)`` per chain, each on its own seeded stream.

    Results are merged by chain index, so output does not depend on
    ``config.threads``.
    """
    seeds = spawn_seeds(config.seed, config.chains)
    tasks = [(np.random.default_rng(s), c) for c, s in enumerate(seeds)]
    if config.threads > 1 and config.chains > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(lambda t: chain_fn(*t), tasks))
    else:
        results = [chain_fn(*t) for t in tasks]
    params = {k: np.stack([r[0][k] for r in results]) for k in results[0][0]}
    acceptance = {k: [r[1][k] for r in results] for k in results[0][1]}
    return params, acceptance


class Recorder:
    """Collects kept draws for one chain."""

    def __init__(self, config: MCMCConfig):
        self.config = config
        self.store: dict[str, list] = {}

    def iterations(self):
        cfg = self.config
        total = cfg.burnin + cfg.keep * cfg.thin
        for it in range(total):
            adapting = it < cfg.burnin
            keep = not adapting and (it - cfg.burnin) % cfg.thin == cfg.thin - 1
            yield adapting, keep

    def save(self, **values) -> None:
        for k, v in values.items():
            self.store.setdefault(k, []).append(np.array(v, dtype=float, copy=True))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.stack(v) for k, v in self.store.items()}


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class ChainDiagnostics:
    rhat: dict[str, float | None]
    ess: dict[str, float]
    acceptance: dict[str, list[float]]
    warnings: list[str] = field(default_factory=list)

    def worst_rhat(self) -> float | None:
        vals = [v for v in self.rhat.values() if v is not None]
        return max(vals) if vals else None

    def min_ess(self) -> float:
        return min(self.ess.values())

    def converged(self, threshold: float = 1.1, min_ess: float = 0.0) -> bool:
        worst = self.worst_rhat()
        return (worst is None or worst < threshold) and self.min_ess() > min_ess

    def to_dict(self) -> dict:
        return asdict(self)


def split_rhat(x: np.ndarray) -> float:
    """Split potential scale reduction factor for an array of shape (chains, draws)."""
    x = np.asarray(x, dtype=float)
    C, T = x.shape
    half = T // 2
    if half < 2:
        raise ModelError("need at least four draws per chain for split-Rhat")
    s = np.concatenate([x[:, :half], x[:, T - half:]], axis=0)
    n = half
    means = s.mean(axis=1)
    W = s.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else math.inf
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance of each row via FFT (biased estimator)."""
    T = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    nfft = 1 << (2 * T - 1).bit_length()
    f = np.fft.rfft(xc, n=nfft, axis=-1)
    ac = np.fft.irfft(f * np.conj(f), n=nfft, axis=-1)[..., :T]
    return ac / T


def ess(x: np.ndarray) -> float:
    """Multi-chain effective sample size with Geyer's initial monotone sequence.

    Capped at the total number of draws.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    C, T = x.shape
    total = C * T
    if T < 4:
        return float(total)
    acov = _autocov(x)
    chain_var = acov[:, 0] * T / (T - 1)
    W = chain_var.mean()
    means = x.mean(axis=1)
    B_over_n = means.var(ddof=1) if C > 1 else 0.0
    var_plus = W * (T - 1) / T + B_over_n
    if var_plus <= 0:
        return float(total)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sum adjacent pairs while positive, enforce monotone decrease
    pair_sums = []
    t = 0
    while t + 1 < T:
        p = rho[t] + rho[t + 1]
        if p < 0:
            break
        if pair_sums and p > pair_sums[-1]:
            p = pair_sums[-1]
        pair_sums.append(p)
        t += 2
    tau = -1.0 + 2.0 * sum(pair_sums)
    tau = max(tau, 1.0 / math.log10(total)) if total > 10 else max(tau, 1e-12)
    return float(min(total / tau, total))


def diagnostics(draws: PosteriorDraws) -> ChainDiagnostics:
    """Split-Rhat and ESS for every scalar component plus block acceptance rates."""
    notes: list[str] = []
    single = draws.n_chains < 2
    if single:
        msg = "single chain: split-Rhat omitted"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    rhat: dict[str, float | None] = {}
    effective: dict[str, float] = {}
    for label, arr in draws.scalar_chains():
        rhat[label] = None if single else split_rhat(arr)
        effective[label] = ess(arr)
    return ChainDiagnostics(rhat, effective, dict(draws.acceptance), notes)


def posterior_size(draws: PosteriorDraws, unknown: str, method: str | None = None) -> SizeEstimate:
    """Median, central 95% interval and posterior SD of the unknown size."""
    if "size" not in draws.params or unknown not in draws.labels.get("size", []):
        raise ModelError(
            f"draws contain no size parameter for {unknown!r}"
            + (" (renormalize the overdispersed fit first)" if draws.metadata.get("model") == "overdispersed" else "")
        )
    x = draws.component("size", unknown).ravel()
    lo, med, hi = np.quantile(x, [0.025, 0.5, 0.975])
    return SizeEstimate(
        point=float(med),
        std_error=float(np.std(x, ddof=1)) if x.size > 1 else 0.0,
        interval=(float(min(lo, med)), float(max(hi, med))),
        method=method or draws.metadata.get("method", "bayes"),
        metadata={
            "posterior_mean": float(np.mean(x)),
            "draws": int(x.size),
            "converged": draws.metadata.get("converged"),
            "decisions": list(draws.metadata.get("decisions", [])),
        },
    )


def finalize(
    params: Mapping[str, np.ndarray],
    labels: Mapping[str, Sequence[str]],
    acceptance: Mapping[str, list[float]],
    config: MCMCConfig,
    metadata: Mapping,
) -> PosteriorDraws:
    draws = PosteriorDraws(
        params=dict(params),
        labels={k: list(v) for k, v in labels.items()},
        seed=config.seed,
        burnin=config.burnin,
        thin=config.thin,
        acceptance=dict(acceptance),
        metadata=dict(metadata),
    )
    draws.metadata["config"] = {
        "chains": config.chains,
        "burnin": config.burnin,
        "keep": config.keep,
        "thin": config.thin,
        "seed": config.seed,
    }
    if draws.n_chains >= 2 and draws.n_draws >= 4:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            worst = max(split_rhat(a) for _, a in draws.scalar_chains())
        draws.metadata["max_rhat"] = worst
        draws.metadata["converged"] = bool(worst < config.rhat_threshold)
        if not draws.metadata["converged"]:
            warnings.warn(
                f"chains did not converge: max split-Rhat {worst:.3f} >= {config.rhat_threshold}",
                RuntimeWarning,
                stacklevel=3,
            )
    else:
        draws.metadata["converged"] = None
    return draws
