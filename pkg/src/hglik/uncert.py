"""Random-effect uncertainty: EB versus full-Hessian (h-likelihood) variances.

The EB variance inverts the v-block of the Hessian alone and ignores the
uncertainty from estimating beta. The h-likelihood variance takes the
v-block of the inverse of the whole (beta, v) Hessian, which adds the
inflation term through the Schur complement of the beta block.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from . import structures
from .errors import HglikError, SimulationError
from .fit import FitOptions, fit
from .hlik import BlockFactor, ParamState, _Problem, v_mode
from .model import DesignSet, Family, Link, ModelSpec, RandomSpec

DEFAULT_TRUTH = {"beta": -4.920, "sigma2": 2.0, "car_lambda": 0.62}


@dataclass(frozen=True)
class VarDecomp:
    eb_var: np.ndarray
    hlik_var: np.ndarray

    @property
    def inflation(self):
        return self.hlik_var - self.eb_var


def _decomp_at(model, state: ParamState) -> VarDecomp:
    prob = _Problem(model, state.dispersion)
    _, gv, blocks = prob.derivatives(state.beta, state.v)
    _, hbc, hc = prob.reduce(gv, blocks)
    fac = BlockFactor(blocks.h_bb, hbc, hc)
    eb, full = fac.vv_inverse(), fac.full_inverse_vv()
    if prob.basis is not None:
        B = prob.basis
        return VarDecomp(np.einsum("ij,jk,ik->i", B, eb, B), np.einsum("ij,jk,ik->i", B, full, B))
    return VarDecomp(np.diag(eb).copy(), np.diag(full).copy())


def var_decomp(model, fit_result) -> VarDecomp:
    """EB and h-likelihood variances of the random effects at the fitted state."""
    return _decomp_at(model, fit_result.state)


def delta_method(var, derivative):
    """Variance after a smooth reparameterization with the given derivative."""
    return np.asarray(derivative) ** 2 * np.asarray(var)


@dataclass(frozen=True)
class WaldIntervals:
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    kind: str


def wald_intervals(decomp: VarDecomp, fit_result, level=0.95, kind="hlik") -> WaldIntervals:
    """v_hat +- z_{(1+level)/2} sqrt(var) using ``kind`` in {'hlik', 'eb'}."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    var = {"hlik": decomp.hlik_var, "eb": decomp.eb_var}[kind]
    center = np.asarray(fit_result.state.v, dtype=float)
    half = norm.ppf(0.5 * (1.0 + level)) * np.sqrt(var)
    return WaldIntervals(center, center - half, center + half, level, kind)


# ---------------------------------------------------------------------------
# CAR coverage simulation
# ---------------------------------------------------------------------------


@dataclass
class CoverageConfig:
    """Poisson-CAR coverage experiment. ``edges`` are 1-based region pairs."""

    edges: list = None
    n_regions: int = 20
    populations: list = None
    beta: float = DEFAULT_TRUTH["beta"]
    sigma2: float = DEFAULT_TRUTH["sigma2"]
    car_lambda: float = DEFAULT_TRUTH["car_lambda"]
    n_sims: int = 200
    seed: int = 42
    level: float = 0.95
    n_bins: int = 4
    oracle_mode: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.edges is None:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=(2**31,))))
            self.edges = structures.random_adjacency(self.n_regions, rng)
        self.edges = [tuple(int(x) for x in e) for e in self.edges]
        if self.populations is None:
            self.populations = np.geomspace(100, 50000, self.n_regions).round().tolist()
        self.populations = [float(x) for x in self.populations]
        if len(self.populations) != self.n_regions:
            raise ValueError("one population per region is required")
        if self.n_sims < 1:
            raise ValueError("n_sims must be at least 1")


@dataclass
class CoverageReport:
    bins: list
    bin_counts: list
    eb_coverage: list
    hlik_coverage: list
    n_sims: int
    seed: int
    failures: int
    schur_violations: int
    config: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin", "n_range", "eb_coverage", "hlik_coverage", "count"])
        for i, (lo, hi) in enumerate(self.bins):
            w.writerow([i + 1, f"{lo:.17g}-{hi:.17g}", "%.17g" % self.eb_coverage[i],
                        "%.17g" % self.hlik_coverage[i], self.bin_counts[i]])
        return buf.getvalue()

    def meta(self) -> dict:
        return {"config": self.config, "seed": self.seed, "n_sims": self.n_sims,
                "failures": self.failures, "schur_violations": self.schur_violations}

    def meta_json(self) -> str:
        return json.dumps(self.meta(), indent=2)


def car_poisson_model(neighborhood, populations, y) -> ModelSpec:
    n = neighborhood.n_regions
    return ModelSpec(
        family=Family("poisson"), link=Link("log"),
        designs=DesignSet(np.ones((n, 1)), np.eye(n)),
        random=RandomSpec("car", k=n, neighborhood=neighborhood),
        y=y, offset=np.log(np.asarray(populations, dtype=float)),
        beta_names=("intercept",))


def _replicate(cfg: CoverageConfig, r: int):
    """One replicate: returns (eb_covered, hlik_covered, schur_ok) or None on failure."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(r,))))
    nb = structures.neighborhood_from_adjacency(cfg.edges, cfg.n_regions)
    prec = structures.car_precision(nb, cfg.car_lambda, cfg.sigma2)
    cov = np.linalg.inv(prec.matrix)
    v_true = np.linalg.cholesky(cov) @ rng.standard_normal(cfg.n_regions)
    pops = np.asarray(cfg.populations)
    y = rng.poisson(pops * np.exp(cfg.beta + v_true)).astype(float)
    model = car_poisson_model(nb, pops, y)
    z = norm.ppf(0.5 * (1.0 + cfg.level))
    try:
        if cfg.oracle_mode:
            disp = {"sigma2": cfg.sigma2, "car_lambda": cfg.car_lambda}
            beta = np.array([cfg.beta])
            state = ParamState(beta, v_mode(model, beta, disp), disp)
            d = _decomp_at(model, state)
            eb = np.abs(state.v - v_true) <= z * np.sqrt(d.eb_var)
            return eb, eb, True
        res = fit(model, FitOptions())
        if not res.converged:
            return None
        d = var_decomp(model, res)
    except HglikError:
        return None
    dev = np.abs(res.state.v - v_true)
    schur_ok = bool(np.all(d.hlik_var >= d.eb_var - 1e-12))
    return dev <= z * np.sqrt(d.eb_var), dev <= z * np.sqrt(d.hlik_var), schur_ok


def coverage_sim(config: CoverageConfig) -> CoverageReport:
    """Coverage of nominal Wald intervals for CAR relative risks, binned by population."""
    cfg = config
    if cfg.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as ex:
            results = list(ex.map(_replicate, [cfg] * cfg.n_sims, range(cfg.n_sims)))
    else:
        results = [_replicate(cfg, r) for r in range(cfg.n_sims)]
    order = np.argsort(cfg.populations, kind="stable")
    groups = np.array_split(order, cfg.n_bins)
    pops = np.asarray(cfg.populations)
    ok = [r for r in results if r is not None]
    failures = len(results) - len(ok)
    eb_cov, hl_cov, counts, bins = [], [], [], []
    for g in groups:
        bins.append((float(pops[g].min()), float(pops[g].max())))
        n = len(ok) * g.size
        counts.append(n)
        eb_cov.append(float(sum(r[0][g].sum() for r in ok) / n) if n else float("nan"))
        hl_cov.append(float(sum(r[1][g].sum() for r in ok) / n) if n else float("nan"))
    report = CoverageReport(
        bins=bins, bin_counts=counts, eb_coverage=eb_cov, hlik_coverage=hl_cov,
        n_sims=cfg.n_sims, seed=cfg.seed, failures=failures,
        schur_violations=sum(1 for r in ok if not r[2]),
        config={k: v for k, v in asdict(cfg).items() if k != "n_jobs"})
    if failures >= 0.05 * cfg.n_sims and failures > 0:
        raise SimulationError(f"{failures} of {cfg.n_sims} replicate fits failed", report=report)
    return report
