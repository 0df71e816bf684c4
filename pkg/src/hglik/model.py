"""HGLM definition: response family, link, designs and random-effect structure."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import expit

from . import structures
from .errors import ColumnError, ConfigError, DesignError, DomainError, EvaluationError

ETA_CLAMP = 30.0
RANK_TOL = 1e-10

CANONICAL_LINK = {"normal": "identity", "poisson": "log", "binomial": "logit", "bernoulli": "logit"}


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Family:
    kind: str

    def __post_init__(self):
        if self.kind not in CANONICAL_LINK:
            raise ConfigError(f"unknown family {self.kind!r}")

    @property
    def binomial(self) -> bool:
        return self.kind in ("binomial", "bernoulli")

    @property
    def free_dispersion(self) -> bool:
        """Only the normal family carries an estimated phi."""
        return self.kind == "normal"

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "normal":
            return np.ones_like(mu)
        if self.kind == "poisson":
            return mu
        return mu * (1.0 - mu)


@dataclass(frozen=True)
class Link:
    kind: str

    def __post_init__(self):
        if self.kind not in ("identity", "log", "logit"):
            raise ConfigError(f"unknown link {self.kind!r}")

    @property
    def clamped(self) -> bool:
        return self.kind != "identity"

    def link(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "identity":
            return mu.copy()
        if self.kind == "log":
            return np.log(mu)
        return np.log(mu) - np.log1p(-mu)

    def inverse(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind == "identity":
            return eta.copy()
        if self.kind == "log":
            return np.exp(eta)
        return expit(eta)

    def mu_eta(self, eta):
        """Derivative d mu / d eta."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "identity":
            return np.ones_like(eta)
        if self.kind == "log":
            return np.exp(eta)
        p = expit(eta)
        return p * (1.0 - p)


def check_full_rank(X, tol=RANK_TOL):
    """Pivoted-QR rank check; returns the numerical rank."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] == 0:
        return 0
    _, r, _ = linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    return int(np.sum(d > tol * d[0])) if d.size and d[0] > 0 else 0


@dataclass(frozen=True)
class DesignSet:
    """Fixed design X (n x p), incidence Z (n x q) and optional loadings L (q x k)."""

    X: np.ndarray
    Z: np.ndarray
    L: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Z = np.asarray(self.Z.toarray() if hasattr(self.Z, "toarray") else self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        n = Z.shape[0]
        if X.shape[0] != n:
            if X.size == 0:
                X = np.zeros((n, 0))
            else:
                raise DesignError(f"X has {X.shape[0]} rows but Z has {n}")
        if n < 1 or Z.shape[1] < 1:
            raise DesignError("need n >= 1 rows and q >= 1 random effects")
        if check_full_rank(X) < X.shape[1]:
            raise DesignError("fixed-effect design X is rank deficient")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "Z", _frozen(Z))
        if self.L is not None:
            L = np.asarray(self.L, dtype=float)
            if L.ndim == 1:
                L = L[:, None]
            if L.shape[0] != Z.shape[1]:
                raise DesignError(f"L has {L.shape[0]} rows, Z has {Z.shape[1]} columns")
            object.__setattr__(self, "L", _frozen(L))
            object.__setattr__(self, "_zeff", _frozen(Z @ L))
        else:
            object.__setattr__(self, "_zeff", self.Z)

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def k(self) -> int:
        """Dimension of the random vector the model is fitted on."""
        return self._zeff.shape[1]

    @property
    def Zeff(self):
        return self._zeff


# dispersion-parameter domains: name -> kind
VARIANCE, UNIT, CORR = "variance", "unit", "corr"


@dataclass(frozen=True)
class RandomSpec:
    """Distribution and precision structure of the random effects.

    ``structure`` is one of ``iid``, ``car``, ``ar1``, ``factor``. For ``iid``
    the effects may be split into named blocks, each with its own variance.
    ``fixed`` pins dispersion components (e.g. ``{"rho": 1.0}`` for a random
    walk). Effects always enter the linear predictor directly (the weak
    canonical scale); ``distribution`` is ``normal``.
    """

    structure: str
    k: int
    blocks: tuple = ()
    neighborhood: Optional[structures.NeighborhoodMatrix] = None
    fixed: Mapping = field(default_factory=dict)
    distribution: str = "normal"

    def __post_init__(self):
        if self.distribution != "normal":
            raise ConfigError(f"random-effect distribution {self.distribution!r} is not supported")
        if self.structure not in ("iid", "car", "ar1", "factor"):
            raise ConfigError(f"unknown random structure {self.structure!r}")
        if self.structure == "iid" and not self.blocks:
            object.__setattr__(self, "blocks", (("lambda", self.k),))
        if self.blocks and sum(b[1] for b in self.blocks) != self.k:
            raise ConfigError("iid block sizes do not add up to the random dimension")
        if self.structure == "car":
            if self.neighborhood is None or self.neighborhood.n_regions != self.k:
                raise ConfigError("CAR structure needs a neighborhood matrix over all regions")
        object.__setattr__(self, "fixed", dict(self.fixed))
        unknown = set(self.fixed) - set(self.names)
        if unknown:
            raise ConfigError(f"cannot fix unknown dispersion components {sorted(unknown)}")

    @property
    def names(self) -> tuple:
        if self.structure == "iid":
            return tuple(b[0] for b in self.blocks)
        if self.structure == "car":
            return ("sigma2", "car_lambda")
        if self.structure == "ar1":
            return ("lambda", "rho")
        return ("lambda",)

    def domain(self, name) -> str:
        return {"car_lambda": UNIT, "rho": CORR}.get(name, VARIANCE)

    def precision(self, disp) -> structures.PrecisionStructure:
        if self.structure == "iid":
            var = np.concatenate([np.full(size, disp[name]) for name, size in self.blocks])
            return structures.iid_precision(var)
        if self.structure == "factor":
            return structures.iid_precision(np.full(self.k, disp["lambda"]))
        if self.structure == "car":
            return structures.car_precision(self.neighborhood, disp["car_lambda"], disp["sigma2"])
        return structures.ar1_precision(self.k, disp["rho"], disp["lambda"])


@dataclass(frozen=True)
class ModelSpec:
    """One HGLM: response, family/link pair, designs and random structure."""

    family: Family
    link: Link
    designs: DesignSet
    random: RandomSpec
    y: np.ndarray
    offset: Optional[np.ndarray] = None
    trials: Optional[np.ndarray] = None
    beta_names: tuple = ()
    effect_labels: tuple = ()

    def __post_init__(self):
        fam, link = self.family, self.link
        if CANONICAL_LINK[fam.kind] != link.kind:
            raise ConfigError(f"link {link.kind!r} is not admissible for family {fam.kind!r}")
        n = self.designs.n
        y = np.asarray(self.y, dtype=float).ravel()
        if y.size != n:
            raise DesignError(f"response has {y.size} rows, designs have {n}")
        if not np.all(np.isfinite(y)):
            raise DesignError("response contains non-finite values")
        off = np.zeros(n) if self.offset is None else np.asarray(self.offset, dtype=float).ravel()
        if off.size != n:
            raise DesignError(f"offset has {off.size} rows, designs have {n}")
        trials = np.ones(n) if self.trials is None else np.asarray(self.trials, dtype=float).ravel()
        if trials.size != n:
            raise DesignError(f"trials has {trials.size} rows, designs have {n}")
        if fam.kind == "bernoulli" and np.any(trials != 1):
            raise DesignError("bernoulli rows have exactly one trial")
        if fam.binomial:
            if np.any(trials < 1) or np.any(trials != np.round(trials)):
                raise DesignError("binomial trials must be positive integers")
            if np.any(y < 0) or np.any(y > trials) or np.any(y != np.round(y)):
                raise DesignError("binomial responses must be integer counts within 0..trials")
        if fam.kind == "poisson" and (np.any(y < 0) or np.any(y != np.round(y))):
            raise DesignError("poisson responses must be nonnegative integers")
        if self.random.k != self.designs.k:
            raise DesignError(f"random structure has {self.random.k} effects, design has {self.designs.k}")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "offset", _frozen(off))
        object.__setattr__(self, "trials", _frozen(trials))
        p = self.designs.p
        names = tuple(self.beta_names) or tuple(f"beta{j}" for j in range(p))
        if len(names) != p:
            raise DesignError("beta_names length differs from the number of columns of X")
        object.__setattr__(self, "beta_names", names)
        labels = tuple(self.effect_labels) or tuple(str(j + 1) for j in range(self.random.k))
        object.__setattr__(self, "effect_labels", labels)

    @property
    def n(self) -> int:
        return self.designs.n

    @property
    def p(self) -> int:
        return self.designs.p

    @property
    def k(self) -> int:
        return self.designs.k

    @property
    def dispersion_names(self) -> tuple:
        return (("phi",) if self.family.free_dispersion else ()) + self.random.names

    def domain(self, name) -> str:
        return VARIANCE if name == "phi" else self.random.domain(name)

    def precision(self, disp) -> structures.PrecisionStructure:
        return self.random.precision(disp)

    def phi(self, disp) -> float:
        return float(disp["phi"]) if self.family.free_dispersion else 1.0

    def check_dispersion(self, disp):
        missing = set(self.dispersion_names) - set(disp)
        if missing:
            raise DomainError(f"missing dispersion components {sorted(missing)}")
        for name in self.dispersion_names:
            val = disp[name]
            kind = self.domain(name)
            ok = (val > 0 if kind == VARIANCE else
                  0.0 <= val <= 1.0 if kind == UNIT else -1.0 < val <= 1.0)
            if not ok:
                raise DomainError(f"dispersion component {name}={val} outside its domain")

    def with_response(self, y):
        return dataclasses.replace(self, y=y)

    def with_offset(self, offset):
        return dataclasses.replace(self, offset=offset)


def linear_predictor(model: ModelSpec, beta, v):
    """eta = X beta + Zeff v + offset, clamped to +-30 for log/logit links.

    Returns ``(eta, n_clamped)``.
    """
    beta = np.asarray(beta, dtype=float)
    v = np.asarray(v, dtype=float)
    if beta.shape != (model.p,) or v.shape != (model.k,):
        raise DomainError(
            f"state dimensions (beta {beta.shape}, v {v.shape}) do not match model (p={model.p}, k={model.k})")
    eta = model.designs.X @ beta + model.designs.Zeff @ v + model.offset
    bad = np.flatnonzero(~np.isfinite(eta))
    if bad.size:
        raise EvaluationError("non-finite linear predictor", row=int(bad[0]))
    n_clamped = 0
    if model.link.clamped:
        out = np.abs(eta) > ETA_CLAMP
        n_clamped = int(out.sum())
        if n_clamped:
            eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    return eta, n_clamped


def mean_and_weights(model: ModelSpec, state):
    """Conditional mean and GLM working weights at ``state``.

    W_i = (dmu/deta)^2 / (phi V(mu)), multiplied by the trial count for
    binomial rows (mu is then the per-trial probability).
    """
    eta, _ = linear_predictor(model, state.beta, state.v)
    mu = model.link.inverse(eta)
    d = model.link.mu_eta(eta)
    var = model.family.variance(mu)
    phi = model.phi(state.dispersion)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(var > 0, d * d / (phi * np.where(var > 0, var, 1.0)), 0.0)
    return mu, w * model.trials


# ---------------------------------------------------------------------------
# construction from a table + config
# ---------------------------------------------------------------------------


def read_table(path) -> pd.DataFrame:
    """Read a UTF-8 CSV with a header row; missing values are rejected."""
    try:
        df = pd.read_csv(path, encoding="utf-8")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    for col in df.columns:
        try:
            float(col)
        except ValueError:
            continue
        raise ConfigError(f"{path}: header row missing (column name {col!r} is numeric)")
    if df.isna().any().any():
        bad = df.columns[df.isna().any()].tolist()
        raise ConfigError(f"{path}: missing values in columns {bad}")
    return df


def _column(df, name):
    if name not in df.columns:
        raise ColumnError(name)
    return df[name]


def _factor(series):
    codes, levels = pd.factorize(series, sort=True)
    return codes, [str(x) for x in levels]


def _incidence(codes, n_levels):
    Z = np.zeros((codes.size, n_levels))
    Z[np.arange(codes.size), codes] = 1.0
    return Z


def build_model(data_table, config: Mapping) -> ModelSpec:
    """Validate ``config`` against ``data_table`` and assemble a ModelSpec.

    ``config`` keys: ``response``, ``covariates`` (list), ``intercept``
    (default true), ``group``, ``family``, ``link`` (default canonical),
    ``trials``, ``offset`` (column names) and ``random`` with ``structure``
    in iid|car|ar1|factor plus structure-specific entries:

    * iid: optional ``groups`` list for several independent blocks
    * car: ``edges`` (1-based pairs) or ``edges_csv``, and ``n_regions``;
      the group column holds 1-based region indices
    * ar1: the group column is the (sortable) time index
    * factor: ``item`` column and ``loadings`` (one per sorted item level)

    ``random.fixed`` pins dispersion components.
    """
    df = data_table if isinstance(data_table, pd.DataFrame) else pd.DataFrame(dict(data_table))
    if "response" not in config:
        raise ConfigError("config must name a response column")
    family = Family(str(config.get("family", "normal")))
    link = Link(str(config.get("link", CANONICAL_LINK[family.kind])))
    if CANONICAL_LINK[family.kind] != link.kind:
        raise ConfigError(f"link {link.kind!r} is not admissible for family {family.kind!r}")
    y = _column(df, config["response"]).to_numpy(dtype=float)
    n = y.size
    cols, names = [], []
    if config.get("intercept", True):
        cols.append(np.ones(n))
        names.append("intercept")
    for c in config.get("covariates", []):
        cols.append(_column(df, c).to_numpy(dtype=float))
        names.append(str(c))
    X = np.column_stack(cols) if cols else np.zeros((n, 0))
    if check_full_rank(X) < X.shape[1]:
        raise DesignError("fixed-effect design X is rank deficient")
    offset = _column(df, config["offset"]).to_numpy(dtype=float) if config.get("offset") else None
    trials = _column(df, config["trials"]).to_numpy(dtype=float) if config.get("trials") else None

    rcfg = dict(config.get("random", {"structure": "iid"}))
    structure = rcfg.get("structure", "iid")
    fixed = dict(rcfg.get("fixed", {}))
    L = None
    blocks = ()
    neighborhood = None
    if structure == "iid":
        groups = rcfg.get("groups") or [config.get("group")]
        if groups[0] is None:
            raise ConfigError("iid random structure needs a group column")
        Zs, labels, blocks = [], [], []
        for g in groups:
            codes, levels = _factor(_column(df, g))
            Zs.append(_incidence(codes, len(levels)))
            labels += levels if len(groups) == 1 else [f"{g}:{lv}" for lv in levels]
            blocks.append(("lambda" if len(groups) == 1 else f"lambda_{g}", len(levels)))
        Z = np.hstack(Zs)
        blocks = tuple(blocks)
    elif structure == "car":
        if "edges_csv" in rcfg:
            edges = structures.read_edge_csv(rcfg["edges_csv"])
        else:
            edges = rcfg.get("edges", [])
        if "n_regions" not in rcfg:
            raise ConfigError("car structure needs n_regions")
        neighborhood = structures.neighborhood_from_adjacency(edges, rcfg["n_regions"])
        region = _column(df, config.get("group")).to_numpy()
        if np.any(region != np.round(region)) or region.min() < 1 or region.max() > neighborhood.n_regions:
            raise ConfigError("CAR group column must hold 1-based region indices")
        Z = _incidence(region.astype(int) - 1, neighborhood.n_regions)
        labels = [str(i + 1) for i in range(neighborhood.n_regions)]
    elif structure == "ar1":
        codes, labels = _factor(_column(df, config.get("group")))
        Z = _incidence(codes, len(labels))
    elif structure == "factor":
        subj, labels = _factor(_column(df, config.get("group")))
        item, items = _factor(_column(df, rcfg.get("item")))
        alpha = np.asarray(rcfg.get("loadings", np.ones(len(items))), dtype=float)
        if alpha.size != len(items):
            raise ConfigError(f"factor structure needs {len(items)} loadings, got {alpha.size}")
        _, a_col = structures.factor_loading_cov(alpha, 1.0)
        k_items = len(items)
        Z = _incidence(subj * k_items + item, len(labels) * k_items)
        L = np.kron(np.eye(len(labels)), a_col)
    else:
        raise ConfigError(f"unknown random structure {structure!r}")
    designs = DesignSet(X, Z, L)
    random = RandomSpec(structure=structure, k=designs.k, blocks=blocks,
                        neighborhood=neighborhood, fixed=fixed)
    return ModelSpec(family=family, link=link, designs=designs, random=random, y=y,
                     offset=offset, trials=trials, beta_names=tuple(names),
                     effect_labels=tuple(labels))
