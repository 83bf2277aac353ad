"""Marginal maximum likelihood (EM) calibration of 1PL/2PL/3PL models."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logsumexp

from .model import (
    MODEL_KINDS,
    PROB_EPS,
    ItemBank,
    ItemParameters,
    ResponseMatrix,
    ThetaGrid,
    normalize_model_kind,
    pattern_log_likelihoods,
)

log = logging.getLogger(__name__)


class DegenerateItemError(ValueError):
    """Raised when an item has no variation among its observed responses."""

    def __init__(self, item_ids: Sequence[str]):
        self.item_ids = list(item_ids)
        super().__init__(f"degenerate item {', '.join(self.item_ids)}")


@dataclass(frozen=True)
class CalibrationConfig:
    model_kind: str = "2PL"
    n_nodes: int = 61
    theta_min: float = -6.0
    theta_max: float = 6.0
    tolerance: float = 1e-4
    max_cycles: int = 500
    # Beta(alpha, beta) log-prior on each c; Beta(5, 17) is a sensible
    # stabilizer for small samples.
    guessing_prior: tuple[float, float] | None = None
    a_bounds: tuple[float, float] = (0.05, 5.0)
    b_bounds: tuple[float, float] = (-6.0, 6.0)
    c_bounds: tuple[float, float] = (0.0, 0.5)
    seed: int = 0
    jitter: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "model_kind", normalize_model_kind(self.model_kind))
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be at least 1")
        if self.n_nodes < 11:
            raise ValueError("quadrature needs at least 11 nodes")
        if not self.theta_min < self.theta_max:
            raise ValueError("quadrature range is not well ordered")
        for name in ("a_bounds", "b_bounds", "c_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} is not well ordered")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.a_bounds[0] <= 0:
            raise ValueError("lower discrimination bound must be positive")
        if self.c_bounds[0] < 0 or self.c_bounds[1] >= 1:
            raise ValueError("guessing bounds must lie in [0, 1)")
        if self.guessing_prior is not None:
            alpha, beta = self.guessing_prior
            if alpha <= 0 or beta <= 0:
                raise ValueError("Beta prior shape parameters must be positive")
            object.__setattr__(self, "guessing_prior", (float(alpha), float(beta)))

    @property
    def grid(self) -> ThetaGrid:
        return ThetaGrid.normal(self.n_nodes, self.theta_min, self.theta_max)


@dataclass(frozen=True)
class CalibrationResult:
    bank: ItemBank
    log_likelihood: float
    cycles: int
    converged: bool
    max_change: float
    posterior: np.ndarray = field(repr=False)
    loglik_trace: tuple[float, ...] = field(repr=False)
    config: CalibrationConfig = field(default_factory=CalibrationConfig)

    @property
    def model_kind(self) -> str:
        return self.config.model_kind

    @property
    def grid(self) -> ThetaGrid:
        return self.config.grid

    @property
    def n_parameters(self) -> int:
        k = len(self.bank)
        return {"1PL": k + 1, "2PL": 2 * k, "3PL": 3 * k}[self.model_kind]


# -- M-step -------------------------------------------------------------------

class _MStep:
    """Expected complete-data log-likelihood over all items, with gradient.

    Items are independent given the expected counts, so one bounded
    L-BFGS-B call over the stacked parameter vector maximizes each item's
    objective simultaneously.
    """

    def __init__(self, kind: str, nodes, r, n, prior, scale):
        self.kind = kind
        self.theta = nodes[:, None]
        self.r = r
        self.nr = n - r
        self.prior = prior
        self.scale = scale
        self.k = r.shape[1]

    def __call__(self, x):
        a, b, c = _unpack(self.kind, x, self.k)
        dev = self.theta - b
        L = expit(a * dev)
        p = np.clip(c + (1.0 - c) * L, PROB_EPS, 1.0 - PROB_EPS)
        value = np.sum(self.r * np.log(p) + self.nr * np.log1p(-p))
        g = self.r / p - self.nr / (1.0 - p)
        slope = g * (1.0 - c) * L * (1.0 - L)
        ga = np.sum(slope * dev, axis=0)
        gb = -a * np.sum(slope, axis=0)
        if self.kind == "1PL":
            grad = np.concatenate([[ga.sum()], gb])
        elif self.kind == "2PL":
            grad = np.concatenate([ga, gb])
        else:
            gc = np.sum(g * (1.0 - L), axis=0)
            if self.prior is not None:
                alpha, beta = self.prior
                value += np.sum((alpha - 1) * np.log(c) + (beta - 1) * np.log1p(-c))
                gc = gc + (alpha - 1) / c - (beta - 1) / (1.0 - c)
            grad = np.concatenate([ga, gb, gc])
        return -value / self.scale, -grad / self.scale


def _unpack(kind, x, k):
    if kind == "1PL":
        return np.full(k, x[0]), x[1:], np.zeros(k)
    if kind == "2PL":
        return x[:k], x[k:], np.zeros(k)
    return x[:k], x[k:2 * k], x[2 * k:]


def _pack(kind, a, b, c):
    if kind == "1PL":
        return np.concatenate([[a[0]], b])
    if kind == "2PL":
        return np.concatenate([a, b])
    return np.concatenate([a, b, c])


def _bounds(kind, k, config: CalibrationConfig):
    c_lo, c_hi = config.c_bounds
    if config.guessing_prior is not None:
        c_lo = max(c_lo, 1e-6)  # log-prior is -inf at c = 0
    if kind == "1PL":
        return [config.a_bounds] + [config.b_bounds] * k
    out = [config.a_bounds] * k + [config.b_bounds] * k
    if kind == "3PL":
        out += [(c_lo, c_hi)] * k
    return out


def _start_values(y1, obs, config: CalibrationConfig):
    kind = config.model_kind
    k = y1.shape[1]
    prop = y1.sum(axis=0) / obs.sum(axis=0)
    c = np.full(k, 0.1 if kind == "3PL" else 0.0)
    adj = np.clip((prop - c) / (1.0 - c), 0.02, 0.98)
    b = -np.log(adj / (1.0 - adj))
    a = np.ones(k)
    if config.jitter > 0:
        rng = np.random.default_rng(config.seed)
        a = a * np.exp(config.jitter * rng.standard_normal(k))
        b = b + config.jitter * rng.standard_normal(k)
        if kind == "1PL":
            a = np.full(k, a[0])
    x0 = _pack(kind, a, b, c)
    lo, hi = np.array(_bounds(kind, k, config)).T
    return np.clip(x0, lo, hi)


# -- fitting ------------------------------------------------------------------

def _check_inputs(responses: ResponseMatrix):
    if responses.n_persons < 2 or responses.n_items < 2:
        raise ValueError("calibration needs at least 2 persons and 2 items")
    data = responses.data
    obs = responses.mask
    ones = np.nansum(data, axis=0)
    counts = obs.sum(axis=0)
    bad = [iid for iid, s, n in zip(responses.item_ids, ones, counts) if s == 0 or s == n]
    if bad:
        raise DegenerateItemError(bad)


def _e_step(a, b, c, nodes, log_w, data):
    ll = pattern_log_likelihoods(a, b, c, data, nodes)
    joint = ll + log_w
    marginal = logsumexp(joint, axis=1)
    post = np.exp(joint - marginal[:, None])
    return post, float(marginal.sum())


def fit(responses: ResponseMatrix, config: CalibrationConfig | None = None,
        template: ItemBank | None = None) -> CalibrationResult:
    """Calibrate item parameters by EM over a fixed normal-prior quadrature.

    ``template`` supplies bank metadata (subscales, loadings) to copy onto the
    fitted items; matched by item id.
    """
    config = config or CalibrationConfig()
    _check_inputs(responses)
    kind = config.model_kind

    # canonical column order makes the fit exactly equivariant to column permutations
    order = sorted(range(responses.n_items), key=lambda j: responses.item_ids[j])
    inverse = np.argsort(order)
    data = responses.data[:, order]
    obs = ~np.isnan(data)
    y1 = np.where(obs, data, 0.0)
    k = data.shape[1]

    grid = config.grid
    nodes = grid.nodes
    with np.errstate(divide="ignore"):
        log_w = np.log(grid.weights)
    bounds = _bounds(kind, k, config)
    x = _start_values(y1, obs, config)
    obs_f = obs.astype(float)
    n_persons = data.shape[0]

    def log_prior(v):
        if kind != "3PL" or config.guessing_prior is None:
            return 0.0
        alpha, beta = config.guessing_prior
        c = v[2 * k:]
        return float(np.sum((alpha - 1) * np.log(c) + (beta - 1) * np.log1p(-c)))

    trace: list[float] = []
    converged = False
    change = math.inf
    cycle = 0
    for cycle in range(1, config.max_cycles + 1):
        post, mll = _e_step(*_unpack(kind, x, k), nodes, log_w, data)
        trace.append(mll + log_prior(x))
        r = post.T @ y1
        n = post.T @ obs_f
        objective = _MStep(kind, nodes, r, n, config.guessing_prior if kind == "3PL" else None,
                           n_persons)
        res = minimize(objective, x, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 200, "ftol": 1e-13, "gtol": 1e-9})
        x_new = res.x
        # GEM safeguard: never accept a step that lowers the M-step objective
        if objective(x_new)[0] > objective(x)[0]:
            x_new = x
        change = float(np.max(np.abs(x_new - x)))
        x = x_new
        if change <= config.tolerance:
            converged = True
            break

    post, mll = _e_step(*_unpack(kind, x, k), nodes, log_w, data)
    trace.append(mll + log_prior(x))
    if not converged:
        log.warning("EM stopped at the cycle cap (%d) with max change %.3g",
                    config.max_cycles, change)

    a, b, c = _unpack(kind, x, k)
    a, b, c = a[inverse], b[inverse], c[inverse]
    meta = {it.item_id: it for it in template} if template is not None else {}
    items = []
    for j, iid in enumerate(responses.item_ids):
        src = meta.get(iid)
        items.append(ItemParameters(
            item_id=iid, a=float(a[j]), b=float(b[j]), c=float(c[j]), model_kind=kind,
            subscale=src.subscale if src else None,
            loading=src.loading if src else None,
            in_short_form=src.in_short_form if src else False,
            extra=dict(src.extra) if src else {},
        ))
    return CalibrationResult(
        bank=ItemBank(items, template.extra if template is not None else None),
        log_likelihood=mll,
        cycles=cycle,
        converged=converged,
        max_change=change,
        posterior=post,
        loglik_trace=tuple(trace),
        config=config,
    )


def marginal_log_likelihood(bank: ItemBank, responses: ResponseMatrix,
                            grid: ThetaGrid | None = None) -> float:
    """Sum over persons of log of the prior-weighted likelihood over the grid."""
    grid = grid or CalibrationConfig().grid
    data = responses.columns(bank.ids).data
    ll = pattern_log_likelihoods(bank.a, bank.b, bank.c, data, grid.nodes)
    with np.errstate(divide="ignore"):
        log_w = np.log(grid.weights)
    return float(logsumexp(ll + log_w, axis=1).sum())


# -- model comparison ---------------------------------------------------------

@dataclass(frozen=True)
class ModelComparisonRow:
    model: str
    m2: float = math.nan
    df: int | None = None
    p_value: float = math.nan
    rmsea: float = math.nan
    srmsr: float = math.nan
    cfi: float = math.nan
    tli: float = math.nan
    log_likelihood: float = math.nan
    converged: bool | None = None
    error: str | None = None
    result: CalibrationResult | None = field(default=None, repr=False, compare=False)

    @property
    def failed(self) -> bool:
        return self.error is not None

    def as_dict(self) -> dict:
        return {
            "model": self.model, "M2": self.m2, "df": self.df, "p": self.p_value,
            "RMSEA": self.rmsea, "SRMSR": self.srmsr, "CFI": self.cfi, "TLI": self.tli,
            "log_likelihood": self.log_likelihood, "converged": self.converged,
            "error": self.error,
        }


@dataclass(frozen=True)
class ModelComparisonReport:
    rows: tuple[ModelComparisonRow, ...]

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, model: str) -> ModelComparisonRow:
        model = normalize_model_kind(model)
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)

    def as_records(self) -> list[dict]:
        return [r.as_dict() for r in self.rows]


def _ordered(items, key):
    return sorted(items, key=lambda x: MODEL_KINDS.index(key(x)))


def summarize_fits(results: Sequence[CalibrationResult | Exception | tuple],
                   responses: ResponseMatrix) -> ModelComparisonReport:
    """Fit-index table for already-fitted models.

    ``results`` entries are ``CalibrationResult`` objects or
    ``(model_kind, exception)`` pairs for fits that failed.
    """
    from . import diagnostics

    null = None
    rows = []
    for res in results:
        if isinstance(res, tuple):
            kind, exc = res
            rows.append(ModelComparisonRow(model=normalize_model_kind(kind), error=str(exc)))
            continue
        try:
            data = responses.columns(res.bank.ids)
            report = diagnostics.m2_statistic(res, data)
            if null is None:
                null = diagnostics.independence_m2(data)
            sr = diagnostics.srmsr(res, data)
            idx = diagnostics.fit_indices(report, null, srmsr=sr)
        except (ValueError, np.linalg.LinAlgError) as exc:
            rows.append(ModelComparisonRow(model=res.model_kind, error=str(exc),
                                           log_likelihood=res.log_likelihood,
                                           converged=res.converged, result=res))
            continue
        rows.append(ModelComparisonRow(
            model=res.model_kind, m2=report.m2, df=report.df, p_value=report.p_value,
            rmsea=idx.rmsea, srmsr=idx.srmsr, cfi=idx.cfi, tli=idx.tli,
            log_likelihood=res.log_likelihood, converged=res.converged, result=res,
        ))
    return ModelComparisonReport(tuple(_ordered(rows, lambda r: r.model)))


def compare_models(responses: ResponseMatrix,
                   configs: Sequence[CalibrationConfig] | None = None,
                   template: ItemBank | None = None) -> ModelComparisonReport:
    """Fit each configured model and tabulate M2-based fit indices.

    Rows come back in 1PL, 2PL, 3PL order; a model whose fit or diagnostics
    fail keeps its row with ``error`` set.
    """
    if configs is None:
        configs = [CalibrationConfig(model_kind=m) for m in MODEL_KINDS]
    kinds = [c.model_kind for c in configs]
    if len(set(kinds)) != len(kinds):
        raise ValueError("configs must cover distinct model kinds")
    results: list = []
    for cfg in _ordered(configs, lambda c: c.model_kind):
        try:
            results.append(fit(responses, cfg, template))
        except ValueError as exc:
            results.append((cfg.model_kind, exc))
    return summarize_fits(results, responses)
