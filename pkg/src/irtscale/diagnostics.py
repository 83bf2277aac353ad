"""Goodness of fit and local dependence: M2 and derived indices, infit/outfit, Q3."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.stats import chi2

from .model import (
    DEFAULT_GRID,
    PROB_EPS,
    ItemBank,
    ResponseMatrix,
    ThetaGrid,
    irf_matrix,
    normalize_model_kind,
)

FD_STEP = 1e-5
_LARGE_K = 120


class M2Error(ValueError):
    pass


@dataclass(frozen=True)
class M2Report:
    m2: float
    df: int
    p_value: float
    n_persons: int


@dataclass(frozen=True)
class FitIndices:
    rmsea: float
    srmsr: float
    cfi: float
    tli: float


@dataclass(frozen=True)
class ItemFitReport:
    item_ids: tuple[str, ...]
    infit: np.ndarray
    outfit: np.ndarray

    def rows(self) -> list[dict]:
        return [{"item": i, "infit": _none_if_nan(f), "outfit": _none_if_nan(o)}
                for i, f, o in zip(self.item_ids, self.infit, self.outfit)]


@dataclass(frozen=True)
class Q3Report:
    item_ids: tuple[str, ...]
    matrix: np.ndarray
    threshold: float
    flagged: tuple[tuple[str, str, float], ...]

    def value(self, i: str, j: str) -> float:
        return float(self.matrix[self.item_ids.index(i), self.item_ids.index(j)])

    @property
    def max_abs(self) -> float:
        off = self.matrix[~np.eye(len(self.item_ids), dtype=bool)]
        off = off[~np.isnan(off)]
        return float(np.abs(off).max()) if off.size else math.nan


def _none_if_nan(x):
    return None if x is None or not np.isfinite(x) else float(x)


# -- helpers for results / banks / thetas -------------------------------------

def _bank_kind_grid(result) -> tuple[ItemBank, str, ThetaGrid]:
    """Accept a CalibrationResult or a bare ItemBank."""
    if isinstance(result, ItemBank):
        kinds = {it.model_kind for it in result}
        kind = kinds.pop() if len(kinds) == 1 else "3PL"
        return result, kind, DEFAULT_GRID
    return result.bank, result.model_kind, result.grid


def _theta_array(thetas) -> np.ndarray:
    if len(thetas) and hasattr(thetas[0], "theta_eap"):
        return np.array([t.theta_eap for t in thetas], dtype=float)
    return np.asarray(thetas, dtype=float)


def _aligned(bank: ItemBank, responses: ResponseMatrix) -> np.ndarray:
    if tuple(bank.ids) == responses.item_ids:
        return responses.data
    return responses.columns(bank.ids).data


# -- degrees of freedom & indices ---------------------------------------------

def n_free_parameters(k: int, model_kind: str) -> int:
    kind = normalize_model_kind(model_kind)
    return {"1PL": k + 1, "2PL": 2 * k, "3PL": 3 * k}[kind]


def m2_degrees_of_freedom(k: int, model_kind: str) -> int:
    """First- plus second-order margins minus free parameters."""
    s = k + k * (k - 1) // 2
    df = s - n_free_parameters(k, model_kind)
    if k < 3 or df < 1:
        raise M2Error(f"insufficient items for M2 (k={k}, {model_kind})")
    return df


def fit_indices(report: M2Report, null_report: M2Report, srmsr: float = math.nan) -> FitIndices:
    """RMSEA, CFI and TLI from M2 and an independence-baseline M2.

    RMSEA uses the (N - 1) denominator.
    """
    if null_report.df <= 0:
        raise M2Error("baseline model has no degrees of freedom")
    m2, df, n = report.m2, report.df, report.n_persons
    excess = max(m2 - df, 0.0)
    rmsea = math.sqrt(excess / (df * (n - 1)))
    null_excess = null_report.m2 - null_report.df
    denom = max(null_excess, m2 - df, 0.0)
    cfi = 1.0 - excess / denom if denom > 0 else 1.0
    null_ratio = null_report.m2 / null_report.df
    tli = (null_ratio - m2 / df) / (null_ratio - 1.0) if null_ratio != 1.0 else math.nan
    return FitIndices(rmsea=rmsea, srmsr=srmsr, cfi=cfi, tli=tli)


# -- margins ------------------------------------------------------------------

class _Margins:
    """Index bookkeeping for the s = k + k(k-1)/2 univariate and bivariate margins."""

    def __init__(self, k: int):
        self.k = k
        self.iu, self.ju = np.triu_indices(k, 1)
        self.s = k + self.iu.size
        pair = np.full((k, k), -1, dtype=int)
        pair[self.iu, self.ju] = k + np.arange(self.iu.size)
        pair[self.ju, self.iu] = pair[self.iu, self.ju]
        self.pair = pair

    def node_products(self, P: np.ndarray) -> np.ndarray:
        return np.hstack([P, P[:, self.iu] * P[:, self.ju]])

    def implied(self, P: np.ndarray, w: np.ndarray) -> np.ndarray:
        return w @ self.node_products(P)

    def covariance(self, P: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Model-implied margins and their multinomial asymptotic covariance.

        Cov(m_u, m_v) = E[prod_{u union v} y] - pi_u pi_v; because y^2 = y,
        margins sharing an item need the union product, not f_u * f_v.
        """
        f = self.node_products(P)
        pi = w @ f
        E = (f * w[:, None]).T @ f
        k = self.k
        for i in range(k):
            members = self.pair[i].copy()
            members[i] = i
            rest = P.copy()
            rest[:, i] = 1.0
            # margins containing i: P_i * rest_u * rest_v
            block = (rest * (w * P[:, i])[:, None]).T @ rest
            E[np.ix_(members, members)] = block
        E[np.diag_indices_from(E)] = pi
        return pi, E - np.outer(pi, pi)

    def observed(self, data: np.ndarray) -> np.ndarray:
        n = data.shape[0]
        p1 = data.mean(axis=0)
        p2 = (data.T @ data / n)[self.iu, self.ju]
        return np.concatenate([p1, p2])


def _m2_core(data: np.ndarray, prob_fn: Callable[[np.ndarray], np.ndarray], params: np.ndarray,
             weights: np.ndarray, df: int, param_names: Sequence[str]) -> M2Report:
    n, k = data.shape
    margins = _Margins(k)
    if k > _LARGE_K:
        warnings.warn(f"M2 with k={k} items factors a {margins.s}x{margins.s} matrix; "
                      "expect long run time and large memory use", RuntimeWarning, stacklevel=3)
    P = np.clip(prob_fn(params), PROB_EPS, 1.0 - PROB_EPS)
    pi, xi = margins.covariance(P, weights)

    delta = np.empty((margins.s, params.size))
    for j in range(params.size):
        up, down = params.copy(), params.copy()
        up[j] += FD_STEP
        down[j] -= FD_STEP
        delta[:, j] = (margins.implied(prob_fn(up), weights)
                       - margins.implied(prob_fn(down), weights)) / (2 * FD_STEP)

    try:
        chol = linalg.cho_factor(xi, lower=True)
    except linalg.LinAlgError as exc:
        cond = np.linalg.cond(xi)
        raise M2Error(f"margin covariance is not invertible (condition number {cond:.3g})") from exc

    xi_inv_delta = linalg.cho_solve(chol, delta)
    info = delta.T @ xi_inv_delta
    evals = np.linalg.eigvalsh(info)
    if evals[0] <= 1e-12 * max(evals[-1], 1e-300):
        whitened = linalg.solve_triangular(chol[0], delta, lower=True)
        _, r, piv = linalg.qr(whitened, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        rank = int(np.sum(diag > 1e-8 * diag[0]))
        bad = [param_names[c] for c in piv[rank:]]
        raise M2Error(f"rank-deficient Jacobian (unidentified parameter): {', '.join(bad)}")

    resid = margins.observed(data) - pi
    xi_inv_e = linalg.cho_solve(chol, resid)
    proj = delta.T @ xi_inv_e
    quad = resid @ xi_inv_e - proj @ np.linalg.solve(info, proj)
    m2 = max(float(n * quad), 0.0)
    return M2Report(m2=m2, df=df, p_value=float(chi2.sf(m2, df)), n_persons=n)


def _complete(data: np.ndarray, what: str) -> np.ndarray:
    keep = ~np.isnan(data).any(axis=1)
    if not keep.all():
        warnings.warn(f"{what}: dropped {int((~keep).sum())} incomplete response rows",
                      RuntimeWarning, stacklevel=3)
    return data[keep]


def _irt_prob_fn(kind: str, k: int, nodes: np.ndarray):
    def prob(x):
        if kind == "1PL":
            a, b, c = np.full(k, x[0]), x[1:], np.zeros(k)
        elif kind == "2PL":
            a, b, c = x[:k], x[k:], np.zeros(k)
        else:
            a, b, c = x[:k], x[k:2 * k], x[2 * k:]
        return irf_matrix(a, b, c, nodes)
    return prob


def _irt_params(bank: ItemBank, kind: str) -> tuple[np.ndarray, list[str]]:
    ids = bank.ids
    if kind == "1PL":
        return (np.concatenate([[bank.a.mean()], bank.b]),
                ["a[shared]"] + [f"b[{i}]" for i in ids])
    names = [f"a[{i}]" for i in ids] + [f"b[{i}]" for i in ids]
    if kind == "2PL":
        return np.concatenate([bank.a, bank.b]), names
    return (np.concatenate([bank.a, bank.b, bank.c]), names + [f"c[{i}]" for i in ids])


def m2_statistic(result, responses: ResponseMatrix) -> M2Report:
    """Limited-information M2 for a fitted IRT model.

    Incomplete rows are dropped before computing margins.
    """
    bank, kind, grid = _bank_kind_grid(result)
    data = _complete(_aligned(bank, responses), "M2")
    k = len(bank)
    df = m2_degrees_of_freedom(k, kind)
    params, names = _irt_params(bank, kind)
    return _m2_core(data, _irt_prob_fn(kind, k, grid.nodes), params, grid.weights, df, names)


def independence_m2(responses: ResponseMatrix) -> M2Report:
    """M2 of the baseline in which items are independent with free proportions.

    This is the IRT machinery with a single latent node whose response
    probabilities are the item proportions.
    """
    data = _complete(responses.data, "baseline M2")
    k = data.shape[1]
    if k < 2:
        raise M2Error("baseline model has no degrees of freedom")
    props = data.mean(axis=0)
    if np.any((props <= 0) | (props >= 1)):
        raise M2Error("baseline M2 needs every item to have both responses")
    return _m2_core(data, lambda p: p[None, :], props, np.ones(1), k * (k - 1) // 2,
                    [f"p[{i}]" for i in responses.item_ids])


# -- SRMSR --------------------------------------------------------------------

def _phi(p_i, p_j, p_ij):
    return (p_ij - p_i * p_j) / np.sqrt(p_i * (1 - p_i) * p_j * (1 - p_j))


def srmsr(result, responses: ResponseMatrix) -> float:
    """Root mean square of observed minus model-implied phi correlations."""
    bank, _, grid = _bank_kind_grid(result)
    data = _aligned(bank, responses)
    k = len(bank)
    margins = _Margins(k)
    P = irf_matrix(bank.a, bank.b, bank.c, grid.nodes)
    pi = margins.implied(P, grid.weights)
    model_r = _phi(pi[margins.iu], pi[margins.ju], pi[k:])

    obs = ~np.isnan(data)
    y = np.where(obs, data, 0.0)
    m = obs.astype(float)
    n_ij = m.T @ m
    s_i = y.T @ m  # sum of y_i over rows where j is observed
    s_ij = y.T @ y
    iu, ju = margins.iu, margins.ju
    with np.errstate(invalid="ignore", divide="ignore"):
        p_i = s_i[iu, ju] / n_ij[iu, ju]
        p_j = s_i.T[iu, ju] / n_ij[iu, ju]
        p_ij = s_ij[iu, ju] / n_ij[iu, ju]
        sample_r = _phi(p_i, p_j, p_ij)
    ok = np.isfinite(sample_r)
    if not ok.all():
        warnings.warn(f"SRMSR: {int((~ok).sum())} item pairs without variance excluded",
                      RuntimeWarning, stacklevel=2)
    if not ok.any():
        return math.nan
    return float(np.sqrt(np.mean((sample_r[ok] - model_r[ok]) ** 2)))


# -- person-level residual statistics -----------------------------------------

def infit_outfit(result, responses: ResponseMatrix, thetas) -> ItemFitReport:
    """Information-weighted (infit) and unweighted (outfit) mean squares.

    ``thetas`` are the per-person plug-in abilities (EAP estimates or a
    plain array). Items with no observed cells get NaN.
    """
    bank, _, _ = _bank_kind_grid(result)
    data = _aligned(bank, responses)
    theta = _theta_array(thetas)
    P = irf_matrix(bank.a, bank.b, bank.c, theta)
    W = P * (1.0 - P)
    obs = ~np.isnan(data)
    sq = np.where(obs, (np.nan_to_num(data) - P) ** 2, 0.0)
    Wm = np.where(obs, W, 0.0)
    counts = obs.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        outfit = np.where(obs, sq / W, 0.0).sum(axis=0) / counts
        infit = sq.sum(axis=0) / Wm.sum(axis=0)
    outfit = np.where(counts > 0, outfit, np.nan)
    infit = np.where(counts > 0, infit, np.nan)
    return ItemFitReport(tuple(bank.ids), infit, outfit)


def q3_matrix(result, responses: ResponseMatrix, thetas, threshold: float = 0.2) -> Q3Report:
    """Yen's Q3: correlations of person residuals y - P(theta_hat) between items.

    Each pair uses the persons observed on both items; pairs with fewer than
    three such persons are left as NaN.
    """
    bank, _, _ = _bank_kind_grid(result)
    data = _aligned(bank, responses)
    theta = _theta_array(thetas)
    P = irf_matrix(bank.a, bank.b, bank.c, theta)
    obs = ~np.isnan(data)
    m = obs.astype(float)
    e = np.where(obs, np.nan_to_num(data) - P, 0.0)

    n = m.T @ m
    sx = e.T @ m          # sum e_i over rows with j observed
    sxx = (e * e).T @ m
    sxy = e.T @ e
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = sxy - sx * sx.T / n
        var_i = sxx - sx**2 / n
        q3 = cov / np.sqrt(var_i * var_i.T)
    q3 = np.clip(q3, -1.0, 1.0)
    sparse = n < 3
    if np.any(sparse & ~np.eye(len(bank), dtype=bool)):
        warnings.warn("Q3: some item pairs have fewer than 3 joint observations",
                      RuntimeWarning, stacklevel=2)
    q3[sparse] = np.nan
    q3 = (q3 + q3.T) / 2  # exact symmetry regardless of accumulation order
    np.fill_diagonal(q3, np.nan)

    ids = tuple(bank.ids)
    iu, ju = np.triu_indices(len(ids), 1)
    vals = q3[iu, ju]
    hit = np.abs(vals) > threshold
    flagged = sorted(((ids[i], ids[j], float(v)) for i, j, v, h in zip(iu, ju, vals, hit) if h),
                     key=lambda t: -abs(t[2]))
    return Q3Report(ids, q3, threshold, tuple(flagged))
