"""EAP ability scoring and the reliability battery."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .model import (
    DEFAULT_GRID,
    ItemBank,
    ResponseMatrix,
    ThetaGrid,
    pattern_log_likelihoods,
    simulate_responses,
    test_information,
)


@dataclass(frozen=True)
class AbilityEstimate:
    person: int
    theta_eap: float
    posterior_sd: float
    n_answered: int


def _posterior_moments(bank: ItemBank, data: np.ndarray, grid: ThetaGrid):
    nodes = grid.nodes
    with np.errstate(divide="ignore"):
        log_w = np.log(grid.weights)
    if len(bank) == 0:
        ll = np.zeros((data.shape[0], nodes.size))
    else:
        ll = pattern_log_likelihoods(bank.a, bank.b, bank.c, data, nodes)
    joint = ll + log_w
    post = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
    mean = post @ nodes
    # centered second moment; E[t^2] - E[t]^2 cancels badly for peaked posteriors
    var = np.einsum("pq,pq->p", post, (nodes[None, :] - mean[:, None]) ** 2)
    return mean, np.sqrt(np.maximum(var, 0.0))


def score_eap(bank: ItemBank, response_vector, grid: ThetaGrid = DEFAULT_GRID,
              person: int = 0) -> AbilityEstimate:
    """Posterior mean and SD of theta under the N(0, 1) prior."""
    y = np.asarray(response_vector, dtype=float)
    if y.shape != (len(bank),):
        raise ValueError("response vector is not aligned with the bank")
    mean, sd = _posterior_moments(bank, y[None, :], grid)
    return AbilityEstimate(person, float(mean[0]), float(sd[0]), int((~np.isnan(y)).sum()))


def score_responses(bank: ItemBank, responses: ResponseMatrix,
                    grid: ThetaGrid = DEFAULT_GRID) -> list[AbilityEstimate]:
    data = responses.columns(bank.ids).data if tuple(bank.ids) != responses.item_ids \
        else responses.data
    mean, sd = _posterior_moments(bank, data, grid)
    answered = (~np.isnan(data)).sum(axis=1)
    return [AbilityEstimate(p, float(m), float(s), int(n))
            for p, (m, s, n) in enumerate(zip(mean, sd, answered))]


def eap_marginal_reliability(bank: ItemBank, grid: ThetaGrid = DEFAULT_GRID,
                             method: str = "information", n_sim: int = 5000,
                             seed: int = 0) -> float:
    """Marginal reliability 1 - E_prior[posterior variance].

    ``method="information"`` integrates the large-sample posterior variance
    1 / (1 + I(theta)) against the prior on ``grid``; it is deterministic and
    never decreases when items are added. ``method="simulation"`` draws
    ``n_sim`` response patterns and averages their exact EAP posterior
    variances.
    """
    if len(bank) == 0:
        return 0.0
    if method == "information":
        info = test_information(bank, grid.nodes)
        return float(1.0 - grid.weights @ (1.0 / (1.0 + info)))
    if method == "simulation":
        rng = np.random.default_rng(seed)
        sims = simulate_responses(bank, rng.standard_normal(n_sim), seed)
        _, sd = _posterior_moments(bank, sims.data, grid)
        return float(1.0 - np.mean(sd**2))
    raise ValueError(f"unknown method {method!r}")


def empirical_reliability(estimates: Sequence[AbilityEstimate]) -> float:
    """var(theta_hat) / (var(theta_hat) + mean posterior variance)."""
    if len(estimates) < 2:
        raise ValueError("empirical reliability needs at least 2 estimates")
    theta = np.array([e.theta_eap for e in estimates])
    sd = np.array([e.posterior_sd for e in estimates])
    var = theta.var(ddof=1)
    total = var + np.mean(sd**2)
    if total <= 0:
        warnings.warn("empirical reliability: zero total variance", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(var / total)


def conditional_reliability(bank: ItemBank, theta):
    """I(theta) / (I(theta) + 1), the reliability at a fixed ability for unit prior variance."""
    info = test_information(bank, theta)
    return info / (info + 1.0)


def _alpha_listwise(responses: ResponseMatrix) -> tuple[float, int]:
    data = responses.data
    keep = ~np.isnan(data).any(axis=1)
    dropped = int((~keep).sum())
    data = data[keep]
    k = data.shape[1]
    if k < 2:
        raise ValueError("Cronbach's alpha needs at least 2 items")
    if data.shape[0] < 2:
        raise ValueError("Cronbach's alpha needs at least 2 complete rows")
    total_var = data.sum(axis=1).var(ddof=1)
    if total_var == 0:
        raise ValueError("constant total score")
    item_var = data.var(axis=0, ddof=1).sum()
    return float(k / (k - 1) * (1.0 - item_var / total_var)), dropped


def cronbach_alpha(responses: ResponseMatrix) -> float:
    """Classical alpha on complete rows (incomplete rows are dropped, with a warning)."""
    alpha, dropped = _alpha_listwise(responses)
    if dropped:
        warnings.warn(f"Cronbach's alpha: {dropped} incomplete rows deleted listwise",
                      RuntimeWarning, stacklevel=2)
    return alpha


def composite_reliability(loadings: Sequence[float]) -> float:
    lam = np.asarray(loadings, dtype=float)
    if lam.size == 0:
        raise ValueError("composite reliability needs at least one loading")
    if np.any(np.abs(lam) > 1):
        raise ValueError("standardized loadings must lie in [-1, 1]")
    num = lam.sum() ** 2
    return float(num / (num + np.sum(1.0 - lam**2)))


@dataclass(frozen=True)
class WrightMap:
    bin_edges: np.ndarray
    person_counts: np.ndarray
    items: tuple[tuple[str, float], ...]

    def rows(self) -> list[dict]:
        out = [{"kind": "person_bin", "lower": float(lo), "upper": float(hi), "count": int(n)}
               for lo, hi, n in zip(self.bin_edges[:-1], self.bin_edges[1:], self.person_counts)]
        out += [{"kind": "item", "id": iid, "logit": b} for iid, b in self.items]
        return out


def wright_map_data(bank: ItemBank, estimates: Sequence[AbilityEstimate],
                    bin_width: float = 0.25) -> WrightMap:
    """Histogram of person EAPs next to item difficulties, sorted by b.

    Bin edges are multiples of ``bin_width``.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    items = tuple(sorted(((it.item_id, it.b) for it in bank), key=lambda t: (t[1], t[0])))
    theta = np.array([e.theta_eap for e in estimates], dtype=float)
    if theta.size == 0:
        return WrightMap(np.array([]), np.array([], dtype=int), items)
    lo = math.floor(theta.min() / bin_width) * bin_width
    hi = (math.floor(theta.max() / bin_width) + 1) * bin_width
    edges = np.arange(round((hi - lo) / bin_width) + 1) * bin_width + lo
    counts, _ = np.histogram(theta, bins=edges)
    return WrightMap(edges, counts, items)


@dataclass(frozen=True)
class ReliabilityReport:
    eap_marginal: float
    empirical: float
    conditional: dict[float, float]
    cronbach_alpha: float
    alpha_rows_deleted: int
    composite: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "eap_marginal": self.eap_marginal,
            "empirical": self.empirical,
            "conditional": {f"{k:g}": v for k, v in self.conditional.items()},
            "cronbach_alpha": self.cronbach_alpha,
            "alpha_rows_deleted": self.alpha_rows_deleted,
            "composite": self.composite,
        }


def reliability_report(bank: ItemBank, responses: ResponseMatrix,
                       estimates: Sequence[AbilityEstimate] | None = None,
                       grid: ThetaGrid = DEFAULT_GRID,
                       conditional_at: Sequence[float] = (-3, -2, -1, 0, 1, 2, 3)) -> ReliabilityReport:
    """All reliability indices for one bank and data set.

    Composite reliability is computed per subscale from bank loadings where
    every item of the subscale carries one.
    """
    if estimates is None:
        estimates = score_responses(bank, responses, grid)
    try:
        alpha, dropped = _alpha_listwise(responses.columns(bank.ids))
    except ValueError:
        alpha, dropped = math.nan, 0
    groups: dict[str, list[float | None]] = {}
    for it in bank:
        if it.subscale is not None:
            groups.setdefault(it.subscale, []).append(it.loading)
    composite = {s: composite_reliability(l) for s, l in groups.items()
                 if all(x is not None for x in l)}
    return ReliabilityReport(
        eap_marginal=eap_marginal_reliability(bank, grid),
        empirical=empirical_reliability(estimates) if len(estimates) >= 2 else math.nan,
        conditional={float(t): float(conditional_reliability(bank, float(t)))
                     for t in conditional_at},
        cronbach_alpha=alpha,
        alpha_rows_deleted=dropped,
        composite=composite,
    )
