"""Item response functions, information, likelihoods and response simulation.

All models use the pure logistic link (scaling constant D = 1):

    P(theta) = c + (1 - c) / (1 + exp(-a * (theta - b)))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Literal, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

ModelKind = Literal["1PL", "2PL", "3PL"]
MODEL_KINDS: tuple[str, ...] = ("1PL", "2PL", "3PL")

PROB_EPS = 1e-12


def normalize_model_kind(kind: str) -> str:
    """Accept '1pl', '2PL', ... and return the canonical upper-case label."""
    label = str(kind).strip().upper()
    if label not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    return label


@dataclass(frozen=True)
class ItemParameters:
    """A dichotomous item with optional bank metadata."""

    item_id: str
    a: float
    b: float
    c: float = 0.0
    model_kind: str = "3PL"
    subscale: str | None = None
    loading: float | None = None
    in_short_form: bool = False
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "model_kind", normalize_model_kind(self.model_kind))
        if not (math.isfinite(self.a) and self.a > 0):
            raise ValueError(f"item {self.item_id}: discrimination must be positive, got {self.a}")
        if not math.isfinite(self.b):
            raise ValueError(f"item {self.item_id}: difficulty must be finite")
        if not (0.0 <= self.c < 1.0):
            raise ValueError(f"item {self.item_id}: guessing must lie in [0, 1), got {self.c}")
        if self.model_kind in ("1PL", "2PL") and self.c != 0.0:
            raise ValueError(f"item {self.item_id}: {self.model_kind} items carry c = 0")
        if self.loading is not None and not (-1.0 <= self.loading <= 1.0):
            raise ValueError(f"item {self.item_id}: standardized loading outside [-1, 1]")
        if self.subscale is not None and not str(self.subscale):
            raise ValueError(f"item {self.item_id}: empty subscale label")


class ItemBank:
    """Ordered, id-unique collection of items.

    Parameter arrays (``a``, ``b``, ``c``) are cached as read-only numpy
    vectors in bank order.
    """

    def __init__(self, items: Iterable[ItemParameters] = (), extra: dict | None = None):
        self.items: tuple[ItemParameters, ...] = tuple(items)
        self.extra = dict(extra or {})
        ids = [it.item_id for it in self.items]
        seen = set()
        dupes = [i for i in ids if i in seen or seen.add(i)]
        if dupes:
            raise ValueError(f"duplicate item id: {', '.join(sorted(set(dupes)))}")
        self.a = np.array([it.a for it in self.items], dtype=float)
        self.b = np.array([it.b for it in self.items], dtype=float)
        self.c = np.array([it.c for it in self.items], dtype=float)
        for arr in (self.a, self.b, self.c):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[ItemParameters]:
        return iter(self.items)

    def __getitem__(self, key: int | str) -> ItemParameters:
        if isinstance(key, str):
            return self.items[self.index(key)]
        return self.items[key]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ItemBank):
            return NotImplemented
        return self.items == other.items and all(
            x.extra == y.extra for x, y in zip(self.items, other.items)
        ) and self.extra == other.extra

    def __repr__(self) -> str:
        return f"ItemBank({len(self)} items)"

    @property
    def ids(self) -> list[str]:
        return [it.item_id for it in self.items]

    def index(self, item_id: str) -> int:
        for i, it in enumerate(self.items):
            if it.item_id == item_id:
                return i
        raise KeyError(item_id)

    def subset(self, item_ids: Iterable[str]) -> "ItemBank":
        """Items with the given ids, in bank order."""
        wanted = set(item_ids)
        missing = wanted - set(self.ids)
        if missing:
            raise KeyError(f"items not in bank: {sorted(missing)}")
        return ItemBank([it for it in self.items if it.item_id in wanted], self.extra)

    def without(self, item_ids: Iterable[str]) -> "ItemBank":
        drop = set(item_ids)
        return ItemBank([it for it in self.items if it.item_id not in drop], self.extra)

    def short_form(self) -> "ItemBank":
        return ItemBank([it for it in self.items if it.in_short_form], self.extra)

    def subscale_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for it in self.items:
            if it.subscale is not None:
                counts[it.subscale] = counts.get(it.subscale, 0) + 1
        return counts

    def with_parameters(self, a, b, c, model_kind: str | None = None) -> "ItemBank":
        """Copy of the bank with new parameter vectors, metadata kept."""
        items = []
        for it, ai, bi, ci in zip(self.items, a, b, c):
            items.append(replace(it, a=float(ai), b=float(bi), c=float(ci),
                                 model_kind=model_kind or it.model_kind))
        return ItemBank(items, self.extra)


@dataclass(frozen=True)
class ResponseMatrix:
    """Persons x items binary scores; ``NaN`` marks a missing cell."""

    data: np.ndarray
    item_ids: tuple[str, ...]
    person_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim == 1 and data.size == 0:
            data = data.reshape(0, len(self.item_ids))
        if data.ndim != 2:
            raise ValueError("response data must be two-dimensional")
        if data.shape[1] != len(self.item_ids):
            raise ValueError(
                f"{data.shape[1]} response columns but {len(self.item_ids)} item ids"
            )
        if len(set(self.item_ids)) != len(self.item_ids):
            raise ValueError("duplicate item id in response header")
        observed = data[~np.isnan(data)]
        if observed.size and not np.all((observed == 0) | (observed == 1)):
            raise ValueError("response cells must be 0, 1 or missing")
        if self.person_ids is not None and len(self.person_ids) != data.shape[0]:
            raise ValueError("person id count does not match rows")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "item_ids", tuple(str(i) for i in self.item_ids))
        if self.person_ids is not None:
            object.__setattr__(self, "person_ids", tuple(str(p) for p in self.person_ids))

    @property
    def n_persons(self) -> int:
        return self.data.shape[0]

    @property
    def n_items(self) -> int:
        return self.data.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """True where a cell was observed."""
        return ~np.isnan(self.data)

    @property
    def n_missing(self) -> int:
        return int(np.isnan(self.data).sum())

    def columns(self, item_ids: Sequence[str]) -> "ResponseMatrix":
        idx = [self.item_ids.index(i) for i in item_ids]
        return ResponseMatrix(self.data[:, idx], tuple(item_ids), self.person_ids)

    def drop_items(self, item_ids: Iterable[str]) -> "ResponseMatrix":
        drop = set(item_ids)
        return self.columns([i for i in self.item_ids if i not in drop])

    def complete_rows(self) -> "ResponseMatrix":
        keep = self.mask.all(axis=1)
        pids = None if self.person_ids is None else tuple(
            p for p, k in zip(self.person_ids, keep) if k
        )
        return ResponseMatrix(self.data[keep], self.item_ids, pids)


@dataclass(frozen=True)
class ThetaGrid:
    """Quadrature nodes on the latent scale with standard-normal weights."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or weights.shape != nodes.shape:
            raise ValueError("nodes and weights must be 1-D and equally long")
        if nodes.size > 1 and np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        if np.any(weights < 0):
            raise ValueError("grid weights must be nonnegative")
        total = weights.sum()
        if nodes.size and total > 0:
            weights = weights / total
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def normal(cls, n_nodes: int = 61, lo: float = -6.0, hi: float = 6.0) -> "ThetaGrid":
        """Equispaced nodes weighted by the N(0, 1) density, renormalized."""
        nodes = np.linspace(lo, hi, n_nodes)
        return cls(nodes, norm.pdf(nodes))

    def __len__(self) -> int:
        return self.nodes.size


DEFAULT_GRID = ThetaGrid.normal(61, -6.0, 6.0)
CURVE_GRID = ThetaGrid.normal(121, -6.0, 6.0)


# -- vectorized kernels -------------------------------------------------------

def irf_matrix(a, b, c, theta) -> np.ndarray:
    """P for every (theta, item) pair: shape ``(len(theta), len(a))``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    a, b, c = (np.asarray(v, dtype=float) for v in (a, b, c))
    logistic = expit(a * (theta[:, None] - b))
    return c + (1.0 - c) * logistic


def information_matrix(a, b, c, theta) -> np.ndarray:
    """Fisher information per (theta, item) pair."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    a, b, c = (np.asarray(v, dtype=float) for v in (a, b, c))
    logistic = expit(a * (theta[:, None] - b))
    p = c + (1.0 - c) * logistic
    # a^2 (Q/P) ((P-c)/(1-c))^2 rewritten so nothing blows up as P -> c
    q = (1.0 - c) * (1.0 - logistic)
    return a**2 * logistic**2 * q / p


# -- single-item / bank operations --------------------------------------------

def irf(item: ItemParameters, theta):
    """Probability of a correct response; scalar in, scalar out."""
    p = irf_matrix([item.a], [item.b], [item.c], theta)[:, 0]
    return float(p[0]) if np.ndim(theta) == 0 else p


def item_information(item: ItemParameters, theta):
    info = information_matrix([item.a], [item.b], [item.c], theta)[:, 0]
    return float(info[0]) if np.ndim(theta) == 0 else info


def test_information(bank: ItemBank, theta):
    """Sum of item information over the bank; 0 for an empty bank."""
    theta_arr = np.atleast_1d(np.asarray(theta, dtype=float))
    if len(bank) == 0:
        total = np.zeros(theta_arr.shape)
    else:
        total = information_matrix(bank.a, bank.b, bank.c, theta_arr).sum(axis=1)
    return float(total[0]) if np.ndim(theta) == 0 else total


test_information.__test__ = False  # keep pytest from collecting it


@dataclass(frozen=True)
class TIFSummary:
    peak_value: float
    peak_theta: float
    average_information: float


def tif_summary(bank: ItemBank, grid: ThetaGrid = CURVE_GRID) -> TIFSummary:
    """Peak and unweighted mean of the test information over the grid nodes.

    Ties for the peak resolve to the smallest theta.
    """
    if len(grid) == 0:
        raise ValueError("empty evaluation grid")
    tif = test_information(bank, grid.nodes)
    k = int(np.argmax(tif))  # first maximum == smallest theta
    return TIFSummary(float(tif[k]), float(grid.nodes[k]), float(tif.mean()))


def log_likelihood(bank: ItemBank, responses, theta) -> float | np.ndarray:
    """Bernoulli log-likelihood of one response vector.

    Missing entries (NaN) contribute nothing; probabilities are clamped to
    [1e-12, 1 - 1e-12].
    """
    y = np.asarray(responses, dtype=float)
    if y.shape != (len(bank),):
        raise ValueError("response vector is not aligned with the bank")
    theta_arr = np.atleast_1d(np.asarray(theta, dtype=float))
    obs = ~np.isnan(y)
    if not obs.any():
        out = np.zeros(theta_arr.shape)
    else:
        p = irf_matrix(bank.a[obs], bank.b[obs], bank.c[obs], theta_arr)
        p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
        yo = y[obs]
        out = np.log(p) @ yo + np.log1p(-p) @ (1.0 - yo)
    return float(out[0]) if np.ndim(theta) == 0 else out


def pattern_log_likelihoods(a, b, c, data: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Log-likelihood of every row of ``data`` at every node: ``(N, Q)``."""
    p = np.clip(irf_matrix(a, b, c, nodes), PROB_EPS, 1.0 - PROB_EPS)
    obs = ~np.isnan(data)
    y1 = np.where(obs, data, 0.0)
    y0 = np.where(obs, 1.0 - np.nan_to_num(data), 0.0)
    return y1 @ np.log(p).T + y0 @ np.log1p(-p).T


_SIM_BLOCK = 4096


def simulate_responses(bank: ItemBank, thetas, seed: int) -> ResponseMatrix:
    """Draw Bernoulli responses for each person at the given abilities.

    Persons are processed in fixed blocks, each with its own child stream of
    ``SeedSequence(seed)``, so output is independent of how blocks are
    scheduled.
    """
    if len(bank) == 0:
        raise ValueError("cannot simulate from an empty bank")
    thetas = np.asarray(thetas, dtype=float).ravel()
    n = thetas.size
    out = np.empty((n, len(bank)))
    n_blocks = -(-n // _SIM_BLOCK)
    children = np.random.SeedSequence(seed).spawn(max(n_blocks, 1))
    for blk in range(n_blocks):
        lo, hi = blk * _SIM_BLOCK, min(n, (blk + 1) * _SIM_BLOCK)
        rng = np.random.default_rng(children[blk])
        p = irf_matrix(bank.a, bank.b, bank.c, thetas[lo:hi])
        out[lo:hi] = (rng.random(p.shape) < p).astype(float)
    return ResponseMatrix(out, tuple(bank.ids))
