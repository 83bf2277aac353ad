"""Item flagging, Q3-driven exclusion, the reduction pipeline and short forms."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import diagnostics
from .estimation import (
    CalibrationConfig,
    CalibrationResult,
    ModelComparisonReport,
    ModelComparisonRow,
    fit,
    summarize_fits,
)
from .model import CURVE_GRID, MODEL_KINDS, ItemBank, ResponseMatrix, ThetaGrid, test_information
from .scoring import score_responses

BANDS = ("very easy", "easy", "moderate", "difficult", "very difficult")


def difficulty_band(b: float) -> str:
    """Difficulty label with cut points at -2, -1, 1 and 2.

    b <= -2 very easy; -2 < b < -1 easy; -1 <= b <= 1 moderate;
    1 < b <= 2 difficult; b > 2 very difficult.
    """
    if b <= -2.0:
        return "very easy"
    if b < -1.0:
        return "easy"
    if b <= 1.0:
        return "moderate"
    if b <= 2.0:
        return "difficult"
    return "very difficult"


@dataclass(frozen=True)
class EliminationRules:
    b_range: tuple[float, float] = (-3.0, 3.0)
    a_min: float = 0.35
    a_max: float = 2.5
    c_max: float = 0.35
    q3_threshold: float = 0.2

    def __post_init__(self):
        lo, hi = self.b_range
        if not lo < hi:
            raise ValueError("b_range is not well ordered")
        if not 0 < self.a_min < self.a_max:
            raise ValueError("need 0 < a_min < a_max")
        if not 0 < self.c_max < 1:
            raise ValueError("c_max must lie in (0, 1)")
        if not 0 < self.q3_threshold < 1:
            raise ValueError("q3_threshold must lie in (0, 1)")
        object.__setattr__(self, "b_range", (float(lo), float(hi)))


@dataclass(frozen=True)
class Flag:
    item_id: str
    parameter: str
    value: float
    bound: float
    band: str
    retained_reason: str | None = None


@dataclass(frozen=True)
class FlagReport:
    flags: tuple[Flag, ...]

    def __len__(self) -> int:
        return len(self.flags)

    @property
    def item_ids(self) -> set[str]:
        return {f.item_id for f in self.flags}

    def as_set(self) -> set[tuple[str, str]]:
        return {(f.item_id, f.parameter) for f in self.flags}

    def rows(self) -> list[dict]:
        return [{"item": f.item_id, "parameter": f.parameter, "value": f.value,
                 "bound": f.bound, "band": f.band, "retained_reason": f.retained_reason}
                for f in self.flags]


def flag_items(bank: ItemBank, rules: EliminationRules | None = None,
               retained: Mapping[str, str] | None = None) -> FlagReport:
    """Flag parameters outside the elimination guidelines.

    Flags are data: the bank is untouched. ``retained`` maps item ids to the
    caller's reason for keeping a flagged item.
    """
    rules = rules or EliminationRules()
    retained = retained or {}
    flags = []
    for it in bank:
        band = difficulty_band(it.b)
        reason = retained.get(it.item_id)
        lo, hi = rules.b_range
        if it.b < lo:
            flags.append(Flag(it.item_id, "b", it.b, lo, band, reason))
        elif it.b > hi:
            flags.append(Flag(it.item_id, "b", it.b, hi, band, reason))
        if it.a < rules.a_min:
            flags.append(Flag(it.item_id, "a", it.a, rules.a_min, band, reason))
        elif it.a > rules.a_max:
            flags.append(Flag(it.item_id, "a", it.a, rules.a_max, band, reason))
        if it.c > rules.c_max:
            flags.append(Flag(it.item_id, "c", it.c, rules.c_max, band, reason))
    return FlagReport(tuple(flags))


def resolve_local_dependence(q3: diagnostics.Q3Report, bank: ItemBank) -> list[str]:
    """Greedy exclusions for flagged Q3 pairs, strongest |Q3| first.

    Of each pair, the item from the larger subscale goes; equal sizes fall
    back to dropping the lower discrimination. Pairs touching an item that
    is already excluded are skipped, and subscale sizes are recounted after
    each removal.
    """
    excluded: list[str] = []
    counts = bank.subscale_counts()
    for i, j, _ in sorted(q3.flagged, key=lambda t: -abs(t[2])):
        if i in excluded or j in excluded:
            continue
        if i not in bank.ids or j not in bank.ids:
            continue
        it, jt = bank[i], bank[j]
        ni = counts.get(it.subscale, 0) if it.subscale else 0
        nj = counts.get(jt.subscale, 0) if jt.subscale else 0
        if ni != nj:
            drop = it if ni > nj else jt
        else:
            drop = it if it.a < jt.a else jt
        excluded.append(drop.item_id)
        if drop.subscale:
            counts[drop.subscale] -= 1
    return excluded


# -- pipeline -----------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    rules: EliminationRules = field(default_factory=EliminationRules)
    models: tuple[str, ...] = MODEL_KINDS
    alpha: float = 0.05
    retained: Mapping[str, str] = field(default_factory=dict)
    template: ItemBank | None = None


@dataclass(frozen=True)
class PipelineResult:
    stages: tuple[str, ...]
    initial_comparison: ModelComparisonReport
    selected_model: str
    q3: diagnostics.Q3Report
    excluded: tuple[str, ...]
    final_comparison: ModelComparisonReport
    final_result: CalibrationResult
    flags: FlagReport

    @property
    def final_bank(self) -> ItemBank:
        return self.final_result.bank


def select_model(report: ModelComparisonReport, alpha: float = 0.05) -> str:
    """Best row: non-significant M2 first, then lower RMSEA, higher CFI, higher p."""
    rows = [r for r in report.rows if not r.failed]
    if not rows:
        raise ValueError("no model could be evaluated")

    def key(r: ModelComparisonRow):
        rmsea = math.inf if math.isnan(r.rmsea) else r.rmsea
        cfi = -math.inf if math.isnan(r.cfi) else r.cfi
        p = -math.inf if math.isnan(r.p_value) else r.p_value
        return (not p >= alpha, rmsea, -cfi, -p)

    return min(rows, key=key).model


def _fit_all(responses, config: PipelineConfig):
    out = []
    for kind in config.models:
        cfg = CalibrationConfig(**{**config.calibration.__dict__, "model_kind": kind})
        try:
            out.append(fit(responses, cfg, config.template))
        except ValueError as exc:
            out.append((kind, exc))
    return out


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        super().__init__(f"[{stage}] {cause}")


def run_reduction_pipeline(responses: ResponseMatrix,
                           config: PipelineConfig | None = None) -> PipelineResult:
    """fit -> compare -> q3 -> exclude -> refit -> flag."""
    config = config or PipelineConfig()
    stages = []

    def stage(name, fn, *args):
        try:
            out = fn(*args)
        except Exception as exc:  # re-raised with the stage label
            raise PipelineError(name, exc) from exc
        stages.append(name)
        return out

    fits = stage("fit", _fit_all, responses, config)

    def compare_stage():
        report = summarize_fits(fits, responses)
        return report, select_model(report, config.alpha)

    comparison, selected = stage("compare", compare_stage)
    chosen = comparison.row(selected).result

    def q3_stage():
        est = score_responses(chosen.bank, responses, chosen.grid)
        return diagnostics.q3_matrix(chosen, responses, est, config.rules.q3_threshold)

    q3 = stage("q3", q3_stage)
    excluded = stage("exclude", resolve_local_dependence, q3, chosen.bank)

    def refit_stage():
        reduced = responses.drop_items(excluded)
        if not excluded:
            return comparison, chosen
        refits = _fit_all(reduced, config)
        report = summarize_fits(refits, reduced)
        return report, report.row(selected).result

    final_comparison, final_result = stage("refit", refit_stage)
    if final_result is None:
        raise PipelineError("refit", ValueError(f"{selected} refit failed"))
    flags = stage("flag", flag_items, final_result.bank, config.rules, config.retained)
    return PipelineResult(
        stages=tuple(stages),
        initial_comparison=comparison,
        selected_model=selected,
        q3=q3,
        excluded=tuple(excluded),
        final_comparison=final_comparison,
        final_result=final_result,
        flags=flags,
    )


# -- short forms --------------------------------------------------------------

@dataclass(frozen=True)
class ShortFormCandidate:
    items: dict[str, tuple[str, ...]]
    band_counts: dict[str, int]
    loading_sum: float
    average_information: float

    @property
    def item_ids(self) -> list[str]:
        return [i for ids in self.items.values() for i in ids]

    @property
    def counts(self) -> dict[str, int]:
        return {s: len(v) for s, v in self.items.items()}

    @property
    def bands_covered(self) -> int:
        return sum(1 for n in self.band_counts.values() if n)


def _candidate(bank: ItemBank, selection: dict[str, list[str]], grid: ThetaGrid):
    ids = [i for s in sorted(selection) for i in selection[s]]
    sub = bank.subset(ids)
    bands = {b: 0 for b in BANDS}
    for it in sub:
        bands[difficulty_band(it.b)] += 1
    return ShortFormCandidate(
        items={s: tuple(selection[s]) for s in sorted(selection)},
        band_counts=bands,
        loading_sum=float(sum(it.loading for it in sub)),
        average_information=float(np.mean(test_information(sub, grid.nodes))),
    )


def build_short_form(bank: ItemBank, per_subscale: int = 3, difficulty_bands_required: int = 0,
                     grid: ThetaGrid = CURVE_GRID) -> list[ShortFormCandidate]:
    """Highest-loading items per subscale, with swaps for difficulty coverage.

    Starting from the top ``per_subscale`` loadings in every subscale, while
    fewer than ``difficulty_bands_required`` difficulty bands are covered the
    best-loading unselected item from an uncovered band replaces the
    weakest selected item of its subscale (only if that does not uncover
    another band). Every intermediate selection is scored and the
    Pareto-undominated ones (loading sum vs bands covered) are returned,
    best loading sum first.
    """
    if per_subscale < 2:
        raise ValueError("per_subscale must be at least 2")
    groups: dict[str, list] = {}
    for it in bank:
        if it.loading is None or it.subscale is None:
            raise ValueError(f"item {it.item_id} lacks a subscale or standardized loading")
        groups.setdefault(it.subscale, []).append(it)
    selection: dict[str, list[str]] = {}
    for sub, items in groups.items():
        ranked = sorted(items, key=lambda it: (-it.loading, it.item_id))
        if len(items) < per_subscale:
            warnings.warn(f"subscale {sub} has only {len(items)} items; taking all",
                          RuntimeWarning, stacklevel=2)
        if len(items) < 2:
            warnings.warn(f"subscale {sub} dropped: fewer than 2 items", RuntimeWarning,
                          stacklevel=2)
            continue
        selection[sub] = [it.item_id for it in ranked[:per_subscale]]

    candidates = [_candidate(bank, selection, grid)]
    required = min(difficulty_bands_required, len(BANDS))
    tried: set[str] = set()
    while candidates[-1].bands_covered < required:
        current = candidates[-1]
        chosen = set(current.item_ids)
        covered = {b for b, n in current.band_counts.items() if n}
        pool = sorted((it for it in bank if it.item_id not in chosen and it.item_id not in tried
                       and it.subscale in selection and difficulty_band(it.b) not in covered),
                      key=lambda it: (-it.loading, it.item_id))
        swapped = False
        for newcomer in pool:
            tried.add(newcomer.item_id)
            members = sorted((bank[i] for i in selection[newcomer.subscale]),
                             key=lambda it: (it.loading, it.item_id))
            for out in members:
                band = difficulty_band(out.b)
                if current.band_counts[band] == 1:
                    continue  # removing it would uncover a band
                selection[newcomer.subscale] = [
                    newcomer.item_id if i == out.item_id else i
                    for i in selection[newcomer.subscale]]
                swapped = True
                break
            if swapped:
                break
        if not swapped:
            warnings.warn(f"could not reach {required} difficulty bands", RuntimeWarning,
                          stacklevel=2)
            break
        candidates.append(_candidate(bank, selection, grid))

    front = [c for c in candidates
             if not any(o.loading_sum >= c.loading_sum and o.bands_covered >= c.bands_covered
                        and (o.loading_sum > c.loading_sum or o.bands_covered > c.bands_covered)
                        for o in candidates)]
    unique = {tuple(c.item_ids): c for c in front}
    return sorted(unique.values(), key=lambda c: -c.loading_sum)


@dataclass(frozen=True)
class FormComparison:
    long_average: float
    short_average: float
    average_ratio: float
    long_peak: float
    short_peak: float
    long_peak_theta: float
    short_peak_theta: float
    loading_correlation: float
    n_shared: int


def compare_forms(long: ItemBank, short: ItemBank, grid: ThetaGrid = CURVE_GRID) -> FormComparison:
    """Information profiles of a long and short form plus loading agreement.

    The loading correlation is Pearson's r over shared items where both
    forms carry a loading (NaN when fewer than two such items).
    """
    shared = [i for i in short.ids if i in set(long.ids)]
    if not shared:
        raise ValueError("long and short forms share no items")
    if len(shared) != len(short):
        raise ValueError("short form contains items absent from the long form")
    tl = test_information(long, grid.nodes)
    ts = test_information(short, grid.nodes)
    kl, ks = int(np.argmax(tl)), int(np.argmax(ts))
    pairs = [(long[i].loading, short[i].loading) for i in shared
             if long[i].loading is not None and short[i].loading is not None]
    r = math.nan
    if len(pairs) >= 2:
        x, y = np.array(pairs).T
        if x.std() > 0 and y.std() > 0:
            r = float(np.corrcoef(x, y)[0, 1])
    return FormComparison(
        long_average=float(tl.mean()),
        short_average=float(ts.mean()),
        average_ratio=float(ts.mean() / tl.mean()) if tl.mean() > 0 else math.nan,
        long_peak=float(tl[kl]),
        short_peak=float(ts[ks]),
        long_peak_theta=float(grid.nodes[kl]),
        short_peak_theta=float(grid.nodes[ks]),
        loading_correlation=r,
        n_shared=len(shared),
    )
