"""Command-line interface.

Every command writes a machine-readable JSON report and a plain-text
summary; commands with an output directory put them there as
``report.json`` and ``summary.txt``, the rest print the report to stdout
and the summary to stderr. Exit status is 0 unless a stage failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import diagnostics, io
from .estimation import CalibrationConfig, compare_models, fit
from .model import MODEL_KINDS, ThetaGrid, simulate_responses, tif_summary
from .scale import EliminationRules, build_short_form, compare_forms, flag_items
from .scoring import reliability_report, score_responses

_CALIBRATION_KEYS = {"model", "n_nodes", "theta_min", "theta_max", "tolerance", "max_cycles",
                     "guessing_prior", "a_bounds", "b_bounds", "c_bounds", "seed", "jitter"}
_RUN_KEYS = _CALIBRATION_KEYS | {"rules", "out", "retained"}
_RULE_KEYS = {"b_range", "a_min", "a_max", "c_max", "q3_threshold"}


class CLIError(Exception):
    pass


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python ones."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


# -- config -------------------------------------------------------------------

def load_run_config(path) -> dict:
    """Read a run config; unknown keys are rejected."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CLIError(f"malformed config JSON: {exc}") from exc
    unknown = sorted(set(doc) - _RUN_KEYS)
    unknown += sorted(f"rules.{k}" for k in set(doc.get("rules", {})) - _RULE_KEYS)
    if unknown:
        raise CLIError(f"unknown config keys: {', '.join(unknown)}")
    return doc


def calibration_config(doc: dict, model: str | None = None) -> CalibrationConfig:
    kwargs = {k: doc[k] for k in _CALIBRATION_KEYS - {"model"} if k in doc}
    for key in ("a_bounds", "b_bounds", "c_bounds", "guessing_prior"):
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(kwargs[key])
    return CalibrationConfig(model_kind=model or doc.get("model", "2PL"), **kwargs)


def elimination_rules(doc: dict) -> EliminationRules:
    rules = dict(doc.get("rules", doc))
    unknown = set(rules) - _RULE_KEYS
    if unknown:
        raise CLIError(f"unknown rule keys: {', '.join(sorted(unknown))}")
    if "b_range" in rules:
        rules["b_range"] = tuple(rules["b_range"])
    return EliminationRules(**rules)


def _bank(spec: str):
    return io.bundled_aicos_bank() if spec.lower() == "aicos" else io.load_bank(spec)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _grid(spec: str | None) -> ThetaGrid:
    if spec is None:
        return ThetaGrid.normal(121, -6.0, 6.0)
    try:
        lo, hi, n = spec.split(",")
        return ThetaGrid.normal(int(n), float(lo), float(hi))
    except ValueError as exc:
        raise CLIError(f"--grid expects min,max,count; got {spec!r}") from exc


def _finish(out: Path | None, report: dict, summary: str) -> None:
    if out is None:
        sys.stdout.write(_dumps(report))
        sys.stderr.write(summary.rstrip() + "\n")
    else:
        io.atomic_write_text(out / "report.json", _dumps(report))
        io.atomic_write_text(out / "summary.txt", summary.rstrip() + "\n")


def _csv(path: Path, header, rows) -> None:
    io.atomic_write_text(path, io._csv_text(header, rows))


def _num(x, fmt=".6f"):
    return "" if x is None or (isinstance(x, float) and not math.isfinite(x)) else format(x, fmt)


# -- commands -----------------------------------------------------------------

def cmd_fit(args) -> None:
    doc = load_run_config(args.config)
    responses = io.load_responses(args.responses)
    cfg = calibration_config(doc, args.model)
    result = fit(responses, cfg)
    out = _out_dir(args.out or doc.get("out", "."))
    io.save_bank(result.bank, out / "bank.json")
    report = {
        "command": "fit", "model": result.model_kind, "n_persons": responses.n_persons,
        "n_items": responses.n_items, "log_likelihood": result.log_likelihood,
        "cycles": result.cycles, "converged": result.converged, "max_change": result.max_change,
        "config": asdict(cfg),
        "items": [{"id": it.item_id, "a": it.a, "b": it.b, "c": it.c} for it in result.bank],
    }
    status = "converged" if result.converged else "NOT converged"
    _finish(out, report, f"{result.model_kind} fit on {responses.n_persons} x {responses.n_items}: "
                         f"{status} after {result.cycles} cycles, logL = {result.log_likelihood:.3f}")


def cmd_compare(args) -> None:
    doc = load_run_config(args.config)
    responses = io.load_responses(args.responses)
    configs = [calibration_config(doc, m) for m in MODEL_KINDS]
    table = compare_models(responses, configs)
    out = _out_dir(args.out)
    header = ["model", "M2", "df", "p", "RMSEA", "SRMSR", "CFI", "TLI", "log_likelihood", "error"]
    _csv(out / "comparison.csv", header,
         ([r.model, _num(r.m2, ".2f"), r.df if r.df is not None else "", _num(r.p_value, ".3f"),
           _num(r.rmsea, ".3f"), _num(r.srmsr, ".3f"), _num(r.cfi, ".3f"), _num(r.tli, ".3f"),
           _num(r.log_likelihood, ".3f"), r.error or ""] for r in table.rows))
    lines = [f"{r.model}: " + (f"error: {r.error}" if r.failed else
             f"M2={r.m2:.2f} df={r.df} p={r.p_value:.3f} RMSEA={r.rmsea:.3f}")
             for r in table.rows]
    _finish(out, {"command": "compare", "rows": table.as_records()}, "\n".join(lines))
    if any(r.failed for r in table.rows):
        raise CLIError("one or more models failed; see report.json")


def cmd_diagnose(args) -> None:
    bank = _bank(args.bank)
    responses = io.load_responses(args.responses)
    out = _out_dir(args.out)
    data = responses.columns(bank.ids)
    estimates = score_responses(bank, data)
    m2 = diagnostics.m2_statistic(bank, data)
    null = diagnostics.independence_m2(data)
    idx = diagnostics.fit_indices(m2, null, diagnostics.srmsr(bank, data))
    itemfit = diagnostics.infit_outfit(bank, data, estimates)
    q3 = diagnostics.q3_matrix(bank, data, estimates, args.q3_threshold)
    _csv(out / "infit_outfit.csv", ["item", "infit", "outfit"],
         ([i, _num(f, ".4f"), _num(o, ".4f")]
          for i, f, o in zip(itemfit.item_ids, itemfit.infit, itemfit.outfit)))
    flagged = {(i, j) for i, j, _ in q3.flagged}
    ids = q3.item_ids
    _csv(out / "q3.csv", ["item_i", "item_j", "q3", "flagged"],
         ([ids[i], ids[j], _num(q3.matrix[i, j], ".4f"), int((ids[i], ids[j]) in flagged)]
          for i in range(len(ids)) for j in range(i + 1, len(ids))))
    report = {"command": "diagnose", "m2": asdict(m2), "baseline_m2": asdict(null),
              "fit_indices": asdict(idx),
              "q3_flagged": [{"item_i": i, "item_j": j, "q3": v} for i, j, v in q3.flagged],
              "q3_threshold": q3.threshold}
    _finish(out, report,
            f"M2={m2.m2:.2f} df={m2.df} p={m2.p_value:.3f} RMSEA={idx.rmsea:.3f} "
            f"SRMSR={idx.srmsr:.3f} CFI={idx.cfi:.3f} TLI={idx.tli:.3f}; "
            f"{len(q3.flagged)} Q3 pairs above {q3.threshold}")


def cmd_score(args) -> None:
    bank = _bank(args.bank)
    responses = io.load_responses(args.responses)
    out = _out_dir(args.out)
    data = responses.columns(bank.ids)
    estimates = score_responses(bank, data)
    pids = responses.person_ids
    _csv(out / "scores.csv", ["person", "theta_eap", "posterior_sd", "n_answered"],
         ([pids[e.person] if pids else e.person, _num(e.theta_eap), _num(e.posterior_sd),
           e.n_answered] for e in estimates))
    rel = reliability_report(bank, data, estimates)
    io.atomic_write_text(out / "reliability.json", _dumps(rel.as_dict()))
    _finish(out, {"command": "score", "n_persons": len(estimates), "reliability": rel.as_dict()},
            f"scored {len(estimates)} persons; EAP reliability {rel.eap_marginal:.3f}, "
            f"empirical {rel.empirical:.3f}, alpha {rel.cronbach_alpha:.3f}")


def cmd_flag(args) -> None:
    bank = _bank(args.bank)
    rules = elimination_rules(load_run_config(args.rules)) if args.rules else EliminationRules()
    flags = flag_items(bank, rules)
    lines = [f"{f.item_id}: {f.parameter} = {f.value:g} (bound {f.bound:g}, {f.band})"
             for f in flags.flags] or ["no items flagged"]
    _finish(None, {"command": "flag", "rules": asdict(rules), "flags": flags.rows()},
            "\n".join(lines))


def cmd_shortform(args) -> None:
    bank = _bank(args.bank)
    out = _out_dir(args.out)
    candidates = build_short_form(bank, args.per_subscale, args.bands)
    grid = _grid(None)
    records = []
    for cand in candidates:
        cmp = compare_forms(bank, bank.subset(cand.item_ids), grid)
        records.append({"items": cand.items, "band_counts": cand.band_counts,
                        "loading_sum": cand.loading_sum,
                        "average_information": cand.average_information,
                        "comparison": asdict(cmp)})
    io.atomic_write_text(out / "candidates.json", _dumps(records))
    best = records[0]
    _finish(out, {"command": "shortform", "per_subscale": args.per_subscale, "bands": args.bands,
                  "candidates": records},
            f"{len(records)} candidate(s); best loading sum {best['loading_sum']:.2f}, "
            f"average information ratio {best['comparison']['average_ratio']:.3f}")


def cmd_simulate(args) -> None:
    bank = _bank(args.bank)
    rng = np.random.default_rng(args.seed)
    responses = simulate_responses(bank, rng.standard_normal(args.n), args.seed)
    io.save_responses(responses, args.out)
    _finish(None, {"command": "simulate", "n_persons": args.n, "n_items": len(bank),
                   "seed": args.seed, "out": str(args.out)},
            f"wrote {args.n} x {len(bank)} responses to {args.out}")


def cmd_curves(args) -> None:
    bank = _bank(args.bank)
    grid = _grid(args.grid)
    out = _out_dir(args.out)
    io.export_curves(bank, grid, out)
    summ = tif_summary(bank, grid)
    _finish(out, {"command": "curves", "n_items": len(bank), "grid": [float(grid.nodes[0]),
                  float(grid.nodes[-1]), len(grid)], "tif": asdict(summ)},
            f"TIF peak {summ.peak_value:.3f} at theta {summ.peak_theta:.2f}; "
            f"mean {summ.average_information:.3f} over {len(grid)} nodes")


def cmd_bank(args) -> None:
    if args.builtin.lower() != "aicos":
        raise CLIError(f"unknown builtin bank {args.builtin!r}")
    bank = io.bundled_aicos_bank()
    io.save_bank(bank, args.out)
    _finish(None, {"command": "bank", "builtin": "aicos", "n_items": len(bank), "out": str(args.out)},
            f"wrote {len(bank)}-item AICOS bank to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irtscale", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="calibrate one model")
    p.add_argument("--responses", required=True)
    p.add_argument("--model", type=str.upper, choices=MODEL_KINDS)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="fit 1PL/2PL/3PL and tabulate M2 fit")
    p.add_argument("--responses", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("diagnose", help="M2, infit/outfit and Q3 for a bank")
    p.add_argument("--responses", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--q3-threshold", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("score", help="EAP scores and reliabilities")
    p.add_argument("--responses", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("flag", help="flag item parameters against elimination rules")
    p.add_argument("--bank", required=True)
    p.add_argument("--rules")
    p.set_defaults(func=cmd_flag)

    p = sub.add_parser("shortform", help="build short-form candidates")
    p.add_argument("--bank", required=True)
    p.add_argument("--per-subscale", type=int, required=True)
    p.add_argument("--bands", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_shortform)

    p = sub.add_parser("simulate", help="simulate responses with theta ~ N(0, 1)")
    p.add_argument("--bank", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("curves", help="export ICC, TIF and Wright-map data")
    p.add_argument("--bank", required=True)
    p.add_argument("--grid", help="min,max,count (default -6,6,121)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("bank", help="write a bundled bank")
    p.add_argument("--builtin", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bank)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, ValueError, OSError, KeyError) as exc:
        sys.stderr.write(f"irtscale {args.command}: error: {exc}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
