"""Bank (JSON) and response (CSV) files, the bundled AICOS bank, curve export."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import (
    CURVE_GRID,
    ItemBank,
    ItemParameters,
    ResponseMatrix,
    ThetaGrid,
    irf_matrix,
    test_information,
)

SCHEMA_VERSION = 1
_ITEM_KEYS = ("id", "a", "b", "c", "model", "subscale", "loading", "short_form")


class BankFileError(ValueError):
    pass


class ResponseFileError(ValueError):
    pass


def atomic_write_text(path, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- banks --------------------------------------------------------------------

def bank_from_dict(doc: dict) -> ItemBank:
    if not isinstance(doc, dict) or "items" not in doc:
        raise BankFileError("bank document must be an object with an 'items' array")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise BankFileError(f"schema version mismatch: expected {SCHEMA_VERSION}, got {version!r}")
    seen: set[str] = set()
    items = []
    for pos, entry in enumerate(doc["items"]):
        try:
            iid = str(entry["id"])
            if iid in seen:
                raise BankFileError(f"duplicate item id {iid!r}")
            seen.add(iid)
            loading = entry.get("loading")
            items.append(ItemParameters(
                item_id=iid,
                a=float(entry["a"]),
                b=float(entry["b"]),
                c=float(entry.get("c", 0.0)),
                model_kind=entry.get("model", "3PL"),
                subscale=entry.get("subscale"),
                loading=None if loading is None else float(loading),
                in_short_form=bool(entry.get("short_form", False)),
                extra={k: v for k, v in entry.items() if k not in _ITEM_KEYS},
            ))
        except BankFileError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise BankFileError(f"invalid item entry #{pos}: {exc}") from exc
    extra = {k: v for k, v in doc.items() if k not in ("schema_version", "items")}
    return ItemBank(items, extra)


def bank_to_dict(bank: ItemBank) -> dict:
    items = []
    for it in bank:
        entry = {"id": it.item_id, "a": it.a, "b": it.b, "c": it.c, "model": it.model_kind}
        if it.subscale is not None:
            entry["subscale"] = it.subscale
        if it.loading is not None:
            entry["loading"] = it.loading
        entry["short_form"] = it.in_short_form
        entry.update(it.extra)
        items.append(entry)
    doc = {"schema_version": SCHEMA_VERSION}
    doc.update(bank.extra)
    doc["items"] = items
    return doc


def load_bank(path) -> ItemBank:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BankFileError(f"malformed JSON in {path}: {exc}") from exc
    return bank_from_dict(doc)


def save_bank(bank: ItemBank, path) -> None:
    atomic_write_text(path, json.dumps(bank_to_dict(bank), indent=2, ensure_ascii=False) + "\n")


def bundled_aicos_bank() -> ItemBank:
    """The calibrated 51-item AICOS bank shipped with the package."""
    text = resources.files("irtscale.data").joinpath("aicos_bank.json").read_text(encoding="utf-8")
    return bank_from_dict(json.loads(text))


def bundled_aicos_short_form() -> ItemBank:
    """The 18-item short form, carrying its own (re-estimated) loadings."""
    from dataclasses import replace

    short = bundled_aicos_bank().short_form()
    return ItemBank(
        [replace(it, loading=it.extra.get("short_form_loading", it.loading)) for it in short],
        short.extra,
    )


# -- responses ----------------------------------------------------------------

def parse_responses(text: str, source: str = "<string>") -> ResponseMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r]  # tolerate a trailing blank line
    if not rows:
        raise ResponseFileError(f"{source}: empty response file")
    header = [h.strip() for h in rows[0]]
    has_pid = header[0].lower() == "person_id"
    item_ids = header[1:] if has_pid else header
    if len(set(item_ids)) != len(item_ids):
        raise ResponseFileError(f"{source}: duplicate item id in header")
    data = np.empty((len(rows) - 1, len(item_ids)))
    pids = []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ResponseFileError(
                f"{source}: row {r} has {len(row)} fields, expected {len(header)}"
            )
        if has_pid:
            pids.append(row[0])
            row = row[1:]
        for j, tok in enumerate(row):
            tok = tok.strip()
            if tok == "":
                data[r - 2, j] = np.nan
            elif tok in ("0", "1"):
                data[r - 2, j] = float(tok)
            else:
                raise ResponseFileError(
                    f"{source}: invalid token {tok!r} at row {r}, column {item_ids[j]!r}"
                )
    return ResponseMatrix(data, tuple(item_ids), tuple(pids) if has_pid else None)


def load_responses(path) -> ResponseMatrix:
    return parse_responses(Path(path).read_text(encoding="utf-8"), str(path))


def format_responses(responses: ResponseMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    pids = responses.person_ids
    writer.writerow((["person_id"] if pids else []) + list(responses.item_ids))
    for p, row in enumerate(responses.data):
        cells = ["" if np.isnan(v) else str(int(v)) for v in row]
        writer.writerow(([pids[p]] if pids else []) + cells)
    return buf.getvalue()


def save_responses(responses: ResponseMatrix, path) -> None:
    atomic_write_text(path, format_responses(responses))


# -- curve export -------------------------------------------------------------

def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def export_curves(bank: ItemBank, grid: ThetaGrid = CURVE_GRID, out_dir=".",
                  thetas: Sequence[float] | None = None) -> dict[str, Path]:
    """Write icc.csv, tif.csv and wright.csv (one data row per grid node).

    wright.csv bins person estimates and item difficulties to their nearest
    node, giving the two sides of a Wright map on a common logit axis.
    """
    out = Path(out_dir)
    if not out.is_dir() or not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    nodes = grid.nodes
    icc = irf_matrix(bank.a, bank.b, bank.c, nodes) if len(bank) else np.zeros((len(nodes), 0))
    tif = test_information(bank, nodes)

    def nearest(values):
        values = np.asarray(values, dtype=float)
        return np.abs(values[:, None] - nodes[None, :]).argmin(axis=1)

    person_counts = np.zeros(len(nodes), dtype=int)
    if thetas is not None and len(thetas):
        np.add.at(person_counts, nearest(thetas), 1)
    item_rows: list[list[str]] = [[] for _ in nodes]
    if len(bank):
        for iid, q in zip(bank.ids, nearest(bank.b)):
            item_rows[q].append(iid)

    files = {
        "icc.csv": _csv_text(["theta"] + bank.ids,
                             ([_fmt(t)] + [_fmt(v) for v in row] for t, row in zip(nodes, icc))),
        "tif.csv": _csv_text(["theta", "information", "conditional_reliability"],
                             ([_fmt(t), _fmt(i), _fmt(i / (i + 1.0))] for t, i in zip(nodes, tif))),
        "wright.csv": _csv_text(["theta", "person_count", "item_count", "items"],
                                ([_fmt(t), n, len(ids), ";".join(ids)]
                                 for t, n, ids in zip(nodes, person_counts, item_rows))),
    }
    written = {}
    for name, text in files.items():
        atomic_write_text(out / name, text)
        written[name] = out / name
    return written
