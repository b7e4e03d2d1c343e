"""Report tables, machine-readable exports, plugin impact and Hilbert plots."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from statistics import mean
from typing import Iterable, Optional, Sequence, Union

from .memory import affected_va_size
from .oracle import KINDS, category_of
from .scanner import hilbert_map, plot_order

# --------------------------------------------------------------------------
# generic output helpers


def format_table(headers: Sequence, rows: Iterable[Sequence], title: str = "") -> str:
    rows = [[_cell(c) for c in r] for r in rows]
    headers = [str(h) for h in headers]
    widths = [max([len(h)] + [len(r[i]) for r in rows]) for i, h in enumerate(headers)]
    line = "  ".join("-" * w for w in widths)
    out = [title] if title else []
    out.append("  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(headers, widths))))
    out.append(line)
    for r in rows:
        out.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(out)


def _cell(c) -> str:
    if isinstance(c, float):
        return f"{c:.2f}"
    return str(c)


def write_csv(path: Union[str, Path], headers: Sequence, rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(headers)
    for r in rows:
        w.writerow([_cell(c) for c in r])
    Path(path).write_text(buf.getvalue())


def write_json(path: Union[str, Path], doc) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def human_bytes(n: float) -> str:
    for unit, size in (("GiB", 1 << 30), ("MiB", 1 << 20), ("KiB", 1 << 10)):
        if n >= size:
            return f"{n / size:.2f} {unit}"
    return f"{n:.0f} B"


# --------------------------------------------------------------------------
# tables over several dumps (one report dict per dump)


TABLE4_HEADERS = ["dump", *KINDS, "total"]


def table4_rows(reports: Sequence[dict]) -> list:
    """Inconsistencies by type in kernel structures, one row per dump."""
    rows = []
    for i, rep in enumerate(reports):
        t = rep["totals"]
        rows.append([f"D{i}", *[t[k] for k in KINDS], sum(t[k] for k in KINDS)])
    return rows


TABLE6_HEADERS = ["structure", "size", "instances", "T1", "T2", "T3", "T4", "affected", "% affected"]


def table6_rows(reports: Sequence[dict], schemas: dict) -> list:
    """Mean per-type counts; % affected = mean affected / mean instances."""
    rows = []
    for name in sorted(schemas):
        per = [rep["per_schema"].get(name, {}) for rep in reports]
        inst = mean(p.get("instances", 0) for p in per) if per else 0.0
        aff = mean(p.get("affected", 0) for p in per) if per else 0.0
        counts = [mean(p.get(k, 0) for p in per) if per else 0.0 for k in KINDS[:4]]
        pct = 100.0 * aff / inst if inst else 0.0
        rows.append([name, schemas[name].size, inst, *counts, aff, pct])
    return rows


TABLE7_HEADERS = ["field", "causal", "value", "forensic"]


def table7_rows(reports: Sequence[dict], schemas: dict) -> list:
    """Fields with at least one inconsistency, summed over dumps."""
    acc: dict = {}
    for rep in reports:
        for key, counts in rep["per_field"].items():
            row = acc.setdefault(key, [0, 0])
            row[0] += counts["T1"] + counts["T2"]
            row[1] += counts["T3"] + counts["T4"] + counts["T5"]
    rows = []
    for key in sorted(acc):
        schema, _, fname = key.partition(".")
        s = schemas.get(schema)
        relevant = bool(s and s.has_field(fname) and s.field(fname).forensic_relevant)
        rows.append([key, acc[key][0], acc[key][1], "yes" if relevant else "no"])
    return rows


TABLE5A_HEADERS = ["dump", "T1", "T2", "T3", "T4", "L0", "L1", "L2", "L3", "cross-process"]


def table5a_rows(smears: Sequence[dict]) -> list:
    """Page-table entry inconsistencies per dump and per level."""
    rows = []
    for i, s in enumerate(smears):
        t, lv = s["totals"], s["per_level"]
        rows.append([f"D{i}", t["T1"], t["T2"], t["T3"], t["T4"],
                     *[lv[str(k)] for k in range(4)], len(s["cross_process"])])
    return rows


TABLE5B_HEADERS = ["dump", "processes", "kernel records", "mean affected VA", "max affected VA"]


def table5b_rows(smears: Sequence[dict]) -> list:
    """Affected virtual address space per user process (kernel tables apart)."""
    rows = []
    for i, s in enumerate(smears):
        procs = {k: v for k, v in s["per_process"].items() if k != "0"}
        vas = [v["affected_va"] for v in procs.values()]
        kernel = s["per_process"].get("0", {}).get("records", 0)
        rows.append([f"D{i}", len(procs), kernel, human_bytes(mean(vas)) if vas else "0 B",
                     human_bytes(max(vas)) if vas else "0 B"])
    return rows


TABLE2_HEADERS = ["dump", "candidates", "inconsistent", "ratio %", "mean distance"]


def table2_rows(scans: Sequence[dict]) -> list:
    return [[f"D{i}", s["candidates"], s["inconsistent_count"], 100.0 * s["inconsistent_ratio"],
             human_bytes(s["mean_distance"])] for i, s in enumerate(scans)]


def level_span_rows() -> list:
    return [[lvl, affected_va_size(lvl), human_bytes(affected_va_size(lvl))] for lvl in range(4)]


# --------------------------------------------------------------------------
# plugin manifest


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Plugin:
    name: str
    pointer_fields: frozenset
    data_fields: frozenset

    @property
    def fields(self) -> frozenset:
        return self.pointer_fields | self.data_fields


@dataclass(frozen=True)
class PluginManifest:
    plugins: tuple

    def names(self) -> list:
        return [p.name for p in self.plugins]


def _split(ref: str) -> tuple:
    schema, dot, fname = ref.partition(".")
    if not dot:
        raise ManifestError(f"field reference {ref!r} must look like schema.field")
    return schema, fname


def parse_manifest(doc: dict, schemas: dict) -> PluginManifest:
    plugins = []
    for entry in doc.get("plugins", []):
        refs = {}
        for kind in ("pointer_fields", "data_fields"):
            refs[kind] = frozenset(_split(r) for r in entry.get(kind, []))
            for schema, fname in refs[kind]:
                s = schemas.get(schema)
                if s is None or not s.has_field(fname):
                    raise ManifestError(f"{entry['name']}: {schema}.{fname} is not in the schema")
                if (kind == "pointer_fields") != s.field(fname).is_pointer:
                    raise ManifestError(f"{entry['name']}: {schema}.{fname} listed under {kind}")
        plugins.append(Plugin(entry["name"], refs["pointer_fields"], refs["data_fields"]))
    return PluginManifest(tuple(plugins))


def load_manifest(schemas: dict, path: Union[str, Path, None] = None) -> PluginManifest:
    if path is None:
        text = resources.files("smearlab.data").joinpath("manifest.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    return parse_manifest(doc, schemas)


def inconsistent_fields(records: Iterable[dict]) -> tuple:
    """(causal, value) sets of (schema, field) touched by records.

    Pointer records count against their source field; T5 records count
    against the data fields that changed.
    """
    causal, value = set(), set()
    for r in records:
        if r.get("level") is not None:
            continue  # page-table records have no schema fields
        if r["kind"] == "T5":
            for f in r["detail"].get("fields", ()):
                value.add((r["src_schema"], f))
            continue
        target = causal if category_of(r["kind"]) == "causal" else value
        target.add((r["src_schema"], r["src_field"]))
    return causal, value


PLUGIN_HEADERS = ["plugin", "fields causal", "fields value"]


def plugin_impact(records: Iterable[dict], manifest: PluginManifest) -> list:
    causal, value = inconsistent_fields(records)
    return [[p.name, len(p.fields & causal), len(p.fields & value)] for p in manifest.plugins]


# --------------------------------------------------------------------------
# Hilbert plots


def hilbert_cells(page_count: int, flagged: Iterable[int]) -> tuple:
    order = plot_order(page_count)
    return order, [hilbert_map(p, order) for p in sorted(set(flagged))]


def render_ppm(page_count: int, flagged: Iterable[int]) -> bytes:
    """Binary PPM: flagged pages red, other pages white, cells past the end black."""
    order = plot_order(page_count)
    n = 1 << order
    pixels = bytearray(b"\x00\x00\x00" * (n * n))
    flagged = set(flagged)
    for p in range(page_count):
        x, y = hilbert_map(p, order)
        i = 3 * (y * n + x)
        pixels[i:i + 3] = b"\xdc\x14\x3c" if p in flagged else b"\xff\xff\xff"
    return f"P6\n{n} {n}\n255\n".encode() + bytes(pixels)


def render_svg(page_count: int, flagged: Iterable[int], cell: int = 4) -> str:
    order = plot_order(page_count)
    n = 1 << order
    size = n * cell
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="#f4f4f4"/>']
    for p in sorted(set(flagged)):
        x, y = hilbert_map(p, order)
        parts.append(f'<rect x="{x * cell}" y="{y * cell}" width="{cell}" height="{cell}" '
                     f'fill="#dc143c"><title>page {p}</title></rect>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_plots(prefix: Union[str, Path], page_count: int, flagged: Iterable[int]) -> None:
    flagged = list(flagged)
    Path(f"{prefix}.ppm").write_bytes(render_ppm(page_count, flagged))
    Path(f"{prefix}.svg").write_text(render_svg(page_count, flagged))


def summarize(values: Sequence[float]) -> Optional[tuple]:
    if not values:
        return None
    return mean(values), min(values), max(values)
