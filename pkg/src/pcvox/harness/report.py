"""Report files: RD points, BD-rate table, FLOPs table and a text summary.

CSV files follow RFC 4180 (CRLF line ends, minimal quoting). Floats are
written with ``repr`` so that numbers read back from a CSV are the numbers
that were computed, which lets the BD table be recomputed from the CSV.
"""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .bdrate import NoOverlapError, bd_rate
from .rd import PLAIN, VOXNET, RDPoint, curves

RD_COLUMNS = [f.name for f in fields(RDPoint)]
BD_COLUMNS = ["cloud", "metric", "ref_chain", "test_chain", "bd_rate_percent"]
FLOPS_COLUMNS = ["variant", "parents", "inputs", "flops"]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(int(v)) if isinstance(v, np.integer) else str(v)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def rd_csv(points: Sequence[RDPoint]) -> str:
    return _csv_text(RD_COLUMNS, [astuple(p) for p in points])


def parse_rd_csv(text: str) -> List[RDPoint]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != RD_COLUMNS:
        raise ValueError("not an RD points CSV")
    kinds = [f.type for f in fields(RDPoint)]
    conv = {"str": str, "float": float, "int": int}
    return [RDPoint(*(conv[k](v) for k, v in zip(kinds, row))) for row in rows[1:]]


@dataclass(frozen=True)
class BDRow:
    cloud: str  # "average" for the mean over clouds
    metric: str
    ref_chain: str
    test_chain: str
    bd_rate: Optional[float]  # None when a curve is missing or the ranges do not overlap


def bd_table(points: Sequence[RDPoint], codec: str = "octcodec",
             metrics: Sequence[str] = ("d1", "d2")) -> List[BDRow]:
    """Per-cloud BD-rate of the voxnet chain against plain quantization, then averages."""
    ref_chain, test_chain = f"{PLAIN}+{codec}", f"{VOXNET}+{codec}"
    rows = []
    for metric in metrics:
        cs = curves(points, metric)
        values = []
        for cloud in sorted({p.cloud for p in points}):
            ref, test = cs.get((cloud, ref_chain)), cs.get((cloud, test_chain))
            value = None
            if ref is not None and test is not None:
                try:
                    value = bd_rate(ref, test)
                except NoOverlapError:
                    value = None
            if value is not None:
                values.append(value)
            rows.append(BDRow(cloud, metric, ref_chain, test_chain, value))
        avg = float(np.mean(values)) if values else None
        rows.append(BDRow("average", metric, ref_chain, test_chain, avg))
    return rows


def bd_csv(rows: Sequence[BDRow]) -> str:
    return _csv_text(BD_COLUMNS, [(r.cloud, r.metric, r.ref_chain, r.test_chain,
                                   "" if r.bd_rate is None else r.bd_rate) for r in rows])


def flops_csv(rows: Sequence[Tuple[str, int, int, int]]) -> str:
    return _csv_text(FLOPS_COLUMNS, rows)


def summary_text(points: Sequence[RDPoint], bd_rows: Sequence[BDRow],
                 flops_rows: Sequence[Tuple[str, int, int, int]],
                 notes: Sequence[str] = ()) -> str:
    lines = [f"RD points: {len(points)} over {len({p.cloud for p in points})} clouds"]
    for r in bd_rows:
        if r.cloud == "average":
            value = "n/a" if r.bd_rate is None else f"{r.bd_rate:+.2f}%"
            lines.append(f"BD-rate {r.metric.upper()} {r.test_chain} vs {r.ref_chain}: {value}")
    flops = {name: f for name, _, _, f in flops_rows}
    if "back" in flops and "mid" in flops and flops["mid"]:
        red = (flops["mid"] - flops["back"]) / flops["mid"] * 100
        lines.append(f"FLOPs back-loaded {flops['back']} mid {flops['mid']} reduction {red:.2f}%")
    lines.append("Scale grid {1, 1/2, 1/4, 1/8} is a stand-in for undisclosed codec settings.")
    lines.extend(notes)
    return "\n".join(lines) + "\n"


def write_report(out_dir: Union[str, Path], points: Sequence[RDPoint],
                 flops_rows: Sequence[Tuple[str, int, int, int]] = (),
                 notes: Sequence[str] = (), codec: str = "octcodec") -> Dict[str, Path]:
    """Write ``rd_points.csv``, ``bd_rate.csv``, ``flops.csv`` and ``summary.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = bd_table(points, codec) if points else []
    files = {
        "rd": (out / "rd_points.csv", rd_csv(points)),
        "bd": (out / "bd_rate.csv", bd_csv(rows)),
        "flops": (out / "flops.csv", flops_csv(flops_rows)),
        "summary": (out / "summary.txt", summary_text(points, rows, flops_rows, notes)),
    }
    for path, text in files.values():
        path.write_bytes(text.encode("utf-8"))
    return {k: p for k, (p, _) in files.items()}


__all__ = ["RD_COLUMNS", "BD_COLUMNS", "FLOPS_COLUMNS", "BDRow", "rd_csv", "parse_rd_csv",
           "bd_table", "bd_csv", "flops_csv", "summary_text", "write_report"]
