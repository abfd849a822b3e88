"""Overlap and surface-distance metrics on binary volumes, and summary reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import MetricError, ShapeError

_SIX_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def _binary(a) -> np.ndarray:
    a = np.asarray(getattr(a, "data", a))
    if not np.isin(a, (0, 1)).all():
        raise MetricError("metrics need binary masks")
    return a.astype(bool)


def _pair(pred, gt):
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return p, g


def dsc(pred, gt) -> float:
    """Dice coefficient 2|P & G| / (|P| + |G|); two empty masks score 1.0."""
    p, g = _pair(pred, gt)
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


def surface_mask(mask) -> np.ndarray:
    """Foreground voxels with a background 6-neighbour; outside the grid counts as background."""
    m = _binary(mask)
    if not m.any():
        raise MetricError("surface of an empty mask is undefined")
    return m & ~ndimage.binary_erosion(m, _SIX_NEIGHBOURS, border_value=0)


def extract_surface(mask) -> np.ndarray:
    """Surface voxel coordinates, shape (K, 3)."""
    return np.argwhere(surface_mask(mask))


def directed_surface_distances(src, dst, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Distance (mm) from every surface voxel of ``src`` to the nearest surface voxel of ``dst``."""
    s_src, s_dst = surface_mask(src), surface_mask(dst)
    dist = ndimage.distance_transform_edt(~s_dst, sampling=spacing)
    return dist[s_src]


def _spacing(spacing, pred):
    if spacing is None:
        spacing = getattr(pred, "spacing", (1.0, 1.0, 1.0))
    return tuple(float(s) for s in spacing)


def surface_distances(pred, gt, spacing=None) -> tuple[np.ndarray, np.ndarray]:
    p, g = _pair(pred, gt)
    sp = _spacing(spacing, pred)
    return directed_surface_distances(p, g, sp), directed_surface_distances(g, p, sp)


def assd(pred, gt, spacing=None) -> float:
    """Average symmetric surface distance in mm, pooled over both surfaces."""
    d_pg, d_gp = surface_distances(pred, gt, spacing)
    return float((d_pg.sum() + d_gp.sum()) / (d_pg.size + d_gp.size))


def hd95(pred, gt, spacing=None) -> float:
    """95th percentile (linear interpolation) of the pooled directed surface distances."""
    d_pg, d_gp = surface_distances(pred, gt, spacing)
    return float(np.percentile(np.concatenate([d_pg, d_gp]), 95))


@dataclass
class CaseMetrics:
    id: str
    dsc: float
    assd: float
    hd95: float


def case_metrics(case_id, pred, gt, spacing=None) -> CaseMetrics:
    return CaseMetrics(case_id, dsc(pred, gt), assd(pred, gt, spacing), hd95(pred, gt, spacing))


def mean_sd(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, float)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class MetricReport:
    per_case: list[CaseMetrics] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    title: str = ""
    # DSC of every scored case, including those whose surface metrics are
    # undefined (empty prediction); used for method comparisons
    dsc_all: dict[str, float] = field(default_factory=dict)

    @property
    def n_cases(self) -> int:
        return len(self.per_case)

    @property
    def aggregate(self) -> dict[str, tuple[float, float]]:
        return {
            name: mean_sd([getattr(c, name) for c in self.per_case])
            for name in ("dsc", "assd", "hd95")
        }

    def row(self) -> str:
        """``DSC (%) | ASSD (mm) | 95HD (mm)`` as mean±SD, two decimals."""
        agg = self.aggregate
        d, a, h = agg["dsc"], agg["assd"], agg["hd95"]
        return f"{100 * d[0]:.2f}±{100 * d[1]:.2f} | {a[0]:.2f}±{a[1]:.2f} | {h[0]:.2f}±{h[1]:.2f}"

    def format_table(self) -> str:
        lines = []
        if self.title:
            lines.append(self.title)
        lines.append("Cases | DSC (%) ↑ | ASSD (mm) ↓ | 95HD (mm) ↓")
        lines.append(f"{self.n_cases} | {self.row()}")
        if self.missing:
            lines.append(f"skipped {len(self.missing)} case(s): {', '.join(self.missing)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "metrics.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "dsc", "assd_mm", "hd95_mm"])
            for c in self.per_case:
                writer.writerow([c.id, repr(c.dsc), repr(c.assd), repr(c.hd95)])
        txt_path = out_dir / "report.txt"
        txt_path.write_text(self.format_table())
        return csv_path, txt_path


def read_metrics_csv(path) -> MetricReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return MetricReport([
        CaseMetrics(r["id"], float(r["dsc"]), float(r["assd_mm"]), float(r["hd95_mm"])) for r in rows
    ])


def comparison_table(reports: dict[str, MetricReport], title: str = "") -> str:
    """Several methods in one block: ``method | n | DSC | ASSD | 95HD``."""
    lines = [title] if title else []
    lines.append("Method | Labeled | DSC (%) ↑ | ASSD (mm) ↓ | 95HD (mm) ↓")
    for name, rep in reports.items():
        lines.append(f"{name} | {rep.title or '-'} | {rep.row()}")
    return "\n".join(lines) + "\n"


def evaluate_cases(model, cases, title: str = "", predictions_dir=None) -> MetricReport:
    """Segment every labeled case with ``model`` and score it.

    Cases whose surface metrics are undefined (an empty mask) are listed in
    ``missing`` and left out of the aggregates.
    """
    from .unetr import segment
    from .volume import write_volume

    report = MetricReport(title=title)
    for case in cases:
        if case.label is None:
            report.missing.append(case.id)
            continue
        pred = segment(case.image, model).mask
        if predictions_dir is not None:
            write_volume(Path(predictions_dir) / case.id, pred)
        report.dsc_all[case.id] = dsc(pred, case.label)
        try:
            report.per_case.append(case_metrics(case.id, pred, case.label, case.image.spacing))
        except MetricError:
            report.missing.append(case.id)
    return report


def evaluate_split(checkpoint, manifest, split: str = "test", out_dir=None, workers: int = 1,
                   export_predictions: bool = False) -> MetricReport:
    """Score a fine-tuned checkpoint on one split of a manifest; writes metrics.csv and report.txt."""
    from .data import Case, Preprocessing, read_manifest, select
    from .unetr import load_unetr
    from .volume import read_volume

    model, prep = load_unetr(checkpoint)
    prep = Preprocessing(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in prep.items()})
    entries = [e for e in select(read_manifest(manifest), split) if e["label_path"] is not None]
    if not entries:
        raise MetricError(f"split {split!r} has no labeled cases")
    cases, skipped = [], []
    for e in entries:
        try:
            image, label = read_volume(e["image_path"]), read_volume(e["label_path"])
        except (OSError, ValueError):
            skipped.append(e["id"])
            continue
        cases.append(Case(e["id"], prep.apply(image), prep.apply(label)))
    pred_dir = Path(out_dir) / "predictions" if (out_dir is not None and export_predictions) else None
    report = evaluate_cases(model, cases, title=split, predictions_dir=pred_dir)
    report.missing = skipped + report.missing
    if out_dir is not None:
        report.write(out_dir)
    return report
