"""Pixel confusion accounting and the precision/recall/F1 report suite.

Land is mask value 0, sea is 255. Metrics with empty denominators come
back as None so degenerate predictions stay visible in reports instead
of flattering (or zeroing) the score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import LAND, SEA, DatasetManifest, LabeledImage, load_labeled

__all__ = [
    "ConfusionCounts",
    "confusion",
    "land_precision_recall",
    "overall_precision_recall",
    "f1",
    "EvalReport",
    "evaluate_set",
]


@dataclass
class ConfusionCounts:
    """Per-class pixel tallies for one binary mask comparison."""

    tp_land: int = 0
    fp_land: int = 0
    fn_land: int = 0
    tp_sea: int = 0
    fp_sea: int = 0
    fn_sea: int = 0

    def validate(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"negative count {name}={v}")
        # binary masks are exhaustive: a miss for one class is a false
        # alarm for the other
        if self.fp_land != self.fn_sea or self.fp_sea != self.fn_land:
            raise ValueError(f"counts break binary symmetry: {self}")
        return self

    @property
    def total(self) -> int:
        return self.tp_land + self.fn_land + self.tp_sea + self.fn_sea

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp_land + other.tp_land,
            self.fp_land + other.fp_land,
            self.fn_land + other.fn_land,
            self.tp_sea + other.tp_sea,
            self.fp_sea + other.fp_sea,
            self.fn_sea + other.fn_sea,
        )


def _check_mask(name, arr):
    arr = np.asarray(arr)
    bad = set(np.unique(arr)) - {LAND, SEA}
    if bad:
        raise ValueError(f"{name} mask has non-binary values {sorted(bad)}")
    return arr


def confusion(pred, gt) -> ConfusionCounts:
    """Tally the pixel confusion between a predicted and a reference mask."""
    pred = _check_mask("predicted", pred)
    gt = _check_mask("reference", gt)
    if pred.shape != gt.shape:
        raise ValueError(f"extent mismatch: predicted {pred.shape} vs reference {gt.shape}")
    pl, gl = pred == LAND, gt == LAND
    c = ConfusionCounts(
        tp_land=int((pl & gl).sum()),
        fp_land=int((pl & ~gl).sum()),
        fn_land=int((~pl & gl).sum()),
        tp_sea=int((~pl & ~gl).sum()),
        fp_sea=int((~pl & gl).sum()),
        fn_sea=int((pl & ~gl).sum()),
    )
    return c.validate()


def _ratio(num, denom) -> Optional[float]:
    return num / denom if denom > 0 else None


def land_precision_recall(c: ConfusionCounts):
    lp = _ratio(c.tp_land, c.tp_land + c.fp_land)
    lr = _ratio(c.tp_land, c.tp_land + c.fn_land)
    return lp, lr


def overall_precision_recall(c: ConfusionCounts):
    hits = c.tp_land + c.tp_sea
    op = _ratio(hits, c.tp_land + c.fp_land + c.tp_sea + c.fp_sea)
    or_ = _ratio(hits, c.tp_land + c.fn_land + c.tp_sea + c.fn_sea)
    return op, or_


def f1(precision, recall) -> Optional[float]:
    """Harmonic mean; scale-agnostic, so fractions and percentages both work."""
    if precision is None or recall is None:
        return None
    if precision + recall == 0:
        return None
    return 2.0 * precision * recall / (precision + recall)


def _summarize(name: str, c: ConfusionCounts) -> dict:
    lp, lr = land_precision_recall(c)
    op, or_ = overall_precision_recall(c)
    return {
        "name": name,
        "lp": lp,
        "lr": lr,
        "op": op,
        "or_": or_,
        "f1": f1(lp, lr),
        "pixels": c.total,
    }


def _fmt(v) -> str:
    return "n/a" if v is None else f"{100.0 * v:6.2f}"


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    overall: dict = field(default_factory=dict)

    def table(self) -> str:
        width = max([len("name")] + [len(r["name"]) for r in self.rows + [self.overall]])
        header = f"{'name':<{width}}  {'LP%':>6}  {'LR%':>6}  {'OP%':>6}  {'OR%':>6}  {'F1%':>6}  {'pixels':>9}"
        lines = [header, "-" * len(header)]
        for r in self.rows + [self.overall]:
            lines.append(
                f"{r['name']:<{width}}  {_fmt(r['lp'])}  {_fmt(r['lr'])}  "
                f"{_fmt(r['op'])}  {_fmt(r['or_'])}  {_fmt(r['f1'])}  {r['pixels']:>9}"
            )
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"images": self.rows, "overall": self.overall}, indent=2)


def evaluate_set(
    predict_fn: Callable[[LabeledImage], np.ndarray],
    manifest: DatasetManifest,
) -> EvalReport:
    """Predict every manifest image, compare against its mask, micro-average.

    predict_fn maps a LabeledImage to a predicted mask raster (255 sea,
    0 land). The aggregate row pools confusion counts across the set
    before computing metrics; per-image rows let a macro view be
    recomputed if wanted.
    """
    if len(manifest) == 0:
        raise ValueError("empty manifest: nothing to evaluate")
    rows = []
    pooled = ConfusionCounts()
    for img_path, mask_path in manifest.entries:
        img = load_labeled(img_path, mask_path)
        pred = predict_fn(img)
        c = confusion(pred, img.mask)
        rows.append(_summarize(str(img_path).rsplit("/", 1)[-1], c))
        pooled = pooled + c
    return EvalReport(rows, _summarize("overall", pooled))
