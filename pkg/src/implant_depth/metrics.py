"""Evaluation and analysis: interval accuracy, the safety margin, texture curves.

Acc(R@1, IoU=m) is the percentage of patients whose single predicted interval
overlaps the ground truth with IoU strictly greater than m, optionally also
requiring the safety margin to the nerve canal.  The texture-variation curve
mirrors the slice-sampling analysis the training loss is motivated by, using
the classical (binary, non-differentiable) Canny operator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.feature import canny as _skimage_canny

from .errors import ShapeError
from .geometry import Interval, interval_iou
from .phantom import PatientRecord, Volume

DEFAULT_THRESHOLDS = (0.6, 0.7, 0.8)
SAFETY_MARGIN_MM = 1.5


def canny_edges(image: np.ndarray, sigma: float = 1.0,
                low: float = 0.1, high: float = 0.2) -> np.ndarray:
    """Binary classical Canny edge map of a 2D [0, 1] image."""
    if image.ndim != 2:
        raise ShapeError(f"canny expects a 2D image, got shape {image.shape}")
    return _skimage_canny(image.astype(np.float64), sigma=sigma,
                          low_threshold=low, high_threshold=high)


def acc_r1(preds: list[Interval], gts: list[Interval], m: float,
           safety: list[bool] | None = None) -> float:
    """Percentage of predictions with IoU strictly greater than m."""
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ShapeError("empty evaluation set")
    if safety is not None and len(safety) != len(preds):
        raise ShapeError(f"{len(safety)} safety flags vs {len(preds)} predictions")
    hits = 0
    for i, (p, g) in enumerate(zip(preds, gts)):
        ok = interval_iou(p, g) > m
        if safety is not None:
            ok = ok and safety[i]
        hits += ok
    return 100.0 * hits / len(preds)


def safety_check(pred: Interval, canal_slice: float, spacing_d_mm: float,
                 min_mm: float = SAFETY_MARGIN_MM,
                 canal_below: bool = True) -> bool:
    """True when the implant keeps at least min_mm of bone to the canal.

    With canal_below (the default) the canal sits at a larger slice index
    than the implant end; the margin is inclusive at exactly min_mm.
    """
    if spacing_d_mm <= 0:
        raise ShapeError(f"spacing must be positive, got {spacing_d_mm}")
    if canal_below:
        gap = (canal_slice - pred.end) * spacing_d_mm
    else:
        gap = (pred.start - canal_slice) * spacing_d_mm
    return gap >= min_mm


def texture_variation_curve(volume: Volume, ks: list[int],
                            sigma: float = 1.0, low: float = 0.1,
                            high: float = 0.2) -> list[tuple[int, float]]:
    """Edge-map variation for each sampling interval k.

    Slices 0, k, 2k, ... are edge-detected; the variation is the pixelwise
    population standard deviation across the sampled maps, averaged over
    pixels.
    """
    voxels = volume.voxels
    depth = voxels.shape[0]
    curve = []
    for k in ks:
        if not 1 <= k < depth:
            raise ShapeError(f"sampling interval k={k} outside [1, {depth})")
        maps = np.stack([
            canny_edges(voxels[i], sigma=sigma, low=low, high=high)
            for i in range(0, depth, k)
        ]).astype(np.float64)
        curve.append((k, float(maps.std(axis=0, ddof=0).mean())))
    return curve


@dataclass(frozen=True)
class EvalResult:
    per_patient: list[tuple[str, float, bool]]  # (id, iou, safety_ok)
    acc_at: dict[float, float]                  # threshold -> percentage
    failures: dict[str, str]                    # id -> error message

    def summary_lines(self) -> list[str]:
        lines = [f"{pid}\tiou={iou:.4f}\tsafety_ok={ok}"
                 for pid, iou, ok in self.per_patient]
        for m in sorted(self.acc_at):
            lines.append(f"acc@{m:g}\t{self.acc_at[m]:.1f}")
        return lines


def evaluate(pipeline, records: list[PatientRecord],
             thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
             min_mm: float = SAFETY_MARGIN_MM) -> EvalResult:
    """Run `pipeline.predict_record` over a test set and aggregate accuracy.

    Pipeline failures are recorded and scored as IoU 0 rather than aborting
    the evaluation.  Patients are processed in id order so the reduction is
    deterministic.
    """
    if not records:
        raise ShapeError("empty evaluation set")
    per_patient: list[tuple[str, float, bool]] = []
    failures: dict[str, str] = {}
    preds: list[Interval] = []
    gts: list[Interval] = []
    safety: list[bool] = []
    any_canal = False
    for record in sorted(records, key=lambda r: r.id):
        gt = record.annotation.interval
        canal = record.annotation.canal_slice
        try:
            prediction = pipeline.predict_record(record)
            pred = prediction.interval
            iou = interval_iou(pred, gt)
        except Exception as exc:  # failed patients count as IoU 0
            failures[record.id] = f"{type(exc).__name__}: {exc}"
            pred = Interval(0.0, 0.0)
            iou = 0.0
        if canal is None:
            ok = True
        else:
            any_canal = True
            ok = safety_check(pred, canal, record.volume.spacing_mm[0],
                              min_mm=min_mm)
        per_patient.append((record.id, iou, ok))
        preds.append(pred)
        gts.append(gt)
        safety.append(ok)
    flags = safety if any_canal else None
    acc_at = {m: acc_r1(preds, gts, m, flags) for m in thresholds}
    return EvalResult(per_patient=per_patient, acc_at=acc_at, failures=failures)


def write_report(result: EvalResult, directory: str | Path) -> None:
    """Text report (one line per patient plus acc footer) and a JSON summary."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "eval_report.txt").write_text(
        "\n".join(result.summary_lines()) + "\n", encoding="utf-8")
    payload = {
        "per_patient": [
            {"id": pid, "iou": iou, "safety_ok": ok}
            for pid, iou, ok in result.per_patient
        ],
        "acc_at": {str(m): v for m, v in result.acc_at.items()},
        "failures": result.failures,
    }
    (directory / "eval_summary.json").write_text(
        json.dumps(payload, indent=2) + "\n", encoding="utf-8")
