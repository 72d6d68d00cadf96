"""Masked MAE/PSNR evaluation, per-volume aggregation, and the paired t-test.

Metrics are computed in dequantized native units (HU for CT) inside a
head-region mask. Aggregates use the sample (n-1) standard deviation.

PSNR has two modes. rmse_corrected (default) is the standard
20*log10(peak / RMSE). mse_denominator divides the peak by the MSE
itself, which goes negative at realistic error magnitudes; it is kept
behind a flag for comparability with results computed that way.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import data

PSNR_PEAK = 4095.0
PSNR_MODES = ("rmse_corrected", "mse_denominator")


class DimsMismatchError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


class ZeroMseError(ArithmeticError):
    """Identical volumes: PSNR is infinite and must be handled by the caller."""


class DegenerateVarianceError(ArithmeticError):
    pass


def _masked_diff(real, synth, mask):
    if real.dims != synth.dims:
        raise DimsMismatchError(f"volume dims differ: {real.dims} vs {synth.dims}")
    if mask is None or not np.any(mask):
        raise EmptyMaskError("evaluation mask is empty")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != real.dims:
        raise DimsMismatchError(f"mask shape {mask.shape} does not match dims {real.dims}")
    a = data.dequantize(real.voxels, real.window).astype(np.float64)
    b = data.dequantize(synth.voxels, synth.window).astype(np.float64)
    return (a - b)[mask]


def mae(real, synth, mask):
    """Mean absolute difference in native units over mask voxels."""
    return float(np.mean(np.abs(_masked_diff(real, synth, mask))))


def mse(real, synth, mask):
    d = _masked_diff(real, synth, mask)
    return float(np.mean(d * d))


def psnr(real, synth, mask, mode="rmse_corrected", peak=PSNR_PEAK):
    """Peak signal-to-noise ratio in dB over mask voxels."""
    if mode not in PSNR_MODES:
        raise ValueError(f"psnr mode must be one of {PSNR_MODES}, got {mode!r}")
    m = mse(real, synth, mask)
    if m == 0.0:
        raise ZeroMseError("infinite PSNR: volumes are identical inside the mask")
    denom = m if mode == "mse_denominator" else np.sqrt(m)
    return float(20.0 * np.log10(peak / denom))


@dataclass
class EvalRow:
    id: str
    mae_hu: float
    psnr_db: float | None
    n_voxels: int


@dataclass
class EvalReport:
    rows: list
    aggregate: dict
    metric_mode: str

    def to_json(self):
        payload = {
            "metric_mode": self.metric_mode,
            "rows": [{"id": r.id, "mae_hu": r.mae_hu, "psnr_db": r.psnr_db,
                      "n_voxels": r.n_voxels} for r in self.rows],
            "aggregate": self.aggregate,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def aggregate(rows):
    """Mean and sample SD of MAE and PSNR over per-volume rows.

    With fewer than two rows the SDs are omitted (None) with a warning.
    """
    if not rows:
        raise ValueError("aggregate needs at least one row")
    maes = np.array([r.mae_hu for r in rows], dtype=np.float64)
    psnrs = np.array([r.psnr_db for r in rows if r.psnr_db is not None],
                     dtype=np.float64)
    out = {"mean_mae": float(maes.mean()),
           "mean_psnr": float(psnrs.mean()) if psnrs.size else None}
    if len(rows) >= 2:
        out["sd_mae"] = float(maes.std(ddof=1))
        out["sd_psnr"] = float(psnrs.std(ddof=1)) if psnrs.size >= 2 else None
    else:
        warnings.warn("fewer than two rows: sample SD omitted")
        out["sd_mae"] = None
        out["sd_psnr"] = None
    return out


def build_report(rows, mode="rmse_corrected"):
    return EvalReport(rows=list(rows), aggregate=aggregate(rows), metric_mode=mode)


def paired_ttest(a, b):
    """Paired two-sided t-test; returns (t, p) with n-1 degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired_ttest needs equal-length 1D inputs, got {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired_ttest needs at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateVarianceError("paired differences have zero variance")
    t = float(d.mean() / (sd / np.sqrt(n)))
    nu = n - 1
    # two-sided p via the regularized incomplete beta function
    p = float(special.betainc(nu / 2.0, 0.5, nu / (nu + t * t)))
    return t, p


def error_map(real, synth):
    """Absolute per-voxel difference re-quantized into a [0, window-span] display window."""
    if real.dims != synth.dims:
        raise DimsMismatchError(f"volume dims differ: {real.dims} vs {synth.dims}")
    a = data.dequantize(real.voxels, real.window)
    b = data.dequantize(synth.voxels, synth.window)
    span = real.window[1] - real.window[0]
    diff = np.abs(a - b)
    return data.SliceVolume(modality=real.modality, dims=real.dims,
                            spacing_mm=real.spacing_mm, window=(0.0, span),
                            voxels=data.quantize(diff, (0.0, span)))


def _fmt(x, width=10):
    return f"{x:{width}.1f}" if x is not None else " " * (width - 3) + "---"


def render_table(report_a, report_b=None, label_a="Run A", label_b="Run B"):
    """Fixed-width text table: per-volume MAE/PSNR rows plus the mean +/- SD line."""
    lines = []
    if report_b is None:
        lines.append(f"{'':12s}{'MAE':>10s}{'PSNR':>10s}")
        for r in report_a.rows:
            lines.append(f"{r.id:12s}{_fmt(r.mae_hu)}{_fmt(r.psnr_db)}")
        agg = report_a.aggregate
        lines.append(f"{'Mean +/- SD':12s}"
                     f"{_fmt(agg['mean_mae'])} +/- {agg['sd_mae']:.1f}"
                     f"{_fmt(agg['mean_psnr'])} +/- {agg['sd_psnr']:.1f}"
                     if agg["sd_mae"] is not None else
                     f"{'Mean':12s}{_fmt(agg['mean_mae'])}{_fmt(agg['mean_psnr'])}")
        return "\n".join(lines)

    lines.append(f"{'':12s}{'MAE':>21s}{'PSNR':>21s}")
    lines.append(f"{'':12s}{label_a:>10s}{label_b:>11s}{label_a:>10s}{label_b:>11s}")
    for ra, rb in zip(report_a.rows, report_b.rows):
        lines.append(f"{ra.id:12s}{_fmt(ra.mae_hu)}{_fmt(rb.mae_hu, 11)}"
                     f"{_fmt(ra.psnr_db)}{_fmt(rb.psnr_db, 11)}")
    aa, ab = report_a.aggregate, report_b.aggregate
    lines.append(
        f"{'Mean +/- SD':12s}"
        f"{aa['mean_mae']:6.1f} +/- {aa['sd_mae']:.1f}"
        f" {ab['mean_mae']:6.1f} +/- {ab['sd_mae']:.1f}"
        f" {aa['mean_psnr']:6.1f} +/- {aa['sd_psnr']:.1f}"
        f" {ab['mean_psnr']:6.1f} +/- {ab['sd_psnr']:.1f}")
    return "\n".join(lines)
