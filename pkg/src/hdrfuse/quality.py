"""Fidelity metrics in the linear and mu-law tone-mapped domains.

PSNR and SSIM assume inputs already sit in the [0, 1] working range; values
outside are clipped. HDR prediction/ground-truth pairs are brought into
range jointly, dividing both by the ground truth's robust maximum, which
keeps scores comparable across scenes of different absolute radiance.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ValidationError
from .imageio import DEFAULT_MU, HdrImage, mu_law, read_pfm, robust_max
from .scene import load_manifest

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5  # 11x11 window


@dataclass
class EvalReport:
    psnr_mu: float
    psnr_l: float
    ssim_mu: float
    ssim_l: float
    per_sample: list

    def to_dict(self) -> dict:
        return {
            "means": {
                "psnr_mu": self.psnr_mu,
                "psnr_l": self.psnr_l,
                "ssim_mu": self.ssim_mu,
                "ssim_l": self.ssim_l,
            },
            "per_sample": self.per_sample,
        }


def _as_unit_range(img, domain: str, mu: float) -> np.ndarray:
    data = img.data if isinstance(img, HdrImage) else np.asarray(img)
    arr = np.clip(data.astype(np.float64), 0.0, 1.0)
    if domain == "mu":
        return mu_law(arr, mu=mu)
    if domain == "linear":
        return arr
    raise ValidationError(f"unknown metric domain {domain!r}")


def psnr(pred, gt, domain: str = "mu", mu: float = DEFAULT_MU) -> float:
    """10*log10(1/MSE) on unit-range images; identical pairs give +inf."""
    a = _as_unit_range(pred, domain, mu)
    b = _as_unit_range(gt, domain, mu)
    if a.shape != b.shape:
        raise ValidationError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel() -> np.ndarray:
    xs = np.arange(-_SSIM_RADIUS, _SSIM_RADIUS + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / _SSIM_SIGMA) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid' convolution with a symmetric 1-D kernel."""
    n = kernel.size
    h, w = img.shape
    rows = np.zeros((h, w - n + 1), dtype=np.float64)
    for i, kv in enumerate(kernel):
        rows += kv * img[:, i:i + w - n + 1]
    out = np.zeros((h - n + 1, w - n + 1), dtype=np.float64)
    for i, kv in enumerate(kernel):
        out += kv * rows[i:i + h - n + 1]
    return out


def _ssim_single(a: np.ndarray, b: np.ndarray) -> float:
    kernel = _gaussian_kernel()
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    ua = _filter_valid(a, kernel)
    ub = _filter_valid(b, kernel)
    uaa = _filter_valid(a * a, kernel)
    ubb = _filter_valid(b * b, kernel)
    uab = _filter_valid(a * b, kernel)
    va = uaa - ua * ua
    vb = ubb - ub * ub
    cov = uab - ua * ub
    num = (2.0 * ua * ub + c1) * (2.0 * cov + c2)
    den = (ua * ua + ub * ub + c1) * (va + vb + c2)
    return float(np.mean(num / den))


def ssim(pred, gt, domain: str = "mu", mu: float = DEFAULT_MU) -> float:
    """Mean local SSIM, 11x11 Gaussian window, per channel then averaged."""
    a = _as_unit_range(pred, domain, mu)
    b = _as_unit_range(gt, domain, mu)
    if a.shape != b.shape:
        raise ValidationError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < 2 * _SSIM_RADIUS + 1:
        raise DataError(
            f"ssim needs images of at least {2 * _SSIM_RADIUS + 1} px per side, "
            f"got {a.shape[1]}x{a.shape[0]}"
        )
    if a.ndim == 2:
        return _ssim_single(a, b)
    return float(np.mean([_ssim_single(a[:, :, c], b[:, :, c]) for c in range(a.shape[2])]))


def normalize_pair(pred: HdrImage, gt: HdrImage) -> tuple[np.ndarray, np.ndarray]:
    """Scale a prediction/ground-truth pair by the GT robust maximum."""
    scale = robust_max(gt)
    if scale <= 0.0:
        scale = 1.0
    return pred.data.astype(np.float64) / scale, gt.data.astype(np.float64) / scale


def evaluate_pair(pred: HdrImage, gt: HdrImage, mu: float = DEFAULT_MU) -> dict:
    p, g = normalize_pair(pred, gt)
    return {
        "psnr_mu": psnr(p, g, "mu", mu),
        "psnr_l": psnr(p, g, "linear", mu),
        "ssim_mu": ssim(p, g, "mu", mu),
        "ssim_l": ssim(p, g, "linear", mu),
    }


def evaluate_pairs(pairs, ids=None, mu: float = DEFAULT_MU) -> EvalReport:
    records = []
    for i, (pred, gt) in enumerate(pairs):
        rec = evaluate_pair(pred, gt, mu)
        rec["id"] = ids[i] if ids is not None else i
        records.append(rec)
    if not records:
        raise DataError("evaluate: no prediction/ground-truth pairs")
    means = {
        key: float(np.mean([r[key] for r in records]))
        for key in ("psnr_mu", "psnr_l", "ssim_mu", "ssim_l")
    }
    return EvalReport(per_sample=records, **means)


def evaluate(pred_dir, gt_manifest, out_dir=None, mu: float = DEFAULT_MU) -> EvalReport:
    """Pair `<sample>.pfm` predictions with bracket ground truths and score them."""
    items = load_manifest(gt_manifest, kind="brackets")
    pred_root = Path(pred_dir)
    pairs = []
    ids = []
    for item in items:
        sample = Path(item["path"]).name
        pred_path = pred_root / f"{sample}.pfm"
        gt_path = Path(item["path"]) / "gt.pfm"
        if not pred_path.exists():
            raise DataError(f"missing prediction {pred_path}")
        if not gt_path.exists():
            raise DataError(f"missing ground truth {gt_path}")
        pairs.append((read_pfm(pred_path), read_pfm(gt_path)))
        ids.append(sample)
    report = evaluate_pairs(pairs, ids=ids, mu=mu)
    if out_dir is not None:
        write_eval_report(report, out_dir)
    return report


def write_eval_report(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2))
    with open(out / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "PSNR-mu", "PSNR-l", "SSIM-mu", "SSIM-l"])
        for rec in report.per_sample:
            writer.writerow(
                [rec["id"], f"{rec['psnr_mu']:.4f}", f"{rec['psnr_l']:.4f}",
                 f"{rec['ssim_mu']:.6f}", f"{rec['ssim_l']:.6f}"]
            )
        writer.writerow(
            ["mean", f"{report.psnr_mu:.4f}", f"{report.psnr_l:.4f}",
             f"{report.ssim_mu:.6f}", f"{report.ssim_l:.6f}"]
        )
