"""Dataset-diversity statistics, 2-D embedding, and temporal consistency.

Seven per-image statistics are computed on luminance that is assumed to be
in the [0, 1] working range already (the dataset analyzer normalizes each
sequence by its robust luminance maximum before calling them). All except
the dynamic range are reported in percent of the working range; the dynamic
range stays in log10 units.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .base import ParamMixin
from .errors import DataError, DegenerateImageWarning
from .imageio import HdrImage, luminance, normalize_frames
from .scene import load_manifest, load_sequence
from .warp import backward_warp

HIGHLIGHT_THRESHOLD = 0.8
DR_EPS = 1e-8

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


@dataclass
class FeatureVector:
    fhlp: float
    ehl: float
    si: float
    cf: float
    stdl: float
    all: float
    dr: float

    FIELDS = ("fhlp", "ehl", "si", "cf", "stdl", "all", "dr")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in self.FIELDS], dtype=np.float64)


@dataclass
class MetricsReport:
    vectors: list          # list[FeatureVector]
    ids: list              # one id per image
    domains: list          # one tag per image
    means: FeatureVector
    embedding: np.ndarray  # (n, 2)
    size: int


def dynamic_range(img: HdrImage, eps: float = DR_EPS) -> float:
    """log10 ratio between the 98th and 2nd luminance percentiles."""
    lum = luminance(img)
    if float(lum.max()) <= 0.0:
        warnings.warn("dynamic_range on an all-zero image", DegenerateImageWarning)
        return 0.0
    p2, p98 = np.percentile(lum, [2.0, 98.0])
    return float(np.log10(p98 + eps) - np.log10(p2 + eps))


def highlight_fraction(img: HdrImage, threshold: float = HIGHLIGHT_THRESHOLD) -> float:
    """Percent of pixels whose luminance exceeds the highlight threshold."""
    lum = luminance(img)
    return float(100.0 * np.mean(lum > threshold))


def highlight_extent(img: HdrImage, threshold: float = HIGHLIGHT_THRESHOLD) -> float:
    """Mean luminance excess above the highlight threshold, in percent."""
    lum = luminance(img)
    excess = np.clip(lum - threshold, 0.0, None)
    return float(100.0 * np.mean(excess))


def _sobel_maps(lum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    padded = np.pad(lum, 1, mode="edge")
    h, w = lum.shape
    gx = np.zeros_like(lum)
    gy = np.zeros_like(lum)
    for di in range(3):
        for dj in range(3):
            window = padded[di:di + h, dj:dj + w]
            gx += _SOBEL_X[di, dj] * window
            gy += _SOBEL_Y[di, dj] * window
    return gx, gy


def spatial_information(img: HdrImage) -> float:
    """Std of the Sobel gradient magnitude of luminance, in percent."""
    lum = luminance(img)
    gx, gy = _sobel_maps(lum)
    return float(100.0 * np.std(np.hypot(gx, gy)))


def colorfulness(img: HdrImage) -> float:
    """Hasler-Suesstrunk colorfulness, in percent."""
    data = img.data.astype(np.float64)
    rg = data[:, :, 0] - data[:, :, 1]
    yb = 0.5 * (data[:, :, 0] + data[:, :, 1]) - data[:, :, 2]
    sigma = np.hypot(np.std(rg), np.std(yb))
    mu = np.hypot(np.mean(rg), np.mean(yb))
    return float(100.0 * (sigma + 0.3 * mu))


def luminance_std(img: HdrImage) -> float:
    return float(100.0 * np.std(luminance(img)))


def average_luminance(img: HdrImage) -> float:
    return float(100.0 * np.mean(luminance(img)))


def feature_vector(img: HdrImage) -> FeatureVector:
    """All seven statistics of one working-range image."""
    return FeatureVector(
        fhlp=highlight_fraction(img),
        ehl=highlight_extent(img),
        si=spatial_information(img),
        cf=colorfulness(img),
        stdl=luminance_std(img),
        all=average_luminance(img),
        dr=dynamic_range(img),
    )


# ---------------------------------------------------------------------------
# 2-D embedding
# ---------------------------------------------------------------------------

class Pca2D(ParamMixin):
    """Deterministic 2-component PCA with a fixed sign convention.

    The per-component sign makes the largest-magnitude loading positive, so
    repeated fits of the same data give identical embeddings.
    """

    def __init__(self, n_components: int = 2):
        self.n_components = n_components

    def fit(self, vectors):
        x = _to_matrix(vectors)
        if x.shape[0] < 2:
            raise DataError(f"PCA needs >= 2 vectors, got {x.shape[0]}")
        if x.shape[1] < self.n_components:
            raise DataError(
                f"PCA needs >= {self.n_components} dims, got {x.shape[1]}"
            )
        self.mean_ = x.mean(axis=0)
        centered = x - self.mean_
        cov = centered.T @ centered / x.shape[0]
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][: self.n_components]
        components = evecs[:, order].T
        for i in range(components.shape[0]):
            pivot = int(np.argmax(np.abs(components[i])))
            if components[i, pivot] < 0:
                components[i] = -components[i]
        self.components_ = components
        self.explained_variance_ = evals[order]
        return self

    def transform(self, vectors) -> np.ndarray:
        x = _to_matrix(vectors)
        return (x - self.mean_) @ self.components_.T

    def fit_transform(self, vectors) -> np.ndarray:
        return self.fit(vectors).transform(vectors)


def _to_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        return np.asarray(vectors, dtype=np.float64)
    return np.stack([
        v.as_array() if isinstance(v, FeatureVector) else np.asarray(v, dtype=np.float64)
        for v in vectors
    ])


def embed_2d(vectors) -> np.ndarray:
    """Project vectors onto their top-2 principal components."""
    return Pca2D().fit_transform(vectors)


def standardize(matrix: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per dimension; constant dims stay zero."""
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (matrix - mean) / std


# ---------------------------------------------------------------------------
# Dataset analysis
# ---------------------------------------------------------------------------

def _mean_vector(matrix: np.ndarray) -> FeatureVector:
    means = matrix.mean(axis=0)
    return FeatureVector(**dict(zip(FeatureVector.FIELDS, map(float, means))))


def analyze_images(images: list[HdrImage], ids=None, domains=None) -> MetricsReport:
    """Per-image vectors, dataset means, and a standardized 2-D embedding."""
    if not images:
        raise DataError("analyze: empty image list")
    vectors = [feature_vector(img) for img in images]
    matrix = np.stack([v.as_array() for v in vectors])
    if len(images) >= 2:
        embedding = embed_2d(standardize(matrix))
    else:
        embedding = np.zeros((1, 2))
    return MetricsReport(
        vectors=vectors,
        ids=list(ids) if ids is not None else list(range(len(images))),
        domains=list(domains) if domains is not None else ["all"] * len(images),
        means=_mean_vector(matrix),
        embedding=embedding,
        size=len(images),
    )


def analyze(manifest_path, out_dir=None) -> MetricsReport:
    """Analyze every frame of every sequence listed in a manifest.

    Each sequence is normalized by its own robust luminance maximum before
    its frames enter the statistics.
    """
    items = load_manifest(manifest_path, kind="sequences")
    images: list[HdrImage] = []
    ids: list[str] = []
    domains: list[str] = []
    for item in items:
        seq = load_sequence(item["path"])
        frames, _ = normalize_frames(seq.frames)
        for t, frame in enumerate(frames):
            images.append(frame)
            ids.append(f"{item['path']}#frame_{t:03d}")
            domains.append(item.get("domain", "all"))
    report = analyze_images(images, ids=ids, domains=domains)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: MetricsReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_image = [
        {
            "id": i,
            "domain": d,
            **asdict(v),
            "embedding": [float(report.embedding[k, 0]), float(report.embedding[k, 1])],
        }
        for k, (i, d, v) in enumerate(zip(report.ids, report.domains, report.vectors))
    ]
    doc = {
        "size": report.size,
        "means": asdict(report.means),
        "per_image": per_image,
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2))

    matrix = np.stack([v.as_array() for v in report.vectors])
    tags = sorted(set(report.domains))
    rows = []
    for tag in tags + (["all"] if "all" not in tags else []):
        sel = (
            np.ones(len(report.domains), dtype=bool)
            if tag == "all"
            else np.array([d == tag for d in report.domains])
        )
        if not sel.any():
            continue
        mean = matrix[sel].mean(axis=0)
        rows.append([tag, int(sel.sum())] + [f"{m:.4f}" for m in mean])
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "size"] + list(FeatureVector.FIELDS))
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Temporal consistency
# ---------------------------------------------------------------------------

def warp_error(seq, video: list[HdrImage]) -> float:
    """Masked flow-warping error between adjacent frames, averaged over pairs.

    For each pair, the next frame is warped backward by the sequence flow
    and compared with the current frame on non-occluded pixels:
    sum(M * ||V_t - warp(V_{t+1})||^2) / sum(M). Fully occluded pairs are
    skipped with a warning; if every pair is occluded this is an error.
    """
    if len(video) != len(seq.frames):
        raise DataError(
            f"video length {len(video)} != sequence length {len(seq.frames)}"
        )
    errors = []
    for t in range(len(video) - 1):
        mask = seq.occlusion[t].astype(np.float64)
        denom = float(mask.sum())
        if denom == 0.0:
            warnings.warn(f"warp_error: pair {t} fully occluded, skipped",
                          DegenerateImageWarning)
            continue
        warped = backward_warp(video[t + 1].data, seq.flow[t].astype(np.float64))
        diff = video[t].data.astype(np.float64) - warped
        sq = np.sum(diff * diff, axis=2)
        errors.append(float((mask * sq).sum() / denom))
    if not errors:
        raise DataError("warp_error: every frame pair is fully occluded")
    return float(np.mean(errors))
