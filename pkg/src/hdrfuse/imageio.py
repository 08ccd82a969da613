"""Linear-radiance HDR and display-encoded LDR images plus the shared
radiometric transforms: PFM storage, mu-law compression, exposure offsets,
and Rec. 709 luminance.

HDR frames live in linear radiance at arbitrary nonnegative scale and are
brought into a [0, 1] working range by dividing by a robust luminance
maximum (99.9th percentile) before tone mapping or metric computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import check_array
from .errors import FormatError, ValidationError

REC709_WEIGHTS = np.array([0.2126, 0.7152, 0.0722], dtype=np.float64)
DEFAULT_MU = 5000.0
ROBUST_PERCENTILE = 99.9


@dataclass
class HdrImage:
    """3-channel linear-radiance frame, float32, RGB, row-major.

    Values are finite and nonnegative at arbitrary scale.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = check_array(self.data, "HdrImage.data", ndim=3, nonneg=True)
        if arr.shape[2] != 3:
            raise ValidationError(f"HdrImage.data: expected 3 channels, got {arr.shape[2]}")
        self.data = np.ascontiguousarray(arr, dtype=np.float32)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass
class LdrImage:
    """3-channel display-encoded frame in [0, 1], quantized to ``bit_depth`` bits.

    Every stored value is k / (2**bit_depth - 1) for an integer k.
    """

    data: np.ndarray
    bit_depth: int = 16

    def __post_init__(self):
        arr = check_array(self.data, "LdrImage.data", ndim=3)
        if arr.shape[2] != 3:
            raise ValidationError(f"LdrImage.data: expected 3 channels, got {arr.shape[2]}")
        if arr.size and (float(arr.min()) < 0.0 or float(arr.max()) > 1.0):
            raise ValidationError("LdrImage.data: values outside [0, 1]")
        levels = (1 << self.bit_depth) - 1
        scaled = arr.astype(np.float64) * levels
        # float32 storage of k/levels perturbs k by at most levels * 2^-24
        tol = max(1e-6, levels * 2.0 ** -23)
        if arr.size and float(np.abs(scaled - np.rint(scaled)).max()) > tol:
            raise ValidationError(
                f"LdrImage.data: values not on the {self.bit_depth}-bit quantization grid"
            )
        self.data = np.ascontiguousarray(arr, dtype=np.float32)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def to_uint(self) -> np.ndarray:
        levels = (1 << self.bit_depth) - 1
        dtype = np.uint16 if self.bit_depth > 8 else np.uint8
        return np.rint(self.data.astype(np.float64) * levels).astype(dtype)

    @classmethod
    def from_uint(cls, values: np.ndarray, bit_depth: int) -> "LdrImage":
        levels = (1 << bit_depth) - 1
        data = (values.astype(np.float64) / levels).astype(np.float32)
        return cls(data=data, bit_depth=bit_depth)


@dataclass
class ToneMapParams:
    """Mu-law compression constant."""

    mu: float = DEFAULT_MU

    def __post_init__(self):
        if not self.mu > 0:
            raise ValidationError(f"ToneMapParams.mu must be > 0, got {self.mu}")


def quantize(values: np.ndarray, bit_depth: int) -> np.ndarray:
    """Snap [0,1] values onto the uniform grid k/(2**bit_depth - 1)."""
    levels = (1 << bit_depth) - 1
    return (np.rint(np.clip(values, 0.0, 1.0).astype(np.float64) * levels) / levels).astype(
        np.float32
    )


# ---------------------------------------------------------------------------
# PFM storage
# ---------------------------------------------------------------------------

def _read_pfm_raw(path) -> np.ndarray:
    """Read a PFM file to an (H, W, C) float32 array, C in {1, 3}.

    No value constraints are imposed; callers layer their own validation.
    """
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise FormatError(f"{path}: not a PFM file (magic {magic!r})")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise FormatError(f"{path}: malformed PFM dimension line")
        try:
            width, height = int(dims[0]), int(dims[1])
            scale = float(fh.readline().strip())
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PFM header") from exc
        if width <= 0 or height <= 0 or scale == 0.0:
            raise FormatError(f"{path}: invalid PFM header values")
        endian = "<" if scale < 0 else ">"
        count = width * height * channels
        raw = fh.read(count * 4)
        if len(raw) != count * 4:
            raise FormatError(f"{path}: truncated PFM payload")
        data = np.frombuffer(raw, dtype=endian + "f4").reshape(height, width, channels)
    # PFM stores rows bottom-up.
    return np.ascontiguousarray(data[::-1]).astype(np.float32)


def _write_pfm_raw(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.shape[2] == 3:
        magic = b"PF"
    elif data.shape[2] == 1:
        magic = b"Pf"
    else:
        raise FormatError(f"PFM supports 1 or 3 channels, got {data.shape[2]}")
    height, width = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{width} {height}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale: little-endian payload
        fh.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> HdrImage:
    """Read a 3-channel PFM file as a linear-radiance HDR image.

    Grayscale (``Pf``) files are rejected; NaN or negative samples raise a
    validation error naming the first offending index.
    """
    data = _read_pfm_raw(path)
    if data.shape[2] != 3:
        raise FormatError(f"{path}: grayscale PFM not accepted for HDR frames")
    bad = ~np.isfinite(data) | (data < 0)
    if bad.any():
        idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(bad)), data.shape))
        raise ValidationError(f"{path}: invalid radiance value at index {idx}")
    return HdrImage(data=data)


def write_pfm(img: HdrImage, path) -> None:
    _write_pfm_raw(path, img.data)


def read_flow_pfm(path) -> np.ndarray:
    """Read a flow field stored as 3-channel PFM; returns (H, W, 2) float32."""
    data = _read_pfm_raw(path)
    if data.shape[2] != 3:
        raise FormatError(f"{path}: flow PFM must have 3 channels")
    return np.ascontiguousarray(data[:, :, :2])


def write_flow_pfm(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValidationError(f"flow must be (H, W, 2), got {flow.shape}")
    padded = np.concatenate([flow, np.zeros_like(flow[:, :, :1])], axis=2)
    _write_pfm_raw(path, padded)


# ---------------------------------------------------------------------------
# Radiometric transforms
# ---------------------------------------------------------------------------

def mu_law(x, params: ToneMapParams | None = None, *, mu: float | None = None,
           return_clamped: bool = False):
    """Mu-law compressor T(x) = log(1 + mu*x) / log(1 + mu) on [0, 1].

    Out-of-range inputs are clamped; when ``return_clamped`` is set the
    result is a ``(values, clamped)`` pair flagging that clamping occurred.
    """
    if mu is None:
        mu = (params or ToneMapParams()).mu
    if not mu > 0:
        raise ValidationError(f"mu must be > 0, got {mu}")
    arr = np.asarray(x, dtype=np.float64)
    clamped = bool(arr.size) and (float(arr.min()) < 0.0 or float(arr.max()) > 1.0)
    arr = np.clip(arr, 0.0, 1.0)
    out = np.log1p(mu * arr) / np.log1p(mu)
    if np.isscalar(x) or np.ndim(x) == 0:
        out = float(out)
    if return_clamped:
        return out, clamped
    return out


def mu_law_grad(x, mu: float = DEFAULT_MU):
    """Derivative of the mu-law compressor: mu / ((1 + mu*x) * ln(1 + mu))."""
    arr = np.clip(np.asarray(x, dtype=np.float64), 0.0, None)
    return mu / ((1.0 + mu * arr) * np.log1p(mu))


def apply_exposure(img: HdrImage, ev: float) -> HdrImage:
    """Scale radiance by 2**ev (no clipping)."""
    if not np.isfinite(ev):
        raise ValidationError(f"exposure offset must be finite, got {ev}")
    gain = np.float32(2.0 ** float(ev))
    return HdrImage(data=img.data * gain)


def luminance(img: HdrImage | np.ndarray) -> np.ndarray:
    """Rec. 709 luminance map: 0.2126 R + 0.7152 G + 0.0722 B (float64)."""
    data = img.data if isinstance(img, HdrImage) else np.asarray(img)
    return data.astype(np.float64) @ REC709_WEIGHTS


def robust_max(frames, percentile: float = ROBUST_PERCENTILE) -> float:
    """Robust luminance maximum pooled over one or more frames."""
    if isinstance(frames, (HdrImage, np.ndarray)):
        frames = [frames]
    lum = np.concatenate([luminance(f).ravel() for f in frames])
    return float(np.percentile(lum, percentile))


def normalize_frames(frames: list[HdrImage], percentile: float = ROBUST_PERCENTILE
                     ) -> tuple[list[HdrImage], float]:
    """Divide a sequence by its pooled robust luminance maximum.

    Returns the normalized frames and the scale that was divided out.
    A degenerate (all-zero) sequence is returned unchanged with scale 1.
    """
    scale = robust_max(frames, percentile)
    if scale <= 0.0:
        return [HdrImage(data=f.data.copy()) for f in frames], 1.0
    inv = np.float32(1.0 / scale)
    return [HdrImage(data=f.data * inv) for f in frames], scale


def check_working_range(frames, *, tail: float = 0.002, what: str = "sequence") -> None:
    """Validate that frames sit in the [0, 1] working range.

    Robust normalization leaves at most ~0.1% of luminance above 1, so we
    reject inputs where more than ``tail`` of the pixels exceed 1.
    """
    if isinstance(frames, HdrImage):
        frames = [frames]
    lum = np.concatenate([luminance(f).ravel() for f in frames])
    frac = float(np.mean(lum > 1.0 + 1e-6))
    if frac > tail:
        raise ValidationError(
            f"{what} is not normalized to the [0, 1] working range "
            f"({frac:.2%} of pixels above 1); divide by the robust maximum first"
        )
