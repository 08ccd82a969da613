"""Multi-exposure LDR bracket synthesis from linear-HDR sequences.

Each bracket takes its three exposures from three distinct, temporally
ordered frames so that inter-exposure motion is real. Per exposure the
pipeline is: exposure gain in linear light, clip, gamma CRF, Gaussian noise
in the display domain (strongest on the short exposure, none on the long),
re-clip, quantize. The clean middle frame is the fusion ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ValidationError
from .imageio import (
    HdrImage,
    LdrImage,
    check_working_range,
    quantize,
    read_pfm,
    write_pfm,
)
from .pngio import read_png, write_png
from .rng import substream


@dataclass
class BracketConfig:
    ev_offsets: tuple = (-2.0, 0.0, 2.0)
    crf_gamma: float = 2.2
    bit_depth: int = 16
    sigma_low: tuple = (0.0001, 0.001)    # noise range for the short exposure
    sigma_mid: tuple = (0.00001, 0.0001)  # noise range for the middle exposure
    seed: int = 0
    frame_stride: int = 1
    ev_choices: tuple | None = None       # optional pool of EV triples, drawn per bracket

    def __post_init__(self):
        evs = tuple(float(e) for e in self.ev_offsets)
        if len(evs) != 3 or not (evs[0] < evs[1] < evs[2]):
            raise ConfigError(f"ev_offsets must be a strictly increasing triple, got {evs}")
        self.ev_offsets = evs
        for name, rng_pair in (("sigma_low", self.sigma_low), ("sigma_mid", self.sigma_mid)):
            lo, hi = float(rng_pair[0]), float(rng_pair[1])
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi, got ({lo}, {hi})")
        self.sigma_low = (float(self.sigma_low[0]), float(self.sigma_low[1]))
        self.sigma_mid = (float(self.sigma_mid[0]), float(self.sigma_mid[1]))
        if self.crf_gamma <= 0:
            raise ConfigError("crf_gamma must be positive")
        if self.bit_depth < 1 or self.bit_depth > 16:
            raise ConfigError("bit_depth must be in [1, 16]")
        if self.frame_stride < 1:
            raise ConfigError("frame_stride must be >= 1")
        if self.ev_choices is not None:
            self.ev_choices = tuple(tuple(float(e) for e in c) for c in self.ev_choices)
            for c in self.ev_choices:
                if len(c) != 3 or not (c[0] < c[1] < c[2]):
                    raise ConfigError(f"ev_choices entries must be increasing triples, got {c}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LdrBracket:
    short: LdrImage
    mid: LdrImage
    long: LdrImage
    linearized: list                      # three HdrImage companions
    config: BracketConfig
    frame_indices: tuple
    gt: HdrImage | None = None
    ev_used: tuple = ()
    sigmas: tuple = ()

    def __post_init__(self):
        fi = tuple(int(i) for i in self.frame_indices)
        if not (fi[0] < fi[1] < fi[2]):
            raise ValidationError(f"frame_indices must be strictly increasing, got {fi}")
        self.frame_indices = fi
        if not self.ev_used:
            self.ev_used = self.config.ev_offsets

    @property
    def ldr(self) -> list[LdrImage]:
        return [self.short, self.mid, self.long]

    def to_input(self) -> np.ndarray:
        """Stack network input: per exposure (LDR 3ch, linearized 3ch) -> (18, H, W)."""
        planes = []
        for ldr, lin in zip(self.ldr, self.linearized):
            planes.append(np.moveaxis(ldr.data, -1, 0))
            planes.append(np.moveaxis(lin.data, -1, 0))
        return np.concatenate(planes, axis=0).astype(np.float32)


def ldr_to_linear(img: LdrImage, ev: float, gamma: float) -> HdrImage:
    """Invert the CRF and exposure gain: out = img**gamma / 2**ev."""
    lin = np.power(img.data.astype(np.float64), gamma) / (2.0 ** float(ev))
    return HdrImage(data=lin.astype(np.float32))


def add_gaussian_noise(img: LdrImage, sigma: float, seed: int) -> LdrImage:
    """i.i.d. N(0, sigma^2) per value, clipped to [0,1], re-quantized."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return LdrImage(data=img.data.copy(), bit_depth=img.bit_depth)
    rng = substream(seed, "ldr-noise")
    noisy = img.data.astype(np.float64) + rng.normal(0.0, sigma, img.data.shape)
    return LdrImage(data=quantize(noisy, img.bit_depth), bit_depth=img.bit_depth)


def synth_bracket(seq, cfg: BracketConfig) -> LdrBracket:
    """Synthesize one exposure bracket from a normalized scene sequence."""
    frames = seq.frames
    if len(frames) < 3:
        raise DataError(f"bracket synthesis needs >= 3 frames, got {len(frames)}")
    ref = seq.reference_index
    stride = cfg.frame_stride
    indices = (ref - stride, ref, ref + stride)
    if indices[0] < 0 or indices[2] >= len(frames):
        raise ConfigError(
            f"frame_stride {stride} does not fit around reference frame {ref} "
            f"in a {len(frames)}-frame sequence"
        )
    check_working_range([frames[i] for i in indices], what="bracket source frames")

    ev = cfg.ev_offsets
    if cfg.ev_choices:
        pick = int(substream(cfg.seed, "evset", ref).integers(0, len(cfg.ev_choices)))
        ev = cfg.ev_choices[pick]

    sigma_ranges = (cfg.sigma_low, cfg.sigma_mid, None)
    ldrs: list[LdrImage] = []
    linearized: list[HdrImage] = []
    sigmas: list[float] = []
    for slot in range(3):
        frame = frames[indices[slot]]
        exposed = frame.data.astype(np.float64) * (2.0 ** ev[slot])
        encoded = np.power(np.clip(exposed, 0.0, 1.0), 1.0 / cfg.crf_gamma)
        rng_range = sigma_ranges[slot]
        if rng_range is None:
            sigma = 0.0
        else:
            noise_rng = substream(cfg.seed, "noise", indices[slot])
            sigma = float(noise_rng.uniform(rng_range[0], rng_range[1]))
            if sigma > 0:
                encoded = encoded + noise_rng.normal(0.0, sigma, encoded.shape)
        sigmas.append(sigma)
        ldr = LdrImage(data=quantize(encoded, cfg.bit_depth), bit_depth=cfg.bit_depth)
        ldrs.append(ldr)
        linearized.append(ldr_to_linear(ldr, ev[slot], cfg.crf_gamma))

    gt = HdrImage(data=frames[ref].data.copy())
    return LdrBracket(
        short=ldrs[0],
        mid=ldrs[1],
        long=ldrs[2],
        linearized=linearized,
        config=cfg,
        frame_indices=indices,
        gt=gt,
        ev_used=tuple(ev),
        sigmas=tuple(sigmas),
    )


# ---------------------------------------------------------------------------
# Disk layout: short/mid/long.png (16-bit), gt.pfm, meta.json
# ---------------------------------------------------------------------------

def export_bracket(bracket: LdrBracket, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ldr in zip(("short", "mid", "long"), bracket.ldr):
        write_png(out / f"{name}.png", ldr.to_uint())
    if bracket.gt is not None:
        write_pfm(bracket.gt, out / "gt.pfm")
    meta = {
        "ev_offsets": list(bracket.ev_used),
        "crf_gamma": bracket.config.crf_gamma,
        "bit_depth": bracket.config.bit_depth,
        "sigmas": list(bracket.sigmas),
        "seed": bracket.config.seed,
        "frame_indices": list(bracket.frame_indices),
        "config": bracket.config.to_dict(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2))


def load_bracket(bracket_dir) -> LdrBracket:
    root = Path(bracket_dir)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DataError(f"{root}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    cfg_doc = dict(meta["config"])
    for key in ("ev_offsets", "sigma_low", "sigma_mid"):
        cfg_doc[key] = tuple(cfg_doc[key])
    if cfg_doc.get("ev_choices") is not None:
        cfg_doc["ev_choices"] = tuple(tuple(c) for c in cfg_doc["ev_choices"])
    cfg = BracketConfig(**cfg_doc)
    bit_depth = int(meta["bit_depth"])
    ev = tuple(float(e) for e in meta["ev_offsets"])
    gamma = float(meta["crf_gamma"])
    ldrs = [
        LdrImage.from_uint(read_png(root / f"{name}.png"), bit_depth)
        for name in ("short", "mid", "long")
    ]
    linearized = [ldr_to_linear(ldr, e, gamma) for ldr, e in zip(ldrs, ev)]
    gt = read_pfm(root / "gt.pfm") if (root / "gt.pfm").exists() else None
    return LdrBracket(
        short=ldrs[0],
        mid=ldrs[1],
        long=ldrs[2],
        linearized=linearized,
        config=cfg,
        frame_indices=tuple(meta["frame_indices"]),
        gt=gt,
        ev_used=ev,
        sigmas=tuple(meta.get("sigmas", ())),
    )
