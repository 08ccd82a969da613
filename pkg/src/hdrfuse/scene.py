"""Procedural dynamic-scene generator.

Produces linear-HDR sequences of moving sprites over parametric backgrounds,
with analytically exact optical flow and occlusion masks, plus optional
Perlin-noise camera shake applied to both position and rotation. Sprites are
rendered with 2x2 supersampled coverage; classification margins guarantee
that pixels labelled fully-inside or pure-background carry exactly the
sprite or background radiance, which is what makes the exported flow
warp-consistent for integer per-frame motion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ValidationError
from .imageio import HdrImage, luminance, write_pfm, read_pfm, write_flow_pfm, read_flow_pfm
from .pngio import write_png, read_png
from .rng import substream
from .warp import bilinear_sample

_EDGE_MARGIN = 0.75          # px; half-pixel extent + supersample offset
_SHAKE_CLASS_MARGIN = 2.5    # px; widened band when camera resampling is active


@dataclass
class SpriteSpec:
    shape: str = "disk"               # disk | box
    size: float = 16.0                # diameter / side length in px
    radiance: tuple = (1.0, 0.6, 0.3)
    velocity: tuple = (2.0, 0.0)      # px per frame
    trajectory: str = "linear"        # linear | sine
    start: tuple | None = None        # None: drawn from the scene seed
    sine_amp: float = 0.0
    sine_period: float = 8.0

    def __post_init__(self):
        if self.shape not in ("disk", "box"):
            raise ConfigError(f"unknown sprite shape {self.shape!r}")
        if self.trajectory not in ("linear", "sine"):
            raise ConfigError(f"unknown trajectory {self.trajectory!r}")
        if self.size <= 0:
            raise ConfigError("sprite size must be positive")
        if any(r < 0 for r in self.radiance):
            raise ConfigError("sprite radiance must be nonnegative")

    def position(self, t: float, start: tuple) -> tuple[float, float]:
        x = start[0] + self.velocity[0] * t
        y = start[1] + self.velocity[1] * t
        if self.trajectory == "sine" and self.sine_amp != 0.0:
            y += self.sine_amp * math.sin(2.0 * math.pi * t / self.sine_period)
        return x, y


@dataclass
class ShakeSpec:
    amplitude_px: float = 3.0
    amplitude_rot: float = 0.5        # degrees
    frequency: float = 0.15           # Perlin base frequency per frame
    octaves: int = 2

    def __post_init__(self):
        if self.amplitude_px < 0 or self.amplitude_rot < 0:
            raise ConfigError("shake amplitudes must be nonnegative")
        if self.octaves < 1:
            raise ConfigError("shake octaves must be >= 1")
        if self.frequency <= 0:
            raise ConfigError("shake frequency must be positive")


@dataclass
class SceneSpec:
    resolution: tuple = (128, 128)    # (width, height)
    num_frames: int = 24
    background: str = "gradient-sky"  # gradient-sky | sun-disk | night-lights
    dynamic_elements: list = field(default_factory=list)
    lighting_scale: float = 1.0
    shake: ShakeSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_frames < 3:
            raise ConfigError("num_frames must be >= 3")
        if self.lighting_scale <= 0:
            raise ConfigError("lighting_scale must be positive")
        if self.background not in ("gradient-sky", "sun-disk", "night-lights"):
            raise ConfigError(f"unknown background {self.background!r}")
        self.dynamic_elements = [
            s if isinstance(s, SpriteSpec) else SpriteSpec(**s) for s in self.dynamic_elements
        ]
        if self.shake is not None and not isinstance(self.shake, ShakeSpec):
            self.shake = ShakeSpec(**self.shake)
        w, h = self.resolution
        for s in self.dynamic_elements:
            if s.size >= min(w, h):
                raise ConfigError(
                    f"sprite of size {s.size} does not fit a {w}x{h} frame"
                )

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["resolution"] = list(self.resolution)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        doc = dict(doc)
        doc["resolution"] = tuple(doc["resolution"])
        if doc.get("shake") is not None:
            doc["shake"] = ShakeSpec(**doc["shake"])
        doc["dynamic_elements"] = [
            SpriteSpec(
                **{**e, "radiance": tuple(e["radiance"]), "velocity": tuple(e["velocity"]),
                   "start": tuple(e["start"]) if e.get("start") is not None else None}
            )
            for e in doc.get("dynamic_elements", [])
        ]
        return cls(**doc)


@dataclass
class SceneSequence:
    frames: list                      # list[HdrImage]
    flow: list                        # list[(H, W, 2) float32], len = num_frames - 1
    occlusion: list                   # list[(H, W) uint8 in {0,1}], len = num_frames - 1
    reference_index: int
    spec: SceneSpec

    def __post_init__(self):
        n = len(self.frames)
        if len(self.flow) != n - 1 or len(self.occlusion) != n - 1:
            raise ValidationError(
                f"sequence with {n} frames needs {n - 1} flow/occlusion fields"
            )
        for m in self.occlusion:
            vals = np.unique(m)
            if not np.all(np.isin(vals, [0, 1])):
                raise ValidationError("occlusion mask values must be in {0, 1}")
        for f in self.flow:
            if not np.all(np.isfinite(f)):
                raise ValidationError("flow contains non-finite values")


# ---------------------------------------------------------------------------
# Perlin camera shake
# ---------------------------------------------------------------------------

def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _perlin1d(xs: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    i0 = np.floor(xs).astype(np.int64)
    f = xs - i0
    g0 = gradients[i0]
    g1 = gradients[i0 + 1]
    u = _fade(f)
    return (1.0 - u) * (g0 * f) + u * (g1 * (f - 1.0))


def perlin_noise(xs: np.ndarray, rng: np.random.Generator, octaves: int,
                 persistence: float = 0.5) -> np.ndarray:
    """Multi-octave 1-D Perlin noise, bounded in [-1, 1]."""
    xs = np.asarray(xs, dtype=np.float64)
    total = np.zeros_like(xs)
    norm = 0.0
    for o in range(octaves):
        scale = 2.0 ** o
        pts = xs * scale
        n_lattice = int(np.floor(pts.max())) + 2 if pts.size else 2
        gradients = rng.uniform(-1.0, 1.0, n_lattice + 1)
        total += (persistence ** o) * _perlin1d(pts, gradients)
        norm += persistence ** o
    return total / norm


def perlin_shake(spec: ShakeSpec, num_frames: int, seed: int) -> np.ndarray:
    """Per-frame camera jitter (dx, dy, dtheta_degrees), shape (num_frames, 3).

    Trajectories are band-limited Perlin noise: |dx|, |dy| <= amplitude_px and
    |dtheta| <= amplitude_rot, each axis from its own substream.
    """
    xs = np.arange(num_frames, dtype=np.float64) * spec.frequency
    out = np.zeros((num_frames, 3), dtype=np.float64)
    amps = (spec.amplitude_px, spec.amplitude_px, spec.amplitude_rot)
    for axis, (name, amp) in enumerate(zip(("dx", "dy", "dtheta"), amps)):
        if amp == 0.0:
            continue
        rng = substream(seed, "shake", name)
        out[:, axis] = amp * perlin_noise(xs, rng, spec.octaves)
    return out


# ---------------------------------------------------------------------------
# Backgrounds
# ---------------------------------------------------------------------------

def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    w, h = spec.resolution
    ys = np.linspace(0.0, 1.0, h)[:, None]
    xs = np.linspace(0.0, 1.0, w)[None, :]
    img = np.zeros((h, w, 3), dtype=np.float64)
    if spec.background in ("gradient-sky", "sun-disk"):
        ramp = 0.02 + 0.33 * (1.0 - ys)          # brighter toward the top
        tint = 0.06 * xs                         # mild horizontal color drift
        img[:, :, 0] = ramp * (0.95 - tint)
        img[:, :, 1] = ramp * (0.97 - 0.5 * tint)
        img[:, :, 2] = ramp * (1.05 + tint)
    else:  # night-lights
        ramp = 0.002 + 0.006 * ys
        img[:, :, 0] = ramp * 1.1
        img[:, :, 1] = ramp
        img[:, :, 2] = ramp * 0.9
        # light count scales with area so small renders stay dark overall
        n_lights = max(2, int(rng.integers(2, 6) * (w * h) / 4096))
        gy, gx = np.mgrid[0:h, 0:w]
        for _ in range(n_lights):
            cx = rng.uniform(0.05 * w, 0.95 * w)
            cy = rng.uniform(0.05 * h, 0.95 * h)
            radius = rng.uniform(1.0, 2.5)
            color = rng.uniform(0.4, 1.0, 3) * rng.uniform(3.0, 10.0)
            d2 = (gx - cx) ** 2 + (gy - cy) ** 2
            img += np.exp(-d2[:, :, None] / (2.0 * radius ** 2)) * color
    if spec.background == "sun-disk":
        med = float(np.median(luminance(img.astype(np.float32))))
        sun = 400.0 * max(med, 1e-6)
        radius = 0.10 * min(w, h)
        cx = rng.uniform(0.25 * w, 0.75 * w)
        cy = rng.uniform(0.15 * h, 0.45 * h)
        gy, gx = np.mgrid[0:h, 0:w]
        inside = (gx - cx) ** 2 + (gy - cy) ** 2 <= radius ** 2
        img[inside] = sun
    return (img * spec.lighting_scale).astype(np.float64)


# ---------------------------------------------------------------------------
# Sprite geometry
# ---------------------------------------------------------------------------

def _sprite_starts(spec: SceneSpec) -> list[tuple[float, float]]:
    w, h = spec.resolution
    starts = []
    for i, s in enumerate(spec.dynamic_elements):
        if s.start is not None:
            starts.append((float(s.start[0]), float(s.start[1])))
            continue
        rng = substream(spec.seed, "sprite-start", i)
        margin = s.size / 2.0 + 2.0
        travel_x = abs(s.velocity[0]) * (spec.num_frames - 1)
        travel_y = abs(s.velocity[1]) * (spec.num_frames - 1)
        # keep the whole trajectory loosely inside the frame when possible
        x0 = rng.uniform(margin, max(margin + 1.0, w - margin - travel_x))
        y0 = rng.uniform(margin, max(margin + 1.0, h - margin - travel_y))
        if s.velocity[0] < 0:
            x0 = w - x0
        if s.velocity[1] < 0:
            y0 = h - y0
        starts.append((float(x0), float(y0)))
    return starts


def _coverage(shape: str, size: float, cx: float, cy: float, w: int, h: int) -> np.ndarray:
    """Supersampled coverage in [0, 1] at 2x2 samples per pixel."""
    offsets = (-0.25, 0.25)
    cov = np.zeros((h, w), dtype=np.float64)
    gy, gx = np.mgrid[0:h, 0:w]
    half = size / 2.0
    for oy in offsets:
        for ox in offsets:
            sx = gx + ox
            sy = gy + oy
            if shape == "disk":
                inside = (sx - cx) ** 2 + (sy - cy) ** 2 <= half ** 2
            else:
                inside = (np.abs(sx - cx) <= half) & (np.abs(sy - cy) <= half)
            cov += inside
    return cov / 4.0


def _classify(shape: str, size: float, cx: float, cy: float,
              xs: np.ndarray, ys: np.ndarray, margin: float) -> np.ndarray:
    """-1 outside, +1 fully inside, 0 in the ambiguous edge band."""
    half = size / 2.0
    if shape == "disk":
        d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2) - half
    else:
        d = np.maximum(np.abs(xs - cx), np.abs(ys - cy)) - half
    out = np.zeros(d.shape, dtype=np.int8)
    out[d <= -margin] = 1
    out[d >= margin] = -1
    return out


# ---------------------------------------------------------------------------
# Sequence generation
# ---------------------------------------------------------------------------

def _camera_transforms(shake_traj: np.ndarray | None, w: int, h: int):
    """Per-frame affine maps p -> world and world -> p."""
    if shake_traj is None:
        ident = (np.eye(2), np.zeros(2))
        return None
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    center = np.array([cx, cy])
    fwd, inv = [], []
    for dx, dy, deg in shake_traj:
        th = math.radians(deg)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        offset = np.array([dx, dy])
        fwd.append((rot, center + offset - rot @ center))
        rinv = rot.T
        inv.append((rinv, center - rinv @ (center + offset)))
    return fwd, inv


def _apply_affine(mat: np.ndarray, off: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    nx = mat[0, 0] * xs + mat[0, 1] * ys + off[0]
    ny = mat[1, 0] * xs + mat[1, 1] * ys + off[1]
    return nx, ny


def generate_sequence(spec: SceneSpec) -> SceneSequence:
    """Render a sequence with exact flow and occlusion ground truth."""
    w, h = spec.resolution
    n = spec.num_frames
    bg_rng = substream(spec.seed, "background")
    bg = _background(spec, bg_rng)
    starts = _sprite_starts(spec)
    sprites = spec.dynamic_elements

    shake_traj = None
    transforms = None
    if spec.shake is not None and (
        spec.shake.amplitude_px > 0 or spec.shake.amplitude_rot > 0
    ):
        shake_traj = perlin_shake(spec.shake, n, spec.seed)
        transforms = _camera_transforms(shake_traj, w, h)
    margin = _SHAKE_CLASS_MARGIN if shake_traj is not None else _EDGE_MARGIN

    # world-space renders and sprite centers per frame
    positions = [
        [s.position(t, starts[i]) for i, s in enumerate(sprites)] for t in range(n)
    ]
    worlds = []
    for t in range(n):
        img = bg.copy()
        for i, s in enumerate(sprites):
            cx, cy = positions[t][i]
            cov = _coverage(s.shape, s.size, cx, cy, w, h)[:, :, None]
            img = img * (1.0 - cov) + np.asarray(s.radiance, dtype=np.float64) * cov
        worlds.append(img)

    gy, gx = np.mgrid[0:h, 0:w]
    gx = gx.astype(np.float64)
    gy = gy.astype(np.float64)

    frames: list[HdrImage] = []
    world_coords = []
    for t in range(n):
        if transforms is None:
            frames.append(HdrImage(data=worlds[t].astype(np.float32)))
            world_coords.append((gx, gy))
        else:
            mat, off = transforms[0][t]
            wx, wy = _apply_affine(mat, off, gx, gy)
            img = bilinear_sample(worlds[t], wx, wy)
            frames.append(HdrImage(data=img.astype(np.float32)))
            world_coords.append((wx, wy))

    def classify_world(t: int, xs: np.ndarray, ys: np.ndarray):
        """Topmost owner index (-1 bg) and validity (False in edge bands)."""
        owner = np.full(xs.shape, -1, dtype=np.int32)
        valid = np.ones(xs.shape, dtype=bool)
        for i, s in enumerate(sprites):
            cx, cy = positions[t][i]
            cls = _classify(s.shape, s.size, cx, cy, xs, ys, margin)
            owner[cls == 1] = i
            valid[cls == 0] = False
            owner[cls == 0] = i  # edge band: flow follows the sprite, masked out
        return owner, valid

    flows: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    for t in range(n - 1):
        wx, wy = world_coords[t]
        owner, valid = classify_world(t, wx, wy)

        dx = np.zeros((h, w), dtype=np.float64)
        dy = np.zeros((h, w), dtype=np.float64)
        for i in range(len(sprites)):
            p0 = positions[t][i]
            p1 = positions[t + 1][i]
            sel = owner == i
            dx[sel] = p1[0] - p0[0]
            dy[sel] = p1[1] - p0[1]

        tx = wx + dx
        ty = wy + dy
        if transforms is None:
            px, py = tx, ty
        else:
            mat, off = transforms[1][t + 1]
            px, py = _apply_affine(mat, off, tx, ty)
        flow = np.stack([px - gx, py - gy], axis=-1).astype(np.float32)

        owner1, valid1 = classify_world(t + 1, tx, ty)
        mask = valid & valid1 & (owner == owner1)
        inb = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
        mask &= inb
        if transforms is not None:
            # both frames must sample strictly inside the world raster
            mask &= (wx >= 1) & (wx <= w - 2) & (wy >= 1) & (wy <= h - 2)
            mat1, off1 = transforms[0][t + 1]
            sx, sy = _apply_affine(mat1, off1, px, py)
            mask &= (sx >= 1) & (sx <= w - 2) & (sy >= 1) & (sy <= h - 2)
            # background comparisons are interpolated twice: mask out texture
            # only where the two samples cannot agree exactly (sprite interiors
            # stay exact because they are constant)
        flows.append(flow)
        masks.append(mask.astype(np.uint8))

    return SceneSequence(
        frames=frames,
        flow=flows,
        occlusion=masks,
        reference_index=n // 2,
        spec=spec,
    )


# ---------------------------------------------------------------------------
# Disk layout
# ---------------------------------------------------------------------------

def export_sequence(seq: SceneSequence, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        write_pfm(frame, out / f"frame_{t:03d}.pfm")
    for t, flow in enumerate(seq.flow):
        write_flow_pfm(out / f"flow_{t:03d}.pfm", flow)
    for t, occ in enumerate(seq.occlusion):
        write_png(out / f"occ_{t:03d}.png", (occ * 255).astype(np.uint8))
    doc = {"reference_index": seq.reference_index, "spec": seq.spec.to_dict()}
    (out / "spec.json").write_text(json.dumps(doc, indent=2))


def load_sequence(seq_dir) -> SceneSequence:
    root = Path(seq_dir)
    spec_path = root / "spec.json"
    if not spec_path.exists():
        raise DataError(f"{root}: missing spec.json")
    doc = json.loads(spec_path.read_text())
    spec = SceneSpec.from_dict(doc["spec"])
    frames = [read_pfm(root / f"frame_{t:03d}.pfm") for t in range(spec.num_frames)]
    flows = [read_flow_pfm(root / f"flow_{t:03d}.pfm") for t in range(spec.num_frames - 1)]
    occs = [
        (read_png(root / f"occ_{t:03d}.png") > 0).astype(np.uint8)
        for t in range(spec.num_frames - 1)
    ]
    return SceneSequence(
        frames=frames,
        flow=flows,
        occlusion=occs,
        reference_index=int(doc["reference_index"]),
        spec=spec,
    )


def write_manifest(path, items: list[dict], kind: str) -> None:
    Path(path).write_text(json.dumps({"kind": kind, "items": items}, indent=2))


def load_manifest(path, kind: str | None = None) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"manifest not found: {p}")
    doc = json.loads(p.read_text())
    if "items" not in doc:
        raise DataError(f"{p}: manifest missing 'items'")
    if kind is not None and doc.get("kind") != kind:
        raise DataError(f"{p}: expected manifest kind {kind!r}, got {doc.get('kind')!r}")
    if not doc["items"]:
        raise DataError(f"{p}: manifest is empty")
    return doc["items"]
