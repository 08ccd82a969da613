"""Label-free single-pass test-time adaptation.

A teacher/student pair starts from the same pretrained checkpoint with
freshly injected adapters. Per sample: the teacher runs over N input
augmentations (exposure, white balance, flips, noise) whose outputs are
de-augmented by the exact inverse transforms. Their mu-law-domain variance
gives the uncertainty that sets the adapter scales to (1 - u, 1 + u); their
mean is the pseudo-label (more reliable than any single forward on shifted
inputs). The student takes one optimizer step toward the pseudo-label and
the teacher tracks the student by EMA. Every sample is seen exactly once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapter import (
    InjectionPlan,
    adapter_trainable_names,
    inject,
    model_from_checkpoint,
    set_model_scales,
)
from .autodiff import AdamState, Tensor, adam_step, backward, l1_loss, mu_law_t
from .base import ParamMixin
from .bracket import LdrBracket, load_bracket
from .errors import ConfigError, DataError, NumericContractError, ValidationError
from .imageio import DEFAULT_MU, HdrImage, mu_law, write_pfm
from .model import Checkpoint, FusionNet
from .quality import EvalReport, evaluate_pair, evaluate_pairs
from .rng import substream
from .scene import load_manifest

DEFAULT_UNCERTAINTY_SCALE = 1e-3
DEFAULT_EXPOSURE_OFFSETS = (-0.1, -0.5, 0.0, 0.5, 1.0)


@dataclass
class AugmentationSpec:
    exposure_offsets: tuple = DEFAULT_EXPOSURE_OFFSETS
    flips: bool = True
    wb_gain_range: tuple = (0.9, 1.1)
    noise_sigma: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        offsets = tuple(float(o) for o in self.exposure_offsets)
        if not offsets:
            raise ConfigError("exposure_offsets must be nonempty")
        if 0.0 not in offsets:
            raise ConfigError("exposure_offsets must contain 0")
        self.exposure_offsets = offsets
        lo, hi = float(self.wb_gain_range[0]), float(self.wb_gain_range[1])
        if lo <= 0 or hi < lo:
            raise ConfigError(f"wb_gain_range must be positive with lo <= hi, got ({lo}, {hi})")
        self.wb_gain_range = (lo, hi)
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass
class UncertaintyEstimate:
    raw_variance: float
    u: float


@dataclass
class AugmentDraw:
    delta_ev: float
    wb_gains: np.ndarray
    flip_h: bool
    flip_v: bool


def _augment_input(bracket: LdrBracket, draw: AugmentDraw, noise_sigma: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Build an augmented 18-channel stack.

    Exposure and white-balance gains apply to the linearized planes; the LDR
    planes are re-rendered through the bracket's CRF so both domains stay
    consistent. Noise lands on the LDR planes only.
    """
    gamma = bracket.config.crf_gamma
    identity = draw.delta_ev == 0.0 and np.all(draw.wb_gains == 1.0)
    gain = (2.0 ** draw.delta_ev) * draw.wb_gains[None, None, :]
    planes = []
    for ldr, lin, ev in zip(bracket.ldr, bracket.linearized, bracket.ev_used):
        if identity:
            lin_aug = lin.data.astype(np.float64)
            ldr_aug = ldr.data.astype(np.float64)
        else:
            lin_aug = lin.data.astype(np.float64) * gain
            ldr_aug = np.power(np.clip(lin_aug * (2.0 ** ev), 0.0, 1.0), 1.0 / gamma)
        if noise_sigma > 0:
            ldr_aug = np.clip(ldr_aug + rng.normal(0.0, noise_sigma, ldr_aug.shape), 0.0, 1.0)
        planes.append(np.moveaxis(ldr_aug, -1, 0))
        planes.append(np.moveaxis(lin_aug, -1, 0))
    stack = np.concatenate(planes, axis=0).astype(np.float32)
    if draw.flip_h:
        stack = stack[:, :, ::-1]
    if draw.flip_v:
        stack = stack[:, ::-1, :]
    return np.ascontiguousarray(stack)


def _de_augment_output(out: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Invert flips spatially and exposure/WB gains in the linear domain."""
    if draw.flip_h:
        out = out[:, ::-1, :]
    if draw.flip_v:
        out = out[::-1, :, :]
    gain = (2.0 ** draw.delta_ev) * draw.wb_gains[None, None, :]
    return out.astype(np.float64) / gain


def _draws(augspec: AugmentationSpec, sample_key: int) -> list[tuple[AugmentDraw, np.random.Generator]]:
    draws = []
    for i, offset in enumerate(augspec.exposure_offsets):
        rng = substream(augspec.seed, "tta-aug", sample_key, i)
        lo, hi = augspec.wb_gain_range
        gains = rng.uniform(lo, hi, 3)
        flip_h = augspec.flips and bool(rng.integers(0, 2))
        flip_v = augspec.flips and bool(rng.integers(0, 2))
        draws.append((AugmentDraw(float(offset), gains, flip_h, flip_v), rng))
    return draws


def augmented_outputs(infer_fn, bracket: LdrBracket, augspec: AugmentationSpec,
                      sample_key: int = 0) -> list[np.ndarray]:
    """Run the model over the N augmentations and undo each transform."""
    n = len(augspec.exposure_offsets)
    if n < 2:
        raise ConfigError(f"augmented inference needs >= 2 augmentations, got {n}")
    outs = []
    for draw, rng in _draws(augspec, sample_key):
        stack = _augment_input(bracket, draw, augspec.noise_sigma, rng)
        outs.append(_de_augment_output(infer_fn(stack), draw))
    return outs


def uncertainty_from_outputs(outs: list[np.ndarray], *, scale: float,
                             mu: float = DEFAULT_MU) -> UncertaintyEstimate:
    """Mu-law-domain per-pixel variance across the stack, normalized by scale."""
    stack64 = np.stack([mu_law(np.clip(o, 0.0, 1.0), mu=mu) for o in outs])
    raw = float(np.mean(np.var(stack64, axis=0)))
    u = float(np.clip(raw / scale, 0.0, 1.0))
    return UncertaintyEstimate(raw_variance=raw, u=u)


def estimate_uncertainty(infer_fn, bracket: LdrBracket, augspec: AugmentationSpec,
                         *, scale: float = DEFAULT_UNCERTAINTY_SCALE,
                         mu: float = DEFAULT_MU, sample_key: int = 0) -> UncertaintyEstimate:
    """Variance of the de-augmented outputs across N augmentations.

    The variance is measured per pixel in the mu-law domain and averaged;
    the normalized value is raw / scale clamped to [0, 1].
    """
    outs = augmented_outputs(infer_fn, bracket, augspec, sample_key)
    return uncertainty_from_outputs(outs, scale=scale, mu=mu)


def calibrate_uncertainty(infer_fn, brackets, augspec: AugmentationSpec,
                          *, mu: float = DEFAULT_MU, q: float = 95.0) -> float:
    """Uncertainty normalization constant: the q-th percentile of source-domain
    raw variances (measured at pretraining time, stored in the checkpoint)."""
    raws = [
        estimate_uncertainty(infer_fn, b, augspec, scale=1.0, mu=mu, sample_key=i).raw_variance
        for i, b in enumerate(brackets)
    ]
    if not raws:
        raise DataError("uncertainty calibration needs at least one bracket")
    return float(max(np.percentile(raws, q), 1e-12))


def scales_from_uncertainty(u: float) -> tuple[float, float]:
    """Adapter scales (1 - u, 1 + u); their sum is exactly 2."""
    if not 0.0 <= u <= 1.0:
        raise NumericContractError(f"uncertainty must be in [0, 1], got {u}")
    return 1.0 - u, 1.0 + u


# ---------------------------------------------------------------------------
# Teacher/student state
# ---------------------------------------------------------------------------

@dataclass
class TtaState:
    teacher: FusionNet
    student: FusionNet
    lam: float
    augspec: AugmentationSpec
    uncertainty_scale: float
    step: int = 0
    adam: AdamState = field(default_factory=AdamState)
    trainable_names: list = field(default_factory=list)
    access_log: list = field(default_factory=list)


def ema_update(state: TtaState) -> None:
    """Teacher <- lam * teacher + (1 - lam) * student, parameter-wise.

    Endpoints are exact: lam=1 leaves the teacher untouched, lam=0 copies
    the student. The blend is computed in float64 and stored in float32.
    """
    t_params = state.teacher.parameters()
    s_params = state.student.parameters()
    if set(t_params) != set(s_params):
        raise ValidationError("teacher/student parameter name sets differ")
    lam = state.lam
    if lam == 1.0:
        return
    for name, tp in t_params.items():
        sp = s_params[name]
        if lam == 0.0:
            tp.data = sp.data.copy()
        else:
            t64 = tp.data.astype(np.float64)
            s64 = sp.data.astype(np.float64)
            # s + lam*(t - s): equal parameters stay bit-identical
            tp.data = (s64 + lam * (t64 - s64)).astype(np.float32)


class TtaEngine(ParamMixin):
    """Streaming adaptation engine; also runs the ablation configurations.

    use_ts     : teacher/student updates (pseudo-label step + EMA)
    use_adapter: inject adapters and restrict updates to them
    use_unc    : per-sample scale factors from uncertainty
    """

    def __init__(self, lam: float = 0.999, lr: float = 1e-4, use_ts: bool = True,
                 use_adapter: bool = True, use_unc: bool = True,
                 predict_from: str = "teacher", view_noise: float = 1e-3,
                 r_s: int = 1, r_t: int = 64, exposure_offsets=DEFAULT_EXPOSURE_OFFSETS,
                 flips: bool = True, wb_gain_range=(0.9, 1.1), noise_sigma: float = 1e-4,
                 uncertainty_scale: float | None = None, mu: float = DEFAULT_MU,
                 seed: int = 0):
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {lam}")
        if predict_from not in ("teacher", "student"):
            raise ConfigError(f"predict_from must be teacher or student, got {predict_from!r}")
        self.lam = lam
        self.lr = lr
        self.use_ts = use_ts
        self.use_adapter = use_adapter
        self.use_unc = use_unc
        self.predict_from = predict_from
        self.view_noise = view_noise
        self.r_s = r_s
        self.r_t = r_t
        self.exposure_offsets = exposure_offsets
        self.flips = flips
        self.wb_gain_range = wb_gain_range
        self.noise_sigma = noise_sigma
        self.uncertainty_scale = uncertainty_scale
        self.mu = mu
        self.seed = seed

    def start(self, ckpt: Checkpoint) -> TtaState:
        if self.use_unc and not self.use_adapter:
            raise ConfigError("uncertainty scaling requires adapters")
        teacher = model_from_checkpoint(ckpt, seed=self.seed)
        student = model_from_checkpoint(ckpt, seed=self.seed)
        if self.use_adapter and getattr(teacher, "adapter_plan", None) is None:
            plan = InjectionPlan(
                selectors=teacher.mix_layer_names(), r_s=self.r_s, r_t=self.r_t,
                learn_alpha=False,
            )
            inject(teacher, plan, seed=self.seed)
            inject(student, InjectionPlan.from_dict(plan.to_dict()), seed=self.seed)
        for t in teacher.parameters().values():
            t.requires_grad = False
        if self.use_adapter:
            trainable_names = adapter_trainable_names(student)
        else:
            trainable_names = sorted(student.base_parameters())
        student.set_trainable(trainable_names)
        augspec = AugmentationSpec(
            exposure_offsets=tuple(self.exposure_offsets), flips=self.flips,
            wb_gain_range=tuple(self.wb_gain_range), noise_sigma=self.noise_sigma,
            seed=self.seed,
        )
        scale = self.uncertainty_scale
        if scale is None:
            scale = float(ckpt.metadata.get("uncertainty_scale", DEFAULT_UNCERTAINTY_SCALE))
        state = TtaState(
            teacher=teacher, student=student, lam=self.lam, augspec=augspec,
            uncertainty_scale=scale, trainable_names=trainable_names,
        )
        self.state_ = state
        return state

    def step(self, bracket: LdrBracket, sample_id=None) -> tuple[HdrImage, dict]:
        state = self.state_
        key = sample_id if sample_id is not None else state.step
        if key in state.access_log:
            raise NumericContractError(f"sample {key!r} visited twice in a single-pass stream")
        state.access_log.append(key)

        stack = bracket.to_input()
        diag: dict = {"index": state.step, "id": key}

        outs = None
        if self.use_ts or self.use_unc:
            outs = augmented_outputs(state.teacher.infer, bracket, state.augspec,
                                     sample_key=state.step)
        u = 0.0
        if self.use_unc:
            est = uncertainty_from_outputs(outs, scale=state.uncertainty_scale, mu=self.mu)
            u = est.u
            alpha_s, alpha_t = scales_from_uncertainty(u)
            set_model_scales(state.teacher, alpha_s, alpha_t)
            set_model_scales(state.student, alpha_s, alpha_t)
            diag["raw_variance"] = est.raw_variance
        else:
            alpha_s, alpha_t = 1.0, 1.0
        diag.update(u=u, alpha_s=alpha_s, alpha_t=alpha_t)

        prediction = state.teacher.infer(stack)

        loss_val = None
        if self.use_ts:
            if self.predict_from == "student":
                prediction = state.student.infer(stack)
            # pseudo-label: mean of the de-augmented teacher outputs, which is
            # more reliable than any single forward on shifted inputs
            pseudo = np.clip(np.mean(outs, axis=0), 0.0, None)
            view = stack
            if self.view_noise > 0:
                rng = substream(self.seed, "tta-view", state.step)
                view = (stack + rng.normal(0.0, self.view_noise, stack.shape)).astype(np.float32)
            out = state.student.forward(Tensor(view[None]))
            target = Tensor(np.moveaxis(pseudo, -1, 0)[None].astype(np.float32))
            loss = l1_loss(mu_law_t(out, self.mu), mu_law_t(target, self.mu))
            trainable = [state.student.parameters()[n] for n in state.trainable_names]
            for t in trainable:
                t.zero_grad()
            backward(loss)
            adam_step(trainable, [t.grad for t in trainable], state.adam, self.lr)
            ema_update(state)
            loss_val = float(loss.data)
        elif self.predict_from == "student":
            prediction = state.student.infer(stack)

        diag["loss"] = loss_val
        state.step += 1
        return HdrImage(data=prediction.astype(np.float32)), diag

    def run_stream(self, items, out_dir=None) -> tuple[EvalReport | None, list[dict]]:
        """Process a stream once, in order; persist predictions and diagnostics."""
        if isinstance(items, (str, Path)):
            items = load_manifest(items, kind="brackets")
        if not items:
            raise DataError("TTA stream is empty")
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        diagnostics = []
        pairs = []
        ids = []
        for item in items:
            if isinstance(item, LdrBracket):
                bracket, name = item, f"sample_{len(diagnostics):04d}"
            else:
                bracket, name = load_bracket(item["path"]), Path(item["path"]).name
            pred, diag = self.step(bracket, sample_id=name)
            if bracket.gt is not None:
                diag["psnr_mu_vs_gt"] = evaluate_pair(pred, bracket.gt, self.mu)["psnr_mu"]
                pairs.append((pred, bracket.gt))
                ids.append(name)
            diagnostics.append(diag)
            if out is not None:
                write_pfm(pred, out / f"{name}.pfm")
        if out is not None:
            with open(out / "diagnostics.jsonl", "w") as fh:
                for diag in diagnostics:
                    fh.write(json.dumps(diag) + "\n")
        report = evaluate_pairs(pairs, ids=ids, mu=self.mu) if pairs else None
        return report, diagnostics
