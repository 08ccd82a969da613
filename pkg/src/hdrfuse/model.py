"""Compact HDR fusion network with training and checkpointing.

The network consumes an 18-channel stack (three exposures, each as LDR plus
exposure-compensated linear values) and emits a 3-channel linear-HDR frame
through a final relu. Spatial context comes from 3x3 convolutions; every
block also carries a 1x1 channel-mixing convolution, which is where the
sim-to-real adapters attach.

Checkpoints are a single file: magic ``S2RCKPT1``, a little-endian uint64
header length, a JSON header (version, config, metadata, tensor directory),
then raw little-endian float32 tensor payloads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step, backward, conv2d, l1_loss, mu_law_t, relu
from .base import ParamMixin
from .bracket import LdrBracket, load_bracket
from .errors import ConfigError, DataError, FormatError, ValidationError
from .imageio import DEFAULT_MU, HdrImage
from .rng import substream

_MAGIC = b"S2RCKPT1"
_CKPT_VERSION = 1


@dataclass
class FusionNetConfig:
    base_channels: int = 16
    depth: int = 4
    in_channels: int = 18
    out_channels: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.base_channels < 4:
            raise ConfigError("base_channels must be >= 4")

    def to_dict(self) -> dict:
        return asdict(self)


class Conv2dLayer:
    """Named convolution; a sim-to-real adapter may be attached post hoc."""

    def __init__(self, name: str, w: np.ndarray, b: np.ndarray):
        self.name = name
        self.w = Tensor(w, requires_grad=False)
        self.b = Tensor(b, requires_grad=False)
        self.adapter = None

    @property
    def kernel_size(self) -> int:
        return self.w.data.shape[2]

    @property
    def in_channels(self) -> int:
        return self.w.data.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w.data.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.w, self.b)
        if self.adapter is not None:
            delta = self.adapter.delta(x)
            if delta is not None:
                out = ad.add(out, delta)
        return out


class FusionNet:
    """Stem, channel-mix blocks, and a 1x1 projection head, relu throughout."""

    def __init__(self, config: FusionNetConfig | None = None, seed: int = 0):
        self.config = config or FusionNetConfig()
        self.layers: dict[str, Conv2dLayer] = {}
        c = self.config.base_channels
        cin = self.config.in_channels
        # the input mix rebalances the exposure planes; as a 1x1 layer it is
        # also the natural host for photometric domain corrections
        plan = [("inmix", cin, cin, 1), ("stem", cin, c, 3)]
        for i in range(self.config.depth - 2):
            plan.append((f"block{i}.conv3", c, c, 3))
            plan.append((f"block{i}.mix", c, c, 1))
        plan.append(("head", c, self.config.out_channels, 1))
        for name, n_in, n_out, k in plan:
            if name == "inmix":
                w = np.eye(n_in, dtype=np.float32)[:, :, None, None]
            else:
                rng = substream(seed, "init", name)
                std = np.sqrt(2.0 / (n_in * k * k))
                w = rng.normal(0.0, std, (n_out, n_in, k, k)).astype(np.float32)
            self.layers[name] = Conv2dLayer(name, w, np.zeros(n_out, dtype=np.float32))

    def layer(self, path: str) -> Conv2dLayer:
        if path not in self.layers:
            raise ValidationError(f"no layer named {path!r}")
        return self.layers[path]

    def mix_layer_names(self) -> list[str]:
        return [name for name, layer in self.layers.items() if layer.kernel_size == 1]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers.values():
            x = relu(layer.forward(x))
        return x

    def infer(self, stack: np.ndarray) -> np.ndarray:
        """Run one (18, H, W) stack; returns an (H, W, 3) array."""
        out = self.forward(Tensor(stack[None]))
        return np.moveaxis(out.data[0], 0, -1)

    def predict(self, bracket: LdrBracket) -> HdrImage:
        return HdrImage(data=self.infer(bracket.to_input()))

    # -- parameter access ---------------------------------------------------

    def base_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self.layers.items():
            out[f"{name}.w"] = layer.w
            out[f"{name}.b"] = layer.b
        return out

    def parameters(self) -> dict[str, Tensor]:
        out = self.base_parameters()
        for name, layer in self.layers.items():
            if layer.adapter is not None:
                out.update(layer.adapter.named_tensors(f"adapters/{name}"))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, value in state.items():
            if name not in params:
                raise DataError(f"unexpected tensor {name!r} in state")
            if params[name].data.shape != value.shape:
                raise DataError(
                    f"tensor {name!r}: shape {value.shape} != {params[name].data.shape}"
                )
            params[name].data = np.asarray(value, dtype=np.float32).copy()

    def set_trainable(self, names) -> list[Tensor]:
        """Mark exactly the named tensors trainable; returns them in name order."""
        params = self.parameters()
        for t in params.values():
            t.requires_grad = False
        chosen = []
        for name in names:
            if name not in params:
                raise ValidationError(f"no parameter named {name!r}")
            params[name].requires_grad = True
            chosen.append(params[name])
        return chosen


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    config: dict
    metadata: dict = field(default_factory=dict)

    def save(self, path) -> None:
        names = sorted(self.params)
        tensors = []
        offset = 0
        for name in names:
            arr = np.ascontiguousarray(self.params[name], dtype="<f4")
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
        header = json.dumps(
            {
                "version": _CKPT_VERSION,
                "config": self.config,
                "metadata": self.metadata,
                "tensors": tensors,
            }
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for name in names:
                fh.write(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        p = Path(path)
        if not p.exists():
            raise DataError(f"checkpoint not found: {p}")
        blob = p.read_bytes()
        if blob[: len(_MAGIC)] != _MAGIC:
            raise FormatError(f"{p}: bad checkpoint magic")
        (hlen,) = struct.unpack("<Q", blob[8:16])
        try:
            header = json.loads(blob[16:16 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{p}: corrupt checkpoint header") from exc
        if header.get("version") != _CKPT_VERSION:
            raise FormatError(
                f"{p}: unsupported checkpoint version {header.get('version')!r}"
            )
        payload = blob[16 + hlen:]
        params = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            arr = np.frombuffer(payload[start:start + 4 * count], dtype="<f4")
            if arr.size != count:
                raise FormatError(f"{p}: truncated tensor {entry['name']!r}")
            params[entry["name"]] = arr.reshape(shape).astype(np.float32)
        return cls(params=params, config=header["config"], metadata=header["metadata"])


def base_checkpoint(net: FusionNet, metadata: dict | None = None) -> Checkpoint:
    params = {name: t.data.copy() for name, t in net.base_parameters().items()}
    return Checkpoint(params=params, config=net.config.to_dict(), metadata=dict(metadata or {}))


def net_from_base_checkpoint(ckpt: Checkpoint) -> FusionNet:
    net = FusionNet(FusionNetConfig(**ckpt.config))
    base = {k: v for k, v in ckpt.params.items() if not k.startswith("adapters/")}
    net.load_state_dict(base)
    return net


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def fusion_loss(pred, gt, mu: float = DEFAULT_MU) -> float:
    """Training objective: L1 distance in the mu-law tone-mapped domain.

    Matches the differentiable loss used by the trainers; negative inputs
    clamp to zero before compression.
    """
    p = np.clip(np.asarray(pred.data if isinstance(pred, HdrImage) else pred,
                           dtype=np.float64), 0.0, None)
    g = np.clip(np.asarray(gt.data if isinstance(gt, HdrImage) else gt,
                           dtype=np.float64), 0.0, None)
    if p.shape != g.shape:
        raise ValidationError(f"fusion_loss: shape mismatch {p.shape} vs {g.shape}")
    denom = np.log1p(mu)
    return float(np.mean(np.abs(np.log1p(mu * p) / denom - np.log1p(mu * g) / denom)))


def samples_from_brackets(brackets: list[LdrBracket]) -> list[tuple[np.ndarray, np.ndarray]]:
    samples = []
    for b in brackets:
        if b.gt is None:
            raise DataError("training requires brackets with ground truth")
        gt = np.moveaxis(np.clip(b.gt.data, 0.0, 1.0), -1, 0).astype(np.float32)
        samples.append((b.to_input(), gt))
    return samples


def load_samples(items) -> list[tuple[np.ndarray, np.ndarray]]:
    return samples_from_brackets([load_bracket(it["path"]) for it in items])


def _augment_pair(stack, gt, rng):
    if rng.random() < 0.5:
        stack = stack[:, :, ::-1]
        gt = gt[:, :, ::-1]
    if rng.random() < 0.5:
        stack = stack[:, ::-1, :]
        gt = gt[:, ::-1, :]
    if stack.shape[1] == stack.shape[2]:
        k = int(rng.integers(0, 4))
        if k:
            stack = np.rot90(stack, k, axes=(1, 2))
            gt = np.rot90(gt, k, axes=(1, 2))
    return np.ascontiguousarray(stack), np.ascontiguousarray(gt)


def train_loop(net: FusionNet, trainable: list[Tensor], samples, *, epochs: int,
               lr: float, crop: int | None, seed: int, mu: float = DEFAULT_MU,
               augment: bool = True) -> list[float]:
    """Shared optimization loop; returns per-epoch mean losses."""
    if not samples:
        raise DataError("training set is empty")
    state = AdamState()
    history = []
    for epoch in range(epochs):
        rng = substream(seed, "train-epoch", epoch)
        order = rng.permutation(len(samples))
        losses = []
        for idx in order:
            stack, gt = samples[int(idx)]
            h, w = stack.shape[1], stack.shape[2]
            if crop and crop < min(h, w):
                y0 = int(rng.integers(0, h - crop + 1))
                x0 = int(rng.integers(0, w - crop + 1))
                stack = stack[:, y0:y0 + crop, x0:x0 + crop]
                gt = gt[:, y0:y0 + crop, x0:x0 + crop]
            if augment:
                stack, gt = _augment_pair(stack, gt, rng)
            pred = net.forward(Tensor(stack[None]))
            loss = l1_loss(mu_law_t(pred, mu), mu_law_t(Tensor(gt[None]), mu))
            for t in trainable:
                t.zero_grad()
            backward(loss)
            adam_step(trainable, [t.grad for t in trainable], state, lr)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    return history


class FusionTrainer(ParamMixin):
    """Estimator-style trainer: fit on bracket samples, predict HDR frames."""

    def __init__(self, base_channels: int = 16, depth: int = 4, epochs: int = 30,
                 lr: float = 1e-3, crop: int = 32, augment: bool = True,
                 mu: float = DEFAULT_MU, seed: int = 0):
        self.base_channels = base_channels
        self.depth = depth
        self.epochs = epochs
        self.lr = lr
        self.crop = crop
        self.augment = augment
        self.mu = mu
        self.seed = seed

    def fit(self, samples, init: Checkpoint | None = None):
        """samples: list of LdrBracket, manifest items, or (stack, gt) pairs."""
        samples = _coerce_samples(samples)
        if init is not None:
            self.net_ = net_from_base_checkpoint(init)
        else:
            self.net_ = FusionNet(
                FusionNetConfig(base_channels=self.base_channels, depth=self.depth),
                seed=self.seed,
            )
        names = sorted(self.net_.base_parameters())
        trainable = self.net_.set_trainable(names)
        self.history_ = train_loop(
            self.net_, trainable, samples, epochs=self.epochs, lr=self.lr,
            crop=self.crop, seed=self.seed, mu=self.mu, augment=self.augment,
        )
        return self

    def predict(self, bracket: LdrBracket) -> HdrImage:
        return self.net_.predict(bracket)

    def to_checkpoint(self, metadata: dict | None = None) -> Checkpoint:
        meta = {"epochs": self.epochs, "seed": self.seed}
        meta.update(metadata or {})
        return base_checkpoint(self.net_, meta)


def _coerce_samples(samples):
    out = []
    brackets = []
    for s in samples:
        if isinstance(s, LdrBracket):
            brackets.append(s)
        elif isinstance(s, dict):
            brackets.append(load_bracket(s["path"]))
        else:
            out.append(s)
    if brackets:
        out.extend(samples_from_brackets(brackets))
    return out


def train(samples, *, base_channels: int = 16, depth: int = 4, epochs: int = 30,
          lr: float = 1e-3, crop: int = 32, augment: bool = True,
          mu: float = DEFAULT_MU, seed: int = 0, metadata: dict | None = None) -> Checkpoint:
    trainer = FusionTrainer(
        base_channels=base_channels, depth=depth, epochs=epochs, lr=lr,
        crop=crop, augment=augment, mu=mu, seed=seed,
    )
    trainer.fit(samples)
    ckpt = trainer.to_checkpoint(metadata)
    ckpt.metadata["history"] = trainer.history_
    return ckpt


def finetune(ckpt: Checkpoint, samples, *, epochs: int = 30, lr: float = 1e-4,
             crop: int = 32, augment: bool = True, mu: float = DEFAULT_MU,
             seed: int = 0, metadata: dict | None = None) -> Checkpoint:
    """Full fine-tuning: every base parameter is trainable."""
    samples = _coerce_samples(samples)
    net = net_from_base_checkpoint(ckpt)
    history: list[float] = []
    if epochs > 0:
        names = sorted(net.base_parameters())
        trainable = net.set_trainable(names)
        history = train_loop(
            net, trainable, samples, epochs=epochs, lr=lr, crop=crop,
            seed=seed, mu=mu, augment=augment,
        )
    meta = dict(ckpt.metadata)
    meta.update(metadata or {})
    meta["finetune"] = {"epochs": epochs, "lr": lr, "seed": seed, "history": history}
    return base_checkpoint(net, meta)
