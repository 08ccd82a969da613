"""Two-branch sim-to-real adapters with lossless inference-time merging.

Each adapted 1x1 convolution computes

    f = W0 x + alpha_s * (U_s V_s x) + alpha_t * (U_t V_t x)

where the share branch is low-rank (keeps source-domain knowledge) and the
transfer branch is high-rank (captures target-domain corrections). The V
projections get Kaiming-style uniform init and the U projections start at
zero, so a freshly injected model is bit-identical to its base. Because the
branches are linear, they fold into the host weight exactly:
W' = W0 + alpha_s U_s V_s + alpha_t U_t V_t.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, conv2d
from .base import ParamMixin
from .errors import ConfigError, DataError, PlanError, ValidationError
from .imageio import DEFAULT_MU, HdrImage
from .model import (
    Checkpoint,
    Conv2dLayer,
    FusionNet,
    _coerce_samples,
    net_from_base_checkpoint,
    train_loop,
)
from .rng import substream

log = logging.getLogger(__name__)

DEFAULT_SHARE_RANK = 1
DEFAULT_TRANSFER_RANK = 64


class AdapterBranch:
    """One projection pair: V (h_in -> r) followed by U (r -> h_out)."""

    def __init__(self, role: str, h_in: int, h_out: int, rank: int,
                 rng: np.random.Generator):
        if role not in ("share", "transfer"):
            raise ConfigError(f"unknown branch role {role!r}")
        if role == "share" and rank > min(h_in, h_out):
            raise ConfigError(
                f"share rank {rank} exceeds min(h_in, h_out) = {min(h_in, h_out)}"
            )
        if role == "transfer" and rank < max(h_in, h_out):
            raise ConfigError(
                f"transfer rank {rank} below max(h_in, h_out) = {max(h_in, h_out)}"
            )
        self.role = role
        self.rank = rank
        bound = 1.0 / np.sqrt(h_in)
        v = rng.uniform(-bound, bound, (rank, h_in, 1, 1)).astype(np.float32)
        self.v = Tensor(v)
        self.u = Tensor(np.zeros((h_out, rank, 1, 1), dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(conv2d(x, self.v), self.u)

    def delta_matrix(self) -> np.ndarray:
        u = self.u.data[:, :, 0, 0].astype(np.float64)
        v = self.v.data[:, :, 0, 0].astype(np.float64)
        return u @ v


class S2RAdapter:
    """Share + transfer branches with scale factors, attached to one host layer."""

    def __init__(self, host: Conv2dLayer, r_s: int = DEFAULT_SHARE_RANK,
                 r_t: int = DEFAULT_TRANSFER_RANK, use_share: bool = True,
                 use_transfer: bool = True, learn_alpha: bool = False,
                 seed: int = 0):
        if host.kernel_size != 1:
            raise ConfigError(
                f"adapters attach to 1x1 convolutions; {host.name!r} has "
                f"kernel {host.kernel_size}"
            )
        if not use_share and not use_transfer:
            raise ConfigError("adapter needs at least one branch enabled")
        h_in, h_out = host.in_channels, host.out_channels
        self.host_name = host.name
        self.learn_alpha = learn_alpha
        self.share = None
        self.transfer = None
        if use_share:
            self.share = AdapterBranch(
                "share", h_in, h_out, r_s, substream(seed, "adapter-share", host.name)
            )
        if use_transfer:
            r_t_eff = max(r_t, h_in, h_out)
            if r_t_eff != r_t:
                log.info(
                    "raising transfer rank from %d to %d on layer %s",
                    r_t, r_t_eff, host.name,
                )
            self.transfer = AdapterBranch(
                "transfer", h_in, h_out, r_t_eff,
                substream(seed, "adapter-transfer", host.name),
            )
        self.alpha_s = Tensor(np.ones(1, dtype=np.float32))
        self.alpha_t = Tensor(np.ones(1, dtype=np.float32))

    def delta(self, x: Tensor) -> Tensor | None:
        terms = []
        if self.share is not None:
            terms.append(ad.mul_scalar(self.share.forward(x), self.alpha_s))
        if self.transfer is not None:
            terms.append(ad.mul_scalar(self.transfer.forward(x), self.alpha_t))
        if not terms:
            return None
        out = terms[0]
        for t in terms[1:]:
            out = ad.add(out, t)
        return out

    def set_scales(self, alpha_s: float, alpha_t: float) -> None:
        self.alpha_s.data = np.full(1, alpha_s, dtype=np.float32)
        self.alpha_t.data = np.full(1, alpha_t, dtype=np.float32)

    def scales(self) -> tuple[float, float]:
        return float(self.alpha_s.data[0]), float(self.alpha_t.data[0])

    def delta_matrix(self) -> np.ndarray:
        a_s, a_t = self.scales()
        total = None
        if self.share is not None:
            total = a_s * self.share.delta_matrix()
        if self.transfer is not None:
            part = a_t * self.transfer.delta_matrix()
            total = part if total is None else total + part
        return total

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        if self.share is not None:
            out[f"{prefix}/share.v"] = self.share.v
            out[f"{prefix}/share.u"] = self.share.u
        if self.transfer is not None:
            out[f"{prefix}/transfer.v"] = self.transfer.v
            out[f"{prefix}/transfer.u"] = self.transfer.u
        out[f"{prefix}/alpha_s"] = self.alpha_s
        out[f"{prefix}/alpha_t"] = self.alpha_t
        return out

    def trainable_names(self, prefix: str) -> list[str]:
        names = []
        if self.share is not None:
            names += [f"{prefix}/share.v", f"{prefix}/share.u"]
        if self.transfer is not None:
            names += [f"{prefix}/transfer.v", f"{prefix}/transfer.u"]
        if self.learn_alpha:
            names += [f"{prefix}/alpha_s", f"{prefix}/alpha_t"]
        return names


@dataclass
class InjectionPlan:
    selectors: list = field(default_factory=list)
    r_s: int = DEFAULT_SHARE_RANK
    r_t: int = DEFAULT_TRANSFER_RANK
    use_share: bool = True
    use_transfer: bool = True
    learn_alpha: bool = False

    def resolve(self, net: FusionNet) -> list[Conv2dLayer]:
        missing = [s for s in self.selectors if s not in net.layers]
        if missing:
            raise PlanError(f"injection plan names unknown layers: {missing}")
        return [net.layers[s] for s in self.selectors]

    def to_dict(self) -> dict:
        return {
            "selectors": list(self.selectors),
            "r_s": self.r_s,
            "r_t": self.r_t,
            "use_share": self.use_share,
            "use_transfer": self.use_transfer,
            "learn_alpha": self.learn_alpha,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "InjectionPlan":
        return cls(**doc)


def inject(net: FusionNet, plan: InjectionPlan | None = None, seed: int = 0) -> FusionNet:
    """Attach adapters per plan; base weights are frozen, output unchanged."""
    if getattr(net, "adapter_plan", None) is not None:
        raise ConfigError("model already carries adapters; injecting twice is an error")
    if plan is None:
        plan = InjectionPlan(selectors=net.mix_layer_names())
    if not plan.selectors:
        raise PlanError("injection plan selects no layers")
    layers = plan.resolve(net)
    for t in net.base_parameters().values():
        t.requires_grad = False
    for layer in layers:
        layer.adapter = S2RAdapter(
            layer, r_s=plan.r_s, r_t=plan.r_t, use_share=plan.use_share,
            use_transfer=plan.use_transfer, learn_alpha=plan.learn_alpha, seed=seed,
        )
    net.adapter_plan = plan
    return net


def adapted_layers(net: FusionNet) -> dict[str, S2RAdapter]:
    return {
        name: layer.adapter
        for name, layer in net.layers.items()
        if layer.adapter is not None
    }


def adapter_trainable_names(net: FusionNet) -> list[str]:
    names = []
    for layer_name, adapter in adapted_layers(net).items():
        names += adapter.trainable_names(f"adapters/{layer_name}")
    return names


def adapter_parameter_count(net: FusionNet) -> int:
    return sum(
        t.data.size
        for name, t in net.parameters().items()
        if name.startswith("adapters/")
    )


def set_model_scales(net: FusionNet, alpha_s: float, alpha_t: float) -> None:
    for adapter in adapted_layers(net).values():
        adapter.set_scales(alpha_s, alpha_t)


def base_weight_hash(net: FusionNet) -> str:
    """SHA-256 over the base weights in name order; freeze-contract witness."""
    digest = hashlib.sha256()
    for name in sorted(net.base_parameters()):
        digest.update(name.encode())
        digest.update(net.base_parameters()[name].data.tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Merging (re-parameterization)
# ---------------------------------------------------------------------------

def merge_layer(layer: Conv2dLayer) -> np.ndarray:
    """Merged 1x1 weight for an adapted layer, accumulated in float64."""
    if layer.adapter is None:
        return layer.w.data.copy()
    if layer.kernel_size != 1:
        raise ConfigError(f"layer {layer.name!r} is not a mergeable 1x1 host")
    w0 = layer.w.data[:, :, 0, 0].astype(np.float64)
    merged = (w0 + layer.adapter.delta_matrix()).astype(np.float32)
    return merged[:, :, None, None]


def merge_model(net: FusionNet) -> FusionNet:
    """Fold all adapters into their hosts; returns a plain network."""
    if getattr(net, "adapter_plan", None) is None:
        raise ConfigError("model has no adapters to merge")
    from .model import FusionNetConfig

    merged = FusionNet(FusionNetConfig(**net.config.to_dict()))
    state = {}
    for name, layer in net.layers.items():
        state[f"{name}.w"] = merge_layer(layer) if layer.adapter is not None else layer.w.data.copy()
        state[f"{name}.b"] = layer.b.data.copy()
    merged.load_state_dict(state)
    return merged


# ---------------------------------------------------------------------------
# Checkpoint round trip for adapted models
# ---------------------------------------------------------------------------

def full_checkpoint(net: FusionNet, metadata: dict | None = None) -> Checkpoint:
    params = {name: t.data.copy() for name, t in net.parameters().items()}
    meta = dict(metadata or {})
    if getattr(net, "adapter_plan", None) is not None:
        meta["adapter_plan"] = net.adapter_plan.to_dict()
    return Checkpoint(params=params, config=net.config.to_dict(), metadata=meta)


def model_from_checkpoint(ckpt: Checkpoint, seed: int = 0) -> FusionNet:
    """Rebuild a (possibly adapted) network from a checkpoint."""
    net = net_from_base_checkpoint(ckpt)
    plan_doc = ckpt.metadata.get("adapter_plan")
    if plan_doc is not None:
        inject(net, InjectionPlan.from_dict(plan_doc), seed=seed)
        adapter_state = {
            k: v for k, v in ckpt.params.items() if k.startswith("adapters/")
        }
        if adapter_state:
            params = net.parameters()
            for name, value in adapter_state.items():
                if name not in params:
                    raise DataError(f"checkpoint adapter tensor {name!r} has no target")
                params[name].data = np.asarray(value, dtype=np.float32).copy()
    return net


# ---------------------------------------------------------------------------
# Supervised adaptation
# ---------------------------------------------------------------------------

class AdapterTrainer(ParamMixin):
    """Inject adapters into a pretrained model and fit them on labeled data.

    Only adapter tensors (and the scale factors, when learnable) receive
    updates; the base weights stay frozen.
    """

    def __init__(self, r_s: int = DEFAULT_SHARE_RANK, r_t: int = DEFAULT_TRANSFER_RANK,
                 use_share: bool = True, use_transfer: bool = True,
                 learn_alpha: bool = True, epochs: int = 30, lr: float = 1e-3,
                 crop: int = 32, augment: bool = True, mu: float = DEFAULT_MU,
                 seed: int = 0, selectors: list | None = None):
        self.r_s = r_s
        self.r_t = r_t
        self.use_share = use_share
        self.use_transfer = use_transfer
        self.learn_alpha = learn_alpha
        self.epochs = epochs
        self.lr = lr
        self.crop = crop
        self.augment = augment
        self.mu = mu
        self.seed = seed
        self.selectors = selectors

    def fit(self, ckpt: Checkpoint, samples):
        samples = _coerce_samples(samples)
        net = net_from_base_checkpoint(ckpt)
        plan = InjectionPlan(
            selectors=self.selectors or net.mix_layer_names(),
            r_s=self.r_s, r_t=self.r_t, use_share=self.use_share,
            use_transfer=self.use_transfer, learn_alpha=self.learn_alpha,
        )
        inject(net, plan, seed=self.seed)
        self.base_hash_ = base_weight_hash(net)
        trainable = net.set_trainable(adapter_trainable_names(net))
        self.history_ = []
        if self.epochs > 0:
            self.history_ = train_loop(
                net, trainable, samples, epochs=self.epochs, lr=self.lr,
                crop=self.crop, seed=self.seed, mu=self.mu, augment=self.augment,
            )
        if base_weight_hash(net) != self.base_hash_:
            raise ValidationError("base weights changed during adapter training")
        self.net_ = net
        return self

    def predict(self, bracket) -> HdrImage:
        return self.net_.predict(bracket)

    def to_checkpoint(self, metadata: dict | None = None) -> Checkpoint:
        meta = {
            "adapter_epochs": self.epochs,
            "adapter_lr": self.lr,
            "seed": self.seed,
            "history": self.history_,
        }
        meta.update(metadata or {})
        return full_checkpoint(self.net_, meta)


def adapt_supervised(ckpt: Checkpoint, samples, *, epochs: int = 30, lr: float = 1e-3,
                     r_s: int = DEFAULT_SHARE_RANK, r_t: int = DEFAULT_TRANSFER_RANK,
                     use_share: bool = True, use_transfer: bool = True,
                     learn_alpha: bool = True, crop: int = 32, augment: bool = True,
                     mu: float = DEFAULT_MU, seed: int = 0,
                     metadata: dict | None = None) -> Checkpoint:
    trainer = AdapterTrainer(
        r_s=r_s, r_t=r_t, use_share=use_share, use_transfer=use_transfer,
        learn_alpha=learn_alpha, epochs=epochs, lr=lr, crop=crop,
        augment=augment, mu=mu, seed=seed,
    )
    trainer.fit(ckpt, samples)
    out = trainer.to_checkpoint(metadata)
    if "uncertainty_scale" in ckpt.metadata:
        out.metadata.setdefault("uncertainty_scale", ckpt.metadata["uncertainty_scale"])
    return out
