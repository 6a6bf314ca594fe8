"""MLP classifier zoo covering the four fine-tuning paradigms.

The backbone is a tanh MLP. Adapters follow the standard low-rank recipe:
each linear layer's effective weight is W0 + (alpha/r) * B @ A with A of
shape (r, in) and B of shape (out, r). The two linearized paradigms
replace the network with its first-order Taylor expansion around the
trainable parameters' initial values (a tangent model): for the partially
linearized adapter mode the expansion is over adapter parameters only and
the frozen backbone stays exactly nonlinear.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .params import ParamTree


class ModeTag(str, Enum):
    """Fine-tuning paradigm."""

    FULL_FT = "full_ft"          # update all backbone weights, nonlinear
    FULL_LINEAR = "full_linear"  # tangent model over all backbone weights
    LORA = "lora"                # low-rank adapters, nonlinear
    LLORA = "l_lora"             # low-rank adapters trained in tangent space

    @property
    def is_peft(self) -> bool:
        return self in (ModeTag.LORA, ModeTag.LLORA)

    @property
    def is_linearized(self) -> bool:
        return self in (ModeTag.FULL_LINEAR, ModeTag.LLORA)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture plus fine-tuning paradigm."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    lora_rank: int = 2
    lora_alpha: float = 2.0
    mode: ModeTag = ModeTag.LORA

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        object.__setattr__(self, "mode", ModeTag(self.mode))
        if self.input_dim < 1 or any(d < 1 for d in self.hidden_dims):
            raise ContractError("layer dimensions must be positive")
        if self.num_classes < 2:
            raise ContractError("num_classes must be at least 2")
        if self.lora_rank < 1 or self.lora_alpha <= 0:
            raise ContractError("lora_rank must be positive and lora_alpha > 0")
        if self.mode.is_peft:
            for din, dout in self.layer_dims():
                if self.lora_rank > min(din, dout):
                    raise ContractError(
                        f"lora_rank {self.lora_rank} exceeds layer dims ({din}, {dout})"
                    )

    def layer_dims(self) -> list[tuple[int, int]]:
        """(in_features, out_features) for each linear layer."""
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def with_mode(self, mode: ModeTag) -> "ModelSpec":
        return ModelSpec(
            input_dim=self.input_dim,
            hidden_dims=self.hidden_dims,
            num_classes=self.num_classes,
            lora_rank=self.lora_rank,
            lora_alpha=self.lora_alpha,
            mode=ModeTag(mode),
        )

    def backbone_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, (din, dout) in enumerate(self.layer_dims()):
            shapes[f"layers.{i}.weight"] = (dout, din)
            shapes[f"layers.{i}.bias"] = (dout,)
        return shapes

    def adapter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        r = self.lora_rank
        for i, (din, dout) in enumerate(self.layer_dims()):
            shapes[f"layers.{i}.lora_a"] = (r, din)
            shapes[f"layers.{i}.lora_b"] = (dout, r)
        return shapes

    def trainable_shapes(self) -> dict[str, tuple[int, ...]]:
        return self.adapter_shapes() if self.mode.is_peft else self.backbone_shapes()

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha,
            "mode": self.mode.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            num_classes=int(d["num_classes"]),
            lora_rank=int(d["lora_rank"]),
            lora_alpha=float(d["lora_alpha"]),
            mode=ModeTag(d["mode"]),
        )


@dataclass(frozen=True)
class LinearizedState:
    """Anchor and current trainable parameters of a tangent model.

    phi0 is the frozen snapshot taken when the model was linearized; it
    never changes afterwards. phi is the current trainable tree and must
    stay congruent with phi0.
    """

    phi0: ParamTree
    phi: ParamTree

    def __post_init__(self):
        self.phi0.require_congruent(self.phi, "linearized-state trees")

    def with_phi(self, phi: ParamTree) -> "LinearizedState":
        return LinearizedState(phi0=self.phi0, phi=phi)


def build_model(spec: ModelSpec, seed: int) -> tuple[ParamTree, ParamTree]:
    """Seeded initialization: returns (backbone theta0, initial trainable tree).

    Backbone weights are Gaussian with std 1/sqrt(fan_in), biases zero.
    All backbone draws happen before adapter draws, so every mode built
    from the same seed shares a bit-identical backbone. Adapter A matrices
    are Gaussian(0, 0.02); B matrices start at zero, which makes a freshly
    adapted model equal to its backbone.
    """
    rng = np.random.default_rng(int(seed))
    backbone: dict[str, Tensor] = {}
    for i, (din, dout) in enumerate(spec.layer_dims()):
        w = rng.standard_normal((dout, din)) / np.sqrt(din)
        backbone[f"layers.{i}.weight"] = Tensor(w)
        backbone[f"layers.{i}.bias"] = Tensor(np.zeros(dout))
    theta0 = ParamTree(backbone)
    if not spec.mode.is_peft:
        return theta0, theta0
    adapters: dict[str, Tensor] = {}
    r = spec.lora_rank
    for i, (din, dout) in enumerate(spec.layer_dims()):
        adapters[f"layers.{i}.lora_a"] = Tensor(0.02 * rng.standard_normal((r, din)))
        adapters[f"layers.{i}.lora_b"] = Tensor(np.zeros((dout, r)))
    return theta0, ParamTree(adapters)


def _require_trainable(spec: ModelSpec, trainable: ParamTree):
    expected = spec.trainable_shapes()
    if trainable.shapes() != expected:
        raise ContractError(
            f"trainable tree does not match the {spec.mode.value} trainable set: "
            f"{trainable.shapes()} vs {expected}"
        )


def _require_backbone(spec: ModelSpec, theta0: ParamTree):
    if theta0.shapes() != spec.backbone_shapes():
        raise ContractError("backbone tree does not match the architecture")


def logits_program(spec: ModelSpec, theta0: ParamTree, x: np.ndarray, template: ParamTree):
    """Build f(flat trainable vector) -> logits for the spec's paradigm.

    The returned closure runs identically over plain arrays, reverse-mode
    traces, and dual numbers, which is what ties training, linearization,
    and evaluation to one definition of the network.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ContractError(f"input batch must have shape (batch, {spec.input_dim})")
    layout = template.layout()
    peft = spec.mode.is_peft
    scale = spec.lora_alpha / spec.lora_rank
    layer_dims = spec.layer_dims()
    theta_arrays = {p: t.array for p, t in theta0.items()}

    def f(flat):
        parts = {
            path: ad.reshape(ad.slice1d(flat, start, stop), shape)
            for path, start, stop, shape in layout
        }
        h = x
        last = len(layer_dims) - 1
        for i in range(len(layer_dims)):
            if peft:
                w0 = theta_arrays[f"layers.{i}.weight"]
                b0 = theta_arrays[f"layers.{i}.bias"]
                delta = ad.mul(ad.matmul(parts[f"layers.{i}.lora_b"], parts[f"layers.{i}.lora_a"]), scale)
                w_eff = ad.add(w0, delta)
                z = ad.add(ad.matmul(h, ad.transpose2d(w_eff)), b0)
            else:
                z = ad.add(
                    ad.matmul(h, ad.transpose2d(parts[f"layers.{i}.weight"])),
                    parts[f"layers.{i}.bias"],
                )
            h = z if i == last else ad.tanh(z)
        return h

    return f


def forward(spec: ModelSpec, theta0: ParamTree, trainable: ParamTree, x) -> Tensor:
    """Nonlinear forward pass under the spec's paradigm."""
    _require_backbone(spec, theta0)
    _require_trainable(spec, trainable)
    x = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    f = logits_program(spec, theta0, x, trainable)
    return Tensor(f(trainable.flatten()))


def forward_linearized(spec: ModelSpec, theta0: ParamTree, lin: LinearizedState, x) -> Tensor:
    """Tangent-model forward: f(x; phi0) plus the JVP in direction phi - phi0.

    For the adapter paradigm the Taylor expansion covers adapter parameters
    only; the backbone enters as a frozen constant.
    """
    if not spec.mode.is_linearized:
        raise ContractError(f"mode {spec.mode.value} is not a linearized paradigm")
    _require_backbone(spec, theta0)
    _require_trainable(spec, lin.phi0)
    lin.phi0.require_congruent(lin.phi, "linearized-state trees")
    x = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    f = logits_program(spec, theta0, x, lin.phi0)
    phi0_flat = lin.phi0.flatten()
    value, tangent = ad.jvp(f, phi0_flat, lin.phi.flatten() - phi0_flat)
    return Tensor(value + tangent)


def predict_logits(spec: ModelSpec, theta0: ParamTree, anchor: ParamTree, trainable: ParamTree, x) -> Tensor:
    """Mode-appropriate logits: tangent model for linearized paradigms."""
    if spec.mode.is_linearized:
        return forward_linearized(spec, theta0, LinearizedState(anchor, trainable), x)
    return forward(spec, theta0, trainable, x)
