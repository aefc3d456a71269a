"""Two-branch Siamese matcher with an L1 merge and a logistic head.

In ``tied`` mode both branches are the same :class:`BranchNet` object, so
they share parameter storage.  In ``untied`` mode branch B starts as a copy
of branch A and is updated independently afterwards.
"""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .weights import WeightFormatError, load_container, save_container

MODES = ("tied", "untied")
LAYER_KINDS = ("conv", "maxpool", "flatten", "dense")
ACTIVATIONS = ("relu", "none")


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0
    units: int = 0
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.kind == "conv" and (self.channels < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0):
            raise ConfigError(f"conv layer needs channels, kernel >= 1, stride >= 1, padding >= 0: {self}")
        if self.kind == "maxpool" and (self.window < 1 or self.stride < 1):
            raise ConfigError(f"maxpool layer needs window >= 1 and stride >= 1: {self}")
        if self.kind == "dense" and self.units < 1:
            raise ConfigError(f"dense layer needs units >= 1: {self}")

    def to_dict(self) -> dict:
        keep = {
            "conv": ("channels", "kernel", "stride", "padding", "activation"),
            "maxpool": ("window", "stride"),
            "flatten": (),
            "dense": ("units", "activation"),
        }[self.kind]
        d = asdict(self)
        return {"kind": self.kind, **{k: d[k] for k in keep}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown layer keys {sorted(unknown)} in {dict(d)}")
        if "kind" not in d:
            raise ConfigError(f"layer entry missing 'kind': {dict(d)}")
        # omitted keys take the same defaults as the conv()/maxpool()/dense() helpers
        defaults = _LAYER_DEFAULTS.get(d["kind"], {})
        return cls(**{**defaults, **d})


def conv(channels, kernel=3, stride=1, padding=1, activation="relu") -> LayerSpec:
    return LayerSpec("conv", channels=channels, kernel=kernel, stride=stride, padding=padding, activation=activation)


def maxpool(window=2, stride=2) -> LayerSpec:
    return LayerSpec("maxpool", window=window, stride=stride)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dense(units, activation="relu") -> LayerSpec:
    return LayerSpec("dense", units=units, activation=activation)


_LAYER_DEFAULTS = {
    "conv": {"kernel": 3, "stride": 1, "padding": 1, "activation": "relu"},
    "maxpool": {"window": 2, "stride": 2},
    "dense": {"activation": "relu"},
}

REFERENCE_INPUT_SHAPE = (1, 64, 64)


def reference_spec() -> list[LayerSpec]:
    """Desk-scale conv stack: three conv/pool stages then a 128-wide feature layer."""
    return [
        conv(16), maxpool(),
        conv(32), maxpool(),
        conv(64), maxpool(),
        flatten(),
        dense(128),
    ]


def layer_names(spec: Sequence[LayerSpec]) -> list[str]:
    counts: dict[str, int] = {}
    names = []
    prefix = {"conv": "conv", "maxpool": "pool", "flatten": "flatten", "dense": "dense"}
    for layer in spec:
        counts[layer.kind] = counts.get(layer.kind, 0) + 1
        names.append(f"{prefix[layer.kind]}{counts[layer.kind]}")
    return names


def infer_shapes(spec: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Per-layer output shapes (without batch axis); raises ConfigError on collapse."""
    if len(input_shape) != 3 or any(int(d) < 1 for d in input_shape):
        raise ConfigError(f"input shape must be (channels, height, width) >= 1, got {tuple(input_shape)}")
    shape: tuple[int, ...] = tuple(int(d) for d in input_shape)
    out = []
    for name, layer in zip(layer_names(spec), spec):
        if layer.kind in ("conv", "maxpool"):
            if len(shape) != 3:
                raise ConfigError(f"layer {name}: expects a (C,H,W) input, got {shape}")
            c, h, w = shape
            if layer.kind == "conv":
                ho = ad.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
                wo = ad.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
                nc = layer.channels
            else:
                ho = ad.conv_output_size(h, layer.window, layer.stride, 0)
                wo = ad.conv_output_size(w, layer.window, layer.stride, 0)
                nc = c
            if ho < 1 or wo < 1:
                raise ConfigError(f"layer {name}: spatial size collapses from {h}x{w} to {ho}x{wo}")
            shape = (nc, ho, wo)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        else:
            if len(shape) != 1:
                raise ConfigError(f"layer {name}: dense needs a flattened input, got {shape}")
            shape = (layer.units,)
        out.append(shape)
    if not out or len(out[-1]) != 1:
        raise ConfigError("branch must end in a flat feature vector (add flatten/dense)")
    return out


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class BranchNet:
    """Ordered layer stack mapping [N,C,H,W] images to [N,F] features."""

    def __init__(self, spec: Sequence[LayerSpec], input_shape: Sequence[int], name: str = "branch"):
        self.spec = list(spec)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.name = name
        self.shapes = infer_shapes(self.spec, self.input_shape)
        self.layer_names = layer_names(self.spec)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        prev = self.input_shape
        for lname, layer, shape in zip(self.layer_names, self.spec, self.shapes):
            if layer.kind == "conv":
                c = prev[0]
                self.params[f"{lname}.weight"] = Tensor(
                    np.zeros((layer.channels, c, layer.kernel, layer.kernel)), requires_grad=True)
                self.params[f"{lname}.bias"] = Tensor(np.zeros(layer.channels), requires_grad=True)
            elif layer.kind == "dense":
                self.params[f"{lname}.weight"] = Tensor(np.zeros((prev[0], layer.units)), requires_grad=True)
                self.params[f"{lname}.bias"] = Tensor(np.zeros(layer.units), requires_grad=True)
            prev = shape

    @property
    def feature_width(self) -> int:
        return self.shapes[-1][0]

    def initialize(self, rng: np.random.Generator) -> None:
        for name, p in self.params.items():
            if name.endswith(".weight"):
                w = p.data
                fan_in = int(np.prod(w.shape[1:])) if w.ndim == 4 else w.shape[0]
                p.data = _he_uniform(rng, w.shape, fan_in)
            else:
                p.data = np.zeros_like(p.data)

    def param_layers(self) -> list[str]:
        return [n for n, layer in zip(self.layer_names, self.spec) if layer.kind in ("conv", "dense")]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.name}: expected input [N,{','.join(map(str, self.input_shape))}], got {x.shape}")
        for lname, layer in zip(self.layer_names, self.spec):
            if layer.kind == "conv":
                x = ad.conv2d(x, self.params[f"{lname}.weight"], self.params[f"{lname}.bias"],
                              stride=layer.stride, padding=layer.padding)
            elif layer.kind == "maxpool":
                x = ad.maxpool2d(x, layer.window, layer.stride)
            elif layer.kind == "flatten":
                x = ad.flatten(x)
            else:
                x = ad.dense(x, self.params[f"{lname}.weight"], self.params[f"{lname}.bias"])
            if layer.activation == "relu":
                x = ad.relu(x)
        return x

    __call__ = forward

    def clone(self, name: str) -> "BranchNet":
        twin = copy.copy(self)
        twin.name = name
        twin.params = OrderedDict((k, Tensor(v.data, requires_grad=True)) for k, v in self.params.items())
        return twin


@dataclass
class TransplantReport:
    transplanted: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


class SiameseModel:
    def __init__(self, branch_a: BranchNet, branch_b: BranchNet, mode: str,
                 head_weight: Tensor, head_bias: Tensor, freeze_mask: Iterable[str] = ()):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        if mode == "tied" and branch_a is not branch_b:
            raise ConfigError("tied mode needs both branches to be the same object")
        if mode == "untied" and branch_a is branch_b:
            raise ConfigError("untied mode needs two distinct branch objects")
        self.branch_a = branch_a
        self.branch_b = branch_b
        self.mode = mode
        self.head_weight = head_weight
        self.head_bias = head_bias
        self.freeze_mask = set(freeze_mask)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.branch_a.input_shape

    @property
    def spec(self) -> list[LayerSpec]:
        return self.branch_a.spec

    def features_a(self, x: Tensor) -> Tensor:
        return self.branch_a(x)

    def features_b(self, x: Tensor) -> Tensor:
        return self.branch_b(x)

    def score(self, image_a: Tensor, image_b: Tensor) -> Tensor:
        return score(self, image_a, image_b)

    __call__ = score

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        branches = [("branch_a", self.branch_a)]
        if self.mode == "untied":
            branches.append(("branch_b", self.branch_b))
        for prefix, branch in branches:
            for k, p in branch.params.items():
                out[f"{prefix}.{k}"] = p
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def is_frozen(self, name: str) -> bool:
        if not self.freeze_mask:
            return False
        parts = name.split(".")
        candidates = {name, parts[0], ".".join(parts[:2]), ".".join(parts[1:])}
        if len(parts) == 3:
            candidates.add(parts[1])
        return bool(candidates & self.freeze_mask)

    def trainable_parameters(self) -> list[Tensor]:
        return [p for _, p in self.trainable_named_parameters()]

    def trainable_named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters().items() if not self.is_frozen(n)]

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters().items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Replace every parameter; validates the whole mapping before mutating."""
        params = self.named_parameters()
        for name, p in params.items():
            if name not in state:
                raise WeightFormatError(f"missing tensor {name}")
            got = tuple(np.shape(state[name]))
            if got != p.shape:
                raise WeightFormatError(f"tensor {name}: shape {got} does not match model shape {p.shape}")
        extra = [n for n in state if n not in params]
        if extra:
            raise WeightFormatError(f"unexpected tensor {extra[0]} (model mode {self.mode})")
        for name, p in params.items():
            p.data = np.array(state[name], dtype=np.float32, copy=True)

    def clone(self) -> "SiameseModel":
        twin = copy.deepcopy(self)
        return twin


def build_model(spec: Optional[Sequence[LayerSpec]] = None, input_shape: Sequence[int] = REFERENCE_INPUT_SHAPE,
                mode: str = "untied", seed: int = 0, freeze_mask: Iterable[str] = ()) -> SiameseModel:
    """Build a Siamese model with He-uniform weights drawn from ``seed``.

    Both branches start from identical values regardless of ``mode``.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    spec = list(reference_spec() if spec is None else spec)
    branch_a = BranchNet(spec, input_shape, name="branch_a")
    rng = np.random.default_rng(seed)
    branch_a.initialize(rng)
    branch_b = branch_a if mode == "tied" else branch_a.clone("branch_b")
    f = branch_a.feature_width
    head_w = Tensor(_he_uniform(rng, (f, 1), f), requires_grad=True)
    head_b = Tensor(np.zeros(1), requires_grad=True)
    return SiameseModel(branch_a, branch_b, mode, head_w, head_b, freeze_mask)


def score(model: SiameseModel, image_a: Tensor, image_b: Tensor) -> Tensor:
    """Match probability sigmoid(head(|f_a(image_a) - f_b(image_b)|)), shape [N,1]."""
    for label, img in (("image_a", image_a), ("image_b", image_b)):
        if img.data.ndim != 4 or tuple(img.shape[1:]) != model.input_shape:
            raise ShapeError(f"{label}: expected [N,{','.join(map(str, model.input_shape))}], got {img.shape}")
    if image_a.shape[0] != image_b.shape[0]:
        raise ShapeError(f"batch sizes differ: {image_a.shape} vs {image_b.shape}")
    return head_score(model, model.branch_a(image_a), model.branch_b(image_b))


def head_score(model: SiameseModel, features_a: Tensor, features_b: Tensor) -> Tensor:
    """The head alone: sigmoid(dense(|features_a - features_b|))."""
    return ad.sigmoid(ad.dense(ad.abs_diff(features_a, features_b), model.head_weight, model.head_bias))


def score_arrays(model: SiameseModel, images_a: np.ndarray, images_b: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Score paired image arrays without recording gradients; returns float64 [N]."""
    out = np.empty(len(images_a), dtype=np.float64)
    with ad.no_grad():
        for start in range(0, len(images_a), batch_size):
            sl = slice(start, start + batch_size)
            s = score(model, Tensor(images_a[sl]), Tensor(images_b[sl]))
            out[sl] = s.data[:, 0]
    return out


def trainable_parameters(model: SiameseModel) -> list[Tensor]:
    return model.trainable_parameters()


def transplant_weights(model: SiameseModel, donor: Mapping[str, np.ndarray],
                       layer_map: Mapping[str, str]) -> TransplantReport:
    """Copy donor tensors into mapped branch layers of both branches.

    ``layer_map`` maps a branch layer name (``conv1``, ``dense1``...) to a
    donor prefix; ``<prefix>.weight`` and ``<prefix>.bias`` must exist in
    ``donor``.  The head is never transplanted.
    """
    layers = model.branch_a.param_layers()
    unknown = [k for k in layer_map if k not in layers]
    if unknown:
        raise WeightFormatError(f"layer_map names unknown branch layer {unknown[0]!r}; known: {layers}")
    staged = []
    for layer in layers:
        if layer not in layer_map:
            continue
        prefix = layer_map[layer]
        for suffix in ("weight", "bias"):
            src = f"{prefix}.{suffix}"
            if src not in donor:
                raise WeightFormatError(f"donor has no tensor {src} (mapped to layer {layer})")
            target = model.branch_a.params[f"{layer}.{suffix}"]
            got = tuple(np.shape(donor[src]))
            if got != target.shape:
                raise WeightFormatError(f"layer {layer}.{suffix}: donor {src} has shape {got}, model expects {target.shape}")
            staged.append((f"{layer}.{suffix}", np.asarray(donor[src], dtype=np.float32)))
    branches = [model.branch_a] if model.mode == "tied" else [model.branch_a, model.branch_b]
    for key, value in staged:
        for branch in branches:
            branch.params[key].data = value.copy()
    done = sorted({k.rsplit(".", 1)[0] for k, _ in staged}, key=layers.index)
    return TransplantReport(transplanted=done, skipped=[layer for layer in layers if layer not in done])


def default_layer_map(model: SiameseModel, donor: Mapping[str, np.ndarray]) -> dict[str, str]:
    """Map each branch layer to the donor's ``branch_a.<layer>`` (or bare ``<layer>``) when present."""
    out = {}
    for layer in model.branch_a.param_layers():
        for prefix in (f"branch_a.{layer}", layer):
            if f"{prefix}.weight" in donor and f"{prefix}.bias" in donor:
                out[layer] = prefix
                break
    return out


def save_weights(model: SiameseModel, path) -> None:
    save_container(model.state_dict(), path)


def load_weights(model: SiameseModel, path) -> None:
    """Load an RDNW file; on any error the model is left untouched."""
    model.load_state_dict(load_container(path))
