"""Victim networks, cross-entropy loss and the averaged-gradient oracle.

The server-side view is :func:`sag_capture`: it returns only the batch-mean
gradient of a hidden batch. Per-sample gradients exist for the verifier and
tests; attack code never sees a :class:`LabeledBatch`.
"""
import re
from dataclasses import dataclass, field

import numpy as np

from gradsense import autodiff as ad

__all__ = [
    "Dense",
    "Conv2d",
    "Activation",
    "Flatten",
    "ArchSpec",
    "parse_arch",
    "VictimModel",
    "LabeledBatch",
    "TargetGradient",
    "init_model",
    "forward_loss",
    "batch_mean_gradient",
    "per_sample_gradients",
    "sag_capture",
    "label_distributions",
]


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class Activation:
    kind: str = "sigmoid"

    def __post_init__(self):
        if self.kind not in ("sigmoid", "relu"):
            raise ValueError(f"unknown activation {self.kind!r}; expected 'sigmoid' or 'relu'")


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class ArchSpec:
    input_shape: tuple
    layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.layer_shapes()

    def layer_shapes(self):
        """Output shape after each layer; raises ValueError if shapes don't compose."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: conv2d needs a (C, H, W) input, got {shape}")
                c, h, w = shape
                if layer.kernel > h or layer.kernel > w:
                    raise ValueError(f"layer {i}: kernel {layer.kernel} exceeds input {h}x{w}")
                oh = (h - layer.kernel) // layer.stride + 1
                ow = (w - layer.kernel) // layer.stride + 1
                shape = (layer.out_channels, oh, ow)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ValueError(f"layer {i}: dense needs a flat input, got {shape} (add flatten)")
                shape = (layer.units,)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Activation):
                pass
            else:
                raise ValueError(f"layer {i}: unsupported descriptor {layer!r}")
            shapes.append(shape)
        if shape != (self.num_classes,):
            raise ValueError(f"final output shape {shape} != ({self.num_classes},)")
        return shapes


def parse_arch(text, input_shape, num_classes):
    """Build an ArchSpec from ``mlp:h=64`` or ``lenet-lite:c=12``.

    Options: ``h`` hidden units (mlp), ``c`` channels (lenet-lite),
    ``act`` sigmoid|relu.
    """
    name, _, rest = text.strip().partition(":")
    opts = {}
    for part in filter(None, re.split(r"[,;]", rest)):
        key, eq, val = part.partition("=")
        if not eq:
            raise ValueError(f"bad architecture option {part!r} in {text!r}")
        opts[key.strip()] = val.strip()
    act = opts.pop("act", "sigmoid")
    if name == "mlp":
        h = int(opts.pop("h", 64))
        layers = (Flatten(), Dense(h), Activation(act), Dense(num_classes))
    elif name == "lenet-lite":
        c = int(opts.pop("c", 12))
        layers = (
            Conv2d(c, 5, 2), Activation(act),
            Conv2d(c, 5, 2), Activation(act),
            Flatten(), Dense(num_classes),
        )
    else:
        raise ValueError(f"unknown architecture {name!r}; expected 'mlp' or 'lenet-lite'")
    if opts:
        raise ValueError(f"unknown architecture options {sorted(opts)} for {name!r}")
    return ArchSpec(tuple(input_shape), layers, int(num_classes))


@dataclass
class VictimModel:
    arch: ArchSpec
    params: list
    names: list = field(default_factory=list)

    @property
    def param_count(self):
        return int(sum(p.size for p in self.params))

    def forward(self, images):
        """Logits node of shape (B, num_classes)."""
        x = ad.as_node(images)
        it = iter(self.params)
        for layer in self.arch.layers:
            if isinstance(layer, Conv2d):
                w, b = next(it), next(it)
                x = ad.conv2d(x, w, b, layer.stride)
            elif isinstance(layer, Dense):
                w, b = next(it), next(it)
                x = ad.add(ad.matmul(x, ad.transpose(w)), b)
            elif isinstance(layer, Flatten):
                x = ad.reshape(x, (x.shape[0], -1))
            elif layer.kind == "sigmoid":
                x = ad.sigmoid(x)
            else:
                x = ad.relu(x)
        return x

    def flat_params(self):
        return np.concatenate([p.value.ravel() for p in self.params])

    def split(self, flat):
        """Split a canonical flat vector into per-parameter arrays."""
        flat = np.asarray(flat)
        if flat.size != self.param_count:
            raise ValueError(f"expected {self.param_count} entries, got {flat.size}")
        out, start = [], 0
        for p in self.params:
            out.append(flat[start:start + p.size].reshape(p.shape))
            start += p.size
        return out


def init_model(arch, seed):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, weights then biases per layer."""
    shapes = arch.layer_shapes()
    rng = np.random.default_rng(seed)
    params, names = [], []
    prev = arch.input_shape
    for i, (layer, out_shape) in enumerate(zip(arch.layers, shapes)):
        if isinstance(layer, Conv2d):
            fan_in = prev[0] * layer.kernel ** 2
            wshape = (layer.out_channels, prev[0], layer.kernel, layer.kernel)
        elif isinstance(layer, Dense):
            fan_in = prev[0]
            wshape = (layer.units, prev[0])
        else:
            prev = out_shape
            continue
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=wshape)
        b = rng.uniform(-bound, bound, size=(wshape[0],))
        params += [ad.Variable(w), ad.Variable(b)]
        names += [f"layer{i}.weight", f"layer{i}.bias"]
        prev = out_shape
    return VictimModel(arch, params, names)


def label_distributions(labels, num_classes):
    """Class indices -> one-hot rows; probability rows are validated and returned."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"class index out of range [0, {num_classes})")
        return np.eye(num_classes)[labels.astype(int)]
    if labels.ndim != 2 or labels.shape[1] != num_classes:
        raise ValueError(f"label distributions must be (B, {num_classes}), got {labels.shape}")
    if np.any(labels < 0) or np.any(np.abs(labels.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("label distributions must be nonnegative and sum to 1")
    return labels.astype(np.float64)


@dataclass
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ValueError(f"images must be (B, C, H, W) with B >= 1, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("images and labels differ in batch size")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("image entries must lie in [0, 1]")
        if self.labels.ndim == 2:
            label_distributions(self.labels, self.labels.shape[1])

    def __len__(self):
        return len(self.images)

    def distributions(self, num_classes):
        return label_distributions(self.labels, num_classes)


@dataclass(frozen=True)
class TargetGradient:
    g_star: np.ndarray
    batch_size: int

    def __post_init__(self):
        g = np.array(self.g_star, dtype=np.float64, copy=True).ravel()
        if not np.all(np.isfinite(g)):
            raise ValueError("target gradient has non-finite entries")
        g.flags.writeable = False
        object.__setattr__(self, "g_star", g)

    def __len__(self):
        return self.g_star.size


def forward_loss(model, images, label_distributions):
    """Batch-mean cross-entropy ``-sum_c p_c log softmax(logits)_c`` as a node."""
    images = ad.as_node(images)
    labels = ad.as_node(label_distributions)
    expected = (images.shape[0], model.arch.num_classes)
    if labels.shape != expected:
        raise ad.ShapeError(f"labels must have shape {expected}, got {labels.shape}")
    logits = model.forward(images)
    if not np.all(np.isfinite(logits.value)):
        raise ad.NonFiniteError("forward", "non-finite logits")
    nll = ad.sum(ad.mul(labels, ad.log_softmax(logits)))
    return ad.scale(nll, -1.0 / images.shape[0])


def batch_mean_gradient(model, images, label_distributions, create_graph=False):
    """Flattened gradient of the batch-mean loss w.r.t. all parameters.

    Returns a 1-D node when ``create_graph`` is true, otherwise a numpy array.
    """
    loss = forward_loss(model, images, label_distributions)
    grads = ad.differentiate(loss, model.params, create_graph=create_graph)
    if create_graph:
        return ad.concat([ad.reshape(g, (-1,)) for g in grads])
    return np.concatenate([g.value.ravel() for g in grads])


def per_sample_gradients(model, batch):
    dists = batch.distributions(model.arch.num_classes)
    return [
        batch_mean_gradient(model, batch.images[i:i + 1], dists[i:i + 1])
        for i in range(len(batch))
    ]


def sag_capture(model, hidden_batch):
    """What an honest-but-curious server observes: the batch-mean gradient only."""
    g = batch_mean_gradient(model, hidden_batch.images, hidden_batch.distributions(model.arch.num_classes))
    return TargetGradient(g, len(hidden_batch))
