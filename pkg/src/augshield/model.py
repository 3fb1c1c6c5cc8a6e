"""Layers, models, loss and gradient entry points built on :mod:`autodiff`."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor, SecondOrderUnsupported


class ShapeError(ValueError):
    pass


class LabelError(ValueError):
    pass


# -------------------------------------------------------------------- layers


@dataclass
class Dense:
    in_features: int
    out_features: int
    second_order = True

    def param_shapes(self):
        return [(self.in_features, self.out_features), (self.out_features,)]

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"expects per-example input ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def init(self, rng, views):
        w, b = views
        w[...] = rng.normal(0.0, np.sqrt(2.0 / self.in_features), size=w.shape)
        b[...] = 0.0

    def __call__(self, x, params):
        w, b = params
        return ad.add(ad.matmul(x, w), b)

    def __str__(self):
        return f"Dense({self.in_features}->{self.out_features})"


@dataclass
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int = 3
    second_order = False

    def param_shapes(self):
        k = self.kernel
        return [(k, k, self.in_channels, self.out_channels), (self.out_channels,)]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.in_channels:
            raise ShapeError(
                f"expects per-example input (w, h, {self.in_channels}), got {in_shape}"
            )
        return (in_shape[0], in_shape[1], self.out_channels)

    def init(self, rng, views):
        w, b = views
        fan_in = self.kernel * self.kernel * self.in_channels
        w[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
        b[...] = 0.0

    def __call__(self, x, params):
        w, b = params
        value = kernels.conv2d_forward(x.data, w.data, b.data)

        def backward(g):
            dx, dw, db = kernels.conv2d_backward(x.data, w.data, g)
            return (dx if x.requires_grad else None), dw, db

        return ad.first_order_op("conv2d", value, (x, w, b), backward)

    def __str__(self):
        return f"Conv2d({self.in_channels}->{self.out_channels}, k={self.kernel})"


@dataclass
class ReLU:
    second_order = True

    def param_shapes(self):
        return []

    def out_shape(self, in_shape):
        return in_shape

    def __call__(self, x, params):
        return ad.relu(x)

    def __str__(self):
        return "ReLU"


@dataclass
class MaxPool2:
    second_order = False

    def param_shapes(self):
        return []

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] % 2 or in_shape[1] % 2:
            raise ShapeError(f"expects (even w, even h, c), got {in_shape}")
        return (in_shape[0] // 2, in_shape[1] // 2, in_shape[2])

    def __call__(self, x, params):
        value, idx = kernels.maxpool2_forward(x.data)
        shape = x.shape

        def backward(g):
            return (kernels.maxpool2_backward(idx, g, shape),)

        return ad.first_order_op("maxpool2", value, (x,), backward)

    def __str__(self):
        return "MaxPool2"


@dataclass
class Flatten:
    second_order = True

    def param_shapes(self):
        return []

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def __call__(self, x, params):
        return ad.reshape(x, (x.shape[0], -1))

    def __str__(self):
        return "Flatten"


LAYER_TYPES = {"dense": Dense, "conv2d": Conv2d, "relu": ReLU, "maxpool2": MaxPool2, "flatten": Flatten}


# --------------------------------------------------------------------- model


@dataclass(eq=False)
class Model:
    """A sequential network whose parameters live in one flat float64 vector.

    Each layer's weight and bias arrays are views into ``params``, so writing
    either is visible through the other.
    """

    layers: list
    input_shape: tuple
    params: np.ndarray = field(init=False, repr=False)
    velocity: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        shapes, owners, shape = [], [], self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer}): {exc}") from None
            for s in layer.param_shapes():
                shapes.append(s)
                owners.append(i)
        self.output_shape = shape
        sizes = [int(np.prod(s)) for s in shapes]
        self.params = np.zeros(sum(sizes))
        self.velocity = np.zeros_like(self.params)
        self._slices = []
        self.param_tensors = []
        self._layer_params = [[] for _ in self.layers]
        start = 0
        for s, n, owner in zip(shapes, sizes, owners):
            view = self.params[start : start + n].reshape(s)
            t = Tensor(view, requires_grad=True)
            self.param_tensors.append(t)
            self._layer_params[owner].append(t)
            self._slices.append(slice(start, start + n))
            start += n

    @property
    def n_params(self):
        return self.params.size

    @property
    def n_classes(self):
        return self.output_shape[0]

    @property
    def second_order(self):
        return all(layer.second_order for layer in self.layers)

    def layer_params(self, i):
        return self._layer_params[i]

    def init_params(self, rng):
        for layer, tensors in zip(self.layers, self._layer_params):
            if tensors:
                layer.init(rng, [t.data for t in tensors])
        self.velocity[:] = 0.0
        return self

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.params.shape:
            raise ShapeError(f"expected {self.params.shape} parameters, got {flat.shape}")
        self.params[:] = flat

    def copy(self):
        twin = Model(list(self.layers), self.input_shape)
        twin.params[:] = self.params
        twin.velocity[:] = self.velocity
        return twin

    def flatten_grads(self, grads):
        return np.concatenate([np.asarray(g.data).ravel() for g in grads])

    def describe(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [_layer_spec(layer) for layer in self.layers],
        }

    @classmethod
    def from_description(cls, desc):
        layers = []
        for spec in desc["layers"]:
            spec = dict(spec)
            kind = spec.pop("type")
            layers.append(LAYER_TYPES[kind](**spec))
        return cls(layers, tuple(desc["input_shape"]))


def _layer_spec(layer):
    kind = {v: k for k, v in LAYER_TYPES.items()}[type(layer)]
    spec = {"type": kind}
    if isinstance(layer, Dense):
        spec.update(in_features=layer.in_features, out_features=layer.out_features)
    elif isinstance(layer, Conv2d):
        spec.update(
            in_channels=layer.in_channels, out_channels=layer.out_channels, kernel=layer.kernel
        )
    return spec


def small_convnet(geometry=(32, 32, 3), n_classes=10, widths=(8, 16)):
    """Conv(3x3)-ReLU-Pool blocks followed by one dense classifier."""
    w, h, c = geometry
    layers, cin = [], c
    for width in widths:
        layers += [Conv2d(cin, width), ReLU(), MaxPool2()]
        cin = width
        w, h = w // 2, h // 2
    layers += [Flatten(), Dense(w * h * cin, n_classes)]
    return Model(layers, geometry)


def mlp(geometry=(32, 32, 3), n_classes=10, hidden=(64,)):
    """Dense-only network; fully second-order capable."""
    n_in = int(np.prod(geometry))
    layers = [Flatten()]
    for width in hidden:
        layers += [Dense(n_in, width), ReLU()]
        n_in = width
    layers.append(Dense(n_in, n_classes))
    return Model(layers, geometry)


# ------------------------------------------------------------------- forward


def forward(model, batch):
    """Logits ``[B, K]`` for a batch ``[B, *input_shape]``."""
    x = ad.as_tensor(batch)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(
            f"layer 0 ({model.layers[0]}): batch geometry {x.shape[1:]} "
            f"does not match model input {model.input_shape}"
        )
    for layer, params in zip(model.layers, model._layer_params):
        x = layer(x, params)
    return x


def predict(model, images, batch_size=512):
    """Argmax class per image, without recording."""
    images = np.asarray(images)
    out = []
    with ad.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(forward(model, images[s : s + batch_size]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)


def accuracy(model, images, labels):
    if len(images) == 0:
        return float("nan")
    return float(np.mean(predict(model, images) == np.asarray(labels)))


# ---------------------------------------------------------------------- loss


def as_soft_labels(labels, n_classes):
    """Validate soft labels, or one-hot encode integer class ids."""
    arr = np.asarray(labels)
    if arr.ndim == 1 and np.issubdtype(arr.dtype, np.integer):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise LabelError(f"class ids must lie in [0, {n_classes})")
        return np.eye(n_classes)[arr]
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != n_classes:
        raise LabelError(f"soft labels must be [B, {n_classes}], got {arr.shape}")
    if (arr < 0).any() or np.abs(arr.sum(axis=1) - 1.0).max(initial=0.0) > 1e-9:
        raise LabelError("every soft-label row must be nonnegative and sum to 1")
    return arr


def cross_entropy_rows(logits, labels):
    """Per-example softmax cross-entropy, shape ``[B]``."""
    logits = ad.as_tensor(logits)
    if isinstance(labels, Tensor):
        as_soft_labels(labels.data, logits.shape[1])
    else:
        labels = Tensor(as_soft_labels(labels, logits.shape[1]))
    return ad.softmax_xent_rows(logits, labels)


def cross_entropy(logits, labels):
    """Batch mean of softmax cross-entropy against (soft) labels."""
    rows = cross_entropy_rows(logits, labels)
    return ad.mul(ad.sum_(rows), 1.0 / rows.shape[0])


# ----------------------------------------------------------------- gradients


def grad_params(loss, model, create_graph=False):
    """Flat gradient of ``loss`` over ``model.params`` (same layout)."""
    grads = ad.grad(loss, model.param_tensors, create_graph=create_graph)
    if create_graph:
        return grads
    return model.flatten_grads(grads)


def grad_inputs(loss, batch):
    """Gradient of ``loss`` with respect to a ``requires_grad`` batch tensor."""
    (g,) = ad.grad(loss, [batch])
    return g.data


def param_grad_tensors(model, images, labels):
    """Per-parameter gradient tensors of the mean loss, recorded for a second pass."""
    logits = forward(model, images)
    loss = cross_entropy(logits, labels)
    return ad.grad(loss, model.param_tensors, create_graph=True)


def alignment_value_and_grad(model, images, labels, target_grad):
    """``1 - cos(grad_theta L(images), target_grad)`` and its gradient w.r.t. images.

    Reverse-over-reverse: the parameter gradient is recorded on the tape, then
    differentiated with respect to the input batch.
    """
    if not model.second_order:
        bad = [str(layer) for layer in model.layers if not layer.second_order]
        raise SecondOrderUnsupported(
            f"alignment gradient needs second-order layers; unsupported: {', '.join(bad)}"
        )
    target_grad = np.asarray(target_grad, dtype=np.float64)
    if target_grad.shape != model.params.shape:
        raise ShapeError(f"target gradient has shape {target_grad.shape}, expected {model.params.shape}")
    tnorm = np.linalg.norm(target_grad)
    if tnorm == 0.0:
        raise ValueError("target gradient is zero")
    x = Tensor(np.asarray(images, dtype=np.float64), requires_grad=True)
    with ad.Tape():
        grads = param_grad_tensors(model, x, labels)
        dot, sq = None, None
        for g, sl in zip(grads, model._slices):
            t = Tensor(target_grad[sl].reshape(g.shape))
            d = ad.sum_(ad.mul(g, t))
            s = ad.sum_(ad.mul(g, g))
            dot = d if dot is None else ad.add(dot, d)
            sq = s if sq is None else ad.add(sq, s)
        if sq.item() == 0.0:
            raise ValueError("training gradient is zero; cosine undefined")
        cos = ad.div(dot, ad.mul(ad.sqrt(sq), tnorm))
        value = ad.sub(1.0, cos)
    if not value.requires_grad:
        return float(value.data), np.zeros(x.shape)
    (gx,) = ad.grad(value, [x])
    return float(value.data), gx.data


def grad_of_alignment(model, poison_batch, labels, target_grad):
    return alignment_value_and_grad(model, poison_batch, labels, target_grad)[1]


# ----------------------------------------------------------------- optimizer


def sgd_step(model, grad, lr, momentum=0.0):
    """In-place momentum SGD: ``v <- momentum*v + g``, ``theta <- theta - lr*v``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.params.shape:
        raise ShapeError(f"gradient has shape {grad.shape}, expected {model.params.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient entries; parameters left untouched")
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    model.velocity *= momentum
    model.velocity += grad
    model.params -= lr * model.velocity
