"""Encoder and task-head construction for the adaptation classifier.

The encoder is a stack of valid-padding 3x3 conv + ReLU + 2x2 max-pool
blocks, flattened into a ReLU feature layer with inverted dropout. The
task head is a dense softmax classifier over those features (optionally
one extra 16-unit dense layer, off by default). Layer forwards are
registered as autodiff ops, so a scalar loss backpropagates through the
whole stack.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, make_op, relu, reshape

KERNEL_SIZE = 3   # the only conv geometry the stack supports
POOL_SIZE = 2


class ConfigurationError(ValueError):
    """A model configuration cannot produce a valid layer stack."""


@dataclass(frozen=True)
class ModelConfig:
    """Declarative description of the encoder/task-head stack."""

    conv_filters: tuple[int, ...]
    feature_units: int = 16
    dropout_rate: float = 0.5
    num_classes: int = 2
    head_max_norm: float | None = 3.0
    image_side: int = 224
    deep_head: bool = False  # extra 16-unit dense layer in the head, off by default

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        if not 1 <= len(self.conv_filters) <= 3:
            raise ConfigurationError(
                f"conv_filters must list 1-3 layers, got {len(self.conv_filters)}")
        if any(f < 1 for f in self.conv_filters):
            raise ConfigurationError(f"filter counts must be >= 1, got {self.conv_filters}")
        if self.feature_units < 1:
            raise ConfigurationError("feature_units must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.head_max_norm is not None and self.head_max_norm <= 0:
            raise ConfigurationError("head_max_norm must be positive when set")
        if self.image_side < 1:
            raise ConfigurationError("image_side must be >= 1")

    def spatial_trace(self):
        """Per-layer spatial extents, input side first."""
        sides = [self.image_side]
        side = self.image_side
        for _ in self.conv_filters:
            side = side - (KERNEL_SIZE - 1)
            sides.append(side)
            side = side // POOL_SIZE
            sides.append(side)
        return sides

    def flatten_dim(self):
        side = self.image_side
        for _ in self.conv_filters:
            side = (side - (KERNEL_SIZE - 1)) // POOL_SIZE
        if side <= 0:
            raise ConfigurationError(
                f"conv stack of depth {len(self.conv_filters)} collapses a "
                f"{self.image_side}px input to nothing")
        return side * side * self.conv_filters[-1]


def conv2d_forward(x, kernel, bias):
    """Valid (no padding) stride-1 cross-correlation plus per-filter bias.

    x: [N,H,W,Cin], kernel: [3,3,Cin,Cout], bias: [Cout] -> [N,H-2,W-2,Cout].
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,H,W,C], got {x.shape}")
    n, h, w, cin = x.shape
    if h < KERNEL_SIZE or w < KERNEL_SIZE:
        raise ShapeError(f"conv2d input {h}x{w} smaller than the {KERNEL_SIZE}x{KERNEL_SIZE} kernel")
    if kernel.shape[:3] != (KERNEL_SIZE, KERNEL_SIZE, cin):
        raise ShapeError(f"kernel {kernel.shape} does not fit input channels {cin}")
    cout = kernel.shape[3]
    if bias.shape != (cout,):
        raise ShapeError(f"bias {bias.shape} does not match {cout} filters")

    oh, ow = h - KERNEL_SIZE + 1, w - KERNEL_SIZE + 1
    s0, s1, s2, s3 = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data, (n, oh, ow, KERNEL_SIZE, KERNEL_SIZE, cin), (s0, s1, s2, s1, s2, s3))
    cols = windows.reshape(n * oh * ow, KERNEL_SIZE * KERNEL_SIZE * cin)
    kmat = kernel.data.reshape(KERNEL_SIZE * KERNEL_SIZE * cin, cout)
    out = (cols @ kmat + bias.data).reshape(n, oh, ow, cout)

    def vjp_x(g):
        dcols = g.reshape(n * oh * ow, cout) @ kmat.T
        dwin = dcols.reshape(n, oh, ow, KERNEL_SIZE, KERNEL_SIZE, cin)
        dx = np.zeros_like(x.data)
        for i in range(KERNEL_SIZE):
            for j in range(KERNEL_SIZE):
                dx[:, i:i + oh, j:j + ow, :] += dwin[:, :, :, i, j, :]
        return dx

    def vjp_kernel(g):
        dk = cols.T @ g.reshape(n * oh * ow, cout)
        return dk.reshape(KERNEL_SIZE, KERNEL_SIZE, cin, cout)

    return make_op(
        "conv2d", out, (x, kernel, bias),
        (vjp_x, vjp_kernel, lambda g: g.sum(axis=(0, 1, 2))),
    )


def maxpool2d_forward(x):
    """Non-overlapping 2x2 max pool, stride 2, trailing odd row/column dropped.

    Backward routes each window's gradient to its argmax; ties go to the
    lowest flat index of the input.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool input must be [N,H,W,C], got {x.shape}")
    n, h, w, c = x.shape
    if h < POOL_SIZE or w < POOL_SIZE:
        raise ShapeError(f"maxpool input {h}x{w} smaller than the {POOL_SIZE}x{POOL_SIZE} window")
    oh, ow = h // 2, w // 2
    cropped = x.data[:, :2 * oh, :2 * ow, :]
    # windows ordered (r0c0, r0c1, r1c0, r1c1) == increasing input flat index,
    # so argmax's first-occurrence rule implements the tie-break.
    win = cropped.reshape(n, oh, 2, ow, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp_x(g):
        dwin = np.zeros((n, oh, ow, c, 4), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dcrop = dwin.reshape(n, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(
            n, 2 * oh, 2 * ow, c)
        if (2 * oh, 2 * ow) == (h, w):
            return dcrop
        dx = np.zeros((n, h, w, c), dtype=g.dtype)
        dx[:, :2 * oh, :2 * ow, :] = dcrop
        return dx

    return make_op("maxpool2d", out, (x,), (vjp_x,))


def dense_forward(x, weight, bias):
    """x [N,D] @ weight [D,U] + bias [U] (bias broadcast over rows)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense needs rank-2 input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense shapes inconsistent: {x.shape}, {weight.shape}, {bias.shape}")
    out = x.data @ weight.data + bias.data
    return make_op(
        "dense", out, (x, weight, bias),
        (lambda g: g @ weight.data.T, lambda g: x.data.T @ g, lambda g: g.sum(axis=0)),
    )


def dropout_forward(x, rate, mode, rng=None):
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate).

    Eval mode is the identity (no masking, no scaling).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = as_tensor(x)
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / keep
    return make_op("dropout", x.data * mask, (x,), (lambda g: g * mask,))


def softmax_forward(logits):
    """Row-wise exp-normalize with max subtraction; rows sum to 1."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax needs [N,K] logits with K >= 2, got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return p * (g - (g * p).sum(axis=1, keepdims=True))

    return make_op("softmax", p, (logits,), (vjp,))


def apply_max_norm(weight, cap):
    """Rescale each column of ``weight`` (in place) to euclidean norm <= cap.

    Rescaled columns land a few ulps below the cap so the projection is
    exactly idempotent: a second application sees every norm under the cap
    and leaves the data untouched.
    """
    if cap <= 0:
        raise ValueError(f"max-norm cap must be positive, got {cap}")
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    norms = np.sqrt((w * w).sum(axis=0))
    margin = 1.0 - 256.0 * np.finfo(w.dtype).eps
    factor = np.where(norms > cap, cap * margin / np.where(norms > 0, norms, 1.0), 1.0)
    w *= factor.astype(w.dtype)
    return weight


@dataclass
class Model:
    """Built parameter set plus the forward pass over it."""

    cfg: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    constrained: tuple[str, ...] = ()  # parameter names under the max-norm cap

    def parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def encode(self, images, mode="train", rng=None):
        """Encoder forward: images [N,S,S,3] -> features [N,feature_units]."""
        x = as_tensor(images)
        if x.data.ndim != 4 or x.shape[1:] != (self.cfg.image_side, self.cfg.image_side, 3):
            raise ShapeError(
                f"expected images [N,{self.cfg.image_side},{self.cfg.image_side},3], got {x.shape}")
        for i in range(len(self.cfg.conv_filters)):
            x = conv2d_forward(x, self.params[f"conv{i + 1}/W"], self.params[f"conv{i + 1}/b"])
            x = relu(x)
            x = maxpool2d_forward(x)
        x = reshape(x, (x.shape[0], self.cfg.flatten_dim()))
        x = relu(dense_forward(x, self.params["feature/W"], self.params["feature/b"]))
        return dropout_forward(x, self.cfg.dropout_rate, mode, rng)

    def classify(self, features):
        """Task head forward: features -> class probabilities."""
        h = features
        if self.cfg.deep_head:
            h = relu(dense_forward(h, self.params["head_hidden/W"], self.params["head_hidden/b"]))
        logits = dense_forward(h, self.params["head/W"], self.params["head/b"])
        return softmax_forward(logits)

    def forward(self, images, mode="train", rng=None):
        features = self.encode(images, mode=mode, rng=rng)
        return features, self.classify(features)


def build_model(cfg, seed, dtype=np.float64):
    """Initialize all parameters (seeded He-uniform kernels, zero biases)."""
    flat = cfg.flatten_dim()  # raises ConfigurationError when the stack collapses
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)

    def he_uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    params = {}
    cin = 3
    for i, cout in enumerate(cfg.conv_filters, start=1):
        fan_in = KERNEL_SIZE * KERNEL_SIZE * cin
        params[f"conv{i}/W"] = Tensor(
            he_uniform((KERNEL_SIZE, KERNEL_SIZE, cin, cout), fan_in), requires_grad=True)
        params[f"conv{i}/b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        cin = cout

    params["feature/W"] = Tensor(he_uniform((flat, cfg.feature_units), flat), requires_grad=True)
    params["feature/b"] = Tensor(np.zeros(cfg.feature_units, dtype=dtype), requires_grad=True)

    head_in = cfg.feature_units
    constrained = ["feature/W"]
    if cfg.deep_head:
        params["head_hidden/W"] = Tensor(
            he_uniform((head_in, cfg.feature_units), head_in), requires_grad=True)
        params["head_hidden/b"] = Tensor(np.zeros(cfg.feature_units, dtype=dtype), requires_grad=True)
        constrained.append("head_hidden/W")
    params["head/W"] = Tensor(he_uniform((head_in, cfg.num_classes), head_in), requires_grad=True)
    params["head/b"] = Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True)
    constrained.append("head/W")

    return Model(cfg=cfg, params=params, constrained=tuple(constrained))
