"""Layers with hand-written forward and backward passes.

Image tensors are laid out (batch, channel, height, width). Every layer caches
what its backward pass needs during a train-mode forward and drops the cache
once backward has run, so a second backward without a fresh forward fails.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def stream(seed: int, index: int, purpose: int) -> np.random.Generator:
    """Counter-based RNG stream keyed by (run seed, layer index, purpose)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index, purpose])))


INIT, MASK = 0, 1


class Layer:
    kind = "layer"
    stochastic = False

    def __init__(self):
        self.name = self.kind
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def spec(self) -> dict:
        return {"kind": self.kind}

    def init(self, rng: np.random.Generator, dtype) -> None:
        pass

    def astype(self, dtype) -> None:
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        self.zero_grad()

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def reseed(self, seed: int, index: int) -> None:
        pass

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called without a train-mode forward")
        cache, self._cache = self._cache, None
        return cache

    def _check(self, x: np.ndarray, ndim: int, axis: int | None = None, size: int | None = None):
        if x.ndim != ndim or (axis is not None and x.shape[axis] != size):
            want = f"{ndim}-d" + (f" with size {size} on axis {axis}" if axis is not None else "")
            raise ShapeError(f"layer {self.name}: expected {want} input, got shape {x.shape}")

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "kind")
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        if in_features <= 0 or out_features <= 0:
            raise ValueError(f"dense widths must be positive, got {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        self.params = {"weight": np.zeros((in_features, out_features)),
                       "bias": np.zeros(out_features)}
        self.zero_grad()

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}

    def init(self, rng, dtype):
        limit = np.sqrt(6.0 / self.in_features)
        self.params["weight"] = rng.uniform(-limit, limit, (self.in_features, self.out_features)).astype(dtype)
        self.params["bias"] = np.zeros(self.out_features, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train):
        self._check(x, 2, 1, self.in_features)
        if train:
            self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad):
        x = self._take_cache()
        self.grads["weight"] += x.T @ grad
        self.grads["bias"] += grad.sum(axis=0)
        return grad @ self.params["weight"].T

    def output_shape(self, shape):
        return (shape[0], self.out_features)


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero 'same' padding, via im2col."""

    kind = "conv3x3"

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if in_channels <= 0 or out_channels <= 0:
            raise ValueError(f"conv channels must be positive, got {in_channels}->{out_channels}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        # weight rows ordered (tap, in_channel) to match the column layout below
        self.params = {"weight": np.zeros((9 * in_channels, out_channels)),
                       "bias": np.zeros(out_channels)}
        self.zero_grad()

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels}

    def init(self, rng, dtype):
        fan_in = 9 * self.in_channels
        limit = np.sqrt(6.0 / fan_in)
        self.params["weight"] = rng.uniform(-limit, limit, (fan_in, self.out_channels)).astype(dtype)
        self.params["bias"] = np.zeros(self.out_channels, dtype=dtype)
        self.zero_grad()

    def kernel(self) -> np.ndarray:
        """Weights as (out, in, 3, 3)."""
        w = self.params["weight"].reshape(3, 3, self.in_channels, self.out_channels)
        return w.transpose(3, 2, 0, 1)

    def set_kernel(self, k: np.ndarray) -> None:
        k = np.asarray(k)
        self.params["weight"] = k.transpose(2, 3, 1, 0).reshape(9 * self.in_channels, self.out_channels).copy()

    def forward(self, x, train):
        self._check(x, 4, 1, self.in_channels)
        n, c, h, w = x.shape
        xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
        xp[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
        cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
        for t in range(9):
            i, j = divmod(t, 3)
            cols[:, :, :, t, :] = xp[:, i:i + h, j:j + w, :]
        cols = cols.reshape(n * h * w, 9 * c)
        out = cols @ self.params["weight"] + self.params["bias"]
        if train:
            self._cache = (cols, x.shape)
        return out.reshape(n, h, w, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        cols, (n, c, h, w) = self._take_cache()
        g = grad.transpose(0, 2, 3, 1).reshape(n * h * w, self.out_channels)
        self.grads["weight"] += cols.T @ g
        self.grads["bias"] += g.sum(axis=0)
        dcols = (g @ self.params["weight"].T).reshape(n, h, w, 9, c)
        dxp = np.zeros((n, h + 2, w + 2, c), dtype=grad.dtype)
        for t in range(9):
            i, j = divmod(t, 3)
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, t, :]
        return dxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)

    def output_shape(self, shape):
        return (shape[0], self.out_channels, shape[2], shape[3])


class MaxPool2(Layer):
    kind = "maxpool2"

    def forward(self, x, train):
        self._check(x, 4)
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"layer {self.name}: spatial size {h}x{w} is not even")
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        if train:
            self._cache = (arg, x.shape)
        return out

    def backward(self, grad):
        arg, (n, c, h, w) = self._take_cache()
        blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(blocks, arg[..., None], grad[..., None], axis=-1)
        return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    def output_shape(self, shape):
        return (shape[0], shape[1], shape[2] // 2, shape[3] // 2)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train):
        mask = x > 0
        if train:
            self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._take_cache()


class BatchNorm(Layer):
    """Per-feature (2-d input) or per-channel (4-d input) batch normalization."""

    kind = "batchnorm"

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.features = features
        self.momentum = momentum
        self.eps = eps
        self.params = {"scale": np.ones(features), "shift": np.zeros(features)}
        self.buffers = {"running_mean": np.zeros(features), "running_var": np.ones(features)}
        self.zero_grad()

    def spec(self):
        return {"kind": self.kind, "features": self.features, "momentum": self.momentum, "eps": self.eps}

    def init(self, rng, dtype):
        self.params = {"scale": np.ones(self.features, dtype), "shift": np.zeros(self.features, dtype)}
        self.buffers = {"running_mean": np.zeros(self.features, dtype),
                        "running_var": np.ones(self.features, dtype)}
        self.zero_grad()

    @staticmethod
    def _flat(x):
        if x.ndim == 4:
            return x.transpose(0, 2, 3, 1).reshape(-1, x.shape[1])
        return x

    @staticmethod
    def _unflat(y, shape):
        if len(shape) == 4:
            n, c, h, w = shape
            return y.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return y

    def forward(self, x, train):
        if x.ndim not in (2, 4) or x.shape[1] != self.features:
            raise ShapeError(f"layer {self.name}: expected (batch, {self.features}, ...) input, got shape {x.shape}")
        flat = self._flat(x)
        if train:
            if x.shape[0] < 2:
                raise ValueError(f"layer {self.name}: train-mode batch norm needs batch size >= 2")
            mean = flat.mean(axis=0)
            var = flat.var(axis=0)
            m = flat.shape[0]
            self.buffers["running_mean"] = ((1 - self.momentum) * self.buffers["running_mean"]
                                            + self.momentum * mean).astype(x.dtype)
            self.buffers["running_var"] = ((1 - self.momentum) * self.buffers["running_var"]
                                           + self.momentum * var * m / (m - 1)).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (flat - mean) * inv_std
        y = xhat * self.params["scale"] + self.params["shift"]
        if train:
            self._cache = (xhat, inv_std, x.shape)
        return self._unflat(y, x.shape)

    def backward(self, grad):
        xhat, inv_std, shape = self._take_cache()
        g = self._flat(grad)
        self.grads["scale"] += (g * xhat).sum(axis=0)
        self.grads["shift"] += g.sum(axis=0)
        gx = g * self.params["scale"]
        dx = inv_std * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
        return self._unflat(dx, shape)


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-p) in train mode."""

    kind = "dropout"
    stochastic = True

    def __init__(self, p: float):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
        self.p = p
        self.rng = stream(0, 0, MASK)

    def spec(self):
        return {"kind": self.kind, "p": self.p}

    def reseed(self, seed, index):
        self.rng = stream(seed, index, MASK)

    def forward(self, x, train):
        if not train:
            return x
        mask = None
        if self.p > 0:
            mask = (self.rng.random(x.shape) >= self.p).astype(x.dtype) / x.dtype.type(1 - self.p)
        self._cache = (mask,)
        return x if mask is None else x * mask

    def backward(self, grad):
        (mask,) = self._take_cache()
        return grad if mask is None else grad * mask


class GlobalAvgPool(Layer):
    kind = "globalavgpool"

    def forward(self, x, train):
        self._check(x, 4)
        if train:
            self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._take_cache()
        return np.broadcast_to((grad / (h * w))[:, :, None, None], (n, c, h, w)).copy()

    def output_shape(self, shape):
        return (shape[0], shape[1])


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv3x3, MaxPool2, ReLU, BatchNorm, Dropout, GlobalAvgPool)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**spec)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against integer targets.

    Accepts a single logit vector with a scalar target, or a (batch, N) matrix
    with a target vector. Returns (loss, probabilities, d loss / d logits).
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"softmax_xent: {z.shape[0]} logit rows but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise ValueError(f"softmax_xent: target outside [0, {z.shape[1]})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    probs = np.exp(log_p)
    rows = np.arange(z.shape[0])
    loss = float(-log_p[rows, t].mean())
    grad = probs.copy()
    grad[rows, t] -= 1
    grad /= z.shape[0]
    if single:
        return loss, probs[0], grad[0]
    return loss, probs, grad
