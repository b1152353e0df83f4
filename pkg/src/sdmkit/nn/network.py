"""Layer containers: a plain stack and the two-branch concatenation model."""

from __future__ import annotations

import numpy as np

from sdmkit.nn.layers import INIT, Layer, ShapeError, layer_from_spec, softmax, softmax_cross_entropy, stream


class Sequential:
    def __init__(self, layers: list[Layer], prefix: str = ""):
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            layer.name = f"{prefix}{i}.{layer.kind}"

    def forward(self, x, train):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def spec(self):
        return [layer.spec() for layer in self.layers]


class Network:
    """A classifier network ending in logits, trained with softmax cross-entropy.

    ``branches`` is a list of layer stacks, one per input modality. With a
    single branch the network is a plain stack; with several, the branch
    outputs are concatenated along the feature axis and fed to ``head``.
    """

    def __init__(self, branches: list[list[Layer]], head: list[Layer] | None = None,
                 input_shapes: list[tuple] | None = None, seed: int = 0, dtype=np.float32):
        if len(branches) == 1 and head is None:
            self.branches = [Sequential(branches[0])]
            self.head = Sequential([])
        else:
            self.branches = [Sequential(b, prefix=f"branch{k}.") for k, b in enumerate(branches)]
            self.head = Sequential(head or [], prefix="head.")
        self.input_shapes = [tuple(s) for s in input_shapes] if input_shapes else None
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self._widths = None
        for index, layer in enumerate(self.layers()):
            layer.init(stream(seed, index, INIT), self.dtype)
        self.reseed(seed)

    def layers(self) -> list[Layer]:
        out = []
        for b in self.branches:
            out.extend(b.layers)
        out.extend(self.head.layers)
        return out

    def reseed(self, seed: int) -> None:
        """Reset every stochastic layer's stream to (seed, layer index)."""
        for index, layer in enumerate(self.layers()):
            layer.reseed(seed, index)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{layer.name}.{k}", v) for layer in self.layers() for k, v in layer.params.items()]

    def gradients(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{layer.name}.{k}", layer.grads[k]) for layer in self.layers() for k in layer.params]

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Parameters followed by buffers, in layer order."""
        out = []
        for layer in self.layers():
            out.extend((f"{layer.name}.{k}", v) for k, v in layer.params.items())
            out.extend((f"{layer.name}.{k}", v) for k, v in layer.buffers.items())
        return out

    def copy_state(self) -> list[np.ndarray]:
        return [v.copy() for _, v in self.state()]

    def load_state(self, arrays) -> None:
        arrays = list(arrays)
        i = 0
        for layer in self.layers():
            for d in (layer.params, layer.buffers):
                for k in d:
                    if arrays[i].shape != d[k].shape:
                        raise ShapeError(f"{layer.name}.{k}: stored shape {arrays[i].shape} != {d[k].shape}")
                    d[k] = np.asarray(arrays[i], dtype=self.dtype).copy()
                    i += 1
        if i != len(arrays):
            raise ShapeError(f"state has {len(arrays)} arrays, network expects {i}")

    def astype(self, dtype) -> Network:
        self.dtype = np.dtype(dtype)
        for layer in self.layers():
            layer.astype(self.dtype)
        return self

    def zero_grad(self) -> None:
        for layer in self.layers():
            layer.zero_grad()

    def n_params(self) -> int:
        return sum(v.size for _, v in self.parameters())

    def _as_inputs(self, inputs):
        if isinstance(inputs, np.ndarray):
            inputs = [inputs]
        inputs = list(inputs)
        if len(inputs) != len(self.branches):
            raise ShapeError(f"network has {len(self.branches)} input branch(es), got {len(inputs)} input(s)")
        if self.input_shapes:
            for k, (x, want) in enumerate(zip(inputs, self.input_shapes)):
                if tuple(x.shape[1:]) != want:
                    first = self.branches[k].layers[0].name if self.branches[k].layers else f"branch{k}"
                    raise ShapeError(f"layer {first}: expected input shape {want}, got {tuple(x.shape[1:])}")
        return [np.asarray(x, dtype=self.dtype) for x in inputs]

    def forward(self, inputs, train: bool = False) -> np.ndarray:
        xs = self._as_inputs(inputs)
        feats = [b.forward(x, train) for b, x in zip(self.branches, xs)]
        if len(feats) == 1:
            h = feats[0]
        else:
            self._widths = [f.shape[1] for f in feats]
            h = np.concatenate(feats, axis=1)
        return self.head.forward(h, train)

    def backward(self, grad: np.ndarray) -> list[np.ndarray]:
        """Accumulate parameter gradients; returns the gradient w.r.t. each input."""
        g = self.head.backward(grad)
        if len(self.branches) == 1:
            return [self.branches[0].backward(g)]
        if self._widths is None:
            raise RuntimeError("backward called without a train-mode forward")
        parts = np.split(g, np.cumsum(self._widths)[:-1], axis=1)
        self._widths = None
        return [b.backward(p) for b, p in zip(self.branches, parts)]

    def loss_and_grad(self, inputs, targets) -> tuple[float, np.ndarray]:
        """Forward in train mode, softmax cross-entropy, backward. Gradients are zeroed first."""
        self.zero_grad()
        logits = self.forward(inputs, train=True)
        loss, probs, dlogits = softmax_cross_entropy(logits, targets)
        self.backward(dlogits.astype(self.dtype, copy=False))
        return loss, probs

    def predict_proba(self, inputs, batch_size: int = 256) -> np.ndarray:
        xs = [np.asarray(x) for x in ([inputs] if isinstance(inputs, np.ndarray) else inputs)]
        n = xs[0].shape[0]
        out = []
        for start in range(0, n, batch_size):
            out.append(softmax(self.forward([x[start:start + batch_size] for x in xs], train=False)
                               .astype(np.float64)))
        return np.concatenate(out, axis=0) if out else np.zeros((0, 0))

    def spec(self) -> dict:
        return {"branches": [b.spec() for b in self.branches],
                "head": self.head.spec() if len(self.branches) > 1 else None,
                "input_shapes": [list(s) for s in self.input_shapes] if self.input_shapes else None}

    @classmethod
    def from_spec(cls, spec: dict, seed: int = 0, dtype=np.float32) -> Network:
        branches = [[layer_from_spec(s) for s in b] for b in spec["branches"]]
        head = [layer_from_spec(s) for s in spec["head"]] if spec.get("head") is not None else None
        return cls(branches, head, input_shapes=spec.get("input_shapes"), seed=seed, dtype=dtype)
