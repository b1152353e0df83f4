"""Finite-difference verification of every layer kind's backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sdmkit.nn.layers import (BatchNorm, Conv3x3, Dense, Dropout, GlobalAvgPool, MaxPool2, ReLU,
                              softmax_cross_entropy)
from sdmkit.nn.network import Network

KINDS = ("dense", "conv3x3", "maxpool2", "relu", "batchnorm", "dropout", "globalavgpool",
         "concat", "softmax_xent")


@dataclass
class GradCheckResult:
    kind: str
    trial: int
    shape: tuple
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest element-wise |a - n| / max(|a| + |n|, floor)."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def numeric_gradient(f, x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def _separated(rng, shape, gap=0.05):
    """Random values whose pairwise gaps and distance from zero exceed ``gap``,
    so max-pool winners and ReLU signs do not flip under perturbation."""
    n = int(np.prod(shape))
    magnitudes = rng.permutation(np.arange(1, n + 1)) * gap
    return (magnitudes * rng.choice([-1.0, 1.0], size=n)).reshape(shape)


def _random_case(kind: str, rng: np.random.Generator):
    n = int(rng.integers(2, 5))
    if kind == "dense":
        fin, fout = rng.integers(1, 7, size=2)
        return [[Dense(int(fin), int(fout))]], None, [rng.normal(size=(n, fin))]
    if kind == "conv3x3":
        cin, cout = rng.integers(1, 4, size=2)
        h, w = rng.integers(1, 6, size=2)
        return [[Conv3x3(int(cin), int(cout))]], None, [rng.normal(size=(n, cin, h, w))]
    if kind == "maxpool2":
        c = int(rng.integers(1, 4))
        h, w = 2 * rng.integers(1, 4, size=2)
        return [[MaxPool2()]], None, [_separated(rng, (n, c, h, w))]
    if kind == "relu":
        d = int(rng.integers(1, 8))
        return [[ReLU()]], None, [_separated(rng, (n, d))]
    if kind == "batchnorm":
        if rng.random() < 0.5:
            d = int(rng.integers(1, 6))
            x = rng.normal(size=(n, d))
            return [[BatchNorm(d)]], None, [x]
        c = int(rng.integers(1, 4))
        h, w = rng.integers(1, 4, size=2)
        return [[BatchNorm(c)]], None, [rng.normal(size=(n, c, h, w))]
    if kind == "dropout":
        d = int(rng.integers(1, 10))
        return [[Dropout(float(rng.uniform(0.0, 0.9)))]], None, [rng.normal(size=(n, d))]
    if kind == "globalavgpool":
        c = int(rng.integers(1, 4))
        h, w = rng.integers(1, 5, size=2)
        return [[GlobalAvgPool()]], None, [rng.normal(size=(n, c, h, w))]
    if kind == "concat":
        a, b, fa, fb, out = rng.integers(1, 6, size=5)
        branches = [[Dense(int(a), int(fa))], [Dense(int(b), int(fb))]]
        head = [Dense(int(fa + fb), int(out))]
        return branches, head, [rng.normal(size=(n, a)), rng.normal(size=(n, b))]
    raise ValueError(f"unknown layer kind {kind!r}")


def check_kind(kind: str, trial: int, seed: int = 0, eps: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckResult:
    rng = np.random.default_rng([seed, KINDS.index(kind), trial])
    if kind == "softmax_xent":
        n, k = int(rng.integers(1, 5)), int(rng.integers(1, 8))
        logits = rng.normal(size=(n, k)) * 2
        target = rng.integers(0, k, size=n)
        _, _, analytic = softmax_cross_entropy(logits, target)
        numeric = numeric_gradient(lambda: softmax_cross_entropy(logits, target)[0], logits, eps)
        return GradCheckResult(kind, trial, logits.shape, relative_error(analytic, numeric), tolerance)

    branches, head, inputs = _random_case(kind, rng)
    net = Network(branches, head, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for layer in net.layers():
        # perturb the identity initialisation of batch-norm affine terms
        for key, p in layer.params.items():
            layer.params[key] = p + rng.normal(scale=0.5, size=p.shape)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    out_shape = net.forward(inputs, train=True).shape
    proj = rng.normal(size=out_shape)

    def objective():
        net.reseed(net.seed)
        return float(np.sum(proj * net.forward(inputs, train=True)))

    net.zero_grad()
    net.reseed(net.seed)
    net.forward(inputs, train=True)
    input_grads = net.backward(proj)
    analytic = list(input_grads) + [g.copy() for _, g in net.gradients()]
    targets = inputs + [p for _, p in net.parameters()]
    errors = []
    for a, t in zip(analytic, targets):
        errors.append(relative_error(a, numeric_gradient(objective, t, eps)))
    return GradCheckResult(kind, trial, tuple(inputs[0].shape), max(errors), tolerance)


def run_gradcheck(trials: int = 20, seed: int = 0, kinds=KINDS, tolerance: float = 1e-4) -> list[GradCheckResult]:
    return [check_kind(kind, t, seed, tolerance=tolerance) for kind in kinds for t in range(trials)]


def summarize(results: list[GradCheckResult]) -> list[tuple[str, float, bool]]:
    rows = []
    for kind in dict.fromkeys(r.kind for r in results):
        rs = [r for r in results if r.kind == kind]
        rows.append((kind, max(r.max_rel_error for r in rs), all(r.passed for r in rs)))
    return rows
