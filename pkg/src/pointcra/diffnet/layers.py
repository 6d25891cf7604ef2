"""Backbone building blocks: shared encoders, set abstraction, local
aggregation, decoder interpolation and linear heads."""
from __future__ import annotations

import numpy as np

from ..geomcore import NeighborhoodIndex, knn
from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Minimal parameter container with ordered, dotted names."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def add_param(self, name, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name, value) -> np.ndarray:
        arr = np.array(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def add_module(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        out = {}
        for k, v in self._params.items():
            out[prefix + k] = v
        for k, m in self._children.items():
            out.update(m.named_parameters(f"{prefix}{k}."))
        return out

    def named_buffers(self, prefix=""):
        out = {}
        for k, v in self._buffers.items():
            out[prefix + k] = v
        for k, m in self._children.items():
            out.update(m.named_buffers(f"{prefix}{k}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode=True):
        self.training = mode
        for m in self._children.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, cin, cout, rng, bias=True):
        super().__init__()
        bound = 1.0 / np.sqrt(cin)
        self.cin, self.cout = cin, cout
        self.weight = self.add_param("weight", rng.uniform(-bound, bound, (cin, cout)))
        self.bias = self.add_param("bias", rng.uniform(-bound, bound, cout)) if bias else None

    def __call__(self, x):
        if x.shape[-1] != self.cin:
            raise ShapeError(f"Linear expects {self.cin} input channels, got {x.shape[-1]}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class BatchNorm(Module):
    """Per-channel normalization; running averages use momentum 0.9."""

    def __init__(self, c, momentum=0.9, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.scale = self.add_param("scale", np.ones(c))
        self.shift = self.add_param("shift", np.zeros(c))
        self.add_buffer("running_mean", np.zeros(c))
        self.add_buffer("running_var", np.ones(c))

    def __call__(self, x):
        if self.training:
            y, mu, var = T.batch_norm(x, self.scale, self.shift, self.eps)
            m = self.momentum
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            rm *= m
            rm += (1.0 - m) * mu
            rv *= m
            rv += (1.0 - m) * var
            return y
        inv = 1.0 / np.sqrt(self._buffers["running_var"] + self.eps)
        xhat = (T.as_tensor(x) - self._buffers["running_mean"]) * inv
        return xhat * self.scale + self.shift


class SharedMLP(Module):
    """Point-pair encoder: linear -> batch-norm -> ReLU -> linear."""

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.fc1 = self.add_module("fc1", Linear(cin, cout, rng))
        self.bn = self.add_module("bn", BatchNorm(cout))
        self.fc2 = self.add_module("fc2", Linear(cout, cout, rng))

    def __call__(self, x):
        return self.fc2(T.relu(self.bn(self.fc1(x))))


class Embed(Module):
    """linear -> batch-norm -> ReLU."""

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.fc = self.add_module("fc", Linear(cin, cout, rng))
        self.bn = self.add_module("bn", BatchNorm(cout))

    def __call__(self, x):
        return T.relu(self.bn(self.fc(x)))


def _pair_input(positions, features, index: NeighborhoodIndex, center_positions):
    nbr = index.neighbors
    grouped = T.gather_rows(features, nbr)
    rel = center_positions[:, None, :] - positions[nbr]
    return T.concat([grouped, Tensor(rel)], axis=-1)


class SetAbstraction(Module):
    """Downsampling aggregation: max over neighbors of the shared encoder
    applied to (neighbor feature, center - neighbor offset)."""

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.mlp = self.add_module("mlp", SharedMLP(cin + 3, cout, rng))

    def __call__(self, positions, features, index: NeighborhoodIndex):
        """Returns (center positions M x 3, features M x cout)."""
        features = T.as_tensor(features)
        if features.shape[-1] != self.cin:
            raise ShapeError(f"SetAbstraction expects {self.cin} channels, got {features.shape[-1]}")
        index.validate(positions.shape[0])
        centers = positions[index.centers]
        x = _pair_input(positions, features, index, centers)
        return centers, T.reduce_max(self.mlp(x), axis=1)


class LABlock(Module):
    """Same-resolution aggregation followed by an embedding layer."""

    def __init__(self, c, rng):
        super().__init__()
        self.c = c
        self.mlp = self.add_module("mlp", SharedMLP(c + 3, c, rng))
        self.embed = self.add_module("embed", Embed(c, c, rng))

    def __call__(self, positions, features, index: NeighborhoodIndex):
        features = T.as_tensor(features)
        if features.shape[-1] != self.c:
            raise ShapeError(f"LABlock expects {self.c} channels, got {features.shape[-1]}")
        if index.neighbors.shape[0] != features.shape[0]:
            raise ShapeError("LABlock index must cover the current resolution")
        x = _pair_input(positions, features, index, positions[index.centers])
        return self.embed(T.reduce_max(self.mlp(x), axis=1))


def set_abstraction(cloud, index, block: SetAbstraction):
    """Functional form over a PointCloud; returns the downsampled cloud."""
    from ..geomcore import PointCloud

    centers, feat = block(cloud.positions, cloud.features, index)
    return PointCloud(centers, feat.data)


def la_block(cloud, index, block: LABlock, sequence: list | None = None):
    out = block(cloud.positions, cloud.features, index)
    if sequence is not None:
        sequence.append(out)
    return out


# --------------------------------------------------------------------------
# decoder interpolation
# --------------------------------------------------------------------------

INTERP_EPS = 1e-12


def interpolation_weights(coarse_positions, fine_positions, k=3):
    """Indices and normalized inverse-squared-distance weights, F x k."""
    if coarse_positions.shape[0] == 0 or fine_positions.shape[0] == 0:
        raise ShapeError("feature propagation needs nonempty clouds")
    k = min(k, coarse_positions.shape[0])
    nb = knn(fine_positions, coarse_positions, k)
    w = 1.0 / (nb.distances**2 + INTERP_EPS)
    return nb.neighbors, w / w.sum(axis=1, keepdims=True)


def interpolate(coarse_features, idx, weights):
    g = T.gather_rows(coarse_features, idx)
    return (g * Tensor(weights[:, :, None])).sum(axis=1)


def feature_propagation(coarse_positions, coarse_features, fine_positions):
    """Inverse-distance interpolation of coarse features onto fine points."""
    idx, w = interpolation_weights(coarse_positions, fine_positions)
    return interpolate(T.as_tensor(coarse_features), idx, w)


class FPModule(Module):
    """Interpolate, concatenate the skip features, then embed."""

    def __init__(self, c_coarse, c_skip, cout, rng):
        super().__init__()
        self.embed = self.add_module("embed", Embed(c_coarse + c_skip, cout, rng))

    def __call__(self, coarse_features, skip_features, idx, weights):
        up = interpolate(coarse_features, idx, weights)
        return self.embed(T.concat([up, skip_features], axis=-1))


class Head(Module):
    """Linear classifier; used for both per-scene and per-point logits."""

    def __init__(self, cin, num_classes, rng):
        super().__init__()
        if num_classes < 1:
            raise ShapeError("need at least one class")
        self.num_classes = num_classes
        self.fc = self.add_module("fc", Linear(cin, num_classes, rng))

    def __call__(self, x):
        return self.fc(x)


def classification_head(features, head: Head):
    features = T.as_tensor(features)
    if features.ndim != 2:
        raise ShapeError("classification head expects B x C pooled features")
    return head(features)


def segmentation_head(features, head: Head):
    features = T.as_tensor(features)
    if features.ndim != 2:
        raise ShapeError("segmentation head expects N x C per-point features")
    return head(features)
