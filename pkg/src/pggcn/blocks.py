"""Layers with explicit forward/backward passes.

Feature maps are batched as ``[B, T, N, C]`` (batch, frames, joints, channels).
Every layer caches what its backward pass needs during ``forward``; calling
``backward`` with the upstream gradient accumulates parameter gradients and
returns the gradient with respect to the layer input.
"""
from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError, DimensionError
from .tensor import Param, as_tensor


class Layer:
    """Minimal module base: parameter registry and train/eval switching."""

    training = True

    def _members(self):
        for key, val in vars(self).items():
            if key.startswith("_cache"):
                continue
            if isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Param, Layer)):
                        yield f"{key}.{i}", item
            elif isinstance(val, (Param, Layer)):
                yield key, val

    def named_params(self, prefix=""):
        out = []
        for key, val in self._members():
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                out.append((name, val))
            else:
                out.extend(val.named_params(name + "."))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def named_buffers(self, prefix=""):
        out = []
        for key, val in self._members():
            if isinstance(val, Layer):
                out.extend(val.named_buffers(f"{prefix}{key}."))
        return out

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def train(self, mode=True):
        self.training = mode
        for _, val in self._members():
            if isinstance(val, Layer):
                val.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class GraphConv(Layer):
    """Per-frame spatial graph convolution ``Y_t = sum_k A_k X_t W_k + b``.

    ``adjacency`` is a ``[K, N, N]`` stack.  When the layer feeds a batch
    normalization the bias is redundant; ``bias_trainable=False`` keeps it
    frozen at zero.
    """

    def __init__(self, in_channels, out_channels, adjacency, rng=None,
                 bias_trainable=True):
        adjacency = as_tensor(adjacency)
        if adjacency.ndim == 2:
            adjacency = adjacency[None]
        self.adjacency = adjacency
        self.in_channels = in_channels
        self.out_channels = out_channels
        k = adjacency.shape[0]
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(he_uniform(rng, (k, in_channels, out_channels), k * in_channels),
                            "weight", decay=True)
        self.bias = Param(np.zeros(out_channels), "bias", trainable=bias_trainable)
        self._cache = None

    def _aggregate(self, x):
        # [K*N, N] x [B, T, N, C] -> [B, T, N, K*C]
        k, n, _ = self.adjacency.shape
        b, t, _, c = x.shape
        z = np.tensordot(self.adjacency.reshape(k * n, n), x, axes=([1], [2]))
        z = z.reshape(k, n, b, t, c).transpose(2, 3, 1, 0, 4)
        return z.reshape(b, t, n, k * c)

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[-1] != self.in_channels:
            raise DimensionError(
                f"graph conv expects [B, T, N, {self.in_channels}], got {x.shape}")
        if x.shape[2] != self.adjacency.shape[1]:
            raise DimensionError(
                f"input has {x.shape[2]} joints, adjacency has {self.adjacency.shape[1]}")
        z = self._aggregate(x)
        w = self.weight.value.reshape(-1, self.out_channels)
        self._cache = z
        return z @ w + self.bias.value

    def backward(self, grad):
        z = self._cache
        k, n, _ = self.adjacency.shape
        b, t, _, kc = z.shape
        c = kc // k
        w = self.weight.value.reshape(-1, self.out_channels)
        g2 = grad.reshape(-1, self.out_channels)
        self.weight.accumulate((z.reshape(-1, kc).T @ g2).reshape(self.weight.shape))
        self.bias.accumulate(g2.sum(axis=0))
        dz = (grad @ w.T).reshape(b, t, n, k, c)
        # dx[b,t,m,c] = sum_k sum_n A_k[n,m] dz[b,t,n,k,c]
        dz = dz.transpose(3, 2, 0, 1, 4).reshape(k * n, b, t, c)
        dx = np.tensordot(self.adjacency.reshape(k * n, n), dz, axes=([0], [0]))
        return np.ascontiguousarray(dx.transpose(1, 2, 0, 3))


class TemporalConv(Layer):
    """Convolution along frames, shared across joints, zero padded.

    ``kernel`` has shape ``[K_t, C, C]``; output length is
    ``(T + 2*pad - K_t) // stride + 1`` with ``pad = (K_t - 1) // 2``.
    """

    def __init__(self, channels, kernel_size=9, stride=1, rng=None):
        if kernel_size % 2 != 1:
            raise ConfigurationError("temporal kernel size must be odd")
        if stride < 1:
            raise ConfigurationError("stride must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.pad = (kernel_size - 1) // 2
        self.kernel = Param(he_uniform(rng, (kernel_size, channels, channels),
                                       kernel_size * channels), "kernel", decay=True)
        self._cache = None

    def _out_len(self, t):
        return (t + 2 * self.pad - self.kernel_size) // self.stride + 1

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[-1] != self.channels:
            raise DimensionError(
                f"temporal conv expects [B, T, N, {self.channels}], got {x.shape}")
        b, t, n, c = x.shape
        t_out = self._out_len(t)
        if t_out < 1:
            raise DimensionError(f"sequence of {t} frames too short for kernel")
        xp = np.zeros((b, t + 2 * self.pad, n, c))
        xp[:, self.pad:self.pad + t] = x
        span = self.stride * (t_out - 1) + 1
        y = np.zeros((b, t_out, n, c))
        w = self.kernel.value
        for tau in range(self.kernel_size):
            y += xp[:, tau:tau + span:self.stride] @ w[tau]
        self._cache = (xp, t, span)
        return y

    def backward(self, grad):
        xp, t, span = self._cache
        c = self.channels
        w = self.kernel.value
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp)
        g2 = grad.reshape(-1, c)
        for tau in range(self.kernel_size):
            window = xp[:, tau:tau + span:self.stride]
            dw[tau] = window.reshape(-1, c).T @ g2
            dxp[:, tau:tau + span:self.stride] += grad @ w[tau].T
        self.kernel.accumulate(dw)
        return dxp[:, self.pad:self.pad + t]


class BatchNorm(Layer):
    """Per-channel normalization over every axis but the last.

    Training mode normalizes with batch statistics and updates the running
    estimates (``running = (1 - momentum) * running + momentum * batch``,
    unbiased variance); eval mode uses the running estimates.  ``bypass``
    turns the layer into the identity, for tests.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(np.ones(channels), "gamma")
        self.beta = Param(np.zeros(channels), "beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.bypass = False
        self._cache = None

    def named_buffers(self, prefix=""):
        return [(f"{prefix}running_mean", self.running_mean),
                (f"{prefix}running_var", self.running_var)]

    def forward(self, x):
        x = as_tensor(x)
        if x.shape[-1] != self.channels:
            raise DimensionError(f"batch norm over {self.channels} channels got {x.shape}")
        if self.bypass:
            self._cache = None
            return x
        axes = tuple(range(x.ndim - 1))
        if self.training:
            if x.shape[0] < 2:
                raise ConfigurationError("batch norm in train mode needs a batch of at least 2")
            mean = x.mean(axis=axes)
            centered = x - mean
            var = (centered * centered).mean(axis=axes)
            m = x.size // self.channels
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var * (m / (m - 1))
        else:
            centered = x - self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = centered * inv_std
        self._cache = (x_hat, inv_std, self.training)
        return x_hat * self.gamma.value + self.beta.value

    def backward(self, grad):
        if self._cache is None:
            return grad
        x_hat, inv_std, training = self._cache
        axes = tuple(range(grad.ndim - 1))
        self.gamma.accumulate((grad * x_hat).sum(axis=axes))
        self.beta.accumulate(grad.sum(axis=axes))
        dx_hat = grad * self.gamma.value
        if not training:
            return dx_hat * inv_std
        m = grad.size // self.channels
        s1 = dx_hat.sum(axis=axes)
        s2 = (dx_hat * x_hat).sum(axis=axes)
        return (inv_std / m) * (m * dx_hat - s1 - x_hat * s2)


class ReLU(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad):
        return np.where(self._cache, grad, 0.0)


class Linear(Layer):
    """Affine map over the last axis (a fully connected or 1x1 channel-mixing layer)."""

    def __init__(self, in_features, out_features, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Param(he_uniform(rng, (in_features, out_features), in_features),
                            "weight", decay=True)
        self.bias = Param(np.zeros(out_features), "bias")
        self._cache = None

    def forward(self, x):
        x = as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"linear layer expects {self.in_features} features, got {x.shape}")
        self._cache = x
        return x @ self.weight.value + self.bias.value

    def backward(self, grad):
        x = self._cache
        x2 = x.reshape(-1, self.in_features)
        g2 = grad.reshape(-1, self.out_features)
        self.weight.accumulate(x2.T @ g2)
        self.bias.accumulate(g2.sum(axis=0))
        return grad @ self.weight.value.T


class GCNBlock(Layer):
    """Graph convolution, batch normalization, ReLU."""

    def __init__(self, in_channels, out_channels, adjacency, rng=None):
        self.gcn = GraphConv(in_channels, out_channels, adjacency, rng, bias_trainable=False)
        self.bn = BatchNorm(out_channels)
        self.relu = ReLU()

    @property
    def out_channels(self):
        return self.gcn.out_channels

    def forward(self, x):
        return self.relu(self.bn(self.gcn(x)))

    def backward(self, grad):
        return self.gcn.backward(self.bn.backward(self.relu.backward(grad)))


class STGCNBlock(Layer):
    """Spatial graph conv, BN, ReLU, temporal conv, BN, residual add, ReLU.

    The identity residual is used only when input and output shapes agree
    (equal channels, stride 1).
    """

    def __init__(self, in_channels, out_channels, adjacency, kernel_size=9, stride=1,
                 rng=None, residual=True):
        self.gcn = GraphConv(in_channels, out_channels, adjacency, rng, bias_trainable=False)
        self.bn1 = BatchNorm(out_channels)
        self.relu1 = ReLU()
        self.tcn = TemporalConv(out_channels, kernel_size, stride, rng)
        self.bn2 = BatchNorm(out_channels)
        self.relu2 = ReLU()
        self.residual = residual and in_channels == out_channels and stride == 1

    @property
    def out_channels(self):
        return self.gcn.out_channels

    def forward(self, x):
        h = self.relu1(self.bn1(self.gcn(x)))
        h = self.bn2(self.tcn(h))
        if self.residual:
            h = h + x
        return self.relu2(h)

    def backward(self, grad):
        g = self.relu2.backward(grad)
        dx = g if self.residual else 0.0
        h = self.tcn.backward(self.bn2.backward(g))
        h = self.gcn.backward(self.bn1.backward(self.relu1.backward(h)))
        return h + dx


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad
