"""Dense layer stack with quantization-aware forward and backward passes.

Every quantizer is a straight-through estimator: gradients flow through it
unchanged and the backward pass then quantizes activation gradients (QE) and
weight gradients (QG) where they are produced.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datapath import MacConfig, mac_matmul
from .errors import ConfigError, ModelError, UsageError
from .format import Granularity, LnsTensor, QuantizerConfig, fake_quantize, quantize_tensor

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def relu(z):
    return np.maximum(z, 0.0)


def relu_grad(z):
    return (z > 0).astype(np.float64)


def gelu(z):
    return 0.5 * z * (1.0 + np.tanh(_SQRT_2_OVER_PI * (z + 0.044715 * z**3)))


def gelu_grad(z):
    u = _SQRT_2_OVER_PI * (z + 0.044715 * z**3)
    t = np.tanh(u)
    du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * z**2)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * du


ACTIVATIONS = {
    "relu": (relu, relu_grad),
    "gelu": (gelu, gelu_grad),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


@dataclass
class QuantConfigs:
    """Quantizers per tensor class; inactive roles are the full-precision arm."""

    weight: QuantizerConfig = field(default_factory=QuantizerConfig)
    activation: QuantizerConfig = field(default_factory=QuantizerConfig)
    error: QuantizerConfig = field(default_factory=QuantizerConfig)
    gradient: QuantizerConfig = field(default_factory=QuantizerConfig)
    mac: MacConfig = field(default_factory=MacConfig)

    @property
    def conversion(self) -> str:
        return self.weight.conversion if self.weight.active else "real"


@dataclass
class Network:
    """Affine layers ``x @ W.T`` with an activation after every layer but the last."""

    weights: list
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        for i in range(1, len(self.weights)):
            if np.shape(self.weights[i])[1] != np.shape(self.weights[i - 1])[0]:
                raise ModelError(f"layer {i} expects {np.shape(self.weights[i])[1]} inputs, "
                                 f"previous layer gives {np.shape(self.weights[i - 1])[0]}")

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, activation="relu") -> "Network":
        ws = [rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
              for n_in, n_out in zip(sizes[:-1], sizes[1:])]
        return cls(ws, activation)

    @property
    def sizes(self) -> list:
        if not self.weights:
            return []
        return [np.shape(self.weights[0])[1]] + [np.shape(w)[0] for w in self.weights]

    def n_params(self) -> int:
        return sum(int(np.size(w)) for w in self.weights)


@dataclass
class LayerCache:
    x_q: np.ndarray  # quantized layer input (decoded)
    w_q: np.ndarray  # quantized weight (decoded)
    z: np.ndarray  # pre-activation


@dataclass
class ForwardResult:
    logits: np.ndarray
    caches: list
    saturated: int = 0


@dataclass
class GradientBundle:
    grad_w: list  # per layer, decoded if QG is active
    grad_x: list  # gradient w.r.t. each layer's output (logits last), decoded if QE is active

    @property
    def is_zero(self) -> bool:
        return all(not np.any(g) for g in self.grad_w) and all(not np.any(g) for g in self.grad_x)


def _as_lns_operand(x, cfg: QuantizerConfig, rng) -> LnsTensor:
    if isinstance(x, LnsTensor):
        return x
    return quantize_tensor(x, cfg, rng)


def affine(x_q, w_q, cfgs: QuantConfigs, x_lns=None, w_lns=None):
    """Affine map through the configured conversion path.

    Returns ``(z, saturated_count)``.
    """
    conv = cfgs.conversion
    if conv == "real" or x_lns is None or w_lns is None:
        return x_q @ w_q.T, 0
    for t, name in ((x_lns, "activation"), (w_lns, "weight")):
        if t.granularity is Granularity.PER_FEATURE:
            raise ConfigError(f"datapath conversion needs per-tensor or per-channel {name} scales")
    pre, sat = mac_matmul(x_lns, w_lns, cfgs.mac, conv)
    s_x = x_lns.scales.reshape(-1, 1) if x_lns.scales.size > 1 else x_lns.scales.reshape(1, 1)
    s_w = w_lns.scales.reshape(1, -1) if w_lns.scales.size > 1 else w_lns.scales.reshape(1, 1)
    return pre * s_x * s_w, int(sat.sum())


def forward(net: Network, x0, cfgs: QuantConfigs, rng: Optional[np.random.Generator] = None,
            weights_q: Optional[list] = None) -> ForwardResult:
    """Quantization-aware forward pass.

    ``weights_q`` optionally supplies already-quantized weights (LnsTensor per
    layer), e.g. the forward view of a weight store; QW is skipped for those.
    """
    act, _ = ACTIVATIONS[net.activation]
    x = np.asarray(x0, dtype=np.float64)
    if not net.weights:
        return ForwardResult(x, [])
    if x.ndim != 2 or x.shape[1] != net.sizes[0]:
        raise ModelError(f"input of shape {x.shape} does not match {net.sizes[0]} features")
    use_datapath = cfgs.conversion != "real"
    caches = []
    saturated = 0
    x_lns = None
    if cfgs.activation.active:
        x_lns = quantize_tensor(x, cfgs.activation, rng)
        x = x_lns.decode()
    L = len(net.weights)
    for l, w in enumerate(net.weights):
        w_lns = None
        if weights_q is not None and weights_q[l] is not None:
            w_lns = weights_q[l]
            w_q = w_lns.decode()
        elif cfgs.weight.active:
            w_lns = quantize_tensor(w, cfgs.weight, rng)
            w_q = w_lns.decode()
        else:
            w_q = np.asarray(w, dtype=np.float64)
        if use_datapath:
            if x_lns is None:
                raise ConfigError("datapath conversion requires an active activation quantizer")
            z, sat = affine(x, w_q, cfgs, x_lns, w_lns)
            saturated += sat
        else:
            z = x @ w_q.T
        caches.append(LayerCache(x, w_q, z))
        if l == L - 1:
            return ForwardResult(z, caches, saturated)
        a = act(z)
        if cfgs.activation.active:
            x_lns = quantize_tensor(a, cfgs.activation, rng)
            x = x_lns.decode()
        else:
            x = a


def backward(net: Network, loss_grad, caches, cfgs: QuantConfigs,
             rng: Optional[np.random.Generator] = None) -> GradientBundle:
    """Reverse pass; QE on each layer-output gradient, QG on each weight gradient."""
    if not caches or len(caches) != len(net.weights):
        raise UsageError("backward needs the caches of a matching forward pass")
    _, act_grad = ACTIVATIONS[net.activation]
    L = len(caches)
    grad_w = [None] * L
    grad_x = [None] * L
    g = np.asarray(loss_grad, dtype=np.float64)
    for l in range(L - 1, -1, -1):
        c = caches[l]
        g = fake_quantize(g, cfgs.error, rng)
        grad_x[l] = g
        gz = g if l == L - 1 else g * act_grad(c.z)
        grad_w[l] = fake_quantize(gz.T @ c.x_q, cfgs.gradient, rng)
        if l:
            g = gz @ c.w_q
    return GradientBundle(grad_w, grad_x)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_softmax_xent(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ModelError("labels must be class indices in range")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def im2col(x, kh: int, kw: int, stride: int = 1):
    """Unfold ``(N, C, H, W)`` images into ``(N * OH * OW, C * kh * kw)`` patches.

    A convolution with weight ``(O, C, kh, kw)`` is then the affine map
    ``patches @ weight.reshape(O, -1).T``.
    """
    x = np.asarray(x, dtype=np.float64)
    N, C, H, W = x.shape
    oh, ow = (H - kh) // stride + 1, (W - kw) // stride + 1
    cols = np.empty((N, oh, ow, C, kh, kw))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride].transpose(0, 2, 3, 1)
    return cols.reshape(N * oh * ow, C * kh * kw)
