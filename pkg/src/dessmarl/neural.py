"""
Small dense networks in plain numpy: forward pass, analytic backprop, Adam,
and a binary checkpoint format.

All parameters of a network live in one flat float64 vector ``theta``;
per-layer weights ``W[l]`` (shape ``(out, in)``) and biases ``b[l]`` are
views into it. This keeps optimizer and soft-update arithmetic to a handful
of vector operations.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Optional, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh")
MAGIC = b"DMRL1"


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    # derivative expressed through the pre-activation z or the output a
    if name == "relu":
        return (z > 0).astype(float)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


class MLP:
    """Fully connected feed-forward network.

    Parameters
    ----------
    layer_dims : sequence of int
        ``[in, hidden..., out]``.
    hidden_activation, output_activation : str
        One of ``identity``, ``relu``, ``tanh``.
    rng : numpy Generator, optional
        If given, weights are drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``
        (the last layer from ``U(-final_scale, final_scale)`` when
        ``final_scale`` is set) and biases start at zero. Without ``rng`` all
        parameters are zero.
    """

    def __init__(self, layer_dims: Sequence[int], hidden_activation: str = "relu",
                 output_activation: str = "identity", rng: Optional[np.random.Generator] = None,
                 final_scale: Optional[float] = None):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"invalid layer dims {layer_dims}")
        for a in (hidden_activation, output_activation):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.layer_dims = tuple(dims)
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.theta = np.zeros(sum(o * i + o for i, o in zip(dims[:-1], dims[1:])))
        self._bind()
        if rng is not None:
            for l, W in enumerate(self.W):
                last = l == len(self.W) - 1
                lim = final_scale if (last and final_scale is not None) else 1.0 / np.sqrt(W.shape[1])
                W[...] = rng.uniform(-lim, lim, W.shape)

    def _bind(self):
        self.W, self.b = [], []
        k = 0
        for i, o in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            self.W.append(self.theta[k:k + o * i].reshape(o, i))
            k += o * i
            self.b.append(self.theta[k:k + o])
            k += o

    @property
    def n_layers(self) -> int:
        return len(self.W)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def activation(self, l: int) -> str:
        return self.output_activation if l == self.n_layers - 1 else self.hidden_activation

    def copy(self) -> "MLP":
        net = MLP.__new__(MLP)
        net.layer_dims = self.layer_dims
        net.hidden_activation = self.hidden_activation
        net.output_activation = self.output_activation
        net.theta = self.theta.copy()
        net._bind()
        return net

    def set_theta(self, theta: np.ndarray) -> None:
        if theta.shape != self.theta.shape:
            raise ValueError("parameter vector has the wrong size")
        self.theta[...] = theta

    def same_shape(self, other: "MLP") -> bool:
        return (self.layer_dims == other.layer_dims and self.hidden_activation == other.hidden_activation
                and self.output_activation == other.output_activation)

    def forward(self, x, cache: bool = False):
        """Evaluate on one input vector or a batch of row vectors.

        With ``cache=True`` also returns the per-layer values needed by
        :meth:`backward`.
        """
        a = np.asarray(x, dtype=float)
        if a.shape[-1] != self.in_dim:
            raise ValueError(f"input has {a.shape[-1]} features, network expects {self.in_dim}")
        trace = [a]
        for l in range(self.n_layers):
            z = a @ self.W[l].T + self.b[l]
            a = _act(self.activation(l), z)
            if cache:
                trace.append((z, a))
        return (a, trace) if cache else a

    __call__ = forward

    def backward(self, trace, upstream) -> tuple[np.ndarray, np.ndarray]:
        """
        Backpropagate ``upstream`` (dL/d output) through a cached forward pass.

        For batched inputs the parameter gradient is summed over the batch.

        Returns
        -------
        grad : ndarray
            Gradient w.r.t. ``theta``, same layout.
        input_grad : ndarray
            Gradient w.r.t. the input, same shape as the input.
        """
        g = np.asarray(upstream, dtype=float)
        if g.shape[-1] != self.out_dim:
            raise ValueError(f"upstream gradient has {g.shape[-1]} entries, network outputs {self.out_dim}")
        grad = np.empty_like(self.theta)
        gW, gb = [], []
        k = 0
        for i, o in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            gW.append(grad[k:k + o * i].reshape(o, i))
            k += o * i
            gb.append(grad[k:k + o])
            k += o
        x = trace[0]
        for l in range(self.n_layers - 1, -1, -1):
            z, a = trace[l + 1]
            dz = g * _act_grad(self.activation(l), z, a)
            a_prev = trace[l][1] if l > 0 else x
            if dz.ndim == 1:
                gW[l][...] = np.outer(dz, a_prev)
                gb[l][...] = dz
            else:
                gW[l][...] = dz.T @ a_prev
                gb[l][...] = dz.sum(axis=0)
            g = dz @ self.W[l]
        return grad, g


def forward(params: MLP, x):
    return params.forward(x)


def backward(params: MLP, x, upstream):
    """Gradients of ``upstream . f(x)`` w.r.t. parameters and input."""
    _, trace = params.forward(x, cache=True)
    return params.backward(trace, upstream)


class Adam:
    """Adaptive-moment optimizer over a flat parameter vector."""

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: MLP, grad: np.ndarray) -> None:
        """Descend along ``grad`` in place."""
        if grad.shape != params.theta.shape or self.m.shape != grad.shape:
            raise ValueError("gradient shape does not match parameters")
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient")
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        params.theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        return self.m, self.v


def optimizer_step(opt: Adam, params: MLP, grad: np.ndarray) -> None:
    opt.step(params, grad)


# --- checkpoint format -------------------------------------------------------
#
#   magic        5 bytes   b"DMRL1"
#   count        u32       number of networks
#   per network (headers, in order):
#     ndims      u32
#     dims       ndims x u32
#     hidden     u8        index into ACTIVATIONS
#     output     u8        index into ACTIVATIONS
#   per network (payload, same order):
#     for each layer: W (out x in, row-major) then b (out), float64
#
# All integers and floats are little-endian.

def write_networks(fh: BinaryIO, nets: Sequence[MLP]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(nets)))
    for net in nets:
        fh.write(struct.pack("<I", len(net.layer_dims)))
        fh.write(struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims))
        fh.write(struct.pack("<BB", ACTIVATIONS.index(net.hidden_activation),
                             ACTIVATIONS.index(net.output_activation)))
    for net in nets:
        fh.write(net.theta.astype("<f8").tobytes())


def read_networks(fh: BinaryIO) -> list[MLP]:
    if fh.read(len(MAGIC)) != MAGIC:
        raise ValueError("not a DMRL1 checkpoint")

    def unpack(fmt):
        size = struct.calcsize(fmt)
        buf = fh.read(size)
        if len(buf) != size:
            raise ValueError("truncated checkpoint")
        return struct.unpack(fmt, buf)

    (count,) = unpack("<I")
    headers = []
    for _ in range(count):
        (ndims,) = unpack("<I")
        dims = unpack(f"<{ndims}I")
        h, o = unpack("<BB")
        headers.append((dims, ACTIVATIONS[h], ACTIVATIONS[o]))
    nets = []
    for dims, h, o in headers:
        net = MLP(dims, h, o)
        buf = fh.read(net.theta.size * 8)
        if len(buf) != net.theta.size * 8:
            raise ValueError("truncated checkpoint")
        net.theta[...] = np.frombuffer(buf, dtype="<f8")
        nets.append(net)
    if fh.read(1):
        raise ValueError("trailing bytes after checkpoint payload")
    return nets


def save_networks(path, nets: Sequence[MLP]) -> None:
    with open(path, "wb") as fh:
        write_networks(fh, nets)


def load_networks(path) -> list[MLP]:
    with open(path, "rb") as fh:
        return read_networks(fh)
