"""Differentiable neural-net building blocks on top of the tensor core."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


# -- parameter containers -----------------------------------------------------


@dataclass
class LinearParams:
    """Affine map parameters: out x in weight plus out bias."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        return cls(Tensor(w, requires_grad=True),
                   Tensor(np.zeros(out_dim), requires_grad=True))

    def tensors(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


@dataclass
class BatchNormState:
    """Per-channel batch normalization state.

    `mode` is "train" (batch statistics, running stats updated with
    `momentum`) or "eval" (running statistics). Normalization uses the
    biased 1/N variance estimator.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must be in (0,1)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be >= 0")

    @classmethod
    def init(cls, channels: int, **kwargs):
        return cls(Tensor(np.ones(channels), requires_grad=True),
                   Tensor(np.zeros(channels), requires_grad=True),
                   np.zeros(channels), np.ones(channels), **kwargs)

    @property
    def channels(self) -> int:
        return self.gamma.size

    def tensors(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def state_arrays(self, prefix: str):
        return [(f"{prefix}.running_mean", self.running_mean),
                (f"{prefix}.running_var", self.running_var)]


# -- ops ----------------------------------------------------------------------


def fully_connected(v: Tensor, p: LinearParams) -> Tensor:
    """v[N,in] -> v @ W.T + b, shape [N,out]."""
    if v.shape[-1] != p.weight.shape[1]:
        raise ValueError(f"fully_connected: input dim {v.shape[-1]} != "
                         f"weight in-dim {p.weight.shape[1]}")
    return v @ _transpose2d(p.weight) + p.bias


def _transpose2d(t: Tensor) -> Tensor:
    def bwd(g):
        return [(t, g.T)]

    return Tensor._from_op(t.data.T, (t,), bwd, "transpose")


def conv_1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise channel mix: x[N,C,H,W], weight[C_out,C] -> [N,C_out,H,W]."""
    if x.data.ndim != 4:
        raise ValueError("conv_1x1 expects a rank-4 input")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"conv_1x1: weight in-channels {weight.shape[1]} != "
                         f"input channels {x.shape[1]}")
    out_data = np.einsum("oc,nchw->nohw", weight.data, x.data)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, -1, 1, 1)

    def bwd(g):
        grads = [(x, np.einsum("oc,nohw->nchw", weight.data, g)),
                 (weight, np.einsum("nohw,nchw->oc", g, x.data))]
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2, 3)).reshape(bias.shape)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out_data, parents, bwd, "conv_1x1")


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with padding 1. weight[C_out,C_in,3,3].

    Internal backbone helper; general convolution is deliberately not
    exported beyond this restricted form.
    """
    n, c, h, w = x.shape
    c_out = weight.shape[0]
    if weight.shape[1] != c:
        raise ValueError("conv3x3 channel mismatch")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho = (h + 2 - 3) // stride + 1
    wo = (w + 2 - 3) // stride + 1
    out_data = np.zeros((n, c_out, ho, wo))
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            out_data += np.einsum("oc,nchw->nohw", weight.data[:, :, di, dj], patch)
    out_data += bias.data.reshape(1, -1, 1, 1)

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for di in range(3):
            for dj in range(3):
                patch = xp[:, :, di:di + stride * ho:stride,
                           dj:dj + stride * wo:stride]
                gw[:, :, di, dj] = np.einsum("nohw,nchw->oc", g, patch)
                gxp[:, :, di:di + stride * ho:stride,
                    dj:dj + stride * wo:stride] += np.einsum(
                        "oc,nohw->nchw", weight.data[:, :, di, dj], g)
        return [(x, gxp[:, :, 1:1 + h, 1:1 + w]),
                (weight, gw),
                (bias, g.sum(axis=(0, 2, 3)))]

    return Tensor._from_op(out_data, (x, weight, bias), bwd, "conv3x3")


def _axis_coords(src: int, dst: int):
    """align-corners-off bilinear coordinates for one axis."""
    scale = src / dst
    coords = (np.arange(dst) + 0.5) * scale - 0.5
    coords = np.clip(coords, 0.0, src - 1)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = coords - i0
    return i0, i1, frac


def resize(x: Tensor, target: tuple, method: str = "bilinear") -> Tensor:
    """Resize x[N,C,H,W] to target (H',W').

    Bilinear uses the align-corners-off convention; nearest uses
    floor(dst * scale) source indexing and preserves the value set.
    """
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"resize target must be >= 1, got {target}")
    n, c, h, w = x.shape

    if method == "nearest":
        ri = np.minimum((np.arange(th) * (h / th)).astype(int), h - 1)
        cj = np.minimum((np.arange(tw) * (w / tw)).astype(int), w - 1)
        out_data = x.data[:, :, ri[:, None], cj[None, :]]

        def bwd(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (slice(None), slice(None), ri[:, None], cj[None, :]), g)
            return [(x, gx)]

        return Tensor._from_op(out_data, (x,), bwd, "resize_nearest")

    if method != "bilinear":
        raise ValueError(f"unknown resize method {method!r}")

    i0, i1, fi = _axis_coords(h, th)
    j0, j1, fj = _axis_coords(w, tw)
    wi0, wi1 = (1 - fi)[:, None], fi[:, None]
    wj0, wj1 = (1 - fj)[None, :], fj[None, :]
    taps = [(i0, j0, wi0 * wj0), (i0, j1, wi0 * wj1),
            (i1, j0, wi1 * wj0), (i1, j1, wi1 * wj1)]

    out_data = np.zeros((n, c, th, tw))
    for ri, cj, wt in taps:
        out_data += x.data[:, :, ri[:, None], cj[None, :]] * wt

    def bwd(g):
        gx = np.zeros_like(x.data)
        for ri, cj, wt in taps:
            np.add.at(gx, (slice(None), slice(None), ri[:, None], cj[None, :]),
                      g * wt)
        return [(x, gx)]

    return Tensor._from_op(out_data, (x,), bwd, "resize_bilinear")


def batch_norm(x: Tensor, s: BatchNormState) -> Tensor:
    """Batch normalization over [N] (rank-2 input) or [N,H,W] (rank-4)."""
    if x.data.ndim == 2:
        axes, param_shape = (0,), (1, s.channels)
    elif x.data.ndim == 4:
        axes, param_shape = (0, 2, 3), (1, s.channels, 1, 1)
    else:
        raise ValueError("batch_norm expects rank-2 or rank-4 input")
    if x.shape[1] != s.channels:
        raise ValueError(f"batch_norm: {x.shape[1]} channels vs state "
                         f"with {s.channels}")
    count = int(np.prod([x.shape[a] for a in axes]))
    if count < 1:
        raise ValueError("batch_norm needs at least one element per channel")

    gamma = s.gamma.reshape(param_shape)
    beta = s.beta.reshape(param_shape)

    if s.mode == "train":
        if count < 2:
            raise ValueError("train-mode batch_norm needs >= 2 elements "
                             "per channel for the variance")
        mu = x.mean(axis=axes, keepdims=True)
        xm = x - mu
        var = (xm * xm).mean(axis=axes, keepdims=True)
        y = xm / (var + s.epsilon).sqrt() * gamma + beta
        m = s.momentum
        s.running_mean = (1 - m) * s.running_mean + m * mu.data.reshape(-1)
        s.running_var = (1 - m) * s.running_var + m * var.data.reshape(-1)
        return y
    if s.mode == "eval":
        rm = s.running_mean.reshape(param_shape)
        rstd = np.sqrt(s.running_var + s.epsilon).reshape(param_shape)
        return (x - Tensor(rm)) / Tensor(rstd) * gamma + beta
    raise ValueError(f"unknown batch_norm mode {s.mode!r}")


def softmax_pair(a: Tensor, b: Tensor):
    """Two-way channelwise softmax: sigma(a), sigma(b) summing to 1.

    Stabilized by shifting both logits by their elementwise max; the shift
    is constant w.r.t. the gradient, which softmax makes exact.
    """
    if a.shape != b.shape:
        raise ValueError(f"softmax_pair shape mismatch: {a.shape} vs {b.shape}")
    shift = Tensor(np.maximum(a.data, b.data))
    ea = (a - shift).exp()
    eb = (b - shift).exp()
    denom = ea + eb
    return ea / denom, eb / denom


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis of x[N,K,H,W]."""
    shift = Tensor(x.data.max(axis=1, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=1, keepdims=True)
