"""Differentiable layers: layer norm, depthwise/pointwise convolution,
global pooling, channel split/concat, linear, and small plumbing ops.

Every function takes and returns :class:`~panet.tensor.Tensor` values and
registers a hand-derived backward rule on the result. Convolution is
cross-correlation (no kernel flip). Layer normalization acts over the
channel axis at each spatial position, the transformer convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, _accum, _node


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples redrawn until they land within two deviations."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(8):
        mask = np.abs(out) > 2.0 * std
        if not mask.any():
            break
        out[mask] = rng.normal(0.0, std, size=int(mask.sum()))
    return np.clip(out, -2.0 * std, 2.0 * std).astype(dtype)


def _require_4d(op: str, x: Tensor) -> tuple[int, int, int, int]:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected a (N,C,H,W) feature map, got shape {x.shape}")
    return x.shape  # type: ignore[return-value]


# ---- layer normalization ---------------------------------------------------


@dataclass
class LayerNormParams:
    gain: Tensor  # (C,)
    bias: Tensor  # (C,)
    eps: float = 1e-6

    @classmethod
    def create(cls, channels: int, dtype=np.float32, requires_grad: bool = True) -> "LayerNormParams":
        return cls(
            gain=Tensor(np.ones(channels, dtype=dtype), requires_grad=requires_grad),
            bias=Tensor(np.zeros(channels, dtype=dtype), requires_grad=requires_grad),
        )


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    """Normalize the channel vector at each (n,h,w) position, then affine."""
    n, c, h, w = _require_4d("layer_norm", x)
    if p.gain.shape != (c,) or p.bias.shape != (c,):
        raise ShapeError(
            f"layer_norm: params sized for {p.gain.shape[0]} channels, input has {c}"
        )
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(p.eps))
    xhat = xc * inv
    gain = p.gain.data[None, :, None, None]
    out = _node(xhat * gain + p.bias.data[None, :, None, None], (x, p.gain, p.bias), "layer_norm")
    if out.requires_grad:
        def _bw():
            g = out.grad
            _accum(p.gain, (g * xhat).sum(axis=(0, 2, 3)))
            _accum(p.bias, g.sum(axis=(0, 2, 3)))
            gh = g * gain
            # standard layer-norm input gradient over the normalized axis
            gx = inv * (
                gh
                - gh.mean(axis=1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=1, keepdims=True)
            )
            _accum(x, gx)
        out._backward = _bw
    return out


# ---- convolutions ----------------------------------------------------------


@dataclass
class ConvParams:
    weight: Tensor  # (C_out, C_in // groups, k, k)
    bias: Tensor | None
    groups: int = 1
    padding: int = 0

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def depthwise(cls, channels: int, rng: np.random.Generator, dtype=np.float32,
                  requires_grad: bool = True) -> "ConvParams":
        w = trunc_normal(rng, (channels, 1, 3, 3), dtype=dtype)
        return cls(
            weight=Tensor(w, requires_grad=requires_grad),
            bias=Tensor(np.zeros(channels, dtype=dtype), requires_grad=requires_grad),
            groups=channels,
            padding=1,
        )

    @classmethod
    def pointwise(cls, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32,
                  requires_grad: bool = True) -> "ConvParams":
        w = trunc_normal(rng, (c_out, c_in, 1, 1), dtype=dtype)
        return cls(
            weight=Tensor(w, requires_grad=requires_grad),
            bias=Tensor(np.zeros(c_out, dtype=dtype), requires_grad=requires_grad),
            groups=1,
            padding=0,
        )


def conv_dw3x3(x: Tensor, p: ConvParams) -> Tensor:
    """Per-channel 3x3 cross-correlation with zero padding 1."""
    n, c, h, w = _require_4d("conv_dw3x3", x)
    cw = p.weight.shape
    if not (p.groups == cw[0] == c and cw[1] == 1 and cw[2] == cw[3] == 3 and p.padding == 1):
        raise ShapeError(
            f"conv_dw3x3: params not in depthwise 3x3 configuration for {c} channels "
            f"(weight {cw}, groups {p.groups}, padding {p.padding})"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out_d = np.zeros_like(x.data)
    wd = p.weight.data
    for ki in range(3):
        for kj in range(3):
            out_d += xp[:, :, ki:ki + h, kj:kj + w] * wd[None, :, 0, ki, kj, None, None]
    if p.bias is not None:
        out_d += p.bias.data[None, :, None, None]
    parents = (x, p.weight) + ((p.bias,) if p.bias is not None else ())
    out = _node(out_d, parents, "conv_dw3x3")
    if out.requires_grad:
        def _bw():
            g = out.grad
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(wd)
            for ki in range(3):
                for kj in range(3):
                    gxp[:, :, ki:ki + h, kj:kj + w] += g * wd[None, :, 0, ki, kj, None, None]
                    gw[:, 0, ki, kj] = (g * xp[:, :, ki:ki + h, kj:kj + w]).sum(axis=(0, 2, 3))
            _accum(x, gxp[:, :, 1:h + 1, 1:w + 1])
            _accum(p.weight, gw)
            if p.bias is not None:
                _accum(p.bias, g.sum(axis=(0, 2, 3)))
        out._backward = _bw
    return out


def conv_pw(x: Tensor, p: ConvParams) -> Tensor:
    """1x1 convolution: an independent linear map across channels per position."""
    n, c, h, w = _require_4d("conv_pw", x)
    cw = p.weight.shape
    if not (p.groups == 1 and cw[2] == cw[3] == 1 and p.padding == 0):
        raise ShapeError(f"conv_pw: params not in pointwise configuration (weight {cw})")
    if cw[1] != c:
        raise ShapeError(f"conv_pw: weight expects {cw[1]} input channels, input has {c}")
    wmat = p.weight.data[:, :, 0, 0]  # (C_out, C_in)
    out_d = np.einsum("oc,nchw->nohw", wmat, x.data)
    if p.bias is not None:
        out_d += p.bias.data[None, :, None, None]
    parents = (x, p.weight) + ((p.bias,) if p.bias is not None else ())
    out = _node(out_d, parents, "conv_pw")
    if out.requires_grad:
        def _bw():
            g = out.grad
            _accum(x, np.einsum("oc,nohw->nchw", wmat, g))
            gw = np.einsum("nohw,nchw->oc", g, x.data)
            _accum(p.weight, gw[:, :, None, None])
            if p.bias is not None:
                _accum(p.bias, g.sum(axis=(0, 2, 3)))
        out._backward = _bw
    return out


# ---- global pooling --------------------------------------------------------


def gap(x: Tensor) -> Tensor:
    """Global average pooling over H and W, output (N,C,1,1)."""
    n, c, h, w = _require_4d("gap", x)
    out = _node(x.data.mean(axis=(2, 3), keepdims=True), (x,), "gap")
    if out.requires_grad:
        def _bw():
            _accum(x, np.broadcast_to(out.grad / (h * w), x.data.shape))
        out._backward = _bw
    return out


def gmp(x: Tensor) -> Tensor:
    """Global max pooling; ties route the gradient to the first maximum."""
    n, c, h, w = _require_4d("gmp", x)
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)  # argmax returns the first maximal position
    out_d = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(n, c, 1, 1)
    out = _node(out_d, (x,), "gmp")
    if out.requires_grad:
        def _bw():
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[:, :, None], out.grad.reshape(n, c, 1), axis=2)
            _accum(x, gflat.reshape(x.data.shape))
        out._backward = _bw
    return out


def scale_spatial(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each (n,c) map of x by the pooled scalar s[n,c,0,0]."""
    n, c, h, w = _require_4d("scale_spatial", x)
    if s.shape != (n, c, 1, 1):
        raise ShapeError(f"scale_spatial: scales {s.shape} do not match maps ({n},{c},1,1)")
    out = _node(x.data * s.data, (x, s), "scale_spatial")
    if out.requires_grad:
        def _bw():
            _accum(x, out.grad * s.data)
            _accum(s, (out.grad * x.data).sum(axis=(2, 3), keepdims=True))
        out._backward = _bw
    return out


# ---- channel split / concat ------------------------------------------------


def split_channels(x: Tensor) -> tuple[Tensor, Tensor]:
    """First and second half of the channel axis, in order."""
    n, c, h, w = _require_4d("split_channels", x)
    if c % 2:
        raise ShapeError(f"split_channels: channel count {c} is odd")
    half = c // 2
    a = _node(x.data[:, :half].copy(), (x,), "split0")
    b = _node(x.data[:, half:].copy(), (x,), "split1")
    if a.requires_grad:
        def _bwa():
            g = np.zeros_like(x.data)
            g[:, :half] = a.grad
            _accum(x, g)
        a._backward = _bwa
    if b.requires_grad:
        def _bwb():
            g = np.zeros_like(x.data)
            g[:, half:] = b.grad
            _accum(x, g)
        b._backward = _bwb
    return a, b


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Join two maps along the channel axis; inverts :func:`split_channels`."""
    sa, sb = a.shape, b.shape
    if len(sa) != 4 or len(sb) != 4 or sa[0] != sb[0] or sa[2:] != sb[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {sa} and {sb}")
    ca = sa[1]
    out = _node(np.concatenate([a.data, b.data], axis=1), (a, b), "concat")
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad[:, :ca])
            _accum(b, out.grad[:, ca:])
        out._backward = _bw
    return out


# ---- linear head and embedding utilities -----------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of row vectors: (N, in) @ (in, out) + (out,)."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear: expected (N, features), got {x.shape}")
    if weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape} do not match weight {weight.shape}")
    out_d = x.data @ weight.data
    if bias is not None:
        out_d = out_d + bias.data[None, :]
    parents = (x, weight) + ((bias,) if bias is not None else ())
    out = _node(out_d, parents, "linear")
    if out.requires_grad:
        def _bw():
            g = out.grad
            _accum(x, g @ weight.data.T)
            _accum(weight, x.data.T @ g)
            if bias is not None:
                _accum(bias, g.sum(axis=0))
        out._backward = _bw
    return out


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize: expected (N, features), got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, x.data.dtype.type(eps))
    y = x.data / norm
    out = _node(y, (x,), "l2_normalize")
    if out.requires_grad:
        def _bw():
            g = out.grad
            _accum(x, (g - y * (g * y).sum(axis=1, keepdims=True)) / norm)
        out._backward = _bw
    return out
