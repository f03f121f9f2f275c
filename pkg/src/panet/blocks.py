"""Transformer-style block built from two gated convolutional branches.

Each block mixes a pixel-attention branch (PAM) and a feed-forward style
mixing branch (FMM). Both start with layer normalization and a pointwise
expansion, gate the hidden features by multiplying channel halves (PSA),
and project back to the block width. PAM additionally rescales each half
of its gated features by a pooled per-channel statistic (PCA) before the
projection, giving it global spatial context.

The branches attach to the residual stream through learnable per-channel
scales alpha and beta, both zero at initialization, so a fresh block is
exactly the identity map. In parallel mode both branches read the block
input; in serial mode FMM reads the PAM-updated stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .layers import (
    ConvParams,
    LayerNormParams,
    concat_channels,
    conv_dw3x3,
    conv_pw,
    gap,
    gmp,
    layer_norm,
    scale_spatial,
    split_channels,
)
from .tensor import Tensor, ew_add, ew_mul

POOLING_MODES = ("both", "gap_only", "gmp_only")
BLOCK_MODES = ("parallel", "serial")


@dataclass
class BlockParams:
    channels: int
    mode: str
    pooling: str
    pam_norm: LayerNormParams
    pam_expand: ConvParams  # C -> 2C
    pam_dw: ConvParams  # depthwise on 2C
    pam_project: ConvParams  # C -> C
    fmm_norm: LayerNormParams
    fmm_expand: ConvParams  # C -> 2rC
    fmm_project: ConvParams  # rC -> C
    alpha: Tensor  # (C,1,1) residual scale for PAM
    beta: Tensor  # (C,1,1) residual scale for FMM

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator, mode: str = "parallel",
               pooling: str = "both", expand_ratio: int = 2, dtype=np.float32,
               requires_grad: bool = True) -> "BlockParams":
        if channels % 2:
            raise ShapeError(f"block width must be even to split into halves, got {channels}")
        if mode not in BLOCK_MODES:
            raise ValueError(f"unknown block mode {mode!r}, expected one of {BLOCK_MODES}")
        if pooling not in POOLING_MODES:
            raise ValueError(f"unknown pooling mode {pooling!r}, expected one of {POOLING_MODES}")
        zeros = lambda: Tensor(np.zeros((channels, 1, 1), dtype=dtype), requires_grad=requires_grad)
        return cls(
            channels=channels,
            mode=mode,
            pooling=pooling,
            pam_norm=LayerNormParams.create(channels, dtype, requires_grad),
            pam_expand=ConvParams.pointwise(channels, 2 * channels, rng, dtype, requires_grad),
            pam_dw=ConvParams.depthwise(2 * channels, rng, dtype, requires_grad),
            pam_project=ConvParams.pointwise(channels, channels, rng, dtype, requires_grad),
            fmm_norm=LayerNormParams.create(channels, dtype, requires_grad),
            fmm_expand=ConvParams.pointwise(channels, 2 * expand_ratio * channels, rng, dtype,
                                            requires_grad),
            fmm_project=ConvParams.pointwise(expand_ratio * channels, channels, rng, dtype,
                                             requires_grad),
            alpha=zeros(),
            beta=zeros(),
        )

    def named_parameters(self, prefix: str = ""):
        """Yield (name, tensor) pairs in a fixed, documented order."""
        yield from (
            (f"{prefix}pam_norm.gain", self.pam_norm.gain),
            (f"{prefix}pam_norm.bias", self.pam_norm.bias),
            (f"{prefix}pam_expand.weight", self.pam_expand.weight),
            (f"{prefix}pam_expand.bias", self.pam_expand.bias),
            (f"{prefix}pam_dw.weight", self.pam_dw.weight),
            (f"{prefix}pam_dw.bias", self.pam_dw.bias),
            (f"{prefix}pam_project.weight", self.pam_project.weight),
            (f"{prefix}pam_project.bias", self.pam_project.bias),
            (f"{prefix}fmm_norm.gain", self.fmm_norm.gain),
            (f"{prefix}fmm_norm.bias", self.fmm_norm.bias),
            (f"{prefix}fmm_expand.weight", self.fmm_expand.weight),
            (f"{prefix}fmm_expand.bias", self.fmm_expand.bias),
            (f"{prefix}fmm_project.weight", self.fmm_project.weight),
            (f"{prefix}fmm_project.bias", self.fmm_project.bias),
            (f"{prefix}alpha", self.alpha),
            (f"{prefix}beta", self.beta),
        )


def psa(x: Tensor) -> Tensor:
    """Gate by splitting channels in half and multiplying the halves."""
    a, b = split_channels(x)
    return ew_mul(a, b)


def pca(x: Tensor, pooling: str = "both") -> Tensor:
    """Rescale each channel half by a pooled statistic of its own maps.

    With pooling "both" the first half uses its global max and the second
    its global average; "gmp_only" and "gap_only" apply one statistic to
    both halves.
    """
    a, b = split_channels(x)
    if pooling == "both":
        sa, sb = gmp(a), gap(b)
    elif pooling == "gap_only":
        sa, sb = gap(a), gap(b)
    elif pooling == "gmp_only":
        sa, sb = gmp(a), gmp(b)
    else:
        raise ValueError(f"unknown pooling mode {pooling!r}, expected one of {POOLING_MODES}")
    return concat_channels(scale_spatial(a, sa), scale_spatial(b, sb))


def pam(x: Tensor, p: BlockParams) -> Tensor:
    """Pixel attention branch: expand, mix spatially, gate, pool-rescale, project."""
    h = layer_norm(x, p.pam_norm)
    h = conv_pw(h, p.pam_expand)
    h = conv_dw3x3(h, p.pam_dw)
    h = psa(h)
    h = pca(h, p.pooling)
    return conv_pw(h, p.pam_project)


def fmm(x: Tensor, p: BlockParams) -> Tensor:
    """Mixing branch: wide pointwise expansion, gate, project back."""
    h = layer_norm(x, p.fmm_norm)
    h = conv_pw(h, p.fmm_expand)
    h = psa(h)
    return conv_pw(h, p.fmm_project)


def parallel_block(x: Tensor, p: BlockParams) -> Tensor:
    """Both branches read the block input: x + alpha*PAM(x) + beta*FMM(x)."""
    out = ew_add(x, ew_mul(pam(x, p), p.alpha))
    return ew_add(out, ew_mul(fmm(x, p), p.beta))


def serial_block(x: Tensor, p: BlockParams) -> Tensor:
    """FMM reads the PAM-updated stream: y = x + alpha*PAM(x); y + beta*FMM(y)."""
    y = ew_add(x, ew_mul(pam(x, p), p.alpha))
    return ew_add(y, ew_mul(fmm(y, p), p.beta))


def block_forward(x: Tensor, p: BlockParams) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(
            f"block_forward: expected (N,{p.channels},H,W) input, got {x.shape}"
        )
    if p.mode == "parallel":
        return parallel_block(x, p)
    if p.mode == "serial":
        return serial_block(x, p)
    raise ValueError(f"unknown block mode {p.mode!r}, expected one of {BLOCK_MODES}")
