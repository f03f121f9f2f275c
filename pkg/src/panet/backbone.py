"""Image-to-embedding backbone.

Layout: a 4x4 non-overlapping patch projection stem, a sequence of stages
of residual blocks, a 2x2 patch-merge projection between stages that
halves the spatial grid while widening channels, then global average
pooling, a linear head, and L2 normalization of the embedding rows.

Checkpoint byte format (little endian throughout):

    magic   4 bytes  b"PANC"
    version u32      1
    cfg_len u32      length of the UTF-8 config JSON that follows
    config  cfg_len bytes
    count   u32      number of parameter records
    record  repeated count times:
        name_len u16, name bytes (UTF-8)
        ndim     u8,  dims ndim x u32
        data     prod(dims) float32 values, row major

Records are written in ``named_parameters`` order and verified by name
and shape on load, so a save/load round trip is bit exact.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import BLOCK_MODES, POOLING_MODES, BlockParams, block_forward
from .errors import DataError, ShapeError, UsageError
from .layers import gap, l2_normalize, linear, trunc_normal
from .tensor import Tensor, _accum, _node, no_grad

CHECKPOINT_MAGIC = b"PANC"
CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    in_channels: int = 3
    img_size: int = 64
    base_channels: int = 16
    depths: tuple[int, ...] = (1, 1, 2, 1)
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    embed_dim: int = 128
    mode: str = "parallel"
    pooling: str = "both"
    expand_ratio: int = 2

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.channel_multipliers = tuple(self.channel_multipliers)

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def stage_sizes(self) -> tuple[int, ...]:
        """Spatial side length of the feature map entering each stage."""
        side = self.img_size // 4
        return tuple(side // (1 << i) for i in range(self.n_stages))

    def validate(self) -> "BackboneConfig":
        if self.n_stages < 1:
            raise UsageError("depths must name at least one stage")
        if len(self.channel_multipliers) != self.n_stages:
            raise UsageError(
                f"channel_multipliers has {len(self.channel_multipliers)} entries "
                f"for {self.n_stages} stages"
            )
        if any(d < 1 for d in self.depths):
            raise UsageError(f"every stage needs at least one block, got depths {self.depths}")
        if self.in_channels < 1 or self.base_channels < 1 or self.embed_dim < 1:
            raise UsageError("channel and embedding sizes must be positive")
        stride = 4 * (1 << (self.n_stages - 1))
        if self.img_size < stride or self.img_size % stride:
            raise UsageError(
                f"img_size {self.img_size} must be a positive multiple of {stride} "
                f"(4x4 stem then {self.n_stages - 1} halvings)"
            )
        for i, w in enumerate(self.stage_widths):
            if w % 2:
                raise UsageError(f"stage {i} width {w} is odd; halves must split evenly")
        if self.mode not in BLOCK_MODES:
            raise UsageError(f"mode must be one of {BLOCK_MODES}, got {self.mode!r}")
        if self.pooling not in POOLING_MODES:
            raise UsageError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.expand_ratio < 1:
            raise UsageError(f"expand_ratio must be positive, got {self.expand_ratio}")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BackboneConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"config JSON does not parse: {e}") from None
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"config JSON has unknown keys: {sorted(unknown)}")
        return cls(**raw).validate()


# ---- patch projection ------------------------------------------------------


@dataclass
class PatchProjParams:
    weight: Tensor  # (patch*patch*C_in, C_out)
    bias: Tensor  # (C_out,)
    patch: int

    @classmethod
    def create(cls, c_in: int, c_out: int, patch: int, rng: np.random.Generator,
               dtype=np.float32, requires_grad: bool = True) -> "PatchProjParams":
        w = trunc_normal(rng, (patch * patch * c_in, c_out), dtype=dtype)
        return cls(
            weight=Tensor(w, requires_grad=requires_grad),
            bias=Tensor(np.zeros(c_out, dtype=dtype), requires_grad=requires_grad),
            patch=patch,
        )


def patch_project(x: Tensor, p: PatchProjParams) -> Tensor:
    """Linearly project each non-overlapping patch to a new channel vector.

    Each patch is flattened channel first, then rows, then columns, and
    mapped through one shared affine layer. Output spatial dims shrink by
    the patch size.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"patch_project: expected (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    k = p.patch
    if h % k or w % k:
        raise ShapeError(f"patch_project: {h}x{w} map not divisible by patch {k}")
    if p.weight.shape[0] != k * k * c:
        raise ShapeError(
            f"patch_project: weight expects {p.weight.shape[0]} patch features, "
            f"input patches have {k * k * c}"
        )
    ho, wo = h // k, w // k
    co = p.weight.shape[1]
    # (N, C, Ho, k, Wo, k) -> (N, Ho, Wo, C, k, k) -> rows of flattened patches
    cols = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 2, 4, 1, 3, 5)
    cols = np.ascontiguousarray(cols).reshape(n, ho * wo, c * k * k)
    out_d = cols @ p.weight.data + p.bias.data
    out_d = out_d.transpose(0, 2, 1).reshape(n, co, ho, wo)
    out = _node(np.ascontiguousarray(out_d), (x, p.weight, p.bias), "patch_project")
    if out.requires_grad:
        def _bw():
            g = out.grad.reshape(n, co, ho * wo).transpose(0, 2, 1)
            _accum(p.bias, g.sum(axis=(0, 1)))
            _accum(p.weight, np.einsum("nlf,nlo->fo", cols, g))
            gcols = (g @ p.weight.data.T).reshape(n, ho, wo, c, k, k)
            gx = gcols.transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, w)
            _accum(x, np.ascontiguousarray(gx))
        out._backward = _bw
    return out


# ---- model -----------------------------------------------------------------


@dataclass
class PANet:
    """The full backbone; construct with :meth:`create` or :func:`load_checkpoint`."""

    config: BackboneConfig
    stem: PatchProjParams
    stages: list[list[BlockParams]]
    downsamples: list[PatchProjParams]
    head_weight: Tensor
    head_bias: Tensor

    @classmethod
    def create(cls, config: BackboneConfig, seed: int = 0, dtype=np.float32) -> "PANet":
        config.validate()
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        widths = config.stage_widths
        stem = PatchProjParams.create(config.in_channels, widths[0], 4, rng, dtype)
        stages = []
        downsamples = []
        for i, depth in enumerate(config.depths):
            stages.append([
                BlockParams.create(widths[i], rng, mode=config.mode, pooling=config.pooling,
                                   expand_ratio=config.expand_ratio, dtype=dtype)
                for _ in range(depth)
            ])
            if i + 1 < config.n_stages:
                downsamples.append(PatchProjParams.create(widths[i], widths[i + 1], 2, rng, dtype))
        head_w = Tensor(trunc_normal(rng, (widths[-1], config.embed_dim), dtype=dtype),
                        requires_grad=True)
        head_b = Tensor(np.zeros(config.embed_dim, dtype=dtype), requires_grad=True)
        return cls(config, stem, stages, downsamples, head_w, head_b)

    def named_parameters(self):
        """Stable (name, tensor) enumeration; checkpoints rely on this order."""
        yield "stem.weight", self.stem.weight
        yield "stem.bias", self.stem.bias
        for i, blocks in enumerate(self.stages):
            for j, b in enumerate(blocks):
                yield from b.named_parameters(prefix=f"stages.{i}.blocks.{j}.")
            if i < len(self.downsamples):
                yield f"stages.{i}.downsample.weight", self.downsamples[i].weight
                yield f"stages.{i}.downsample.bias", self.downsamples[i].bias
        yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def forward(self, x: Tensor) -> Tensor:
        """Images (N, in_channels, img, img) to unit-norm embeddings (N, embed_dim)."""
        cfg = self.config
        want = (cfg.in_channels, cfg.img_size, cfg.img_size)
        if x.data.ndim != 4 or x.shape[1:] != want:
            raise ShapeError(f"forward: expected (N, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")
        h = patch_project(x, self.stem)
        for i, blocks in enumerate(self.stages):
            for b in blocks:
                h = block_forward(h, b)
            if i < len(self.downsamples):
                h = patch_project(h, self.downsamples[i])
        h = gap(h)
        h = h.reshape((h.shape[0], h.shape[1]))
        h = linear(h, self.head_weight, self.head_bias)
        return l2_normalize(h)

    def embed(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Inference helper: numpy images in, numpy embeddings out, no graph."""
        chunks = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                xb = Tensor(np.asarray(images[start:start + batch_size], dtype=np.float32))
                chunks.append(self.forward(xb).data)
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.config.embed_dim),
                                                                      dtype=np.float32)


# ---- checkpoints -----------------------------------------------------------


def save_checkpoint(model: PANet, path: str) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = model.config.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    records = list(model.named_parameters())
    buf.write(struct.pack("<I", len(records)))
    for name, t in records:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", t.data.ndim))
        for d in t.data.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: str) -> PANet:
    with open(path, "rb") as f:
        blob = f.read()
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise DataError(f"checkpoint truncated at byte {pos} while reading {what}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != CHECKPOINT_MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    config = BackboneConfig.from_json(bytes(take(cfg_len, "config")).decode("utf-8"))
    model = PANet.create(config, seed=0)
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    expected = list(model.named_parameters())
    if count != len(expected):
        raise DataError(f"checkpoint stores {count} parameters, model has {len(expected)}")
    for name, tensor in expected:
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        got = bytes(take(name_len, "name")).decode("utf-8")
        if got != name:
            raise DataError(f"checkpoint parameter {got!r} where {name!r} was expected")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = tuple(struct.unpack("<I", take(4, "dim"))[0] for _ in range(ndim))
        if dims != tensor.data.shape:
            raise DataError(f"parameter {name!r} has shape {dims}, model wants {tensor.data.shape}")
        n_items = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = np.frombuffer(take(4 * n_items, f"data of {name}"), dtype="<f4")
        tensor.data = data.reshape(dims).astype(np.float32).copy()
    if pos != len(view):
        raise DataError(f"checkpoint has {len(view) - pos} trailing bytes after byte {pos}")
    return model


# ---- parameter and MAC accounting ------------------------------------------


def _block_counts(c: int, side: int, expand_ratio: int) -> tuple[int, int]:
    r = expand_ratio
    params = (
        2 * c  # pam norm
        + (c * 2 * c + 2 * c)  # pam expand
        + (2 * c * 9 + 2 * c)  # depthwise 3x3
        + (c * c + c)  # pam project
        + 2 * c  # fmm norm
        + (c * 2 * r * c + 2 * r * c)  # fmm expand
        + (r * c * c + c)  # fmm project
        + 2 * c  # alpha, beta
    )
    hw = side * side
    macs = (
        2 * c * c * hw  # pam expand
        + 2 * c * 9 * hw  # depthwise
        + c * c * hw  # pam project
        + 2 * r * c * c * hw  # fmm expand
        + r * c * c * hw  # fmm project
    )
    return params, macs


def count_breakdown(config: BackboneConfig) -> list[tuple[str, int, int]]:
    """Rows of (component, params, MACs) for one image through the model.

    Convolutions and patch projections count multiply-accumulates as
    C_out * (C_in / groups) * k^2 * H_out * W_out; the head counts in*out.
    Normalization, pooling, and elementwise work contribute no MACs.
    """
    config.validate()
    widths = config.stage_widths
    sizes = config.stage_sizes
    rows: list[tuple[str, int, int]] = []
    stem_pos = sizes[0] * sizes[0]
    rows.append((
        "stem",
        16 * config.in_channels * widths[0] + widths[0],
        stem_pos * 16 * config.in_channels * widths[0],
    ))
    for i, depth in enumerate(config.depths):
        for j in range(depth):
            p, m = _block_counts(widths[i], sizes[i], config.expand_ratio)
            rows.append((f"stages.{i}.blocks.{j}", p, m))
        if i + 1 < config.n_stages:
            out_pos = sizes[i + 1] * sizes[i + 1]
            rows.append((
                f"stages.{i}.downsample",
                4 * widths[i] * widths[i + 1] + widths[i + 1],
                out_pos * 4 * widths[i] * widths[i + 1],
            ))
    rows.append(("head", widths[-1] * config.embed_dim + config.embed_dim,
                 widths[-1] * config.embed_dim))
    return rows


def count_params(config: BackboneConfig) -> int:
    return sum(p for _, p, _ in count_breakdown(config))


def count_macs(config: BackboneConfig) -> int:
    return sum(m for _, _, m in count_breakdown(config))
