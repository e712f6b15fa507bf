"""Context-conditioned multiscale image-to-image network and baseline U-Net.

The main network embeds the target image and each (input, output) context
pair to a uniform channel width, then runs 2*stages-1 pairwise-conv-average
blocks over a symmetric down/up scale schedule with additive skips on both
the target and context streams. Each block refines both streams with
residual units (context weights shared across members), concatenates the
target representation pairwise with every context member, mixes with 1x1
convolutions, and averages the mixed updates across the context set, which
makes the output invariant to context ordering and size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ModelConfig:
    channels: int = 16
    stages: int = 4
    in_channels: int = 3
    ctx_pair_channels: int = 4
    out_channels: int = 1
    image_size: int = 32

    def __post_init__(self):
        if self.channels < 2:
            raise ValueError("channels must be >= 2")
        if self.stages < 2:
            raise ValueError("stages must be >= 2")
        if self.image_size % (1 << (self.stages - 1)) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{self.stages - 1}"
            )

    @property
    def n_blocks(self) -> int:
        return 2 * self.stages - 1

    @property
    def scale_schedule(self) -> list[int]:
        down = list(range(self.stages))
        return down + down[-2::-1]


@dataclass
class BaselineConfig:
    width: int = 16
    stages: int = 4
    in_channels: int = 3
    out_channels: int = 1
    image_size: int = 32

    def __post_init__(self):
        if self.image_size % (1 << (self.stages - 1)) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{self.stages - 1}"
            )


@dataclass
class ConvP:
    kernel: Tensor
    bias: Tensor


@dataclass
class ResUnitP:
    conv1: ConvP
    conv2: ConvP


@dataclass
class BlockP:
    res_x: ResUnitP   # target-stream residual unit
    res_c: ResUnitP   # context-stream residual unit, shared across members
    mix_x: ConvP      # 1x1, 2c -> c, target update
    mix_c: ConvP      # 1x1, 2c -> c, per-member context update


@dataclass
class NeuralizerParams:
    embed_x: ConvP
    embed_ctx: ConvP
    blocks: list[BlockP]
    head_res: ResUnitP
    head_out: ConvP
    config: ModelConfig = field(repr=False, default=None)


@dataclass
class BaselineUNetParams:
    stem: ConvP
    encoder: list[ResUnitP]   # one residual unit per stage, coarsest last
    merges: list[ConvP]       # 1x1 2w -> w after each skip concat
    decoder: list[ResUnitP]
    head: ConvP
    config: BaselineConfig = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# parameter shape maps and initialization


def _conv_shapes(name: str, cin: int, cout: int, k: int, shapes: dict) -> None:
    shapes[f"{name}.kernel"] = (cout, cin, k, k)
    shapes[f"{name}.bias"] = (cout,)


def _res_shapes(name: str, c: int, shapes: dict) -> None:
    _conv_shapes(f"{name}.conv1", c, c, 3, shapes)
    _conv_shapes(f"{name}.conv2", c, c, 3, shapes)


def neuralizer_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = cfg.channels
    shapes: dict[str, tuple[int, ...]] = {}
    _conv_shapes("embed_x", cfg.in_channels, c, 1, shapes)
    _conv_shapes("embed_ctx", cfg.ctx_pair_channels, c, 1, shapes)
    for i in range(cfg.n_blocks):
        _res_shapes(f"blocks.{i}.res_x", c, shapes)
        _res_shapes(f"blocks.{i}.res_c", c, shapes)
        _conv_shapes(f"blocks.{i}.mix_x", 2 * c, c, 1, shapes)
        _conv_shapes(f"blocks.{i}.mix_c", 2 * c, c, 1, shapes)
    _res_shapes("head_res", c, shapes)
    _conv_shapes("head_out", c, cfg.out_channels, 1, shapes)
    return shapes


def baseline_param_shapes(cfg: BaselineConfig) -> dict[str, tuple[int, ...]]:
    w = cfg.width
    shapes: dict[str, tuple[int, ...]] = {}
    _conv_shapes("stem", cfg.in_channels, w, 3, shapes)
    for s in range(cfg.stages):
        _res_shapes(f"encoder.{s}", w, shapes)
    for s in range(cfg.stages - 1):
        _conv_shapes(f"merges.{s}", 2 * w, w, 1, shapes)
        _res_shapes(f"decoder.{s}", w, shapes)
    _conv_shapes("head", w, cfg.out_channels, 1, shapes)
    return shapes


def init_tensors(shapes: dict[str, tuple[int, ...]], seed: int,
                 dtype=np.float32) -> dict[str, Tensor]:
    """He-style fan-in scaled uniform init for kernels, zeros for biases."""
    rng = np.random.default_rng(seed)
    out: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            cout, cin, kh, kw = shape
            fan_in = cin * kh * kw
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        out[name] = Tensor(data, requires_grad=True)
    return out


def _conv_p(tensors: dict[str, Tensor], name: str) -> ConvP:
    return ConvP(tensors[f"{name}.kernel"], tensors[f"{name}.bias"])


def _res_p(tensors: dict[str, Tensor], name: str) -> ResUnitP:
    return ResUnitP(_conv_p(tensors, f"{name}.conv1"), _conv_p(tensors, f"{name}.conv2"))


def structure_neuralizer(cfg: ModelConfig, tensors: dict[str, Tensor]) -> NeuralizerParams:
    blocks = [
        BlockP(
            res_x=_res_p(tensors, f"blocks.{i}.res_x"),
            res_c=_res_p(tensors, f"blocks.{i}.res_c"),
            mix_x=_conv_p(tensors, f"blocks.{i}.mix_x"),
            mix_c=_conv_p(tensors, f"blocks.{i}.mix_c"),
        )
        for i in range(cfg.n_blocks)
    ]
    return NeuralizerParams(
        embed_x=_conv_p(tensors, "embed_x"),
        embed_ctx=_conv_p(tensors, "embed_ctx"),
        blocks=blocks,
        head_res=_res_p(tensors, "head_res"),
        head_out=_conv_p(tensors, "head_out"),
        config=cfg,
    )


def structure_baseline(cfg: BaselineConfig, tensors: dict[str, Tensor]) -> BaselineUNetParams:
    return BaselineUNetParams(
        stem=_conv_p(tensors, "stem"),
        encoder=[_res_p(tensors, f"encoder.{s}") for s in range(cfg.stages)],
        merges=[_conv_p(tensors, f"merges.{s}") for s in range(cfg.stages - 1)],
        decoder=[_res_p(tensors, f"decoder.{s}") for s in range(cfg.stages - 1)],
        head=_conv_p(tensors, "head"),
        config=cfg,
    )


def init_params(cfg: ModelConfig, seed: int) -> tuple[NeuralizerParams, dict[str, Tensor]]:
    tensors = init_tensors(neuralizer_param_shapes(cfg), seed)
    return structure_neuralizer(cfg, tensors), tensors


def init_baseline_params(cfg: BaselineConfig, seed: int) -> tuple[BaselineUNetParams, dict[str, Tensor]]:
    tensors = init_tensors(baseline_param_shapes(cfg), seed)
    return structure_baseline(cfg, tensors), tensors


# ---------------------------------------------------------------------------
# forward passes


def _conv(x: Tensor, p: ConvP) -> Tensor:
    pad = (p.kernel.shape[2] - 1) // 2
    return T.conv2d(x, p.kernel, p.bias, pad)


def residual_unit(x: Tensor, w: ResUnitP) -> Tensor:
    """x + conv3(gelu(conv3(x))), with GELU applied after the shortcut add."""
    h = _conv(T.gelu(_conv(x, w.conv1)), w.conv2)
    return T.gelu(T.add(x, h))


def _fold(ctx: Tensor) -> tuple[Tensor, int, int]:
    """[N,B,C,H,W] -> ([N*B,C,H,W], N, B) so shared weights run in one pass."""
    n, b, c, h, w = ctx.shape
    return T.reshape(ctx, (n * b, c, h, w)), n, b


def _unfold(x: Tensor, n: int, b: int) -> Tensor:
    _, c, h, w = x.shape
    return T.reshape(x, (n, b, c, h, w))


def embed(x: Tensor, ctx: Tensor, params: NeuralizerParams) -> tuple[Tensor, Tensor]:
    """1x1 embeddings of the target image and the channel-stacked context pairs."""
    if x.shape[1] != params.embed_x.kernel.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, expected {params.embed_x.kernel.shape[1]}")
    if ctx.data.ndim != 5 or ctx.shape[2] != params.embed_ctx.kernel.shape[1]:
        raise ValueError("context must be [N,B,in+out channels,H,W]")
    r_x = _conv(x, params.embed_x)
    folded, n, b = _fold(ctx)
    r_c = _unfold(_conv(folded, params.embed_ctx), n, b)
    return r_x, r_c


def pairwise_conv_avg_block(r_x: Tensor, r_c: Tensor, blk: BlockP) -> tuple[Tensor, Tensor]:
    """One interaction block between the target stream and the context set.

    Residual units refine each stream (context weights shared across all N
    members), each refined member is concatenated with the refined target,
    and 1x1 mixing convolutions produce updates: the target gets the mean
    update over members, each member gets its own.
    """
    n = r_c.shape[0]
    if n < 1:
        raise ValueError("context set must be non-empty")
    b, c, h, w = r_x.shape
    rx = residual_unit(r_x, blk.res_x)
    folded, n, _ = _fold(r_c)
    rc = residual_unit(folded, blk.res_c)
    rx_tiled = T.reshape(T.expand_first(rx, n), (n * b, c, h, w))
    pair = T.concat_channels(rx_tiled, rc)
    upd_x = T.mean_over_set(_unfold(_conv(pair, blk.mix_x), n, b))
    out_x = T.add(rx, upd_x)
    out_c = T.add(rc, _conv(pair, blk.mix_c))
    return out_x, _unfold(out_c, n, b)


def _resize_ctx(r_c: Tensor, direction: str) -> Tensor:
    folded, n, b = _fold(r_c)
    return _unfold(T.resize2(folded, direction), n, b)


def forward(x: Tensor, ctx: Tensor, params: NeuralizerParams) -> Tensor:
    """Full forward pass: [B,3,H,W] + [N,B,4,H,W] context -> [B,1,H,W] logits.

    Blocks run over the symmetric scale schedule; both streams are resized
    between blocks and encoder outputs are added to the matching decoder
    inputs. The output is linear; losses handle any squashing.
    """
    cfg = params.config
    if ctx.data.ndim != 5 or ctx.shape[0] < 1:
        raise ValueError("context must be non-empty [N,B,C,H,W]")
    h, w = x.shape[2], x.shape[3]
    div = 1 << (cfg.stages - 1)
    if h % div or w % div:
        raise ValueError(f"image size {h}x{w} not divisible by {div}")
    if ctx.shape[3] != h or ctx.shape[4] != w:
        raise ValueError("context images must match the input extents")

    r_x, r_c = embed(x, ctx, params)
    n_blocks = cfg.n_blocks
    n_enc = cfg.stages - 1
    skips: list[tuple[Tensor, Tensor]] = []
    for i, blk in enumerate(params.blocks):
        r_x, r_c = pairwise_conv_avg_block(r_x, r_c, blk)
        if i < n_enc:
            skips.append((r_x, r_c))
            r_x = T.resize2(r_x, "down")
            r_c = _resize_ctx(r_c, "down")
        elif i < n_blocks - 1:
            r_x = T.resize2(r_x, "up")
            r_c = _resize_ctx(r_c, "up")
            skip_x, skip_c = skips.pop()
            r_x = T.add(r_x, skip_x)
            r_c = T.add(r_c, skip_c)
    return _conv(residual_unit(r_x, params.head_res), params.head_out)


def baseline_forward(x: Tensor, params: BaselineUNetParams) -> Tensor:
    """Conventional U-Net with concat skips and one residual unit per stage."""
    cfg = params.config
    div = 1 << (cfg.stages - 1)
    if x.shape[2] % div or x.shape[3] % div:
        raise ValueError(f"image size {x.shape[2]}x{x.shape[3]} not divisible by {div}")
    h = _conv(x, params.stem)
    feats = []
    for s in range(cfg.stages):
        h = residual_unit(h, params.encoder[s])
        if s < cfg.stages - 1:
            feats.append(h)
            h = T.resize2(h, "down")
    for s in range(cfg.stages - 2, -1, -1):
        h = T.resize2(h, "up")
        h = _conv(T.concat_channels(h, feats.pop()), params.merges[s])
        h = residual_unit(h, params.decoder[s])
    return _conv(h, params.head)


# ---------------------------------------------------------------------------
# size and cost accounting


def _flops_conv(area: int, cin: int, cout: int, k: int) -> int:
    return 2 * area * cin * cout * k * k


def count_params_flops(cfg: ModelConfig, n_ctx: int = 1) -> tuple[int, int]:
    """Exact parameter count and a 2*MAC FLOP estimate for one forward pass.

    Context-path convolutions run once per context member, so the estimate
    scales linearly in n_ctx; resizes and activations are not counted.
    """
    shapes = neuralizer_param_shapes(cfg)
    n_params = sum(int(np.prod(s)) for s in shapes.values())

    c = cfg.channels
    s0 = cfg.image_size
    area = {s: (s0 >> s) * (s0 >> s) for s in range(cfg.stages)}
    flops = _flops_conv(area[0], cfg.in_channels, c, 1)
    flops += n_ctx * _flops_conv(area[0], cfg.ctx_pair_channels, c, 1)
    for scale in cfg.scale_schedule:
        a = area[scale]
        res = 2 * _flops_conv(a, c, c, 3)
        flops += res                      # target residual unit
        flops += n_ctx * res              # shared context residual unit, per member
        flops += 2 * n_ctx * _flops_conv(a, 2 * c, c, 1)  # both mixing convs
    flops += 2 * _flops_conv(area[0], c, c, 3)
    flops += _flops_conv(area[0], c, cfg.out_channels, 1)
    return n_params, flops


def count_baseline_params_flops(cfg: BaselineConfig) -> tuple[int, int]:
    shapes = baseline_param_shapes(cfg)
    n_params = sum(int(np.prod(s)) for s in shapes.values())

    w = cfg.width
    s0 = cfg.image_size
    area = {s: (s0 >> s) * (s0 >> s) for s in range(cfg.stages)}
    flops = _flops_conv(area[0], cfg.in_channels, w, 3)
    for s in range(cfg.stages):
        flops += 2 * _flops_conv(area[s], w, w, 3)
    for s in range(cfg.stages - 1):
        flops += _flops_conv(area[s], 2 * w, w, 1)
        flops += 2 * _flops_conv(area[s], w, w, 3)
    flops += _flops_conv(area[0], w, cfg.out_channels, 1)
    return n_params, flops
