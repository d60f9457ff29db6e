"""Adaptive inversion encoders mirroring the three generator families.

One residual block design serves all families: two normalized
convolution stages plus a projected bypass, downsampling between blocks.
Family adaptations: the style encoder taps a per-stage FC into the
layer-wise style vector w' and adds learnable per-channel noise offsets
(z_n'); the progressive encoder strips styles and noise and flattens to
one latent; the class-conditional encoder swaps instance norm for
(conditionally driven) batch norm and emits a label embedding c' ahead
of z'.

All convolution and FC weights are stored unscaled and multiplied by an
equalized-rate factor at forward time, with Xavier-normal raw
initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ContractViolation
from .generators import (
    GeneratorSpec,
    LatentBundle,
    load_checkpoint,
    save_checkpoint,
)

NORMALIZATIONS = ("instance", "conditional_batch")


def equalized_scale(fan_in: int, gain: float | None = None,
                    fan_out: int | None = None) -> float:
    """Runtime weight multiplier gain / sqrt(fan_in).

    The default gain sqrt((fan_in + fan_out) / 2) exactly cancels the
    Xavier-normal raw standard deviation, leaving an effective per-weight
    std of 1/sqrt(fan_in) so unit-variance inputs stay near unit variance.
    """
    if gain is None:
        if fan_out is None:
            raise ContractViolation("equalized_scale needs fan_out when gain is omitted")
        gain = math.sqrt((fan_in + fan_out) / 2.0)
    return gain / math.sqrt(fan_in)


def _xavier_raw(shape, fan_in: int, fan_out: int, gen: torch.Generator) -> torch.Tensor:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return torch.randn(shape, generator=gen) * std


class EqualizedConv2d(nn.Module):
    """Conv whose stored weight is rescaled by gain/sqrt(fan_in) per forward."""

    def __init__(self, c_in: int, c_out: int, kernel: int, gen: torch.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 gain: float | None = None):
        super().__init__()
        fan_in = c_in * kernel * kernel
        fan_out = c_out * kernel * kernel
        self.weight = nn.Parameter(_xavier_raw((c_out, c_in, kernel, kernel), fan_in, fan_out, gen))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        self.scale = equalized_scale(fan_in, gain, fan_out)
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias,
                        stride=self.stride, padding=self.padding)


class EqualizedLinear(nn.Module):
    def __init__(self, d_in: int, d_out: int, gen: torch.Generator,
                 bias: bool = True, gain: float | None = None):
        super().__init__()
        self.weight = nn.Parameter(_xavier_raw((d_out, d_in), d_in, d_out, gen))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        self.scale = equalized_scale(d_in, gain, d_out)

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


@dataclass
class EncoderSpec:
    """Structural description of an encoder, mirroring a GeneratorSpec.

    channel_schedule runs fine to coarse (block k convs are
    (c_k, c_k) then (c_k, c_{k+1}), the deepest block keeping its width).
    fused_scale folds each block's trailing 2x pooling into the second
    conv's stride, the variant training strategy 2 switches on.
    """

    family: str
    resolution: int
    channel_schedule: list
    d_w: int = 512
    d_z: int = 512
    n_classes: int = 0
    d_c: int = 256
    normalization: str = "instance"
    fused_scale: bool = False

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ConfigurationError(
                f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}"
            )
        # Delegate the shared structural rules to the generator-side checks.
        GeneratorSpec(
            family=self.family, resolution=self.resolution,
            channel_schedule=self.channel_schedule, d_w=self.d_w,
            d_z=self.d_z, n_classes=self.n_classes, d_c=self.d_c,
        )
        if self.family == "class_conditional" and self.normalization != "conditional_batch":
            raise ConfigurationError("class_conditional encoders require conditional_batch norm")

    @property
    def n_blocks(self) -> int:
        return int(math.log2(self.resolution)) - 1

    @property
    def n_layers(self) -> int:
        return 2 * self.n_blocks

    @classmethod
    def from_generator(cls, gspec: GeneratorSpec, fused_scale: bool = False) -> "EncoderSpec":
        norm = "conditional_batch" if gspec.family == "class_conditional" else "instance"
        return cls(
            family=gspec.family, resolution=gspec.resolution,
            channel_schedule=list(gspec.channel_schedule), d_w=gspec.d_w,
            d_z=gspec.d_z, n_classes=gspec.n_classes, d_c=gspec.d_c,
            normalization=norm, fused_scale=fused_scale,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderSpec":
        return cls(**data)


@dataclass
class EncoderBlockSpec:
    """One residual block: two conv stages plus a projected bypass."""

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    has_style_fc: bool = True
    has_noise: bool = True
    normalization: str = "instance"
    residual: bool = True
    downsample: bool = True


def plan_blocks(spec: EncoderSpec) -> list:
    """Block specs implied by the channel schedule, for builds and audits."""
    sched = spec.channel_schedule
    nb = spec.n_blocks
    styled = spec.family == "style"
    blocks = []
    for k in range(nb):
        out = sched[k + 1] if k + 1 < nb else sched[nb - 1]
        blocks.append(EncoderBlockSpec(
            in_channels=sched[k], out_channels=out,
            has_style_fc=styled, has_noise=styled,
            normalization=spec.normalization,
            downsample=k < nb - 1,
        ))
    return blocks


def conv_plan(spec: EncoderSpec) -> list:
    """Per-block [(in, out), (in, out)] conv channel pairs, fine to coarse."""
    return [
        [(b.in_channels, b.in_channels), (b.in_channels, b.out_channels)]
        for b in plan_blocks(spec)
    ]


class _Stage(nn.Module):
    """norm -> equalized conv (bias-free) -> +noise offset -> leaky ReLU."""

    def __init__(self, c_in: int, c_out: int, block: EncoderBlockSpec,
                 gen: torch.Generator, d_c: int, stride: int):
        super().__init__()
        self.kind = block.normalization
        if self.kind == "conditional_batch":
            self.bn = nn.BatchNorm2d(c_in, affine=False)
            self.gamma0 = nn.Parameter(torch.zeros(c_in))
            self.beta0 = nn.Parameter(torch.zeros(c_in))
            self.cond = EqualizedLinear(d_c, 2 * c_in, gen)
        self.conv = EqualizedConv2d(c_in, c_out, block.kernel, gen,
                                    stride=stride, padding=block.padding, bias=False)
        self.noise = nn.Parameter(torch.zeros(c_out)) if block.has_noise else None
        self.c_in = c_in

    def forward(self, x, cond: Optional[torch.Tensor] = None):
        if self.kind == "instance":
            x = F.instance_norm(x)
        else:
            x = self.bn(x)
            gamma = 1.0 + self.gamma0[None, :, None, None]
            beta = self.beta0[None, :, None, None]
            if cond is not None:
                extra = self.cond(cond)
                gamma = gamma + extra[:, : self.c_in, None, None]
                beta = beta + extra[:, self.c_in :, None, None]
            x = gamma * x + beta
        x = self.conv(x)
        if self.noise is not None:
            x = x + self.noise[None, :, None, None]
        return F.leaky_relu(x, 0.2)


class EncoderBlock(nn.Module):
    def __init__(self, block: EncoderBlockSpec, gen: torch.Generator,
                 d_c: int, fused_scale: bool):
        super().__init__()
        self.fused = fused_scale and block.downsample
        self.downsample = block.downsample
        self.stage1 = _Stage(block.in_channels, block.in_channels, block, gen, d_c, stride=1)
        self.stage2 = _Stage(block.in_channels, block.out_channels, block, gen, d_c,
                             stride=2 if self.fused else 1)
        if block.in_channels != block.out_channels:
            self.proj = EqualizedConv2d(block.in_channels, block.out_channels, 1, gen, bias=False)
        else:
            self.proj = None

    def forward(self, x, cond: Optional[torch.Tensor] = None):
        h1 = self.stage1(x, cond)
        h2 = self.stage2(h1, cond)
        bypass = self.proj(x) if self.proj is not None else x
        if self.downsample:
            bypass = F.avg_pool2d(bypass, 2)
            if not self.fused:
                h2_out = F.avg_pool2d(h2, 2)
            else:
                h2_out = h2
        else:
            h2_out = h2
        return h2_out + bypass, h1, h2


class Encoder(nn.Module):
    """Image-to-latent network adapted to one generator family.

    forward returns a LatentBundle: (w', z_c') for style, z' for
    progressive, (z', c') for class_conditional. Style slices assemble in
    generator layer order, coarse to fine: encoder block k feeds the rows
    of the mirrored generator block, and the deepest block's second slice
    comes from an FC over the flattened 4x4 features rather than a pooled
    tap.
    """

    def __init__(self, spec: EncoderSpec, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.spec = spec
        blocks = plan_blocks(spec)
        self.input_conv = EqualizedConv2d(3, spec.channel_schedule[0], 1, gen)
        self.blocks = nn.ModuleList(
            EncoderBlock(b, gen, spec.d_c, spec.fused_scale) for b in blocks
        )
        c_last = spec.channel_schedule[-1]
        flat = c_last * 16
        if spec.family == "style":
            fcs1, fcs2 = [], []
            for k, b in enumerate(blocks):
                fcs1.append(EqualizedLinear(b.in_channels, spec.d_w, gen))
                # Deepest block's second tap is the flatten-based FC below.
                fcs2.append(
                    EqualizedLinear(b.out_channels, spec.d_w, gen)
                    if k < len(blocks) - 1 else nn.Identity()
                )
            self.style_fcs1 = nn.ModuleList(fcs1)
            self.style_fcs2 = nn.ModuleList(fcs2)
            self.tail = EqualizedLinear(flat, spec.d_w, gen)
            self.zc_head = EqualizedConv2d(c_last, spec.d_w, 1, gen)
        elif spec.family == "progressive":
            self.tail = EqualizedLinear(flat, spec.d_z, gen)
        else:
            self.embedding = EqualizedLinear(spec.n_classes, spec.d_c, gen, bias=False)
            self.tail_c = EqualizedLinear(flat, spec.d_c, gen)
            self.tail_z = EqualizedLinear(spec.d_c, spec.d_z, gen)

    def noise_parameters(self) -> list:
        """The learnable per-channel noise offsets (z_n'), style family only."""
        return [s.noise for blk in self.blocks for s in (blk.stage1, blk.stage2)
                if s.noise is not None]

    def _check_input(self, x: torch.Tensor):
        r = self.spec.resolution
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != r or x.shape[3] != r:
            raise ContractViolation(
                f"encoder expects (n, 3, {r}, {r}) images, got {tuple(x.shape)}"
            )

    def forward(self, x: torch.Tensor,
                class_hint: Optional[torch.Tensor] = None) -> LatentBundle:
        self._check_input(x)
        spec = self.spec
        cond = None
        if spec.family == "class_conditional" and class_hint is not None:
            one_hot = F.one_hot(class_hint.long(), spec.n_classes).to(x.dtype)
            cond = self.embedding(one_hot)
        h = self.input_conv(x)
        taps = []
        for blk in self.blocks:
            h, h1, h2 = blk(h, cond)
            taps.append((h1, h2))
        if spec.family == "style":
            nb = spec.n_blocks
            rows = [None] * spec.n_layers
            for k, (h1, h2) in enumerate(taps):
                base = 2 * (nb - 1 - k)
                rows[base + 1] = self.style_fcs1[k](h1.mean(dim=(2, 3)))
                if k < nb - 1:
                    rows[base] = self.style_fcs2[k](h2.mean(dim=(2, 3)))
            rows[0] = self.tail(h.flatten(1))
            w = torch.stack(rows, dim=1)
            z_c = self.zc_head(h)
            return LatentBundle(w=w, z_c=z_c)
        if spec.family == "progressive":
            return LatentBundle(z=self.tail(h.flatten(1)))
        c = self.tail_c(h.flatten(1))
        z = self.tail_z(c)
        return LatentBundle(z=z, c=c)


def build_encoder(spec: EncoderSpec, seed: int = 0) -> Encoder:
    """Construct a trainable encoder; weights deterministic in the seed."""
    return Encoder(spec, seed)


def encode(enc: Encoder, x: torch.Tensor,
           class_hint: Optional[torch.Tensor] = None) -> LatentBundle:
    """Map images in [-1, 1] at the spec resolution to a latent bundle."""
    return enc(x, class_hint=class_hint)


def save_encoder(enc: Encoder, path: str):
    save_checkpoint(path, "encoder", enc.spec, enc,
                    extra={"encoder_spec": enc.spec.to_dict()})


def load_encoder(path: str) -> Encoder:
    manifest, tensors = load_checkpoint(path)
    if manifest.get("kind") != "encoder":
        raise ConfigurationError(
            f"{path} holds a {manifest.get('kind')!r} checkpoint, not an encoder"
        )
    spec = EncoderSpec.from_dict(manifest["encoder_spec"])
    enc = Encoder(spec, seed=0)
    enc.load_state_dict(tensors)
    return enc
