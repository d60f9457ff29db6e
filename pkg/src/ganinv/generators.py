"""Frozen desk-scale generators in three families, plus latent plumbing.

The families mirror the structures an inversion encoder has to cope with:

* ``style``: per-layer style modulation from a mapped latent w, a learned
  4x4 constant input that can be overridden (z_c), and additive
  per-channel noise (z_n). Two style taps per block.
* ``progressive``: one flat latent z projected to 4x4, plain conv trunk.
* ``class_conditional``: z plus a label embedding c driving conditional
  batch normalization.

All generators are frozen at construction and deterministic given a
seed. The module also owns the on-disk checkpoint adapter (a manifest
plus one array per parameter) shared with encoder checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ContractViolation, InvalidInputError

FAMILIES = ("style", "progressive", "class_conditional")

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_PARAMS = "params.npz"
CHECKPOINT_FORMAT = "ganinv-checkpoint"
CHECKPOINT_VERSION = 1

# Latent widths that are fixed by the family rather than by scale.
PROGRESSIVE_DZ = 512
CLASS_DZ = 128
CLASS_DC = 256


def channel_schedule_for(resolution: int, base: int | None = None, cap: int = 512) -> list:
    """Per-block channel counts, fine to coarse: min(cap, base * 2^k).

    The full-scale rule uses base = 16384 / resolution so that the
    deepest blocks saturate at 512 channels regardless of resolution.
    """
    blocks = int(math.log2(resolution)) - 1
    if base is None:
        base = 16384 // resolution
    return [min(cap, base * (2**k)) for k in range(blocks)]


@dataclass
class GeneratorSpec:
    """Structural description shared by a generator and its mirror encoder.

    channel_schedule is stored in encoder order (finest block first);
    the generator walks it in reverse. d_w is the style width and also
    the channel count of the 4x4 constant input z_c. n_layers is the
    number of style taps: two per block.
    """

    family: str
    resolution: int
    channel_schedule: list
    d_w: int = 512
    d_z: int = 512
    n_classes: int = 0
    d_c: int = CLASS_DC

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        r = self.resolution
        if r < 16 or (r & (r - 1)) != 0:
            raise ConfigurationError(f"resolution must be a power of two >= 16, got {r}")
        if len(self.channel_schedule) != self.n_blocks:
            raise ConfigurationError(
                f"channel_schedule has {len(self.channel_schedule)} entries, "
                f"resolution {r} needs {self.n_blocks}"
            )
        if self.family == "class_conditional" and self.n_classes < 2:
            raise ConfigurationError("class_conditional specs need n_classes >= 2")

    @property
    def n_blocks(self) -> int:
        return int(math.log2(self.resolution)) - 1

    @property
    def n_layers(self) -> int:
        """Style taps: two per block, e.g. 18 at resolution 1024."""
        return 2 * self.n_blocks

    @classmethod
    def full_scale(cls, family: str, resolution: int, n_classes: int = 1000) -> "GeneratorSpec":
        """The published structure at its native scale (512-channel cap)."""
        kwargs = dict(
            family=family,
            resolution=resolution,
            channel_schedule=channel_schedule_for(resolution),
        )
        if family == "progressive":
            kwargs["d_z"] = PROGRESSIVE_DZ
        elif family == "class_conditional":
            kwargs.update(d_z=CLASS_DZ, n_classes=n_classes)
        return cls(**kwargs)

    @classmethod
    def desk(cls, family: str, resolution: int = 32, base: int = 16, cap: int = 128,
             d_w: int = 64, n_classes: int = 10) -> "GeneratorSpec":
        """CPU-friendly analogue: same shape rules, smaller channel cap."""
        kwargs = dict(
            family=family,
            resolution=resolution,
            channel_schedule=channel_schedule_for(resolution, base=base, cap=cap),
            d_w=d_w,
            d_z=d_w,
        )
        if family == "progressive":
            kwargs["d_z"] = PROGRESSIVE_DZ
        elif family == "class_conditional":
            kwargs.update(d_z=CLASS_DZ, n_classes=n_classes)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        return cls(**data)


@dataclass
class LatentBundle:
    """Every latent a family can consume or an encoder can emit.

    style: w (n, n_layers, d_w), optional z_c (n, d_w, 4, 4), optional
    z_n as a list of per-layer (n, channels) tensors. progressive: z
    (n, 512). class_conditional: z (n, 128) and c (n, 256), where c is
    the learned embedding of a one-hot label vector.
    """

    w: Optional[torch.Tensor] = None
    z_c: Optional[torch.Tensor] = None
    z_n: Optional[list] = None
    z: Optional[torch.Tensor] = None
    c: Optional[torch.Tensor] = None


# ---------------------------------------------------------------------------
# Building blocks


def _init_normal(shape, gen: torch.Generator, std: float = 1.0) -> torch.Tensor:
    return torch.randn(shape, generator=gen) * std


class _Conv(nn.Module):
    """Plain conv with seeded He-style init; generators have no runtime scaling."""

    def __init__(self, c_in, c_out, kernel, gen, stride=1, padding=0, bias=True):
        super().__init__()
        fan_in = c_in * kernel * kernel
        self.weight = nn.Parameter(_init_normal((c_out, c_in, kernel, kernel), gen,
                                                 std=(2.0 / fan_in) ** 0.5))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class _Linear(nn.Module):
    def __init__(self, d_in, d_out, gen, bias=True, std_scale=1.0):
        super().__init__()
        self.weight = nn.Parameter(_init_normal((d_out, d_in), gen,
                                                 std=std_scale / d_in**0.5))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class MappingNetwork(nn.Module):
    """Toy M: normalize z, run a small FC stack, broadcast to every layer.

    All layer slices of the returned w are equal; per-layer divergence
    only appears later through editing or direct w optimization.
    """

    def __init__(self, d_z: int, d_w: int, n_layers: int, gen: torch.Generator, depth: int = 3):
        super().__init__()
        dims = [d_z] + [d_w] * depth
        self.layers = nn.ModuleList(
            _Linear(dims[i], dims[i + 1], gen) for i in range(depth)
        )
        self.n_layers = n_layers
        self.requires_grad_(False)
        self.eval()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.layers[0].weight.shape[1]:
            raise ContractViolation(
                f"mapping expects (n, {self.layers[0].weight.shape[1]}) latents, "
                f"got {tuple(z.shape)}"
            )
        if not bool(torch.isfinite(z).all()):
            raise InvalidInputError("mapping: z must be finite")
        x = z / torch.sqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.leaky_relu(x, 0.2)
        return x[:, None, :].expand(-1, self.n_layers, -1).contiguous()


class _AdaIN(nn.Module):
    """Instance norm re-statisticized by a per-layer affine of w."""

    def __init__(self, channels: int, d_w: int, gen: torch.Generator):
        super().__init__()
        self.affine = _Linear(d_w, 2 * channels, gen, std_scale=0.2)
        self.channels = channels

    def forward(self, x, w_slice):
        x = F.instance_norm(x)
        style = self.affine(w_slice)
        scale = style[:, : self.channels, None, None] + 1.0
        shift = style[:, self.channels :, None, None]
        return scale * x + shift


class _StyleLayer(nn.Module):
    """conv -> AdaIN -> additive per-channel noise -> leaky ReLU.

    Noise goes in after the style modulation: it is a per-channel offset,
    spatially constant, so the instance norm inside AdaIN would cancel it
    exactly if it were added first.
    """

    def __init__(self, c_in, c_out, d_w, gen):
        super().__init__()
        self.conv = _Conv(c_in, c_out, 3, gen, padding=1, bias=False)
        self.noise_weight = nn.Parameter(_init_normal((c_out,), gen, std=0.1))
        self.adain = _AdaIN(c_out, d_w, gen)
        self.c_out = c_out

    def forward(self, x, w_slice, noise):
        x = self.conv(x)
        x = self.adain(x, w_slice)
        if noise is not None:
            if noise.shape != (x.shape[0], self.c_out):
                raise ContractViolation(
                    f"noise slice shape {tuple(noise.shape)} does not match "
                    f"(n, {self.c_out})"
                )
            x = x + (self.noise_weight[None, :] * noise)[:, :, None, None]
        return F.leaky_relu(x, 0.2)


class _CondBatchNorm(nn.Module):
    """Batch norm whose affine comes from the class embedding."""

    def __init__(self, channels: int, d_c: int, gen: torch.Generator):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels, affine=False)
        self.affine = _Linear(d_c, 2 * channels, gen, std_scale=0.2)
        self.channels = channels

    def forward(self, x, c):
        x = self.bn(x)
        style = self.affine(c)
        return (style[:, : self.channels, None, None] + 1.0) * x + style[:, self.channels :, None, None]


# ---------------------------------------------------------------------------
# Generator families


class StyleGenerator(nn.Module):
    """Constant-input trunk with two styled conv layers per block."""

    def __init__(self, spec: GeneratorSpec, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.spec = spec
        widths = list(reversed(spec.channel_schedule))   # coarse to fine
        self.constant = nn.Parameter(_init_normal((1, spec.d_w, 4, 4), gen))
        layers = []
        c_prev = spec.d_w
        for c_out in widths:
            layers.append(_StyleLayer(c_prev, c_out, spec.d_w, gen))
            layers.append(_StyleLayer(c_out, c_out, spec.d_w, gen))
            c_prev = c_out
        self.layers = nn.ModuleList(layers)
        self.to_rgb = _Conv(widths[-1], 3, 1, gen)
        self.requires_grad_(False)
        self.eval()

    @property
    def layer_channels(self) -> list:
        """Channel count at each style tap, coarse to fine."""
        return [layer.c_out for layer in self.layers]

    def forward(self, w: torch.Tensor, z_c: Optional[torch.Tensor] = None,
                z_n: Optional[list] = None) -> torch.Tensor:
        n = w.shape[0]
        if w.shape != (n, self.spec.n_layers, self.spec.d_w):
            raise ContractViolation(
                f"w must be (n, {self.spec.n_layers}, {self.spec.d_w}), got {tuple(w.shape)}"
            )
        if z_c is None:
            x = self.constant.expand(n, -1, -1, -1)
        else:
            if z_c.shape != (n, self.spec.d_w, 4, 4):
                raise ContractViolation(
                    f"z_c must be (n, {self.spec.d_w}, 4, 4), got {tuple(z_c.shape)}"
                )
            x = z_c
        if z_n is not None and len(z_n) != len(self.layers):
            raise ContractViolation(
                f"z_n must have {len(self.layers)} per-layer entries, got {len(z_n)}"
            )
        for i, layer in enumerate(self.layers):
            if i > 0 and i % 2 == 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            noise = None if z_n is None else z_n[i]
            x = layer(x, w[:, i], noise)
        return torch.tanh(self.to_rgb(x))


class ProgressiveGenerator(nn.Module):
    """Flat-latent trunk: z projects to 4x4, then plain convs upward."""

    def __init__(self, spec: GeneratorSpec, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.spec = spec
        widths = list(reversed(spec.channel_schedule))
        self.input = _Linear(spec.d_z, widths[0] * 16, gen)
        convs = []
        c_prev = widths[0]
        for c_out in widths:
            convs.append(_Conv(c_prev, c_out, 3, gen, padding=1))
            convs.append(_Conv(c_out, c_out, 3, gen, padding=1))
            c_prev = c_out
        self.convs = nn.ModuleList(convs)
        self.to_rgb = _Conv(widths[-1], 3, 1, gen)
        self.requires_grad_(False)
        self.eval()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.spec.d_z:
            raise ContractViolation(f"z must be (n, {self.spec.d_z}), got {tuple(z.shape)}")
        x = self.input(z).reshape(z.shape[0], -1, 4, 4)
        for i, conv in enumerate(self.convs):
            if i > 0 and i % 2 == 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.leaky_relu(conv(x), 0.2)
        return torch.tanh(self.to_rgb(x))


class ClassConditionalGenerator(nn.Module):
    """Progressive trunk with conditional batch norm after every conv.

    The label enters as c = embed(one_hot(label)); embed_labels exposes
    the embedding so callers and the encoder share one definition of c.
    """

    def __init__(self, spec: GeneratorSpec, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.spec = spec
        widths = list(reversed(spec.channel_schedule))
        self.embedding = _Linear(spec.n_classes, spec.d_c, gen, bias=False)
        self.input = _Linear(spec.d_z, widths[0] * 16, gen)
        convs, norms = [], []
        c_prev = widths[0]
        for c_out in widths:
            for c_in in (c_prev, c_out):
                convs.append(_Conv(c_in, c_out, 3, gen, padding=1))
                norms.append(_CondBatchNorm(c_out, spec.d_c, gen))
            c_prev = c_out
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.to_rgb = _Conv(widths[-1], 3, 1, gen)
        self.requires_grad_(False)
        self.eval()

    def embed_labels(self, labels: torch.Tensor) -> torch.Tensor:
        """(n,) integer labels -> (n, d_c) embedding of their one-hot vectors."""
        if labels.dim() != 1:
            raise ContractViolation("labels must be a 1-D integer tensor")
        if int(labels.min()) < 0 or int(labels.max()) >= self.spec.n_classes:
            raise ContractViolation(
                f"labels must lie in [0, {self.spec.n_classes}), got "
                f"[{int(labels.min())}, {int(labels.max())}]"
            )
        one_hot = F.one_hot(labels.long(), self.spec.n_classes).to(self.embedding.weight.dtype)
        return self.embedding(one_hot)

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.spec.d_z:
            raise ContractViolation(f"z must be (n, {self.spec.d_z}), got {tuple(z.shape)}")
        if c.dim() != 2 or c.shape != (z.shape[0], self.spec.d_c):
            raise ContractViolation(f"c must be (n, {self.spec.d_c}), got {tuple(c.shape)}")
        x = self.input(z).reshape(z.shape[0], -1, 4, 4)
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            if i > 0 and i % 2 == 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.leaky_relu(norm(conv(x), c), 0.2)
        return torch.tanh(self.to_rgb(x))


_FAMILY_CLASSES = {
    "style": StyleGenerator,
    "progressive": ProgressiveGenerator,
    "class_conditional": ClassConditionalGenerator,
}


def build_toy_generator(spec: GeneratorSpec, seed: int = 0):
    """Construct a frozen generator with weights deterministic in the seed."""
    cls = _FAMILY_CLASSES.get(spec.family)
    if cls is None:
        raise ConfigurationError(f"unsupported family {spec.family!r}")
    return cls(spec, seed)


def build_mapping(spec: GeneratorSpec, seed: int = 0) -> MappingNetwork:
    """The frozen mapping network M paired with a style generator."""
    if spec.family != "style":
        raise ConfigurationError("mapping networks exist only for the style family")
    gen = torch.Generator().manual_seed(seed + 1)
    return MappingNetwork(spec.d_z, spec.d_w, spec.n_layers, gen)


def sample_latents(spec: GeneratorSpec, n: int, seed: int = 0,
                   mapping: Optional[MappingNetwork] = None,
                   generator=None, with_noise: bool = False) -> LatentBundle:
    """Draw a LatentBundle matching the spec from seeded standard normals.

    For the style family a mapping network is required to produce w; for
    class_conditional the generator is required for its label embedding.
    """
    g = torch.Generator().manual_seed(seed)
    if spec.family == "style":
        if mapping is None:
            raise ConfigurationError("sampling style latents requires the mapping network")
        z = torch.randn((n, spec.d_z), generator=g)
        w = mapping(z)
        z_n = None
        if with_noise:
            widths = list(reversed(spec.channel_schedule))
            per_layer = [c for c in widths for _ in range(2)]
            z_n = [torch.randn((n, c), generator=g) for c in per_layer]
        return LatentBundle(w=w, z_n=z_n)
    if spec.family == "progressive":
        return LatentBundle(z=torch.randn((n, spec.d_z), generator=g))
    if generator is None:
        raise ConfigurationError("sampling class-conditional latents requires the generator")
    z = torch.randn((n, spec.d_z), generator=g)
    labels = torch.randint(0, spec.n_classes, (n,), generator=g)
    return LatentBundle(z=z, c=generator.embed_labels(labels))


def synthesize(gen, latents: LatentBundle):
    """Run a generator on a LatentBundle; returns (image, z_c actually used).

    For the style family an omitted z_c defaults to the generator's
    learned constant and the constant actually used is echoed back so a
    trainer can pair it with the encoder's z_c estimate. Other families
    echo None.
    """
    spec = gen.spec
    if spec.family == "style":
        if latents.w is None:
            raise ContractViolation("style synthesis needs latents.w")
        z_c = latents.z_c
        x = gen(latents.w, z_c=z_c, z_n=latents.z_n)
        used = z_c if z_c is not None else gen.constant.expand(latents.w.shape[0], -1, -1, -1)
        return x, used
    if spec.family == "progressive":
        if latents.z is None:
            raise ContractViolation("progressive synthesis needs latents.z")
        return gen(latents.z), None
    if latents.z is None or latents.c is None:
        raise ContractViolation("class-conditional synthesis needs latents.z and latents.c")
    return gen(latents.z, latents.c), None


# ---------------------------------------------------------------------------
# Checkpoint adapter (shared with encoder checkpoints)


def parameter_checksum(module: nn.Module) -> str:
    """Stable digest over all parameters and buffers, for frozen-ness checks."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _atomic_write_bytes(path: str, data: bytes):
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, kind: str, spec: GeneratorSpec, module: nn.Module,
                    extra: dict | None = None):
    """Write a checkpoint directory: manifest.json + params.npz, atomically."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "family": spec.family,
        "spec": spec.to_dict(),
    }
    if extra:
        manifest.update(extra)
    arrays = {name: t.detach().cpu().numpy() for name, t in module.state_dict().items()}
    import io

    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write_bytes(os.path.join(path, CHECKPOINT_PARAMS), buf.getvalue())
    _atomic_write_bytes(
        os.path.join(path, CHECKPOINT_MANIFEST),
        json.dumps(manifest, indent=2, sort_keys=True).encode(),
    )


def load_checkpoint(path: str):
    """Read back (manifest, {name: tensor}); I/O problems raise OSError."""
    manifest_path = os.path.join(path, CHECKPOINT_MANIFEST)
    params_path = os.path.join(path, CHECKPOINT_PARAMS)
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise OSError(f"corrupt checkpoint manifest {manifest_path}: {e}") from e
    try:
        with np.load(params_path) as z:
            tensors = {name: torch.from_numpy(z[name].copy()) for name in z.files}
    except (ValueError, KeyError, EOFError) as e:
        raise OSError(f"corrupt checkpoint parameters {params_path}: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise OSError(f"{manifest_path} is not a {CHECKPOINT_FORMAT} manifest")
    return manifest, tensors


def save_generator(gen, path: str):
    save_checkpoint(path, "generator", gen.spec, gen)


def load_pretrained(path: str, family: str):
    """Rebuild a frozen generator from a checkpoint directory.

    The stored family must match the requested one; the returned module
    honours the same forward signature as the toy generators.
    """
    if family not in FAMILIES:
        raise ConfigurationError(f"unknown family {family!r}, expected one of {FAMILIES}")
    manifest, tensors = load_checkpoint(path)
    if manifest.get("kind") != "generator":
        raise ConfigurationError(f"{path} holds a {manifest.get('kind')!r} checkpoint, not a generator")
    stored = manifest.get("family")
    if stored != family:
        raise ConfigurationError(
            f"checkpoint family is {stored!r} but {family!r} was requested"
        )
    spec = GeneratorSpec.from_dict(manifest["spec"])
    gen = build_toy_generator(spec, seed=0)
    gen.load_state_dict(tensors)
    gen.requires_grad_(False)
    gen.eval()
    return gen
