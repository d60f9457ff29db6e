"""Real-image inversion and latent editing against a frozen generator.

Three inversion modes, cheapest first:

* invert_batch: one encoder forward pass.
* finetune_encoder: per-image fine-tuning of a disposable encoder copy,
  the strongest mode for single images.
* optimize_w_direct: gradient descent on the latent itself, the classic
  optimization baseline (encoder only used for initialization).

Editing moves a style latent along a stored direction: w' = w + alpha*d,
optionally restricted to a subset of layers.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .attention import AttentionConfig, make_views, views_like
from .encoder import Encoder
from .errors import ConfigurationError, ContractViolation, InvalidInputError
from .evalharness import pair_metrics
from .generators import LatentBundle
from .similarity import LossWeights, MetricOptions, image_loss, latent_loss, total_loss
from .training import reconstruct


@dataclass
class InversionResult:
    """Latents, reconstruction and per-image metrics of one inversion run."""

    latents: LatentBundle
    reconstruction: torch.Tensor
    metrics: dict
    steps_used: int


@dataclass
class EditRequest:
    """A latent edit: direction d ((n_layers, d_w) or (d_w,)), strength
    alpha, and an optional subset of style layers to move."""

    direction: torch.Tensor
    alpha: float
    layer_mask: Optional[list] = None

    def __post_init__(self):
        self.direction = torch.as_tensor(self.direction, dtype=torch.get_default_dtype())
        if not bool(torch.isfinite(self.direction).all()):
            raise InvalidInputError("edit direction must be finite")
        if self.direction.dim() not in (1, 2):
            raise ContractViolation(
                f"direction must be (d_w,) or (n_layers, d_w), got {tuple(self.direction.shape)}"
            )


def _check_resolution(gen, images: torch.Tensor):
    r = gen.spec.resolution
    if images.dim() != 4 or images.shape[1] != 3 or images.shape[2:] != (r, r):
        raise ContractViolation(
            f"images must be preprocessed to (n, 3, {r}, {r}) in [-1, 1], "
            f"got {tuple(images.shape)}"
        )


def _detach_bundle(b: LatentBundle) -> LatentBundle:
    def d(t):
        return None if t is None else t.detach().clone()

    return LatentBundle(
        w=d(b.w), z_c=d(b.z_c),
        z_n=None if b.z_n is None else [d(t) for t in b.z_n],
        z=d(b.z), c=d(b.c),
    )


def invert_batch(enc: Encoder, gen, images: torch.Tensor, backbone=None,
                 class_hint: Optional[torch.Tensor] = None) -> InversionResult:
    """Single-pass inversion: encode, reconstruct, score.

    Deterministic given frozen weights; metrics cover PSNR, SSIM, MSE,
    LPIPS and CS per image.
    """
    _check_resolution(gen, images)
    enc.eval()
    with torch.no_grad():
        bundle = enc(images, class_hint=class_hint)
        recon = reconstruct(gen, bundle)
    metrics = pair_metrics(images, recon, backbone)
    return InversionResult(latents=_detach_bundle(bundle), reconstruction=recon,
                           metrics=metrics, steps_used=0)


def _family_latent(bundle: LatentBundle, family: str) -> torch.Tensor:
    return bundle.w if family == "style" else bundle.z


def _loss_setup(backbone, weights):
    if weights is None:
        weights = LossWeights() if backbone is not None else LossWeights(gamma=0.0)
    return weights


def finetune_encoder(enc: Encoder, gen, images: torch.Tensor, steps: int,
                     attention_config: Optional[AttentionConfig] = None,
                     weights: Optional[LossWeights] = None,
                     options: Optional[MetricOptions] = None,
                     backbone=None,
                     learning_rate: float = 0.0015,
                     betas: tuple = (0.0, 0.99),
                     class_hint: Optional[torch.Tensor] = None,
                     divergence_factor: float = 10.0,
                     divergence_patience: int = 100) -> InversionResult:
    """Fine-tune a copy of the encoder on exactly these images.

    The caller's encoder is deep-copied and never mutated. Because the
    true latent of a real image is unknown, the latent-loss term compares
    the encoding against a learnable surrogate target optimized jointly,
    acting as a light consistency regularizer at epsilon weight. The
    best-so-far result (by total loss) is returned, so steps=0 degrades
    exactly to invert_batch; a run whose loss exceeds 10x the initial
    value for divergence_patience consecutive steps aborts early with
    the best result found.
    """
    _check_resolution(gen, images)
    attention_config = attention_config or AttentionConfig()
    weights = _loss_setup(backbone, weights)
    options = options or MetricOptions()
    work = copy.deepcopy(enc)
    work.train()
    family = gen.spec.family

    views_y = make_views(images, attention_config, backbone)
    with torch.no_grad():
        bundle0 = work(images, class_hint=class_hint)
    surrogate = torch.nn.Parameter(_family_latent(bundle0, family).detach().clone())

    def step_loss(bundle):
        x_hat = reconstruct(gen, bundle)
        views_hat = views_like(x_hat, views_y, backbone, attention_config)
        image_part = image_loss(views_y, views_hat, weights, backbone, options)
        latent_part = latent_loss(surrogate, _family_latent(bundle, family), weights, options)
        return total_loss(image_part, latent_part, weights), x_hat

    with torch.no_grad():
        loss0, x_hat0 = step_loss(bundle0)
    initial = float(loss0.total)
    best = (initial, _detach_bundle(bundle0), x_hat0.detach())

    opt = torch.optim.Adam(list(work.parameters()) + [surrogate],
                           lr=learning_rate, betas=betas)
    streak = 0
    done = 0
    for _ in range(steps):
        bundle = work(images, class_hint=class_hint)
        loss, x_hat = step_loss(bundle)
        value = float(loss.total.detach())
        if value < best[0]:
            best = (value, _detach_bundle(bundle), x_hat.detach())
        # A non-finite loss is divergence too; NaN compares false with >.
        diverged = not math.isfinite(value) or value > divergence_factor * initial
        streak = streak + 1 if diverged else 0
        if streak >= divergence_patience:
            break
        opt.zero_grad()
        loss.total.backward()
        opt.step()
        done += 1
    metrics = pair_metrics(images, best[2], backbone)
    return InversionResult(latents=best[1], reconstruction=best[2],
                           metrics=metrics, steps_used=done)


def optimize_w_direct(gen, images: torch.Tensor, init=None, steps: int = 1000,
                      enc: Optional[Encoder] = None, mapping=None,
                      attention_config: Optional[AttentionConfig] = None,
                      weights: Optional[LossWeights] = None,
                      options: Optional[MetricOptions] = None,
                      backbone=None,
                      learning_rate: float = 0.01,
                      betas: tuple = (0.9, 0.999),
                      lr_schedule: str = "cosine",
                      optimize_zc: bool = False,
                      class_hint: Optional[torch.Tensor] = None,
                      seed: int = 0,
                      divergence_factor: float = 10.0,
                      divergence_patience: int = 100) -> InversionResult:
    """Optimize the latent itself against the image loss; no encoder updates.

    Initialization order: explicit ``init`` (a latent tensor or
    LatentBundle), then the encoder's output, then a mapped random z
    (style family, needs ``mapping``) or a random z directly. The style
    family optimizes w, and z_c as well when optimize_zc is set.

    ``lr_schedule='cosine'`` (default) ramps the step size down to zero
    over the run so the iterate settles instead of orbiting the optimum
    at a constant-lr noise floor; 'constant' keeps the fixed rate.
    """
    if lr_schedule not in ("cosine", "constant"):
        raise ConfigurationError(
            f"lr_schedule must be 'cosine' or 'constant', got {lr_schedule!r}"
        )
    _check_resolution(gen, images)
    attention_config = attention_config or AttentionConfig()
    weights = _loss_setup(backbone, weights)
    options = options or MetricOptions()
    family = gen.spec.family
    n = images.shape[0]

    z_c0 = None
    if init is not None:
        if isinstance(init, LatentBundle):
            start = _family_latent(init, family).detach().clone()
            z_c0 = None if init.z_c is None else init.z_c.detach().clone()
        else:
            start = torch.as_tensor(init).detach().clone()
        c0 = init.c.detach().clone() if isinstance(init, LatentBundle) and init.c is not None else None
    elif enc is not None:
        enc.eval()
        with torch.no_grad():
            b0 = enc(images, class_hint=class_hint)
        start = _family_latent(b0, family).detach().clone()
        z_c0 = None if b0.z_c is None else b0.z_c.detach().clone()
        c0 = None if b0.c is None else b0.c.detach().clone()
    else:
        g = torch.Generator().manual_seed(seed)
        z = torch.randn((n, gen.spec.d_z), generator=g)
        if family == "style":
            if mapping is None:
                raise ConfigurationError(
                    "style-family random init needs the mapping network (or pass init/enc)"
                )
            with torch.no_grad():
                start = mapping(z)
        else:
            start = z
        c0 = None
        if family == "class_conditional":
            if class_hint is None:
                raise ConfigurationError(
                    "class-conditional random init needs class_hint labels"
                )
            with torch.no_grad():
                c0 = gen.embed_labels(class_hint)

    latent = torch.nn.Parameter(start)
    params = [latent]
    z_c_param = None
    if family == "style" and optimize_zc:
        base = z_c0 if z_c0 is not None else gen.constant.detach().expand(n, -1, -1, -1)
        z_c_param = torch.nn.Parameter(base.clone())
        params.append(z_c_param)
    c_param = None
    if family == "class_conditional":
        c_param = torch.nn.Parameter(c0)
        params.append(c_param)

    def current_bundle() -> LatentBundle:
        if family == "style":
            z_c = z_c_param if z_c_param is not None else z_c0
            return LatentBundle(w=latent, z_c=z_c)
        if family == "progressive":
            return LatentBundle(z=latent)
        return LatentBundle(z=latent, c=c_param)

    views_y = make_views(images, attention_config, backbone)

    def step_loss():
        x_hat = reconstruct(gen, current_bundle())
        views_hat = views_like(x_hat, views_y, backbone, attention_config)
        return image_loss(views_y, views_hat, weights, backbone, options), x_hat

    with torch.no_grad():
        loss0, x_hat0 = step_loss()
    initial = float(loss0.total)
    best = (initial, _detach_bundle(current_bundle()), x_hat0.detach())

    opt = torch.optim.Adam(params, lr=learning_rate, betas=betas)
    streak = 0
    done = 0
    for t in range(steps):
        if lr_schedule == "cosine":
            lr_t = learning_rate * 0.5 * (1.0 + math.cos(math.pi * t / steps))
            for group in opt.param_groups:
                group["lr"] = lr_t
        loss, x_hat = step_loss()
        value = float(loss.total.detach())
        if value < best[0]:
            best = (value, _detach_bundle(current_bundle()), x_hat.detach())
        # A non-finite loss is divergence too; NaN compares false with >.
        diverged = not math.isfinite(value) or value > divergence_factor * initial
        streak = streak + 1 if diverged else 0
        if streak >= divergence_patience:
            break
        opt.zero_grad()
        loss.total.backward()
        opt.step()
        done += 1
    metrics = pair_metrics(images, best[2], backbone)
    return InversionResult(latents=best[1], reconstruction=best[2],
                           metrics=metrics, steps_used=done)


def edit(w: torch.Tensor, request: EditRequest) -> torch.Tensor:
    """Shift masked style layers by alpha times the direction.

    A (d_w,) direction broadcasts identically across the masked layers; a
    (n_layers, d_w) direction applies its matching row per layer. Layers
    outside the mask are untouched, and the operation is linear in alpha.
    """
    if w.dim() != 3:
        raise ContractViolation(f"w must be (n, n_layers, d_w), got {tuple(w.shape)}")
    n_layers, d_w = w.shape[1], w.shape[2]
    d = request.direction
    if d.shape[-1] != d_w:
        raise ContractViolation(f"direction width {d.shape[-1]} != d_w {d_w}")
    if d.dim() == 2 and d.shape[0] != n_layers:
        raise ContractViolation(
            f"direction has {d.shape[0]} layer rows, w has {n_layers} layers"
        )
    mask = request.layer_mask
    if mask is None:
        mask = list(range(n_layers))
    mask = [int(i) for i in mask]
    if any(i < 0 or i >= n_layers for i in mask):
        raise ContractViolation(f"layer mask {mask} out of range [0, {n_layers})")
    out = w.clone()
    d = d.to(dtype=w.dtype, device=w.device)
    for i in mask:
        row = d if d.dim() == 1 else d[i]
        out[:, i] = out[:, i] + request.alpha * row
    return out


def save_direction(path: str, direction, name: str,
                   layer_mask: Optional[list] = None,
                   alpha_range: tuple = (-3.0, 3.0)):
    """Store an edit direction with its manifest in one .npz file."""
    direction = np.asarray(direction, dtype=np.float32)
    meta = {"name": name, "alpha_range": list(alpha_range),
            "layer_mask": None if layer_mask is None else [int(i) for i in layer_mask]}
    np.savez(path, direction=direction, meta=np.frombuffer(
        json.dumps(meta).encode(), dtype=np.uint8))


def load_direction(path: str) -> dict:
    """Read back {name, direction, layer_mask, alpha_range} from save_direction."""
    try:
        with np.load(path) as z:
            direction = torch.from_numpy(z["direction"].copy())
            meta = json.loads(bytes(z["meta"].tobytes()).decode())
    except (ValueError, KeyError, EOFError) as e:
        raise OSError(f"corrupt direction file {path}: {e}") from e
    return {
        "name": meta["name"],
        "direction": direction,
        "layer_mask": meta["layer_mask"],
        "alpha_range": tuple(meta["alpha_range"]),
    }
