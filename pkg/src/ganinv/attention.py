"""Three-scale attention views: the original image plus two focused views.

Aligned imagery (faces centred by a detector upstream) uses fixed centred
crops. Everything else uses class-activation heat maps from a frozen
classifier backbone: the first attention view renders the heat map itself
as an image, the second crops the hottest region.

Views carry their source geometry so the reconstruction of an image can
be cropped at exactly the same places (see views_like).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolation

# Part of the view contract: heat maps become loss pixels through this
# colormap, so it is fixed rather than configurable.
HEATMAP_COLORMAP = "turbo"

_lut_cache: dict = {}


@dataclass
class AttentionConfig:
    """How to build the two attention views.

    centre mode crops fixed centred squares (fractions of the side);
    gradcam mode derives the views from classifier heat maps taken at
    ``backbone_tap``. ``heat_threshold`` is the fraction of the per-image
    max heat that a pixel needs to land inside the AT2 box.
    """

    mode: str = "centre"
    crop_frac_at1: float = 0.625
    crop_frac_at2: float = 0.375
    heat_threshold: float = 0.5
    backbone_tap: int = 2

    def __post_init__(self):
        if self.mode not in ("centre", "gradcam"):
            raise ConfigurationError(f"attention mode must be 'centre' or 'gradcam', got {self.mode!r}")
        for name in ("crop_frac_at1", "crop_frac_at2"):
            frac = getattr(self, name)
            if not 0.0 < frac <= 1.0:
                raise ContractViolation(f"{name} must lie in (0, 1], got {frac}")
        if self.crop_frac_at2 > self.crop_frac_at1:
            raise ContractViolation(
                f"crop_frac_at2 ({self.crop_frac_at2}) must not exceed "
                f"crop_frac_at1 ({self.crop_frac_at1})"
            )
        if not 0.0 < self.heat_threshold < 1.0:
            raise ContractViolation(f"heat_threshold must lie in (0, 1), got {self.heat_threshold}")


@dataclass
class TripleScaleViews:
    """The three loss views of one image batch, all at the same resolution.

    at1_boxes/at2_boxes hold per-image source rectangles as
    (top, left, height, width) rows; at1_boxes is None in gradcam mode
    where AT1 is a rendered heat map rather than a crop. at2_fallback
    flags images whose thresholded heat region was empty, making AT2 a
    full-frame resample.
    """

    orig: torch.Tensor
    at1: Optional[torch.Tensor]
    at2: Optional[torch.Tensor]
    mode: str = "centre"
    at1_boxes: Optional[torch.Tensor] = None
    at2_boxes: Optional[torch.Tensor] = None
    class_index: Optional[torch.Tensor] = None
    at2_fallback: Optional[torch.Tensor] = None


def _check_image_batch(img: torch.Tensor, op: str) -> int:
    if not isinstance(img, torch.Tensor) or img.dim() != 4:
        raise ContractViolation(f"{op} expects an (n, c, h, w) batch")
    if img.shape[2] != img.shape[3]:
        raise ContractViolation(f"{op} expects square images, got {img.shape[2]}x{img.shape[3]}")
    return img.shape[2]


def _resize(img: torch.Tensor, size: int) -> torch.Tensor:
    if img.shape[2] == size and img.shape[3] == size:
        return img
    return F.interpolate(img, size=(size, size), mode="bilinear", align_corners=False)


def _centre_box(resolution: int, frac: float) -> tuple:
    side = max(1, int(round(frac * resolution)))
    side = min(side, resolution)
    top = (resolution - side) // 2
    return top, top, side, side


def _crop_boxes(img: torch.Tensor, boxes: torch.Tensor, out_size: int) -> torch.Tensor:
    # Per-image boxes can differ in size, so crops are resized one by one.
    outs = []
    for i in range(img.shape[0]):
        top, left, h, w = (int(v) for v in boxes[i])
        crop = img[i : i + 1, :, top : top + h, left : left + w]
        outs.append(_resize(crop, out_size))
    return torch.cat(outs, dim=0)


def centre_views(img: torch.Tensor, config: AttentionConfig) -> TripleScaleViews:
    """Fixed centred crops for aligned imagery, resized back to full size.

    With fraction 1 a view equals the original; the AT2 region is always
    contained in the AT1 region because the fractions are ordered.
    """
    if config.mode != "centre":
        raise ContractViolation(f"centre_views called with mode {config.mode!r}")
    r = _check_image_batch(img, "centre_views")
    n = img.shape[0]
    box1 = _centre_box(r, config.crop_frac_at1)
    box2 = _centre_box(r, config.crop_frac_at2)
    boxes1 = torch.tensor(box1, dtype=torch.long).expand(n, 4).clone()
    boxes2 = torch.tensor(box2, dtype=torch.long).expand(n, 4).clone()
    at1 = _crop_boxes(img, boxes1, r)
    at2 = _crop_boxes(img, boxes2, r)
    return TripleScaleViews(
        orig=img, at1=at1, at2=at2, mode="centre",
        at1_boxes=boxes1, at2_boxes=boxes2,
    )


def gradcam_heatmap(img: torch.Tensor, backbone, tap: int,
                    class_index: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Class-activation heat maps in [0, 1] at the tap's spatial resolution.

    Channel weights are the spatial means of the class-score gradients at
    the tap activations; the weighted activation sum is rectified and then
    min-max normalized per image. A map that is constant after ReLU (e.g.
    all-negative sums) normalizes to zeros rather than dividing by zero.
    ``class_index`` defaults to each image's argmax class; pass the
    original image's indices when mapping a reconstruction so both maps
    target the same class.
    """
    _check_image_batch(img, "gradcam_heatmap")
    with torch.enable_grad():
        x = img.detach().clone().requires_grad_(True)
        logits, acts = backbone.forward_with_tap(x, tap)
        if class_index is None:
            class_index = logits.argmax(dim=1)
        class_index = class_index.to(dtype=torch.long, device=logits.device)
        score = logits.gather(1, class_index.view(-1, 1)).sum()
        (grads,) = torch.autograd.grad(score, acts)
    alpha = grads.mean(dim=(2, 3))
    cam = F.relu((alpha[:, :, None, None] * acts.detach()).sum(dim=1))
    flat = cam.flatten(1)
    lo = flat.min(dim=1).values[:, None, None]
    hi = flat.max(dim=1).values[:, None, None]
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    normed = torch.where(span > 0, (cam - lo) / safe, torch.zeros_like(cam))
    return normed


def _heatmap_lut(device, dtype) -> torch.Tensor:
    key = (str(device), dtype)
    if key not in _lut_cache:
        from matplotlib import colormaps

        table = colormaps[HEATMAP_COLORMAP](np.linspace(0.0, 1.0, 256))[:, :3]
        _lut_cache[key] = torch.as_tensor(table, dtype=dtype, device=device)
    return _lut_cache[key]


def render_heatmap(heat: torch.Tensor, size: int, dtype=None) -> torch.Tensor:
    """Turn (n, h, w) heat maps into (n, 3, size, size) images in [-1, 1].

    Rendering goes through a fixed colormap lookup table, so this path is
    not differentiable; it exists to let heat maps participate in the
    image loss as plain pixels.
    """
    dtype = dtype or heat.dtype
    up = F.interpolate(heat[:, None], size=(size, size), mode="bilinear", align_corners=False)
    idx = (up[:, 0].clamp(0.0, 1.0) * 255.0).round().long()
    lut = _heatmap_lut(heat.device, dtype)
    rgb = lut[idx]                      # (n, size, size, 3) in [0, 1]
    return rgb.permute(0, 3, 1, 2).contiguous() * 2.0 - 1.0


def _threshold_box(heat_row: torch.Tensor, threshold: float) -> Optional[tuple]:
    mask = heat_row >= threshold * float(heat_row.max())
    if not bool(mask.any()) or float(heat_row.max()) == 0.0:
        return None
    rows = mask.any(dim=1).nonzero(as_tuple=False).flatten()
    cols = mask.any(dim=0).nonzero(as_tuple=False).flatten()
    top, bottom = int(rows[0]), int(rows[-1])
    left, right = int(cols[0]), int(cols[-1])
    return top, left, bottom - top + 1, right - left + 1


def gradcam_views(img: torch.Tensor, backbone, config: AttentionConfig,
                  class_index: Optional[torch.Tensor] = None) -> TripleScaleViews:
    """Heat-map-driven views for imagery without spatial alignment.

    AT1 is the rendered heat map itself; AT2 crops the bounding box of
    the pixels at or above heat_threshold of the per-image max, scaled up
    from heat-map coordinates to pixel coordinates. An empty thresholded
    region (flat map) falls back to the full frame and raises a warning,
    with the affected images flagged in at2_fallback.
    """
    if config.mode != "gradcam":
        raise ContractViolation(f"gradcam_views called with mode {config.mode!r}")
    r = _check_image_batch(img, "gradcam_views")
    n = img.shape[0]
    with torch.enable_grad():
        probe = img.detach().clone().requires_grad_(True)
        logits, _ = backbone.forward_with_tap(probe, config.backbone_tap)
    if class_index is None:
        class_index = logits.argmax(dim=1).detach()
    heat = gradcam_heatmap(img, backbone, config.backbone_tap, class_index=class_index)
    at1 = render_heatmap(heat, r, dtype=img.dtype)

    hh, hw = heat.shape[1], heat.shape[2]
    boxes = torch.empty((n, 4), dtype=torch.long)
    fallback = torch.zeros(n, dtype=torch.bool)
    for i in range(n):
        box = _threshold_box(heat[i], config.heat_threshold)
        if box is None:
            boxes[i] = torch.tensor([0, 0, r, r])
            fallback[i] = True
            continue
        top, left, h, w = box
        # Map heat-map cells onto pixel coordinates by scaling the box edges.
        py0 = int(top * r / hh)
        px0 = int(left * r / hw)
        py1 = min(r, int(np.ceil((top + h) * r / hh)))
        px1 = min(r, int(np.ceil((left + w) * r / hw)))
        boxes[i] = torch.tensor([py0, px0, max(1, py1 - py0), max(1, px1 - px0)])
    if bool(fallback.any()):
        warnings.warn(
            f"gradcam_views: {int(fallback.sum())} image(s) had an empty thresholded "
            "heat region; AT2 fell back to the full frame",
            RuntimeWarning,
        )
    at2 = _crop_boxes(img, boxes, r)
    return TripleScaleViews(
        orig=img, at1=at1, at2=at2, mode="gradcam",
        at2_boxes=boxes, class_index=class_index, at2_fallback=fallback,
    )


def make_views(img: torch.Tensor, config: AttentionConfig,
               backbone=None) -> TripleScaleViews:
    """Dispatch to centre_views or gradcam_views based on the config."""
    if config.mode == "centre":
        return centre_views(img, config)
    if backbone is None:
        raise ConfigurationError("gradcam attention views need a classifier backbone")
    return gradcam_views(img, backbone, config)


def views_like(img: torch.Tensor, reference: TripleScaleViews,
               backbone=None, config: AttentionConfig | None = None) -> TripleScaleViews:
    """Views of a new image batch using the reference batch's geometry.

    Crop boxes (and, in gradcam mode, the target class per image) are
    reused from the reference so paired views compare the same regions.
    Crops are applied to ``img`` directly and stay differentiable; the
    gradcam AT1 view is a rendered heat map and carries no gradient.
    """
    r = _check_image_batch(img, "views_like")
    if img.shape[0] != reference.orig.shape[0]:
        raise ContractViolation("views_like: batch size differs from the reference views")
    if reference.mode == "centre":
        at1 = _crop_boxes(img, reference.at1_boxes, r)
        at2 = _crop_boxes(img, reference.at2_boxes, r)
        return TripleScaleViews(
            orig=img, at1=at1, at2=at2, mode="centre",
            at1_boxes=reference.at1_boxes, at2_boxes=reference.at2_boxes,
        )
    if backbone is None:
        raise ConfigurationError("views_like on gradcam views needs the classifier backbone")
    tap = config.backbone_tap if config is not None else AttentionConfig(mode="gradcam").backbone_tap
    heat = gradcam_heatmap(img, backbone, tap, class_index=reference.class_index)
    at1 = render_heatmap(heat, r, dtype=img.dtype)
    at2 = _crop_boxes(img, reference.at2_boxes, r)
    return TripleScaleViews(
        orig=img, at1=at1, at2=at2, mode="gradcam",
        at2_boxes=reference.at2_boxes, class_index=reference.class_index,
        at2_fallback=reference.at2_fallback,
    )
