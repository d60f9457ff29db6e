"""Similarity metrics and the composite losses built from them.

Latent vectors are compared with MSE, cosine distance and a softmax-KL
divergence; images additionally get LPIPS (backbone feature distance) and
SSIM. The composite image loss runs over three views of each image (the
original plus two attention views) and the full objective couples the
image part with the latent part through a small epsilon weight.

All functions are pure, differentiable torch ops and safe to call
concurrently. Images are expected in [-1, 1] unless stated otherwise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolation, InvalidInputError

if TYPE_CHECKING:
    from .attention import TripleScaleViews
    from .backbones import FeatureBackbone

SCALE_NAMES = ("orig", "at1", "at2")

# Loss-term coefficient per metric name, resolved against LossWeights.
_METRIC_WEIGHT_ATTR = {
    "kl": None,        # always weight 1
    "mse": "alpha",
    "cos": "beta",
    "lpips": "gamma",
    "ssim_loss": "delta",
}


@dataclass
class LossWeights:
    """Scalar weights of the composite objective.

    alpha/beta weight MSE/COS, gamma/delta weight LPIPS/SSIM, epsilon
    couples the latent part into the total, and mu1/mu2 weight the two
    attention views against the original scale. Defaults follow the
    training recipe for strategy 1; ``for_strategy(2)`` switches mu1/mu2
    to (5, 9).
    """

    alpha: float = 5.0
    beta: float = 3.0
    gamma: float = 2.0
    delta: float = 1.0
    epsilon: float = 0.01
    mu1: float = 1.0
    mu2: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "epsilon", "mu1", "mu2"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ContractViolation(f"loss weight {name} must be >= 0, got {value}")

    @classmethod
    def for_strategy(cls, strategy: int, **overrides) -> "LossWeights":
        """Weights with the attention multipliers of training strategy 1 or 2."""
        if strategy == 1:
            mu = dict(mu1=1.0, mu2=1.0)
        elif strategy == 2:
            mu = dict(mu1=5.0, mu2=9.0)
        else:
            raise ConfigurationError(f"unknown training strategy {strategy!r}, expected 1 or 2")
        mu.update(overrides)
        return cls(**mu)


@dataclass
class MetricOptions:
    """Knobs of the individual metrics that are not loss weights."""

    mse_mode: str = "mean_sq"      # "mean_sq" | "l2_over_batch"
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    dynamic_range: float = 2.0     # images live in [-1, 1]

    def __post_init__(self):
        if self.mse_mode not in ("mean_sq", "l2_over_batch"):
            raise ConfigurationError(
                f"mse_mode must be 'mean_sq' or 'l2_over_batch', got {self.mse_mode!r}"
            )


@dataclass
class LossBreakdown:
    """Per-term values of a composite loss plus the weighted total.

    Terms are stored unweighted under ``<scale>.<metric>`` keys (scales:
    orig/at1/at2/latent; metrics: kl, mse, cos, lpips, ssim_loss). The
    total is always recomputable from the terms via :meth:`recombine`.
    """

    terms: dict = field(default_factory=dict)
    total: torch.Tensor = None

    def term_values(self) -> dict:
        """Plain-float view of the terms, for logging and history records."""
        return {k: float(v.detach() if isinstance(v, torch.Tensor) else v)
                for k, v in self.terms.items()}

    def recombine(self, weights: LossWeights) -> torch.Tensor:
        """Recompute the weighted total from the stored unweighted terms.

        Latent terms are scaled by epsilon only when image terms are
        present (i.e. this breakdown is a merged total); a pure latent
        breakdown carries its own total without epsilon.
        """
        has_image = any(not k.startswith("latent.") for k in self.terms)
        total = None
        for key, value in self.terms.items():
            scale, metric = key.split(".", 1)
            attr = _METRIC_WEIGHT_ATTR[metric]
            coeff = 1.0 if attr is None else getattr(weights, attr)
            if scale == "at1":
                coeff *= weights.mu1
            elif scale == "at2":
                coeff *= weights.mu2
            elif scale == "latent" and has_image:
                coeff *= weights.epsilon
            term = coeff * value
            total = term if total is None else total + term
        if total is None:
            raise ContractViolation("cannot recombine an empty breakdown")
        return total


def _as_float_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.to(torch.get_default_dtype())
    t = torch.as_tensor(x)
    return t if t.is_floating_point() else t.to(torch.float64)


def _paired(a, b, op: str):
    a = _as_float_tensor(a)
    b = _as_float_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dtype != b.dtype:
        wide = torch.promote_types(a.dtype, b.dtype)
        a, b = a.to(wide), b.to(wide)
    return a, b


def mse_loss(a, b, mode: str = "mean_sq") -> torch.Tensor:
    """Mean of element-wise squared differences (zero iff ``a == b``).

    ``mode='l2_over_batch'`` instead returns the global L2 norm of the
    difference divided by the leading (batch) dimension, the literal
    norm-over-batch reading; the default mean-of-squares keeps the term
    magnitude independent of resolution.
    """
    a, b = _paired(a, b, "mse_loss")
    if not bool(torch.isfinite(a).all()) or not bool(torch.isfinite(b).all()):
        raise InvalidInputError("mse_loss: inputs must be finite")
    if mode == "mean_sq":
        return (a - b).pow(2).mean()
    if mode == "l2_over_batch":
        n = a.shape[0] if a.dim() > 0 else 1
        return (a - b).pow(2).sum().sqrt() / n
    raise ConfigurationError(f"unknown mse mode {mode!r}")


def cos_loss(a, b) -> torch.Tensor:
    """One minus the cosine similarity of the flattened inputs, in [0, 2].

    A zero-norm input makes the cosine undefined; the function then warns
    and returns 1 (the orthogonal-equivalent value) instead of dividing
    by zero.
    """
    a, b = _paired(a, b, "cos_loss")
    av, bv = a.reshape(-1), b.reshape(-1)
    na, nb = torch.linalg.vector_norm(av), torch.linalg.vector_norm(bv)
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        warnings.warn("cos_loss: zero-norm input, returning 1.0", RuntimeWarning)
        return torch.ones((), dtype=a.dtype, device=a.device)
    return 1.0 - torch.dot(av, bv) / (na * nb)


def kl_softmax_loss(a, b, clamp: float = 1e-12) -> torch.Tensor:
    """KL divergence between softmax distributions, KL(S(b) || S(a)).

    Softmax runs over the last axis; every leading axis is treated as an
    independent row and the per-row divergences are averaged. Probability
    values are clamped below at ``clamp`` inside the logs. Nonnegative by
    Gibbs' inequality, zero iff the two softmax distributions agree.
    """
    a, b = _paired(a, b, "kl_softmax_loss")
    sa = torch.softmax(a.reshape(-1, a.shape[-1]), dim=-1)
    sb = torch.softmax(b.reshape(-1, b.shape[-1]), dim=-1)
    log_ratio = torch.log(sb.clamp_min(clamp)) - torch.log(sa.clamp_min(clamp))
    return (sb * log_ratio).sum(dim=-1).mean()


def _gaussian_window(window: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(window, dtype=dtype, device=device) - window // 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5, dynamic_range: float = 2.0) -> torch.Tensor:
    """Mean structural similarity over sliding Gaussian windows, in [-1, 1].

    Standard constants C1=(0.01*L)^2 and C2=(0.03*L)^2 with L the declared
    dynamic range (2.0 for [-1, 1] images, 1.0 for [0, 1]). Windows are
    applied without padding, so both spatial dims must be >= ``window``.
    Symmetric in (a, b); returns 1 on identical inputs.
    """
    a, b = _paired(a, b, "ssim")
    if a.dim() != 4:
        raise ContractViolation(f"ssim expects (n, c, h, w) batches, got {a.dim()}D")
    if window % 2 == 0 or window < 3:
        raise ContractViolation(f"ssim window must be odd and >= 3, got {window}")
    n, c, h, w = a.shape
    if h < window or w < window:
        raise InvalidInputError(
            f"ssim: image {h}x{w} is smaller than the {window}x{window} window"
        )
    kernel = _gaussian_window(window, sigma, a.dtype, a.device)
    kernel = kernel.expand(c, 1, window, window).contiguous()

    def filt(x):
        return F.conv2d(x, kernel, groups=c)

    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def lpips_distance(a, b, backbone: "FeatureBackbone") -> torch.Tensor:
    """Perceptual distance from multi-tap backbone feature differences.

    Both inputs (images in [-1, 1]) are normalized to the backbone's
    expected statistics, features are taken at its five tap points, unit
    normalized along the channel axis, and the squared differences are
    averaged spatially and summed over taps. Zero iff the features agree;
    symmetric. This is the unit-calibrated variant: no learned per-channel
    calibration is applied.
    """
    if backbone is None:
        raise ConfigurationError(
            "lpips_distance needs a feature backbone; build one with "
            "ganinv.backbones.load_backbone (tiny backbones need no weight file)"
        )
    a, b = _paired(a, b, "lpips_distance")
    if a.dim() != 4:
        raise ContractViolation(f"lpips_distance expects (n, c, h, w) batches, got {a.dim()}D")
    feats_a = backbone.features(backbone.normalize(a))
    feats_b = backbone.features(backbone.normalize(b))
    total = None
    for fa, fb in zip(feats_a, feats_b):
        fa = fa / torch.linalg.vector_norm(fa, dim=1, keepdim=True).clamp_min(1e-10)
        fb = fb / torch.linalg.vector_norm(fb, dim=1, keepdim=True).clamp_min(1e-10)
        d = (fa - fb).pow(2).sum(dim=1).mean(dim=(1, 2)).mean()
        total = d if total is None else total + d
    return total


def latent_loss(w, w_hat, weights: LossWeights | None = None,
                options: MetricOptions | None = None) -> LossBreakdown:
    """Composite latent-vector loss: KL + alpha*MSE + beta*COS.

    The breakdown records each metric unweighted under ``latent.*`` keys;
    the total applies alpha/beta (epsilon is applied later when the latent
    part is merged into the full objective).
    """
    weights = weights or LossWeights()
    options = options or MetricOptions()
    w, w_hat = _paired(w, w_hat, "latent_loss")
    terms = {
        "latent.kl": kl_softmax_loss(w, w_hat),
        "latent.mse": mse_loss(w, w_hat, mode=options.mse_mode),
        "latent.cos": cos_loss(w, w_hat),
    }
    total = terms["latent.kl"] + weights.alpha * terms["latent.mse"] + weights.beta * terms["latent.cos"]
    return LossBreakdown(terms=terms, total=total)


def _image_scale_terms(x, x_hat, weights: LossWeights, backbone, options: MetricOptions) -> dict:
    n, c, h, w = x.shape
    terms = {
        "kl": kl_softmax_loss(x.reshape(n, c, h * w), x_hat.reshape(n, c, h * w)),
        "mse": mse_loss(x, x_hat, mode=options.mse_mode),
        "cos": cos_loss(x, x_hat),
    }
    if backbone is not None:
        terms["lpips"] = lpips_distance(x, x_hat, backbone)
    elif weights.gamma > 0:
        raise ConfigurationError(
            "image_loss: gamma > 0 requires a feature backbone for the LPIPS term"
        )
    terms["ssim_loss"] = 1.0 - ssim(
        x, x_hat, window=options.ssim_window, sigma=options.ssim_sigma,
        dynamic_range=options.dynamic_range,
    )
    return terms


def image_loss(views: "TripleScaleViews", views_hat: "TripleScaleViews",
               weights: LossWeights | None = None,
               backbone: "FeatureBackbone | None" = None,
               options: MetricOptions | None = None) -> LossBreakdown:
    """Composite image loss over the three views of a reconstruction pair.

    Per scale s in {orig, at1, at2}: KL + alpha*MSE + beta*COS +
    gamma*LPIPS + delta*(1 - SSIM); the scales combine as
    orig + mu1*at1 + mu2*at2. A missing attention view is a contract
    violation unless its mu weight is zero, in which case the scale is
    skipped entirely.
    """
    weights = weights or LossWeights()
    options = options or MetricOptions()
    scale_mult = {"orig": 1.0, "at1": weights.mu1, "at2": weights.mu2}
    terms = {}
    total = None
    for scale in SCALE_NAMES:
        x = getattr(views, scale)
        x_hat = getattr(views_hat, scale)
        if x is None or x_hat is None:
            if scale_mult[scale] == 0.0:
                continue
            raise ContractViolation(
                f"image_loss: view {scale!r} is missing but its weight is nonzero"
            )
        if x.shape != x_hat.shape:
            raise ContractViolation(
                f"image_loss: {scale} shapes differ, {tuple(x.shape)} vs {tuple(x_hat.shape)}"
            )
        scale_terms = _image_scale_terms(x, x_hat, weights, backbone, options)
        part = (
            scale_terms["kl"]
            + weights.alpha * scale_terms["mse"]
            + weights.beta * scale_terms["cos"]
            + weights.delta * scale_terms["ssim_loss"]
        )
        if "lpips" in scale_terms:
            part = part + weights.gamma * scale_terms["lpips"]
        for name, value in scale_terms.items():
            terms[f"{scale}.{name}"] = value
        contribution = scale_mult[scale] * part
        total = contribution if total is None else total + contribution
    return LossBreakdown(terms=terms, total=total)


def total_loss(image_part: LossBreakdown, latent_part: LossBreakdown,
               weights: LossWeights | None = None) -> LossBreakdown:
    """Full objective: image part plus epsilon times the latent part.

    The merged breakdown keeps every term of both parts; epsilon = 0
    degenerates to the image part alone and epsilon = 1 recovers the
    plain sum of the two parts.
    """
    weights = weights or LossWeights()
    terms = dict(image_part.terms)
    for key, value in latent_part.terms.items():
        if key in terms:
            raise ContractViolation(f"total_loss: duplicate term {key!r}")
        terms[key] = value
    total = image_part.total + weights.epsilon * latent_part.total
    return LossBreakdown(terms=terms, total=total)
