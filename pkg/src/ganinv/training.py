"""Self-supervised encoder training against a frozen generator.

Each step samples latents, synthesizes a target batch, encodes it, lets
the generator reconstruct from the encoder's latents, and minimizes the
composite image loss plus epsilon times the latent loss. Two strategies
exist: strategy 1 detaches the original-scale reconstruction so only the
attention views (and the latent term) drive encoder gradients, with
attention weights (1, 1); strategy 2 keeps all gradients, weights the
attention views (5, 9), and expects fused-scale encoder blocks.
"""

from __future__ import annotations

import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field, asdict
from typing import Optional

import torch

from .attention import AttentionConfig, TripleScaleViews, make_views, views_like
from .encoder import Encoder
from .errors import ConfigurationError, NonFiniteLossError
from .generators import LatentBundle, sample_latents, save_checkpoint, synthesize
from .similarity import (
    LossBreakdown,
    LossWeights,
    MetricOptions,
    image_loss,
    latent_loss,
    mse_loss,
    total_loss,
)

# Full-scale batch presets by output resolution.
BATCH_PRESETS = {256: 8, 512: 4, 1024: 2}

LATENT_SOURCES = ("encode_once", "encode_reconstruction")


def full_scale_batch_size(resolution: int) -> int:
    if resolution not in BATCH_PRESETS:
        raise ConfigurationError(
            f"no full-scale batch preset for resolution {resolution}; "
            f"presets exist for {sorted(BATCH_PRESETS)}"
        )
    return BATCH_PRESETS[resolution]


@dataclass
class TrainConfig:
    """Hyperparameters of the self-supervised loop.

    Full-scale defaults: lr 0.0015, Adam betas (0, 0.99), 30000 samples
    per epoch, 7 epochs. Desk-scale runs override samples_per_epoch and
    epochs; fixed_latents draws one latent pool up front and reuses it
    every epoch (the overfit setting). latent_source picks where the
    predicted latent for the latent-loss term comes from: the encoding
    of the target (encode_once) or of the reconstruction
    (encode_reconstruction).
    """

    learning_rate: float = 0.0015
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    samples_per_epoch: int = 30000
    epochs: int = 7
    batch_size: int = 8
    strategy: int = 1
    weights: Optional[LossWeights] = None
    latent_source: str = "encode_once"
    seed: int = 0
    skip_threshold: float = 1e-4
    fixed_latents: bool = False
    stop_at_mse: Optional[float] = None
    eval_every: int = 50

    def __post_init__(self):
        if self.strategy not in (1, 2):
            raise ConfigurationError(f"strategy must be 1 or 2, got {self.strategy}")
        if self.latent_source not in LATENT_SOURCES:
            raise ConfigurationError(
                f"latent_source must be one of {LATENT_SOURCES}, got {self.latent_source!r}"
            )
        if self.batch_size < 1 or self.samples_per_epoch < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size, samples_per_epoch and epochs must be >= 1")

    def resolved_weights(self) -> LossWeights:
        return self.weights if self.weights is not None else LossWeights.for_strategy(self.strategy)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = None if self.weights is None else asdict(self.weights)
        return d


@dataclass
class TrainHistory:
    """Per-step loss records plus checkpoint references, JSONL-serializable."""

    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def append(self, **record):
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ConfigurationError("history steps must be strictly increasing")
        self.records.append(record)

    def save(self, path: str):
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path: str) -> "TrainHistory":
        hist = cls()
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    hist.records.append(json.loads(line))
        return hist


def apply_strategy_gating(strategy: int, views_hat: TripleScaleViews) -> TripleScaleViews:
    """Gate reconstruction views per training strategy.

    Strategy 1 swaps the original-scale view for a gradient-detached
    copy, so that term still scores the reconstruction but moves no
    encoder parameter; the attention views keep their gradients. Strategy
    2 returns the views untouched.
    """
    if strategy == 1:
        return TripleScaleViews(
            orig=views_hat.orig.detach(), at1=views_hat.at1, at2=views_hat.at2,
            mode=views_hat.mode, at1_boxes=views_hat.at1_boxes,
            at2_boxes=views_hat.at2_boxes, class_index=views_hat.class_index,
            at2_fallback=views_hat.at2_fallback,
        )
    if strategy == 2:
        return views_hat
    raise ConfigurationError(f"unknown strategy {strategy!r}, expected 1 or 2")


def _validate_pairing(gen, enc: Encoder):
    g, e = gen.spec, enc.spec
    problems = []
    if g.family != e.family:
        problems.append(f"family {g.family!r} vs {e.family!r}")
    if g.resolution != e.resolution:
        problems.append(f"resolution {g.resolution} vs {e.resolution}")
    if list(g.channel_schedule) != list(e.channel_schedule):
        problems.append("channel schedules differ")
    for name in ("d_w", "d_z", "n_classes"):
        if getattr(g, name) != getattr(e, name):
            problems.append(f"{name} {getattr(g, name)} vs {getattr(e, name)}")
    if problems:
        raise ConfigurationError("generator/encoder specs mismatch: " + "; ".join(problems))
    if any(p.requires_grad for p in gen.parameters()):
        raise ConfigurationError("generator must be frozen before training")


def _draw_pool(gen, mapping, n: int, seed: int):
    """Pre-draw raw latent inputs (z and labels); w/c are derived per batch."""
    spec = gen.spec
    g = torch.Generator().manual_seed(seed)
    z = torch.randn((n, spec.d_z), generator=g)
    labels = None
    if spec.family == "class_conditional":
        labels = torch.randint(0, spec.n_classes, (n,), generator=g)
    return z, labels


def _targets_from(gen, mapping, z: torch.Tensor, labels):
    spec = gen.spec
    with torch.no_grad():
        if spec.family == "style":
            latents = LatentBundle(w=mapping(z))
        elif spec.family == "progressive":
            latents = LatentBundle(z=z)
        else:
            latents = LatentBundle(z=z, c=gen.embed_labels(labels))
        x, z_c = synthesize(gen, latents)
    return x, latents


def reconstruct(gen, bundle: LatentBundle):
    """Run the generator on an encoder's latent bundle (gradients kept)."""
    spec = gen.spec
    if spec.family == "style":
        return gen(bundle.w, z_c=bundle.z_c)
    if spec.family == "progressive":
        return gen(bundle.z)
    return gen(bundle.z, bundle.c)


def _latent_pair(family: str, targets: LatentBundle, bundle: LatentBundle):
    if family == "style":
        return targets.w, bundle.w
    return targets.z, bundle.z


def _pool_mse(gen, mapping, enc, z_pool, labels_pool, batch_size: int) -> float:
    """Mean original-scale reconstruction MSE over a latent pool, no grads."""
    total, count = 0.0, 0
    enc.eval()
    with torch.no_grad():
        for start in range(0, z_pool.shape[0], batch_size):
            z = z_pool[start : start + batch_size]
            labels = None if labels_pool is None else labels_pool[start : start + batch_size]
            x, _ = _targets_from(gen, mapping, z, labels)
            bundle = enc(x, class_hint=labels)
            x_hat = reconstruct(gen, bundle)
            total += float((x - x_hat).pow(2).mean()) * z.shape[0]
            count += z.shape[0]
    enc.train()
    return total / count


def train_encoder(gen, mapping, enc: Encoder, attention_config: AttentionConfig,
                  config: TrainConfig, backbone=None,
                  options: Optional[MetricOptions] = None,
                  checkpoint_dir: Optional[str] = None):
    """Run the self-supervised loop; returns (encoder, TrainHistory).

    The generator (and mapping network, style family) stay frozen; a
    non-finite loss aborts after writing the last checkpoint and the
    history log. Reconstruction feeds the encoder's z_c' into the
    generator's constant input, which is how that head gets trained; no
    explicit z_c similarity term exists. Early exit: batches whose
    reconstruction already matches below skip_threshold MSE skip the
    parameter update.
    """
    _validate_pairing(gen, enc)
    if gen.spec.family == "style" and mapping is None:
        raise ConfigurationError("style-family training needs the mapping network")
    weights = config.resolved_weights()
    options = options or MetricOptions()
    if config.strategy == 2 and not enc.spec.fused_scale:
        warnings.warn(
            "strategy 2 normally pairs with fused-scale encoder blocks; "
            "training a non-fused encoder anyway", RuntimeWarning,
        )
    if weights.gamma > 0 and backbone is None:
        raise ConfigurationError("LPIPS weight gamma > 0 needs a feature backbone")

    opt = torch.optim.Adam(enc.parameters(),
                           lr=config.learning_rate,
                           betas=(config.adam_beta1, config.adam_beta2))
    history = TrainHistory()
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
        with open(os.path.join(checkpoint_dir, "config.json"), "w") as f:
            json.dump(config.to_dict(), f, indent=2)

    def _checkpoint(tag: str):
        if not checkpoint_dir:
            return None
        path = os.path.join(checkpoint_dir, tag)
        save_checkpoint(path, "encoder", enc.spec, enc,
                        extra={"encoder_spec": enc.spec.to_dict()})
        history.checkpoints.append(path)
        return path

    start_time = time.monotonic()
    steps_per_epoch = math.ceil(config.samples_per_epoch / config.batch_size)
    sampler = torch.Generator().manual_seed(config.seed)
    fixed_z = fixed_labels = None
    if config.fixed_latents:
        fixed_z, fixed_labels = _draw_pool(gen, mapping, config.samples_per_epoch, config.seed)

    enc.train()
    step = 0
    stop = False
    for epoch in range(config.epochs):
        if stop:
            break
        if config.fixed_latents:
            order = torch.randperm(config.samples_per_epoch, generator=sampler)
            epoch_z, epoch_labels = fixed_z[order], (
                None if fixed_labels is None else fixed_labels[order]
            )
        else:
            epoch_z, epoch_labels = _draw_pool(
                gen, mapping, config.samples_per_epoch, config.seed + epoch + 1
            )
        for b in range(steps_per_epoch):
            z = epoch_z[b * config.batch_size : (b + 1) * config.batch_size]
            if z.shape[0] == 0:
                break
            labels = None if epoch_labels is None else \
                epoch_labels[b * config.batch_size : (b + 1) * config.batch_size]
            x, target_latents = _targets_from(gen, mapping, z, labels)
            views = make_views(x, attention_config, backbone)

            bundle = enc(x, class_hint=labels)
            x_hat = reconstruct(gen, bundle)
            if not bool(torch.isfinite(x_hat).all()):
                path = _checkpoint("last")
                if checkpoint_dir:
                    history.save(os.path.join(checkpoint_dir, "history.jsonl"))
                raise NonFiniteLossError(
                    f"non-finite reconstruction at step {step}", checkpoint_dir=path
                )
            views_hat = views_like(x_hat, views, backbone, attention_config)
            views_hat = apply_strategy_gating(config.strategy, views_hat)

            if config.latent_source == "encode_once":
                pred_bundle = bundle
            else:
                pred_bundle = enc(x_hat, class_hint=labels)
            lat_target, lat_pred = _latent_pair(gen.spec.family, target_latents, pred_bundle)
            image_part = image_loss(views, views_hat, weights, backbone, options)
            latent_part = latent_loss(lat_target, lat_pred, weights, options)
            loss = total_loss(image_part, latent_part, weights)

            if not bool(torch.isfinite(loss.total)):
                path = _checkpoint("last")
                if checkpoint_dir:
                    history.save(os.path.join(checkpoint_dir, "history.jsonl"))
                raise NonFiniteLossError(
                    f"non-finite loss at step {step}", checkpoint_dir=path
                )

            recon_mse = float(mse_loss(x, x_hat.detach()))
            skipped = recon_mse < config.skip_threshold
            if not skipped:
                opt.zero_grad()
                loss.total.backward()
                opt.step()

            step += 1
            history.append(
                step=step, epoch=epoch, total=float(loss.total.detach()),
                recon_mse=recon_mse, skipped=skipped,
                terms=loss.term_values(),
            )
            if (config.stop_at_mse is not None and config.fixed_latents
                    and step % config.eval_every == 0):
                pool = _pool_mse(gen, mapping, enc, fixed_z, fixed_labels, config.batch_size)
                if pool < config.stop_at_mse:
                    stop = True
                    break
        _checkpoint(f"epoch_{epoch:04d}")
    _checkpoint("last")
    history.wall_seconds = time.monotonic() - start_time
    if checkpoint_dir:
        history.save(os.path.join(checkpoint_dir, "history.jsonl"))
    enc.eval()
    return enc, history
