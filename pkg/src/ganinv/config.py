"""Run configuration: one YAML document covering every tunable.

A config file is merged over the defaults below; unknown keys anywhere
in the tree are rejected rather than ignored, and ``--show-config``
prints the fully merged document so every default is visible. Values
are grouped by the component they configure.
"""

from __future__ import annotations

import copy
from typing import Optional

import yaml

from .attention import AttentionConfig
from .backbones import load_backbone
from .encoder import EncoderSpec
from .errors import ConfigurationError
from .generators import GeneratorSpec
from .similarity import LossWeights, MetricOptions
from .training import TrainConfig

DEFAULTS = {
    "seed": 0,
    "generator": {
        "family": "style",
        "resolution": 32,
        "preset": "desk",          # desk | full
        "base": 16,                # desk preset: first block width
        "cap": 128,                # desk preset: channel ceiling
        "d_w": 64,
        "n_classes": 10,
        "seed": 0,
    },
    "encoder": {
        "fused_scale": False,
        "seed": 1,
    },
    "attention": {
        "mode": "centre",
        "crop_frac_at1": 0.625,
        "crop_frac_at2": 0.375,
        "heat_threshold": 0.5,
        "backbone_tap": 2,
    },
    "loss": {
        "alpha": 5.0,
        "beta": 3.0,
        "gamma": 2.0,
        "delta": 1.0,
        "epsilon": 0.01,
        "mu1": None,               # null: set by the training strategy
        "mu2": None,
        "mse_mode": "mean_sq",
        "ssim_window": 11,
    },
    "train": {
        "learning_rate": 0.0015,
        "adam_beta1": 0.0,
        "adam_beta2": 0.99,
        "samples_per_epoch": 256,
        "epochs": 2,
        "batch_size": 8,
        "strategy": 1,
        "latent_source": "encode_once",
        "skip_threshold": 1.0e-4,
        "fixed_latents": False,
        "stop_at_mse": None,
        "eval_every": 50,
    },
    "backbone": {
        "name": "tiny",            # tiny | vgg16
        "seed": 0,
        "weights_path": None,
    },
    "io": {
        "out_dir": "runs/out",
        "checkpoint_dir": None,
        "encoder_checkpoint": None,
        "generator_checkpoint": None,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigurationError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {here} must be a mapping")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


class RunConfig:
    """Merged configuration plus builders for the component objects."""

    def __init__(self, data: Optional[dict] = None):
        self.data = _merge(DEFAULTS, data or {})

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must hold a mapping")
        return cls(loaded)

    def apply_overrides(self, pairs: list):
        """Apply ``section.key=value`` strings; values parse as YAML scalars."""
        tree: dict = {}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigurationError(f"override {pair!r} is not of the form key=value")
            dotted, raw = pair.split("=", 1)
            node = tree
            parts = dotted.strip().split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = yaml.safe_load(raw)
        self.data = _merge(self.data, tree)

    def show(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False, default_flow_style=False)

    # -- builders -----------------------------------------------------------

    def generator_spec(self) -> GeneratorSpec:
        g = self.data["generator"]
        if g["preset"] == "full":
            return GeneratorSpec.full_scale(g["family"], g["resolution"],
                                            n_classes=g["n_classes"])
        if g["preset"] == "desk":
            return GeneratorSpec.desk(g["family"], g["resolution"], base=g["base"],
                                      cap=g["cap"], d_w=g["d_w"],
                                      n_classes=g["n_classes"])
        raise ConfigurationError(f"generator.preset must be 'desk' or 'full', got {g['preset']!r}")

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec.from_generator(
            self.generator_spec(), fused_scale=self.data["encoder"]["fused_scale"]
        )

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(**self.data["attention"])

    def loss_weights(self, strategy: Optional[int] = None) -> LossWeights:
        d = self.data["loss"]
        strategy = strategy if strategy is not None else self.data["train"]["strategy"]
        base = LossWeights.for_strategy(strategy)
        return LossWeights(
            alpha=d["alpha"], beta=d["beta"], gamma=d["gamma"], delta=d["delta"],
            epsilon=d["epsilon"],
            mu1=base.mu1 if d["mu1"] is None else d["mu1"],
            mu2=base.mu2 if d["mu2"] is None else d["mu2"],
        )

    def metric_options(self) -> MetricOptions:
        d = self.data["loss"]
        return MetricOptions(mse_mode=d["mse_mode"], ssim_window=d["ssim_window"])

    def train_config(self) -> TrainConfig:
        t = self.data["train"]
        return TrainConfig(
            learning_rate=t["learning_rate"], adam_beta1=t["adam_beta1"],
            adam_beta2=t["adam_beta2"], samples_per_epoch=t["samples_per_epoch"],
            epochs=t["epochs"], batch_size=t["batch_size"], strategy=t["strategy"],
            weights=self.loss_weights(t["strategy"]),
            latent_source=t["latent_source"], seed=self.data["seed"],
            skip_threshold=t["skip_threshold"], fixed_latents=t["fixed_latents"],
            stop_at_mse=t["stop_at_mse"], eval_every=t["eval_every"],
        )

    def backbone(self):
        b = self.data["backbone"]
        return load_backbone(b["name"], seed=b["seed"], weights_path=b["weights_path"])
