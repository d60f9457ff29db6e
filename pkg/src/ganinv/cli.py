"""Command-line entry points: synth, train, invert, edit, eval.

Thin composition over the library modules. Every command echoes its
fully resolved config (reloadable as-is) into the output directory, and
the report-producing commands write a matplotlib figure next to each
CSV/JSONL artifact. Exit codes: 0 success, 1 contract violation, 2 I/O
problem, 3 configuration problem.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np
import torch

from . import figures
from .config import RunConfig
from .encoder import build_encoder, load_encoder
from .errors import ConfigurationError, ContractViolation, NonFiniteLossError
from .evalharness import (
    MetricReport,
    emit_grid,
    evaluate_pairs,
    load_image,
    pair_metrics,
    save_image,
)
from .generators import (
    LatentBundle,
    build_mapping,
    build_toy_generator,
    load_pretrained,
    sample_latents,
    synthesize,
)
from .inversion import (
    EditRequest,
    edit as edit_latents,
    finetune_encoder,
    invert_batch,
    load_direction,
    optimize_w_direct,
)
from .training import reconstruct, train_encoder


def _build_generator(cfg: RunConfig):
    spec = cfg.generator_spec()
    ckpt = cfg.data["io"]["generator_checkpoint"]
    if ckpt:
        gen = load_pretrained(ckpt, spec.family)
    else:
        gen = build_toy_generator(spec, seed=cfg.data["generator"]["seed"])
    mapping = None
    if gen.spec.family == "style":
        mapping = build_mapping(gen.spec, seed=cfg.data["generator"]["seed"])
    return gen, mapping


def _echo_config(cfg: RunConfig, out_dir: str, resolved_weights=None):
    data = json.loads(json.dumps(cfg.data))  # deep copy via round trip
    if resolved_weights is not None:
        data["loss"]["mu1"] = resolved_weights.mu1
        data["loss"]["mu2"] = resolved_weights.mu2
    import yaml

    with open(os.path.join(out_dir, "config_echo.yaml"), "w") as f:
        yaml.safe_dump(data, f, sort_keys=False)


def _load_image_dir(path: str, resolution: int):
    exts = (".png", ".jpg", ".jpeg")
    files = sorted(f for f in os.listdir(path) if f.lower().endswith(exts))
    if not files:
        raise ContractViolation(f"no images found in {path}")
    ids = [os.path.splitext(f)[0] for f in files]
    batch = torch.stack([load_image(os.path.join(path, f), resolution) for f in files])
    return ids, batch


def _save_latents(bundle: LatentBundle, path: str):
    arrays = {}
    for name in ("w", "z_c", "z", "c"):
        t = getattr(bundle, name)
        if t is not None:
            arrays[name] = t.detach().cpu().numpy()
    np.savez(path, **arrays)


def _report_from_metrics(ids, metrics: dict, echo: dict) -> MetricReport:
    rows = []
    for i, pair_id in enumerate(ids):
        rows.append({
            "id": pair_id,
            "psnr": metrics["psnr"][i],
            "ssim": metrics["ssim"][i],
            "mse_e2": metrics["mse"][i] * 100.0,
            "lpips": metrics["lpips"][i],
            "cs": metrics["cs"][i],
        })
    return MetricReport.from_rows(rows, echo)


def cmd_synth(cfg: RunConfig, args) -> int:
    out = args.out or cfg.data["io"]["out_dir"]
    os.makedirs(out, exist_ok=True)
    gen, mapping = _build_generator(cfg)
    seed = cfg.data["seed"]
    rows = []
    if args.count > 0:
        latents = sample_latents(gen.spec, args.count, seed=seed, mapping=mapping,
                                 generator=gen, with_noise=args.with_noise)
        with torch.no_grad():
            images, _ = synthesize(gen, latents)
        for i in range(args.count):
            name = f"{i:05d}.png"
            save_image(images[i], os.path.join(out, name))
            rows.append({"id": f"{i:05d}", "file": name})
        _save_latents(latents, os.path.join(out, "latents.npz"))
        if args.grid:
            cols = min(args.count, 8)
            grid_rows = (args.count + cols - 1) // cols
            emit_grid(list(images), layout=(grid_rows, cols),
                      path=os.path.join(out, "grid.png"))
    manifest = {
        "family": gen.spec.family,
        "resolution": gen.spec.resolution,
        "count": args.count,
        "seed": seed,
        "images": rows,
    }
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    _echo_config(cfg, out)
    print(f"wrote {len(rows)} image(s) to {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = args.out or cfg.data["io"]["checkpoint_dir"] or \
        os.path.join(cfg.data["io"]["out_dir"], "checkpoints")
    os.makedirs(out, exist_ok=True)
    gen, mapping = _build_generator(cfg)
    enc = build_encoder(cfg.encoder_spec(), seed=cfg.data["encoder"]["seed"])
    train_cfg = cfg.train_config()
    backbone = cfg.backbone()
    enc, history = train_encoder(gen, mapping, enc, cfg.attention_config(),
                                 train_cfg, backbone=backbone,
                                 options=cfg.metric_options(), checkpoint_dir=out)
    figures.loss_curve_figure(history, os.path.join(out, "loss_curve.png"))
    _echo_config(cfg, out, resolved_weights=train_cfg.resolved_weights())
    final = history.records[-1]
    print(f"trained {final['step']} steps; final total {final['total']:.5f}, "
          f"reconstruction MSE {final['recon_mse']:.5f}")
    print(f"checkpoints and history in {out}")
    return 0


def _load_encoder_for(cfg: RunConfig, args):
    path = getattr(args, "encoder", None) or cfg.data["io"]["encoder_checkpoint"]
    if not path:
        raise ConfigurationError(
            "no encoder checkpoint given; pass --encoder or set io.encoder_checkpoint"
        )
    return load_encoder(path)


def cmd_invert(cfg: RunConfig, args) -> int:
    out = args.out or cfg.data["io"]["out_dir"]
    os.makedirs(out, exist_ok=True)
    gen, mapping = _build_generator(cfg)
    enc = _load_encoder_for(cfg, args)
    ids, images = _load_image_dir(args.images, gen.spec.resolution)
    backbone = cfg.backbone()
    weights = cfg.loss_weights()
    if args.mode == "encode":
        result = invert_batch(enc, gen, images, backbone=backbone)
    elif args.mode == "finetune":
        result = finetune_encoder(enc, gen, images, steps=args.steps,
                                  attention_config=cfg.attention_config(),
                                  weights=weights, options=cfg.metric_options(),
                                  backbone=backbone)
    elif args.mode == "direct":
        result = optimize_w_direct(gen, images, steps=args.steps, enc=enc,
                                   mapping=mapping,
                                   attention_config=cfg.attention_config(),
                                   weights=weights, options=cfg.metric_options(),
                                   backbone=backbone)
    else:
        raise ConfigurationError(f"unknown inversion mode {args.mode!r}")
    for i, pair_id in enumerate(ids):
        save_image(result.reconstruction[i], os.path.join(out, f"recon_{pair_id}.png"))
    _save_latents(result.latents, os.path.join(out, "latents.npz"))
    report = _report_from_metrics(ids, result.metrics, {
        "mode": args.mode, "steps_used": result.steps_used,
        "backbone": type(backbone).__name__,
    })
    report.write_csv(os.path.join(out, "metrics.csv"))
    figures.metric_bar_figure(report, os.path.join(out, "metrics.png"))
    figures.inversion_panel_figure(images, result.reconstruction, result.metrics,
                                   os.path.join(out, "panel.png"))
    _echo_config(cfg, out)
    print(report.format_table())
    print(f"reconstructions, metrics.csv and figures in {out}")
    return 0


def cmd_edit(cfg: RunConfig, args) -> int:
    out = args.out or cfg.data["io"]["out_dir"]
    os.makedirs(out, exist_ok=True)
    gen, _ = _build_generator(cfg)
    if gen.spec.family != "style":
        raise ConfigurationError("editing requires the style family (w latents)")
    try:
        with np.load(args.latents) as z:
            if "w" not in z.files:
                raise ContractViolation(f"{args.latents} holds no 'w' array")
            w = torch.from_numpy(z["w"].copy())
            z_c = torch.from_numpy(z["z_c"].copy()) if "z_c" in z.files else None
    except (ValueError, EOFError) as e:
        raise OSError(f"cannot read latents file {args.latents}: {e}") from e
    stored = load_direction(args.direction)
    request = EditRequest(direction=stored["direction"], alpha=args.alpha,
                          layer_mask=stored["layer_mask"])
    w_edit = edit_latents(w, request)
    with torch.no_grad():
        images = gen(w_edit, z_c=z_c)
    for i in range(images.shape[0]):
        save_image(images[i], os.path.join(out, f"edit_{i:05d}.png"))
    _save_latents(LatentBundle(w=w_edit, z_c=z_c), os.path.join(out, "latents.npz"))
    _echo_config(cfg, out)
    print(f"applied {stored['name']} at alpha={args.alpha} to {images.shape[0]} "
          f"image(s); results in {out}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = args.out or cfg.data["io"]["out_dir"]
    os.makedirs(out, exist_ok=True)
    backbone = cfg.backbone()
    report = evaluate_pairs(args.dir_a, args.dir_b, backbone=backbone,
                            config_echo={"dir_a": args.dir_a, "dir_b": args.dir_b})
    report.write_csv(os.path.join(out, "report.csv"))
    figures.metric_bar_figure(report, os.path.join(out, "report.png"))
    _echo_config(cfg, out)
    print(report.format_table())
    print(f"report.csv and report.png in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set train.strategy=2")
    common.add_argument("--show-config", action="store_true",
                        help="print the merged config and exit")

    parser = argparse.ArgumentParser(
        prog="ganinv",
        description="Invert images into the latent space of a frozen generator.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[common],
                       help="sample latents and write generated images")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--out", help="output directory (default: io.out_dir)")
    p.add_argument("--with-noise", action="store_true",
                   help="sample per-layer noise instead of zeros (style family)")
    p.add_argument("--grid", action="store_true", help="also write a montage grid")

    p = sub.add_parser("train", parents=[common],
                       help="train an encoder against the configured generator")
    p.add_argument("--out", help="checkpoint directory")

    p = sub.add_parser("invert", parents=[common], help="invert a directory of images")
    p.add_argument("--images", required=True)
    p.add_argument("--encoder", help="encoder checkpoint directory")
    p.add_argument("--mode", choices=("encode", "finetune", "direct"), default="encode")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--out")

    p = sub.add_parser("edit", parents=[common], help="move stored latents along a direction")
    p.add_argument("--latents", required=True, help="latents.npz from synth/invert")
    p.add_argument("--direction", required=True, help="direction .npz file")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--out")

    p = sub.add_parser("eval", parents=[common], help="score two aligned image directories")
    p.add_argument("--dir-a", required=True)
    p.add_argument("--dir-b", required=True)
    p.add_argument("--out")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "invert": cmd_invert,
    "edit": cmd_edit,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        cfg.apply_overrides(args.set)
        if args.seed is not None:
            cfg.data["seed"] = args.seed
        if args.show_config:
            print(cfg.show(), end="")
            return 0
        if not args.command:
            parser.print_help()
            return 3
        return _COMMANDS[args.command](cfg, args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 3
    except ContractViolation as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NonFiniteLossError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
