"""Batch image-similarity evaluation and report emission.

Pairs of image sets are scored with PSNR, SSIM, MSE, LPIPS and CS, per
pair and aggregated. The CSV file is the canonical artifact; a
human-readable table is printed alongside. Metrics are computed on the
[0, 1] representation of images (LPIPS excepted, which consumes the
native [-1, 1] range), and the MSE column is reported in 1e-2 units.

CS is not a standard acronym, so its definition is part of the report:
cosine similarity between the flattened [0, 1] pixel arrays.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .backbones import TinyBackbone
from .errors import ContractViolation
from .similarity import lpips_distance, ssim as ssim_metric

CS_DEFINITION = "CS = cosine similarity between flattened [0,1] image arrays"

CSV_COLUMNS = ("id", "psnr", "ssim", "mse_e2", "lpips", "cs")


def psnr(a: torch.Tensor, b: torch.Tensor, dynamic_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    if a.shape != b.shape:
        raise ContractViolation(f"psnr: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float((a.to(torch.float64) - b.to(torch.float64)).pow(2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(dynamic_range**2 / mse)


def pair_metrics(a: torch.Tensor, b: torch.Tensor, backbone=None) -> dict:
    """Per-image metric lists for two aligned batches in [-1, 1].

    Returns {"psnr", "ssim", "mse", "lpips", "cs"}; PSNR/SSIM/MSE/CS are
    computed on the [0, 1] remap with dynamic range 1, LPIPS on the
    native range through the backbone (the seeded tiny backbone when
    none is given).
    """
    if a.shape != b.shape or a.dim() != 4:
        raise ContractViolation(
            f"pair_metrics expects matching (n, c, h, w) batches, got "
            f"{tuple(a.shape)} vs {tuple(b.shape)}"
        )
    if backbone is None:
        backbone = TinyBackbone(seed=0)
    a01 = (a + 1.0) / 2.0
    b01 = (b + 1.0) / 2.0
    out = {"psnr": [], "ssim": [], "mse": [], "lpips": [], "cs": []}
    for i in range(a.shape[0]):
        ai, bi = a01[i : i + 1], b01[i : i + 1]
        out["psnr"].append(psnr(ai, bi, dynamic_range=1.0))
        out["ssim"].append(float(ssim_metric(ai, bi, dynamic_range=1.0)))
        out["mse"].append(float((ai - bi).pow(2).mean()))
        with torch.no_grad():
            out["lpips"].append(float(lpips_distance(a[i : i + 1], b[i : i + 1], backbone)))
        av, bv = ai.flatten().double(), bi.flatten().double()
        na, nb = float(av.norm()), float(bv.norm())
        if na == 0.0 or nb == 0.0:
            out["cs"].append(0.0 if (na == 0.0) != (nb == 0.0) else 1.0)
        else:
            out["cs"].append(float(av.dot(bv) / (na * nb)))
    return out


@dataclass
class MetricReport:
    """Rows of per-pair metrics plus their arithmetic means and a config echo."""

    rows: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list, config: dict) -> "MetricReport":
        agg = {}
        for key in CSV_COLUMNS[1:]:
            agg[key] = sum(r[key] for r in rows) / len(rows) if rows else float("nan")
        config = dict(config)
        config["cs_definition"] = CS_DEFINITION
        return cls(rows=rows, aggregate=agg, config=config)

    def write_csv(self, path: str):
        with open(path, "w", newline="") as f:
            f.write(f"# {CS_DEFINITION}; mse_e2 = per-pixel MSE x 100\n")
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow([row["id"]] + [repr(row[k]) for k in CSV_COLUMNS[1:]])
            writer.writerow(["mean"] + [repr(self.aggregate[k]) for k in CSV_COLUMNS[1:]])

    def format_table(self) -> str:
        lines = []
        for key, value in sorted(self.config.items()):
            lines.append(f"# {key}: {value}")
        header = f"{'id':>12} {'psnr':>9} {'ssim':>7} {'mse_e2':>8} {'lpips':>7} {'cs':>7}"
        lines.append(header)
        lines.append("-" * len(header))

        def fmt(row, label):
            return (f"{label:>12} {row['psnr']:>9.3f} {row['ssim']:>7.4f} "
                    f"{row['mse_e2']:>8.4f} {row['lpips']:>7.4f} {row['cs']:>7.4f}")

        for row in self.rows:
            lines.append(fmt(row, str(row["id"])[:12]))
        lines.append("-" * len(header))
        lines.append(fmt(self.aggregate | {"id": "mean"}, "mean"))
        return "\n".join(lines)


def _as_image_map(source) -> dict:
    """Normalize an image source to {id: (3, h, w) tensor in [-1, 1]}.

    Accepts a directory of PNG/JPEG files (ids are file stems), an
    existing {id: tensor} map, or a batch tensor (ids are zero-padded
    indices).
    """
    if isinstance(source, dict):
        return source
    if isinstance(source, torch.Tensor):
        if source.dim() != 4:
            raise ContractViolation("tensor image sources must be (n, c, h, w)")
        return {f"{i:05d}": source[i] for i in range(source.shape[0])}
    if isinstance(source, (str, os.PathLike)):
        exts = (".png", ".jpg", ".jpeg")
        files = sorted(
            f for f in os.listdir(source) if f.lower().endswith(exts)
        )
        return {os.path.splitext(f)[0]: load_image(os.path.join(source, f))
                for f in files}
    raise ContractViolation(f"unsupported image source type {type(source).__name__}")


def evaluate_pairs(set_a, set_b, backbone=None, config_echo: Optional[dict] = None) -> MetricReport:
    """Score two id-aligned image sets; rows are ordered by id.

    Ids must match exactly between the sets; any unmatched ids on either
    side are listed in the error.
    """
    map_a, map_b = _as_image_map(set_a), _as_image_map(set_b)
    only_a = sorted(set(map_a) - set(map_b))
    only_b = sorted(set(map_b) - set(map_a))
    if only_a or only_b:
        raise ContractViolation(
            f"image sets are not id-aligned; only in first: {only_a}; "
            f"only in second: {only_b}"
        )
    if not map_a:
        raise ContractViolation("image sets are empty")
    ids = sorted(map_a)
    a = torch.stack([map_a[i] for i in ids])
    b = torch.stack([map_b[i] for i in ids])
    metrics = pair_metrics(a, b, backbone)
    rows = []
    for idx, pair_id in enumerate(ids):
        rows.append({
            "id": pair_id,
            "psnr": metrics["psnr"][idx],
            "ssim": metrics["ssim"][idx],
            "mse_e2": metrics["mse"][idx] * 100.0,
            "lpips": metrics["lpips"][idx],
            "cs": metrics["cs"][idx],
        })
    echo = {"pairs": len(rows), "backbone": type(backbone).__name__ if backbone else "TinyBackbone"}
    if config_echo:
        echo.update(config_echo)
    return MetricReport.from_rows(rows, echo)


# ---------------------------------------------------------------------------
# Image file plumbing


def tensor_to_pil(t: torch.Tensor) -> Image.Image:
    """(3, h, w) in [-1, 1] -> 8-bit RGB image, values clamped."""
    if t.dim() != 3 or t.shape[0] != 3:
        raise ContractViolation(f"expected a (3, h, w) tensor, got {tuple(t.shape)}")
    arr = ((t.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return Image.fromarray(arr.permute(1, 2, 0).cpu().numpy())


def save_image(t: torch.Tensor, path: str):
    tensor_to_pil(t).save(path, format="PNG")


def load_image(path: str, resolution: Optional[int] = None) -> torch.Tensor:
    """Read an image file to a (3, h, w) tensor in [-1, 1].

    With a target resolution the image is centre-cropped to a square and
    resized (the documented preprocessing for real-image inversion).
    """
    with Image.open(path) as img:
        img = img.convert("RGB")
        if resolution is not None:
            side = min(img.size)
            left = (img.width - side) // 2
            top = (img.height - side) // 2
            img = img.crop((left, top, left + side, top + side))
            img = img.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1) * 2.0 - 1.0


def emit_grid(images: list, layout: Optional[tuple] = None,
              captions: Optional[list] = None, path: Optional[str] = None) -> Image.Image:
    """Compose a row/column montage of equally sized images.

    ``layout`` is (rows, cols), defaulting to a single row. Output bytes
    are deterministic for fixed inputs (PNG, no metadata).
    """
    if not images:
        raise ContractViolation("emit_grid needs at least one image")
    tiles = [tensor_to_pil(t) if isinstance(t, torch.Tensor) else t for t in images]
    w, h = tiles[0].size
    for i, tile in enumerate(tiles):
        if tile.size != (w, h):
            raise ContractViolation(
                f"emit_grid: image {i} is {tile.size}, expected {(w, h)}"
            )
    if layout is None:
        layout = (1, len(tiles))
    rows, cols = layout
    if rows * cols < len(tiles):
        raise ContractViolation(f"layout {layout} cannot hold {len(tiles)} images")
    if captions is not None and len(captions) != len(tiles):
        raise ContractViolation("captions must pair one-to-one with images")
    caption_h = 12 if captions is not None else 0
    canvas = Image.new("RGB", (cols * w, rows * (h + caption_h)), (255, 255, 255))
    if captions is not None:
        from PIL import ImageDraw

        draw = ImageDraw.Draw(canvas)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        canvas.paste(tile, (c * w, r * (h + caption_h)))
        if captions is not None:
            draw.text((c * w + 2, r * (h + caption_h) + h + 1),
                      str(captions[i]), fill=(0, 0, 0))
    if path is not None:
        canvas.save(path, format="PNG")
    return canvas
