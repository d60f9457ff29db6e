"""Acceptance suite: one test per shipped guarantee, one verdict line each.

Every test prints ``acceptance <n> <name>: PASS/FAIL`` (visible with -s;
the per-test PASSED/FAILED line of ``pytest -v`` mirrors it) and also
asserts the documented runtime ceiling for its criterion.
"""

import math
import time

import pytest
import torch

from ganinv import (
    AttentionConfig,
    EditRequest,
    EncoderSpec,
    GeneratorSpec,
    LatentBundle,
    LossWeights,
    MetricOptions,
    TinyBackbone,
    TrainConfig,
    apply_strategy_gating,
    build_encoder,
    build_mapping,
    build_toy_generator,
    centre_views,
    channel_schedule_for,
    cos_loss,
    edit,
    finetune_encoder,
    gradcam_heatmap,
    image_loss,
    invert_batch,
    kl_softmax_loss,
    latent_loss,
    lpips_distance,
    make_views,
    mse_loss,
    optimize_w_direct,
    pair_metrics,
    sample_latents,
    ssim,
    synthesize,
    total_loss,
    train_encoder,
    views_like,
)
from ganinv.encoder import conv_plan
from ganinv.training import reconstruct


def verdict(num: int, name: str, failures: list, elapsed: float, limit: float):
    ok = not failures and elapsed <= limit
    print(f"acceptance {num} {name}: {'PASS' if ok else 'FAIL'} "
          f"({elapsed:.1f}s of {limit:.0f}s allowed)")
    assert not failures, f"criterion {num} ({name}): " + "; ".join(failures)
    assert elapsed <= limit, f"criterion {num} ran {elapsed:.1f}s, limit {limit:.0f}s"


@pytest.fixture(scope="module")
def overfit_run():
    """The shared desk-scale training run behind criteria 5 and 6."""
    spec = GeneratorSpec("style", 32, [8, 16, 32, 32], d_w=32, d_z=32)
    gen = build_toy_generator(spec, seed=0)
    mapping = build_mapping(spec, seed=0)
    enc = build_encoder(EncoderSpec.from_generator(spec), seed=1)
    backbone = TinyBackbone(seed=0)
    att = AttentionConfig(mode="centre", crop_frac_at1=1.0, crop_frac_at2=0.625)
    config = TrainConfig(samples_per_epoch=64, epochs=250, batch_size=8,
                         strategy=1, fixed_latents=True, seed=5)
    start = time.monotonic()
    enc, history = train_encoder(gen, mapping, enc, att, config, backbone=backbone)
    elapsed = time.monotonic() - start
    return {"spec": spec, "gen": gen, "mapping": mapping, "enc": enc,
            "backbone": backbone, "att": att, "config": config,
            "history": history, "train_seconds": elapsed}


def test_criterion_1_metric_identities():
    start = time.monotonic()
    failures = []
    g = torch.Generator().manual_seed(4)
    a = torch.rand(2, 3, 16, 16, generator=g) * 2 - 1
    backbone = TinyBackbone(seed=0)

    for name, value, ideal in [
        ("mse", float(mse_loss(a, a.clone())), 0.0),
        ("cos", float(cos_loss(a, a.clone())), 0.0),
        ("kl", float(kl_softmax_loss(a, a.clone())), 0.0),
        ("lpips", float(lpips_distance(a, a.clone(), backbone)), 0.0),
        ("ssim", float(ssim((a + 1) / 2, (a.clone() + 1) / 2, dynamic_range=1.0)), 1.0),
    ]:
        if abs(value - ideal) > 1e-6:
            failures.append(f"{name} self-pair {value!r}, ideal {ideal}")
    pm = pair_metrics(a, a.clone(), backbone)
    if not all(v == float("inf") for v in pm["psnr"]):
        failures.append(f"psnr self-pair {pm['psnr']}, ideal inf")
    if any(abs(v - 1.0) > 1e-6 for v in pm["cs"]):
        failures.append(f"cs self-pair {pm['cs']}, ideal 1")

    # KL against a plain-Python float64 row loop.
    x = torch.randn(6, 9, generator=g, dtype=torch.float64)
    y = torch.randn(6, 9, generator=g, dtype=torch.float64)

    def softmax_row(row):
        m = max(row)
        exps = [math.exp(v - m) for v in row]
        s = sum(exps)
        return [e / s for e in exps]

    expected = 0.0
    for i in range(x.shape[0]):
        pa = softmax_row(x[i].tolist())
        pb = softmax_row(y[i].tolist())
        expected += sum(q * math.log(q / p) for p, q in zip(pa, pb))
    expected /= x.shape[0]
    got = float(kl_softmax_loss(x, y))
    if abs(got - expected) > 1e-9:
        failures.append(f"kl oracle {got!r} vs {expected!r}")

    # Constant images: variances vanish, SSIM collapses to the mean term.
    # Double precision, as for the gradient checks: float32 window sums
    # leave ~1e-4 cancellation residue in the (zero) variance terms.
    c1 = 0.01 ** 2
    closed = (2 * 0.3 * 0.7 + c1) / (0.3**2 + 0.7**2 + c1)
    got = float(ssim(torch.full((1, 1, 16, 16), 0.3, dtype=torch.float64),
                     torch.full((1, 1, 16, 16), 0.7, dtype=torch.float64),
                     dynamic_range=1.0))
    if abs(got - closed) > 1e-6:
        failures.append(f"ssim closed form {got!r} vs {closed!r}")

    verdict(1, "metric identities", failures, time.monotonic() - start, 60.0)


def test_criterion_2_gradient_correctness():
    start = time.monotonic()
    failures = []
    backbone = TinyBackbone(seed=0).double()
    att = AttentionConfig(mode="centre")
    opts = MetricOptions(ssim_window=3)
    weights = LossWeights()  # alpha 5, beta 3, gamma 2, delta 1, epsilon 0.01

    g = torch.Generator().manual_seed(2)
    x_target = torch.tanh(torch.randn(2, 3, 8, 8, generator=g, dtype=torch.float64))
    x0 = torch.tanh(torch.randn(2, 3, 8, 8, generator=g, dtype=torch.float64)) * 0.5
    w_target = torch.randn(2, 16, generator=g, dtype=torch.float64)
    w0 = torch.randn(2, 16, generator=g, dtype=torch.float64)
    views_y = make_views(x_target, att, backbone)

    def f(x, w):
        views_hat = views_like(x, views_y, backbone, att)
        image_part = image_loss(views_y, views_hat, weights, backbone, opts)
        latent_part = latent_loss(w_target, w, weights, opts)
        return total_loss(image_part, latent_part, weights).total

    x = x0.clone().requires_grad_(True)
    w = w0.clone().requires_grad_(True)
    f(x, w).backward()
    analytic = {"image": x.grad.clone(), "latent": w.grad.clone()}

    h = 1e-5

    def fd(base_x, base_w, which):
        t = (base_x if which == "image" else base_w).clone()
        flat = t.view(-1)
        out = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                hi = float(f(t, base_w) if which == "image" else f(base_x, t))
                flat[i] = orig - h
                lo = float(f(t, base_w) if which == "image" else f(base_x, t))
                flat[i] = orig
            out[i] = (hi - lo) / (2 * h)
        return out.view(t.shape)

    for which in ("image", "latent"):
        numeric = fd(x0, w0, which)
        rel = float((numeric - analytic[which]).norm()
                    / max(float(numeric.norm()), float(analytic[which].norm())))
        if rel > 1e-3:
            failures.append(f"{which} gradient relative error {rel:.3e}")

    verdict(2, "gradient correctness", failures, time.monotonic() - start, 120.0)


def test_criterion_3_architecture_conformance():
    start = time.monotonic()
    failures = []
    schedule = channel_schedule_for(1024)
    if schedule != [16, 32, 64, 128, 256, 512, 512, 512, 512]:
        failures.append(f"1024 channel schedule {schedule}")

    full = GeneratorSpec.full_scale("style", 1024)
    espec = EncoderSpec.from_generator(full)
    if espec.channel_schedule != schedule:
        failures.append("encoder spec diverges from the generator schedule")
    plan = conv_plan(espec)
    for k, block in enumerate(plan):
        nxt = schedule[k + 1] if k + 1 < len(schedule) else schedule[k]
        if block != [(schedule[k], schedule[k]), (schedule[k], nxt)]:
            failures.append(f"block {k} convs {block}")

    for family in ("progressive", "class_conditional"):
        desk = GeneratorSpec.desk(family, resolution=32,
                                  n_classes=10 if family == "class_conditional" else 0)
        mirror = EncoderSpec.from_generator(desk)
        if mirror.channel_schedule != desk.channel_schedule:
            failures.append(f"{family} desk schedule mismatch")

    enc = build_encoder(espec, seed=0)
    with torch.no_grad():
        bundle = enc(torch.zeros(1, 3, 1024, 1024))
    if tuple(bundle.w.shape) != (1, 18, 512):
        failures.append(f"w shape {tuple(bundle.w.shape)}")
    if tuple(bundle.z_c.shape) != (1, 512, 4, 4):
        failures.append(f"z_c shape {tuple(bundle.z_c.shape)}")

    verdict(3, "architecture conformance", failures, time.monotonic() - start, 60.0)


def test_criterion_4_strategy_gating():
    start = time.monotonic()
    failures = []
    spec = GeneratorSpec("style", 16, [8, 16, 32], d_w=16, d_z=16)
    gen = build_toy_generator(spec, seed=0)
    mapping = build_mapping(spec, seed=0)
    enc = build_encoder(EncoderSpec.from_generator(spec), seed=1)
    backbone = TinyBackbone(seed=0)
    att = AttentionConfig(mode="centre")
    latents = sample_latents(spec, 4, seed=3, mapping=mapping)
    with torch.no_grad():
        x, _ = synthesize(gen, latents)
    views = make_views(x, att, backbone)
    orig_only = LossWeights(mu1=0.0, mu2=0.0)

    grads = {}
    for strategy in (1, 2):
        for p in enc.parameters():
            p.grad = None
        bundle = enc(x)
        x_hat = reconstruct(gen, bundle)
        views_hat = apply_strategy_gating(strategy, views_like(x_hat, views, backbone, att))
        image_loss(views, views_hat, orig_only, backbone).total.backward()
        grads[strategy] = max(
            float(p.grad.abs().max()) for p in enc.parameters() if p.grad is not None
        ) if any(p.grad is not None for p in enc.parameters()) else 0.0

    if grads[1] != 0.0:
        failures.append(f"strategy 1 original-scale gradient {grads[1]:.3e}, expected 0")
    if grads[2] <= 0.0:
        failures.append("strategy 2 original-scale gradient is zero")

    verdict(4, "strategy gating", failures, time.monotonic() - start, 60.0)


def test_criterion_5_overfit_oracle(overfit_run):
    failures = []
    run = overfit_run
    steps = run["history"].records[-1]["step"]
    if steps > 2000:
        failures.append(f"{steps} optimizer steps, budget 2000")

    start = time.monotonic()
    g = torch.Generator().manual_seed(run["config"].seed)
    z = torch.randn((64, run["spec"].d_z), generator=g)
    total = 0.0
    with torch.no_grad():
        w = run["mapping"](z)
        x, _ = synthesize(run["gen"], LatentBundle(w=w))
        for i in range(0, 64, 8):
            xb = x[i : i + 8]
            x_hat = reconstruct(run["gen"], run["enc"](xb))
            total += float((((xb + 1) / 2) - ((x_hat + 1) / 2)).pow(2).mean()) * xb.shape[0]
    pool_mse = total / 64
    if not pool_mse < 0.02:
        failures.append(f"pool reconstruction MSE {pool_mse:.5f} >= 0.02")

    elapsed = run["train_seconds"] + (time.monotonic() - start)
    verdict(5, f"overfit oracle (mse {pool_mse:.5f})", failures, elapsed, 900.0)


def test_criterion_6_inversion_ordering(overfit_run):
    start = time.monotonic()
    failures = []
    run = overfit_run
    spec, gen, mapping = run["spec"], run["gen"], run["mapping"]

    held = sample_latents(spec, 8, seed=777, mapping=mapping)
    with torch.no_grad():
        x_held, _ = synthesize(gen, held)
    base = invert_batch(run["enc"], gen, x_held, backbone=run["backbone"])
    tuned = finetune_encoder(run["enc"], gen, x_held, steps=200,
                             attention_config=run["att"], backbone=run["backbone"])
    wins = sum(1 for t, b in zip(tuned.metrics["mse"], base.metrics["mse"]) if t < b)
    if wins < 7:
        failures.append(f"finetune beat single-pass inversion on only {wins}/8")

    pool = sample_latents(spec, 16, seed=999, mapping=mapping)
    with torch.no_grad():
        x_pool, _ = synthesize(gen, pool)
    res = optimize_w_direct(gen, x_pool[:4], steps=1000, mapping=mapping, seed=4,
                            attention_config=run["att"], backbone=run["backbone"])
    worst = max(res.metrics["mse"])
    if not worst < 1e-3:
        failures.append(f"direct optimization worst MSE {worst:.2e} >= 1e-3")
    if res.steps_used > 1000:
        failures.append(f"direct optimization used {res.steps_used} steps")

    verdict(6, f"inversion ordering ({wins}/8 wins, direct {worst:.1e})",
            failures, time.monotonic() - start, 600.0)


def test_criterion_7_attention_properties():
    start = time.monotonic()
    failures = []
    backbone = TinyBackbone(seed=0)
    g = torch.Generator().manual_seed(6)
    x = torch.rand(4, 3, 32, 32, generator=g) * 2 - 1

    heat = gradcam_heatmap(x, backbone, tap=2)
    if float(heat.min()) < 0.0:
        failures.append(f"negative heat value {float(heat.min()):.3e}")
    per_image_max = heat.flatten(1).max(dim=1).values
    if not torch.allclose(per_image_max, torch.ones(4), atol=1e-6):
        failures.append(f"per-image heat maxima {per_image_max.tolist()}")

    class Scaled:
        def __init__(self, inner, factor):
            self.inner, self.factor = inner, factor

        def forward_with_tap(self, img, tap):
            logits, acts = self.inner.forward_with_tap(img, tap)
            return logits * self.factor, acts

    scaled = gradcam_heatmap(x, Scaled(backbone, 7.5), tap=2)
    if not torch.allclose(heat, scaled, atol=1e-6):
        failures.append("heat map changed under logit scaling")

    views = centre_views(x, AttentionConfig(mode="centre"))
    for label, boxes in (("at1", views.at1_boxes), ("at2", views.at2_boxes)):
        top, left, h, w = boxes[0].tolist()
        if not (0 <= top and 0 <= left and top + h <= 32 and left + w <= 32):
            failures.append(f"{label} box {boxes[0].tolist()} leaves the frame")
    t1, l1, h1, w1 = views.at1_boxes[0].tolist()
    t2, l2, h2, w2 = views.at2_boxes[0].tolist()
    if not (t1 <= t2 and l1 <= l2 and t2 + h2 <= t1 + h1 and l2 + w2 <= l1 + w1):
        failures.append("at2 region not contained in at1 region")

    for mode in ("centre", "gradcam"):
        cfg = AttentionConfig(mode=mode)
        first = make_views(x, cfg, backbone)
        second = make_views(x, cfg, backbone)
        for name in ("orig", "at1", "at2"):
            if not torch.equal(getattr(first, name), getattr(second, name)):
                failures.append(f"{mode} {name} view not deterministic")

    verdict(7, "attention properties", failures, time.monotonic() - start, 60.0)


def test_criterion_8_edit_algebra():
    start = time.monotonic()
    failures = []
    g = torch.Generator().manual_seed(7)
    w = torch.randn(2, 6, 16, generator=g)
    d = torch.randn(6, 16, generator=g)

    if not torch.allclose(edit(w, EditRequest(d, 0.0)), w, atol=1e-6):
        failures.append("alpha 0 is not the identity")

    forward = edit(w, EditRequest(d, 1.7))
    back = edit(forward, EditRequest(d, -1.7))
    if not torch.allclose(back, w, atol=1e-6):
        failures.append("alpha then -alpha does not return to the start")

    a, b = 0.6, 1.1
    split = edit(edit(w, EditRequest(d, a)), EditRequest(d, b))
    joint = edit(w, EditRequest(d, a + b))
    if not torch.allclose(split, joint, atol=1e-6):
        failures.append("edits are not additive in alpha")

    verdict(8, "edit algebra", failures, time.monotonic() - start, 60.0)
