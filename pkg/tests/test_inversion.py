"""Inversion and editing tests on a tiny 16px generator for speed."""

import pytest
import torch

from ganinv import (
    AttentionConfig,
    EditRequest,
    EncoderSpec,
    GeneratorSpec,
    LatentBundle,
    build_encoder,
    build_mapping,
    build_toy_generator,
    edit,
    finetune_encoder,
    invert_batch,
    load_direction,
    optimize_w_direct,
    sample_latents,
    save_direction,
    synthesize,
)
from ganinv.errors import ConfigurationError, ContractViolation, InvalidInputError
from ganinv.generators import parameter_checksum


SPEC = GeneratorSpec("style", 16, [8, 16, 32], d_w=16, d_z=16)
GEN = build_toy_generator(SPEC, seed=0)
MAPPING = build_mapping(SPEC, seed=0)
ATT = AttentionConfig()


@pytest.fixture(scope="module")
def enc16():
    return build_encoder(EncoderSpec.from_generator(SPEC), seed=1)


@pytest.fixture(scope="module")
def targets():
    lat = sample_latents(SPEC, 3, seed=42, mapping=MAPPING)
    with torch.no_grad():
        y, _ = synthesize(GEN, lat)
    return y


class TestInvertBatch:
    def test_structure(self, enc16, targets, backbone):
        res = invert_batch(enc16, GEN, targets, backbone=backbone)
        assert res.reconstruction.shape == targets.shape
        assert res.steps_used == 0
        for key in ("psnr", "ssim", "mse", "lpips", "cs"):
            assert len(res.metrics[key]) == 3

    def test_deterministic(self, enc16, targets, backbone):
        a = invert_batch(enc16, GEN, targets, backbone=backbone)
        b = invert_batch(enc16, GEN, targets, backbone=backbone)
        torch.testing.assert_close(a.reconstruction, b.reconstruction)

    def test_reconstruction_consistent_with_latents(self, enc16, targets, backbone):
        res = invert_batch(enc16, GEN, targets, backbone=backbone)
        with torch.no_grad():
            again, _ = synthesize(GEN, res.latents)
        torch.testing.assert_close(res.reconstruction, again)

    def test_resolution_mismatch_names_size(self, enc16, backbone):
        with pytest.raises(ContractViolation) as exc:
            invert_batch(enc16, GEN, torch.zeros(1, 3, 32, 32), backbone=backbone)
        assert "16" in str(exc.value)


class TestFinetune:
    def test_zero_steps_equals_invert(self, enc16, targets, backbone):
        a = invert_batch(enc16, GEN, targets, backbone=backbone)
        b = finetune_encoder(enc16, GEN, targets, steps=0, backbone=backbone,
                             attention_config=ATT)
        torch.testing.assert_close(a.latents.w, b.latents.w)
        torch.testing.assert_close(a.reconstruction, b.reconstruction)

    def test_base_encoder_untouched(self, enc16, targets, backbone):
        before = parameter_checksum(enc16)
        finetune_encoder(enc16, GEN, targets, steps=5, backbone=backbone,
                         attention_config=ATT)
        assert parameter_checksum(enc16) == before

    def test_improves_total_on_short_run(self, enc16, targets, backbone):
        base = invert_batch(enc16, GEN, targets, backbone=backbone)
        tuned = finetune_encoder(enc16, GEN, targets, steps=30, backbone=backbone,
                                 attention_config=ATT)
        assert sum(tuned.metrics["mse"]) <= sum(base.metrics["mse"]) + 1e-6


class TestDirect:
    def test_explicit_true_init_is_exact(self, backbone):
        lat = sample_latents(SPEC, 2, seed=7, mapping=MAPPING)
        with torch.no_grad():
            y, _ = synthesize(GEN, lat)
        res = optimize_w_direct(GEN, y, init=lat, steps=3, backbone=backbone,
                                attention_config=ATT)
        assert max(res.metrics["mse"]) < 1e-8

    def test_zero_steps_encoder_init_equals_invert(self, enc16, targets, backbone):
        a = invert_batch(enc16, GEN, targets, backbone=backbone)
        b = optimize_w_direct(GEN, targets, steps=0, enc=enc16, backbone=backbone,
                              attention_config=ATT)
        torch.testing.assert_close(a.latents.w, b.latents.w)

    def test_random_init_needs_mapping(self, targets, backbone):
        with pytest.raises(ConfigurationError):
            optimize_w_direct(GEN, targets, steps=1, backbone=backbone)

    def test_short_run_improves(self, targets, backbone):
        short = optimize_w_direct(GEN, targets, steps=0, mapping=MAPPING,
                                  backbone=backbone, attention_config=ATT, seed=5)
        longer = optimize_w_direct(GEN, targets, steps=60, mapping=MAPPING,
                                   backbone=backbone, attention_config=ATT, seed=5)
        assert sum(longer.metrics["mse"]) < sum(short.metrics["mse"])

    def test_bad_schedule_name(self, targets, backbone):
        with pytest.raises(ConfigurationError):
            optimize_w_direct(GEN, targets, steps=1, mapping=MAPPING,
                              backbone=backbone, lr_schedule="exponential")

    def test_divergent_lr_aborts_with_best(self, backbone):
        """Blasting a converged start point far away trips the abort."""
        lat = sample_latents(SPEC, 2, seed=8, mapping=MAPPING)
        with torch.no_grad():
            y, _ = synthesize(GEN, lat)
        res = optimize_w_direct(GEN, y, init=lat, steps=400, backbone=backbone,
                                attention_config=ATT, learning_rate=50.0,
                                lr_schedule="constant", divergence_patience=20)
        assert res.steps_used < 400
        # Best-so-far keeps the pre-divergence reconstruction.
        assert max(res.metrics["mse"]) < 1e-6


class TestEdit:
    def w(self):
        g = torch.Generator().manual_seed(11)
        return torch.randn(2, 6, 16, generator=g)

    def test_alpha_zero_identity(self):
        w = self.w()
        d = torch.randn(16, generator=torch.Generator().manual_seed(12))
        torch.testing.assert_close(edit(w, EditRequest(d, alpha=0.0)), w)

    def test_additive_inverse(self):
        w = self.w()
        d = torch.randn(6, 16, generator=torch.Generator().manual_seed(13))
        forth = edit(w, EditRequest(d, alpha=1.7))
        back = edit(forth, EditRequest(d, alpha=-1.7))
        torch.testing.assert_close(back, w, atol=1e-6, rtol=1e-6)

    def test_linear_in_alpha(self):
        w = self.w()
        d = torch.randn(16, generator=torch.Generator().manual_seed(14))
        lhs = edit(w, EditRequest(d, alpha=0.4)) + edit(w, EditRequest(d, alpha=0.6)) - w
        rhs = edit(w, EditRequest(d, alpha=1.0))
        torch.testing.assert_close(lhs, rhs, atol=1e-6, rtol=1e-6)

    def test_broadcast_matches_rowwise(self):
        w = self.w()
        d = torch.randn(16, generator=torch.Generator().manual_seed(15))
        stacked = d.expand(6, 16)
        torch.testing.assert_close(
            edit(w, EditRequest(d, alpha=0.5)),
            edit(w, EditRequest(stacked, alpha=0.5)),
        )

    def test_layer_mask(self):
        w = self.w()
        d = torch.randn(16, generator=torch.Generator().manual_seed(16))
        out = edit(w, EditRequest(d, alpha=2.0, layer_mask=[1, 3]))
        torch.testing.assert_close(out[:, [0, 2, 4, 5]], w[:, [0, 2, 4, 5]])
        torch.testing.assert_close(out[:, 1], w[:, 1] + 2.0 * d)

    def test_mask_out_of_range(self):
        with pytest.raises(ContractViolation):
            edit(self.w(), EditRequest(torch.zeros(16), alpha=1.0, layer_mask=[6]))

    def test_non_finite_direction(self):
        with pytest.raises(InvalidInputError):
            EditRequest(torch.tensor([float("nan")] * 16), alpha=1.0)

    def test_width_mismatch(self):
        with pytest.raises(ContractViolation):
            edit(self.w(), EditRequest(torch.zeros(8), alpha=1.0))


class TestDirectionFiles:
    def test_round_trip(self, tmp_path):
        d = torch.randn(16, generator=torch.Generator().manual_seed(17))
        path = tmp_path / "smile.npz"
        save_direction(str(path), d, name="smile", layer_mask=[0, 1],
                       alpha_range=(-3.0, 3.0))
        loaded = load_direction(str(path))
        torch.testing.assert_close(loaded["direction"], d)
        assert loaded["name"] == "smile"
        assert loaded["layer_mask"] == [0, 1]

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_direction(str(tmp_path / "absent.npz"))
