"""Metric harness: psnr, pair scoring, CSV/table reports, image files."""

import csv
import math

import numpy as np
import pytest
import torch

from ganinv import MetricReport, evaluate_pairs, load_image, pair_metrics, psnr, save_image
from ganinv.errors import ContractViolation
from ganinv.evalharness import CS_DEFINITION, CSV_COLUMNS, emit_grid, tensor_to_pil


def flat(value, shape=(1, 3, 8, 8)):
    return torch.full(shape, float(value))


class TestPsnr:
    def test_identical_is_infinite(self):
        a = torch.rand(1, 3, 8, 8)
        assert psnr(a, a.clone()) == float("inf")

    def test_half_range_error(self):
        # mse 0.25 at unit dynamic range: 10*log10(1/0.25) dB
        got = psnr(flat(0.0), flat(0.5), dynamic_range=1.0)
        assert got == pytest.approx(6.020599913, abs=1e-6)

    def test_full_range_error_is_zero_db(self):
        assert psnr(flat(0.0), flat(1.0), dynamic_range=1.0) == pytest.approx(0.0, abs=1e-9)

    def test_dynamic_range_shifts_score(self):
        low = psnr(flat(0.0), flat(1.0), dynamic_range=1.0)
        high = psnr(flat(0.0), flat(1.0), dynamic_range=2.0)
        assert high - low == pytest.approx(20.0 * math.log10(2.0), abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            psnr(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 4, 4))


class TestPairMetrics:
    def test_identical_batch_scores(self, backbone):
        a = torch.rand(3, 3, 16, 16) * 2 - 1
        out = pair_metrics(a, a.clone(), backbone)
        assert set(out) == {"psnr", "ssim", "mse", "lpips", "cs"}
        for values in out.values():
            assert len(values) == 3
        assert all(v == float("inf") for v in out["psnr"])
        assert all(v == pytest.approx(1.0, abs=1e-6) for v in out["ssim"])
        assert all(v == 0.0 for v in out["mse"])
        assert all(v == pytest.approx(0.0, abs=1e-6) for v in out["lpips"])
        assert all(v == pytest.approx(1.0, abs=1e-12) for v in out["cs"])

    def test_mse_uses_unit_range(self, backbone):
        # -1 and 0 in native range are 0 and 0.5 after the [0, 1] remap.
        big = (1, 3, 16, 16)
        out = pair_metrics(flat(-1.0, big), flat(0.0, big), backbone)
        assert out["mse"][0] == pytest.approx(0.25, abs=1e-9)
        assert out["psnr"][0] == pytest.approx(6.020599913, abs=1e-6)

    def test_cs_zero_norm_conventions(self, backbone):
        big = (1, 3, 16, 16)
        black = flat(-1.0, big)  # all zeros in [0, 1]
        assert pair_metrics(black, black.clone(), backbone)["cs"][0] == 1.0
        assert pair_metrics(black, flat(0.5, big), backbone)["cs"][0] == 0.0

    def test_batch_mismatch_rejected(self, backbone):
        with pytest.raises(ContractViolation):
            pair_metrics(torch.zeros(2, 3, 8, 8), torch.zeros(3, 3, 8, 8), backbone)
        with pytest.raises(ContractViolation):
            pair_metrics(torch.zeros(3, 8, 8), torch.zeros(3, 8, 8), backbone)

    def test_default_backbone_is_seeded_tiny(self):
        a = torch.rand(1, 3, 16, 16) * 2 - 1
        b = torch.rand(1, 3, 16, 16) * 2 - 1
        first = pair_metrics(a, b)["lpips"][0]
        second = pair_metrics(a, b)["lpips"][0]
        assert first == second


class TestReport:
    def rows(self):
        return [
            {"id": "a", "psnr": 10.0, "ssim": 0.5, "mse_e2": 2.0, "lpips": 0.1, "cs": 0.9},
            {"id": "b", "psnr": 20.0, "ssim": 0.7, "mse_e2": 4.0, "lpips": 0.3, "cs": 0.8},
        ]

    def test_aggregate_is_arithmetic_mean(self):
        report = MetricReport.from_rows(self.rows(), {})
        assert report.aggregate["psnr"] == pytest.approx(15.0)
        assert report.aggregate["mse_e2"] == pytest.approx(3.0)

    def test_config_carries_cs_definition(self):
        report = MetricReport.from_rows(self.rows(), {"note": "x"})
        assert report.config["cs_definition"] == CS_DEFINITION
        assert report.config["note"] == "x"

    def test_csv_round_trips_floats_exactly(self, tmp_path):
        rows = self.rows()
        rows[0]["psnr"] = 10.123456789012345
        report = MetricReport.from_rows(rows, {})
        path = tmp_path / "report.csv"
        report.write_csv(str(path))
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# ")
        assert CS_DEFINITION in lines[0]
        parsed = list(csv.reader(lines[1:]))
        assert tuple(parsed[0]) == CSV_COLUMNS
        assert float(parsed[1][1]) == rows[0]["psnr"]
        assert parsed[-1][0] == "mean"
        assert float(parsed[-1][3]) == pytest.approx(3.0)

    def test_table_has_config_and_mean(self):
        report = MetricReport.from_rows(self.rows(), {"pairs": 2})
        table = report.format_table()
        assert "# pairs: 2" in table
        assert table.splitlines()[-1].startswith("        mean")


class TestEvaluatePairs:
    def batches(self):
        g = torch.Generator().manual_seed(3)
        a = torch.rand(3, 3, 16, 16, generator=g) * 2 - 1
        b = (a + 0.1 * torch.randn(a.shape, generator=g)).clamp(-1, 1)
        return a, b

    def test_tensor_sources_use_index_ids(self, backbone):
        a, b = self.batches()
        report = evaluate_pairs(a, b, backbone)
        assert [r["id"] for r in report.rows] == ["00000", "00001", "00002"]
        assert report.config["pairs"] == 3

    def test_mse_column_is_scaled_by_100(self, backbone):
        a, b = self.batches()
        report = evaluate_pairs(a, b, backbone)
        raw = pair_metrics(a, b, backbone)["mse"]
        for row, value in zip(report.rows, raw):
            assert row["mse_e2"] == pytest.approx(value * 100.0, rel=1e-12)

    def test_dict_sources_sort_by_id(self, backbone):
        a, b = self.batches()
        map_a = {"zz": a[0], "aa": a[1]}
        map_b = {"zz": b[0], "aa": b[1]}
        report = evaluate_pairs(map_a, map_b, backbone)
        assert [r["id"] for r in report.rows] == ["aa", "zz"]

    def test_unmatched_ids_are_listed(self, backbone):
        a, b = self.batches()
        with pytest.raises(ContractViolation, match=r"only in first: \['x'\].*only in second: \['y'\]"):
            evaluate_pairs({"x": a[0], "s": a[1]}, {"y": b[0], "s": b[1]}, backbone)

    def test_empty_sets_rejected(self, backbone):
        with pytest.raises(ContractViolation):
            evaluate_pairs({}, {}, backbone)

    def test_directory_sources(self, tmp_path, backbone):
        a, b = self.batches()
        dir_a, dir_b = tmp_path / "a", tmp_path / "b"
        dir_a.mkdir()
        dir_b.mkdir()
        for i in range(2):
            save_image(a[i], str(dir_a / f"img{i}.png"))
            save_image(b[i], str(dir_b / f"img{i}.png"))
        report = evaluate_pairs(str(dir_a), str(dir_b), backbone,
                                config_echo={"source": "disk"})
        assert [r["id"] for r in report.rows] == ["img0", "img1"]
        assert report.config["source"] == "disk"
        # Files went through 8-bit quantization; scores stay close to
        # the in-memory ones.
        direct = evaluate_pairs(a[:2], b[:2], backbone)
        for row, ref in zip(report.rows, direct.rows):
            assert row["mse_e2"] == pytest.approx(ref["mse_e2"], abs=0.01)


class TestImageFiles:
    def test_tensor_to_pil_clamps_and_quantizes(self):
        t = torch.tensor([[-2.0, -1.0], [0.0, 1.0]]).reshape(1, 2, 2).repeat(3, 1, 1)
        img = tensor_to_pil(t)
        assert img.size == (2, 2)
        arr = np.asarray(img).reshape(-1, 3)
        assert arr[0].tolist() == [0, 0, 0] and arr[1].tolist() == [0, 0, 0]
        assert arr[2].tolist() == [128, 128, 128] and arr[3].tolist() == [255, 255, 255]

    def test_tensor_to_pil_shape_check(self):
        with pytest.raises(ContractViolation):
            tensor_to_pil(torch.zeros(1, 8, 8))

    def test_save_load_round_trip(self, tmp_path):
        # Values already on the 8-bit grid survive the trip exactly.
        g = torch.Generator().manual_seed(0)
        levels = torch.randint(0, 256, (3, 8, 8), generator=g).float()
        t = levels / 255.0 * 2.0 - 1.0
        path = tmp_path / "rt.png"
        save_image(t, str(path))
        back = load_image(str(path))
        assert back.shape == (3, 8, 8)
        assert torch.allclose(back, t, atol=1e-6)

    def test_load_centre_crops_then_resizes(self, tmp_path):
        # Wide image, red centre square: crop keeps only the red part.
        t = torch.full((3, 6, 12), -1.0)
        t[0, :, 3:9] = 1.0
        t[2, :, :3] = 1.0
        t[2, :, 9:] = 1.0
        path = tmp_path / "wide.png"
        save_image(t, str(path))
        got = load_image(str(path), resolution=6)
        assert got.shape == (3, 6, 6)
        assert float(got[0].min()) > 0.9
        assert float(got[2].max()) < -0.9


class TestEmitGrid:
    def tiles(self, n=3):
        g = torch.Generator().manual_seed(1)
        return [torch.rand(3, 8, 8, generator=g) * 2 - 1 for _ in range(n)]

    def test_default_layout_is_single_row(self):
        grid = emit_grid(self.tiles(3))
        assert grid.size == (24, 8)

    def test_layout_and_captions(self):
        grid = emit_grid(self.tiles(3), layout=(2, 2), captions=["a", "b", "c"])
        assert grid.size == (16, 2 * (8 + 12))

    def test_layout_too_small(self):
        with pytest.raises(ContractViolation):
            emit_grid(self.tiles(3), layout=(1, 2))

    def test_mixed_sizes_rejected(self):
        tiles = self.tiles(2) + [torch.rand(3, 4, 4)]
        with pytest.raises(ContractViolation):
            emit_grid(tiles)

    def test_caption_count_must_match(self):
        with pytest.raises(ContractViolation):
            emit_grid(self.tiles(2), captions=["only one"])

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            emit_grid([])

    def test_file_bytes_deterministic(self, tmp_path):
        tiles = self.tiles(4)
        p1, p2 = tmp_path / "g1.png", tmp_path / "g2.png"
        emit_grid(tiles, layout=(2, 2), captions=list("wxyz"), path=str(p1))
        emit_grid(tiles, layout=(2, 2), captions=list("wxyz"), path=str(p2))
        assert p1.read_bytes() == p2.read_bytes()
