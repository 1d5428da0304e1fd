"""Dataset tests: stack identities, file round trips, synthetic scenes."""

import numpy as np
import pytest

from superspectral import dataset as ds
from superspectral.errors import DataError

from oracles import density_map_naive, rgb_from_stack_naive


def small_stack(seed=0, bands=24, h=6, w=7):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(10, 240, size=(bands, h, w)).astype(np.float32)
    return ds.SpectralStack(vals, np.asarray(ds.DEFAULT_WAVELENGTHS_NM[:bands]))


class TestSpectralStack:
    def test_validation(self):
        wl = np.asarray(ds.DEFAULT_WAVELENGTHS_NM)
        with pytest.raises(DataError):
            ds.SpectralStack(np.zeros((24, 4), np.float32), wl)
        with pytest.raises(DataError):
            ds.SpectralStack(np.zeros((23, 4, 4), np.float32), wl)
        with pytest.raises(DataError):
            ds.SpectralStack(np.full((24, 4, 4), 260.0, np.float32), wl)
        with pytest.raises(DataError):
            ds.SpectralStack(np.zeros((24, 4, 4), np.float32), wl[::-1])

    def test_from_array_clips(self):
        wl = [500.0, 510.0]
        stack = ds.SpectralStack.from_array(np.array([[[-5.0]], [[300.0]]]), wl, clip=True)
        assert stack.values[0, 0, 0] == 0.0
        assert stack.values[1, 0, 0] == 255.0

    def test_band_near(self):
        stack = small_stack()
        assert stack.wavelengths_nm[stack.band_near(544.0)] == 540.0
        assert stack.wavelengths_nm[stack.band_near(460.0)] == 460.0
        assert stack.wavelengths_nm[stack.band_near(10000.0)] == 690.0

    def test_pixel_spectra_layout(self):
        stack = small_stack()
        spectra = stack.pixel_spectra()
        assert spectra.shape == (stack.height * stack.width, stack.bands)
        np.testing.assert_array_equal(spectra[3], stack.values[:, 0, 3])

    def test_save_load_round_trip_is_bit_exact(self, tmp_path):
        stack = small_stack(1)
        path = tmp_path / "s.json"
        ds.save_stack(path, stack)
        again = ds.load_stack(path)
        assert again.values.tobytes() == stack.values.tobytes()
        np.testing.assert_array_equal(again.wavelengths_nm, stack.wavelengths_nm)

        header1 = path.read_bytes()
        raw1 = (tmp_path / "s.raw").read_bytes()
        ds.save_stack(path, stack)
        assert path.read_bytes() == header1
        assert (tmp_path / "s.raw").read_bytes() == raw1

    def test_load_rejects_inconsistent_payload(self, tmp_path):
        stack = small_stack(2)
        path = tmp_path / "s.json"
        ds.save_stack(path, stack)
        raw = tmp_path / "s.raw"
        raw.write_bytes(raw.read_bytes()[:-4])
        with pytest.raises(DataError):
            ds.load_stack(path)

    def test_load_rejects_wrong_dtype_or_order(self, tmp_path):
        import json
        stack = small_stack(3)
        path = tmp_path / "s.json"
        ds.save_stack(path, stack)
        header = json.loads(path.read_text())
        for key, bad in [("dtype", "f64le"), ("order", "pixel-interleaved")]:
            broken = dict(header)
            broken[key] = bad
            path.write_text(json.dumps(broken))
            with pytest.raises(DataError):
                ds.load_stack(path)


class TestCameraResponse:
    def test_default_rows_sum_to_one(self):
        resp = ds.default_response()
        np.testing.assert_allclose(resp.matrix.sum(axis=1), 1.0, atol=1e-12)
        assert resp.bands == 24

    def test_save_load_round_trip(self, tmp_path):
        resp = ds.default_response()
        path = tmp_path / "r.csv"
        ds.save_response(path, resp)
        again = ds.load_response(path)
        np.testing.assert_array_equal(again.matrix, resp.matrix)
        np.testing.assert_array_equal(again.wavelengths_nm, resp.wavelengths_nm)

    def test_rgb_matches_loop_reference(self):
        stack = small_stack(4)
        resp = ds.default_response()
        rgb = ds.synthesize_rgb(stack, resp)
        ref = rgb_from_stack_naive(stack.values, resp.matrix)
        assert rgb.shape == (3, stack.height, stack.width)
        np.testing.assert_allclose(rgb, ref, rtol=1e-6, atol=1e-4)

    def test_band_grid_mismatch_rejected(self):
        stack = small_stack(5)
        resp = ds.default_response(np.asarray(ds.DEFAULT_WAVELENGTHS_NM) + 5.0)
        with pytest.raises(DataError):
            ds.synthesize_rgb(stack, resp)


class TestSpotsAndDensity:
    def test_density_matches_loop_reference(self):
        uv = np.array([[2.0, 3.0], [7.5, 1.25], [4.0, 4.0]])
        dens = ds.make_density_map((6, 9), uv, sigma=1.7)
        ref = density_map_naive((6, 9), uv, 1.7)
        np.testing.assert_allclose(dens, ref, atol=1e-6)

    def test_density_is_one_at_integer_centers(self):
        uv = np.array([[3.0, 2.0], [0.0, 0.0], [8.0, 5.0]])
        dens = ds.make_density_map((6, 9), uv)
        for u, v in uv:
            assert dens[int(v), int(u)] == 1.0

    def test_density_pair_partitions_unity(self):
        uv = np.array([[3.2, 2.8], [6.0, 1.0]])
        d_hsi = ds.make_density_map((7, 8), uv)
        d_rgb = (1.0 - d_hsi).astype(np.float32)
        np.testing.assert_allclose(d_hsi + d_rgb, 1.0, atol=1e-6)

    def test_sparse_stack_threshold(self):
        stack = small_stack(6)
        uv = np.array([[2.0, 2.0]])
        dens = ds.make_density_map((stack.height, stack.width), uv)
        sparse = ds.make_sparse_stack(stack, dens, threshold=0.05)
        mask = dens >= 0.05
        assert np.all(sparse[:, ~mask] == 0.0)
        expected = (stack.values * dens[None]).astype(np.float32)
        np.testing.assert_array_equal(sparse[:, mask], expected[:, mask])
        assert mask.any() and (~mask).any()

    def test_spot_csv_round_trip(self, tmp_path):
        spots = ds.SpotSet(np.array([3, 1, 7]), np.array([[1.5, 2.0], [0.0, 4.25], [3.0, 3.0]]),
                           np.array([500.0, 540.0, 620.0]))
        path = tmp_path / "spots.csv"
        ds.save_spots(path, spots)
        again = ds.load_spots(path)
        np.testing.assert_array_equal(again.ids, spots.ids)
        np.testing.assert_array_equal(again.uv, spots.uv)
        np.testing.assert_array_equal(again.wavelengths_nm, spots.wavelengths_nm)

    def test_spot_csv_rejects_bad_header(self, tmp_path):
        path = tmp_path / "spots.csv"
        path.write_text("u,v\n1,2\n")
        with pytest.raises(DataError):
            ds.load_spots(path)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(DataError):
            ds.SpotSet(np.array([1, 1]), np.zeros((2, 2)), np.zeros(2))


class TestAugment:
    def test_involution_and_period(self):
        stack = small_stack(7)
        flip = ds.Augment(flip_h=True)
        twice = ds.apply_augment(ds.apply_augment(stack, flip), flip)
        np.testing.assert_array_equal(twice.values, stack.values)
        rot = ds.Augment(quarter_turns=1)
        four = stack
        for _ in range(4):
            four = ds.apply_augment(four, rot)
        np.testing.assert_array_equal(four.values, stack.values)

    @pytest.mark.parametrize("aug", [
        ds.Augment(flip_h=True),
        ds.Augment(flip_v=True),
        ds.Augment(quarter_turns=1),
        ds.Augment(quarter_turns=3),
        ds.Augment(flip_h=True, flip_v=True, quarter_turns=2),
    ])
    def test_points_track_pixels(self, aug):
        stack = small_stack(8)
        uv = np.array([[3.0, 2.0], [0.0, 0.0], [6.0, 5.0]])
        out = ds.apply_augment(stack, aug)
        moved = ds.apply_augment_points(uv, (stack.height, stack.width), aug)
        for (u, v), (mu, mv) in zip(uv, moved):
            np.testing.assert_array_equal(out.values[:, int(mv), int(mu)],
                                          stack.values[:, int(v), int(u)])

    def test_crop_consistency(self):
        stack = small_stack(9)
        cropped = ds.crop_stack(stack, 1, 2, 4, 4)
        assert cropped.values.shape == (stack.bands, 4, 4)
        np.testing.assert_array_equal(cropped.values, stack.values[:, 1:5, 2:6])
        uv = np.array([[2.0, 1.0], [5.0, 4.0], [6.5, 2.0]])
        shifted, keep = ds.crop_points(uv, 1, 2, 4, 4)
        np.testing.assert_array_equal(keep, [True, True, False])
        np.testing.assert_array_equal(shifted, [[0.0, 0.0], [3.0, 3.0]])
        with pytest.raises(DataError):
            ds.crop_stack(stack, 4, 4, 10, 10)


class TestFolds:
    def test_sizes_and_partition(self):
        folds = ds.split_folds(243, 5, seed=3)
        sizes = sorted(len(f) for f in folds)
        assert sizes == [48, 48, 49, 49, 49]
        merged = np.concatenate(folds)
        assert len(np.unique(merged)) == 243

    def test_deterministic(self):
        a = ds.split_folds(60, 5, seed=1)
        b = ds.split_folds(60, 5, seed=1)
        for fa, fb in zip(a, b):
            np.testing.assert_array_equal(fa, fb)

    def test_bad_k(self):
        with pytest.raises(DataError):
            ds.split_folds(10, 1)
        with pytest.raises(DataError):
            ds.split_folds(4, 9)


class TestSynthetic:
    def test_stack_properties(self):
        config = ds.SyntheticConfig(n_stacks=3, seed=5)
        data = ds.generate_synthetic_dataset(config)
        assert len(data.stacks) == 3
        for stack, spots in zip(data.stacks, data.spot_sets):
            assert stack.values.shape == (24, 16, 16)
            assert stack.values.min() >= 0.0 and stack.values.max() <= 255.0
            diffs = np.abs(np.diff(stack.values, axis=0))
            assert diffs.max() < 80.0  # spectra stay smooth band to band
            assert len(spots) == config.spot_count
            assert np.all(spots.uv == np.round(spots.uv))
            dens = ds.make_density_map((16, 16), spots.uv, config.spot_sigma)
            for u, v in spots.uv:
                assert dens[int(v), int(u)] == 1.0

    def test_nullspace_component_invisible_to_camera(self):
        resp = ds.default_response()
        rng = np.random.default_rng(11)
        for _ in range(5):
            residual = ds._nullspace_component(resp, rng)
            assert np.max(np.abs(residual)) == pytest.approx(1.0)
            np.testing.assert_allclose(resp.matrix @ residual, 0.0, atol=1e-12)

    def test_species_shift_deterministic_and_distinct(self):
        assert ds.species_shift_nm("PB") == ds.species_shift_nm("PB")
        shifts = {ds.species_shift_nm(s) for s in ("PB", "CT", "OX", "LM")}
        assert len(shifts) >= 3
        assert all(-30.0 <= s <= 30.0 for s in shifts)

    def test_generation_deterministic(self):
        c = ds.SyntheticConfig(n_stacks=2, seed=9)
        a = ds.generate_synthetic_dataset(c)
        b = ds.generate_synthetic_dataset(c)
        for sa, sb in zip(a.stacks, b.stacks):
            assert sa.values.tobytes() == sb.values.tobytes()

    def test_dataset_directory_round_trip(self, tmp_path):
        data = ds.generate_synthetic_dataset(ds.SyntheticConfig(n_stacks=2, seed=4))
        ds.save_dataset(tmp_path / "d", data)
        back = ds.load_dataset(tmp_path / "d")
        assert len(back) == 2
        for orig, again in zip(data.stacks, back.stacks):
            assert again.values.tobytes() == orig.values.tobytes()
        np.testing.assert_allclose(back.response.matrix, data.response.matrix)
        np.testing.assert_array_equal(back.spot_sets[0].uv, data.spot_sets[0].uv)

    def test_subset_view(self):
        data = ds.generate_synthetic_dataset(ds.SyntheticConfig(n_stacks=4, seed=2))
        sub = data.subset([2, 0])
        assert len(sub) == 2
        assert sub.stacks[0] is data.stacks[2]
        assert sub.spot_sets[1] is data.spot_sets[0]

    def test_rgb_view_orders_bands_by_wavelength(self):
        data = ds.generate_synthetic_dataset(ds.SyntheticConfig(n_stacks=1, seed=3))
        stack = data.stacks[0]
        view = ds.rgb_view(stack, data.response)
        assert view.bands == 3
        assert np.all(np.diff(view.wavelengths_nm) > 0)
        rgb = ds.synthesize_rgb(stack, data.response)  # rows R, G, B
        np.testing.assert_array_equal(view.values[0], rgb[2])
        np.testing.assert_array_equal(view.values[2], rgb[0])
