import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nimbus import grid, spectral
from nimbus.errors import ConfigError, DomainError, FormatError


def make_batch(t=4, v=2, h=8, w=8, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((t, v, h, w)).astype(np.float32)
    lat, lon = grid.default_grid(h, w)
    specs = tuple(
        grid.VariableSpec(name=f"var{i}", mean=float(i), std=1.0 + i) for i in range(v)
    )
    return grid.FieldBatch(data=data, lat=lat, lon=lon, specs=specs)


class TestLatWeights:
    def test_single_row_is_one(self):
        assert grid.lat_weights([0.0]).w == pytest.approx([1.0])

    def test_symmetric_pair(self):
        np.testing.assert_allclose(grid.lat_weights([60.0, -60.0]).w, [1.0, 1.0])

    def test_two_rows_derived(self):
        # cos(0)=1, cos(60)=0.5, mean 0.75
        np.testing.assert_allclose(grid.lat_weights([0.0, 60.0]).w, [4 / 3, 2 / 3])

    def test_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            grid.lat_weights([91.0])

    @given(
        st.lists(st.floats(min_value=-89.9, max_value=89.9), min_size=1, max_size=40)
    )
    @settings(max_examples=50, deadline=None)
    def test_mean_exactly_one(self, lats):
        w = grid.lat_weights(lats).w
        assert abs(w.mean() - 1.0) < 1e-12


class TestStandardize:
    def test_constant_at_mean_gives_zero(self):
        b = make_batch()
        data = np.zeros_like(b.data)
        for i, s in enumerate(b.specs):
            data[:, i] = s.mean
        b2 = b.with_data(data)
        out = grid.standardize(b2)
        assert np.all(out.data == 0)

    def test_identity_when_standard(self):
        b = make_batch()
        specs = tuple(
            grid.VariableSpec(name=s.name, mean=0.0, std=1.0) for s in b.specs
        )
        out = grid.standardize(b, specs)
        np.testing.assert_array_equal(out.data, b.data)

    def test_direct_arithmetic(self):
        b = make_batch(t=1, v=1)
        b = b.with_data(np.full_like(b.data, 5.0))
        spec = (grid.VariableSpec(name="var0", mean=1.0, std=2.0),)
        out = grid.standardize(b, spec)
        np.testing.assert_allclose(out.data, 2.0)

    def test_roundtrip(self):
        b = make_batch(seed=3)
        back = grid.destandardize(grid.standardize(b))
        np.testing.assert_allclose(back.data, b.data, rtol=1e-6, atol=1e-6)

    def test_missing_spec_is_config_error(self):
        b = make_batch(v=2)
        with pytest.raises(ConfigError):
            grid.standardize(b, b.specs[:1])


class TestResiduals:
    def test_constant_sequence_zero(self):
        b = make_batch()
        b = b.with_data(np.ones_like(b.data))
        r = grid.residuals(b, specs=b.specs)
        assert np.all(r.data == 0)

    def test_linear_ramp_gives_ones(self):
        b = make_batch(t=5)
        data = np.broadcast_to(
            np.arange(5, dtype=np.float32)[:, None, None, None], b.data.shape
        ).copy()
        r = grid.residuals(b.with_data(data), specs=b.specs)
        np.testing.assert_array_equal(r.data, np.ones_like(r.data))

    def test_matches_subtraction_oracle(self):
        b = make_batch(t=6, seed=9)
        r = grid.residuals(b)
        np.testing.assert_array_equal(r.data, b.data[1:] - b.data[:-1])

    def test_short_sequence_rejected(self):
        b = make_batch(t=1)
        with pytest.raises(DomainError):
            grid.residuals(b)

    def test_cumulative_sum_reconstructs(self):
        b = make_batch(t=8, seed=4)
        r = grid.residuals(b)
        recon = b.data[0] + r.data.astype(np.float64).sum(axis=0)
        np.testing.assert_allclose(recon, b.data[-1], atol=1e-5)

    def test_residual_specs_use_residual_statistics(self):
        b = make_batch(t=16, seed=5)
        specs = grid.residual_specs(b)
        diff = np.diff(b.data.astype(np.float64), axis=0)
        for i, s in enumerate(specs):
            assert s.std == pytest.approx(diff[:, i].std(), rel=1e-6)


class TestGenSynthetic:
    def test_deterministic(self):
        a = grid.gen_synthetic(seed=7, h=16, w=16, v=2, t=3)
        b = grid.gen_synthetic(seed=7, h=16, w=16, v=2, t=3)
        np.testing.assert_array_equal(a.data, b.data)

    def test_flat_spectrum_for_slope_zero(self):
        # Least-squares slope on the log-log radial spectrum, shell noise
        # averaged over a few seeds; flat means <10% amplitude drift across
        # the fitted radius range.
        amps = []
        for seed in range(8):
            b = grid.gen_synthetic(seed=seed, h=64, w=64, v=1, t=1, spectral_slopes=[0.0])
            prof = spectral.radial_profile(spectral.fft2(b.data[0, 0].astype(np.float64)))
            amps.append(prof.amplitude)
        amp = np.mean(amps, axis=0)[1:-1]
        radii = prof.radii[1:-1]
        slope = np.polyfit(np.log(radii), np.log(amp), 1)[0]
        ratio = (radii[-1] / radii[0]) ** slope
        assert 0.9 < ratio < 1.1

    def test_pure_advection_is_exact_shift(self):
        b = grid.gen_synthetic(
            seed=2, h=16, w=16, v=1, t=3, advection=[(1, 0)], forcing=0.0
        )
        for t in range(1, 3):
            np.testing.assert_array_equal(
                b.data[t, 0], np.roll(b.data[t - 1, 0], (1, 0), axis=(0, 1))
            )

    def test_distinct_slopes_give_distinct_energy_curves(self):
        b = grid.gen_synthetic(
            seed=3, h=64, w=64, v=3, t=1, spectral_slopes=[1.0, 2.0, 3.5]
        )
        curves = []
        for v in range(3):
            prof = spectral.radial_profile(spectral.fft2(b.data[0, v].astype(np.float64)))
            curves.append(prof.cumulative)
        gaps = [
            np.max(np.abs(curves[i] - curves[j]))
            for i in range(3)
            for j in range(i + 1, 3)
        ]
        assert max(gaps) > 0.05

    def test_too_small_grid_rejected(self):
        with pytest.raises(DomainError):
            grid.gen_synthetic(seed=0, h=4, w=4, v=1, t=1)


class TestFieldFile:
    def test_roundtrip_bit_exact(self, tmp_path):
        b = grid.gen_synthetic(seed=11, h=8, w=12, v=3, t=2)
        path = tmp_path / "x.pyld"
        grid.write_fields(b, path)
        back = grid.read_fields(path)
        np.testing.assert_array_equal(back.data, b.data)
        np.testing.assert_array_equal(back.lat, b.lat)
        np.testing.assert_array_equal(back.lon, b.lon)
        assert back.specs == b.specs

    def test_double_roundtrip_identical_bytes(self, tmp_path):
        b = grid.gen_synthetic(seed=11, h=8, w=8, v=1, t=2)
        p1, p2 = tmp_path / "a.pyld", tmp_path / "b.pyld"
        grid.write_fields(b, p1)
        grid.write_fields(grid.read_fields(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_file_bad_magic(self, tmp_path):
        path = tmp_path / "empty.pyld"
        path.write_bytes(b"")
        with pytest.raises(FormatError):
            grid.read_fields(path)

    def test_truncated_header(self, tmp_path):
        b = grid.gen_synthetic(seed=0, h=8, w=8, v=2, t=1)
        path = tmp_path / "x.pyld"
        grid.write_fields(b, path)
        blob = path.read_bytes()
        # Declare V=2 but cut the file inside the first variable record.
        path.write_bytes(blob[:30])
        with pytest.raises(FormatError) as exc:
            grid.read_fields(path)
        assert "truncated" in str(exc.value)
        assert exc.value.offset <= 30

    def test_dimension_overflow(self, tmp_path):
        import struct

        path = tmp_path / "big.pyld"
        path.write_bytes(grid.MAGIC_FIELDS + struct.pack("<4I", 2**20, 2**20, 64, 64))
        with pytest.raises(FormatError):
            grid.read_fields(path)

    def test_immutable_after_construction(self):
        b = make_batch()
        with pytest.raises(ValueError):
            b.data[0, 0, 0, 0] = 3.0
