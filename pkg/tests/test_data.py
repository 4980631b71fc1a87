"""
Tests for core.data
===================

- 对流扩散解析解的物理性质 (实值、衰减、守恒、半群)
- FFLD0001 场文件的布局与各类损坏
- 清单与整个数据集生成的确定性
"""

import struct

import numpy as np
import pytest

from core.data import (
    DatasetConfig,
    SpectralField,
    TrajectoryDataset,
    evolve_spectrum,
    exact_solution,
    generate_dataset,
    generate_trajectory,
    load_dataset,
    read_field_file,
    read_manifest,
    sample_initial,
    write_field_file,
    write_manifest,
)
from core.data.field_file import MAGIC
from core.errors import (
    BadMagicError,
    ConfigurationError,
    ContractViolationError,
    ExtentOverflowError,
    FormatError,
    TruncatedFileError,
)
from core.tensor import FieldTensor


# =============================================================================
# Initial conditions
# =============================================================================


class TestSampleInitial:
    def test_deterministic_per_seed(self):
        a = sample_initial(16, seed=7)
        b = sample_initial(16, seed=7)
        c = sample_initial(16, seed=8)
        np.testing.assert_array_equal(a.coefficients, b.coefficients)
        assert not np.array_equal(a.coefficients, c.coefficients)

    def test_k_max_zero_gives_zero_field(self):
        u0 = sample_initial(16, seed=1, k_max=0)
        assert not np.any(u0.coefficients)
        assert not np.any(u0.to_physical())

    def test_field_is_real_and_mean_free(self):
        u0 = sample_initial(16, seed=2)
        full = u0.to_full()
        complex_field = np.fft.ifft2(full, norm="forward")
        assert np.max(np.abs(complex_field.imag)) < 1e-12
        np.testing.assert_allclose(complex_field.real, u0.to_physical(), atol=1e-12)
        assert u0.coefficients[0, 0] == 0
        assert abs(u0.to_physical().mean()) < 1e-14

    def test_band_limit_and_nyquist(self):
        u0 = sample_initial(16, seed=3, k_max=4)
        kx, ky = u0.wavenumbers()
        outside = (kx * kx + ky * ky) > 16
        assert not np.any(u0.coefficients[np.broadcast_to(outside, u0.coefficients.shape)])
        assert not np.any(u0.coefficients[8, :])
        assert not np.any(u0.coefficients[:, 8])

    @pytest.mark.parametrize("size, k_max", [(15, 4), (16, 9), (16, -1)])
    def test_invalid_arguments(self, size, k_max):
        with pytest.raises(ConfigurationError):
            sample_initial(size, seed=0, k_max=k_max)


# =============================================================================
# Exact solution
# =============================================================================


def _single_mode(size: int = 8) -> SpectralField:
    """cos(x) 沿第一个轴: û_{±1,0} = 1/2。"""
    coeff = np.zeros((size, size // 2 + 1), dtype=np.complex128)
    coeff[1, 0] = 0.5
    coeff[size - 1, 0] = 0.5
    return SpectralField(coeff)


class TestExactSolution:
    def test_time_zero_is_initial_condition(self):
        u0 = sample_initial(16, seed=4)
        u = exact_solution(u0, nu=0.3, velocity=(1.0, -2.0), t=0.0)
        np.testing.assert_allclose(u.data[..., 0], u0.to_physical(), atol=1e-15)

    def test_single_mode_decay(self):
        u = exact_solution(_single_mode(8), nu=0.1, velocity=(0.0, 0.0), t=1.0)
        x = 2.0 * np.pi * np.arange(8) / 8
        expected = np.exp(-0.1) * np.cos(x)[:, None] * np.ones((1, 8))
        np.testing.assert_allclose(u.data[..., 0], expected, atol=1e-14)

    def test_pure_advection_preserves_l2(self):
        u0 = sample_initial(32, seed=5)
        norm0 = np.linalg.norm(u0.to_physical())
        for t in (0.1, 0.37, 2.0):
            u = exact_solution(u0, nu=0.0, velocity=(1.0, 0.5), t=t)
            assert np.linalg.norm(u.data) == pytest.approx(norm0, rel=1e-12)

    def test_semigroup(self):
        u0 = sample_initial(16, seed=6)
        two_steps = evolve_spectrum(evolve_spectrum(u0, 0.05, (1.0, 0.5), 0.3), 0.05, (1.0, 0.5), 0.4)
        one_step = evolve_spectrum(u0, 0.05, (1.0, 0.5), 0.7)
        a, b = two_steps.to_physical(), one_step.to_physical()
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-10

    def test_energy_decays_with_diffusion(self):
        cfg = DatasetConfig(grid_size=16, frames=8, nu=0.05)
        trajectory = generate_trajectory(cfg, seed=9)
        norms = [np.linalg.norm(f.data) for f in trajectory.frames]
        assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))

    def test_mean_is_conserved(self):
        trajectory = generate_trajectory(DatasetConfig(grid_size=16, frames=6), seed=10)
        for frame in trajectory.frames:
            assert abs(frame.data.mean()) < 1e-12

    def test_frames_change_smoothly(self):
        trajectory = generate_trajectory(DatasetConfig(frames=5), seed=11)
        for a, b in zip(trajectory.frames, trajectory.frames[1:]):
            assert np.linalg.norm(b.data - a.data) / np.linalg.norm(a.data) <= 1.0

    def test_negative_time_or_viscosity(self):
        u0 = sample_initial(8, seed=0, k_max=2)
        with pytest.raises(ContractViolationError):
            evolve_spectrum(u0, -0.1, (0.0, 0.0), 1.0)
        with pytest.raises(ContractViolationError):
            evolve_spectrum(u0, 0.1, (0.0, 0.0), -1.0)


# =============================================================================
# Field files
# =============================================================================


class TestFieldFile:
    def test_sixteen_frame_file_size(self, tmp_path, rng):
        frames = [FieldTensor(rng.standard_normal((32, 32, 1))) for _ in range(16)]
        path = write_field_file(tmp_path / "t.ffld", frames)
        assert path.stat().st_size == 65_562
        blob = path.read_bytes()
        assert blob[:8] == MAGIC
        assert blob[8] == 2 and blob[9] == 1
        assert struct.unpack_from("<4I", blob, 10) == (16, 32, 32, 1)

    def test_round_trip_is_float32_exact(self, tmp_path, rng):
        frames = [FieldTensor(rng.standard_normal((4, 5, 2))) for _ in range(3)]
        loaded = read_field_file(write_field_file(tmp_path / "t.ffld", frames))
        assert len(loaded) == 3
        for a, b in zip(frames, loaded):
            np.testing.assert_array_equal(b.data, a.data.astype(np.float32).astype(np.float64))

    def test_single_tensor_has_no_time_axis(self, tmp_path, rng):
        t = FieldTensor(rng.standard_normal((6, 2)))
        loaded = read_field_file(write_field_file(tmp_path / "s.ffld", t))
        assert isinstance(loaded, FieldTensor)
        assert loaded.shape == (6, 2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ffld"
        path.write_bytes(b"FFLD0002" + bytes(20))
        with pytest.raises(BadMagicError):
            read_field_file(path)

    def test_truncated_header_and_payload(self, tmp_path, rng):
        path = write_field_file(tmp_path / "t.ffld", FieldTensor(rng.standard_normal((4, 4, 1))))
        blob = path.read_bytes()
        for keep in (5, 14, len(blob) - 4):
            path.write_bytes(blob[:keep])
            with pytest.raises(TruncatedFileError):
                read_field_file(path)

    def test_trailing_bytes(self, tmp_path, rng):
        path = write_field_file(tmp_path / "t.ffld", FieldTensor(rng.standard_normal((4, 4, 1))))
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            read_field_file(path)

    def test_zero_extent(self, tmp_path):
        path = tmp_path / "z.ffld"
        path.write_bytes(MAGIC + bytes([1, 0]) + struct.pack("<2I", 0, 1))
        with pytest.raises(FormatError):
            read_field_file(path)

    def test_extent_overflow(self, tmp_path):
        path = tmp_path / "o.ffld"
        path.write_bytes(MAGIC + bytes([3, 0]) + struct.pack("<4I", 65536, 65536, 65536, 1))
        with pytest.raises(ExtentOverflowError):
            read_field_file(path)

    def test_non_finite_payload_is_rejected(self, tmp_path):
        path = tmp_path / "n.ffld"
        payload = np.array([1.0, np.nan], dtype="<f4").tobytes()
        path.write_bytes(MAGIC + bytes([1, 0]) + struct.pack("<2I", 2, 1) + payload)
        with pytest.raises(FormatError, match="non-finite"):
            read_field_file(path)


# =============================================================================
# Manifest and dataset generation
# =============================================================================


class TestManifest:
    def test_round_trip(self, tmp_path):
        write_manifest(tmp_path, {"dt": "0.05", "grid": "32"}, [("a.ffld", 3), ("b.ffld", 4)])
        settings, entries = read_manifest(tmp_path)
        assert settings == {"dt": "0.05", "grid": "32"}
        assert entries == [("a.ffld", 3), ("b.ffld", 4)]

    def test_malformed_line(self, tmp_path):
        (tmp_path / "manifest.txt").write_text("dt=0.1\nnot-a-pair\n", encoding="utf-8")
        with pytest.raises(FormatError):
            read_manifest(tmp_path)

    def test_non_integer_seed(self, tmp_path):
        (tmp_path / "manifest.txt").write_text("file=a.ffld seed=seven\n", encoding="utf-8")
        with pytest.raises(FormatError, match="seed"):
            read_manifest(tmp_path)


class TestGenerateDataset:
    def test_files_and_manifest(self, tmp_path):
        cfg = DatasetConfig(grid_size=8, frames=4, k_max=3)
        manifest = generate_dataset(cfg, tmp_path, seeds=[5, 6])
        settings, entries = read_manifest(manifest)
        assert entries == [("traj_00005.ffld", 5), ("traj_00006.ffld", 6)]
        assert settings["dt"] == "0.05"
        datasets = load_dataset(tmp_path)
        assert [len(d) for d in datasets] == [4, 4]
        assert datasets[0].dt == 0.05
        assert datasets[0].grid == (8, 8)
        assert datasets[1].metadata["seed"] == "6"

    def test_regeneration_is_byte_identical(self, tmp_path):
        cfg = DatasetConfig(grid_size=8, frames=3, k_max=3)
        generate_dataset(cfg, tmp_path / "a", seeds=[0, 1, 2], max_workers=1)
        generate_dataset(cfg, tmp_path / "b", seeds=[0, 1, 2], max_workers=3)
        for name in ("manifest.txt", "traj_00000.ffld", "traj_00001.ffld", "traj_00002.ffld"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_single_frame_trajectory(self, tmp_path):
        cfg = DatasetConfig(grid_size=8, frames=1, k_max=2)
        generate_dataset(cfg, tmp_path, seeds=[0])
        (trajectory,) = load_dataset(tmp_path)
        assert len(trajectory) == 1

    def test_window_bounds(self):
        trajectory = generate_trajectory(DatasetConfig(grid_size=8, frames=4, k_max=2), seed=0)
        assert len(trajectory.window(1, 3)) == 3
        with pytest.raises(ContractViolationError):
            trajectory.window(2, 3)

    def test_trajectory_frames_share_shape(self):
        with pytest.raises(ContractViolationError):
            TrajectoryDataset([FieldTensor.zeros((2, 2), 1), FieldTensor.zeros((2, 3), 1)], 0.1)
