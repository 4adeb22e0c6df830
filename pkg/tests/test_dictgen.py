import numpy as np
import pytest

from mrfica import dictgen, epg
from mrfica.errors import DomainError, FormatError


class TestExpandGrid:
    def test_full_scale_axis_counts(self):
        spec = dictgen.GridSpec.full_scale()
        assert len(spec.t1_values()) == 491
        assert len(spec.t2_values()) == 301

    def test_full_scale_raw_pairs(self):
        spec = dictgen.GridSpec.full_scale()
        _, report = dictgen.expand_grid_with_report(
            spec, drop_zero=False, drop_t2_above_t1=False)
        assert report.raw_pairs == 491 * 301 == 147791

    def test_degenerate_segment(self):
        spec = dictgen.GridSpec(((100.0, 100.0, 100.0),),
                                ((50.0, 50.0, 50.0),))
        pairs = dictgen.expand_grid(spec)
        np.testing.assert_array_equal(pairs, [[100.0, 50.0]])

    def test_filters_drop_zero_and_unphysical(self):
        spec = dictgen.GridSpec(((0.0, 50.0, 100.0),), ((0.0, 75.0, 150.0),))
        pairs, report = dictgen.expand_grid_with_report(spec)
        assert np.all(pairs[:, 0] > 0)
        assert np.all(pairs[:, 1] > 0)
        assert np.all(pairs[:, 1] <= pairs[:, 0])
        assert report.kept == pairs.shape[0]
        assert report.raw_pairs == 9

    def test_empty_expansion_rejected(self):
        spec = dictgen.GridSpec(((0.0, 1.0, 0.0),), ((0.0, 1.0, 0.0),))
        with pytest.raises(DomainError):
            dictgen.expand_grid(spec)

    def test_expansion_sorted_unique(self):
        pairs = dictgen.expand_grid(dictgen.GridSpec.desk_scale())
        view = pairs.view([("t1", float), ("t2", float)]).reshape(-1)
        assert np.array_equal(np.sort(view), view)
        assert len(np.unique(view)) == len(view)

    def test_invalid_spec(self):
        with pytest.raises(DomainError):
            dictgen.GridSpec(((0.0, -1.0, 10.0),), ((0.0, 1.0, 5.0),))


class TestBuildDictionary:
    def test_single_entry_delegates(self, seq60):
        d = dictgen.build_dictionary(seq60, np.array([[900.0, 80.0]]))
        direct = epg.simulate_fingerprint(seq60,
                                          epg.TissueParams(900.0, 80.0))
        np.testing.assert_array_equal(d.signals[0],
                                      direct.astype(np.float32))

    def test_parallel_matches_serial(self, seq60, small_grid):
        grid = small_grid[:100]
        a = dictgen.build_dictionary(seq60, grid, parallel=False)
        b = dictgen.build_dictionary(seq60, grid, parallel=True, threads=4)
        assert a == b
        np.testing.assert_array_equal(a.norms, b.norms)

    def test_entry_count_matches_grid(self, seq60):
        grid = dictgen.expand_grid(dictgen.GridSpec.desk_scale(10))
        d = dictgen.build_dictionary(seq60, grid)
        assert d.n_entries == grid.shape[0]

    def test_empty_grid_rejected(self, seq60):
        with pytest.raises(DomainError):
            dictgen.build_dictionary(seq60, np.empty((0, 2)))

    def test_bad_entry_reported_with_params(self, seq60):
        with pytest.raises(DomainError, match="T1=-5"):
            dictgen.build_dictionary(seq60, np.array([[1000.0, 90.0],
                                                      [-5.0, 10.0]]))


class TestCompressSvd:
    def test_full_rank_reconstructs(self, seq60):
        grid = dictgen.expand_grid(dictgen.GridSpec.desk_scale(50))
        d = dictgen.build_dictionary(seq60, grid)
        cd = dictgen.compress_svd(d, min(d.n_entries, d.t_points))
        recon = cd.projected @ cd.basis.T
        np.testing.assert_allclose(recon, d.normalized(np.float64),
                                   rtol=0, atol=1e-8)

    def test_rank_one_on_identical_fingerprints(self):
        sig = np.tile(np.linspace(1.0, 0.1, 30, dtype=np.float32), (8, 1))
        d = dictgen.Dictionary(
            params=np.tile([[1000.0, 100.0]], (8, 1)), signals=sig,
            norms=np.linalg.norm(sig.astype(np.float64), axis=1))
        cd = dictgen.compress_svd(d, 1)
        assert cd.energy_fraction == pytest.approx(1.0, abs=1e-12)

    def test_energy_fraction_vs_gram_oracle(self, small_dict):
        cd = dictgen.compress_svd(small_dict, 5)
        normalized = small_dict.normalized(np.float64)
        gram = normalized.T @ normalized
        evals = np.sort(np.linalg.eigvalsh(gram))[::-1]
        oracle = evals[:5].sum() / evals.sum()
        assert cd.energy_fraction == pytest.approx(oracle, abs=1e-6)

    def test_basis_orthonormal(self, small_dict):
        cd = dictgen.compress_svd(small_dict, 6)
        eye = cd.basis.T @ cd.basis
        np.testing.assert_allclose(eye, np.eye(6), rtol=0, atol=1e-10)

    def test_projection_is_contraction(self, small_dict):
        cd = dictgen.compress_svd(small_dict, 4)
        norms = np.linalg.norm(cd.projected, axis=1)
        assert norms.max() <= 1.0 + 1e-10

    def test_rank_out_of_range(self, small_dict):
        with pytest.raises(DomainError):
            dictgen.compress_svd(small_dict, 0)
        with pytest.raises(DomainError):
            dictgen.compress_svd(small_dict, small_dict.t_points + 1)

    def test_gram_path_agrees_with_direct(self, small_dict, monkeypatch):
        direct = dictgen.compress_svd(small_dict, 5)
        monkeypatch.setattr(dictgen, "_DIRECT_SVD_LIMIT", 1)
        tall = dictgen.compress_svd(small_dict, 5)
        assert tall.energy_fraction == pytest.approx(
            direct.energy_fraction, abs=1e-9)
        np.testing.assert_allclose(np.abs(tall.basis), np.abs(direct.basis),
                                   rtol=0, atol=1e-7)


class TestPersistence:
    def test_raw_round_trip(self, small_dict, tmp_path):
        path = tmp_path / "d.mrfd"
        dictgen.save_dictionary(small_dict, path)
        loaded = dictgen.load_dictionary(path)
        assert loaded == small_dict
        # a second save is byte-identical
        path2 = tmp_path / "d2.mrfd"
        dictgen.save_dictionary(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_compressed_round_trip(self, small_dict, tmp_path):
        cd = dictgen.compress_svd(small_dict, 5)
        path = tmp_path / "c.mrfd"
        dictgen.save_dictionary(cd, path)
        loaded = dictgen.load_dictionary(path)
        assert isinstance(loaded, dictgen.CompressedDictionary)
        assert loaded.rank == 5
        np.testing.assert_array_equal(loaded.basis, cd.basis)
        np.testing.assert_array_equal(
            loaded.projected, cd.projected.astype(np.float32))
        path2 = tmp_path / "c2.mrfd"
        dictgen.save_dictionary(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_file(self, small_dict, tmp_path):
        path = tmp_path / "d.mrfd"
        dictgen.save_dictionary(small_dict, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(FormatError, match="truncated"):
            dictgen.load_dictionary(path)

    def test_bad_magic(self, small_dict, tmp_path):
        path = tmp_path / "d.mrfd"
        dictgen.save_dictionary(small_dict, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="bad magic"):
            dictgen.load_dictionary(path)

    def test_params_csv(self, small_dict, tmp_path):
        path = tmp_path / "index.csv"
        dictgen.export_params_csv(small_dict, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "index,t1_ms,t2_ms"
        assert len(lines) == small_dict.n_entries + 1
