import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxwalk.peaks import (
    PeakConfig,
    detect_atoms,
    find_peaks,
    local_maxima,
    match_atoms,
    refine_peak,
    roundtrip_report,
)
from voxwalk.structio import LIGAND_ELEMENTS, Structure
from voxwalk.synthetic import random_structure
from voxwalk.voxelizer import GridSpec, VoxelGrid, ligand_spec, voxelize

SPEC = ligand_spec(24, 0.25)


def one_atom(pos, element="C", spec=SPEC):
    return Structure((element,), np.array([pos], dtype=float))


class TestLocalMaxima:
    def test_single_spike(self):
        a = np.zeros((5, 5, 5))
        a[2, 3, 1] = 1.0
        assert np.argwhere(local_maxima(a)).tolist() == [[2, 3, 1]]

    def test_plateau_keeps_lowest_flat_index(self):
        a = np.zeros((5, 5, 5))
        a[1:3, 2, 2] = 0.7
        a[2, 3, 2] = 0.7
        assert np.argwhere(local_maxima(a)).tolist() == [[1, 2, 2]]

    def test_boundary_voxel_can_be_a_peak(self):
        a = np.zeros((4, 4, 4))
        a[0, 0, 3] = 0.5
        assert local_maxima(a)[0, 0, 3]

    def test_zero_grid(self):
        assert not local_maxima(np.zeros((3, 3, 3))).any()


class TestDetect:
    def test_aligned_atom(self):
        pos = SPEC.voxel_center((10, 12, 7))
        found = detect_atoms(voxelize(one_atom(pos, "N"), SPEC))
        assert found.elements == ("N",)
        np.testing.assert_allclose(found.coords[0], pos, atol=1e-9)

    @pytest.mark.parametrize("refine", ["gaussian", None])
    def test_aligned_atom_any_refinement(self, refine):
        pos = SPEC.voxel_center((11, 11, 11))
        found = detect_atoms(voxelize(one_atom(pos), SPEC), PeakConfig(refine=refine))
        np.testing.assert_allclose(found.coords[0], pos, atol=1e-9)

    def test_offset_atom_refined(self):
        base = SPEC.voxel_center((12, 12, 12))
        for direction in (np.array([1, 0, 0]), np.array([1, 1, 1]) / np.sqrt(3), np.array([0, -0.6, 0.8])):
            pos = base + 0.1 * direction
            found = detect_atoms(voxelize(one_atom(pos), SPEC))
            assert len(found) == 1
            assert np.linalg.norm(found.coords[0] - pos) < 0.05

    def test_unrefined_offset_snaps_to_voxel(self):
        pos = SPEC.voxel_center((12, 12, 12)) + [0.1, 0, 0]
        found = detect_atoms(voxelize(one_atom(pos), SPEC), PeakConfig(refine=None))
        np.testing.assert_allclose(found.coords[0], SPEC.voxel_center((12, 12, 12)))

    def test_refine_peak_centroid_symmetric(self):
        raw = np.zeros((5, 5, 5))
        raw[1:4, 1:4, 1:4] = 0.5
        raw[2, 2, 2] = 1.0
        np.testing.assert_allclose(refine_peak(raw, (2, 2, 2), "centroid"), 0.0, atol=1e-12)

    def test_five_atoms(self, rng):
        for _ in range(5):
            s = random_structure(rng, 5, 2.0, 2.0)
            found = detect_atoms(voxelize(s, SPEC))
            assert len(found) == 5
            pairs = match_atoms(s, found)
            assert len(pairs) == 5
            for i, j, _ in pairs:
                assert s.elements[i] == found.elements[j]
                assert np.linalg.norm(s.coords[i] - found.coords[j]) < 0.125

    def test_empty_grid(self):
        found = detect_atoms(VoxelGrid.zeros(SPEC))
        assert len(found) == 0 and found.coords.shape == (0, 3)

    def test_channel_count_checked(self):
        with pytest.raises(ValueError):
            detect_atoms(VoxelGrid.zeros(GridSpec(8, 0.25, 3)))

    def test_merge_keeps_stronger(self):
        spec = GridSpec(8, 0.25, 1)
        data = np.zeros(spec.shape)
        data[0, 2, 2, 2] = 0.9
        data[0, 2, 2, 5] = 0.6  # 0.75 A away, below min separation
        data[0, 6, 6, 6] = 0.4
        peaks = find_peaks(VoxelGrid(spec, data), PeakConfig(refine=None))
        assert [p.index for p in peaks] == [(2, 2, 2), (6, 6, 6)]
        no_merge = find_peaks(VoxelGrid(spec, data), PeakConfig(refine=None, min_separation=0))
        assert len(no_merge) == 3

    def test_deterministic(self, rng):
        spec = GridSpec(10, 0.25, 2)
        data = np.round(rng.random(spec.shape), 1)  # many ties
        a = find_peaks(VoxelGrid(spec, data))
        b = find_peaks(VoxelGrid(spec, data.copy()))
        assert [(p.channel, p.index) for p in a] == [(p.channel, p.index) for p in b]
        for p, q in zip(a, b):
            np.testing.assert_array_equal(p.position, q.position)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
    def test_threshold_monotone(self, seed, t1, t2):
        lo, hi = sorted((t1, t2))
        rng = np.random.default_rng(seed)
        s = random_structure(rng, 8, 1.5, 1.0)
        grid = voxelize(s, ligand_spec(16, 0.25))
        data = grid.data + 0.2 * rng.random(grid.data.shape).astype(np.float32)
        noisy = VoxelGrid(grid.spec, np.clip(data, 0, 1))
        assert len(detect_atoms(noisy, PeakConfig(hi))) <= len(detect_atoms(noisy, PeakConfig(lo)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PeakConfig(threshold=0)
        with pytest.raises(ValueError):
            PeakConfig(refine="spline")


class TestRoundtrip:
    def test_single_atom(self):
        pos = SPEC.voxel_center((12, 12, 12))
        r = roundtrip_report(one_atom(pos), SPEC)
        assert (r.matched, r.spurious, r.missed) == (1, 0, 0)
        assert r.rmsd < 1e-6

    def test_empty(self):
        r = roundtrip_report(Structure((), np.empty((0, 3))), SPEC)
        assert (r.matched, r.spurious, r.missed) == (0, 0, 0)

    def test_twenty_atoms_close_packed(self, rng):
        s = random_structure(rng, 20, 2.0, 1.5)
        r = roundtrip_report(s, ligand_spec(32, 0.25))
        assert (r.matched, r.spurious, r.missed) == (20, 0, 0)
        assert r.rmsd < 0.1

    def test_high_threshold_misses(self, rng):
        s = random_structure(rng, 6, 2.0, 2.0)
        r = roundtrip_report(s, SPEC, config=PeakConfig(threshold=0.999999))
        assert r.missed > 0 or r.matched == 6

    def test_match_requires_same_element(self):
        a = Structure(("C",), np.zeros((1, 3)))
        b = Structure(("O",), np.zeros((1, 3)))
        assert match_atoms(a, b) == []
