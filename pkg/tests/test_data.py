"""Synthetic volume generator, tuple assembly, dataset I/O."""
import numpy as np
import pytest

from stinterp.data import (
    GeneratorConfig,
    HEPatch,
    STPatch,
    derive_seed,
    generate_volume,
    load_patch,
    load_split,
    make_tuples,
    read_manifest,
    save_patch,
    smooth_field,
    split_counts,
    split_tuples,
    warp_channels,
    write_dataset,
)

SMALL = dict(genes=4, size=12, slices=5, volumes=1)


class TestGenerateVolume:
    def test_zero_deformation_gives_identical_slices(self):
        cfg = GeneratorConfig(deform=0.0, drift=0.0, **SMALL)
        sts, hes = generate_volume(cfg, seed=1)
        for st, he in zip(sts[1:], hes[1:]):
            assert np.array_equal(st.genes, sts[0].genes)
            assert np.array_equal(he.rgb, hes[0].rgb)

    def test_fixed_seed_is_bit_identical(self):
        cfg = GeneratorConfig(**SMALL)
        a_sts, a_hes = generate_volume(cfg, seed=9)
        b_sts, b_hes = generate_volume(cfg, seed=9)
        for a, b in zip(a_sts, b_sts):
            assert np.array_equal(a.genes, b.genes)
        for a, b in zip(a_hes, b_hes):
            assert np.array_equal(a.rgb, b.rgb)

    def test_larger_magnitude_increases_adjacent_distance(self):
        def mean_l1(mag):
            cfg = GeneratorConfig(deform=mag, **SMALL)
            sts, _ = generate_volume(cfg, seed=3)
            return np.mean([np.abs(a.genes - b.genes).mean() for a, b in zip(sts, sts[1:])])

        assert mean_l1(2.0) > mean_l1(1.0)

    def test_values_stay_in_unit_interval(self):
        cfg = GeneratorConfig(deform=3.0, drift=0.2, **SMALL)
        sts, hes = generate_volume(cfg, seed=5)
        for st in sts:
            assert st.genes.min() >= 0.0 and st.genes.max() <= 1.0
        for he in hes:
            assert he.rgb.min() >= 0.0 and he.rgb.max() <= 1.0

    def test_sparsity_zeroes_low_intensities(self):
        cfg = GeneratorConfig(genes=4, size=16, slices=4, volumes=1, sparsity=0.5)
        sts, _ = generate_volume(cfg, seed=2)
        stack = np.stack([st.genes for st in sts])
        frac_zero = np.mean(stack == 0.0)
        assert 0.3 < frac_zero < 0.7

    def test_degenerate_configs_rejected(self):
        with pytest.raises(ValueError):
            generate_volume(GeneratorConfig(genes=1, size=12, slices=5), seed=0)
        with pytest.raises(ValueError):
            generate_volume(GeneratorConfig(genes=4, size=12, slices=2), seed=0)
        with pytest.raises(ValueError):
            generate_volume(GeneratorConfig(genes=4, size=2, slices=5), seed=0)

    def test_registration_marker_tracks_warp(self, rng):
        """Warping a marker with the shared field keeps ST/H&E correspondence."""
        marker = np.zeros((1, 16, 16))
        marker[0, 4:8, 4:8] = 1.0
        field = smooth_field(np.random.default_rng(0), 16, 2.0)
        warped_a = warp_channels(marker, field)
        warped_b = warp_channels(marker.copy(), field)
        assert np.array_equal(warped_a, warped_b)
        # center of mass moves, but stays identical across the two modalities
        assert not np.array_equal(warped_a, marker)


class TestMakeTuples:
    def _volume(self, n):
        sts = [STPatch(genes=np.zeros((2, 4, 4)), slice_index=i) for i in range(n)]
        hes = [HEPatch(rgb=np.zeros((3, 4, 4)), slice_index=i) for i in range(n)]
        return sts, hes

    def test_19_slices_s1_gives_17_windows(self):
        sts, hes = self._volume(19)
        assert len(make_tuples(sts, hes, 1)) == 17

    def test_19_slices_s4_gives_14_windows(self):
        sts, hes = self._volume(19)
        assert len(make_tuples(sts, hes, 4)) == 14

    def test_target_indices_fill_the_window(self):
        sts, hes = self._volume(8)
        for t in make_tuples(sts, hes, 3):
            a0, a1 = t.anchors
            assert a1.slice_index == a0.slice_index + 4
            assert [x.slice_index for x in t.targets] == [a0.slice_index + 1 + i for i in range(3)]
            assert [h.slice_index for h in t.he_anchors] == [a0.slice_index, a1.slice_index]

    def test_invalid_s_rejected(self):
        sts, hes = self._volume(5)
        with pytest.raises(ValueError):
            make_tuples(sts, hes, 0)
        with pytest.raises(ValueError):
            make_tuples(sts, hes, 4)


class TestAugmentTuples:
    def test_eightfold_expansion_preserves_registration(self, rng):
        from stinterp.data import augment_tuples
        sts = [STPatch(genes=rng.random(size=(2, 6, 6)), slice_index=i) for i in range(3)]
        hes = [HEPatch(rgb=np.stack([s.genes[0]] * 3), slice_index=s.slice_index) for s in sts]
        tuples = make_tuples(sts, hes, 1)
        grown = augment_tuples(tuples)
        assert len(grown) == 8 * len(tuples)
        # identity copies come first
        assert grown[0] is tuples[0]
        for t in grown:
            # H&E channel 0 mirrors gene 0, so registration survives transforms
            assert np.array_equal(t.he_anchors[0].rgb[0], t.anchors[0].genes[0])
            assert t.anchors[0].genes.shape == (2, 6, 6)

    def test_transforms_are_distinct(self, rng):
        from stinterp.data import augment_tuples
        sts = [STPatch(genes=rng.random(size=(2, 6, 6)), slice_index=i) for i in range(3)]
        hes = [HEPatch(rgb=rng.random(size=(3, 6, 6)), slice_index=i) for i in range(3)]
        grown = augment_tuples(make_tuples(sts, hes, 1)[:1])
        stacks = [t.anchors[0].genes.tobytes() for t in grown]
        assert len(set(stacks)) == 8


class TestPatchIO:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        patch = STPatch(genes=rng.random(size=(8, 16, 16)), slice_index=5)
        save_patch(patch, tmp_path / "st_5.ctf")
        back = load_patch(tmp_path / "st_5.ctf")
        assert isinstance(back, STPatch)
        assert back.slice_index == 5
        assert np.array_equal(back.genes, patch.genes)

    def test_he_round_trip(self, tmp_path, rng):
        patch = HEPatch(rgb=rng.random(size=(3, 8, 8)), slice_index=2)
        save_patch(patch, tmp_path / "he_2.ctf")
        back = load_patch(tmp_path / "he_2.ctf")
        assert isinstance(back, HEPatch)
        assert np.array_equal(back.rgb, patch.rgb)

    def test_bad_magic_error(self, tmp_path):
        (tmp_path / "st_0.ctf").write_bytes(b"XXXX" + bytes(64))
        from stinterp.ctf import BadMagicError
        with pytest.raises(BadMagicError):
            load_patch(tmp_path / "st_0.ctf")

    def test_truncated_error(self, tmp_path, rng):
        save_patch(STPatch(genes=rng.random(size=(2, 4, 4)), slice_index=0), tmp_path / "st_0.ctf")
        raw = (tmp_path / "st_0.ctf").read_bytes()
        (tmp_path / "st_1.ctf").write_bytes(raw[:-4])
        from stinterp.ctf import TruncatedPayloadError
        with pytest.raises(TruncatedPayloadError):
            load_patch(tmp_path / "st_1.ctf")

    def test_unrecognized_name_rejected(self, tmp_path, rng):
        from stinterp.ctf import write_ctf
        write_ctf(tmp_path / "patch.ctf", rng.random(size=(2, 3, 3)))
        with pytest.raises(ValueError):
            load_patch(tmp_path / "patch.ctf")


class TestDataset:
    def test_split_counts_default_ratio(self):
        counts = split_counts(64, (852, 100, 264))
        assert counts == {"train": 45, "val": 5, "test": 14}
        assert sum(counts.values()) == 64

    def test_write_and_reload(self, tmp_path):
        cfg = GeneratorConfig(genes=4, size=12, slices=4, volumes=4)
        manifest = write_dataset(tmp_path / "ds", cfg, seed=11)
        assert sum(manifest["splits"].values()) == 4
        again = read_manifest(tmp_path / "ds")
        assert again["generator"]["genes"] == 4
        volumes = load_split(tmp_path / "ds", "train")
        assert volumes and all(len(sts) == 4 for sts, _ in volumes)
        sts, hes = volumes[0]
        assert sts[0].genes.shape == (4, 12, 12)
        assert hes[0].rgb.shape == (3, 12, 12)

    def test_splits_are_volume_disjoint(self, tmp_path):
        cfg = GeneratorConfig(genes=4, size=12, slices=4, volumes=5)
        write_dataset(tmp_path / "ds", cfg, seed=1)
        seen = set()
        for split in ("train", "val", "test"):
            for p in (tmp_path / "ds" / split).iterdir():
                assert p.name not in seen
                seen.add(p.name)

    def test_per_volume_seeds_are_stable(self):
        assert derive_seed(7, 0) == derive_seed(7, 0)
        assert derive_seed(7, 0) != derive_seed(7, 1)
        assert derive_seed(8, 0) != derive_seed(7, 0)

    def test_split_tuples_counts(self, tmp_path):
        cfg = GeneratorConfig(genes=4, size=12, slices=6, volumes=4)
        write_dataset(tmp_path / "ds", cfg, seed=2)
        manifest = read_manifest(tmp_path / "ds")
        n_train = manifest["splits"]["train"]
        assert len(split_tuples(tmp_path / "ds", "train", 2)) == n_train * (6 - 3)
