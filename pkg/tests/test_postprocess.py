import numpy as np
import pytest

from headseg import postprocess as pp
from headseg.volume import AIR, BACKGROUND, BONE, CSF, GM, SKIN, WM


def cube(n, fill=0):
    return np.full((n, n, n), fill, dtype=np.uint8)


class TestRelabelBoneTouchingBrain:
    def test_bone_next_to_gm_becomes_csf(self):
        labels = cube(5, SKIN)
        labels[2, 2, 2] = GM
        labels[2, 2, 3] = BONE
        out = pp.relabel_bone_touching_brain(labels)
        assert out[2, 2, 3] == CSF

    def test_bone_surrounded_by_skin_unchanged(self):
        labels = cube(5, SKIN)
        labels[2, 2, 2] = BONE
        out = pp.relabel_bone_touching_brain(labels)
        assert out[2, 2, 2] == BONE

    def test_diagonal_contact_does_not_fire(self):
        # 6-connectivity: corner adjacency is not contact
        labels = cube(5, SKIN)
        labels[2, 2, 2] = GM
        labels[3, 3, 3] = BONE
        out = pp.relabel_bone_touching_brain(labels)
        assert out[3, 3, 3] == BONE

    def test_stripe_single_pass_no_cascade(self):
        # oracle: simultaneous-update semantics on a hand grid; a bone/GM
        # stripe converts every bone voxel at once, not progressively
        labels = cube(9, SKIN)
        for i in range(1, 8):
            labels[i, 4, 4] = GM if i % 2 else BONE
        out = pp.relabel_bone_touching_brain(labels)
        for i in range(1, 8):
            expected = GM if i % 2 else CSF
            assert out[i, 4, 4] == expected

    def test_only_bone_changes(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 7, (12, 12, 12)).astype(np.uint8)
        out = pp.relabel_bone_touching_brain(labels)
        changed = out != labels
        assert np.all(labels[changed] == BONE)
        assert np.all(out[changed] == CSF)


class TestFillEnclosedBackground:
    def test_hollow_skin_shell_fills_with_bone(self):
        # flood-fill oracle: interior background is unreachable from the border
        labels = cube(9, BACKGROUND)
        labels[2:7, 2:7, 2:7] = SKIN
        labels[3:6, 3:6, 3:6] = BACKGROUND
        out = pp.fill_enclosed_background_as_bone(labels)
        assert np.all(out[3:6, 3:6, 3:6] == BONE)
        assert out[0, 0, 0] == BACKGROUND

    def test_border_background_unchanged(self):
        labels = cube(6, BACKGROUND)
        labels[3, 3, 3] = SKIN
        out = pp.fill_enclosed_background_as_bone(labels)
        assert np.count_nonzero(out == BONE) == 0

    def test_no_background_is_identity(self):
        labels = cube(5, GM)
        out = pp.fill_enclosed_background_as_bone(labels)
        assert np.array_equal(out, labels)


class TestClearExternalAir:
    def test_border_air_becomes_background(self):
        labels = cube(6, SKIN)
        labels[0, 0, 0] = AIR
        out = pp.clear_external_air(labels)
        assert out[0, 0, 0] == BACKGROUND

    def test_interior_air_pocket_kept(self):
        labels = cube(7, SKIN)
        labels[3, 3, 3] = AIR
        out = pp.clear_external_air(labels)
        assert out[3, 3, 3] == AIR

    def test_all_air_volume_clears(self):
        labels = cube(4, AIR)
        out = pp.clear_external_air(labels)
        assert np.all(out == BACKGROUND)


class TestRemoveSmallComponents:
    def test_stray_voxel_absorbed_by_neighbors(self):
        # boundary-plurality oracle: a lone GM voxel inside bone becomes bone
        labels = cube(7, BONE)
        labels[3, 3, 3] = GM
        out = pp.remove_small_components(labels, min_voxels=27)
        assert out[3, 3, 3] == BONE

    def test_component_at_threshold_kept(self):
        labels = cube(9, BONE)
        labels[3:6, 3:6, 3:6] = GM  # exactly 27 voxels
        out = pp.remove_small_components(labels, min_voxels=27)
        assert np.all(out[3:6, 3:6, 3:6] == GM)

    def test_min_voxels_one_is_identity(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 7, (10, 10, 10)).astype(np.uint8)
        out = pp.remove_small_components(labels, min_voxels=1)
        assert np.array_equal(out, labels)

    def test_background_exempt(self):
        labels = cube(7, SKIN)
        labels[3, 3, 3] = BACKGROUND
        out = pp.remove_small_components(labels, min_voxels=27)
        assert out[3, 3, 3] == BACKGROUND

    def test_tie_goes_to_lowest_code(self):
        labels = cube(4, 0)
        labels[:, :2, :] = WM
        labels[:, 2:, :] = GM
        labels[1, 1, 1] = SKIN
        labels[1, 2, 1] = SKIN
        # the two skin voxels straddle the WM/GM boundary symmetrically
        out = pp.remove_small_components(labels, min_voxels=27)
        assert set(np.unique(out[labels == SKIN])) <= {WM, GM}

    def test_26_connectivity_used_for_components(self):
        labels = cube(8, BONE)
        labels[2, 2, 2] = GM
        labels[3, 3, 3] = GM  # diagonal; one 26-connected component of size 2
        out = pp.remove_small_components(labels, min_voxels=3)
        assert out[2, 2, 2] == BONE and out[3, 3, 3] == BONE


def make_defect_phantom():
    """Nested shells with one violation of each rule."""
    n = 24
    labels = cube(n, BACKGROUND)
    labels[4:20, 4:20, 4:20] = SKIN
    labels[6:18, 6:18, 6:18] = BONE
    labels[8:16, 8:16, 8:16] = GM
    labels[10:14, 10:14, 10:14] = WM
    # defect 1: external air blob touching the border
    labels[0:2, 0:2, 0:2] = AIR
    # defect 2: enclosed background inside the bone shell
    labels[6, 6:9, 6:9] = BACKGROUND
    # defect 3: bone directly touching GM is built in (no CSF shell)
    # defect 4: a stray CSF voxel inside WM
    labels[12, 12, 12] = CSF
    return labels


def check_postconditions(labels, min_voxels=27):
    from scipy import ndimage

    brain = (labels == WM) | (labels == GM)
    near = ndimage.binary_dilation(brain, pp.STRUCT6)
    assert not np.any((labels == BONE) & near), "bone touching brain remains"
    bg_comp, nbg = ndimage.label(labels == BACKGROUND, structure=pp.STRUCT6)
    border = pp._border_component_ids(bg_comp)
    assert set(np.unique(bg_comp)) - {0} <= border, "enclosed background remains"
    air_comp, nair = ndimage.label(labels == AIR, structure=pp.STRUCT6)
    assert not (pp._border_component_ids(air_comp)), "border air remains"
    for c in range(1, 7):
        comp, n = ndimage.label(labels == c, structure=pp.STRUCT26)
        if n:
            sizes = np.bincount(comp.ravel())[1:]
            assert sizes.min() >= min_voxels, f"small component of class {c} remains"


class TestApplyAll:
    def test_identity_on_consistent_labels(self):
        labels = cube(10, BACKGROUND)
        labels[1:9, 1:9, 1:9] = SKIN
        out, report = pp.apply_all(labels)
        assert np.array_equal(out, labels)
        assert all(v == 0 for v in report.counts.values())

    def test_defect_phantom_fires_every_rule(self):
        labels = make_defect_phantom()
        out, report = pp.apply_all(labels)
        assert all(v > 0 for v in report.counts.values()), report.counts
        check_postconditions(out)

    def test_idempotent(self):
        labels = make_defect_phantom()
        once, _ = pp.apply_all(labels)
        twice, report = pp.apply_all(once)
        assert np.array_equal(once, twice)
        assert all(v == 0 for v in report.counts.values())

    @pytest.mark.parametrize("seed", range(6))
    def test_postconditions_on_random_volumes(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 7, (20, 20, 20)).astype(np.uint8)
        out, report = pp.apply_all(labels)
        assert report.converged
        check_postconditions(out)
        again, _ = pp.apply_all(out)
        assert np.array_equal(out, again)

    def test_label_volume_wrapper(self):
        from headseg.volume import LabelVolume

        labels = LabelVolume(make_defect_phantom(), (1, 1, 1), np.eye(4))
        out, _ = pp.apply_all(labels)
        assert isinstance(out, LabelVolume)
        assert out.shape == labels.shape
