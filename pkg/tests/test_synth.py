import numpy as np
import pytest

from ltcl import synth
from ltcl.errors import ConfigError, SamplingError


# ---------------------------------------------------------------------------
# pattern bank


def test_bank_deterministic_for_fixed_seed():
    a = synth.build_pattern_bank(8, 4, 2, seed=7, motifs_per_class=2)
    b = synth.build_pattern_bank(8, 4, 2, seed=7, motifs_per_class=2)
    assert a.sharing_map == b.sharing_map
    assert a.bank_hash() == b.bank_hash()


def test_bank_degree_zero_disjoint_sets():
    bank = synth.build_pattern_bank(8, 4, 0, seed=1, motifs_per_class=2)
    sets = [set(v) for v in bank.sharing_map.values()]
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            assert not (sets[i] & sets[j])


def test_bank_degree_zero_infeasible():
    with pytest.raises(ConfigError):
        synth.build_pattern_bank(3, 4, 0, seed=1)


def test_bank_motif_values_in_unit_interval():
    bank = synth.build_pattern_bank(12, 4, 2, seed=3)
    for m in bank.motifs:
        assert m.pixels.min() >= 0 and m.pixels.max() <= 1
        assert m.alpha.min() >= 0 and m.alpha.max() <= 1


def test_bank_tail_shares_with_head():
    bank = synth.build_pattern_bank(28, 20, 2, seed=5)
    head_motifs = set()
    for k in bank.head_classes():
        head_motifs.update(bank.sharing_map[k])
    for k in bank.tail_classes():
        assert set(bank.sharing_map[k]) & head_motifs, f"tail class {k} shares nothing"


def test_bank_mean_pairwise_overlap_matches_expectation():
    # brute-force set intersections, averaged over seeds to tame sampling noise
    num_motifs, K, degree = 28, 20, 2
    expect = synth.expected_pairwise_overlap(num_motifs, K, degree)
    totals = []
    for seed in range(30):
        bank = synth.build_pattern_bank(num_motifs, K, degree, seed=seed)
        overlaps = []
        for a in range(1, K + 1):
            for b in range(a + 1, K + 1):
                overlaps.append(len(set(bank.sharing_map[a]) & set(bank.sharing_map[b])))
        totals.append(np.mean(overlaps))
    assert abs(np.mean(totals) - expect) <= 0.1 * expect


# ---------------------------------------------------------------------------
# dataset generation


def small_dataset(seed=0, counts=(12, 9, 6, 4), size=32, test_per_class=4):
    spec = synth.DatasetSpec(class_counts=counts, image_size=size, seed=seed,
                             test_per_class=test_per_class)
    bank = synth.build_pattern_bank(10, len(counts), 1, seed=seed, motifs_per_class=2)
    return synth.generate_dataset(spec, bank)


def test_generate_balanced_degenerate_case():
    spec = synth.DatasetSpec(class_counts=(10, 10), image_size=32, seed=1, test_per_class=2)
    bank = synth.build_pattern_bank(6, 2, 1, seed=1, motifs_per_class=2)
    ds = synth.generate_dataset(spec, bank)
    assert len(ds.train) == 20
    labels = ds.train_labels()
    assert (labels == 1).sum() == 10 and (labels == 2).sum() == 10


def test_exponential_profile_hits_imbalance_ratio():
    spec = synth.DatasetSpec.exponential(num_classes=20, n_max=500, imbalance_ratio=100)
    assert spec.class_counts[0] == 500
    assert spec.class_counts[-1] == 5
    assert spec.imbalance_ratio == 100.0
    assert all(a >= b for a, b in zip(spec.class_counts, spec.class_counts[1:]))


def test_generation_is_deterministic_and_thread_invariant():
    spec = synth.DatasetSpec(class_counts=(6, 4, 3), image_size=32, seed=9, test_per_class=2)
    bank = synth.build_pattern_bank(9, 3, 1, seed=9, motifs_per_class=2)
    serial = synth.generate_dataset(spec, bank, threads=1)
    threaded = synth.generate_dataset(spec, bank, threads=4)
    assert np.array_equal(serial.train_pixels(), threaded.train_pixels())
    assert np.array_equal(serial.test_pixels(), threaded.test_pixels())


def test_cardinalities_and_balanced_test_split():
    ds = small_dataset()
    train_y = ds.train_labels()
    for k, count in enumerate(ds.spec.class_counts, start=1):
        assert (train_y == k).sum() == count
    test_y = ds.test_labels()
    for k in range(1, ds.spec.num_classes + 1):
        assert (test_y == k).sum() == ds.spec.test_per_class


def test_pixels_in_unit_interval_and_placements_recorded():
    ds = small_dataset()
    for im in ds.train[:10]:
        assert im.pixels.min() >= 0 and im.pixels.max() <= 1
        assert len(im.motif_placements) == ds.bank.motifs_per_class
        for mid, box in im.motif_placements:
            assert mid in ds.bank.sharing_map[im.label]
            assert 0 <= box.x0 and box.x1 <= 1


def test_nearest_centroid_beats_chance():
    ds = small_dataset(seed=2, counts=(30, 24, 18, 12), test_per_class=10)
    acc = synth.nearest_centroid_accuracy(ds)
    assert acc > 1.0 / ds.spec.num_classes


def test_image_too_small_rejected():
    with pytest.raises(ConfigError):
        synth.DatasetSpec(class_counts=(4, 4), image_size=8, seed=0, test_per_class=1)


# ---------------------------------------------------------------------------
# augmentation


def test_identity_policy_reproduces_image():
    ds = small_dataset()
    im = ds.train[0]
    policy = synth.AugmentationPolicy.identity(out_size=ds.spec.image_size)
    va, vb = synth.augment_two_views(im, policy, seed=123)
    assert np.allclose(va.pixels, im.pixels.astype(np.float64), atol=1e-12)
    assert np.allclose(vb.pixels, im.pixels.astype(np.float64), atol=1e-12)


def test_augment_fixed_seed_reproducible():
    ds = small_dataset()
    im = ds.train[3]
    policy = synth.AugmentationPolicy()
    va1, vb1 = synth.augment_two_views(im, policy, seed=55)
    va2, vb2 = synth.augment_two_views(im, policy, seed=55)
    assert np.array_equal(va1.pixels, va2.pixels)
    assert np.array_equal(vb1.pixels, vb2.pixels)
    assert va1.box == va2.box and vb1.flipped == vb2.flipped


def test_flip_probability_one_mirrors_crop():
    ds = small_dataset()
    im = ds.train[1]
    policy = synth.AugmentationPolicy(crop_scale=(0.5, 0.5), crop_aspect=(1.0, 1.0),
                                      flip_prob=1.0, brightness=0.0, contrast=0.0,
                                      out_size=16)
    va, _ = synth.augment_two_views(im, policy, seed=77)
    assert va.flipped
    crop = synth.crop_resize(im.pixels.astype(np.float64), va.box, 16)
    assert np.array_equal(va.pixels, crop[:, ::-1, :])


# ---------------------------------------------------------------------------
# patch boxes


def test_sample_patch_boxes_respects_scale_range():
    boxes = synth.sample_patch_boxes(5, (0.05, 0.6), seed=3)
    assert len(boxes) == 5
    for b in boxes:
        assert 0.05 - 1e-12 <= b.area <= 0.6 + 1e-12


def test_full_image_degenerate_box():
    (box,) = synth.sample_patch_boxes(1, (1.0, 1.0), (1.0, 1.0), seed=0)
    assert box == synth.PatchBox(0.5, 0.5, 1.0, 1.0)


def test_patch_box_monte_carlo_bounds():
    rng = np.random.default_rng(0)
    boxes = synth.sample_patch_boxes(10_000, (0.05, 0.6), (3 / 4, 4 / 3), seed=rng)
    areas = np.array([b.area for b in boxes])
    assert areas.min() >= 0.05 - 1e-12
    assert areas.max() <= 0.6 + 1e-12
    for b in boxes[:200]:
        assert b.x0 >= -1e-9 and b.x1 <= 1 + 1e-9
        assert b.y0 >= -1e-9 and b.y1 <= 1 + 1e-9


def test_infeasible_box_configuration_raises():
    with pytest.raises(SamplingError):
        synth.sample_patch_boxes(1, (0.9, 1.0), (2.0, 2.0), seed=0)


# ---------------------------------------------------------------------------
# crop / resize


def test_crop_resize_full_box_identity():
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 1, size=(12, 12, 3))
    out = synth.crop_resize(img, synth.FULL_BOX, 12)
    assert np.allclose(out, img, atol=1e-15)


def test_crop_resize_constant_image_invariance():
    img = np.full((10, 10, 3), 0.37)
    box = synth.PatchBox(0.4, 0.6, 0.3, 0.25)
    out = synth.crop_resize(img, box, 7)
    assert np.allclose(out, 0.37, atol=1e-12)


def test_bilinear_upsample_matches_hand_weights():
    # 2x2 checkerboard to 4x4 with half-pixel centers and edge clamping:
    # per-axis weights are [1, 3/4+1/4, 1/4+3/4, 1] over the two source cells
    src = np.array([[[1.0], [0.0]], [[0.0], [1.0]]])
    out = synth.bilinear_resize(src, 4, 4)[:, :, 0]
    w = np.array([[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]])
    expect = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            val = 0.0
            for a in range(2):
                for b in range(2):
                    val += w[i, a] * w[j, b] * src[a, b, 0]
            expect[i, j] = val
    assert np.allclose(out, expect, atol=1e-12)


# ---------------------------------------------------------------------------
# persistence


def test_tensor_file_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    arr = rng.uniform(0, 1, size=(5, 4, 4, 3)).astype(np.float32)
    path = tmp_path / "t.ltcl"
    synth.write_tensor_file(path, arr)
    back = synth.read_tensor_file(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)
    first = path.read_bytes()
    synth.write_tensor_file(path, back)
    assert path.read_bytes() == first


def test_dataset_save_load_round_trip(tmp_path):
    ds = small_dataset(seed=6, counts=(5, 4, 3), test_per_class=2)
    ds.save(tmp_path / "data")
    back = synth.load_dataset(tmp_path / "data")
    assert back.spec == ds.spec
    assert back.bank.bank_hash() == ds.bank.bank_hash()
    assert np.array_equal(back.train_pixels(), ds.train_pixels())
    assert np.array_equal(back.test_labels(), ds.test_labels())
    assert back.train[0].motif_placements == ds.train[0].motif_placements
