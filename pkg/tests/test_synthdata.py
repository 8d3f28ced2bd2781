"""Benchmark generator: determinism, structure, composition, augmentation."""

import os

import numpy as np
import pytest

from dualview.metrics import EvalRecord, auc
from dualview.synthdata import (AugmentDraws, BatchComposer, DatasetManifest,
                                apply_augment, augment_image, compose_batch,
                                domain_style, generate_dataset, load_lesions,
                                load_manifest, sample_augment_draws,
                                synthesize_sample, write_manifest)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "tiny"
    manifest = generate_dataset(num_domains=3, per_domain=16, malignant_fraction=0.25,
                                image_size=64, seed=11, out_dir=str(out))
    return manifest


class TestGeneration:
    def test_deterministic_bytes(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_dataset(2, 8, 0.5, 64, 3, str(a))
        generate_dataset(2, 8, 0.5, 64, 3, str(b))
        for name in sorted(os.listdir(a)):
            pa, pb = a / name, b / name
            if pa.is_file():
                assert pa.read_bytes() == pb.read_bytes(), name
        files_a = sorted(os.listdir(a / "images"))
        assert files_a == sorted(os.listdir(b / "images"))
        for name in files_a:
            assert (a / "images" / name).read_bytes() == (b / "images" / name).read_bytes()

    def test_malignant_rounding(self, tiny_dataset):
        for d in range(3):
            rows = [r for r in tiny_dataset.rows if r.domain_id == d]
            assert sum(r.label for r in rows) == 4      # round(16 * 0.25)

    def test_images_in_range_and_shape(self, tiny_dataset):
        cc, mlo = tiny_dataset.load_pair(tiny_dataset.rows[0])
        for img in (cc, mlo):
            assert img.shape == (1, 64, 64)
            assert img.dtype == np.float32
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_split_partition(self, tiny_dataset):
        for d in range(3):
            rows = [r for r in tiny_dataset.rows if r.domain_id == d]
            n_test = sum(r.split == "test" for r in rows)
            assert n_test == 4              # every 4th index

    def test_parameter_validation(self, tmp_path):
        with pytest.raises(ValueError, match="domains"):
            generate_dataset(1, 8, 0.5, 64, 0, str(tmp_path / "x"))
        with pytest.raises(ValueError, match="malignant_fraction"):
            generate_dataset(2, 8, 1.5, 64, 0, str(tmp_path / "y"))

    def test_distinct_styles(self):
        styles = [domain_style(d) for d in range(8)]
        tuples = {(s.intensity_offset, s.intensity_scale, s.gamma_exponent,
                   s.noise_std, s.texture_frequency) for s in styles}
        assert len(tuples) == 8


class TestLesionCorrespondence:
    def test_columns_match_between_views(self, tiny_dataset):
        lesions = load_lesions(tiny_dataset.root)
        mal = [l for l in lesions if l.kind == "malignant"]
        assert mal, "expected malignant samples"
        feature_width = 64 // 16
        for l in mal:
            assert l.cc_col == l.mlo_col
            cc_cell = l.cc_col * feature_width // 64
            mlo_cell = l.mlo_col * feature_width // 64
            assert abs(cc_cell - mlo_cell) <= 1

    def test_rows_vary_between_views(self, tiny_dataset):
        lesions = [l for l in load_lesions(tiny_dataset.root) if l.kind == "malignant"]
        assert any(l.cc_row != l.mlo_row for l in lesions)

    def test_malignant_brighter_at_site(self):
        s = synthesize_sample("d0_00000", 0, 1, "train", 64, 5)
        l = s.lesion
        patch = s.cc_image[0, max(l.cc_row - 2, 0):l.cc_row + 3,
                           max(l.cc_col - 2, 0):l.cc_col + 3]
        assert patch.mean() > s.cc_image.mean() + 0.05


class TestManifestRoundTrip:
    def test_parse_write_identity(self, tiny_dataset):
        again = load_manifest(tiny_dataset.root)
        assert again == tiny_dataset

    def test_rewrite_is_stable(self, tiny_dataset):
        loaded = load_manifest(tiny_dataset.root)
        write_manifest(loaded, tiny_dataset.root)
        assert load_manifest(tiny_dataset.root) == tiny_dataset

    def test_header_exact(self, tiny_dataset):
        with open(os.path.join(tiny_dataset.root, "manifest.csv")) as fh:
            assert fh.readline().rstrip("\n") == \
                "sample_id,cc_path,mlo_path,label,domain_id,split"

    def test_missing_file_detected(self, tiny_dataset, tmp_path):
        import shutil
        broken = tmp_path / "broken"
        shutil.copytree(tiny_dataset.root, broken)
        victim = broken / "images" / os.path.basename(tiny_dataset.rows[0].cc_path)
        victim.unlink()
        with pytest.raises(FileNotFoundError):
            load_manifest(str(broken))

    def test_disjoint_domain_sets(self, tiny_dataset):
        assert not set(tiny_dataset.seen_domains) & set(tiny_dataset.unseen_domains)


class TestBatchComposer:
    def test_twelve_over_three_gives_four_each(self, tiny_dataset):
        batch = compose_batch(tiny_dataset, 12, [0, 1], np.random.default_rng(0))
        # tiny set has 2 seen domains -> use 12/2 = 6 each
        counts = {}
        for row in batch:
            counts[row.domain_id] = counts.get(row.domain_id, 0) + 1
        assert counts == {0: 6, 1: 6}

    def test_unit_batch(self, tiny_dataset):
        batch = compose_batch(tiny_dataset, 2, [0, 1], np.random.default_rng(0))
        assert len(batch) == 2

    def test_indivisible_batch_rejected(self, tiny_dataset):
        with pytest.raises(ValueError, match="divisible"):
            compose_batch(tiny_dataset, 13, [0, 1], np.random.default_rng(0))

    def test_epoch_covers_without_repeats(self, tiny_dataset):
        composer = BatchComposer(tiny_dataset, 4, [0, 1], np.random.default_rng(1))
        seen_ids = []
        for _ in range(composer.steps_per_epoch):
            seen_ids.extend(r.sample_id for r in composer.next_batch())
        per_domain_train = 12
        for d in (0, 1):
            ids = [i for i in seen_ids if i.startswith(f"d{d}_")]
            assert len(ids) == len(set(ids)) == per_domain_train

    def test_small_domain_reshuffles(self, tmp_path):
        manifest = generate_dataset(2, 8, 0.5, 64, 4, str(tmp_path / "uneven"))
        # drop half of domain 1's training rows to force exhaustion
        half = [r for r in manifest.rows
                if not (r.domain_id == 1 and r.split == "train" and
                        int(r.sample_id.split("_")[1]) % 2 == 0)]
        manifest.rows = half
        composer = BatchComposer(manifest, 2, [0, 1], np.random.default_rng(2))
        draws = {0: 0, 1: 0}
        for _ in range(composer.steps_per_epoch):
            for row in composer.next_batch():
                draws[row.domain_id] += 1
        assert draws[0] == draws[1] == composer.steps_per_epoch


class TestAugmentation:
    def test_identity_draws(self):
        rng = np.random.default_rng(5)
        img = rng.random((1, 32, 32)).astype(np.float32)
        out = apply_augment(img, AugmentDraws())
        np.testing.assert_array_equal(out, img)

    def test_double_flip_recovers(self):
        rng = np.random.default_rng(6)
        img = rng.random((1, 32, 32)).astype(np.float32)
        once = apply_augment(img, AugmentDraws(flip=True))
        twice = apply_augment(once, AugmentDraws(flip=True))
        np.testing.assert_allclose(twice, img, atol=1e-6)

    def test_deterministic_given_seed(self):
        img = np.random.default_rng(7).random((1, 48, 48)).astype(np.float32)
        a = augment_image(img, np.random.default_rng(123))
        b = augment_image(img, np.random.default_rng(123))
        assert a.tobytes() == b.tobytes()

    def test_test_split_rejected(self):
        img = np.zeros((1, 32, 32), dtype=np.float32)
        with pytest.raises(ValueError, match="train"):
            augment_image(img, np.random.default_rng(0), split="test")

    def test_draw_ranges(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            d = sample_augment_draws(rng, 128)
            assert -15.0 <= d.angle_deg <= 15.0
            assert abs(d.tx) <= 12.8 and abs(d.ty) <= 12.8
            assert 0.8 <= d.scale <= 1.6
            assert -25.0 <= d.shear_deg <= 25.0


class TestDistributionShift:
    def test_threshold_classifier_gap(self):
        """In-domain separable, pooled confounded (reference seed, smaller n)."""
        recs = {d: [] for d in range(4)}
        for d in range(4):
            for i in range(60):
                label = 1 if i < 30 else 0
                s = synthesize_sample(f"d{d}_{i:05d}", d, label, "train", 128, 42)
                score = float(np.percentile(s.cc_image, 99))
                recs[d].append(EvalRecord(s.sample_id, d, score, label))
        for d in range(4):
            assert auc(recs[d]) >= 0.75, f"domain {d} not separable"
        pooled = [r for d in range(4) for r in recs[d]]
        assert auc(pooled) <= 0.65, "pooled separability too high: no real shift"

    def test_domain_mean_separation(self):
        means = {}
        for d in range(4):
            vals = []
            for i in range(40):
                s = synthesize_sample(f"d{d}_{i:05d}", d, i % 2, "train", 128, 42)
                vals.append(float(s.cc_image.mean()))
            means[d] = np.mean(vals)
        for a in range(4):
            for b in range(a + 1, 4):
                assert abs(means[a] - means[b]) >= 0.05
