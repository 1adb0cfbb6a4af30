import json
from collections import Counter

import numpy as np
import pytest
from scipy.stats import spearmanr

from xcaps.data import (DatasetError, SampleRecord, SyntheticConfig, directory_listing, generate_synthetic,
                        load_dataset, render_nodule, save_dataset, stratified_kfold, synthetic_latents,
                        synthetic_records, train_val_split)
from xcaps.ratings import ATTRIBUTE_NAMES, RaterScores


def make_record(sid, malignancy, fill=0.5):
    image = np.full((32, 32), fill, dtype=np.float32)
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[10:20, 10:20] = 1
    ratings = RaterScores.from_lists(malignancy, {k: [2, 3, 4] for k in ATTRIBUTE_NAMES})
    return SampleRecord(sid, image, mask, ratings)


def balanced(n_benign, n_malignant):
    return ([make_record(f"b{i}", [1, 2, 2]) for i in range(n_benign)]
            + [make_record(f"m{i}", [4, 5, 4]) for i in range(n_malignant)])


@pytest.fixture(scope="module")
def small_cfg():
    return SyntheticConfig(seed=11, count=40)


class TestSyntheticGenerator:
    def test_deterministic_directory(self, tmp_path, small_cfg):
        a = directory_listing(generate_synthetic(small_cfg, tmp_path / "a"))
        b = directory_listing(generate_synthetic(small_cfg, tmp_path / "b"))
        assert a == b
        assert len(a) == 1 + 2 * small_cfg.count

    def test_seed_matters(self):
        a = synthetic_records(SyntheticConfig(seed=1, count=3))
        b = synthetic_records(SyntheticConfig(seed=2, count=3))
        assert not np.array_equal(a[0].image, b[0].image)

    def test_round_trip(self, tmp_path, small_cfg):
        originals = synthetic_records(small_cfg)
        loaded = load_dataset(generate_synthetic(small_cfg, tmp_path), exclude_mean3=False)
        assert loaded == originals

    def test_ranges(self, small_cfg):
        for rec in synthetic_records(small_cfg):
            assert rec.image.dtype == np.float32
            assert 0 <= rec.image.min() and rec.image.max() <= 1
            assert set(np.unique(rec.mask)) <= {0, 1}
            assert len(rec.ratings.malignancy) == 4

    def test_near_circular(self):
        rng = np.random.default_rng(5)
        attrs = dict.fromkeys(ATTRIBUTE_NAMES, 3.0) | {"sph": 5.0, "lob": 1.0, "spi": 1.0}
        for _ in range(10):
            _, mask = render_nodule(attrs, rng)
            ys, xs = np.nonzero(mask)
            cy, cx = ys.mean(), xs.mean()
            # boundary = foreground pixels with a background 4-neighbour
            pad = np.pad(mask, 1)
            interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
            by, bx = np.nonzero(mask & (1 - interior))
            r = np.hypot(by + 0.5 - cy - 0.5, bx + 0.5 - cx - 0.5)
            assert r.std() / r.mean() < 0.05

    def test_spiculated_is_not_circular(self):
        rng = np.random.default_rng(5)
        attrs = dict.fromkeys(ATTRIBUTE_NAMES, 3.0) | {"sph": 5.0, "lob": 1.0, "spi": 5.0}
        _, mask = render_nodule(attrs, rng)
        ys, xs = np.nonzero(mask)
        r = np.hypot(ys - ys.mean(), xs - xs.mean())
        assert r.max() > 1.3 * np.percentile(r, 50)

    def test_rater_noise_monte_carlo(self):
        cfg = SyntheticConfig(seed=3, count=1000)
        deviation = [abs(rec.malignancy_mean - lat["malignancy"])
                     for rec, lat in zip(synthetic_records(cfg), synthetic_latents(cfg))]
        assert np.mean(deviation) < 0.5

    def test_spiculation_drives_malignancy(self):
        lat = synthetic_latents(SyntheticConfig(seed=4, count=500))
        rho = spearmanr([d["spi"] for d in lat], [d["malignancy"] for d in lat])[0]
        assert rho > 0.3

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SyntheticConfig(count=0)
        with pytest.raises(ValueError):
            SyntheticConfig(rater_count=2)


class TestLoad:
    def test_empty_manifest(self, tmp_path):
        (tmp_path / "manifest.jsonl").write_text("")
        assert load_dataset(tmp_path) == []

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_mean3_excluded(self, tmp_path):
        save_dataset([make_record("keep", [4, 4, 5]), make_record("drop", [3, 3, 3])], tmp_path)
        assert [r.id for r in load_dataset(tmp_path)] == ["keep"]
        assert len(load_dataset(tmp_path, exclude_mean3=False)) == 2

    def test_mean_near_three_kept(self, tmp_path):
        save_dataset([make_record("x", [2, 3, 3, 3])], tmp_path)
        assert len(load_dataset(tmp_path)) == 1

    def test_corrupt_image_names_id(self, tmp_path):
        save_dataset([make_record("a", [1, 1, 2]), make_record("nodule7", [4, 4, 5])], tmp_path)
        p = tmp_path / "images" / "nodule7.f32"
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(DatasetError, match="nodule7"):
            load_dataset(tmp_path)

    def test_missing_mask(self, tmp_path):
        save_dataset([make_record("lonely", [1, 1, 2])], tmp_path)
        (tmp_path / "masks" / "lonely.u8").unlink()
        with pytest.raises(DatasetError, match="lonely"):
            load_dataset(tmp_path)

    def test_score_out_of_range(self, tmp_path):
        save_dataset([make_record("a", [1, 1, 2])], tmp_path)
        entry = json.loads((tmp_path / "manifest.jsonl").read_text())
        entry["malignancy"] = [1, 6, 2]
        (tmp_path / "manifest.jsonl").write_text(json.dumps(entry) + "\n")
        with pytest.raises(DatasetError, match="a"):
            load_dataset(tmp_path)

    def test_duplicate_id(self, tmp_path):
        save_dataset([make_record("a", [1, 1, 2])], tmp_path)
        line = (tmp_path / "manifest.jsonl").read_text()
        (tmp_path / "manifest.jsonl").write_text(line + line)
        with pytest.raises(DatasetError, match="duplicate"):
            load_dataset(tmp_path)

    def test_intensity_range(self, tmp_path):
        save_dataset([make_record("hot", [1, 1, 2], fill=1.5)], tmp_path)
        with pytest.raises(DatasetError, match="hot"):
            load_dataset(tmp_path)

    def test_wrong_shape_record(self):
        with pytest.raises(DatasetError):
            SampleRecord("x", np.zeros((31, 32), np.float32), np.ones((32, 32), np.uint8),
                         make_record("y", [1, 1, 1]).ratings)

    def test_empty_mask_record(self):
        with pytest.raises(DatasetError, match="empty"):
            SampleRecord("x", np.zeros((32, 32), np.float32), np.zeros((32, 32), np.uint8),
                         make_record("y", [1, 1, 1]).ratings)


class TestFolds:
    def test_646_benign_503_malignant(self):
        records = balanced(646, 503)
        folds = stratified_kfold(records, 5, seed=0)
        sizes = Counter(folds.assignments.values())
        assert sorted(sizes) == list(range(5))
        assert max(sizes.values()) - min(sizes.values()) <= 1
        share = 646 / 1149
        for f in range(5):
            ids = folds.fold_ids(f)
            benign = sum(i.startswith("b") for i in ids) / len(ids)
            assert abs(benign - share) < 0.05
            assert 228 <= len(ids) <= 231

    def test_stratum_sizes_balanced(self):
        folds = stratified_kfold(balanced(23, 17), 5, seed=1)
        for prefix in "bm":
            c = Counter(f for i, f in folds.assignments.items() if i.startswith(prefix))
            assert max(c.values()) - min(c.values()) <= 1

    def test_ten_records(self):
        folds = stratified_kfold(balanced(5, 5), 5, seed=2)
        assert Counter(folds.assignments.values()) == {f: 2 for f in range(5)}

    def test_partition(self):
        records = balanced(30, 20)
        folds = stratified_kfold(records, 5, seed=3)
        all_ids = [i for f in range(5) for i in folds.fold_ids(f)]
        assert sorted(all_ids) == sorted(r.id for r in records)

    def test_deterministic(self):
        records = balanced(30, 20)
        assert stratified_kfold(records, 5, 7) == stratified_kfold(records, 5, 7)
        assert stratified_kfold(records, 5, 7) != stratified_kfold(records, 5, 8)

    def test_errors(self):
        with pytest.raises(ValueError):
            stratified_kfold(balanced(3, 10), 5)
        with pytest.raises(ValueError):
            stratified_kfold([], 5)
        with pytest.raises(ValueError):
            stratified_kfold(balanced(3, 3), 1)


class TestSplit:
    def test_hundred(self):
        train, val = train_val_split(balanced(50, 50), 0.1, seed=0)
        assert (len(train), len(val)) == (90, 10)

    def test_deterministic(self):
        rec = balanced(40, 30)
        assert train_val_split(rec, 0.1, 4) == train_val_split(rec, 0.1, 4)

    def test_disjoint_and_ratio(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            nb, nm = rng.integers(30, 200, 2)
            rec = balanced(int(nb), int(nm))
            train, val = train_val_split(rec, 0.1, int(rng.integers(1 << 30)))
            assert not {r.id for r in train} & {r.id for r in val}
            share = nb / (nb + nm)
            assert abs(sum(r.id.startswith("b") for r in val) / len(val) - share) < 0.05

    def test_too_few(self):
        with pytest.raises(ValueError):
            train_val_split(balanced(3, 30), 0.1)
        with pytest.raises(ValueError):
            train_val_split(balanced(30, 30), 1.0)
