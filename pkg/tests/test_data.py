import json

import numpy as np
import pytest
import torch

from palseg import data as D
from palseg.synthetic import make_samples, write_dataset


def _sample(h=64, w=96, seed=0, mask=False):
    rng = np.random.default_rng(seed)
    image = rng.random((h, w, 3), dtype=np.float32)
    label = rng.integers(0, 3, size=(h, w))
    valid = rng.random((h, w)) > 0.2 if mask else None
    return D.SegSample(image=image, label=label, valid_mask=valid, id=f"x{seed}")


class TestCatalog:
    def test_default_classes(self):
        assert D.AERIAL_PASS.names == ("track", "field", "others")
        assert D.AERIAL_PASS.ignore_id == 255

    def test_ignore_id_collision(self):
        with pytest.raises(D.DatasetError, match="collides"):
            D.ClassCatalog(("a", "b"), ((1, 1, 1), (2, 2, 2)), ignore_id=1)

    def test_duplicate_colors(self):
        with pytest.raises(D.DatasetError, match="unique"):
            D.ClassCatalog(("a", "b"), ((1, 1, 1), (1, 1, 1)))

    def test_dict_roundtrip(self):
        assert D.ClassCatalog.from_dict(D.AERIAL_PASS.to_dict()) == D.AERIAL_PASS

    def test_gappy_ids_rejected(self):
        d = {"classes": [{"id": 0, "name": "a", "color": [1, 2, 3]}, {"id": 2, "name": "b", "color": [4, 5, 6]}]}
        with pytest.raises(D.DatasetError, match="contiguous"):
            D.ClassCatalog.from_dict(d)


class TestManifest:
    def test_counts_by_split(self, tmp_path):
        write_dataset(tmp_path, 12, 2, h=32, w=64)
        m = D.load_manifest(tmp_path)
        assert len(m.split("train")) == 12
        assert len(m.split("test")) == 2

    def test_full_size_split(self, tmp_path):
        # the real dataset: 462 annotated panoramas, 42 of them held out
        write_dataset(tmp_path, 420, 42, h=4, w=8)
        m = D.load_manifest(tmp_path)
        assert (len(m), len(m.split("test"))) == (462, 42)

    def test_missing_label_named(self, tmp_path):
        m = write_dataset(tmp_path, 3, 1, h=16, w=16)
        m.entries[1].label.unlink()
        with pytest.raises(D.DatasetError, match="missing file .*s001.png"):
            D.load_manifest(tmp_path)

    def test_overlapping_splits(self, tmp_path):
        write_dataset(tmp_path, 2, 1, h=16, w=16)
        d = json.loads((tmp_path / "manifest.json").read_text())
        d["samples"].append(dict(d["samples"][0], split="test"))
        (tmp_path / "manifest.json").write_text(json.dumps(d))
        with pytest.raises(D.DatasetError, match="both train and test"):
            D.load_manifest(tmp_path)

    def test_directory_layout_without_manifest(self, tmp_path):
        write_dataset(tmp_path, 3, 0, h=16, w=16)
        (tmp_path / "manifest.json").unlink()
        (tmp_path / "test.txt").write_text("s002\n")
        m = D.load_manifest(tmp_path)
        assert [e.id for e in m.split("test")] == ["s002"]

    def test_empty_root(self, tmp_path):
        with pytest.raises(D.DatasetError):
            D.load_manifest(tmp_path)

    def test_sample_roundtrip_through_png(self, tmp_path):
        m = write_dataset(tmp_path, 1, 0, h=24, w=40, blind_rows=5)
        s = D.load_sample(m.entries[0])
        ref = make_samples(1, 24, 40, seed=0)[0]
        np.testing.assert_array_equal(s.label, ref.label)
        assert np.abs(s.image - ref.image).max() <= 0.5 / 255 + 1e-6
        assert not s.valid_mask[:5].any() and s.valid_mask[5:].all()


class TestValidate:
    def test_clean_sample(self):
        rep = D.validate_sample(_sample(), D.AERIAL_PASS)
        assert rep["ok"]
        assert sum(rep["class_counts"].values()) == 64 * 96

    def test_out_of_range_label(self):
        s = _sample()
        s.label[3, 4] = 7
        rep = D.validate_sample(s, D.AERIAL_PASS)
        assert not rep["ok"]
        assert "label value 7" in rep["violations"][0]

    def test_ignore_counted(self):
        s = _sample()
        s.label[:2] = 255
        rep = D.validate_sample(s, D.AERIAL_PASS)
        assert rep["ok"] and rep["ignored"] == 2 * 96

    def test_size_mismatch_rejected(self):
        with pytest.raises(D.DatasetError, match="differ in size"):
            D.SegSample(np.zeros((4, 5, 3), np.float32), np.zeros((4, 6), np.int64))

    def test_dataset_report(self, tmp_path):
        write_dataset(tmp_path, 3, 1, h=16, w=16)
        rep = D.validate_dataset(D.load_manifest(tmp_path))
        assert rep["ok"] and rep["splits"] == {"train": 3, "test": 1}


class TestColors:
    def test_roundtrip(self):
        label = np.random.default_rng(1).choice([0, 1, 2, 255], size=(20, 30))
        rgb = D.colorize(label, D.AERIAL_PASS)
        np.testing.assert_array_equal(D.decode_color(rgb, D.AERIAL_PASS), label)

    def test_track_is_green(self):
        assert tuple(D.colorize(np.array([[0]]), D.AERIAL_PASS)[0, 0]) == (0, 255, 0)

    def test_unknown_value_located(self):
        label = np.zeros((5, 5), np.int64)
        label[2, 3] = 9
        with pytest.raises(D.DatasetError, match=r"row=2, col=3"):
            D.colorize(label, D.AERIAL_PASS)

    def test_unknown_color_located(self):
        rgb = np.zeros((3, 3, 3), np.uint8)
        rgb[1, 2] = (12, 34, 56)
        with pytest.raises(D.DatasetError, match=r"row=1, col=2"):
            D.decode_color(rgb, D.AERIAL_PASS)


class TestAugment:
    def test_identity_params(self):
        s = _sample(mask=True)
        p = D.AugmentParams(1.0, False, 0, 0, (64, 96), (64, 96))
        out = D.apply_augment(s, p)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.label, s.label)
        np.testing.assert_array_equal(out.valid_mask, s.valid_mask)

    def test_flip_only(self):
        s = _sample()
        p = D.AugmentParams(1.0, True, 0, 0, (64, 96), (64, 96))
        out = D.apply_augment(s, p)
        np.testing.assert_array_equal(out.image, s.image[:, ::-1])
        np.testing.assert_array_equal(out.label, s.label[:, ::-1])

    def test_padding_uses_ignore(self):
        s = _sample(32, 32)
        out = D.augment(s, 0, D.AugmentConfig(crop=(64, 64), scale_range=(1.0, 1.0), flip_prob=0.0))
        assert (out.label[32:] == 255).all() and (out.label[:, 32:] == 255).all()
        assert (out.image[32:] == 0).all()
        np.testing.assert_array_equal(out.label[:32, :32], s.label)

    def test_seed_reproducible(self):
        s = _sample(128, 128)
        cfg = D.AugmentConfig(crop=(64, 64))
        a, b = D.augment(s, 5, cfg), D.augment(s, 5, cfg)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.label, b.label)

    def test_labels_follow_geometry(self):
        # each output label must equal the source label at the pixel the recorded
        # transform points back to, computed here from the parameters alone
        s = _sample(50, 70, seed=3)
        cfg = D.AugmentConfig(crop=(48, 48))
        for seed in range(20):
            out, p = D.augment(s, seed, cfg, return_params=True)
            sh, sw = p.scaled_size
            for oy in range(0, 48, 5):
                for ox in range(0, 48, 5):
                    y, x = oy + p.top, ox + p.left
                    if y >= sh or x >= sw:
                        assert out.label[oy, ox] == 255
                        continue
                    if p.flip:
                        x = sw - 1 - x
                    sy = min(int((y + 0.5) * 50 / sh), 49)
                    sx = min(int((x + 0.5) * 70 / sw), 69)
                    assert out.label[oy, ox] == s.label[sy, sx]

    def test_rejects_bad_range(self):
        with pytest.raises(ValueError):
            D.AugmentConfig(scale_range=(2.0, 1.0))


class TestCollate:
    def test_blind_pixels_ignored(self):
        s = _sample(mask=True)
        _, labels = D.collate([s])
        assert (labels[0][torch.from_numpy(~s.valid_mask)] == 255).all()
        assert (labels[0][torch.from_numpy(s.valid_mask)] < 3).all()

    def test_normalization(self):
        img = np.tile(np.array(D.IMAGENET_MEAN, np.float32), (4, 4, 1))
        assert torch.allclose(D.to_tensor(img), torch.zeros(3, 4, 4), atol=1e-6)
