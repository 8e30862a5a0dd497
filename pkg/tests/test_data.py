import gzip
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpgp.data import (ImageDataset, TabularDataset, balanced_sample, downsample, gen_kung_like,
                       gen_stripes, labels_to_pm1, load_csv, load_kung_fixture,
                       load_mnist_binary, read_idx, save_csv, stripe_label, stripes_test_grid,
                       write_idx)


def write(path, text):
    path.write_text(text)
    return path


class TestCSV:
    def test_two_rows(self, tmp_path):
        ds = load_csv(write(tmp_path / "a.csv", "age,height\n1,60\n2,70\n"), "height")
        assert (ds.n, ds.X.shape[1]) == (2, 1)
        assert ds.feature_names == ["age"] and ds.output_name == "height"

    def test_missing_value_row_dropped(self, tmp_path):
        path = write(tmp_path / "a.csv", "age,height\n1,60\nNaN,65\n2,70\n")
        with pytest.warns(UserWarning, match="dropped 1"):
            ds = load_csv(path, "height")
        assert ds.n == 2

    def test_fixture_shape(self):
        ds = load_kung_fixture()
        assert ds.X.shape[1] == 2
        assert ds.feature_names == ["age", "weight"]
        assert ds.output_bound_d == 100.0

    def test_missing_column(self, tmp_path):
        with pytest.raises(ValueError, match="no column"):
            load_csv(write(tmp_path / "a.csv", "age,height\n1,2\n"), "weight")

    def test_unparseable(self, tmp_path):
        with pytest.raises(ValueError, match="cannot parse"):
            load_csv(write(tmp_path / "a.csv", "age,height\n1,tall\n"), "height")

    def test_empty_file(self, tmp_path):
        with pytest.raises(ValueError):
            load_csv(write(tmp_path / "a.csv", ""), "height")

    def test_feature_selection(self, tmp_path):
        ds = load_csv(write(tmp_path / "a.csv", "a,b,c\n1,2,3\n"), "c", feature_columns=["b"])
        np.testing.assert_array_equal(ds.X, [[2.0]])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 4), st.integers(0, 2 ** 31))
    def test_round_trip(self, tmp_path_factory, n, dim, seed):
        r = np.random.default_rng(seed)
        ds = TabularDataset(r.normal(size=(n, dim)) * 10 ** r.uniform(-5, 5), r.normal(size=n))
        path = tmp_path_factory.mktemp("rt") / "d.csv"
        save_csv(ds, path)
        back = load_csv(path, ds.output_name)
        np.testing.assert_array_equal(back.X, ds.X)
        np.testing.assert_array_equal(back.y, ds.y)

    def test_dataset_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            TabularDataset(np.array([[np.inf]]), [1.0])


class TestLabels:
    def test_mappings(self):
        np.testing.assert_array_equal(labels_to_pm1([0, 1, 1]), [-1, 1, 1])
        np.testing.assert_array_equal(labels_to_pm1([-1, 1]), [-1, 1])
        with pytest.raises(ValueError):
            labels_to_pm1([0, 2])


def idx_bytes(arr, code=0x08):
    return bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


class TestIDX:
    def test_handcrafted_two_images(self, tmp_path):
        imgs = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
        raw = b"\x00\x00\x08\x03" + b"\x00\x00\x00\x02" + b"\x00\x00\x00\x03" + b"\x00\x00\x00\x04" \
            + imgs.tobytes()
        (tmp_path / "i.idx").write_bytes(raw)
        np.testing.assert_array_equal(read_idx(tmp_path / "i.idx"), imgs)
        labels = np.array([3, 7], dtype=np.uint8)
        (tmp_path / "l.idx").write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x02" + labels.tobytes())
        out = read_idx(tmp_path / "l.idx")
        np.testing.assert_array_equal(out, [3, 7])
        assert int.from_bytes(raw[:4], "big") == 0x00000803

    def test_write_read_gzip(self, tmp_path):
        arr = np.random.default_rng(0).integers(0, 256, size=(3, 5, 5), dtype=np.uint8)
        write_idx(tmp_path / "x.idx.gz", arr)
        with gzip.open(tmp_path / "x.idx.gz", "rb") as fh:
            assert fh.read(4) == b"\x00\x00\x08\x03"
        np.testing.assert_array_equal(read_idx(tmp_path / "x.idx.gz"), arr)

    def test_big_endian_wider_types(self, tmp_path):
        arr = np.array([1, -2, 300], dtype=">i4")
        (tmp_path / "w.idx").write_bytes(idx_bytes(arr, 0x0C))
        np.testing.assert_array_equal(read_idx(tmp_path / "w.idx"), [1, -2, 300])

    @pytest.mark.parametrize("raw", [b"\x01\x00\x08\x01\x00\x00\x00\x01\x00",
                                     b"\x00\x00\x07\x01\x00\x00\x00\x01\x00",
                                     b"\x00\x00\x08\x02\x00\x00",
                                     b"\x00\x00\x08\x01\x00\x00\x00\x05\x00"])
    def test_corrupt_headers(self, tmp_path, raw):
        (tmp_path / "bad.idx").write_bytes(raw)
        with pytest.raises(ValueError):
            read_idx(tmp_path / "bad.idx")


class TestDownsample:
    def test_zero_image(self):
        np.testing.assert_array_equal(downsample(np.zeros((28, 28))), np.zeros((1, 15, 15)))

    def test_constant_image(self):
        np.testing.assert_allclose(downsample(np.full((2, 28, 28), 128.0)), 128.0, rtol=1e-14)

    def test_mass_preserved(self, rng):
        img = rng.uniform(0, 255, size=(1, 28, 28))
        out = downsample(img)
        assert out.sum() * (28 / 15) ** 2 == pytest.approx(img.sum(), rel=1e-12)
        assert out.min() >= 0 and out.max() <= 255


class TestMNIST:
    def files(self, tmp_path, n=30):
        r = np.random.default_rng(1)
        imgs = r.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
        labels = np.arange(n, dtype=np.uint8) % 10
        write_idx(tmp_path / "img.idx", imgs)
        write_idx(tmp_path / "lab.idx", labels)
        return tmp_path / "img.idx", tmp_path / "lab.idx"

    def test_relabel_and_shapes(self, tmp_path):
        tr, te = load_mnist_binary(*self.files(tmp_path), n_train=20, n_test=10,
                                   rng=np.random.default_rng(0))
        assert tr.images.shape == (20, 225) and te.images.shape == (10, 225)
        np.testing.assert_array_equal(tr.labels, np.where(tr.digits >= 5, 1.0, -1.0))
        assert {3, 7} <= set(np.concatenate([tr.digits, te.digits]).tolist())
        lab3 = np.concatenate([tr.labels, te.labels])[np.concatenate([tr.digits, te.digits]) == 3]
        lab7 = np.concatenate([tr.labels, te.labels])[np.concatenate([tr.digits, te.digits]) == 7]
        assert np.all(lab3 == -1) and np.all(lab7 == 1)

    def test_no_duplicates(self, tmp_path):
        tr, te = load_mnist_binary(*self.files(tmp_path), n_train=20, n_test=10,
                                   rng=np.random.default_rng(0))
        rows = {r.tobytes() for r in np.vstack([tr.images, te.images])}
        assert len(rows) == 30

    def test_insufficient_records(self, tmp_path):
        with pytest.raises(ValueError):
            load_mnist_binary(*self.files(tmp_path, n=5), n_train=4, n_test=2)

    def test_pixel_range(self):
        with pytest.raises(ValueError):
            ImageDataset(np.full((1, 4), 256.0), [1.0])


class TestStripes:
    def test_noise_free_labels(self, rng):
        ds = gen_stripes(300, 0.0, rng)
        np.testing.assert_array_equal(ds.y, stripe_label(ds.X))
        np.testing.assert_array_equal(stripe_label([[0.0, 0.0], [5.0, 0.0]]), [1.0, -1.0])

    def test_default_size(self, rng):
        ds = gen_stripes(rng=rng)
        assert ds.n == 200 and ds.X.shape == (200, 2)
        assert np.all((ds.X >= 0) & (ds.X <= 10))

    def test_half_flip_no_information(self):
        ds = gen_stripes(20000, 0.5, np.random.default_rng(2))
        clean = stripe_label(ds.X)
        joint = np.array([[np.mean((clean == a) & (ds.y == b)) for b in (-1, 1)] for a in (-1, 1)])
        pa, pb = joint.sum(1), joint.sum(0)
        mi = float(np.sum(joint * np.log(joint / np.outer(pa, pb))))
        assert mi < 1e-3

    def test_vertical_density_gradient(self):
        below = [np.sum(gen_stripes(200, 0.1, np.random.default_rng(s)).X[:, 1] < 5) for s in range(200)]
        assert np.mean(np.array(below) > 100) > 0.99

    def test_grid_balanced(self):
        g = stripes_test_grid()
        assert g.n == 100
        assert np.sum(g.y == 1) == 50

    def test_invalid(self, rng):
        with pytest.raises(ValueError):
            gen_stripes(0, 0.1, rng)
        with pytest.raises(ValueError):
            gen_stripes(10, 1.5, rng)


class TestKungLike:
    def test_heights_bounded(self):
        ds = gen_kung_like(2000, np.random.default_rng(0))
        assert ds.y.min() >= 50 and ds.y.max() <= 150
        assert ds.output_bound_d == 100.0

    def test_dense_fraction(self):
        fracs = [np.mean(gen_kung_like(300, np.random.default_rng(s)).X[:, 0] <= 30) for s in range(20)]
        assert np.mean(fracs) >= 0.8

    def test_seeded(self):
        a = gen_kung_like(50, np.random.default_rng(4))
        b = gen_kung_like(50, np.random.default_rng(4))
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)

    def test_minimum_size(self):
        with pytest.raises(ValueError):
            gen_kung_like(5)

    def test_bundled_fixture_matches_generator(self):
        ds = load_kung_fixture()
        gen = gen_kung_like(300, np.random.default_rng(20191105))
        np.testing.assert_array_equal(ds.X, gen.X)
        np.testing.assert_array_equal(ds.y, gen.y)


class TestBalancedSample:
    def test_even_cells(self, rng):
        strata = [(a, b) for a in range(3) for b in (0, 1) for _ in range(20)]
        idx = balanced_sample(strata, 60, rng)
        assert len(set(idx.tolist())) == 60
        counts = {}
        for i in idx:
            counts[strata[i]] = counts.get(strata[i], 0) + 1
        assert set(counts.values()) == {10}

    def test_small_cell_spills_over(self, rng):
        strata = ["a"] * 2 + ["b"] * 50
        idx = balanced_sample(strata, 20, rng)
        assert sum(strata[i] == "a" for i in idx) == 2
        with pytest.raises(ValueError):
            balanced_sample(strata, 100, rng)
