from __future__ import annotations

import numpy as np
import pytest

from teebranch.datasets import make_dataset


class TestSyntheticData:
    def test_regeneration_is_bit_identical(self):
        a = make_dataset("textured-patches-v1", seed=5, n_train=64, n_val=16, n_test=16)
        b = make_dataset("textured-patches-v1", seed=5, n_train=64, n_val=16, n_test=16)
        np.testing.assert_array_equal(a.x_train, b.x_train)
        np.testing.assert_array_equal(a.y_test, b.y_test)

    def test_different_seeds_differ(self):
        a = make_dataset("textured-patches-v1", seed=5, n_train=64, n_val=16, n_test=16)
        b = make_dataset("textured-patches-v1", seed=6, n_train=64, n_val=16, n_test=16)
        assert not np.array_equal(a.x_train, b.x_train)

    def test_class_balance_within_one_sample(self):
        ds = make_dataset("textured-patches-v1", seed=1, n_train=100, n_val=30, n_test=30)
        for y in (ds.y_train, ds.y_val, ds.y_test):
            counts = np.bincount(y, minlength=8)
            assert counts.max() - counts.min() <= 1

    def test_shapes_and_dtypes(self):
        ds = make_dataset("textured-patches-v1", seed=2, n_train=32, n_val=8, n_test=8)
        assert ds.x_train.shape == (32, 3, 16, 16)
        assert ds.x_train.dtype == np.float32
        assert ds.y_train.dtype == np.int64
        assert ds.num_classes == 8

    def test_unknown_recipe_rejected(self):
        with pytest.raises(ValueError, match="recipe"):
            make_dataset("nope", seed=0, n_train=8, n_val=8, n_test=8)

    def test_split_accessor(self):
        ds = make_dataset("textured-patches-v1", seed=3, n_train=16, n_val=8, n_test=4)
        x, y = ds.split("test")
        assert len(x) == 4 and len(y) == 4
