import numpy as np
import pytest

from lnskit.datasets import GENERATORS, make_dataset
from lnskit.errors import ConfigError


class TestDatasets:
    @pytest.mark.parametrize("name", sorted(GENERATORS))
    def test_shapes_and_bias_column(self, name):
        d = make_dataset(name, 200, 0)
        assert len(d.y_train) + len(d.y_test) == 200
        assert len(d.y_test) == 50
        np.testing.assert_array_equal(d.x_train[:, -1], 1.0)
        assert d.x_train.shape[1] == d.n_features == d.x_test.shape[1]
        assert d.y_train.max() < d.n_classes

    @pytest.mark.parametrize("name", sorted(GENERATORS))
    def test_seeded(self, name):
        a, b = make_dataset(name, 100, 3), make_dataset(name, 100, 3)
        np.testing.assert_array_equal(a.x_train, b.x_train)
        assert not np.array_equal(a.x_train, make_dataset(name, 100, 4).x_train)

    def test_digits_features(self):
        d = make_dataset("digits", 100, 0, n_classes=4)
        assert d.n_features == 65 and d.n_classes == 4

    def test_digits_prototypes_do_not_depend_on_seed(self):
        # noise-free, unshifted samples of one class are identical across seeds
        a = make_dataset("digits", 400, 1, noise=0.0, shift=False)
        b = make_dataset("digits", 400, 2, noise=0.0, shift=False)
        ia = a.x_train[a.y_train == 0][0]
        ib = b.x_train[b.y_train == 0][0]
        np.testing.assert_array_equal(ia, ib)

    def test_blobs_are_separable(self):
        d = make_dataset("blobs", 500, 0, separation=8.0)
        pred = (d.x_train[:, 0] > 0).astype(int)
        assert np.mean(pred == d.y_train) > 0.99

    def test_unknown_name(self):
        with pytest.raises(ConfigError):
            make_dataset("mnist", 10, 0)

    def test_digits_class_limit(self):
        with pytest.raises(ConfigError):
            make_dataset("digits", 10, 0, n_classes=17)
