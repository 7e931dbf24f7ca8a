import unittest

import numpy as np

from app.config import SLOW_TESTS
from app.postproc import (
    connected_components,
    enforce_et_threshold,
    postprocess,
    remove_small_components,
)
from app.runtime import ConfigError
from app.volume import SegVolume
from test.runner import flood_fill_sizes, random_labels


def grid_with(*blocks: tuple[tuple[slice, ...], int], dims=(20, 20, 20)):
    data = np.zeros(dims, dtype=np.uint8)
    for where, label in blocks:
        data[where] = label
    return SegVolume(data)


class TestPostproc(unittest.TestCase):
    def test_small_component_boundary(self):
        five = (np.s_[0:5, 0, 0], 2)
        ten = (np.s_[10, 10, 0:10], 1)
        out = remove_small_components(grid_with(five, ten)).data
        self.assertFalse(out[0:5, 0, 0].any())
        self.assertEqual(int((out > 0).sum()), 10)

        nine = grid_with((np.s_[10, 10, 0:9], 4))
        self.assertFalse(remove_small_components(nine).data.any())

    def test_component_keeps_labels(self):
        data = np.zeros((20, 20, 20), dtype=np.uint8)
        data[2:5, 2:5, 2:5] = 2
        data[3, 3, 3] = 4
        data[3, 3, 4] = 1
        out = remove_small_components(SegVolume(data))
        np.testing.assert_array_equal(out.data, data)

    def test_diagonal_neighbours_connect(self):
        data = np.zeros((12, 12, 12), dtype=np.uint8)
        for i in range(10):
            data[i, i, i] = 2
        self.assertEqual(connected_components(data > 0).count, 1)
        self.assertEqual(connected_components(data > 0, 6).count, 10)
        self.assertEqual(int((remove_small_components(SegVolume(data)).data > 0).sum()), 10)
        self.assertFalse(remove_small_components(SegVolume(data), connectivity=6).data.any())

        with self.assertRaises(ConfigError):
            connected_components(data > 0, 8)

    def test_et_threshold(self):
        data = np.zeros((10, 10, 10), dtype=np.uint8)
        data.ravel()[:499] = 4
        out = enforce_et_threshold(SegVolume(data)).data
        self.assertFalse((out == 4).any())
        self.assertEqual(int((out == 1).sum()), 499)

        data.ravel()[:500] = 4
        np.testing.assert_array_equal(enforce_et_threshold(SegVolume(data)).data, data)

    def test_et_threshold_counts_whole_case(self):
        data = np.zeros((20, 20, 20), dtype=np.uint8)
        data[0:5, 0:5, 0:10] = 4
        data[10:15, 10:15, 10:20] = 4
        self.assertEqual(connected_components(data > 0).count, 2)
        np.testing.assert_array_equal(enforce_et_threshold(SegVolume(data)).data, data)

    def test_idempotent(self):
        for seed in range(100):
            data = random_labels((16, 16, 16), seed, p=(0.85, 0.05, 0.05, 0.05)).data
            once = postprocess(SegVolume(data), et_threshold=20)
            twice = postprocess(once, et_threshold=20)
            np.testing.assert_array_equal(once.data, twice.data)

    def test_composition(self):
        data = np.zeros((20, 20, 20), dtype=np.uint8)
        data[0:3, 0:3, 0:1] = 4
        data[5:15, 5:15, 5:10] = 2
        data[8:12, 8:12, 6:9] = 4
        out = postprocess(SegVolume(data)).data
        self.assertFalse(out[0:3, 0:3, 0].any())
        self.assertFalse((out == 4).any())
        self.assertEqual(int((out == 1).sum()), 4 * 4 * 3)
        self.assertEqual(int((out == 2).sum()), 10 * 10 * 5 - 4 * 4 * 3)

    def test_matches_flood_fill(self):
        rng = np.random.default_rng(0)
        trials = 100 if SLOW_TESTS() else 10
        for _ in range(trials):
            mask = rng.random((20, 20, 20)) < rng.uniform(0.02, 0.2)
            labeling = connected_components(mask)
            self.assertEqual(sorted(labeling.sizes.tolist()), flood_fill_sizes(mask))
            self.assertEqual(int(labeling.sizes.sum()), int(mask.sum()))

            seg = SegVolume(np.where(mask, 2, 0).astype(np.uint8))
            kept = remove_small_components(seg).data > 0
            self.assertEqual(flood_fill_sizes(kept), [s for s in flood_fill_sizes(mask) if s >= 10])


if __name__ == "__main__":  # pragma: no cover
    unittest.main()
