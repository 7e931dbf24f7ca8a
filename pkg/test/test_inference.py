import unittest
from unittest import mock

import numpy as np
import torch

from app.checkpoint import Checkpoint
from app.inference import (
    CLASS_LABELS,
    EnsemblePredictor,
    ProbMap,
    build_ensemble,
    decode_labels,
    ensemble_average,
    gaussian_weights,
    load_probmap,
    save_probmap,
    select_members,
    sliding_window_predict,
    tile_starts,
    uniform_weights,
    write_probmap_nifti,
)
from app.model import BranchInput, build_network
from app.runtime import ConfigError, EnsembleError, ShapeError
from app.volume import BBox, normalize_modalities, read_nifti
from test.runner import StubNet, constant_logits, temp_dir, tiny_case, tiny_net_config


def softmax(values):
    return torch.softmax(torch.tensor(values, dtype=torch.float64), dim=0).numpy()


def uniform_map(dims, class_probs, spacing=(1.0, 1.0, 1.0)):
    data = np.broadcast_to(np.asarray(class_probs, dtype=np.float32).reshape(-1, 1, 1, 1), (4, *dims))
    return ProbMap(data.copy(), spacing)


def stub_checkpoint(arch="dual", val_dice=None, num_classes=4, patch_size=(8, 8, 8)):
    train_config = {"patch_size": list(patch_size)} if patch_size else {}
    config = tiny_net_config(num_classes=num_classes)
    return Checkpoint(arch, config, {}, 0, 0, "x", val_dice=val_dice, train_config=train_config)


class TestTiling(unittest.TestCase):
    def test_tile_starts(self):
        self.assertEqual(tile_starts(8, 8, 4), [0])
        self.assertEqual(tile_starts(5, 8, 4), [0])
        self.assertEqual(tile_starts(16, 8, 4), [0, 4, 8])
        self.assertEqual(tile_starts(10, 8, 4), [0, 2])
        self.assertEqual(tile_starts(6, 4, 2), [0, 2])

    def test_gaussian_weights(self):
        w = gaussian_weights((5, 7, 9))
        self.assertEqual(w.shape, (5, 7, 9))
        self.assertEqual(w[2, 3, 4], 1.0)
        self.assertTrue((w > 0).all())
        np.testing.assert_allclose(w, w[::-1, ::-1, ::-1])


class TestSlidingWindow(unittest.TestCase):
    def test_single_patch_is_softmax(self):
        case = tiny_case()
        net = StubNet(lambda _calls, x: torch.cat([x.a, x.b], dim=1))
        p = sliding_window_predict(net, case, (8, 8, 8))
        self.assertEqual(net.calls, 1)

        # logits arrive in branch order: Flair, T2, T1ce, T1
        logits = torch.from_numpy(case.stacked[[3, 2, 1, 0]]).double()
        expected = torch.softmax(logits, dim=0).numpy().astype(np.float32)
        np.testing.assert_allclose(p.data, expected, rtol=1e-6)
        self.assertEqual(p.dims, (8, 8, 8))
        self.assertTrue(p.is_normalized())

    def test_constant_logits(self):
        net = StubNet(constant_logits([1.0, 2.0, 3.0, 4.0]))
        p = sliding_window_predict(net, tiny_case(dims=(16, 8, 8)), (8, 8, 8))
        self.assertEqual(net.calls, 3)
        np.testing.assert_allclose(p.data[:, 5, 5, 5], softmax([1.0, 2.0, 3.0, 4.0]), rtol=1e-6)
        self.assertTrue((decode_labels(p).data == 4).all())

    def test_overlapping_tiles_average(self):
        first, second = [5.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 5.0]

        def logits(calls, x: BranchInput):
            return constant_logits(first if calls == 0 else second)(calls, x)

        net = StubNet(logits)
        p = sliding_window_predict(net, tiny_case(dims=(4, 4, 6)), (4, 4, 4), overlap=0.5)
        self.assertEqual(net.calls, 2)
        np.testing.assert_allclose(p.data[:, 1, 1, 0], softmax(first), rtol=1e-6)
        np.testing.assert_allclose(p.data[:, 1, 1, 5], softmax(second), rtol=1e-6)
        np.testing.assert_allclose(p.data[:, 1, 1, 3], (softmax(first) + softmax(second)) / 2, rtol=1e-6)

    def test_small_volume_is_padded(self):
        net = StubNet(constant_logits([0.0, 1.0, 0.0, 0.0]))
        p = sliding_window_predict(net, tiny_case(dims=(5, 6, 7)), (8, 8, 8))
        self.assertEqual(p.dims, (5, 6, 7))
        self.assertTrue((decode_labels(p).data == 1).all())

    def test_bbox_uncrop(self):
        case = tiny_case(dims=(4, 4, 4))
        bbox = BBox((1, 2, 3), (4, 4, 4), (6, 8, 10))
        p = sliding_window_predict(StubNet(constant_logits([0.0, 0.0, 3.0, 0.0])), case, (4, 4, 4), bbox=bbox)
        self.assertEqual(p.dims, (6, 8, 10))
        self.assertTrue(p.is_normalized())
        np.testing.assert_array_equal(p.data[:, 0, 0, 0], [1, 0, 0, 0])
        labels = decode_labels(p).data
        self.assertTrue((labels[1:5, 2:6, 3:7] == 2).all())
        self.assertEqual(int((labels == 2).sum()), 64)

    def test_gaussian_weighting_stays_normalized(self):
        net = StubNet(lambda _calls, x: torch.cat([x.b, x.a], dim=1))
        p = sliding_window_predict(net, tiny_case(dims=(12, 8, 8)), (8, 8, 8), weighting=gaussian_weights)
        self.assertTrue(p.is_normalized())

    def test_tile_order_doesnt_matter(self):
        case = tiny_case(dims=(12, 12, 10), seed=3)
        net = StubNet(lambda _calls, x: 3 * torch.cat([x.a, x.b], dim=1))
        for weighting in (uniform_weights, gaussian_weights):
            forward = sliding_window_predict(net, case, (8, 8, 8), weighting=weighting)
            for seed in range(5):
                rng = np.random.default_rng(seed)

                def shuffled(size, patch, stride, rng=rng):
                    starts = tile_starts(size, patch, stride)
                    return list(rng.permutation(starts))

                with mock.patch("app.inference.tile_starts", shuffled):
                    other = sliding_window_predict(net, case, (8, 8, 8), weighting=weighting)
                np.testing.assert_allclose(other.data, forward.data, rtol=1e-6, atol=1e-7)
                np.testing.assert_array_equal(decode_labels(other).data, decode_labels(forward).data)

    def test_errors(self):
        case = tiny_case()
        net = StubNet(constant_logits([0.0] * 4))
        for overlap in (1.0, -0.1):
            with self.assertRaises(ConfigError):
                sliding_window_predict(net, case, (8, 8, 8), overlap)
        with self.assertRaises(EnsembleError):
            sliding_window_predict(StubNet(constant_logits([0.0] * 3)), case, (8, 8, 8))


class TestEnsemble(unittest.TestCase):
    def test_average(self):
        maps = [uniform_map((2, 2, 2), [p, 1 - p, 0, 0]) for p in (0.2, 0.5, 0.8)]
        avg = ensemble_average(maps)
        self.assertAlmostEqual(float(avg.data[0, 0, 0, 0]), 0.5, places=6)
        self.assertAlmostEqual(float(avg.data[1, 1, 1, 1]), 0.5, places=6)

        single = uniform_map((2, 2, 2), [0.1, 0.2, 0.3, 0.4])
        np.testing.assert_array_equal(ensemble_average([single]).data, single.data)

        with self.assertRaises(EnsembleError):
            ensemble_average([])
        with self.assertRaises(EnsembleError):
            ensemble_average([single, uniform_map((2, 2, 3), [1, 0, 0, 0])])

    def test_decode(self):
        self.assertTrue((decode_labels(uniform_map((2, 2, 2), [0.5, 0.5, 0, 0])).data == 0).all())
        self.assertTrue((decode_labels(uniform_map((2, 2, 2), [0.1, 0.4, 0.1, 0.4])).data == 1).all())
        self.assertTrue((decode_labels(uniform_map((2, 2, 2), [0, 0, 0.4, 0.6])).data == 4).all())
        anisotropic = uniform_map((2, 2, 2), [1, 0, 0, 0], (1.0, 2.0, 3.0))
        self.assertEqual(decode_labels(anisotropic).spacing, (1.0, 2.0, 3.0))

        with self.assertRaises(ShapeError):
            ProbMap(np.zeros((4, 4, 4), dtype=np.float32))

    def test_identical_members(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            raw = rng.random((4, 3, 4, 5)) + 1e-3
            p = ProbMap((raw / raw.sum(axis=0)).astype(np.float32))
            expected = decode_labels(p).data
            members = int(rng.integers(1, 5))
            avg = ensemble_average([p] * members)
            np.testing.assert_array_equal(avg.data, p.data, err_msg=f"trial {trial}")
            np.testing.assert_array_equal(decode_labels(avg).data, expected, err_msg=f"trial {trial}")

    def test_duplicated_ensemble(self):
        rng = np.random.default_rng(1)
        for trial in range(100):
            maps = []
            for _ in range(2):
                raw = rng.random((4, 3, 4, 5)) + 1e-3
                maps.append(ProbMap((raw / raw.sum(axis=0)).astype(np.float32)))
            once = decode_labels(ensemble_average(maps)).data
            twice = decode_labels(ensemble_average(maps + maps)).data
            np.testing.assert_array_equal(twice, once, err_msg=f"trial {trial}")

    def test_perfect_and_anti_perfect(self):
        truth = np.array([[[0, 1], [2, 4]], [[4, 2], [1, 0]]], dtype=np.uint8)
        index = np.searchsorted(CLASS_LABELS, truth)
        perfect = ProbMap(np.eye(4, dtype=np.float32)[index].transpose(3, 0, 1, 2).copy())
        anti = ProbMap(np.eye(4, dtype=np.float32)[(index + 1) % 4].transpose(3, 0, 1, 2).copy())

        avg = ensemble_average([perfect, anti])
        np.testing.assert_array_equal(avg.data.max(axis=0), np.full((2, 2, 2), 0.5, dtype=np.float32))
        # each voxel ties between its true class and the next one; the lower index wins,
        # so only enhancing tumor (index 3, tied with background) flips
        expected = np.array([[[0, 1], [2, 0]], [[0, 2], [1, 0]]], dtype=np.uint8)
        np.testing.assert_array_equal(decode_labels(avg).data, expected)
        np.testing.assert_array_equal(decode_labels(perfect).data, truth)

    def test_predictor(self):
        case = tiny_case()
        scores = ([2.0, 0.0, 0.0, 0.0], [0.0, 0.0, 2.0, 0.0])
        members = [StubNet(constant_logits(s)) for s in scores]
        p = EnsemblePredictor(members, (8, 8, 8)).predict(case)  # type: ignore[arg-type]
        expected = (softmax(scores[0]) + softmax(scores[1])) / 2
        np.testing.assert_allclose(p.data[:, 3, 3, 3], expected, rtol=1e-6)

    def test_build(self):
        with self.assertRaises(EnsembleError):
            build_ensemble([])
        with self.assertRaises(EnsembleError):
            build_ensemble([stub_checkpoint(), stub_checkpoint(num_classes=3)])
        with self.assertRaises(ConfigError):
            build_ensemble([stub_checkpoint(patch_size=None)])

        nets = [build_network(arch, tiny_net_config()) for arch in ("dual", "vanilla")]
        predictor = build_ensemble([Checkpoint.capture(net, 1, 0, "x") for net in nets], (8, 8, 8))
        self.assertEqual(len(predictor.members), 2)
        self.assertFalse(any(m.training for m in predictor.members))

        p = predictor.predict(normalize_modalities(tiny_case()))
        self.assertEqual(p.dims, (8, 8, 8))
        self.assertTrue(p.is_normalized())

    def test_select_members(self):
        pool = [
            stub_checkpoint("dual", 0.7),
            stub_checkpoint("dual", 0.9),
            stub_checkpoint("dual", None),
            stub_checkpoint("dual", 0.8),
            stub_checkpoint("dual", 0.6),
            stub_checkpoint("vanilla", 0.5),
        ]
        chosen = select_members(pool, top=3)
        ranked = [(c.arch, c.val_dice) for c in chosen]
        self.assertEqual(ranked, [("dual", 0.9), ("dual", 0.8), ("dual", 0.7), ("vanilla", 0.5)])
        self.assertEqual(len(select_members(pool[2:3], top=3)), 1)


class TestProbMapFiles(unittest.TestCase):
    def test_save_load(self):
        p = uniform_map((3, 4, 5), [0.25, 0.25, 0.25, 0.25], (1.0, 1.0, 2.0))
        with temp_dir() as d:
            save_probmap(p, d / "p.npz")
            loaded = load_probmap(d / "p.npz")
            paths = write_probmap_nifti(p, d, "c1")
            expected = [f"c1_prob{label}.nii.gz" for label in (0, 1, 2, 4)]
            self.assertEqual([path.name for path in paths], expected)
            channel = read_nifti(paths[3])
        np.testing.assert_array_equal(loaded.data, p.data)
        self.assertEqual(loaded.spacing, (1.0, 1.0, 2.0))
        np.testing.assert_array_equal(channel.data, p.data[3])
        self.assertEqual(channel.spacing, (1.0, 1.0, 2.0))


if __name__ == "__main__":  # pragma: no cover
    unittest.main()
