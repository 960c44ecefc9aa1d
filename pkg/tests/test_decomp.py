import math
import os
import sys
import unittest
from pathlib import Path

import numpy as np

os.environ.setdefault("SEGLAB_LOG_PATH", "")
sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from seglab import decomp, losses
from seglab.errors import DegenerateMarginalError, InvalidInputError, UndefinedRegionError
from seglab.fields import LabelField, ProbField, gt_marginal, one_hot
from seglab.theory import constant_region_instance, random_instance


def _two_class(labels: list[int], p0: list[float]) -> tuple[ProbField, LabelField]:
    g = LabelField(1, len(labels), 2, np.asarray(labels))
    col = np.asarray(p0, dtype=np.float64)
    return ProbField.like(g, np.column_stack([col, 1.0 - col])), g


class LogDiceDecompositionTests(unittest.TestCase):
    def test_reconstruction_on_random_instances(self) -> None:
        rng = np.random.default_rng(1)
        for _ in range(100):
            k = int(rng.integers(2, 6))
            p, g = random_instance(rng, k, int(rng.integers(k, 257)))
            dec = decomp.decompose_log_dice(p, g)
            y = gt_marginal(g).values
            self.assertAlmostEqual(dec.additive_constant, float(np.sum(np.log(1 / (2 * y)))), places=12)
            self.assertLessEqual(abs(losses.log_dice_loss(p, g, foreground_only=False) - dec.total_reconstructed), 1e-9)

    def test_perfect_balanced_prediction(self) -> None:
        g = LabelField(1, 4, 2, np.array([0, 1, 0, 1]))
        dec = decomp.decompose_log_dice(one_hot(g), g)
        self.assertAlmostEqual(dec.matching_term, 0.0, places=9)
        self.assertAlmostEqual(dec.bias_term, 0.0, places=12)
        self.assertAlmostEqual(dec.additive_constant, 0.0, places=12)
        self.assertAlmostEqual(dec.total_reconstructed, 0.0, places=9)

    def test_uniform_prediction(self) -> None:
        g = LabelField(1, 6, 3, np.array([0, 1, 2, 2, 1, 0]))
        p = ProbField.like(g, np.full((6, 3), 1 / 3))
        self.assertAlmostEqual(decomp.decompose_log_dice(p, g).matching_term, 3 * math.log(3), places=9)

    def test_empty_region(self) -> None:
        g = LabelField(1, 3, 3, np.array([0, 1, 1]))
        with self.assertRaises(UndefinedRegionError):
            decomp.decompose_log_dice(one_hot(g), g)

    def test_record(self) -> None:
        p, g = _two_class([0, 0, 1, 1], [0.9, 0.8, 0.1, 0.2])
        record = decomp.decompose_binary_dice(p, g).to_record()
        self.assertEqual(
            sorted(record),
            ["additive_constant", "bias_term", "marginal_bias", "matching_term", "name", "total_reconstructed"],
        )


class BinaryDecompositionTests(unittest.TestCase):
    def test_worked_instance(self) -> None:
        p, g = _two_class([0, 0, 1, 1], [0.9, 0.8, 0.1, 0.2])
        dec = decomp.decompose_binary_dice(p, g)
        self.assertAlmostEqual(dec.matching_term, 0.162519, places=6)
        self.assertAlmostEqual(dec.bias_term, 1.386294, places=6)
        self.assertAlmostEqual(dec.additive_constant, -1.386294, places=6)
        self.assertAlmostEqual(dec.total_reconstructed, -math.log(0.85), places=9)

    def test_perfect_prediction(self) -> None:
        p, g = _two_class([0, 1, 1, 1], [1.0, 0.0, 0.0, 0.0])
        dec = decomp.decompose_binary_dice(p, g)
        self.assertAlmostEqual(dec.matching_term, 0.0, places=9)
        self.assertAlmostEqual(dec.total_reconstructed, 0.0, places=9)

    def test_identities_on_random_instances(self) -> None:
        rng = np.random.default_rng(2)
        for _ in range(100):
            p, g = random_instance(rng, 2, int(rng.integers(2, 257)), binary=True)
            dec = decomp.decompose_binary_dice(p, g)
            self.assertLessEqual(abs(losses.log_dice_loss(p, g, foreground_only=True) - dec.total_reconstructed), 1e-9)
            pm0 = float(p.probs[:, 0].mean())
            self.assertLessEqual(abs(dec.marginal_bias - math.log(pm0 + gt_marginal(g)[0])), 1e-12)
            ce_fg, ce_bg = decomp.split_binary_ce(p, g)
            self.assertLessEqual(abs(ce_fg + ce_bg - losses.ce_region_weighted(p, g)), 1e-12)
            self.assertLessEqual(dec.matching_term, ce_fg + 1e-12)

    def test_split_ce_examples(self) -> None:
        p, g = _two_class([0, 1, 1, 0], [1.0, 0.0, 0.0, 1.0])
        ce_fg, ce_bg = decomp.split_binary_ce(p, g)
        self.assertAlmostEqual(ce_fg, 0.0, places=11)
        self.assertAlmostEqual(ce_bg, 0.0, places=11)
        p, g = _two_class([0, 1, 1, 0], [0.5, 0.5, 0.5, 0.5])
        ce_fg, ce_bg = decomp.split_binary_ce(p, g)
        self.assertAlmostEqual(ce_fg, math.log(2), places=9)
        self.assertAlmostEqual(ce_bg, math.log(2), places=9)

    def test_non_binary_input(self) -> None:
        g = LabelField(1, 3, 3, np.array([0, 1, 2]))
        with self.assertRaises(InvalidInputError):
            decomp.decompose_binary_dice(one_hot(g), g)
        with self.assertRaises(InvalidInputError):
            decomp.split_binary_ce(one_hot(g), g)


class JensenTests(unittest.TestCase):
    def test_matching_term_below_region_ce(self) -> None:
        rng = np.random.default_rng(3)
        for _ in range(200):
            k = int(rng.integers(2, 6))
            p, g = random_instance(rng, k, int(rng.integers(k, 129)))
            self.assertLessEqual(decomp.decompose_log_dice(p, g).matching_term, losses.ce_region_weighted(p, g) + 1e-12)

    def test_equality_for_constant_regions(self) -> None:
        rng = np.random.default_rng(4)
        for _ in range(20):
            p, g = constant_region_instance(rng, int(rng.integers(2, 6)), 64)
            gap = losses.ce_region_weighted(p, g) - decomp.decompose_log_dice(p, g).matching_term
            self.assertLessEqual(abs(gap), 1e-12)

    def test_strict_gap_for_varying_region(self) -> None:
        p, g = _two_class([0, 0, 1, 1], [0.9, 0.1, 0.5, 0.5])
        gap = losses.ce_region_weighted(p, g) - decomp.decompose_log_dice(p, g).matching_term
        self.assertGreaterEqual(gap, 1e-6)


class ConditionalEntropyTests(unittest.TestCase):
    def test_ce_identity_on_random_instances(self) -> None:
        rng = np.random.default_rng(5)
        for _ in range(100):
            k = int(rng.integers(2, 6))
            p, g = random_instance(rng, k, int(rng.integers(k, 257)))
            dec = decomp.decompose_ce(p, g)
            self.assertLessEqual(abs(losses.ce_pixel_avg(p, g) - dec.total_reconstructed), 1e-9)

    def test_uniform_prediction_has_zero_entropy_term(self) -> None:
        g = LabelField(1, 5, 3, np.array([0, 1, 2, 2, 2]))
        p = ProbField.like(g, np.full((5, 3), 1 / 3))
        self.assertAlmostEqual(decomp.mc_conditional_entropy(p, g), 0.0, places=12)

    def test_one_hot_prediction(self) -> None:
        g = LabelField(1, 10, 3, np.repeat([0, 1, 2], [5, 3, 2]))
        y = gt_marginal(g).values
        self.assertAlmostEqual(decomp.mc_conditional_entropy(one_hot(g), g), float(np.sum(y * np.log(y))), places=9)

    def test_zero_marginal(self) -> None:
        g = LabelField(1, 3, 3, np.array([0, 1, 2]))
        probs = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        with self.assertRaises(DegenerateMarginalError):
            decomp.mc_conditional_entropy(ProbField.like(g, probs), g)


if __name__ == "__main__":
    unittest.main()
