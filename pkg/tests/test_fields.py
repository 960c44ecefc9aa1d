import math
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from hypothesis import given, seed, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

os.environ.setdefault("SEGLAB_LOG_PATH", "")
sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from seglab import fields
from seglab.errors import InvalidInputError, InvalidParameterError


def _logits(rows: list[list[float]]) -> fields.LogitField:
    values = np.asarray(rows, dtype=np.float64)
    return fields.LogitField(1, values.shape[0], values.shape[1], values)


class SoftmaxTests(unittest.TestCase):
    def test_zero_logits_give_uniform_rows(self) -> None:
        p = fields.temperature_softmax(_logits([[0.0, 0.0, 0.0]]), tau=1.0)
        np.testing.assert_allclose(p.probs, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_default_temperature_sharpens(self) -> None:
        p = fields.temperature_softmax(_logits([[1.0, 0.0]]))
        self.assertAlmostEqual(p.probs[0, 0], 0.9999546, places=7)
        self.assertAlmostEqual(p.probs[0, 1], 0.0000454, places=7)
        self.assertAlmostEqual(p.probs[0, 1], 1.0 / (math.exp(10.0) + 1.0), places=15)

    def test_rejects_bad_tau(self) -> None:
        z = _logits([[0.0, 1.0]])
        for tau in (0.0, -1.0, float("nan"), float("inf")):
            with self.assertRaises(InvalidParameterError):
                fields.temperature_softmax(z, tau)

    def test_rejects_non_finite_logits(self) -> None:
        with self.assertRaises(InvalidInputError):
            _logits([[0.0, float("nan")]])

    def test_huge_logits_do_not_overflow(self) -> None:
        p = fields.temperature_softmax(_logits([[1e6, -1e6, 0.0]]))
        self.assertTrue(np.all(p.probs > 0.0))
        self.assertAlmostEqual(p.probs[0, 0], 1.0)

    @seed(11)
    @settings(max_examples=60, deadline=None)
    @given(
        values=arrays(np.float64, (6, 4), elements=st.floats(min_value=-50.0, max_value=50.0)),
        tau=st.sampled_from([0.5, 1.0, 10.0]),
    )
    def test_rows_on_simplex(self, values: np.ndarray, tau: float) -> None:
        p = fields.temperature_softmax(fields.LogitField(2, 3, 4, values), tau)
        self.assertLessEqual(np.max(np.abs(p.probs.sum(axis=1) - 1.0)), 1e-9)
        self.assertTrue(np.all(p.probs > 0.0))

    def test_confidence_increases_with_tau(self) -> None:
        z = _logits([[0.3, 0.1, -0.2]])
        taus = np.linspace(0.5, 20.0, 40)
        tops = []
        for tau in taus:
            p = fields.temperature_softmax(z, float(tau))
            self.assertEqual(int(p.argmax()[0]), 0)
            tops.append(p.probs[0, 0])
        self.assertTrue(np.all(np.diff(tops) > 0.0))


class MarginalTests(unittest.TestCase):
    def test_predicted_marginal_hand_sum(self) -> None:
        g = fields.LabelField(1, 4, 2, np.array([0, 0, 1, 1]))
        p0 = np.array([0.9, 0.8, 0.1, 0.2])
        p = fields.ProbField.like(g, np.column_stack([p0, 1.0 - p0]))
        np.testing.assert_allclose(fields.predicted_marginal(p).values, [0.5, 0.5], atol=1e-15)

    def test_uniform_rows_give_uniform_marginal(self) -> None:
        g = fields.LabelField(2, 3, 3, np.array([0, 1, 2, 0, 1, 2]))
        p = fields.ProbField.like(g, np.full((6, 3), 1 / 3))
        np.testing.assert_allclose(fields.predicted_marginal(p).values, [1 / 3] * 3, atol=1e-15)

    def test_gt_marginal_counts(self) -> None:
        self.assertEqual(fields.gt_marginal(fields.LabelField.from_grid([[0, 0], [1, 1]])).values.tolist(), [0.5, 0.5])
        single = fields.LabelField(64, 64, 2, np.zeros(64 * 64, dtype=np.int64))
        self.assertEqual(fields.gt_marginal(single).values.tolist(), [1.0, 0.0])
        tenth = fields.LabelField(10, 10, 2, np.repeat([0, 1], [10, 90]))
        np.testing.assert_allclose(fields.gt_marginal(tenth).values, [0.1, 0.9], atol=1e-15)

    def test_one_hot_marginal_is_exact(self) -> None:
        rng = np.random.default_rng(3)
        g = fields.LabelField(5, 7, 4, rng.integers(0, 4, size=35))
        self.assertTrue(np.array_equal(fields.predicted_marginal(fields.one_hot(g)).values, fields.gt_marginal(g).values))

    def test_replication_keeps_marginal(self) -> None:
        g = fields.LabelField(2, 5, 3, np.array([0, 1, 2, 2, 0, 0, 1, 0, 0, 2]))
        for m in (2, 3):
            self.assertTrue(np.array_equal(fields.gt_marginal(g.replicate(m)).values, fields.gt_marginal(g).values))

    def test_invalid_fields_are_rejected(self) -> None:
        with self.assertRaises(InvalidInputError):
            fields.LabelField(1, 2, 2, np.array([0, 2]))
        with self.assertRaises(InvalidInputError):
            fields.LabelField(1, 3, 2, np.array([0, 1]))
        with self.assertRaises(InvalidInputError):
            fields.ProbField(1, 1, 2, np.array([[0.6, 0.6]]))
        with self.assertRaises(InvalidInputError):
            fields.Marginal(np.array([0.5, 0.4]))


class PgmTests(unittest.TestCase):
    def test_write_then_read(self) -> None:
        g = fields.LabelField.from_grid([[0, 1, 2], [2, 1, 0]], num_classes=3)
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "mask.pgm"
            fields.write_pgm(path, g)
            self.assertTrue(path.read_text(encoding="ascii").startswith("P2\n3 2\n2\n"))
            back = fields.read_pgm(path, num_classes=3)
        self.assertTrue(np.array_equal(back.labels, g.labels))
        self.assertEqual((back.height, back.width), (2, 3))

    def test_comments_and_whitespace(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "mask.pgm"
            path.write_text("P2\n# a mask\n2 1\n1 # maxval\n0\n1\n", encoding="ascii")
            g = fields.read_pgm(path)
        self.assertEqual(g.labels.tolist(), [0, 1])
        self.assertEqual(g.num_classes, 2)

    def test_malformed_files(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "bad.pgm"
            for text in ("P5\n1 1\n1\n0\n", "P2\n2 2\n1\n0 1 0\n", "P2\n1 1\n1\n3\n", "P2\n1 1\n1\nx\n"):
                path.write_text(text, encoding="ascii")
                with self.assertRaises(InvalidInputError):
                    fields.read_pgm(path)


if __name__ == "__main__":
    unittest.main()
