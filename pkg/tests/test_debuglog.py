import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest import mock

os.environ.setdefault("SEGLAB_LOG_PATH", "")
sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from seglab import debuglog, synthlab
from seglab.losses import build_loss


class DebugLogTests(unittest.TestCase):
    def test_path_from_environment(self) -> None:
        self.assertEqual(debuglog.log_path_from_env(None), debuglog.DEFAULT_LOG_PATH)
        self.assertIsNone(debuglog.log_path_from_env("  "))
        self.assertEqual(debuglog.log_path_from_env("/tmp/x.log"), Path("/tmp/x.log"))

    def test_format_event(self) -> None:
        line = debuglog.format_event("train", "done", loss="ours-l1", final=0.1 + 0.2, note="two words", empty="")
        self.assertEqual(line, "train:done loss=ours-l1 final=0.3 note='two words' empty=''")

    def test_appends_records(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "log" / "seglab.log"
            with mock.patch.object(debuglog, "_LOG_PATH", path):
                debuglog.log_event("cli", "start", command="verify")
                debuglog.log_event("verify", "check", id="bounds", status="PASS")
            lines = path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 2)
        self.assertTrue(lines[0].endswith(" cli:start command=verify"))
        self.assertTrue(lines[1].endswith(" verify:check id=bounds status=PASS"))

    def test_disabled_and_unwritable_are_silent(self) -> None:
        with mock.patch.object(debuglog, "_LOG_PATH", None):
            debuglog.log_event("cli", "start")
        with tempfile.TemporaryDirectory() as tmp:
            blocker = Path(tmp) / "file"
            blocker.write_text("", encoding="utf-8")
            with mock.patch.object(debuglog, "_LOG_PATH", blocker / "seglab.log"):
                debuglog.log_event("cli", "start")

    def test_training_logs_divergence(self) -> None:
        data = synthlab.make_scenario(synthlab.default_scenario("binary_imbalanced", 1, height=8, width=8))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "seglab.log"
            with mock.patch.object(debuglog, "_LOG_PATH", path), mock.patch.object(
                synthlab, "loss_gradient", return_value=(float("nan"), None)
            ):
                synthlab.train(synthlab.Model.zeros(2, 2), build_loss("ce"), data, epochs=3)
            lines = path.read_text(encoding="utf-8").splitlines()
        self.assertIn("train:start loss=ce epochs=3 lr=0.1 adaptive=False", lines[0])
        self.assertTrue(lines[1].endswith(" train:diverged epoch=0"))


if __name__ == "__main__":
    unittest.main()
