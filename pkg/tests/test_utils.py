import os
import unittest
import tempfile

import numpy as np

from app.utils import (
    append_jsonl,
    load_json_data,
    log_path,
    read_jsonl,
    save_json_data,
    summarize_log,
    write_jsonl,
)


class TestJsonFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_and_load(self):
        path = os.path.join(self.dir, "nested", "run.json")
        self.assertTrue(save_json_data({"menu": ["[0] x 6"]}, path))
        self.assertEqual(load_json_data(path), {"menu": ["[0] x 6"]})

    def test_missing_and_invalid(self):
        self.assertIsNone(load_json_data(os.path.join(self.dir, "absent.json")))
        path = os.path.join(self.dir, "bad.json")
        with open(path, "w") as f:
            f.write("{oops")
        self.assertIsNone(load_json_data(path))

    def test_append_and_read(self):
        path = os.path.join(self.dir, "logs", "train.jsonl")
        append_jsonl({"step": 1, "loss": np.float64(2.5)}, path)
        append_jsonl({"step": 2, "loss": 2.0, "timestamp": "fixed"}, path)
        records = read_jsonl(path)
        self.assertEqual([r["step"] for r in records], [1, 2])
        self.assertEqual(records[0]["loss"], 2.5)
        self.assertIn("timestamp", records[0])
        self.assertEqual(records[1]["timestamp"], "fixed")

    def test_malformed_lines_skipped(self):
        path = os.path.join(self.dir, "events.jsonl")
        with open(path, "w") as f:
            f.write('{"a": 1}\n{"a": \n\n{"a": 3}\n')
        self.assertEqual(read_jsonl(path), [{"a": 1}, {"a": 3}])
        self.assertEqual(read_jsonl(os.path.join(self.dir, "absent.jsonl")), [])

    def test_write_jsonl_serializes_arrays(self):
        path = write_jsonl([{"frames": np.arange(3)}], os.path.join(self.dir, "out.jsonl"))
        self.assertEqual(read_jsonl(path), [{"frames": [0, 1, 2]}])

    def test_summarize_log(self):
        path = os.path.join(self.dir, "train.jsonl")
        write_jsonl([{"loss": 4.0}, {"loss": 2.0}, {"loss": "nan?"}, {"step": 3}], path)
        summary = summarize_log(path, "loss")
        self.assertEqual(summary["count"], 2)
        self.assertEqual(summary["mean"], 3.0)
        self.assertEqual((summary["first"], summary["last"]), (4.0, 2.0))
        self.assertIn("error", summarize_log(path, "wer"))

    def test_log_path(self):
        path = log_path("train_toy", "logs")
        self.assertTrue(path.startswith(os.path.join("logs", "json", "train_toy_")))
        self.assertTrue(path.endswith(".jsonl"))


if __name__ == "__main__":
    unittest.main()
