import os

import pytest

from app.cli import build_parser, main
from app.config import CHECKPOINT_PATH, STREAMING_LEFT_CONTEXT, TRAINING_LEFT_CONTEXT
from app.transducer import TOY_SYMBOLS, TransducerModel
from app.utils import load_json_data, read_jsonl, save_json_data
from tests.oracles import tiny_spec

TINY_MODEL = {"feature_dim": 4, "d": 8, "heads": 2, "ffn": 16, "depth": 3,
              "max_relative": 4, "label_context": 2, "label_layers": 1}


@pytest.fixture
def setup(workdir):
    """Toy dataset plus a tiny untrained checkpoint over the default vocabulary."""
    assert main(["gen-data", "--n", "4", "--seed", "3", "--feature-dim", "4",
                 "--min-tokens", "2", "--max-tokens", "4", "--out", "toy.jsonl"]) == 0
    model = TransducerModel(tiny_spec(vocab=list(TOY_SYMBOLS), default_configs=["[0] x 3"]), seed=1)
    model.save("tiny.json")
    return workdir


class TestGenData:
    def test_writes_dataset(self, workdir, capsys):
        assert main(["gen-data", "--n", "3", "--seed", "2", "--feature-dim", "4"]) == 0
        assert os.path.exists(os.path.join("data", "toy_3_seed2.jsonl"))
        assert "3 utterances" in capsys.readouterr().out


class TestTrain:
    def test_short_run(self, setup):
        save_json_data({"name": "cli", "model": TINY_MODEL, "menu": ["[0] x 3", "[1] x 3"],
                        "steps": 5, "batch_size": 2, "out_dir": "ckpt", "log_dir": "logs"}, "run.json")
        code = main(["train", "--config", "run.json", "--steps", "2", "--data", "toy.jsonl",
                     "--out", "result.json"])
        assert code == 0
        result = load_json_data("result.json")
        assert result["steps"] == 2
        assert "losses" not in result
        assert os.path.exists(os.path.join("ckpt", "cli.json"))

    def test_bad_run_spec(self, workdir):
        save_json_data({"steps": -3}, "run.json")
        assert main(["train", "--config", "run.json"]) == 1


class TestDecoding:
    def test_decode(self, setup, capsys):
        code = main(["decode", "--checkpoint", "tiny.json", "--data", "toy.jsonl",
                     "--config", "[0] x 3", "--beam", "2", "--out", "decoded.jsonl"])
        assert code == 0
        records = read_jsonl("decoded.jsonl")
        assert len(records) == 4
        assert {r["config"] for r in records} == {"[0] x 3"}
        assert "utt-00000" in capsys.readouterr().out

    def test_stream(self, setup):
        code = main(["stream", "--checkpoint", "tiny.json", "--data", "toy.jsonl", "--limit", "2",
                     "--config", "[0] x 2 + [1]", "--step-size", "3", "--out", "events.jsonl"])
        assert code == 0
        records = read_jsonl("events.jsonl")
        assert [r["type"] for r in records].count("final") == 2

    def test_y_decode(self, setup):
        code = main(["y-decode", "--checkpoint", "tiny.json", "--data", "toy.jsonl",
                     "--low", "[0] x 3", "--high", "[0] x 2 + [2]", "--shared", "2",
                     "--out", "y.jsonl"])
        assert code == 0
        records = read_jsonl("y.jsonl")
        assert len(records) == 1
        assert records[0]["id"] == "utt-00000"
        assert records[0]["off_menu"] is True

    def test_y_decode_rejects_shared_lookahead(self, setup):
        code = main(["y-decode", "--checkpoint", "tiny.json", "--data", "toy.jsonl",
                     "--low", "[0] x 3", "--high", "[2] x 3", "--shared", "1"])
        assert code == 1

    def test_align(self, setup):
        code = main(["align", "--checkpoint", "tiny.json", "--data", "toy.jsonl",
                     "--config", "[full] x 3", "--out", "align.jsonl"])
        assert code == 0
        for record in read_jsonl("align.jsonl"):
            frames = [entry["frame"] for entry in record["alignment"]]
            assert frames == sorted(frames)

    def test_eval(self, setup, capsys):
        code = main(["eval", "--checkpoint", "tiny.json", "--data", "toy.jsonl",
                     "--config", "[0] x 3", "--config", "[full] x 3", "--reference", "dataset",
                     "--out", "eval.jsonl"])
        assert code == 0
        reports = read_jsonl("eval.jsonl")
        assert [r["config"] for r in reports] == ["[0] x 3", "[full] x 3"]
        assert all(r["delay"] is not None for r in reports)
        assert "[full] x 3" in capsys.readouterr().out


class TestBench:
    def test_batch_step_grid(self, setup):
        code = main(["bench", "--checkpoint", "tiny.json", "--mode", "batch-step", "--steps", "1,4,32",
                     "--audio-seconds", "1", "--repeats", "1", "--out", "bench.jsonl"])
        assert code == 0
        rows = read_jsonl("bench.jsonl")
        assert [r["step_size"] for r in rows] == [1, 4, 32]
        assert all(r["outputs"] == r["frames"] for r in rows)

    def test_decode_bench(self, setup):
        code = main(["bench", "--checkpoint", "tiny.json", "--decode", "--data", "toy.jsonl",
                     "--config", "[0] x 3", "--beam", "2", "--out", "decode_bench.jsonl"])
        assert code == 0
        rows = read_jsonl("decode_bench.jsonl")
        assert [r["cache"] for r in rows] == [False, True]


class TestErrors:
    def test_unknown_flag(self, workdir):
        assert main(["decode", "--frobnicate"]) == 2

    def test_missing_command(self, workdir):
        assert main([]) == 2

    def test_bad_steps(self, workdir):
        assert main(["bench", "--steps", "0,4"]) == 2

    def test_missing_checkpoint(self, workdir):
        assert main(["decode", "--checkpoint", "absent.json"]) == 1

    def test_config_depth_mismatch(self, setup):
        assert main(["decode", "--checkpoint", "tiny.json", "--data", "toy.jsonl",
                     "--config", "[0] x 6"]) == 1


class TestParserDefaults:
    @pytest.mark.parametrize("command", ["decode", "eval", "align"])
    def test_offline_commands(self, command):
        args = build_parser().parse_args([command])
        assert args.limit is None
        assert args.left == TRAINING_LEFT_CONTEXT
        assert args.checkpoint == CHECKPOINT_PATH

    def test_streaming_commands(self):
        stream = build_parser().parse_args(["stream"])
        assert (stream.limit, stream.left) == (None, STREAMING_LEFT_CONTEXT)
        y = build_parser().parse_args(["y-decode", "--low", "[0] x 6", "--high", "[0] x 6", "--shared", "1"])
        assert (y.limit, y.left) == (1, STREAMING_LEFT_CONTEXT)

    def test_bench_has_no_default_checkpoint(self):
        assert build_parser().parse_args(["bench"]).checkpoint is None
        assert build_parser().parse_args(["decode"]).checkpoint == CHECKPOINT_PATH

    def test_decode_covers_whole_dataset(self, setup):
        assert main(["decode", "--checkpoint", "tiny.json", "--data", "toy.jsonl",
                     "--config", "[0] x 3", "--out", "all.jsonl"]) == 0
        assert len(read_jsonl("all.jsonl")) == 4
