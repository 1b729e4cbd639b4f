"""End-to-end checks on the toy task.

Training runs are marked slow; set YTT_RUN_SLOW=1 to include them.
"""
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.bench import bench_grid
from app.data import generate_dataset
from app.infer import (
    LabelCache,
    beam_decode,
    encode_streaming,
    offline_decode,
    query_slice_encode,
    y_decode,
)
from app.attention import AttentionMeter
from app.metrics import evaluate
from app.train import ReferenceAligner, TrainRun, context_from_text, cumulative_lookahead, train
from app.transducer import TOY_SYMBOLS, TransducerModel
from tests.oracles import tiny_spec

DATA_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data")
HELD_OUT_SEED = 99


def committed_run(name, tmp_dir, **overrides):
    run = TrainRun.load(os.path.join(DATA_DIR, name))
    updates = {"out_dir": str(tmp_dir / "checkpoints"), "log_dir": str(tmp_dir / "logs")}
    updates.update(overrides)
    return run.model_copy(update=updates)


def held_out(n=200):
    return generate_dataset(n, HELD_OUT_SEED, feature_dim=16, prefix="heldout")


def toy_model(seed=0, **overrides):
    values = dict(vocab=list(TOY_SYMBOLS), feature_dim=16, depth=6)
    values.update(overrides)
    return TransducerModel(tiny_spec(**values), seed=seed)


class TestStreamingEquivalence:
    @pytest.mark.parametrize("text", ["[0] x 6", "[2] x 6", "[0] x 5 + [4]"])
    def test_batch_step_matches_offline(self, text):
        model = toy_model()
        cfg = context_from_text(model.spec, text, left=64)
        x = held_out(3)[0].features
        offline = model.audio_encode(x, cfg)
        for step in (1, 4, 8, 32):
            assert_allclose(encode_streaming(model, x, cfg, step), offline, rtol=0, atol=1e-5)

    @pytest.mark.parametrize("block", [1, 4, 16])
    def test_query_slicing_matches_offline(self, block):
        model = toy_model()
        cfg = context_from_text(model.spec, "[0] x 5 + [4]", left=8)
        x = held_out(3)[1].features
        meter = AttentionMeter()
        assert_allclose(query_slice_encode(model, x, block, cfg, meter), model.audio_encode(x, cfg),
                        rtol=0, atol=1e-5)
        assert meter.peak <= block * (8 + block + 4)


class TestYModelExactness:
    def test_twenty_utterances(self):
        model = toy_model(seed=2)
        low = context_from_text(model.spec, "[0] x 6", left=64)
        high = context_from_text(model.spec, "[0] x 5 + [4]", left=64)
        step = 4
        for utt in held_out(20):
            result = y_decode(model, utt.features, low, high, shared=5, step_size=step)
            assert result.text == offline_decode(model, utt.features, high).text(model.vocab)
            assert result.flush_frames <= high.lookahead_frames() + step
            assert result.shared_frames == utt.num_frames
            assert result.shared_layer_calls == 5 * -(-utt.num_frames // step)
            assert result.shared_layer_rows == [utt.num_frames] * 5

    def test_schedules_agree(self):
        model = toy_model(seed=2)
        low = context_from_text(model.spec, "[0] x 6", left=64)
        high = context_from_text(model.spec, "[0] x 4 + [2] x 2", left=64)
        for utt in held_out(5):
            a = y_decode(model, utt.features, low, high, 4, 3, schedule="cooperative")
            b = y_decode(model, utt.features, low, high, 4, 3, schedule="concurrent")
            assert [e.text for e in a.events] == [e.text for e in b.events]


class TestLabelEncoders:
    @pytest.mark.parametrize("overrides", [{"label_mode": "bigram"}, {"label_context": 3}])
    def test_decodes_toy_set(self, overrides):
        model = toy_model(**overrides)
        cfg = context_from_text(model.spec, "[0] x 6")
        for utt in held_out(4):
            hyp = offline_decode(model, utt.features, cfg, beam=3, cache=LabelCache())
            assert set(hyp.text(model.vocab)) <= set(TOY_SYMBOLS[1:])

    def test_bigram_parameter_count(self):
        model = toy_model(label_mode="bigram")
        N, d = len(TOY_SYMBOLS), model.spec.d
        assert model.params.num_parameters("lab.bigram") == N * N * d

    def test_cache_same_nbest_fewer_calls(self):
        model = toy_model(seed=3)
        cfg = context_from_text(model.spec, "[0] x 6")
        encodings = model.audio_encode(held_out(2)[0].features, cfg)
        before = model.label_encoder_calls
        plain = beam_decode(encodings, model, 4)
        uncached_calls = model.label_encoder_calls - before
        before = model.label_encoder_calls
        cache = LabelCache()
        cached = beam_decode(encodings, model, 4, cache)
        assert [(h.labels, h.score) for h in cached] == [(h.labels, h.score) for h in plain]
        assert model.label_encoder_calls - before < uncached_calls
        assert cache.hits > 0


@pytest.mark.slow
class TestToyTraining:
    def test_full_context_accuracy(self, tmp_path):
        run = committed_run("toy_full_run.json", tmp_path)
        result = train(run)
        model = TransducerModel.load(result.checkpoint)
        report = evaluate(model, held_out(), context_from_text(model.spec, "[full] x 6"))
        assert report.token_accuracy >= 0.9

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_lookahead_ordering(self, tmp_path, seed):
        run = committed_run("toy_run.json", tmp_path, seed=seed, name=f"toy-variable-{seed}")
        model = TransducerModel.load(train(run).checkpoint)
        spec = model.spec
        menu = run.build_menu(spec)
        data = held_out(100)
        largest = evaluate(model, data, menu.largest_lookahead())
        zero = evaluate(model, data, menu.smallest_lookahead())
        assert cumulative_lookahead(menu.smallest_lookahead()) == 0
        assert largest.token_accuracy >= zero.token_accuracy


@pytest.fixture(scope="module")
def reference_checkpoint(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("reference")
    return train(committed_run("toy_full_run.json", tmp)).checkpoint


@pytest.mark.slow
class TestConstrainedAlignment:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_constrained_lowers_delay(self, tmp_path, reference_checkpoint, seed):
        plain_run = committed_run("toy_constrained_run.json", tmp_path, seed=seed, loss_mode="plain",
                                  name=f"plain-{seed}")
        constrained_run = committed_run("toy_constrained_run.json", tmp_path, seed=seed,
                                        reference_checkpoint=reference_checkpoint,
                                        name=f"constrained-{seed}")
        plain = TransducerModel.load(train(plain_run).checkpoint)
        constrained = TransducerModel.load(train(constrained_run).checkpoint)

        data = held_out(100)
        aligner = ReferenceAligner(TransducerModel.load(reference_checkpoint))
        references = {utt.id: aligner.reference(utt) for utt in data}
        cfg = context_from_text(plain.spec, "[0] x 6", left=64)
        plain_delay = evaluate(plain, data, cfg, references=references).delay.mean_ms
        constrained_delay = evaluate(constrained, data, cfg, references=references).delay.mean_ms
        assert constrained_delay < plain_delay


@pytest.mark.slow
class TestBenchmarkShape:
    def test_mode_ordering(self):
        model = TransducerModel(seed=0)
        rows = bench_grid(model, ["training", "query-slice", "batch-step"], [1, 32],
                          audio_seconds=100.0, repeats=5)
        wall = {(r.mode, r.step_size): r.wall_seconds for r in rows}
        assert wall[("batch-step", 32)] < wall[("batch-step", 1)]
        assert wall[("training", 1)] <= wall[("query-slice", 1)] <= wall[("batch-step", 1)]
        assert np.isfinite(list(wall.values())).all()
