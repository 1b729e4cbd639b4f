import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.attention import FULL_CONTEXT, AttentionMeter, UnsupportedConfigError
from app.infer import (
    LabelCache,
    SessionStateError,
    StreamingEncoder,
    batch_step,
    beam_decode,
    encode_streaming,
    end_stream,
    greedy_decode,
    offline_decode,
    query_slice_encode,
    start_stream,
    stream_decode,
    y_decode,
    y_feed,
    y_finalize,
    y_start,
)
from tests.oracles import tiny_model


def force_symbol(model, symbol, margin=100.0):
    bias = np.zeros_like(model.params["joint.bo"])
    bias[symbol] = margin
    model.params.set("joint.bo", bias)
    return model


class TestBatchStep:
    def test_zero_frames(self, rng):
        model = tiny_model()
        state = start_stream(model, model.context([0, 0, 0]))
        out, state = batch_step(state, np.zeros((0, 4)))
        assert out.shape == (0, 8)
        assert state.consumed == 0

    def test_causal_single_frame_steps(self, rng):
        model = tiny_model()
        state = start_stream(model, model.context([0, 0, 0]))
        for _ in range(5):
            out, state = batch_step(state, rng.standard_normal((1, 4)))
            assert out.shape == (1, 8)
        assert end_stream(state).shape == (0, 8)

    def test_right_context_holds_rows_back(self, rng):
        model = tiny_model()
        state = start_stream(model, model.context([0, 0, 2]))
        out, _ = batch_step(state, rng.standard_normal((2, 4)))
        assert len(out) == 0
        out, _ = batch_step(state, rng.standard_normal((3, 4)))
        assert len(out) == 3
        assert state.pending == 2
        assert len(end_stream(state)) == 2

    def test_output_delay(self, rng):
        model = tiny_model()
        state = start_stream(model, model.context([0, 0, 0], output_delay=2))
        out, _ = batch_step(state, rng.standard_normal((3, 4)))
        assert len(out) == 1
        assert len(end_stream(state)) == 2

    def test_closed_stream(self, rng):
        model = tiny_model()
        encoder = StreamingEncoder(model, model.context([0, 0, 0]))
        encoder.step(rng.standard_normal((2, 4)))
        encoder.flush()
        with pytest.raises(SessionStateError):
            encoder.step(rng.standard_normal((1, 4)))
        with pytest.raises(SessionStateError):
            encoder.flush()

    @pytest.mark.parametrize("rights", [[0, 0, 0], [2, 2, 2], [0, 0, 4], [1, 0, FULL_CONTEXT]])
    @pytest.mark.parametrize("step", [1, 4, 8, 32])
    def test_matches_offline(self, rng, rights, step):
        model = tiny_model()
        cfg = model.context(rights, left=6)
        x = rng.standard_normal((19, 4))
        assert_allclose(encode_streaming(model, x, cfg, step), model.audio_encode(x, cfg), rtol=0, atol=1e-5)

    @pytest.mark.parametrize("step", [1, 3, 32])
    def test_matches_offline_with_delay_and_stacking(self, rng, step):
        for model in (tiny_model(), tiny_model(stack_factor=2, stack_after=0)):
            cfg = model.context([0, 1, 1], output_delay=2)
            x = rng.standard_normal((13, 4))
            streamed = encode_streaming(model, x, cfg, step)
            assert streamed.shape == (13, 8)
            assert_allclose(streamed, model.audio_encode(x, cfg), rtol=0, atol=1e-5)

    def test_bad_step_size(self, rng):
        model = tiny_model()
        with pytest.raises(ValueError):
            encode_streaming(model, rng.standard_normal((3, 4)), model.context([0, 0, 0]), 0)


class TestQuerySlicing:
    @pytest.mark.parametrize("block", [1, 4, 16])
    def test_matches_offline(self, rng, block):
        model = tiny_model()
        cfg = model.context([1, 0, 2], left=3)
        x = rng.standard_normal((10, 4))
        meter = AttentionMeter()
        sliced = query_slice_encode(model, x, block, cfg, meter)
        assert_allclose(sliced, model.audio_encode(x, cfg), rtol=0, atol=1e-5)
        assert meter.peak <= block * (3 + block + 2)

    def test_unbounded_contexts_rejected(self, rng):
        model = tiny_model()
        x = rng.standard_normal((4, 4))
        with pytest.raises(UnsupportedConfigError):
            query_slice_encode(model, x, 2, model.context([0, 0, 0]))
        with pytest.raises(UnsupportedConfigError):
            query_slice_encode(model, x, 2, model.context([0, 0, FULL_CONTEXT], left=3))
        with pytest.raises(ValueError):
            query_slice_encode(model, x, 0, model.context([0, 0, 0], left=3))


class TestSearch:
    def test_blank_dominant_gives_empty(self, rng):
        model = force_symbol(tiny_model(), 0)
        hyp = greedy_decode(rng.standard_normal((6, 8)), model)
        assert hyp.labels == ()
        assert beam_decode(rng.standard_normal((6, 8)), model, 3)[0].labels == ()

    def test_forced_label_hits_cap(self, rng):
        model = force_symbol(tiny_model(), 1)
        hyp = greedy_decode(rng.standard_normal((4, 8)), model, cap=3)
        assert hyp.labels == (1,) * 12
        assert hyp.frames == (0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3)
        assert hyp.text(model.vocab) == "a" * 12

    def test_default_cap_bounds_labels(self, rng):
        model = force_symbol(tiny_model(), 2)
        hyp = greedy_decode(rng.standard_normal((5, 8)), model)
        assert len(hyp.labels) == 10 * 5

    def test_beam_one_is_greedy(self, rng):
        for seed in range(4):
            model = tiny_model(seed=seed)
            encodings = rng.standard_normal((8, 8))
            greedy = greedy_decode(encodings, model)
            best = beam_decode(encodings, model, 1)[0]
            assert best.labels == greedy.labels
            assert best.frames == greedy.frames
            assert best.score == pytest.approx(greedy.score, abs=1e-9)

    def test_beam_scores_sorted(self, rng):
        model = tiny_model(seed=2)
        nbest = beam_decode(rng.standard_normal((6, 8)), model, 4)
        assert 1 <= len(nbest) <= 4
        scores = [h.score for h in nbest]
        assert scores == sorted(scores, reverse=True)
        assert len({h.labels for h in nbest}) == len(nbest)

    def test_bad_arguments(self, rng):
        model = tiny_model()
        with pytest.raises(ValueError):
            beam_decode(rng.standard_normal((2, 8)), model, 0)
        with pytest.raises(ValueError):
            greedy_decode(rng.standard_normal((2, 8)), model, cap=0)

    @pytest.mark.parametrize("beam", [1, 4])
    def test_cache_does_not_change_result(self, rng, beam):
        model = tiny_model(seed=6)
        x = rng.standard_normal((9, 4))
        cfg = model.context([0, 1, 0])
        cache = LabelCache()
        plain = offline_decode(model, x, cfg, beam)
        cached = offline_decode(model, x, cfg, beam, cache)
        assert cached.labels == plain.labels
        assert cached.score == plain.score
        assert cache.misses == len(cache)
        if beam > 1:
            assert cache.hits > 0

    def test_bigram_model_decodes(self, rng):
        model = tiny_model(label_mode="bigram")
        x = rng.standard_normal((7, 4))
        cfg = model.context([0, 0, 0])
        assert offline_decode(model, x, cfg, 3).labels == offline_decode(model, x, cfg, 3, LabelCache()).labels


class TestStreamDecode:
    def test_final_matches_offline_greedy(self, rng):
        model = tiny_model(seed=4)
        x = rng.standard_normal((15, 4))
        cfg = model.context([0, 1, 1])
        events, final = stream_decode(model, x, cfg, 4)
        assert events[-1].type == "final"
        assert all(e.type == "partial" for e in events[:-1])
        assert final.labels == offline_decode(model, x, cfg).labels
        assert events[-1].stream_time_ms == 15 * cfg.frame_ms

    def test_partials_grow(self, rng):
        model = force_symbol(tiny_model(), 1)
        events, _ = stream_decode(model, rng.standard_normal((8, 4)), model.context([0, 0, 0]), 2, cap=1)
        texts = [e.text for e in events if e.type == "partial"]
        assert texts == ["aa", "aaaa", "aaaaaa", "aaaaaaaa"]
        assert all(b.startswith(a) for a, b in zip(texts, texts[1:]))


class TestYSession:
    def configs(self, model, delay=0):
        low = model.context([0, 0, 0], left=8, output_delay=delay)
        high = model.context([0, 2, 3], left=8, output_delay=delay)
        return low, high

    def test_layout_validation(self):
        model = tiny_model()
        low, high = self.configs(model)
        with pytest.raises(UnsupportedConfigError):
            y_start(model, low, high, shared=2)
        with pytest.raises(UnsupportedConfigError):
            y_start(model, low, high, shared=4)
        with pytest.raises(UnsupportedConfigError):
            y_start(model, low, model.context([0, 2, 3], left=4), shared=1)
        with pytest.raises(UnsupportedConfigError):
            y_start(model, low, model.context([0, 2, 3], left=8, output_delay=1), shared=1)
        with pytest.raises(ValueError):
            y_start(model, low, high, shared=1, schedule="parallel")

    def test_lag_frames(self):
        model = tiny_model()
        low, high = self.configs(model)
        session = y_start(model, low, high, shared=1)
        assert session.lag_frames == 5
        y_finalize(session)

    @pytest.mark.parametrize("shared", [0, 1])
    @pytest.mark.parametrize("delay", [0, 2])
    def test_final_text_matches_offline_high(self, rng, shared, delay):
        model = tiny_model(seed=4)
        low, high = self.configs(model, delay)
        x = rng.standard_normal((14, 4))
        result = y_decode(model, x, low, high, shared, step_size=3)
        assert result.labels == list(offline_decode(model, x, high).labels)
        assert result.shared_frames == 14 + delay
        # one pass per fed chunk, plus one over the delay padding
        assert result.shared_layer_calls == shared * (5 + (delay > 0))
        assert result.shared_layer_rows == [14 + delay] * shared
        assert result.events[-1].branch == "high"
        assert result.events[-1].type == "final"

    def test_low_partials_match_single_branch(self, rng):
        model = tiny_model(seed=4)
        low, high = self.configs(model)
        x = rng.standard_normal((14, 4))
        result = y_decode(model, x, low, high, 1, step_size=2)
        events, final = stream_decode(model, x, low, 2)
        partials = [e.text for e in result.events if e.type == "partial"]
        assert partials == [e.text for e in events if e.type == "partial"]
        assert all(e.branch == "low" for e in result.events[:-1])
        assert result.partial_text == final.text(model.vocab)

    def test_flush_bounded_by_lookahead(self, rng):
        model = tiny_model()
        for delay in (0, 2):
            low, high = self.configs(model, delay)
            result = y_decode(model, rng.standard_normal((12, 4)), low, high, 1, step_size=1)
            assert result.flush_frames <= high.lookahead_frames() + delay

    def test_zero_length_utterance(self):
        model = tiny_model()
        low, high = self.configs(model)
        result = y_decode(model, np.zeros((0, 4)), low, high, 1, step_size=4)
        assert result.text == ""
        assert result.labels == []
        assert result.flush_frames == 0

    def test_state_errors(self, rng):
        model = tiny_model()
        low, high = self.configs(model)
        session = y_start(model, low, high, shared=1)
        y_feed(session, rng.standard_normal((3, 4)))
        y_finalize(session)
        with pytest.raises(SessionStateError):
            y_finalize(session)
        with pytest.raises(SessionStateError):
            y_feed(session, rng.standard_normal((1, 4)))

    def test_concurrent_matches_cooperative(self, rng):
        model = tiny_model(seed=9)
        low, high = self.configs(model)
        x = rng.standard_normal((16, 4))
        cooperative = y_decode(model, x, low, high, 1, step_size=4, schedule="cooperative")
        concurrent = y_decode(model, x, low, high, 1, step_size=4, schedule="concurrent")
        assert concurrent.text == cooperative.text
        assert concurrent.partial_text == cooperative.partial_text
        assert [e.text for e in concurrent.events] == [e.text for e in cooperative.events]

    def test_off_menu_flag(self):
        model = tiny_model(default_configs=["[0] x 3"])
        low, high = self.configs(model)
        session = y_start(model, low, high, shared=1)
        assert session.off_menu
        y_finalize(session)
        on_menu = tiny_model(default_configs=["[0] x 3", "[0] + [2] + [3]"])
        session = y_start(on_menu, low, high, shared=1)
        assert not session.off_menu
        y_finalize(session)
