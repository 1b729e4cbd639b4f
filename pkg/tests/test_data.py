import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.data import (
    Dataset,
    DatasetParseError,
    Utterance,
    VocabMismatchError,
    check_vocab,
    generate_dataset,
    generate_utterance,
    nearest_prototype_labels,
    prototype_table,
    read_dataset,
    write_dataset,
)
from app.transducer import Vocab
from tests.oracles import TINY_VOCAB


class TestGeneration:
    def test_same_seed_same_data(self):
        a = generate_dataset(5, 42)
        b = generate_dataset(5, 42)
        for x, y in zip(a, b):
            assert x.id == y.id
            assert x.labels == y.labels
            assert_allclose(x.features, y.features, rtol=0, atol=0)

    def test_different_seed_differs(self):
        a = generate_dataset(5, 1)
        b = generate_dataset(5, 2)
        assert [u.labels for u in a] != [u.labels for u in b]

    def test_shapes_and_lengths(self):
        data = generate_dataset(20, 3, len_range=(3, 8))
        for utt in data:
            assert 3 <= len(utt.labels) <= 8
            assert utt.features.shape[1] == data.feature_dim
            assert 0 not in utt.labels
            # words never start or end with a space, and never hold two in a row
            assert utt.labels[0] != data.vocab.space_id
            assert utt.labels[-1] != data.vocab.space_id
            assert all(not (a == b == data.vocab.space_id) for a, b in zip(utt.labels, utt.labels[1:]))

    def test_reference_times_are_onsets(self):
        rng = np.random.default_rng(0)
        vocab = Vocab()
        prototypes = prototype_table(vocab)
        for _ in range(1000):
            utt = generate_utterance(rng, vocab=vocab, prototypes=prototypes, noise=0.0)
            times = utt.ref_times
            assert all(0 <= t < utt.num_frames for t in times)
            assert all(b - a >= 2 for a, b in zip(times, times[1:]))
            assert all(utt.features[t, -1] == 1.0 for t in times)

    def test_nearest_prototype_oracle(self):
        data = generate_dataset(100, 9, noise=0.0)
        prototypes = prototype_table(data.vocab, data.feature_dim)
        correct = sum(nearest_prototype_labels(utt.features, prototypes) == utt.labels for utt in data)
        assert correct >= 99

    def test_split(self):
        data = generate_dataset(6, 0)
        head, tail = data.split(2)
        assert len(head) == 4 and len(tail) == 2
        assert tail[0].id == data[4].id
        assert len(data.split(0)[1]) == 0

    def test_duration(self):
        utt = Utterance("u", np.zeros((10, 4)), [], [], frame_ms=30.0)
        assert utt.duration_seconds == pytest.approx(0.3)


class TestFiles:
    def test_round_trip(self, tmp_path):
        data = generate_dataset(4, 5, vocab=Vocab(TINY_VOCAB), feature_dim=6)
        path = write_dataset(data, str(tmp_path / "toy.jsonl"))
        loaded = read_dataset(path)
        assert loaded.vocab == Vocab(TINY_VOCAB)
        assert loaded.feature_dim == 6
        assert loaded.seed == 5
        assert [u.id for u in loaded] == [u.id for u in data]
        assert_allclose(loaded[2].features, data[2].features, rtol=0, atol=0)
        assert loaded[2].ref_times == data[2].ref_times

    def test_truncated_line_names_line(self, tmp_path):
        data = generate_dataset(3, 5)
        path = write_dataset(data, str(tmp_path / "toy.jsonl"))
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
        lines[2] = lines[2][: len(lines[2]) // 2] + "\n"
        with open(path, "w", encoding="utf-8") as f:
            f.writelines(lines)
        with pytest.raises(DatasetParseError, match="line 3"):
            read_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        data = read_dataset(str(path))
        assert isinstance(data, Dataset)
        assert len(data) == 0

    def test_bad_reference_times(self, tmp_path):
        record = {"id": "u", "features": [[0.0] * 16] * 3, "labels": [1, 2], "ref_times": [2, 1],
                  "frame_ms": 30.0}
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(DatasetParseError, match="line 1"):
            read_dataset(str(path))

    def test_duplicate_ids(self, tmp_path):
        record = json.dumps({"id": "u", "features": [[0.0] * 16], "labels": [], "ref_times": [],
                             "frame_ms": 30.0})
        path = tmp_path / "dup.jsonl"
        path.write_text(record + "\n" + record + "\n")
        with pytest.raises(DatasetParseError, match="duplicate"):
            read_dataset(str(path))


class TestVocabCheck:
    def test_mismatch(self):
        with pytest.raises(VocabMismatchError):
            check_vocab(Vocab(TINY_VOCAB), Vocab())
        check_vocab(Vocab(), Vocab())
