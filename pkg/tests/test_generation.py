"""Tests for greedy decoding and the generation file format.

A hand-wired deterministic model (near-binary gates and a successor table in
the output layer) provides the forward-trace oracle.
"""

import numpy as np
import pytest

from condseq.data import (
    BOS_INDEX,
    BOS_TOKEN,
    EOS_INDEX,
    EOS_TOKEN,
    FeatureStore,
    PAD_TOKEN,
    Vocabulary,
    encode_corpus,
)
from condseq.generation import (
    GenerationConfig,
    generate_corpus,
    greedy_generate,
    read_generations,
    write_generations,
)
from condseq.model import GATES, ModelConfig, ConditioningSpec
from condseq.training import build_model

VOCAB = Vocabulary(index_to_token=("<pad>", "<bos>", "<eos>", "<unk>", "a", "b", "c"),
                   min_count=1)


def fresh_model(seed=0, use_visual=False):
    spec = ConditioningSpec(use_visual=use_visual, visual_dim=2 if use_visual else 0)
    config = ModelConfig(vocab_size=7, hidden_size=7, embedding_size=7, conditioning=spec)
    return build_model(config, VOCAB, seed=seed)


def wire_successor_model(successors):
    """Model whose argmax after consuming index i is ``successors[i]``."""
    model = fresh_model()
    p = model.params
    p.embedding.data[:] = 10.0 * np.eye(7)
    p.h_init.data[:] = 0.0
    p.c_init.data[:] = 0.0
    for gate in GATES:
        p.w_x[gate].data[:] = 0.0
        p.w_h[gate].data[:] = 0.0
    p.b["input"].data[:] = 20.0  # input gate wide open
    p.b["forget"].data[:] = -20.0  # cell never carries over
    p.b["output"].data[:] = 20.0  # hidden exposes the cell
    p.b["candidate"].data[:] = 0.0
    p.w_x["candidate"].data[:] = np.eye(7)  # candidate ~ onehot(consumed token)
    p.out_w.data[:] = 0.0
    p.out_b.data[:] = 0.0
    for prev, nxt in successors.items():
        p.out_w.data[nxt, prev] = 10.0
    return model


class TestGreedyGenerate:
    def test_eos_everywhere_gives_empty_description(self):
        model = fresh_model()
        model.params.out_w.data[:] = 0.0
        model.params.out_b.data[:] = 0.0
        model.params.out_b.data[EOS_INDEX] = 100.0
        assert greedy_generate(model) == []

    def test_suppressed_eos_hits_the_step_cap(self):
        model = fresh_model(seed=1)
        model.params.out_b.data[EOS_INDEX] = -1e6
        tokens = greedy_generate(model)
        assert len(tokens) == 30

    def test_markers_never_appear_even_when_favored(self):
        model = fresh_model(seed=2)
        model.params.out_w.data[:] = 0.0
        model.params.out_b.data[:] = 0.0
        # BOS and PAD get the largest raw probabilities but must be masked out
        model.params.out_b.data[BOS_INDEX] = 50.0
        model.params.out_b.data[0] = 40.0
        model.params.out_b.data[EOS_INDEX] = -1e6
        tokens = greedy_generate(model, config=GenerationConfig(max_steps=5))
        assert BOS_TOKEN not in tokens and PAD_TOKEN not in tokens
        assert len(tokens) == 5

    def test_hand_wired_cycle_traces_a_b_then_stops(self):
        model = wire_successor_model({BOS_INDEX: 4, 4: 5, 5: EOS_INDEX})
        assert greedy_generate(model) == ["a", "b"]

    def test_tie_breaks_to_lowest_index(self):
        model = fresh_model()
        model.params.out_w.data[:] = 0.0
        model.params.out_b.data[:] = 0.0  # all-uniform: indices 4..6 tie after masking
        model.params.out_b.data[EOS_INDEX] = -1e6
        tokens = greedy_generate(model, config=GenerationConfig(max_steps=3))
        assert tokens == ["<unk>", "<unk>", "<unk>"]  # index 3 is the lowest unmasked

    def test_include_markers_wraps_output(self):
        model = wire_successor_model({BOS_INDEX: 4, 4: EOS_INDEX})
        tokens = greedy_generate(model, config=GenerationConfig(include_markers=True))
        assert tokens == [BOS_TOKEN, "a", EOS_TOKEN]

    def test_cap_reached_without_eos_has_no_eos_marker(self):
        model = fresh_model(seed=3)
        model.params.out_b.data[EOS_INDEX] = -1e6
        tokens = greedy_generate(model, config=GenerationConfig(max_steps=4, include_markers=True))
        assert tokens[0] == BOS_TOKEN
        assert EOS_TOKEN not in tokens
        assert len(tokens) == 5  # BOS + 4 content tokens

    def test_max_steps_validation(self):
        with pytest.raises(ValueError):
            GenerationConfig(max_steps=0)

    def test_visual_conditioning_changes_output(self):
        model = fresh_model(seed=7, use_visual=True)
        a = greedy_generate(model, v=np.array([8.0, -8.0]))
        b = greedy_generate(model, v=np.array([-8.0, 8.0]))
        assert a != b  # distinct images should steer this random model apart


class TestGenerateCorpus:
    def corpus(self, ids):
        return encode_corpus([(i, ["a"]) for i in ids], VOCAB, language="en", split="test").ids()

    def test_empty_id_list_gives_empty_map(self):
        model = fresh_model()
        assert generate_corpus(model, []) == {}

    def test_deterministic_across_calls(self):
        model = fresh_model(seed=4)
        ids = ["x", "y", "z"]
        assert generate_corpus(model, ids) == generate_corpus(model, ids)

    def test_matches_single_calls(self):
        model = wire_successor_model({BOS_INDEX: 4, 4: 5, 5: EOS_INDEX})
        out = generate_corpus(model, ["p", "q"])
        single = greedy_generate(model)
        assert out == {"p": single, "q": single}

    def test_visual_model_requires_feature_store(self):
        model = fresh_model(use_visual=True)
        with pytest.raises(ValueError):
            generate_corpus(model, ["x"])

    def test_missing_id_in_store_raises(self):
        model = fresh_model(use_visual=True)
        store = FeatureStore(vectors={"x": np.zeros(2)}, dim=2)
        with pytest.raises(ValueError, match="y"):
            generate_corpus(model, ["x", "y"], features=store)


class TestGenerationsFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "gen.tsv"
        data = {"b": ["two", "words"], "a": ["one"], "c": []}
        write_generations(path, data)
        again = read_generations(path)
        assert again == data
        # file is id-sorted for reproducible bytes
        lines = path.read_text(encoding="utf-8").splitlines()
        assert [l.split("\t")[0] for l in lines] == ["a", "b", "c"]

    def test_empty_generation_round_trips(self, tmp_path):
        path = tmp_path / "gen.tsv"
        write_generations(path, {"only": []})
        assert read_generations(path) == {"only": []}
