import numpy as np
import pytest

from ovdistill import grammar as gr
from ovdistill.errors import ConfigError, EmptyCaption, UnknownToken


@pytest.fixture
def story_vocab():
    # small vocabulary for caption-style sentences
    return gr.Vocabulary(
        words=("a", "an", "the", "under", "girl", "umbrella", "dog", "man"),
        concept_words=("girl", "umbrella", "dog", "man"),
        relation_words=("under",),
        embedding_dim=8,
        seed=1,
    )


@pytest.fixture
def shapes_vocab():
    return gr.default_vocabulary(embedding_dim=16, seed=0)


def tag_oracle(text, concepts, relations):
    # independent word-by-word membership tagging
    c_pos, r_pos = [], []
    for i, w in enumerate(text.split(" ")):
        if w in concepts:
            c_pos.append(i)
        if w in relations:
            r_pos.append(i)
    return c_pos, r_pos


class TestParseCaption:
    def test_girl_under_umbrella(self, story_vocab):
        cap = gr.parse_caption("a girl under an umbrella", story_vocab)
        assert cap.concept_words(story_vocab) == ("girl", "umbrella")
        assert cap.relation_positions == (2,)

    def test_matches_tagging_oracle(self, shapes_vocab):
        text = "a red circle above a blue square"
        cap = gr.parse_caption(text, shapes_vocab)
        c_pos, r_pos = tag_oracle(
            text, shapes_vocab.concept_words, shapes_vocab.relation_words
        )
        assert list(cap.concept_positions) == c_pos == [2, 6]
        assert list(cap.relation_positions) == r_pos == [3]
        assert cap.concept_words(shapes_vocab) == ("circle", "square")

    def test_no_concepts(self, shapes_vocab):
        cap = gr.parse_caption("a the an", shapes_vocab)
        assert cap.concept_positions == ()

    def test_unknown_word_named_in_error(self, shapes_vocab):
        with pytest.raises(UnknownToken, match="banana"):
            gr.parse_caption("a banana", shapes_vocab)

    def test_empty_caption(self, shapes_vocab):
        with pytest.raises(EmptyCaption):
            gr.parse_caption("", shapes_vocab)
        with pytest.raises(EmptyCaption):
            gr.parse_caption("   ", shapes_vocab)

    def test_deterministic(self, shapes_vocab):
        a = gr.parse_caption("a red circle", shapes_vocab)
        b = gr.parse_caption("a red circle", shapes_vocab)
        assert a == b

    def test_filler_shuffle_keeps_concepts(self, shapes_vocab):
        # swapping permitted filler words (colors) never changes the concepts
        base = gr.parse_caption("a red circle above a blue square", shapes_vocab)
        alt = gr.parse_caption("a yellow circle above a green square", shapes_vocab)
        assert base.concept_words(shapes_vocab) == alt.concept_words(shapes_vocab)


class TestMaskedViews:
    def test_one_view_per_concept(self, story_vocab):
        cap = gr.parse_caption("a girl under an umbrella", story_vocab)
        views = gr.make_masked_views(cap, story_vocab)
        assert len(views) == cap.n_concepts == 2
        assert views[0].render(story_vocab) == "a # under an umbrella"
        assert views[1].render(story_vocab) == "a girl under an #"

    def test_exactly_one_mask_each(self, story_vocab):
        cap = gr.parse_caption("a girl under an umbrella", story_vocab)
        for view in gr.make_masked_views(cap, story_vocab):
            assert view.token_ids.count(story_vocab.mask_token) == 1
            assert len(view.token_ids) == len(cap)
            assert view.mask_position in cap.concept_positions

    def test_zero_concepts_empty(self, shapes_vocab):
        cap = gr.parse_caption("a the an", shapes_vocab)
        assert gr.make_masked_views(cap, shapes_vocab) == []

    def test_duplicate_concepts_get_separate_views(self, shapes_vocab):
        cap = gr.parse_caption("a red circle above a blue circle", shapes_vocab)
        views = gr.make_masked_views(cap, shapes_vocab)
        assert len(views) == 2
        assert views[0].mask_position != views[1].mask_position
        assert all(v.target_id == shapes_vocab.word_id("circle") for v in views)

    def test_views_match_concept_count_randomly(self, shapes_vocab):
        rng = np.random.default_rng(0)
        words = list(shapes_vocab.words)
        for _ in range(50):
            n = rng.integers(1, 9)
            text = " ".join(words[i] for i in rng.integers(0, len(words), n))
            cap = gr.parse_caption(text, shapes_vocab)
            views = gr.make_masked_views(cap, shapes_vocab)
            assert len(views) == cap.n_concepts
            for v in views:
                assert v.token_ids.count(shapes_vocab.mask_token) == 1


class TestEmbeddings:
    def test_lookup_is_deterministic(self, shapes_vocab):
        ids = [shapes_vocab.word_id("circle")] * 2
        out = gr.embed_tokens(ids, shapes_vocab)
        assert np.array_equal(out[0], out[1])

    def test_bit_identical_across_instances(self):
        a = gr.default_vocabulary(16, seed=3)
        b = gr.default_vocabulary(16, seed=3)
        assert np.array_equal(a.embeddings, b.embeddings)

    def test_seed_changes_embeddings(self):
        a = gr.default_vocabulary(16, seed=3)
        b = gr.default_vocabulary(16, seed=4)
        assert not np.array_equal(a.embeddings, b.embeddings)

    def test_output_dim(self):
        vocab = gr.default_vocabulary(8, seed=0)
        out = gr.embed_tokens([0, 1, 2], vocab)
        assert out.shape == (3, 8)

    def test_unit_norm(self, shapes_vocab):
        norms = np.linalg.norm(shapes_vocab.embeddings, axis=1)
        assert np.allclose(norms, 1.0)

    def test_invalid_id(self, shapes_vocab):
        with pytest.raises(UnknownToken):
            gr.embed_tokens([9999], shapes_vocab)

    def test_mask_vector_is_distinct(self, shapes_vocab):
        mask_vec = shapes_vocab.embeddings[shapes_vocab.mask_token]
        for i in range(len(shapes_vocab)):
            assert not np.array_equal(mask_vec, shapes_vocab.embeddings[i])


class TestVocabulary:
    def test_overlapping_flags_rejected(self):
        with pytest.raises(ConfigError):
            gr.Vocabulary(("x", "y"), ("x",), ("x",), 4)

    def test_mask_word_rejected(self):
        with pytest.raises(ConfigError):
            gr.Vocabulary(("#", "y"), (), (), 4)

    def test_duplicate_words_rejected(self):
        with pytest.raises(ConfigError):
            gr.Vocabulary(("x", "x"), (), (), 4)

    def test_save_load_roundtrip(self, tmp_path, shapes_vocab):
        path = tmp_path / "vocab.txt"
        shapes_vocab.save(path)
        loaded = gr.Vocabulary.load(path)
        assert loaded.words == shapes_vocab.words
        assert loaded.concept_words == shapes_vocab.concept_words
        assert loaded.relation_words == shapes_vocab.relation_words
        assert np.array_equal(loaded.embeddings, shapes_vocab.embeddings)

    def test_grammar_file_roundtrip(self, tmp_path):
        g = gr.Grammar()
        path = tmp_path / "grammar.json"
        g.save(path)
        assert gr.Grammar.load(path) == g
