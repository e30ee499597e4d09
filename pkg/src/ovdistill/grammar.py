"""Closed caption grammar: vocabulary, parsing, masked replications, frozen embeddings.

Captions are sequences of known words separated by single spaces. Object
concepts and spatial relation words are identified by closed word lists, so
parsing is exact and testable. Word embeddings are frozen unit vectors derived
deterministically from (seed, word string); they stand in for a pretrained
text encoder and double as the detector's classifier weights.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyCaption, UnknownToken

MASK_WORD = "#"

# Default shapes-world word lists. Four base shapes carry box labels during
# training; the two novel shapes appear only inside captions.
SHAPE_CLASSES = ("circle", "square", "triangle", "star", "cross", "ring")
BASE_CLASSES = ("circle", "square", "triangle", "star")
NOVEL_CLASSES = ("cross", "ring")
COLOR_WORDS = ("red", "green", "blue", "yellow")
RELATION_WORDS = ("above", "below", "left", "right")
FILLER_WORDS = ("a", "an", "the", "of", "and", ",")


def _word_vector(seed, word, dim):
    # Stable across processes: Python's hash() is salted, blake2b is not.
    digest = hashlib.blake2b(f"{seed}:{word}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


class Vocabulary:
    """Ordered closed word list with concept/relation flags and a frozen embedding table.

    The mask token is a distinguished extra id (``len(words)``) rendered as
    ``"#"``; it never appears among the words themselves. Embeddings are
    unit-normalized so dot-product scores stay in [-1, 1].
    """

    def __init__(self, words, concept_words, relation_words, embedding_dim=32, seed=0):
        words = tuple(words)
        if len(set(words)) != len(words):
            raise ConfigError("vocabulary contains duplicate words")
        if MASK_WORD in words:
            raise ConfigError(f"mask token {MASK_WORD!r} cannot be a vocabulary word")
        concepts = frozenset(concept_words)
        relations = frozenset(relation_words)
        overlap = concepts & relations
        if overlap:
            raise ConfigError(f"words flagged both concept and relation: {sorted(overlap)}")
        unknown = (concepts | relations) - set(words)
        if unknown:
            raise ConfigError(f"flagged words missing from word list: {sorted(unknown)}")
        if embedding_dim <= 0:
            raise ConfigError("embedding_dim must be positive")

        self.words = words
        self.concept_words = concepts
        self.relation_words = relations
        self.embedding_dim = int(embedding_dim)
        self.seed = int(seed)
        self._ids = {w: i for i, w in enumerate(words)}
        self.mask_token = len(words)
        # Row `mask_token` holds the dedicated (frozen) mask vector.
        self.embeddings = np.stack(
            [_word_vector(seed, w, embedding_dim) for w in words]
            + [_word_vector(seed, MASK_WORD, embedding_dim)]
        ).astype(np.float64)

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self._ids

    def word_id(self, word):
        try:
            return self._ids[word]
        except KeyError:
            raise UnknownToken(f"unknown word: {word!r}") from None

    def word(self, token_id):
        if token_id == self.mask_token:
            return MASK_WORD
        if not 0 <= token_id < len(self.words):
            raise UnknownToken(f"unknown token id: {token_id}")
        return self.words[token_id]

    def is_concept_id(self, token_id):
        return self.word(token_id) in self.concept_words

    def embedding(self, word):
        """Frozen unit embedding of a single word (or the mask token)."""
        if word == MASK_WORD:
            return self.embeddings[self.mask_token]
        return self.embeddings[self.word_id(word)]

    def class_embeddings(self, class_names):
        """Embedding table for a class list, keyed by name."""
        return {name: self.embedding(name) for name in class_names}

    def save(self, path):
        """One word per line: ``word<TAB>flag`` with flag in {concept, relation, filler}."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# embedding_dim={self.embedding_dim} seed={self.seed}\n")
            for w in self.words:
                if w in self.concept_words:
                    flag = "concept"
                elif w in self.relation_words:
                    flag = "relation"
                else:
                    flag = "filler"
                fh.write(f"{w}\t{flag}\n")

    @classmethod
    def load(cls, path, embedding_dim=None, seed=None):
        words, concepts, relations = [], [], []
        dim, sd = 32, 0
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    for part in line[1:].split():
                        key, _, val = part.partition("=")
                        if key == "embedding_dim":
                            dim = int(val)
                        elif key == "seed":
                            sd = int(val)
                    continue
                word, _, flag = line.partition("\t")
                words.append(word)
                if flag == "concept":
                    concepts.append(word)
                elif flag == "relation":
                    relations.append(word)
        if embedding_dim is not None:
            dim = embedding_dim
        if seed is not None:
            sd = seed
        return cls(words, concepts, relations, embedding_dim=dim, seed=sd)


def default_vocabulary(embedding_dim=32, seed=0):
    """Vocabulary of the default shapes world."""
    words = FILLER_WORDS + COLOR_WORDS + SHAPE_CLASSES + RELATION_WORDS
    return Vocabulary(words, SHAPE_CLASSES, RELATION_WORDS, embedding_dim, seed)


@dataclass(frozen=True)
class Caption:
    """A parsed caption: token ids plus the positions of concepts and relation words."""

    text: str
    word_ids: tuple
    concept_positions: tuple
    relation_positions: tuple

    def __len__(self):
        return len(self.word_ids)

    @property
    def n_concepts(self):
        return len(self.concept_positions)

    def concept_ids(self):
        return tuple(self.word_ids[p] for p in self.concept_positions)

    def concept_words(self, vocab):
        return tuple(vocab.word(i) for i in self.concept_ids())


@dataclass(frozen=True)
class MaskedView:
    """One replication of a caption with exactly one concept occurrence masked."""

    source: Caption
    masked_concept_index: int  # index into source.concept_positions
    token_ids: tuple

    @property
    def mask_position(self):
        return self.source.concept_positions[self.masked_concept_index]

    @property
    def target_id(self):
        return self.source.word_ids[self.mask_position]

    def render(self, vocab):
        return " ".join(vocab.word(i) for i in self.token_ids)


def parse_caption(text, vocab):
    """Tokenize a caption and tag concept / relation word positions.

    Deterministic membership tagging over the closed grammar; every
    occurrence of a concept word is tagged separately.
    """
    if not text or not text.strip():
        raise EmptyCaption("caption text is empty")
    tokens = text.split(" ")
    ids = []
    concept_positions = []
    relation_positions = []
    for pos, tok in enumerate(tokens):
        ids.append(vocab.word_id(tok))
        if tok in vocab.concept_words:
            concept_positions.append(pos)
        elif tok in vocab.relation_words:
            relation_positions.append(pos)
    return Caption(
        text=text,
        word_ids=tuple(ids),
        concept_positions=tuple(concept_positions),
        relation_positions=tuple(relation_positions),
    )


def make_masked_views(caption, vocab):
    """Copy the caption once per concept occurrence, masking exactly that occurrence.

    Concepts are masked with probability 1; duplicate concept words get one
    view per occurrence. A concept-free caption yields an empty list.
    """
    views = []
    for k, pos in enumerate(caption.concept_positions):
        ids = list(caption.word_ids)
        ids[pos] = vocab.mask_token
        views.append(MaskedView(source=caption, masked_concept_index=k, token_ids=tuple(ids)))
    return views


def embed_tokens(token_ids, vocab):
    """Frozen embedding lookup; output row count equals input length."""
    out = np.empty((len(token_ids), vocab.embedding_dim), dtype=np.float64)
    for row, tid in enumerate(token_ids):
        if not 0 <= tid <= vocab.mask_token:
            raise UnknownToken(f"unknown token id: {tid}")
        out[row] = vocab.embeddings[tid]
    return out


# Relation identifiers used by the scene generator, mapped to caption words.
# "left_of" renders as the two tokens "left of"; only "left" carries the
# relation flag, "of" is filler.
RELATION_PHRASES = {
    "above": "above",
    "below": "below",
    "left_of": "left of",
    "right_of": "right of",
}


@dataclass(frozen=True)
class Grammar:
    """Caption templates of the synthetic world."""

    colors: tuple = COLOR_WORDS
    single_template: str = "a {color} {shape}"
    relation_template: str = "a {color} {shape} {relation} a {color} {shape}"
    pair_template: str = "a {color} {shape} and a {color} {shape}"

    def render_single(self, color, shape):
        return self.single_template.format(color=color, shape=shape)

    def render_related(self, color1, shape1, relation, color2, shape2):
        template = self.relation_template.replace("{relation}", RELATION_PHRASES[relation], 1)
        return _fill_two(template, color1, shape1, color2, shape2)

    def render_pair(self, color1, shape1, color2, shape2):
        return _fill_two(self.pair_template, color1, shape1, color2, shape2)

    def save(self, path):
        payload = {
            "colors": list(self.colors),
            "single_template": self.single_template,
            "relation_template": self.relation_template,
            "pair_template": self.pair_template,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(
            colors=tuple(payload["colors"]),
            single_template=payload["single_template"],
            relation_template=payload["relation_template"],
            pair_template=payload["pair_template"],
        )


def _fill_two(template, color1, shape1, color2, shape2):
    first = template.replace("{color}", color1, 1).replace("{shape}", shape1, 1)
    return first.replace("{color}", color2, 1).replace("{shape}", shape2, 1)
