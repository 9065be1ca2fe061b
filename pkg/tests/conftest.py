import numpy as np
import pytest

from contrastive_dialogue.corpus import DialoguePair, build_vocab, tokenize_corpus
from contrastive_dialogue.matcher import CosineMatcher, EmbeddingTable
from contrastive_dialogue.models import ModelConfig, build_model


TOY_PAIRS = [
    DialoguePair(0, ["what are your hobbies ?"], "reading is my favorite hobby"),
    DialoguePair(1, ["do you like to cook ?"], "i love to cook pasta"),
    DialoguePair(2, ["what are your hobbies ?", "i love to cook"], "cooking is fun"),
    DialoguePair(3, ["where do you live ?"], "i live in the mountains"),
    DialoguePair(4, ["do you have pets ?"], "i have two dogs"),
    DialoguePair(5, ["what music do you enjoy ?"], "i enjoy jazz and blues"),
    DialoguePair(6, ["what are your hobbies ?"], "i like hiking and reading"),
    DialoguePair(7, ["do you like dogs ?"], "dogs are my favorite animal"),
    DialoguePair(8, ["what do you do for work ?"], "i teach math at a school"),
    DialoguePair(9, ["do you enjoy music ?"], "jazz is my favorite music"),
]


@pytest.fixture(scope="session")
def toy_pairs():
    return list(TOY_PAIRS)


@pytest.fixture(scope="session")
def toy_vocab(toy_pairs):
    return build_vocab(toy_pairs, cap=40000, min_freq=1)


@pytest.fixture(scope="session")
def toy_tokenized(toy_pairs, toy_vocab):
    return tokenize_corpus(toy_pairs, toy_vocab)


@pytest.fixture(scope="session")
def toy_table(toy_vocab):
    return EmbeddingTable.random(toy_vocab.itos, dim=16, seed=7)


@pytest.fixture(scope="session")
def toy_matcher(toy_table):
    return CosineMatcher(toy_table)


@pytest.fixture
def micro_model_pair():
    """Two small float64 models over a 12-token vocab, for numeric oracles."""
    cfg = ModelConfig(vocab_size=12, emb_dim=6, hidden=8, layers=1, dtype="float64")
    target = build_model(cfg, seed=1)
    reference = build_model(cfg, seed=2)
    return target, reference
