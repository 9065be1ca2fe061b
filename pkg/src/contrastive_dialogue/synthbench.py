"""Deterministic synthetic dialogue corpora with known matching structure.

Corpora are built from topic blocks: each block holds `contexts_per_response`
context utterances and `responses_per_context` response utterances over one
topic's private content-word pool, fully cross-connected.  Every context in
a block therefore has exactly `responses_per_context` valid responses and
every response fits exactly `contexts_per_response` contexts, materializing
one-to-many and many-to-one structure at desk scale.  A single generic
response ("i do not know .") is valid for every context and replaces a
configurable fraction of responses, mimicking the dominance of vacuous
replies in real dialogue data.

A relation-table sidecar records the exact ground-truth matching so sampler
precision is measurable.
"""

import json
import math
import os
import re
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .corpus import DialoguePair, save_dataset
from .matcher import EmbeddingTable

GENERIC_RESPONSE = "i do not know ."
WORDS_PER_TOPIC = 8
SHARED_WORDS = [
    "tell", "me", "about", "do", "you", "like", "i", "really", "enjoy",
    "think", "what", "is", "your", "favorite", "love", "the", "and", "so",
]

_CONTEXT_TEMPLATES = [
    ["tell me about {a} {b}", "do you like {c} ?"],
    ["what is your favorite {a} ?", "i think {b} and {c}"],
    ["do you enjoy {a} ?", "i love the {b} {c}"],
]
_RESPONSE_TEMPLATES = [
    "i really like {a} {b} .",
    "the {a} is so {b} .",
    "i enjoy {a} and {b} .",
    "{a} {b} is my favorite .",
    "you love {a} so {b} .",
]


class SynthError(ValueError):
    pass


@dataclass
class SynthSpec:
    topics: int = 20
    responses_per_context: int = 5
    contexts_per_response: int = 3
    generic_rate: float = 0.4
    vocab_size: int = 400
    seed: int = 0
    split_sizes: Tuple[int, int, int] = (1600, 200, 200)  # train, valid, test

    def __post_init__(self):
        if self.responses_per_context < 2 or self.contexts_per_response < 2:
            raise SynthError("fanouts must be >= 2 for multi-mapping structure")
        if not 0.0 <= self.generic_rate < 1.0:
            raise SynthError("generic rate must lie in [0, 1)")
        needed = self.topics * WORDS_PER_TOPIC + len(SHARED_WORDS)
        if self.vocab_size < needed:
            raise SynthError(
                f"vocab size {self.vocab_size} too small for {self.topics} topics "
                f"(need >= {needed})"
            )

    @property
    def total_pairs(self) -> int:
        return sum(self.split_sizes)


@dataclass
class SynthCorpus:
    spec: SynthSpec
    splits: Dict[str, List[DialoguePair]]
    # utterance-level ground truth: context string -> valid specific responses
    relation: Dict[str, List[str]]
    generic_response: str = GENERIC_RESPONSE


def _topic_words(spec: SynthSpec) -> List[List[str]]:
    return [
        [f"w{t}x{j}" for j in range(WORDS_PER_TOPIC)] for t in range(spec.topics)
    ]


def _fill(template: str, words: Sequence[str]) -> str:
    slots = {k: words[i] for i, k in enumerate("abc")}
    return template.format(**{k: slots[k] for k in "abc" if "{" + k + "}" in template})


def generate_corpus(spec: SynthSpec) -> SynthCorpus:
    """Build the corpus and its ground-truth relation table, seed-determined."""
    rng = np.random.default_rng(spec.seed)
    pools = _topic_words(spec)
    relation: Dict[str, List[str]] = {}
    raw_pairs: List[Tuple[List[str], str]] = []
    block = 0
    while len(raw_pairs) < spec.total_pairs:
        topic = block % spec.topics
        words = pools[topic]
        contexts = []
        for i in range(spec.contexts_per_response):
            tmpl = _CONTEXT_TEMPLATES[(block + i) % len(_CONTEXT_TEMPLATES)]
            picks = rng.choice(words, size=3, replace=False)
            contexts.append([_fill(u, picks) for u in tmpl])
        responses = []
        for j in range(spec.responses_per_context):
            tmpl = _RESPONSE_TEMPLATES[(block + j) % len(_RESPONSE_TEMPLATES)]
            picks = rng.choice(words, size=2, replace=False)
            responses.append(_fill(tmpl, list(picks) + [""]) + f" b{block}")
        for ctx in contexts:
            key = " | ".join(ctx)
            relation.setdefault(key, [])
            for resp in responses:
                if resp not in relation[key]:
                    relation[key].append(resp)
        for ctx in contexts:
            for resp in responses:
                raw_pairs.append((ctx, resp))
        block += 1
    raw_pairs = raw_pairs[: spec.total_pairs]

    n_generic = round(spec.generic_rate * len(raw_pairs))
    generic_idx = set(
        rng.choice(len(raw_pairs), size=n_generic, replace=False).tolist()
    )
    pairs = [
        (ctx, GENERIC_RESPONSE if i in generic_idx else resp)
        for i, (ctx, resp) in enumerate(raw_pairs)
    ]
    order = rng.permutation(len(pairs)).tolist()
    shuffled = [pairs[i] for i in order]
    splits: Dict[str, List[DialoguePair]] = {}
    offset = 0
    for name, size in zip(("train", "valid", "test"), spec.split_sizes):
        chunk = shuffled[offset : offset + size]
        splits[name] = [
            DialoguePair(id=i, context=list(c), response=r) for i, (c, r) in enumerate(chunk)
        ]
        offset += size
    return SynthCorpus(spec=spec, splits=splits, relation=relation)


def is_valid_pair(corpus: SynthCorpus, context: Sequence[str], response: str) -> bool:
    """Ground-truth check; the generic response matches every context."""
    key = " | ".join(context)
    if key not in corpus.relation:
        raise SynthError("context not generated by this corpus")
    return response == corpus.generic_response or response in corpus.relation[key]


def write_corpus(corpus: SynthCorpus, out_dir: str) -> Dict[str, str]:
    """Write split files plus the relation-table sidecar; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, pairs in corpus.splits.items():
        path = os.path.join(out_dir, f"{name}.jsonl")
        save_dataset(pairs, path)
        paths[name] = path
    sidecar = os.path.join(out_dir, "relation.json")
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump(
            {
                "spec": {**asdict(corpus.spec), "split_sizes": list(corpus.spec.split_sizes)},
                "generic_response": corpus.generic_response,
                "relation": corpus.relation,
            },
            f,
            indent=1,
        )
    paths["relation"] = sidecar
    return paths


def topic_embeddings(tokens: Sequence[str], dim: int = 16, seed: int = 0) -> EmbeddingTable:
    """Embedding table mirroring the corpus's topic structure.

    Words of one topic share a random sign-vector direction, so the cosine
    matcher sees same-topic context-response pairs as strongly matched and
    cross-topic pairs as spread around zero (including genuinely negative
    scores).  Shared template words and the generic response get small noise
    vectors and thus score near zero everywhere.  This plays the role that
    pretrained word embeddings play on real corpora: without an informative
    matcher the score-weighted objective has nothing to weight by.
    """
    rng = np.random.default_rng(seed)
    directions: Dict[int, np.ndarray] = {}
    vectors: Dict[str, np.ndarray] = {}
    for tok in tokens:
        m = re.fullmatch(r"w(\d+)x\d+", tok)
        if m:
            topic = int(m.group(1))
            if topic not in directions:
                directions[topic] = rng.choice([-1.0, 1.0], size=dim)
            vectors[tok] = directions[topic] + 0.1 * rng.standard_normal(dim)
        else:
            vectors[tok] = 0.1 * rng.standard_normal(dim)
    return EmbeddingTable(vectors=vectors, dim=dim)


def load_relation(path: str) -> Tuple[Dict[str, List[str]], str]:
    with open(path, encoding="utf-8") as f:
        blob = json.load(f)
    return blob["relation"], blob["generic_response"]
