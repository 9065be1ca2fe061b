"""Automatic evaluation for generated dialogue responses.

Metrics: sentence-level smoothed BLEU-1..4, Dist-1..3, embedding Average /
Extrema / Greedy, context Coherence, and Ent-1/2 (mean negative
log-probability of generated n-grams under the training corpus's smoothed
empirical n-gram distribution).  Reports scale values by 100.

BLEU here is the geometric mean of clipped n-gram precisions up to order n
with a per-sentence brevity penalty; orders >= 2 use add-one smoothing,
order 1 is unsmoothed.  Entropy smoothing is add-one over the training
n-gram vocabulary plus one unseen bucket: p(g) = (count(g)+1) / (total + V + 1),
unseen n-grams get 1 / (total + V + 1).
"""

import json
import math
from collections import Counter
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .matcher import EmbeddingTable, embed_utterance, _cosine


class MetricError(ValueError):
    pass


@dataclass
class EvalReport:
    bleu: List[float]  # orders 1..4
    dist: List[float]  # orders 1..3
    average: float
    extrema: float
    greedy: float
    coherence: float
    ent: List[float]  # orders 1..2
    manifest: List[dict] = field(default_factory=list)

    def validate(self) -> None:
        for v in self.bleu + self.dist:
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"bleu/dist value {v} outside [0, 1]")
        for v in (self.average, self.extrema, self.greedy, self.coherence):
            if not -1.0 <= v <= 1.0 + 1e-9:
                raise MetricError(f"embedding metric {v} outside [-1, 1]")
        for v in self.ent:
            if v < 0.0:
                raise MetricError(f"entropy {v} negative")

    def as_percent(self) -> dict:
        out = {}
        for i, v in enumerate(self.bleu, 1):
            out[f"bleu_{i}"] = 100.0 * v
        for i, v in enumerate(self.dist, 1):
            out[f"dist_{i}"] = 100.0 * v
        out["average"] = 100.0 * self.average
        out["extrema"] = 100.0 * self.extrema
        out["greedy"] = 100.0 * self.greedy
        out["coherence"] = 100.0 * self.coherence
        for i, v in enumerate(self.ent, 1):
            out[f"ent_{i}"] = v  # entropies are nats, not percentages
        return out

    def save(self, report_path: str, manifest_path: Optional[str] = None) -> None:
        with open(report_path, "w", encoding="utf-8") as f:
            f.write("# values x100 except ent_n (nats); sentence-BLEU, add-one smoothed n>=2\n")
            for key, val in self.as_percent().items():
                f.write(f"{key} = {val:.4f}\n")
            f.write(json.dumps(self.as_percent()) + "\n")
        if manifest_path:
            with open(manifest_path, "w", encoding="utf-8") as f:
                for rec in self.manifest:
                    f.write(json.dumps(rec) + "\n")


def _ngrams(tokens: Sequence[str], n: int) -> List[Tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def sentence_bleu(hyp: Sequence[str], ref: Sequence[str], n: int) -> float:
    if not hyp:
        return 0.0
    log_p = 0.0
    for order in range(1, n + 1):
        h_counts = Counter(_ngrams(hyp, order))
        r_counts = Counter(_ngrams(ref, order))
        matches = sum(min(c, r_counts[g]) for g, c in h_counts.items())
        total = sum(h_counts.values())
        if order == 1:
            if total == 0 or matches == 0:
                return 0.0
            p = matches / total
        else:
            p = (matches + 1) / (total + 1)
        log_p += math.log(p)
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return bp * math.exp(log_p / n)


def bleu_n(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], n: int) -> float:
    """Corpus-averaged sentence BLEU of order n."""
    if len(hypotheses) != len(references):
        raise MetricError("hypotheses and references must align")
    if not hypotheses:
        raise MetricError("empty hypothesis list")
    return sum(sentence_bleu(h, r, n) for h, r in zip(hypotheses, references)) / len(hypotheses)


def distinct_n(hypotheses: Sequence[Sequence[str]], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across all hypotheses."""
    if not hypotheses:
        raise MetricError("empty hypothesis list")
    seen, total = set(), 0
    for h in hypotheses:
        grams = _ngrams(h, n)
        seen.update(grams)
        total += len(grams)
    return len(seen) / total if total else 0.0


def _extrema_vector(tokens: Sequence[str], table: EmbeddingTable) -> np.ndarray:
    vecs = np.stack([table.lookup(t) for t in tokens])
    idx = np.argmax(np.abs(vecs), axis=0)
    return vecs[idx, np.arange(vecs.shape[1])]


def _greedy_directed(a: Sequence[str], b: Sequence[str], table: EmbeddingTable) -> float:
    scores = []
    for t in a:
        va = table.lookup(t)
        scores.append(max(_cosine(va, table.lookup(u)) for u in b))
    return sum(scores) / len(scores)


def embedding_metrics(
    hypotheses: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    table: EmbeddingTable,
) -> Tuple[float, float, float]:
    """(average, extrema, greedy), each corpus-averaged."""
    if len(hypotheses) != len(references) or not hypotheses:
        raise MetricError("need aligned, non-empty hypothesis/reference lists")
    avg, ext, gre = [], [], []
    for h, r in zip(hypotheses, references):
        if not h or not r:
            raise MetricError("empty utterance in embedding metrics")
        avg.append(_cosine(embed_utterance(h, table), embed_utterance(r, table)))
        ext.append(_cosine(_extrema_vector(h, table), _extrema_vector(r, table)))
        gre.append(0.5 * (_greedy_directed(h, r, table) + _greedy_directed(r, h, table)))
    n = len(hypotheses)
    return sum(avg) / n, sum(ext) / n, sum(gre) / n


def coherence(
    contexts: Sequence[Sequence[str]],
    hypotheses: Sequence[Sequence[str]],
    table: EmbeddingTable,
) -> float:
    """Mean cosine between flattened-context and hypothesis mean embeddings."""
    if len(contexts) != len(hypotheses) or not contexts:
        raise MetricError("need aligned, non-empty context/hypothesis lists")
    vals = []
    for c, h in zip(contexts, hypotheses):
        if not c or not h:
            raise MetricError("empty utterance in coherence")
        vals.append(_cosine(embed_utterance(c, table), embed_utterance(h, table)))
    return sum(vals) / len(vals)


class NgramDistribution:
    """Add-one smoothed empirical n-gram distribution fitted on training text."""

    def __init__(self, training: Sequence[Sequence[str]], n: int):
        self.n = n
        self.counts: Counter = Counter()
        for seq in training:
            self.counts.update(_ngrams(seq, n))
        self.total = sum(self.counts.values())
        self.vocab = len(self.counts)

    def log_prob(self, gram: Tuple[str, ...]) -> float:
        denom = self.total + self.vocab + 1
        return math.log((self.counts.get(gram, 0) + 1) / denom)

    @property
    def floor_log_prob(self) -> float:
        return math.log(1.0 / (self.total + self.vocab + 1))


def entropy_n(hypotheses: Sequence[Sequence[str]], dist: NgramDistribution) -> float:
    """Mean per-hypothesis negative mean log-probability of its n-grams."""
    vals = []
    for h in hypotheses:
        grams = _ngrams(h, dist.n)
        if grams:
            vals.append(-sum(dist.log_prob(g) for g in grams) / len(grams))
    if not vals:
        raise MetricError("no hypothesis contributed any n-gram")
    return sum(vals) / len(vals)


def evaluate_generations(
    contexts: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    hypotheses: Sequence[Sequence[str]],
    table: EmbeddingTable,
    train_responses: Sequence[Sequence[str]],
) -> EvalReport:
    """Full metric battery over already-generated hypotheses."""
    if not contexts:
        raise MetricError("empty test set")
    avg, ext, gre = embedding_metrics(hypotheses, references, table)
    report = EvalReport(
        bleu=[bleu_n(hypotheses, references, n) for n in (1, 2, 3, 4)],
        dist=[distinct_n(hypotheses, n) for n in (1, 2, 3)],
        average=avg,
        extrema=ext,
        greedy=gre,
        coherence=coherence(contexts, hypotheses, table),
        ent=[
            entropy_n(hypotheses, NgramDistribution(train_responses, n)) for n in (1, 2)
        ],
        manifest=[
            {"context": " ".join(c), "reference": " ".join(r), "hypothesis": " ".join(h)}
            for c, r, h in zip(contexts, references, hypotheses)
        ],
    )
    report.validate()
    return report


def evaluate_model(
    model,
    test_pairs,
    vocab,
    table: EmbeddingTable,
    train_responses: Sequence[Sequence[str]],
    decode=None,
    generator: Optional[Callable[[Sequence[int]], List[int]]] = None,
) -> EvalReport:
    """Generate one hypothesis per test context and score it.

    `generator` overrides the model's decoder (used to inject oracle
    generators in tests); it maps context token ids to response token ids
    without the trailing EOS.
    """
    from .models import generate as model_generate

    if not test_pairs:
        raise MetricError("empty test set")
    gen = generator or (lambda ctx: model_generate(model, ctx, decode))
    contexts, references, hypotheses = [], [], []
    for p in test_pairs:
        hyp_ids = gen(p.context_flat)
        hyp = vocab.decode(hyp_ids) if hyp_ids else ["<unk>"]
        contexts.append(vocab.decode(p.context_flat))
        references.append(vocab.decode(p.response[:-1]))
        hypotheses.append(hyp)
    return evaluate_generations(contexts, references, hypotheses, table, train_responses)
