"""BM25 retrieval and contrastive dual sampling.

For every training pair (the anchor) we mine a group of scored positives and
negatives on both sides:

* response side: retrieve contexts lexically similar to the anchor context,
  take their paired responses as candidates, and rank (anchor context,
  candidate response) with the matcher;
* context side: symmetric, retrieving via the response index and ranking
  (candidate context, anchor response).

Top-k candidates per side become positives, bottom-k of the retrieval pool
plus a seeded random pad become negatives.  The anchor's own pair joins the
positives with weight 1.0, giving 2k+1 positives and 2k negatives per group.
Groups are cached to disk as JSON lines so training never calls the matcher
online.
"""

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .corpus import TokenizedPair, Vocab
from .matcher import CosineMatcher, to_negative_weight, to_positive_weight


class SamplerError(ValueError):
    pass


@dataclass
class SamplerConfig:
    k: int = 3  # positives/negatives mined per side
    pool_size: int = 100  # BM25 retrieval pool size M
    pad_size: int = 50  # random ids appended to the negative pool
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise SamplerError("group size k must be >= 1")
        if self.pool_size < 2 * self.k:
            raise SamplerError("retrieval pool must hold at least 2k candidates")


@dataclass(frozen=True)
class GroupEntry:
    context_id: int
    response_id: int
    weight: float
    source: str  # anchor | response-side | context-side | random-pad
    raw: float


@dataclass
class ContrastiveGroup:
    anchor_id: int
    positives: List[GroupEntry]
    negatives: List[GroupEntry]

    def validate(self, k: int, corpus_size: int) -> None:
        if len(self.positives) != 2 * k + 1:
            raise SamplerError(
                f"group {self.anchor_id}: expected {2 * k + 1} positives, "
                f"got {len(self.positives)}"
            )
        if len(self.negatives) != 2 * k:
            raise SamplerError(
                f"group {self.anchor_id}: expected {2 * k} negatives, got {len(self.negatives)}"
            )
        anchors = [e for e in self.positives if e.source == "anchor"]
        if len(anchors) != 1 or anchors[0].context_id != self.anchor_id:
            raise SamplerError(f"group {self.anchor_id}: anchor entry missing or duplicated")
        combos = [(e.context_id, e.response_id) for e in self.positives + self.negatives]
        if len(combos) != len(set(combos)):
            raise SamplerError(f"group {self.anchor_id}: duplicate (context, response) combo")
        for e in self.positives + self.negatives:
            if not (0 <= e.context_id < corpus_size and 0 <= e.response_id < corpus_size):
                raise SamplerError(f"group {self.anchor_id}: pair id outside corpus")
        for e in self.positives:
            if not 0.0 < e.weight <= 1.0:
                raise SamplerError(f"group {self.anchor_id}: positive weight {e.weight}")
        for e in self.negatives:
            if not -1.0 <= e.weight <= 0.0:
                raise SamplerError(f"group {self.anchor_id}: negative weight {e.weight}")


class Bm25Index:
    """Inverted index with Okapi BM25 scoring (idf floored via the +1 form)."""

    def __init__(self, docs: Dict[int, Sequence[str]], side: str, k1: float = 1.2, b: float = 0.75):
        if not docs:
            raise SamplerError("cannot index an empty corpus")
        self.side = side
        self.k1 = k1
        self.b = b
        self.doc_len = {i: len(d) for i, d in docs.items()}
        self.avg_len = sum(self.doc_len.values()) / len(docs)
        self.postings: Dict[str, Dict[int, int]] = defaultdict(dict)
        for i, d in docs.items():
            for tok, tf in Counter(d).items():
                self.postings[tok][i] = tf
        self.n_docs = len(docs)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def score(self, query: Sequence[str], doc_id: int) -> float:
        s = 0.0
        norm = 1.0 - self.b + self.b * self.doc_len[doc_id] / self.avg_len
        for term, qtf in Counter(query).items():
            tf = self.postings.get(term, {}).get(doc_id, 0)
            if tf:
                s += self.idf(term) * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
        return s

    def retrieve(self, query: Sequence[str], m: int, exclude: int = -1) -> List[int]:
        """Top-m doc ids by BM25, descending score, ties by ascending id."""
        scores: Dict[int, float] = defaultdict(float)
        norm_cache = {}
        for term, _ in Counter(query).items():
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for doc_id, tf in plist.items():
                if doc_id == exclude:
                    continue
                norm = norm_cache.get(doc_id)
                if norm is None:
                    norm = 1.0 - self.b + self.b * self.doc_len[doc_id] / self.avg_len
                    norm_cache[doc_id] = norm
                scores[doc_id] += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        return [doc_id for doc_id, _ in ranked[:m]]


@dataclass
class SamplerState:
    """Everything dual sampling needs, built once per corpus."""

    context_tokens: Dict[int, List[str]]
    response_tokens: Dict[int, List[str]]
    context_index: Bm25Index
    response_index: Bm25Index
    matcher: CosineMatcher
    config: SamplerConfig = field(default_factory=SamplerConfig)


def build_sampler_state(
    tokenized: Sequence[TokenizedPair],
    vocab: Vocab,
    matcher: CosineMatcher,
    config: SamplerConfig = None,
) -> SamplerState:
    ctx = {p.id: vocab.decode(p.context_flat) for p in tokenized}
    resp = {p.id: vocab.decode(p.response[:-1]) for p in tokenized}  # strip EOS
    return SamplerState(
        context_tokens=ctx,
        response_tokens=resp,
        context_index=Bm25Index(ctx, side="context"),
        response_index=Bm25Index(resp, side="response"),
        matcher=matcher,
        config=config or SamplerConfig(),
    )


def _rank(scored: List[Tuple[float, int]], reverse: bool) -> List[Tuple[float, int]]:
    # ties always break toward the lower pair id
    return sorted(scored, key=lambda t: (-t[0] if reverse else t[0], t[1]))


def _pad_ids(corpus_ids: Sequence[int], exclude: set, n: int, seed: int, anchor_id: int) -> List[int]:
    eligible = [i for i in corpus_ids if i not in exclude]
    rng = np.random.default_rng([seed, anchor_id])
    if len(eligible) <= n:
        return eligible
    return [int(i) for i in rng.choice(eligible, size=n, replace=False)]


def _sample_side(
    state: SamplerState,
    anchor_id: int,
    side: str,
) -> Tuple[List[GroupEntry], List[GroupEntry]]:
    cfg = state.config
    if side == "response-side":
        query = state.context_tokens[anchor_id]
        index = state.context_index
        score_cand = lambda cid: state.matcher.score(
            state.context_tokens[anchor_id], state.response_tokens[cid]
        )
        entry = lambda cid, w, src, raw: GroupEntry(anchor_id, cid, w, src, raw)
    else:
        query = state.response_tokens[anchor_id]
        index = state.response_index
        score_cand = lambda cid: state.matcher.score(
            state.context_tokens[cid], state.response_tokens[anchor_id]
        )
        entry = lambda cid, w, src, raw: GroupEntry(cid, anchor_id, w, src, raw)

    pool = index.retrieve(query, cfg.pool_size, exclude=anchor_id)
    scored = _rank([(score_cand(cid), cid) for cid in pool], reverse=True)
    positives = [
        entry(cid, to_positive_weight(raw), side, raw) for raw, cid in scored[: cfg.k]
    ]
    if len(positives) < cfg.k:
        # retrieval found too few lexical neighbors; pad from random draws
        used = {e.context_id if side == "context-side" else e.response_id for e in positives}
        used.add(anchor_id)
        extra = _pad_ids(
            list(state.context_tokens), used, cfg.k - len(positives), cfg.seed + 1, anchor_id
        )
        for cid in sorted(extra):
            raw = score_cand(cid)
            positives.append(entry(cid, to_positive_weight(raw), "random-pad", raw))
    if len(positives) < cfg.k:
        raise SamplerError(f"anchor {anchor_id}: corpus too small for {cfg.k} positives")

    pos_ids = {e.context_id if side == "context-side" else e.response_id for e in positives}
    pad = _pad_ids(
        list(state.context_tokens), pos_ids | {anchor_id}, cfg.pad_size, cfg.seed, anchor_id
    )
    neg_pool = sorted((set(pool) | set(pad)) - pos_ids - {anchor_id})
    neg_sources = {cid: (side if cid in set(pool) else "random-pad") for cid in neg_pool}
    neg_scored = _rank([(score_cand(cid), cid) for cid in neg_pool], reverse=False)
    negatives = [
        entry(cid, to_negative_weight(raw), neg_sources[cid], raw)
        for raw, cid in neg_scored[: cfg.k]
    ]
    if len(negatives) < cfg.k:
        raise SamplerError(f"anchor {anchor_id}: corpus too small for {cfg.k} negatives")
    return positives, negatives


def dual_sample(state: SamplerState, anchor_id: int) -> ContrastiveGroup:
    """Build the contrastive group for one anchor pair."""
    anchor_raw = state.matcher.score(
        state.context_tokens[anchor_id], state.response_tokens[anchor_id]
    )
    pos = [GroupEntry(anchor_id, anchor_id, 1.0, "anchor", anchor_raw)]
    rs_pos, rs_neg = _sample_side(state, anchor_id, "response-side")
    cs_pos, cs_neg = _sample_side(state, anchor_id, "context-side")
    group = ContrastiveGroup(
        anchor_id=anchor_id,
        positives=pos + rs_pos + cs_pos,
        negatives=rs_neg + cs_neg,
    )
    group.validate(state.config.k, len(state.context_tokens))
    return group


def sample_corpus(state: SamplerState, out_path: str) -> List[ContrastiveGroup]:
    """Mine one group per pair, in id order, and cache them as JSON lines."""
    groups = [dual_sample(state, anchor_id) for anchor_id in sorted(state.context_tokens)]
    with open(out_path, "w", encoding="utf-8") as f:
        for g in groups:
            rec = {
                "anchor_id": g.anchor_id,
                "positives": [asdict(e) for e in g.positives],
                "negatives": [asdict(e) for e in g.negatives],
            }
            f.write(json.dumps(rec) + "\n")
    return groups


def load_groups(path: str) -> List[ContrastiveGroup]:
    groups = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            groups.append(
                ContrastiveGroup(
                    anchor_id=rec["anchor_id"],
                    positives=[GroupEntry(**e) for e in rec["positives"]],
                    negatives=[GroupEntry(**e) for e in rec["negatives"]],
                )
            )
    return groups
