"""Context-response matching on a [-1, 1] scale.

The default matcher is embedding-cosine over mean word vectors: deterministic,
training-free, and good enough to rank retrieval candidates.  A learned
bi-encoder (a linear projection on top of the same mean embeddings) is
available as an opt-in alternative.  Raw scores are clamped into the
weighting domains used by the contrastive loss: s+ in (0, 1] for positives
and s- in [-1, 0] for negatives.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

POSITIVE_FLOOR = 0.05  # keeps log(s+ * sigmoid) finite for nominal positives


class MatcherError(ValueError):
    pass


@dataclass(frozen=True)
class MatchScore:
    raw: float
    role: str  # "positive" | "negative"
    weighted: float


@dataclass
class EmbeddingTable:
    """Static word embeddings with a mean-vector OOV backoff."""

    vectors: Dict[str, np.ndarray]
    dim: int
    backoff: np.ndarray = None

    def __post_init__(self):
        if self.dim <= 0:
            raise MatcherError("embedding dimension must be positive")
        if self.backoff is None:
            if self.vectors:
                self.backoff = np.mean(list(self.vectors.values()), axis=0)
            else:
                self.backoff = np.zeros(self.dim)

    def lookup(self, token: str) -> np.ndarray:
        return self.vectors.get(token, self.backoff)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{len(self.vectors)} {self.dim}\n")
            for tok, vec in self.vectors.items():
                f.write(tok + " " + " ".join(f"{x:.6g}" for x in vec) + "\n")

    @classmethod
    def load(cls, path: str) -> "EmbeddingTable":
        with open(path, encoding="utf-8") as f:
            header = f.readline().split()
            if len(header) != 2:
                raise MatcherError(f"{path}: expected 'count dim' header line")
            count, dim = int(header[0]), int(header[1])
            vectors = {}
            for line in f:
                parts = line.rstrip("\n").split(" ")
                if len(parts) != dim + 1:
                    raise MatcherError(f"{path}: bad vector line for token {parts[0]!r}")
                vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
        if len(vectors) != count:
            raise MatcherError(f"{path}: header says {count} vectors, found {len(vectors)}")
        return cls(vectors=vectors, dim=dim)

    @classmethod
    def random(cls, tokens: Sequence[str], dim: int = 300, seed: int = 0) -> "EmbeddingTable":
        """Seed-fixed random table for synthetic corpora."""
        rng = np.random.default_rng(seed)
        vectors = {t: rng.standard_normal(dim) for t in sorted(set(tokens))}
        return cls(vectors=vectors, dim=dim)


def embed_utterance(tokens: Sequence[str], table: EmbeddingTable) -> np.ndarray:
    """Mean of token vectors; OOV tokens use the table's backoff vector."""
    if not tokens:
        raise MatcherError("cannot embed an empty token sequence")
    return np.mean([table.lookup(t) for t in tokens], axis=0)


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def to_positive_weight(raw: float) -> float:
    """Map a raw score to s+ in (0, 1] by flooring at POSITIVE_FLOOR."""
    if not -1.0 <= raw <= 1.0:
        raise MatcherError(f"raw score {raw} outside [-1, 1]")
    return max(raw, POSITIVE_FLOOR)


def to_negative_weight(raw: float) -> float:
    """Map a raw score to s- in [-1, 0]; a liked 'negative' is neutralized to 0."""
    if not -1.0 <= raw <= 1.0:
        raise MatcherError(f"raw score {raw} outside [-1, 1]")
    return min(raw, 0.0)


class CosineMatcher:
    """Deterministic default matcher: cosine between mean context/response embeddings.

    Optional per-side square projections (the trained bi-encoder head) are
    applied before the cosine; identity projections reduce to the plain
    cosine matcher.
    """

    def __init__(
        self,
        table: EmbeddingTable,
        ctx_projection: Optional[np.ndarray] = None,
        resp_projection: Optional[np.ndarray] = None,
    ):
        self.table = table
        self.ctx_projection = ctx_projection
        self.resp_projection = resp_projection

    def _embed(self, tokens: Sequence[str], projection: Optional[np.ndarray]) -> np.ndarray:
        v = embed_utterance(tokens, self.table)
        if projection is not None:
            v = projection @ v
        return v

    def score(self, context_tokens: Sequence[str], response_tokens: Sequence[str]) -> float:
        """Raw matching score in [-1, 1]."""
        if not context_tokens or not response_tokens:
            raise MatcherError("matcher inputs must be non-empty")
        return _cosine(
            self._embed(context_tokens, self.ctx_projection),
            self._embed(response_tokens, self.resp_projection),
        )

    def score_positive(self, ctx: Sequence[str], resp: Sequence[str]) -> MatchScore:
        raw = self.score(ctx, resp)
        return MatchScore(raw=raw, role="positive", weighted=to_positive_weight(raw))

    def score_negative(self, ctx: Sequence[str], resp: Sequence[str]) -> MatchScore:
        raw = self.score(ctx, resp)
        return MatchScore(raw=raw, role="negative", weighted=to_negative_weight(raw))


def train_biencoder(
    pairs: Sequence,
    table: EmbeddingTable,
    epochs: int = 20,
    batch_size: int = 16,
    lr: float = 0.05,
    seed: int = 0,
) -> CosineMatcher:
    """Learn a projection that scores ground-truth pairs above in-batch shuffles.

    `pairs` yields (context_tokens, response_tokens) tuples.  The head is a
    pair of square matrices (one per side) initialized at identity; the loss
    is a logistic ranking loss between each true pair and a shuffled pairing
    within the batch.  Scores stay in [-1, 1] because they remain cosines.
    """
    pairs = list(pairs)
    if len(pairs) < 2 * batch_size:
        raise MatcherError(
            f"need at least {2 * batch_size} pairs to train the bi-encoder, got {len(pairs)}"
        )
    import torch

    torch.manual_seed(seed)
    ctx_vecs = torch.tensor(
        np.stack([embed_utterance(c, table) for c, _ in pairs]), dtype=torch.float64
    )
    resp_vecs = torch.tensor(
        np.stack([embed_utterance(r, table) for _, r in pairs]), dtype=torch.float64
    )
    proj_c = torch.nn.Parameter(torch.eye(table.dim, dtype=torch.float64))
    proj_r = torch.nn.Parameter(torch.eye(table.dim, dtype=torch.float64))
    opt = torch.optim.Adam([proj_c, proj_r], lr=lr)
    n = len(pairs)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            c = torch.nn.functional.normalize(ctx_vecs[idx] @ proj_c.T, dim=1)
            r = torch.nn.functional.normalize(resp_vecs[idx] @ proj_r.T, dim=1)
            pos = (c * r).sum(dim=1)
            neg = (c * r[torch.roll(torch.arange(len(idx)), 1)]).sum(dim=1)
            loss = torch.nn.functional.softplus(neg - pos).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    return CosineMatcher(
        table,
        ctx_projection=proj_c.detach().numpy(),
        resp_projection=proj_r.detach().numpy(),
    )
