"""Dataset loading, tokenization and vocabulary handling.

On-disk dataset format: UTF-8 JSON lines, one record per line with fields
`context` (list of utterance strings) and `response` (string).  Vocab files
are one token per line; the line number is the token index and the first
four lines are the reserved tokens in fixed order.
"""

import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SEP = "<sep>"
RESERVED = [PAD, UNK, BOS, EOS]
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

_PUNCT_RE = re.compile(r"([.,?!])")


class DatasetError(ValueError):
    """Malformed dataset file (bad schema, empty field, missing file)."""


@dataclass(frozen=True)
class DialoguePair:
    """One training instance: multi-turn context plus its response."""

    id: int
    context: List[str]
    response: str


@dataclass
class TokenizedPair:
    """Vocabulary-encoded form of a DialoguePair."""

    id: int
    context_turns: List[List[int]]
    context_flat: List[int]
    response: List[int]  # ends with EOS_ID


def word_tokenize(text: str) -> List[str]:
    """Lowercase whitespace tokenization with ., , ? ! detached."""
    return _PUNCT_RE.sub(r" \1 ", text.lower()).split()


@dataclass
class Vocab:
    itos: List[str] = field(default_factory=lambda: list(RESERVED) + [SEP])
    stoi: Dict[str, int] = None

    def __post_init__(self):
        if self.stoi is None:
            self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def sep_id(self) -> int:
        return self.stoi[SEP]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.itos[i] for i in ids]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.itos:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            itos = [line.rstrip("\n") for line in f]
        if itos[: len(RESERVED)] != RESERVED:
            raise DatasetError(f"vocab file {path} lacks the reserved token header")
        return cls(itos=itos)


def load_dataset(path: str, split: str = "train") -> List[DialoguePair]:
    """Read a JSONL dataset file into DialoguePairs with ids 0..N-1.

    Rejects malformed lines with the offending line number.
    """
    if not os.path.exists(path):
        raise DatasetError(f"dataset file not found: {path}")
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno} ({split}): invalid JSON: {e}") from e
            if not isinstance(rec, dict) or "context" not in rec or "response" not in rec:
                raise DatasetError(
                    f"{path}:{lineno} ({split}): record must have `context` and `response`"
                )
            ctx, resp = rec["context"], rec["response"]
            if (
                not isinstance(ctx, list)
                or not ctx
                or not all(isinstance(u, str) for u in ctx)
                or not isinstance(resp, str)
            ):
                raise DatasetError(
                    f"{path}:{lineno} ({split}): `context` must be a non-empty list of "
                    f"strings and `response` a string"
                )
            pairs.append(DialoguePair(id=len(pairs), context=list(ctx), response=resp))
    return pairs


def save_dataset(pairs: Sequence[DialoguePair], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps({"context": p.context, "response": p.response}) + "\n")


def build_vocab(pairs: Sequence[DialoguePair], cap: int = 40000, min_freq: int = 1) -> Vocab:
    """Frequency-ranked vocab with reserved tokens, capped at `cap` entries.

    Ties in frequency break by first occurrence order.
    """
    if not pairs:
        raise ValueError("cannot build a vocab from an empty corpus")
    if cap <= len(RESERVED):
        raise ValueError(f"vocab cap must exceed {len(RESERVED)}")
    counts: Counter = Counter()
    first_seen: Dict[str, int] = {}
    pos = 0
    for p in pairs:
        for utt in list(p.context) + [p.response]:
            for tok in word_tokenize(utt):
                counts[tok] += 1
                if tok not in first_seen:
                    first_seen[tok] = pos
                pos += 1
    itos = list(RESERVED) + [SEP]
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], first_seen[kv[0]]))
    for tok, freq in ranked:
        if len(itos) >= cap:
            break
        if freq < min_freq or tok == SEP:
            continue
        itos.append(tok)
    return Vocab(itos=itos)


def tokenize(pair: DialoguePair, vocab: Vocab, max_context_len: int = 64) -> TokenizedPair:
    """Encode one pair; flattened context truncates from the oldest turn."""
    turns = [vocab.encode(word_tokenize(u)) for u in pair.context]
    flat: List[int] = []
    for i, t in enumerate(turns):
        if i > 0:
            flat.append(vocab.sep_id)
        flat.extend(t)
    if len(flat) > max_context_len:
        flat = flat[-max_context_len:]
    resp = vocab.encode(word_tokenize(pair.response))
    if not resp:
        raise DatasetError(f"pair {pair.id}: response is empty after tokenization")
    return TokenizedPair(
        id=pair.id, context_turns=turns, context_flat=flat, response=resp + [EOS_ID]
    )


def tokenize_corpus(
    pairs: Sequence[DialoguePair], vocab: Vocab, max_context_len: int = 64
) -> List[TokenizedPair]:
    return [tokenize(p, vocab, max_context_len) for p in pairs]
