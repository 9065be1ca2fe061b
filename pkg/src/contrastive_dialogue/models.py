"""Toy-scale conditional sequence generators.

Two architectures are provided behind one interface: an LSTM
sequence-to-sequence model with dot-product attention, and a small
transformer encoder-decoder.  Both expose exact teacher-forced conditional
log-probabilities (the quantity the contrastive objective differences),
greedy/beam generation, and checkpointing tied to a vocab hash.
"""

import copy
import hashlib
import math
from dataclasses import dataclass, asdict
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import BOS_ID, EOS_ID, PAD_ID, TokenizedPair, Vocab


@dataclass
class ModelConfig:
    vocab_size: int
    arch: str = "seq2seq"  # seq2seq | transformer
    emb_dim: int = 32
    hidden: int = 64
    layers: int = 1
    heads: int = 2
    max_decode_len: int = 32
    dtype: str = "float32"

    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass
class DecodeConfig:
    strategy: str = "greedy"  # greedy | beam
    beam_width: int = 1
    max_len: int = 32

    def __post_init__(self):
        if self.max_len < 1 or self.beam_width < 1:
            raise ValueError("max_len and beam_width must be >= 1")


def vocab_hash(vocab: Vocab) -> str:
    return hashlib.sha256("\n".join(vocab.itos).encode("utf-8")).hexdigest()


class Seq2SeqAttention(nn.Module):
    """Unidirectional LSTM encoder-decoder with Luong dot attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.emb_dim, padding_idx=PAD_ID)
        self.encoder = nn.LSTM(cfg.emb_dim, cfg.hidden, cfg.layers, batch_first=True)
        self.decoder = nn.LSTM(cfg.emb_dim, cfg.hidden, cfg.layers, batch_first=True)
        self.attn_out = nn.Linear(2 * cfg.hidden, cfg.hidden)
        self.proj = nn.Linear(cfg.hidden, cfg.vocab_size)

    def forward(self, ctx: torch.Tensor, ctx_mask: torch.Tensor, resp_in: torch.Tensor):
        # pack so the final encoder state ignores context padding
        lengths = ctx_mask.sum(dim=1).cpu()
        packed = nn.utils.rnn.pack_padded_sequence(
            self.embed(ctx), lengths, batch_first=True, enforce_sorted=False
        )
        enc_packed, state = self.encoder(packed)
        enc_out, _ = nn.utils.rnn.pad_packed_sequence(
            enc_packed, batch_first=True, total_length=ctx.size(1)
        )
        dec_out, _ = self.decoder(self.embed(resp_in), state)
        # dot attention over encoder states, padding masked out
        scores = dec_out @ enc_out.transpose(1, 2)  # [B, T_dec, T_enc]
        scores = scores.masked_fill(~ctx_mask.unsqueeze(1), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        context_vec = attn @ enc_out
        mixed = torch.tanh(self.attn_out(torch.cat([dec_out, context_vec], dim=-1)))
        return self.proj(mixed)


class TransformerED(nn.Module):
    """Small transformer encoder-decoder with learned positions."""

    MAX_POS = 512

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        self.embed = nn.Embedding(cfg.vocab_size, d, padding_idx=PAD_ID)
        self.pos = nn.Embedding(self.MAX_POS, d)
        self.core = nn.Transformer(
            d_model=d,
            nhead=cfg.heads,
            num_encoder_layers=cfg.layers,
            num_decoder_layers=cfg.layers,
            dim_feedforward=2 * d,
            dropout=0.0,
            batch_first=True,
        )
        self.proj = nn.Linear(d, cfg.vocab_size)

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(ids.size(1), device=ids.device)
        return self.embed(ids) + self.pos(positions)[None, :, :]

    def forward(self, ctx: torch.Tensor, ctx_mask: torch.Tensor, resp_in: torch.Tensor):
        t = resp_in.size(1)
        causal = torch.triu(
            torch.full((t, t), float("-inf"), dtype=self.proj.weight.dtype), diagonal=1
        )
        out = self.core(
            self._embed(ctx),
            self._embed(resp_in),
            src_key_padding_mask=~ctx_mask,
            memory_key_padding_mask=~ctx_mask,
            tgt_mask=causal,
        )
        return self.proj(out)


def build_model(cfg: ModelConfig, seed: int = 0) -> nn.Module:
    torch.manual_seed(seed)
    if cfg.arch == "seq2seq":
        model = Seq2SeqAttention(cfg)
    elif cfg.arch == "transformer":
        model = TransformerED(cfg)
    else:
        raise ValueError(f"unknown architecture {cfg.arch!r}")
    return model.to(cfg.torch_dtype())


def _pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> Tuple[torch.Tensor, torch.Tensor]:
    max_len = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), max_len), pad, dtype=torch.long)
    mask = torch.zeros(len(seqs), max_len, dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(list(s), dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


def batch_log_probs(
    model: nn.Module,
    contexts: Sequence[Sequence[int]],
    responses: Sequence[Sequence[int]],
) -> torch.Tensor:
    """Teacher-forced sum of token log-probs for each (context, response).

    Responses must be non-empty and EOS-terminated.  Differentiable in the
    model parameters; returns a [B] tensor of values <= 0.
    """
    for r in responses:
        if len(r) == 0 or r[-1] != EOS_ID:
            raise ValueError("responses must be non-empty and end with EOS")
    for seq in list(contexts) + list(responses):
        for t in seq:
            if not 0 <= t < model.cfg.vocab_size:
                raise ValueError(f"token id {t} outside vocab of size {model.cfg.vocab_size}")
    ctx, ctx_mask = _pad_batch(contexts)
    resp_in, _ = _pad_batch([[BOS_ID] + list(r)[:-1] for r in responses])
    resp_out, resp_mask = _pad_batch(responses)
    logits = model(ctx, ctx_mask, resp_in)
    logp = F.log_softmax(logits, dim=-1)
    tok_lp = logp.gather(-1, resp_out.unsqueeze(-1)).squeeze(-1)
    return (tok_lp * resp_mask.to(tok_lp.dtype)).sum(dim=1)


def cond_log_prob(model: nn.Module, context: Sequence[int], response: Sequence[int]) -> float:
    """log p(response | context) under teacher forcing, summed over tokens."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return batch_log_probs(model, [context], [response]).item()
    finally:
        model.train(was_training)


def mle_loss(model: nn.Module, batch: Sequence[TokenizedPair]) -> torch.Tensor:
    """Token-mean negative log-likelihood, averaged over the batch."""
    if not batch:
        raise ValueError("empty batch")
    lp = batch_log_probs(
        model, [p.context_flat for p in batch], [p.response for p in batch]
    )
    lengths = torch.tensor([len(p.response) for p in batch], dtype=lp.dtype)
    return (-lp / lengths).mean()


def generate(model: nn.Module, context: Sequence[int], decode: DecodeConfig = None) -> List[int]:
    """Decode a response for one context; output excludes BOS/EOS."""
    decode = decode or DecodeConfig()
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if decode.strategy == "greedy" or decode.beam_width == 1:
                return _greedy(model, context, decode.max_len)
            return _beam(model, context, decode.max_len, decode.beam_width)
    finally:
        model.train(was_training)


def _step_logp(model: nn.Module, ctx, ctx_mask, prefix: List[int]) -> torch.Tensor:
    resp_in = torch.tensor([[BOS_ID] + prefix], dtype=torch.long)
    logits = model(ctx, ctx_mask, resp_in)
    return F.log_softmax(logits[0, -1], dim=-1)


def _greedy(model: nn.Module, context: Sequence[int], max_len: int) -> List[int]:
    ctx, ctx_mask = _pad_batch([context])
    out: List[int] = []
    for _ in range(max_len):
        nxt = int(_step_logp(model, ctx, ctx_mask, out).argmax())
        if nxt == EOS_ID:
            break
        out.append(nxt)
    return out


def _beam(model: nn.Module, context: Sequence[int], max_len: int, width: int) -> List[int]:
    ctx, ctx_mask = _pad_batch([context])
    beams: List[Tuple[float, List[int], bool]] = [(0.0, [], False)]
    for _ in range(max_len):
        candidates: List[Tuple[float, List[int], bool]] = []
        for score, prefix, done in beams:
            if done:
                candidates.append((score, prefix, True))
                continue
            logp = _step_logp(model, ctx, ctx_mask, prefix)
            top = torch.topk(logp, min(width, logp.numel()))
            for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                if tok == EOS_ID:
                    candidates.append((score + lp, prefix, True))
                else:
                    candidates.append((score + lp, prefix + [tok], False))
        candidates.sort(key=lambda t: -t[0])
        beams = candidates[:width]
        if all(done for _, _, done in beams):
            break
    return max(beams, key=lambda t: t[0])[1]


def snapshot_reference(model: nn.Module) -> nn.Module:
    """Deep, frozen copy of the model: the contrastive reference."""
    ref = copy.deepcopy(model)
    ref.eval()
    for p in ref.parameters():
        p.requires_grad_(False)
    return ref


def save_checkpoint(model: nn.Module, vocab: Vocab, path: str) -> None:
    torch.save(
        {
            "config": asdict(model.cfg),
            "vocab_hash": vocab_hash(vocab),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path: str, vocab: Vocab) -> nn.Module:
    blob = torch.load(path, weights_only=True)
    if blob["vocab_hash"] != vocab_hash(vocab):
        raise ValueError(f"checkpoint {path} was trained with a different vocab")
    cfg = ModelConfig(**blob["config"])
    model = build_model(cfg)
    model.load_state_dict(blob["state_dict"])
    return model


def assert_finite(model: nn.Module) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"non-finite values in parameter {name}")
