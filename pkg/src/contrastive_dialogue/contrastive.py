"""Contrastive objective and fine-tuning loop.

The central quantity is the difference

    d = log p_target(r | c) - log p_reference(r | c)

computed per (context, response) combination with teacher forcing.  Three
loss variants are implemented on top of it:

* pairwise: one positive and one negative per anchor,
  -log sigmoid(d+) - log(1 - sigmoid(d-));
* group: averaged over 2k+1 positives and 2k negatives, unit weights;
* weighted: the group form with each term weighted by its matching score,
  -mean log(s+ * sigmoid(d+)) - mean log(1 + s- * sigmoid(d-)).

Sigmoids are clamped to [eps, 1-eps] and inner log arguments floored at eps
so the loss stays finite while the gradient signs survive.  Ablation
switches reduce group membership before the loss sees it.
"""

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .corpus import TokenizedPair
from .models import assert_finite, batch_log_probs, mle_loss, save_checkpoint
from .sampler import ContrastiveGroup, GroupEntry

ABLATION_SWITCHES = (
    "no_group",
    "no_pos_group",
    "no_neg_group",
    "no_response_side",
    "no_context_side",
    "no_scores",
)


@dataclass
class LossConfig:
    variant: str = "weighted"  # pairwise | group | weighted
    eps: float = 1e-7
    k: int = 3
    no_group: bool = False
    no_pos_group: bool = False
    no_neg_group: bool = False
    no_response_side: bool = False
    no_context_side: bool = False
    no_scores: bool = False

    def __post_init__(self):
        if not 0.0 < self.eps < 0.01:
            raise ValueError("eps must lie in (0, 0.01)")
        if self.no_group and (self.no_pos_group or self.no_neg_group):
            raise ValueError("no_group already implies single positive/negative")
        if self.no_response_side and self.no_context_side:
            raise ValueError("cannot drop both sampling sides")

    @classmethod
    def ablation(cls, switch: str, k: int = 3) -> "LossConfig":
        if switch not in ABLATION_SWITCHES:
            raise ValueError(f"unknown ablation switch {switch!r}")
        cfg = cls(k=k, **{switch: True})
        if switch == "no_scores" or switch == "no_group":
            cfg.variant = "group" if switch == "no_scores" else "pairwise"
        return cfg


def _clamped_sigmoid(d: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.clamp(torch.sigmoid(d), eps, 1.0 - eps)


def positive_term(d: torch.Tensor, s: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """-mean log(s+ * sigmoid(d+)) over one group's positives."""
    return -torch.log(torch.clamp(s * _clamped_sigmoid(d, eps), min=eps)).mean()


def negative_term(d: torch.Tensor, s: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """-mean log(1 + s- * sigmoid(d-)) over one group's negatives."""
    return -torch.log(torch.clamp(1.0 + s * _clamped_sigmoid(d, eps), min=eps)).mean()


def weighted_group_loss(
    d_pos: torch.Tensor,
    s_pos: torch.Tensor,
    d_neg: torch.Tensor,
    s_neg: torch.Tensor,
    eps: float = 1e-7,
) -> torch.Tensor:
    """Score-weighted group loss for one anchor."""
    return positive_term(d_pos, s_pos, eps) + negative_term(d_neg, s_neg, eps)


def group_loss(d_pos: torch.Tensor, d_neg: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Unit-weight group loss (matching-score ablation path)."""
    return weighted_group_loss(
        d_pos, torch.ones_like(d_pos), d_neg, -torch.ones_like(d_neg), eps
    )


def pairwise_loss(d_pos: torch.Tensor, d_neg: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Single positive/negative loss; averages if given vectors of anchors."""
    s_p = _clamped_sigmoid(d_pos, eps)
    s_n = _clamped_sigmoid(d_neg, eps)
    return (-torch.log(s_p)).mean() + (-torch.log(1.0 - s_n)).mean()


def difference(
    target: torch.nn.Module,
    reference: torch.nn.Module,
    context: Sequence[int],
    response: Sequence[int],
) -> float:
    """d = log p_target(r|c) - log p_reference(r|c) for one pair."""
    if target.cfg.vocab_size != reference.cfg.vocab_size:
        raise ValueError("target and reference must share a vocabulary")
    with torch.no_grad():
        lp_t = batch_log_probs(target, [context], [response])
        lp_r = batch_log_probs(reference, [context], [response])
    return float(lp_t - lp_r)


def _entry_side(entry: GroupEntry, anchor_id: int) -> str:
    if entry.context_id == anchor_id and entry.response_id == anchor_id:
        return "anchor"
    return "response-side" if entry.context_id == anchor_id else "context-side"


def _single_negative(negatives: Sequence[GroupEntry]) -> List[GroupEntry]:
    return [min(negatives, key=lambda e: (e.raw, e.context_id, e.response_id))]


def apply_ablation(
    group: ContrastiveGroup, cfg: LossConfig
) -> Tuple[List[GroupEntry], List[GroupEntry]]:
    """Reduce a mined group to the member lists a loss variant trains on."""
    pos, neg = list(group.positives), list(group.negatives)
    if cfg.no_response_side:
        pos = [e for e in pos if _entry_side(e, group.anchor_id) != "response-side"]
        neg = [e for e in neg if _entry_side(e, group.anchor_id) != "response-side"]
    if cfg.no_context_side:
        pos = [e for e in pos if _entry_side(e, group.anchor_id) != "context-side"]
        neg = [e for e in neg if _entry_side(e, group.anchor_id) != "context-side"]
    if cfg.no_group or cfg.no_pos_group:
        pos = [e for e in pos if e.source == "anchor"]
    if cfg.no_group or cfg.no_neg_group:
        neg = _single_negative(neg)
    if not pos or not neg:
        raise ValueError(f"group {group.anchor_id}: ablation left an empty member list")
    return pos, neg


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 128  # anchors (groups) per optimizer step
    max_epochs: int = 50
    patience: int = 5  # non-improving validations before stopping
    validations_per_epoch: int = 2  # "every 0.5 epochs"
    seed: int = 0


class TrainingDiverged(RuntimeError):
    pass


def _write_log(log_path: Optional[str], rec: dict) -> None:
    if log_path:
        with open(log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(rec) + "\n")


def _group_batch_loss(
    target: torch.nn.Module,
    reference: torch.nn.Module,
    batch: Sequence[Tuple[List[GroupEntry], List[GroupEntry]]],
    corpus: Dict[int, TokenizedPair],
    cfg: LossConfig,
    grad: bool,
) -> Tuple[torch.Tensor, float, float]:
    """Loss over a batch of (positives, negatives) lists, plus mean d's.

    Each (context, response) combination is scored once even if several
    groups in the batch share it.
    """
    combos: Dict[Tuple[int, int], int] = {}
    for pos, neg in batch:
        for e in list(pos) + list(neg):
            combos.setdefault((e.context_id, e.response_id), len(combos))
    keys = list(combos)
    ctxs = [corpus[c].context_flat for c, _ in keys]
    resps = [corpus[r].response for _, r in keys]
    with torch.set_grad_enabled(grad):
        lp_t = batch_log_probs(target, ctxs, resps)
    with torch.no_grad():
        lp_r = batch_log_probs(reference, ctxs, resps)
    d_all = lp_t - lp_r.to(lp_t.dtype)

    losses, d_pos_all, d_neg_all = [], [], []
    for pos, neg in batch:
        d_p = d_all[[combos[(e.context_id, e.response_id)] for e in pos]]
        d_n = d_all[[combos[(e.context_id, e.response_id)] for e in neg]]
        d_pos_all.append(d_p.detach())
        d_neg_all.append(d_n.detach())
        if cfg.variant == "pairwise":
            losses.append(pairwise_loss(d_p, d_n, cfg.eps))
        elif cfg.variant == "group":
            losses.append(group_loss(d_p, d_n, cfg.eps))
        else:
            s_p = torch.tensor([e.weight for e in pos], dtype=d_p.dtype)
            s_n = torch.tensor([e.weight for e in neg], dtype=d_n.dtype)
            losses.append(weighted_group_loss(d_p, s_p, d_n, s_n, cfg.eps))
    loss = torch.stack(losses).mean()
    mean_d_pos = float(torch.cat(d_pos_all).mean())
    mean_d_neg = float(torch.cat(d_neg_all).mean())
    return loss, mean_d_pos, mean_d_neg


def evaluate_contrastive_loss(
    target, reference, groups, corpus, cfg: LossConfig, batch_size: int = 128
) -> Tuple[float, float, float]:
    """Validation loss plus mean d over positives/negatives."""
    members = [apply_ablation(g, cfg) for g in groups]
    total, dp, dn, n = 0.0, 0.0, 0.0, 0
    was_training = target.training
    target.eval()
    try:
        for start in range(0, len(members), batch_size):
            chunk = members[start : start + batch_size]
            loss, mdp, mdn = _group_batch_loss(target, reference, chunk, corpus, cfg, grad=False)
            total += float(loss) * len(chunk)
            dp += mdp * len(chunk)
            dn += mdn * len(chunk)
            n += len(chunk)
    finally:
        target.train(was_training)
    return total / n, dp / n, dn / n


def train_contrastive(
    target: torch.nn.Module,
    reference: torch.nn.Module,
    train_groups: Sequence[ContrastiveGroup],
    val_groups: Sequence[ContrastiveGroup],
    corpus: Dict[int, TokenizedPair],
    loss_cfg: LossConfig = None,
    train_cfg: TrainConfig = None,
    run_dir: Optional[str] = None,
    vocab=None,
) -> dict:
    """Fine-tune `target` against the frozen `reference` on cached groups.

    Validates every 1/validations_per_epoch epoch, keeps the best-validation
    parameters, and stops after `patience` non-improving validations.
    Returns a summary dict; the target is left holding the best parameters.
    """
    loss_cfg = loss_cfg or LossConfig()
    train_cfg = train_cfg or TrainConfig()
    if not train_groups:
        raise ValueError("empty group cache")
    members = [apply_ablation(g, loss_cfg) for g in train_groups]
    opt = torch.optim.Adam(target.parameters(), lr=train_cfg.lr)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    log_path = os.path.join(run_dir, "train_log.jsonl") if run_dir else None
    if log_path and os.path.exists(log_path):
        os.remove(log_path)

    n_batches = math.ceil(len(members) / train_cfg.batch_size)
    val_every = max(1, n_batches // train_cfg.validations_per_epoch)
    best_loss, best_state, bad, val_idx, step = float("inf"), None, 0, 0, 0
    history = []

    def validate() -> bool:
        nonlocal best_loss, best_state, bad, val_idx
        vloss, dp, dn = evaluate_contrastive_loss(
            target, reference, val_groups, corpus, loss_cfg, train_cfg.batch_size
        )
        history.append({"validation": val_idx, "loss": vloss, "mean_d_pos": dp, "mean_d_neg": dn})
        _write_log(
            log_path,
            {"step": step, "split": "valid", "loss": vloss, "mean_d_pos": dp,
             "mean_d_neg": dn, "lr": train_cfg.lr},
        )
        if run_dir:
            ckpt = os.path.join(run_dir, f"contrastive-{val_idx}.ckpt")
            save_checkpoint(target, vocab, ckpt)
        improved = vloss < best_loss - 1e-9
        if improved:
            best_loss = vloss
            best_state = {k: v.detach().clone() for k, v in target.state_dict().items()}
            bad = 0
            if run_dir:
                with open(os.path.join(run_dir, "best"), "w") as f:
                    f.write(f"contrastive-{val_idx}.ckpt\n")
        else:
            bad += 1
        val_idx += 1
        return bad >= train_cfg.patience

    stop = False
    for _ in range(train_cfg.max_epochs):
        order = torch.randperm(len(members), generator=gen).tolist()
        for start in range(0, len(members), train_cfg.batch_size):
            batch = [members[i] for i in order[start : start + train_cfg.batch_size]]
            loss, dp, dn = _group_batch_loss(target, reference, batch, corpus, loss_cfg, grad=True)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite contrastive loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            assert_finite(target)
            step += 1
            _write_log(
                log_path,
                {"step": step, "split": "train", "loss": float(loss.detach()), "mean_d_pos": dp,
                 "mean_d_neg": dn, "lr": train_cfg.lr},
            )
            if step % val_every == 0:
                stop = validate()
                if stop:
                    break
        if stop:
            break
    if val_idx == 0:
        validate()
    if best_state is not None:
        target.load_state_dict(best_state)
    return {"best_val_loss": best_loss, "validations": val_idx, "steps": step, "history": history}


def train_mle(
    model: torch.nn.Module,
    train_pairs: Sequence[TokenizedPair],
    val_pairs: Sequence[TokenizedPair],
    train_cfg: TrainConfig = None,
    run_dir: Optional[str] = None,
    vocab=None,
) -> dict:
    """MLE pretraining with the same Adam + early-stopping schedule."""
    train_cfg = train_cfg or TrainConfig()
    if not train_pairs:
        raise ValueError("empty training split")
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    log_path = os.path.join(run_dir, "pretrain_log.jsonl") if run_dir else None
    if log_path and os.path.exists(log_path):
        os.remove(log_path)
    n_batches = math.ceil(len(train_pairs) / train_cfg.batch_size)
    val_every = max(1, n_batches // train_cfg.validations_per_epoch)
    best_loss, best_state, bad, val_idx, step = float("inf"), None, 0, 0, 0

    def val_loss() -> float:
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                total = 0.0
                for start in range(0, len(val_pairs), train_cfg.batch_size):
                    chunk = val_pairs[start : start + train_cfg.batch_size]
                    total += float(mle_loss(model, chunk)) * len(chunk)
                return total / len(val_pairs)
        finally:
            model.train(was_training)

    def validate() -> bool:
        nonlocal best_loss, best_state, bad, val_idx
        vloss = val_loss()
        _write_log(log_path, {"step": step, "split": "valid", "loss": vloss, "lr": train_cfg.lr})
        if run_dir:
            save_checkpoint(model, vocab, os.path.join(run_dir, f"mle-{val_idx}.ckpt"))
        if vloss < best_loss - 1e-9:
            best_loss, bad = vloss, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if run_dir:
                with open(os.path.join(run_dir, "best"), "w") as f:
                    f.write(f"mle-{val_idx}.ckpt\n")
        else:
            bad += 1
        val_idx += 1
        return bad >= train_cfg.patience

    stop = False
    for _ in range(train_cfg.max_epochs):
        order = torch.randperm(len(train_pairs), generator=gen).tolist()
        for start in range(0, len(train_pairs), train_cfg.batch_size):
            batch = [train_pairs[i] for i in order[start : start + train_cfg.batch_size]]
            loss = mle_loss(model, batch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite MLE loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            _write_log(
                log_path,
                {"step": step, "split": "train", "loss": float(loss.detach()), "lr": train_cfg.lr},
            )
            if step % val_every == 0:
                stop = validate()
                if stop:
                    break
        if stop:
            break
    if val_idx == 0:
        validate()
    if best_state is not None:
        model.load_state_dict(best_state)
    return {"best_val_loss": best_loss, "validations": val_idx, "steps": step}
