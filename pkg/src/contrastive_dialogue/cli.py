"""Config-driven pipeline orchestration.

Stages: prepare -> build-index -> sample -> pretrain -> train -> generate ->
evaluate, plus `ablate` which reruns the contrastive stage under each
framework variant and tabulates the metric deltas.  Every stage reads one
YAML config (flags can override individual keys with --set a.b=c), writes
its artifacts under <workdir>/<stage>/, and records a provenance file with
the config hash and input-file hashes so reruns are checkable.
"""

import argparse
import copy
import hashlib
import json
import os
import pickle
import sys
from typing import Dict, List, Optional

import yaml

from . import __version__
from .corpus import Vocab, build_vocab, load_dataset, tokenize_corpus
from .matcher import CosineMatcher, EmbeddingTable
from .metrics import evaluate_model
from .models import (
    DecodeConfig,
    ModelConfig,
    build_model,
    generate,
    load_checkpoint,
    save_checkpoint,
    snapshot_reference,
)
from .contrastive import LossConfig, TrainConfig, train_contrastive, train_mle
from .sampler import SamplerConfig, build_sampler_state, load_groups, sample_corpus
from .synthbench import SynthSpec, generate_corpus, topic_embeddings, write_corpus

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "workdir": "runs/default",
    "workers": 1,
    "data": {
        "source": "synthetic",  # synthetic | files
        "train": None,
        "valid": None,
        "test": None,
        "vocab_cap": 40000,
        "min_freq": 1,
        "max_context_len": 64,
        "synthetic": {
            "topics": 20,
            "responses_per_context": 5,
            "contexts_per_response": 3,
            "generic_rate": 0.4,
            "vocab_size": 400,
            "embedding_dim": 16,
            "split_sizes": [1600, 200, 200],
        },
    },
    "embeddings": {"path": None, "dim": 300},
    "model": {"arch": "seq2seq", "emb_dim": 32, "hidden": 64, "layers": 1, "heads": 2},
    "sampler": {"k": 3, "pool_size": 100, "pad_size": 50},
    "loss": {"variant": "weighted", "eps": 1e-7},
    "pretrain": {"lr": 0.001, "batch_size": 128, "max_epochs": 50, "patience": 5,
                 "validations_per_epoch": 2},
    "train": {"lr": 0.001, "batch_size": 128, "max_epochs": 50, "patience": 5,
              "validations_per_epoch": 2, "holdout_fraction": 0.1},
    "decode": {"strategy": "greedy", "beam_width": 1, "max_len": 32},
}

STAGES = ["prepare", "build-index", "sample", "pretrain", "train", "generate", "evaluate"]


class StageError(RuntimeError):
    """Missing dependency artifact or invalid configuration."""


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: Optional[str], overrides: List[str] = ()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path, encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise StageError(f"config {path} must be a mapping")
        cfg = _deep_merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise StageError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                node[p] = {}
            node = node[p]
        val = yaml.safe_load(raw)
        if isinstance(val, str):
            # YAML 1.1 misses bare scientific notation like "1e-6"
            try:
                val = float(val)
            except ValueError:
                pass
        node[parts[-1]] = val
    return cfg


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _stage_dir(cfg: dict, stage: str) -> str:
    d = os.path.join(cfg["workdir"], stage)
    os.makedirs(d, exist_ok=True)
    return d


def _write_provenance(cfg: dict, stage: str, inputs: List[str]) -> None:
    rec = {
        "stage": stage,
        "version": __version__,
        "config_hash": _config_hash(cfg),
        "input_hashes": {p: _file_hash(p) for p in inputs if p and os.path.exists(p)},
    }
    with open(os.path.join(_stage_dir(cfg, stage), "provenance.json"), "w") as f:
        json.dump(rec, f, indent=1)


def _require(path: str, produced_by: str) -> str:
    if not os.path.exists(path):
        raise StageError(f"missing artifact {path}; run the `{produced_by}` stage first")
    return path


def _prepare_paths(cfg: dict) -> Dict[str, str]:
    d = os.path.join(cfg["workdir"], "prepare")
    return {
        "train": os.path.join(d, "train.jsonl"),
        "valid": os.path.join(d, "valid.jsonl"),
        "test": os.path.join(d, "test.jsonl"),
        "vocab": os.path.join(d, "vocab.txt"),
        "embeddings": os.path.join(d, "embeddings.txt"),
    }


def _load_prepared(cfg: dict):
    paths = _prepare_paths(cfg)
    for key in ("train", "valid", "test", "vocab", "embeddings"):
        _require(paths[key], "prepare")
    vocab = Vocab.load(paths["vocab"])
    table = EmbeddingTable.load(paths["embeddings"])
    splits = {name: load_dataset(paths[name], name) for name in ("train", "valid", "test")}
    max_len = cfg["data"]["max_context_len"]
    tokenized = {name: tokenize_corpus(pairs, vocab, max_len) for name, pairs in splits.items()}
    return vocab, table, splits, tokenized


def stage_prepare(cfg: dict) -> None:
    d = _stage_dir(cfg, "prepare")
    paths = _prepare_paths(cfg)
    data = cfg["data"]
    synth_dim = None
    if data["source"] == "synthetic":
        syn = dict(data["synthetic"])
        syn["split_sizes"] = tuple(syn["split_sizes"])
        synth_dim = syn.pop("embedding_dim", 16)
        corpus = generate_corpus(SynthSpec(seed=cfg["seed"], **syn))
        write_corpus(corpus, d)
    elif data["source"] == "files":
        for name in ("train", "valid", "test"):
            src = data.get(name)
            if not src or not os.path.exists(src):
                raise StageError(f"data.{name} must point to an existing dataset file")
            pairs = load_dataset(src, name)
            from .corpus import save_dataset

            save_dataset(pairs, paths[name])
    else:
        raise StageError(f"unknown data.source {data['source']!r}")
    train_pairs = load_dataset(paths["train"], "train")
    vocab = build_vocab(train_pairs, cap=data["vocab_cap"], min_freq=data["min_freq"])
    vocab.save(paths["vocab"])
    if cfg["embeddings"]["path"]:
        table = EmbeddingTable.load(cfg["embeddings"]["path"])
    elif synth_dim is not None:
        table = topic_embeddings(vocab.itos, dim=synth_dim, seed=cfg["seed"])
    else:
        table = EmbeddingTable.random(
            vocab.itos, dim=cfg["embeddings"]["dim"], seed=cfg["seed"]
        )
    table.save(paths["embeddings"])
    _write_provenance(cfg, "prepare", list(paths.values()))
    print(f"prepare: {len(train_pairs)} train pairs, vocab size {len(vocab)}")


def _build_state(cfg: dict, vocab, table, tokenized_train):
    matcher = CosineMatcher(table)
    scfg = SamplerConfig(seed=cfg["seed"], **cfg["sampler"])
    return build_sampler_state(tokenized_train, vocab, matcher, scfg)


def stage_build_index(cfg: dict) -> None:
    d = _stage_dir(cfg, "build-index")
    vocab, table, _, tokenized = _load_prepared(cfg)
    state = _build_state(cfg, vocab, table, tokenized["train"])
    out = os.path.join(d, "indexes.pkl")
    with open(out, "wb") as f:
        pickle.dump({"context": state.context_index, "response": state.response_index}, f)
    _write_provenance(cfg, "build-index", [out])
    print(f"build-index: {state.context_index.n_docs} documents per side")


def stage_sample(cfg: dict) -> None:
    d = _stage_dir(cfg, "sample")
    vocab, table, _, tokenized = _load_prepared(cfg)
    state = _build_state(cfg, vocab, table, tokenized["train"])
    out = os.path.join(d, "groups.jsonl")
    groups = sample_corpus(state, out)
    _write_provenance(cfg, "sample", [out])
    print(f"sample: cached {len(groups)} groups (k={state.config.k}) to {out}")


def stage_pretrain(cfg: dict) -> None:
    d = _stage_dir(cfg, "pretrain")
    vocab, _, _, tokenized = _load_prepared(cfg)
    import torch

    torch.manual_seed(cfg["seed"])
    model = build_model(
        ModelConfig(vocab_size=len(vocab), **cfg["model"]), seed=cfg["seed"]
    )
    tcfg = TrainConfig(seed=cfg["seed"], **cfg["pretrain"])
    summary = train_mle(model, tokenized["train"], tokenized["valid"], tcfg, run_dir=d, vocab=vocab)
    ckpt = os.path.join(d, "model.ckpt")
    save_checkpoint(model, vocab, ckpt)
    with open(os.path.join(d, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1)
    _write_provenance(cfg, "pretrain", [ckpt])
    print(f"pretrain: best val loss {summary['best_val_loss']:.4f} after {summary['steps']} steps")


def stage_train(cfg: dict, loss_cfg: Optional[LossConfig] = None, stage_name: str = "train") -> dict:
    d = _stage_dir(cfg, stage_name)
    vocab, _, _, tokenized = _load_prepared(cfg)
    ckpt = _require(os.path.join(cfg["workdir"], "pretrain", "model.ckpt"), "pretrain")
    cache = _require(os.path.join(cfg["workdir"], "sample", "groups.jsonl"), "sample")
    import torch

    torch.manual_seed(cfg["seed"])
    target = load_checkpoint(ckpt, vocab)
    reference = snapshot_reference(target)
    groups = load_groups(cache)
    tr = dict(cfg["train"])
    holdout = tr.pop("holdout_fraction")
    n_val = max(1, int(len(groups) * holdout))
    train_groups, val_groups = groups[:-n_val], groups[-n_val:]
    corpus = {p.id: p for p in tokenized["train"]}
    if loss_cfg is None:
        loss_cfg = LossConfig(k=cfg["sampler"]["k"], **cfg["loss"])
    tcfg = TrainConfig(seed=cfg["seed"], **tr)
    summary = train_contrastive(
        target, reference, train_groups, val_groups, corpus, loss_cfg, tcfg,
        run_dir=d, vocab=vocab,
    )
    out_ckpt = os.path.join(d, "model.ckpt")
    save_checkpoint(target, vocab, out_ckpt)
    with open(os.path.join(d, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1)
    _write_provenance(cfg, stage_name, [out_ckpt, cache])
    print(
        f"{stage_name}: best val loss {summary['best_val_loss']:.4f} "
        f"({summary['validations']} validations)"
    )
    return summary


def _resolve_checkpoint(cfg: dict, which: str) -> str:
    staged = os.path.join(cfg["workdir"], which, "model.ckpt")
    if os.path.exists(staged) or os.path.isdir(os.path.join(cfg["workdir"], which)):
        return _require(staged, which)
    return _require(which, "train")


def stage_generate(cfg: dict, checkpoint: str = "train") -> str:
    d = _stage_dir(cfg, "generate")
    vocab, _, _, tokenized = _load_prepared(cfg)
    model = load_checkpoint(_resolve_checkpoint(cfg, checkpoint), vocab)
    decode = DecodeConfig(**cfg["decode"])
    out = os.path.join(d, f"hypotheses-{checkpoint.replace(os.sep, '_')}.jsonl")
    with open(out, "w", encoding="utf-8") as f:
        for p in tokenized["test"]:
            hyp = generate(model, p.context_flat, decode)
            f.write(
                json.dumps(
                    {
                        "context": " ".join(vocab.decode(p.context_flat)),
                        "reference": " ".join(vocab.decode(p.response[:-1])),
                        "hypothesis": " ".join(vocab.decode(hyp)),
                    }
                )
                + "\n"
            )
    _write_provenance(cfg, "generate", [out])
    print(f"generate: wrote {len(tokenized['test'])} hypotheses to {out}")
    return out


def stage_evaluate(cfg: dict, checkpoint: str = "train", tag: Optional[str] = None) -> dict:
    d = _stage_dir(cfg, "evaluate")
    vocab, table, _, tokenized = _load_prepared(cfg)
    model = load_checkpoint(_resolve_checkpoint(cfg, checkpoint), vocab)
    decode = DecodeConfig(**cfg["decode"])
    train_responses = [vocab.decode(p.response[:-1]) for p in tokenized["train"]]
    report = evaluate_model(
        model, tokenized["test"], vocab, table, train_responses, decode=decode
    )
    tag = tag or checkpoint.replace(os.sep, "_")
    report_path = os.path.join(d, f"report-{tag}.txt")
    report.save(report_path, os.path.join(d, f"manifest-{tag}.jsonl"))
    _write_provenance(cfg, "evaluate", [report_path])
    scores = report.as_percent()
    print(f"evaluate[{tag}]: " + " ".join(f"{k}={v:.3f}" for k, v in scores.items()))
    return scores


ABLATION_ROWS = [
    ("full", None),
    ("no_group", "no_group"),
    ("no_pos_group", "no_pos_group"),
    ("no_neg_group", "no_neg_group"),
    ("no_response_side", "no_response_side"),
    ("no_context_side", "no_context_side"),
    ("no_scores", "no_scores"),
]


def stage_ablate(cfg: dict) -> List[dict]:
    d = _stage_dir(cfg, "ablate")
    k = cfg["sampler"]["k"]
    rows = []
    for name, switch in ABLATION_ROWS:
        loss_cfg = (
            LossConfig(k=k, **cfg["loss"]) if switch is None else LossConfig.ablation(switch, k)
        )
        stage_name = os.path.join("ablate", name)
        stage_train(cfg, loss_cfg=loss_cfg, stage_name=stage_name)
        scores = stage_evaluate(cfg, checkpoint=stage_name, tag=f"ablate-{name}")
        rows.append({"variant": name, **scores})
    table_path = os.path.join(d, "comparison.json")
    with open(table_path, "w") as f:
        json.dump(rows, f, indent=1)
    cols = ["variant", "bleu_1", "dist_1", "dist_2", "coherence"]
    print("  ".join(f"{c:>16}" for c in cols))
    for row in rows:
        print(
            "  ".join(
                f"{row[c]:>16}" if c == "variant" else f"{row[c]:>16.3f}" for c in cols
            )
        )
    print(f"ablate: comparison table at {table_path}")
    return rows


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cdial", description="Group-wise contrastive dialogue learning pipeline"
    )
    parser.add_argument("command", choices=STAGES + ["ablate", "run-all", "show-config"])
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted path)")
    parser.add_argument("--workers", type=int, help="override the workers setting")
    parser.add_argument("--seed", type=int, help="override the seed")
    parser.add_argument("--checkpoint", default="train",
                        help="checkpoint stage or path for generate/evaluate")
    args = parser.parse_args(argv)
    overrides = list(args.set)
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "show-config":
            yaml.safe_dump(cfg, sys.stdout, sort_keys=False)
            return 0
        if args.command == "run-all":
            stage_prepare(cfg)
            stage_build_index(cfg)
            stage_sample(cfg)
            stage_pretrain(cfg)
            stage_train(cfg)
            stage_generate(cfg)
            stage_evaluate(cfg, checkpoint="pretrain")
            stage_evaluate(cfg, checkpoint="train")
            return 0
        handler = {
            "prepare": stage_prepare,
            "build-index": stage_build_index,
            "sample": stage_sample,
            "pretrain": stage_pretrain,
            "train": stage_train,
            "ablate": stage_ablate,
        }.get(args.command)
        if handler:
            handler(cfg)
        elif args.command == "generate":
            stage_generate(cfg, checkpoint=args.checkpoint)
        elif args.command == "evaluate":
            stage_evaluate(cfg, checkpoint=args.checkpoint)
        return 0
    except (StageError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
