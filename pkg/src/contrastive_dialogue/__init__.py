"""Group-wise contrastive training for small neural dialogue generators.

Pipeline: load or synthesize a context-response corpus, mine contrastive
groups with BM25 retrieval plus a matching model, MLE-pretrain a generator,
snapshot it as a frozen reference, fine-tune against the reference with a
matching-score-weighted contrastive objective, and evaluate with standard
dialogue generation metrics.
"""

__version__ = "0.1.0"
