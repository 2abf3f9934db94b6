"""Independent brute-force oracles for metric verification.

These deliberately re-derive each quantity with a different implementation
(plain loops, sklearn for macro scores) so the production metrics are
checked against something they do not share code with.
"""

from __future__ import annotations

import string


def oracle_tokens(text: str) -> list[str]:
    out = []
    for raw_word in text.lower().split():
        word = "".join(ch for ch in raw_word if ch not in string.punctuation)
        for piece in word.split():
            if piece and piece not in ("a", "an", "the"):
                out.append(piece)
    return [w for w in " ".join(out).split() if w]


def oracle_token_f1(pred: str, gold: str) -> float:
    p, g = oracle_tokens(pred), oracle_tokens(gold)
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    remaining = list(g)
    overlap = 0
    for token in p:
        if token in remaining:
            remaining.remove(token)
            overlap += 1
    if overlap == 0:
        return 0.0
    precision = overlap / len(p)
    recall = overlap / len(g)
    return 2 * precision * recall / (precision + recall)


def oracle_macro(preds, golds):
    """(precision, recall, f1) macro over yes/no via sklearn."""
    from sklearn.metrics import precision_recall_fscore_support

    precision, recall, f1, _ = precision_recall_fscore_support(
        golds, preds, labels=["yes", "no"], average="macro", zero_division=0
    )
    return precision, recall, f1


def oracle_recall_at_k(ranks: list[int], k: int) -> float:
    hits = 0
    for r in ranks:
        if r <= k:
            hits += 1
    return hits / len(ranks)


def oracle_mrr(ranks: list[int]) -> float:
    total = 0.0
    for r in ranks:
        total += 1.0 / r
    return total / len(ranks)
