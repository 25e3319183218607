"""Leave-one-out ranking evaluation with popularity-sampled negatives."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .data import DataError, PopularityDist, sample_negatives
from .model import forward_hidden, score_items


@dataclass
class RankingMetrics:
    hr: float
    ndcg: float
    mrr: float
    n: int
    count: int

    def record(self, split, seed):
        return {"split": split, "n": self.n, "hr": self.hr, "ndcg": self.ndcg,
                "mrr": self.mrr, "count": self.count, "seed": seed}


def rank_of_target(scores, target_position):
    """1-based rank of one candidate; ties rank it after every tied rival."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 0 <= target_position < scores.size:
        raise ValueError(
            f"target position {target_position} outside 0..{scores.size - 1}")
    s = scores[target_position]
    greater = int((scores > s).sum())
    tied_others = int((scores == s).sum()) - 1
    return 1 + greater + tied_others


def metrics_at_n(ranks, n):
    """HR/NDCG/MRR at cutoff ``n`` averaged over 1-based ranks."""
    ranks = list(ranks)
    if not ranks:
        raise ValueError("metrics_at_n: empty rank list")
    if any(r < 1 for r in ranks):
        raise ValueError("ranks must be >= 1")
    hr = ndcg = mrr = 0.0
    for r in ranks:
        if r <= n:
            hr += 1.0
            ndcg += 1.0 / np.log2(r + 1.0)
            mrr += 1.0 / r
    count = len(ranks)
    return RankingMetrics(hr / count, ndcg / count, mrr / count, n, count)


def example_rng(seed, user, split):
    """Per-example generator fixed by (seed, user, split): parallel or
    repeated evaluation order can never change the drawn negatives."""
    tag = int(hashlib.sha256(split.encode()).hexdigest()[:8], 16)
    return np.random.default_rng(np.random.SeedSequence((seed, user, tag)))


def evaluate_split(params, cfg, dataset, split, num_negatives=100, cutoff=10,
                   seed=0, arch=None, batch_size=256):
    """Rank each example's target against popularity-sampled negatives.

    Negatives exclude the user's own interacted items and are redrawn
    identically for a given (seed, user, split), so per-epoch validation
    comparisons are paired.
    """
    examples = dataset.split_examples(split)
    if not examples:
        raise DataError(f"split {split!r} has no examples")
    dist = PopularityDist(dataset.item_counts)

    ranks = []
    with nk.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            inputs = np.array([ex.input for ex in chunk], dtype=np.intp)
            cands = np.empty((len(chunk), 1 + num_negatives), dtype=np.intp)
            for i, ex in enumerate(chunk):
                rng = example_rng(seed, ex.user, split)
                negs = sample_negatives(dist, dataset.user_items(ex.user), num_negatives, rng)
                cands[i, 0] = ex.target
                cands[i, 1:] = negs
            hidden = forward_hidden(inputs, params, cfg, arch=arch,
                                    item_features=dataset.item_features or None)
            _, raw = score_items(hidden, cands, params)
            for row in raw.data:
                ranks.append(rank_of_target(row, 0))
    return metrics_at_n(ranks, cutoff)
