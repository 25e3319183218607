"""Interaction logs, chronological splits, negative sampling, synthetic logs.

The leave-one-out convention: per user with n >= 3 retained events, the last
item is the test target, the second-last the validation target, and every
earlier position from the second item on becomes one training target over
its own prefix. Inputs are left-padded with item index 0 to a fixed length,
so the most recent item always sits in the final slot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD = 0  # reserved item index, never assigned to a real item


class DataError(RuntimeError):
    """Input data cannot support the requested operation."""


class ParseError(DataError):
    def __init__(self, message, line_number):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class SamplingError(DataError):
    """Not enough candidate items to draw the requested sample."""


@dataclass
class ParseFormat:
    """Layout of a one-event-per-line interaction file."""

    delimiter: str = "\t"
    columns: tuple[str, ...] = ("user", "item", "timestamp")
    header: bool = False

    @classmethod
    def movielens_1m(cls):
        # UserID::MovieID::Rating::Timestamp, rating ignored
        return cls(delimiter="::", columns=("user", "item", "rating", "timestamp"))


@dataclass
class InteractionLog:
    """Raw events plus bijective id <-> dense index maps (indices start at 1)."""

    events: list  # (user_id, item_id, timestamp, features-or-None)
    user_index: dict
    item_index: dict
    users: list  # users[idx] = id, users[0] is None
    items: list
    item_features: dict = field(default_factory=dict)  # item idx -> tuple of codes

    @property
    def num_users(self):
        return len(self.users) - 1

    @property
    def num_items(self):
        return len(self.items) - 1

    def indexed_events(self):
        """Yield (user_idx, item_idx, timestamp) in file order."""
        ui, ii = self.user_index, self.item_index
        for user, item, ts, _ in self.events:
            yield ui[user], ii[item], ts


def parse_interactions(source, fmt=None):
    """Read an interaction log from a path, text stream, or byte stream."""
    fmt = fmt or ParseFormat()
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return parse_interactions(fh, fmt)

    col = {name: i for i, name in enumerate(fmt.columns)}
    for required in ("user", "item", "timestamp"):
        if required not in col:
            raise ValueError(f"format is missing a {required!r} column")
    ncols = len(fmt.columns)

    events = []
    user_index, item_index = {}, {}
    users, items = [None], [None]
    for lineno, raw in enumerate(source, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        line = raw.rstrip("\r\n")
        if fmt.header and lineno == 1:
            continue
        if not line:
            continue
        parts = line.split(fmt.delimiter)
        if len(parts) != ncols:
            raise ParseError(f"expected {ncols} fields, got {len(parts)}", lineno)
        try:
            ts = int(parts[col["timestamp"]])
        except ValueError:
            raise ParseError(f"non-integer timestamp {parts[col['timestamp']]!r}", lineno) from None
        user, item = parts[col["user"]], parts[col["item"]]
        if user not in user_index:
            user_index[user] = len(users)
            users.append(user)
        if item not in item_index:
            item_index[item] = len(items)
            items.append(item)
        events.append((user, item, ts, None))
    return InteractionLog(events, user_index, item_index, users, items)


def filter_users(log, min_interactions):
    """Keep users with at least ``min_interactions`` events; reindex survivors."""
    if min_interactions < 1:
        raise ValueError(f"min_interactions must be >= 1, got {min_interactions}")
    counts = {}
    for user, _, _, _ in log.events:
        counts[user] = counts.get(user, 0) + 1
    keep = {u for u, c in counts.items() if c >= min_interactions}

    events = [ev for ev in log.events if ev[0] in keep]
    user_index, item_index = {}, {}
    users, items = [None], [None]
    for user, item, _, _ in events:
        if user not in user_index:
            user_index[user] = len(users)
            users.append(user)
        if item not in item_index:
            item_index[item] = len(items)
            items.append(item)
    features = {}
    if log.item_features:
        for item_id, idx in item_index.items():
            old = log.item_features.get(log.item_index[item_id])
            if old is not None:
                features[idx] = old
    return InteractionLog(events, user_index, item_index, users, items, features)


@dataclass
class Example:
    user: int
    input: tuple  # item indices, length T, left-padded with PAD
    target: int
    split: str  # train | val | test


@dataclass
class SequenceDataset:
    """Per-user chronological sequences with leave-one-out examples."""

    max_len: int
    num_items: int
    user_sequences: dict  # user idx -> list of item indices, oldest first
    examples: list
    item_counts: np.ndarray  # index -> interaction count, item_counts[PAD] == 0
    item_features: dict = field(default_factory=dict)
    num_feature_fields: int = 0

    def split_examples(self, split):
        return [ex for ex in self.examples if ex.split == split]

    def user_items(self, user):
        return set(self.user_sequences[user])

    def save(self, path):
        """Write user sequences; examples are rebuilt deterministically on load."""
        with open(path, "w", encoding="utf-8") as fh:
            header = {
                "max_len": self.max_len,
                "num_items": self.num_items,
                "item_counts": self.item_counts.tolist(),
                "num_feature_fields": self.num_feature_fields,
            }
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            if self.item_features:
                feats = {str(k): list(v) for k, v in sorted(self.item_features.items())}
                fh.write(json.dumps({"item_features": feats}, sort_keys=True) + "\n")
            for user in sorted(self.user_sequences):
                fh.write(json.dumps({"user": user, "items": self.user_sequences[user]}) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            sequences = {}
            features = {}
            for line in fh:
                rec = json.loads(line)
                if "item_features" in rec:
                    features = {int(k): tuple(v) for k, v in rec["item_features"].items()}
                    continue
                sequences[rec["user"]] = list(rec["items"])
        ds = _dataset_from_sequences(
            sequences, header["max_len"], header["num_items"],
            np.asarray(header["item_counts"], dtype=np.int64),
        )
        ds.item_features = features
        ds.num_feature_fields = header.get("num_feature_fields", 0)
        return ds


def _dataset_from_sequences(sequences, max_len, num_items, item_counts):
    examples = []
    for user in sorted(sequences):
        seq = sequences[user]
        n = len(seq)
        if n < 3:
            continue
        for t in range(1, n - 2):  # training prefixes, targets seq[1] .. seq[n-3]
            examples.append(Example(user, _pad_left(seq[:t], max_len), seq[t], "train"))
        examples.append(Example(user, _pad_left(seq[: n - 2], max_len), seq[n - 2], "val"))
        examples.append(Example(user, _pad_left(seq[: n - 1], max_len), seq[n - 1], "test"))
    return SequenceDataset(max_len, num_items, sequences, examples, item_counts)


def _pad_left(items, max_len):
    items = items[-max_len:]
    return tuple([PAD] * (max_len - len(items)) + list(items))


def build_sequences(log, max_len):
    """Chronological leave-one-out split with left-padded fixed-length inputs."""
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    per_user = {}
    for order, (u, i, ts) in enumerate(log.indexed_events()):
        per_user.setdefault(u, []).append((ts, order, i))
    sequences = {}
    for u, rows in per_user.items():
        rows.sort(key=lambda r: (r[0], r[1]))  # timestamp, ties by file order
        sequences[u] = [i for _, _, i in rows]

    counts = np.zeros(log.num_items + 1, dtype=np.int64)
    for seq in sequences.values():
        for i in seq:
            counts[i] += 1

    retained = {u: seq for u, seq in sequences.items() if len(seq) >= 3}
    ds = _dataset_from_sequences(retained, max_len, log.num_items, counts)
    ds.item_features = dict(log.item_features)
    ds.num_feature_fields = len(next(iter(log.item_features.values()))) if log.item_features else 0
    return ds


class PopularityDist:
    """Popularity-proportional sampler over real item indices."""

    def __init__(self, item_counts):
        counts = np.asarray(item_counts, dtype=np.float64)
        counts = counts.copy()
        counts[PAD] = 0.0
        total = counts.sum()
        if total <= 0:
            raise DataError("popularity distribution has no observed interactions")
        self.counts = counts
        self.probs = counts / total
        self.cumulative = np.cumsum(self.probs)

    def sample(self, exclude, n, rng):
        return sample_negatives(self, exclude, n, rng)


def sample_negatives(dist, exclude, n, rng):
    """Draw ``n`` distinct items, popularity-weighted, outside ``exclude``."""
    positive = np.nonzero(dist.counts > 0)[0]
    excluded = set(exclude)
    excluded.add(PAD)
    pool = [int(i) for i in positive if i not in excluded]
    if len(pool) < n:
        raise SamplingError(f"need {n} negatives but candidate pool has {len(pool)} items")

    chosen = []
    # rejection sampling is fast while the pool dwarfs the request
    if n * 3 <= len(pool):
        seen = set(excluded)
        for _ in range(40):
            draws = np.searchsorted(dist.cumulative, rng.random(2 * (n - len(chosen))), side="right")
            for item in draws:
                item = int(item)
                if item not in seen:
                    seen.add(item)
                    chosen.append(item)
                    if len(chosen) == n:
                        return chosen

    # exact renormalized draws over the remaining candidates
    remaining = [i for i in pool if i not in set(chosen)]
    weights = dist.counts[remaining]
    extra = rng.choice(len(remaining), size=n - len(chosen), replace=False, p=weights / weights.sum())
    chosen.extend(int(remaining[k]) for k in extra)
    return chosen


def synthesize_log(num_users, seq_len, vocab, k_star, noise_rate, rng):
    """Generate sequences whose next item is a fixed function of the last
    ``k_star`` items: after a random seed prefix, each transition follows
    next = ((a + b) mod vocab) + 1 where a is the previous item and b the
    item ``k_star`` steps back, each replaced by a uniform random item with
    probability ``noise_rate``.

    Item ids are the dense indices themselves, so the planted rule can be
    checked directly on indexed sequences.
    """
    if not 1 <= k_star < seq_len:
        raise ValueError(f"k_star must be in [1, seq_len), got {k_star}")
    if vocab < 4:
        raise ValueError(f"vocab must be >= 4, got {vocab}")
    if not 0.0 <= noise_rate < 1.0:
        raise ValueError(f"noise_rate must be in [0, 1), got {noise_rate}")

    events = []
    for u in range(1, num_users + 1):
        seq = list(rng.integers(1, vocab + 1, size=k_star))
        while len(seq) < seq_len:
            nxt = planted_next(seq[-1], seq[-k_star], vocab)
            if noise_rate > 0.0 and rng.random() < noise_rate:
                nxt = int(rng.integers(1, vocab + 1))
            seq.append(nxt)
        user_id = f"u{u}"
        for t, item in enumerate(seq, start=1):
            events.append((user_id, str(item), t, None))

    user_index = {f"u{u}": u for u in range(1, num_users + 1)}
    users = [None] + [f"u{u}" for u in range(1, num_users + 1)]
    item_index = {str(i): i for i in range(1, vocab + 1)}
    items = [None] + [str(i) for i in range(1, vocab + 1)]
    return InteractionLog(events, user_index, item_index, users, items)


def planted_next(prev_item, lookback_item, vocab):
    """The planted transition rule on 1-based item indices."""
    return (prev_item + lookback_item) % vocab + 1
