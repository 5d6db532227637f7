"""Datasets: synthetic multi-interest sequences and Taobao behavior-log ingestion.

Samples reference items by index into a shared ``ItemTable``. Synthetic items
carry a fixed embedding; Taobao items are represented by learned ID and
category embeddings owned by the model.
"""
from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
BEHAVIORS = ("pv", "buy", "cart", "fav")
FORMAT_TAG = "sumrec-dataset"
FORMAT_VERSION = 1


@dataclass
class ItemTable:
    raw_ids: List[str]
    categories: np.ndarray  # category index per item
    category_ids: List[str]
    vectors: Optional[np.ndarray] = None  # (n_items, D) when embeddings are fixed

    def __len__(self) -> int:
        return len(self.raw_ids)

    @property
    def learned(self) -> bool:
        return self.vectors is None


@dataclass
class Sample:
    user_id: str
    history: np.ndarray  # item indices, time-ascending
    timestamps: np.ndarray
    target: int
    label: int
    target_time: int = 0
    group: int = 0

    def __post_init__(self):
        if len(self.history) != len(self.timestamps):
            raise ValueError("history and timestamps differ in length")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) < 0):
            raise ValueError("history must be sorted by timestamp")


@dataclass
class Dataset:
    D: int
    items: ItemTable
    splits: Dict[str, List[Sample]] = field(default_factory=dict)

    def __getitem__(self, split: str) -> List[Sample]:
        return self.splits.get(split, [])

    def users(self, split: str) -> set:
        return {s.user_id for s in self[split]}


# ------------------------------------------------------------- popularity


class PopularitySampler:
    """Draws item indices with probability proportional to ``counts``."""

    def __init__(self, counts: Sequence[float], rng: np.random.Generator):
        counts = np.asarray(counts, dtype=np.float64)
        if counts.sum() <= 0:
            raise ValueError("popularity counts are all zero")
        self.p = counts / counts.sum()
        self.rng = rng

    def sample(self, n: int, exclude: Iterable[int] = ()) -> np.ndarray:
        exclude = set(int(e) for e in exclude)
        if exclude and self.p[list(exclude)].sum() >= 1.0 - 1e-12:
            raise ValueError("cannot sample: every popular item is excluded")
        out: List[int] = []
        while len(out) < n:
            for i in self.rng.choice(len(self.p), size=n - len(out), p=self.p):
                if int(i) not in exclude:
                    out.append(int(i))
        return np.array(out, dtype=np.int64)


def split_users(user_ids: Sequence[str], rng: np.random.Generator,
                fractions=(0.7, 0.15, 0.15)) -> Dict[str, str]:
    """Assign each user to train/valid/test by shuffled position."""
    users = sorted(set(user_ids))
    order = rng.permutation(len(users))
    n = len(users)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    assign = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            assign[users[idx]] = "train"
        elif pos < n_train + n_valid:
            assign[users[idx]] = "valid"
        else:
            assign[users[idx]] = "test"
    return assign


# -------------------------------------------------------------- synthetic


@dataclass
class SyntheticConfig:
    n_users: int = 5000
    n_items: int = 2000
    n_interests: int = 4
    interests_per_user: int = 2
    D: int = 32
    seq_len_mean: float = 50.0
    seq_len_min: int = 5
    seq_len_cap: int = 100
    session_burst_len: float = 4.0
    noise_std: float = 1.0
    pool_size: int = 3
    transition_prob: float = 0.0
    popularity_exponent: float = 0.8
    neg_ratio: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.n_interests < 2:
            raise ValueError("n_interests must be >= 2")
        if not 1 <= self.interests_per_user <= self.n_interests:
            raise ValueError("interests_per_user must be in [1, n_interests]")
        if not 1 <= self.seq_len_min <= self.seq_len_cap <= 100:
            raise ValueError("need 1 <= seq_len_min <= seq_len_cap <= 100")
        if self.session_burst_len < 1:
            raise ValueError("session_burst_len must be >= 1")
        if self.n_items < self.n_interests:
            raise ValueError("need at least one item per interest")
        if not 0.0 <= self.transition_prob <= 1.0:
            raise ValueError("transition_prob must lie in [0, 1]")
        if self.pool_size < 1 or self.neg_ratio < 0 or self.noise_std < 0:
            raise ValueError("pool_size >= 1, neg_ratio >= 0 and noise_std >= 0 required")
        if self.n_users < 3:
            raise ValueError("need at least 3 users for a train/valid/test split")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Multi-interest users with bursty histories and popularity negatives.

    Each user owns ``interests_per_user`` latent interests and, per interest,
    a small personal pool of items drawn by popularity. Histories alternate
    between interests in geometric-length bursts. The positive target is the
    next event of that process, so it usually continues the last burst;
    negatives are drawn by global popularity.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    D = config.D
    centroids = _unit(rng.normal(size=(config.n_interests, D)))
    item_interest = np.arange(config.n_items) % config.n_interests
    rng.shuffle(item_interest)
    noise = rng.normal(size=(config.n_items, D)) * (config.noise_std / np.sqrt(D))
    vectors = _unit(centroids[item_interest] + noise)
    popularity = 1.0 / np.arange(1, config.n_items + 1) ** config.popularity_exponent
    popularity = popularity[rng.permutation(config.n_items)]
    by_interest = [np.flatnonzero(item_interest == k) for k in range(config.n_interests)]
    sampler = PopularitySampler(popularity, rng)

    items = ItemTable(
        raw_ids=[f"i{j}" for j in range(config.n_items)],
        categories=item_interest.astype(np.int64),
        category_ids=[f"c{k}" for k in range(config.n_interests)],
        vectors=vectors,
    )
    user_ids = [f"u{n}" for n in range(config.n_users)]
    assign = split_users(user_ids, rng)
    splits: Dict[str, List[Sample]] = {s: [] for s in SPLITS}
    p_switch = 1.0 / config.session_burst_len
    for group, uid in enumerate(user_ids):
        interests = rng.choice(config.n_interests, size=config.interests_per_user, replace=False)
        pools = []
        for k in interests:
            cand = by_interest[k]
            w = popularity[cand] / popularity[cand].sum()
            size = min(config.pool_size, len(cand))
            pools.append(rng.choice(cand, size=size, replace=False, p=w))
        length = int(np.clip(rng.geometric(1.0 / config.seq_len_mean), config.seq_len_min, config.seq_len_cap))
        history = np.empty(length, dtype=np.int64)
        current = rng.integers(len(interests))
        prev = None

        def step(prev, current):
            # within a burst, optionally walk the pool in a fixed cyclic order
            pool = pools[current]
            if prev is not None and config.transition_prob > 0 and rng.random() < config.transition_prob:
                at = np.flatnonzero(pool == prev)
                if at.size:
                    return int(pool[(at[0] + 1) % len(pool)])
            return int(rng.choice(pool))

        for t in range(length):
            if t > 0 and rng.random() < p_switch:
                current = rng.integers(len(interests))
            prev = history[t] = step(prev, current)
        stamps = 1_600_000_000 + np.cumsum(rng.integers(1, 3600, size=length))
        target_time = int(stamps[-1] + rng.integers(1, 3600))
        # the positive is the next step of the same burst process
        if rng.random() < p_switch:
            current = rng.integers(len(interests))
        pos = step(prev, current)
        negs = sampler.sample(config.neg_ratio, exclude=[pos])
        split = splits[assign[uid]]
        for item, label in [(pos, 1)] + [(int(n), 0) for n in negs]:
            split.append(Sample(uid, history, stamps, item, label, target_time, group))
    return Dataset(D=D, items=items, splits=splits)


# ----------------------------------------------------------------- taobao


@dataclass
class BehaviorRecord:
    user_id: str
    item_id: str
    category_id: str
    behavior_type: str
    timestamp: int


@dataclass
class IngestReport:
    rows: int = 0
    malformed: int = 0
    users_kept: int = 0
    users_dropped: int = 0
    samples: int = 0


def parse_behavior_row(row: Sequence[str]) -> BehaviorRecord:
    if len(row) != 5:
        raise ValueError(f"expected 5 fields, got {len(row)}")
    user, item, cat, behavior, ts = (f.strip() for f in row)
    if behavior not in BEHAVIORS:
        raise ValueError(f"unknown behavior type {behavior!r}")
    if not user or not item or not cat:
        raise ValueError("empty id field")
    return BehaviorRecord(user, item, cat, behavior, int(ts))


def read_behaviors(lines: Iterable[str], max_malformed: float = 0.01):
    """Parse behavior-log CSV lines. Returns (records, report)."""
    report = IngestReport()
    records: List[BehaviorRecord] = []
    for row in csv.reader(lines):
        if not row or (report.rows == 0 and row[0].strip() == "user_id"):
            continue
        report.rows += 1
        try:
            records.append(parse_behavior_row(row))
        except ValueError as err:
            report.malformed += 1
            log.debug("skipping malformed row %d: %s", report.rows, err)
    if report.rows and report.malformed / report.rows > max_malformed:
        raise ValueError(
            f"{report.malformed} of {report.rows} rows malformed "
            f"(> {max_malformed:.0%}); refusing to ingest"
        )
    if report.malformed:
        log.warning("skipped %d malformed rows of %d", report.malformed, report.rows)
    return records, report


def ingest_taobao(path, max_len: int = 100, min_history: int = 20, neg_ratio: int = 4,
                  seed: int = 0, item_dim: int = 64, category_dim: int = 16):
    """Build samples from a Taobao behavior log.

    Every ``buy`` becomes a positive whose history is the user's last
    ``max_len`` page views strictly before the purchase; ``neg_ratio``
    negatives per positive are drawn by page-view popularity and share that
    history. Users need more than ``min_history`` page views. Returns
    ``(dataset, report)``; the dataset's items use learned embeddings of width
    ``item_dim + category_dim``.
    """
    if isinstance(path, (str, Path)):
        with open(path, newline="") as fh:
            records, report = read_behaviors(fh)
    else:
        records, report = read_behaviors(path)
    rng = np.random.default_rng(seed)

    item_index: Dict[str, int] = {}
    cat_index: Dict[str, int] = {}
    item_cat: List[int] = []
    for r in records:
        if r.category_id not in cat_index:
            cat_index[r.category_id] = len(cat_index)
        if r.item_id not in item_index:
            item_index[r.item_id] = len(item_index)
            item_cat.append(cat_index[r.category_id])
    pv_counts = np.zeros(len(item_index))
    per_user: Dict[str, List[BehaviorRecord]] = defaultdict(list)
    for r in records:
        per_user[r.user_id].append(r)
        if r.behavior_type == "pv":
            pv_counts[item_index[r.item_id]] += 1

    kept = {}
    for uid, events in per_user.items():
        n_pv = sum(e.behavior_type == "pv" for e in events)
        if n_pv > min_history:
            kept[uid] = sorted(events, key=lambda e: e.timestamp)  # stable: file order on ties
        else:
            report.users_dropped += 1
    report.users_kept = len(kept)
    sampler = PopularitySampler(pv_counts, rng) if pv_counts.sum() > 0 else None
    assign = split_users(list(kept), rng)
    splits: Dict[str, List[Sample]] = {s: [] for s in SPLITS}
    group = 0
    for uid in sorted(kept):
        events = kept[uid]
        pv_items = np.array([item_index[e.item_id] for e in events if e.behavior_type == "pv"], dtype=np.int64)
        pv_times = np.array([e.timestamp for e in events if e.behavior_type == "pv"], dtype=np.int64)
        for e in events:
            if e.behavior_type != "buy":
                continue
            n_before = int(np.searchsorted(pv_times, e.timestamp, side="left"))
            if n_before == 0:
                continue
            lo = max(0, n_before - max_len)
            hist, stamps = pv_items[lo:n_before], pv_times[lo:n_before]
            target = item_index[e.item_id]
            negs = sampler.sample(neg_ratio, exclude=[target]) if neg_ratio else []
            for item, label in [(target, 1)] + [(int(n), 0) for n in negs]:
                splits[assign[uid]].append(Sample(uid, hist, stamps, item, label, e.timestamp, group))
            group += 1
    report.samples = sum(len(v) for v in splits.values())
    items = ItemTable(
        raw_ids=list(item_index),
        categories=np.array(item_cat, dtype=np.int64),
        category_ids=list(cat_index),
        vectors=None,
    )
    return Dataset(D=item_dim + category_dim, items=items, splits=splits), report


# -------------------------------------------------------------- file format


def dumps_dataset(ds: Dataset) -> str:
    """Serialize to the line-oriented text format documented in the README."""
    out = io.StringIO()
    counts = " ".join(f"{s} {len(ds[s])}" for s in SPLITS)
    mode = "learned" if ds.items.learned else "fixed"
    out.write(f"{FORMAT_TAG} {FORMAT_VERSION}\n")
    out.write(f"D {ds.D} items {len(ds.items)} categories {len(ds.items.category_ids)} {counts} embedding {mode}\n")
    for c, raw in enumerate(ds.items.category_ids):
        out.write(f"category {c} {raw}\n")
    for j, raw in enumerate(ds.items.raw_ids):
        line = f"item {j} {raw} {int(ds.items.categories[j])}"
        if not ds.items.learned:
            line += " " + " ".join(repr(float(v)) for v in ds.items.vectors[j])
        out.write(line + "\n")
    for split in SPLITS:
        for s in ds[split]:
            hist = " ".join(f"{int(i)}@{int(t)}" for i, t in zip(s.history, s.timestamps))
            out.write(
                f"sample {split} {s.group} {s.user_id} {s.label} {s.target} {s.target_time} "
                f"{len(s.history)}{' ' + hist if hist else ''}\n"
            )
    return out.getvalue()


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds))


def loads_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines or lines[0].split() != [FORMAT_TAG, str(FORMAT_VERSION)]:
        raise ValueError("not a sumrec dataset file (bad magic line)")
    head = lines[1].split()
    meta = dict(zip(head[0::2], head[1::2]))
    D = int(meta["D"])
    n_items = int(meta["items"])
    learned = meta["embedding"] == "learned"
    cats: List[str] = []
    raw_ids: List[str] = []
    item_cat: List[int] = []
    vectors = None if learned else np.empty((n_items, D))
    splits: Dict[str, List[Sample]] = {s: [] for s in SPLITS}
    shared: Dict[Tuple[str, int], Tuple[np.ndarray, np.ndarray]] = {}
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split()
        kind = parts[0]
        if kind == "category":
            cats.append(parts[2])
        elif kind == "item":
            raw_ids.append(parts[2])
            item_cat.append(int(parts[3]))
            if not learned:
                if len(parts) != 4 + D:
                    raise ValueError(f"line {lineno}: expected {D} embedding values")
                vectors[int(parts[1])] = [float(v) for v in parts[4:]]
        elif kind == "sample":
            split, group, uid = parts[1], int(parts[2]), parts[3]
            label, target, ttime, n = int(parts[4]), int(parts[5]), int(parts[6]), int(parts[7])
            key = (split, group)
            if key not in shared:
                pairs = [p.split("@") for p in parts[8:8 + n]]
                shared[key] = (
                    np.array([int(a) for a, _ in pairs], dtype=np.int64),
                    np.array([int(b) for _, b in pairs], dtype=np.int64),
                )
            hist, stamps = shared[key]
            splits[split].append(Sample(uid, hist, stamps, target, label, ttime, group))
        else:
            raise ValueError(f"line {lineno}: unknown record type {kind!r}")
    if len(raw_ids) != n_items:
        raise ValueError(f"header declares {n_items} items, found {len(raw_ids)}")
    for s in SPLITS:
        if len(splits[s]) != int(meta[s]):
            raise ValueError(f"header declares {meta[s]} {s} samples, found {len(splits[s])}")
    items = ItemTable(raw_ids, np.array(item_cat, dtype=np.int64), cats, vectors)
    return Dataset(D=D, items=items, splits=splits)


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_text())
