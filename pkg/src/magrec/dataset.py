"""Interaction-log ingestion, synthetic logs, negative sampling, sliding-window
samples and per-user temporal splits.
"""

from __future__ import annotations

import bisect
import csv
import json
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from magrec.errors import DataError, FormatError, ParseError

log = logging.getLogger(__name__)

FIELDS = ("domain", "user", "item", "ts", "label")
SPLIT_COLUMNS = ("user", "candidate_item", "candidate_domain", "label", "history")
MIN_WINDOW = 5
MAX_WINDOW = 80
CTR_RANGE = (0.2, 0.8)


@dataclass(frozen=True)
class InteractionRecord:
    domain: int
    user: int
    item: int
    ts: int
    label: int


@dataclass(frozen=True)
class WindowedSample:
    user: int
    history: tuple[tuple[int, int], ...]  # (item, domain), oldest first
    candidate_item: int
    candidate_domain: int
    label: int
    ts: int = 0


@dataclass
class DatasetSplit:
    train: list[WindowedSample]
    validation: list[WindowedSample]
    test: list[WindowedSample]
    ctr: dict[int, float] = field(default_factory=dict)

    def parts(self) -> dict[str, list[WindowedSample]]:
        return {"train": self.train, "val": self.validation, "test": self.test}


class NegativeSamplingWarning(UserWarning):
    """Too few unseen items for distinct negatives; sampled with replacement."""


# -- ingestion -----------------------------------------------------------------

def _parse_record(row: dict, where: str) -> InteractionRecord:
    values = {}
    for key in FIELDS:
        if key not in row or row[key] is None or row[key] == "":
            raise FormatError(f"{where}: missing column {key!r}")
        raw = row[key]
        if isinstance(raw, bool) or isinstance(raw, float):
            raise ParseError(f"{where}: field {key!r} is not an integer: {raw!r}")
        try:
            values[key] = int(raw)
        except (TypeError, ValueError):
            raise ParseError(f"{where}: field {key!r} is not an integer: {raw!r}") from None
    if min(values["domain"], values["user"], values["item"]) < 0:
        raise ParseError(f"{where}: ids must be non-negative")
    if values["label"] not in (0, 1):
        raise ParseError(f"{where}: label must be 0 or 1, got {values['label']}")
    return InteractionRecord(values["domain"], values["user"], values["item"], values["ts"], values["label"])


def ingest(path: str | Path, format: str | None = None) -> list[InteractionRecord]:
    """Read a CSV or JSONL interaction log, sorted by (user, ts, input order)."""
    path = Path(path)
    fmt = format or ("jsonl" if path.suffix in (".jsonl", ".json") else "csv")
    records: list[InteractionRecord] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise FormatError(f"{path}: empty file, expected header {','.join(FIELDS)}")
            if tuple(h.strip() for h in header) != FIELDS:
                raise FormatError(f"{path}: header must be exactly {','.join(FIELDS)}, got {','.join(header)}")
            for lineno, cells in enumerate(reader, start=2):
                if not cells:
                    continue
                if len(cells) != len(FIELDS):
                    raise FormatError(f"{path}:{lineno}: expected {len(FIELDS)} columns, got {len(cells)}")
                records.append(_parse_record(dict(zip(FIELDS, (c.strip() for c in cells))), f"{path}:{lineno}"))
        elif fmt == "jsonl":
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
                if not isinstance(obj, dict):
                    raise FormatError(f"{path}:{lineno}: expected a JSON object")
                records.append(_parse_record(obj, f"{path}:{lineno}"))
        else:
            raise ValueError(f"unknown format {fmt!r}; expected csv or jsonl")
    return sort_records(records)


def sort_records(records: Iterable[InteractionRecord]) -> list[InteractionRecord]:
    # sorted() is stable, so ties keep input order
    return sorted(records, key=lambda r: (r.user, r.ts))


def write_records(records: Sequence[InteractionRecord], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if path.suffix in (".jsonl", ".json"):
            for r in records:
                fh.write(json.dumps({"domain": r.domain, "user": r.user, "item": r.item, "ts": r.ts, "label": r.label}))
                fh.write("\n")
        else:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(FIELDS)
            for r in records:
                writer.writerow((r.domain, r.user, r.item, r.ts, r.label))


# -- synthetic logs ------------------------------------------------------------

def generate_synthetic(
    seed: int,
    n_users: int,
    n_items_per_domain: int,
    n_domains: int,
    cross_domain_strength: float,
    events_per_user: tuple[int, int] = (20, 40),
    n_topics: int = 5,
    static_prob: float = 0.2,
    noise: float = 0.1,
) -> list[InteractionRecord]:
    """Positive-only interaction log with planted sequential structure.

    Items of every domain are spread round-robin over ``n_topics`` topics
    (item ``j`` of a domain has topic ``j % n_topics``). Each event picks a
    domain uniformly, then a topic, then an item of that topic uniformly.

    * With probability ``cross_domain_strength`` (cross-domain mode) the
      topic is a fixed per-domain permutation of the topic of the user's most
      recent item in a *different* domain, or with probability
      ``static_prob`` the user's favourite topic shared across domains.
    * Otherwise the topic is a fixed per-domain permutation of the topic of
      the user's last item in the *same* domain, or with probability
      ``static_prob`` the user's private favourite for that domain.

    A final ``noise`` fraction of topics is uniform. At strength 0 the
    per-domain subsequences are independent of each other. Item ids are
    global: domain ``d`` owns ``d*n_items_per_domain`` onwards.
    """
    if min(n_users, n_items_per_domain, n_domains, n_topics) <= 0:
        raise ValueError("n_users, n_items_per_domain, n_domains and n_topics must be positive")
    if not 0.0 <= cross_domain_strength <= 1.0:
        raise ValueError("cross_domain_strength must lie in [0, 1]")
    lo, hi = events_per_user
    rng = np.random.default_rng(seed)
    k = min(n_topics, n_items_per_domain)
    members = [np.arange(t, n_items_per_domain, k) for t in range(k)]
    across = [rng.permutation(k) for _ in range(n_domains)]
    within = [rng.permutation(k) for _ in range(n_domains)]
    records: list[InteractionRecord] = []
    for user in range(n_users):
        shared = int(rng.integers(k))
        private = rng.integers(k, size=n_domains)
        n_events = int(rng.integers(lo, hi + 1))
        ts = int(rng.integers(0, 10_000))
        last_topic = [-1] * n_domains
        last_seen = [-1] * n_domains
        for step in range(n_events):
            d = int(rng.integers(n_domains))
            static = rng.random() < static_prob
            if rng.random() < cross_domain_strength:
                others = [dd for dd in range(n_domains) if dd != d and last_seen[dd] >= 0]
                if static or not others:
                    topic = shared
                else:
                    source = max(others, key=lambda dd: last_seen[dd])
                    topic = int(across[d][last_topic[source]])
            elif static or last_topic[d] < 0:
                topic = int(private[d])
            else:
                topic = int(within[d][last_topic[d]])
            if rng.random() < noise:
                topic = int(rng.integers(k))
            item = int(rng.choice(members[topic]))
            records.append(InteractionRecord(d, user, d * n_items_per_domain + item, ts, 1))
            ts += int(rng.integers(1, 3600))
            last_topic[d] = topic
            last_seen[d] = step
    return sort_records(records)


# -- negative sampling ---------------------------------------------------------

def negative_sample(
    records: Sequence[InteractionRecord], seed: int, ctr_range: tuple[float, float] = CTR_RANGE
) -> tuple[list[InteractionRecord], dict[int, float]]:
    """Append label-0 candidates so each domain's positive rate approaches a random CTR.

    Negatives pair the user with items of the same domain the user never
    interacted with, and inherit the positive's timestamp.
    """
    if any(r.label != 1 for r in records):
        raise DataError("negative_sample expects a positives-only log")
    rng = np.random.default_rng(seed)
    domains = sorted({r.domain for r in records})
    ctr = {d: float(rng.uniform(*ctr_range)) for d in domains}
    domain_items: dict[int, np.ndarray] = {
        d: np.array(sorted({r.item for r in records if r.domain == d}), dtype=np.int64) for d in domains
    }
    seen: dict[tuple[int, int], set[int]] = defaultdict(set)
    for r in records:
        seen[(r.user, r.domain)].add(r.item)
    pools: dict[tuple[int, int], np.ndarray] = {}
    out: list[InteractionRecord] = []
    warned = False
    for r in records:
        out.append(r)
        ratio = (1.0 - ctr[r.domain]) / ctr[r.domain]
        k = int(np.floor(ratio))
        if rng.random() < ratio - k:
            k += 1
        if k == 0:
            continue
        key = (r.user, r.domain)
        pool = pools.get(key)
        if pool is None:
            all_items = domain_items[r.domain]
            pool = all_items[~np.isin(all_items, list(seen[key]))]
            pools[key] = pool
        if len(pool) >= k:
            chosen = rng.choice(pool, size=k, replace=False)
        else:
            if not warned:
                warnings.warn(
                    f"user {r.user} has fewer than {k} unseen items in domain {r.domain}; "
                    "sampling negatives with replacement",
                    NegativeSamplingWarning,
                    stacklevel=2,
                )
                warned = True
            source = pool if len(pool) else domain_items[r.domain]
            chosen = rng.choice(source, size=k, replace=True)
        out.extend(InteractionRecord(r.domain, r.user, int(i), r.ts, 0) for i in chosen)
    return out, ctr


# -- sliding windows -----------------------------------------------------------

def sliding_windows(
    records: Sequence[InteractionRecord], min_len: int = MIN_WINDOW, max_len: int = MAX_WINDOW
) -> list[WindowedSample]:
    """One sample per candidate event with its most recent positive history.

    The history of a candidate at time t is the last ``max_len`` positives
    strictly before t; candidates with fewer than ``min_len`` are dropped.
    """
    by_user: dict[int, list[InteractionRecord]] = defaultdict(list)
    for r in records:
        by_user[r.user].append(r)
    samples: list[WindowedSample] = []
    for user in sorted(by_user):
        events = by_user[user]
        positives = [r for r in events if r.label == 1]
        pos_ts = [r.ts for r in positives]
        pos_pairs = [(r.item, r.domain) for r in positives]
        for r in events:
            end = bisect.bisect_left(pos_ts, r.ts)
            if end < min_len:
                continue
            start = max(0, end - max_len)
            samples.append(WindowedSample(user, tuple(pos_pairs[start:end]), r.item, r.domain, r.label, r.ts))
    return samples


# -- temporal split ------------------------------------------------------------

def temporal_split(samples: Sequence[WindowedSample], ctr: dict[int, float] | None = None) -> DatasetSplit:
    """Per user, the earliest 60% of samples train, the next 20% validate, the rest test."""
    by_user: dict[int, list[WindowedSample]] = defaultdict(list)
    for s in samples:
        by_user[s.user].append(s)
    split = DatasetSplit([], [], [], dict(ctr or {}))
    for user in sorted(by_user):
        ordered = sorted(by_user[user], key=lambda s: s.ts)
        n = len(ordered)
        n_train = (6 * n) // 10
        n_val = (2 * n) // 10
        split.train.extend(ordered[:n_train])
        split.validation.extend(ordered[n_train:n_train + n_val])
        split.test.extend(ordered[n_train + n_val:])
    return split


def prepare(records: Sequence[InteractionRecord], seed: int) -> DatasetSplit:
    """Full pipeline: negatives, windows, split.

    A log that already carries label-0 rows is windowed as-is.
    """
    records = sort_records(records)
    if all(r.label == 1 for r in records):
        records, ctr = negative_sample(records, seed)
    else:
        ctr = {}
    return temporal_split(sliding_windows(records), ctr)


# -- split serialization -------------------------------------------------------

def _format_history(history: Sequence[tuple[int, int]]) -> str:
    return "|".join(f"{item}:{dom}" for item, dom in history)


def _parse_history(text: str) -> tuple[tuple[int, int], ...]:
    if not text:
        return ()
    pairs = []
    for chunk in text.split("|"):
        item, _, dom = chunk.partition(":")
        pairs.append((int(item), int(dom)))
    return tuple(pairs)


def write_split(split: DatasetSplit, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, part in split.parts().items():
        with (directory / f"{name}.csv").open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SPLIT_COLUMNS)
            for s in part:
                writer.writerow((s.user, s.candidate_item, s.candidate_domain, s.label, _format_history(s.history)))
    with (directory / "ctr.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("domain", "ctr"))
        for d in sorted(split.ctr):
            writer.writerow((d, repr(split.ctr[d])))


def read_split(directory: str | Path) -> DatasetSplit:
    """Inverse of :func:`write_split`. Sample timestamps are not stored and come back as row order."""
    directory = Path(directory)
    parts = {}
    for name in ("train", "val", "test"):
        path = directory / f"{name}.csv"
        if not path.exists():
            raise DataError(f"missing split file {path}")
        rows = []
        with path.open("r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != SPLIT_COLUMNS:
                raise FormatError(f"{path}: header must be {','.join(SPLIT_COLUMNS)}")
            for lineno, cells in enumerate(reader, start=2):
                if len(cells) != len(SPLIT_COLUMNS):
                    raise FormatError(f"{path}:{lineno}: expected {len(SPLIT_COLUMNS)} columns")
                try:
                    user, item, dom, label = (int(c) for c in cells[:4])
                    history = _parse_history(cells[4])
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: malformed row") from None
                rows.append(WindowedSample(user, history, item, dom, label, lineno))
        parts[name] = rows
    ctr = {}
    ctr_path = directory / "ctr.csv"
    if ctr_path.exists():
        with ctr_path.open("r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            ctr = {int(row["domain"]): float(row["ctr"]) for row in reader}
    return DatasetSplit(parts["train"], parts["val"], parts["test"], ctr)
