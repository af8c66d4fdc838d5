"""Interaction ingestion, session filtering, splitting and dataset snapshots."""

from __future__ import annotations

import csv
import gzip
import io
import logging
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"CVDS"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class Interaction:
    user: str
    session: str
    item: str
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")
        if not (self.user and self.session and self.item):
            raise ValueError("identifiers must be non-empty")


@dataclass(frozen=True)
class Session:
    items: tuple[int, ...]
    time: int
    session_id: str = ""

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class Dataset:
    """Users, items and per-user chronologically ordered sessions.

    ``user_ids[u]`` and ``item_ids[p]`` decode dense indices back to the raw
    identifiers; ``user_index``/``item_index`` go the other way.
    """

    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    sessions_by_user: tuple[tuple[Session, ...], ...]
    user_index: dict[str, int] = field(init=False, repr=False, compare=False)
    item_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "user_index", {u: i for i, u in enumerate(self.user_ids)})
        object.__setattr__(self, "item_index", {p: i for i, p in enumerate(self.item_ids)})

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_sessions(self) -> int:
        return sum(len(s) for s in self.sessions_by_user)

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for ss in self.sessions_by_user for s in ss)

    def validate(self) -> None:
        if len(self.sessions_by_user) != self.num_users:
            raise DataError("sessions_by_user does not cover every user")
        for u, sessions in enumerate(self.sessions_by_user):
            if not sessions:
                raise DataError(f"user {self.user_ids[u]!r} has no sessions")
            times = [s.time for s in sessions]
            if times != sorted(times):
                raise DataError(f"sessions of user {self.user_ids[u]!r} are not time-ordered")
            for s in sessions:
                if not s.items:
                    raise DataError("empty session")
                if max(s.items) >= self.num_items or min(s.items) < 0:
                    raise DataError("item index out of range")


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset
    validation: tuple[Session, ...]
    test: tuple[Session, ...]
    seed: int

    def held_out(self, mode: str) -> tuple[Session, ...]:
        if mode == "validation":
            return self.validation
        if mode == "test":
            return self.test
        raise ValueError(f"unknown evaluation mode {mode!r}")


@dataclass(frozen=True)
class DatasetStats:
    interactions: int
    users: int
    sessions: int
    items: int
    sessions_per_user: float
    interactions_per_item: float
    interactions_per_session: float
    density: float


@dataclass(frozen=True)
class ColumnMapping:
    """Maps interaction fields to column names of a delimited file.

    When ``date`` is set, the timestamp column is read as a millisecond offset
    added to the epoch milliseconds of the ``YYYY-MM-DD`` date column.
    """

    user: str = "user_id"
    session: str = "session_id"
    item: str = "item_id"
    timestamp: str = "timestamp"
    date: str | None = None


# train-item-views.csv of the CIKM Cup 2016 release
DIGINETICA = ColumnMapping(user="userId", session="sessionId", item="itemId",
                           timestamp="timeframe", date="eventdate")
PRESETS = {"default": ColumnMapping(), "diginetica": DIGINETICA}


def _open_text(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, "r", encoding="utf-8", newline="")


def _date_ms(value: str) -> int:
    dt = datetime.strptime(value, "%Y-%m-%d").replace(tzinfo=timezone.utc)
    return int(dt.timestamp()) * 1000


def load_interactions(
    path: str | Path,
    columns: ColumnMapping | None = None,
    delimiter: str | None = None,
    lenient: bool = False,
) -> list[Interaction]:
    """Read interactions from a delimited (optionally gzip-compressed) file.

    A malformed row raises :class:`DataError` naming its line number, unless
    ``lenient`` is set, in which case it is skipped and counted.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    columns = columns or ColumnMapping()
    out: list[Interaction] = []
    skipped = 0
    with _open_text(path) as fh:
        header_line = fh.readline()
        if not header_line:
            logger.info("read 0 interactions from %s", path)
            return out
        if delimiter is None:
            delimiter = max("\t;,", key=header_line.count)
        header = next(csv.reader([header_line], delimiter=delimiter))
        try:
            cols = [header.index(c) for c in (columns.user, columns.session, columns.item, columns.timestamp)]
            date_col = header.index(columns.date) if columns.date else None
        except ValueError as exc:
            raise DataError(f"{path}: missing column ({exc}); header is {header}") from None
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), start=2):
            if not row:
                continue
            try:
                user, session, item, ts = (row[c].strip() for c in cols)
                stamp = int(ts)
                if date_col is not None:
                    stamp += _date_ms(row[date_col].strip())
                if user.upper() in ("NA", "NAN", "NULL"):
                    user = ""
                out.append(Interaction(user, session, item, stamp))
            except (IndexError, ValueError) as exc:
                if not lenient:
                    raise DataError(f"{path}:{lineno}: malformed row {row!r} ({exc})") from None
                skipped += 1
    logger.info("read %d interactions from %s (%d malformed rows skipped)", len(out), path, skipped)
    return out


def build_dataset(
    raw: Sequence[Interaction],
    min_sessions: int = 3,
    min_item_interactions: int = 5,
) -> Dataset:
    """Group interactions into sessions and filter users/items to a fixpoint.

    Each round drops items with fewer than ``min_item_interactions``
    occurrences, then users with fewer than ``min_sessions`` non-empty
    sessions; rounds repeat until neither filter removes anything.
    """
    if not raw:
        raise DataError("no interactions to build a dataset from")

    # (user, session) -> interactions, stable-sorted by timestamp
    grouped: dict[tuple[str, str], list[Interaction]] = defaultdict(list)
    for it in raw:
        grouped[(it.user, it.session)].append(it)
    sessions: dict[str, list[tuple[str, list[Interaction]]]] = defaultdict(list)
    for (user, sid), rows in grouped.items():
        rows.sort(key=lambda r: r.timestamp)
        sessions[user].append((sid, rows))

    while True:
        counts = Counter(r.item for ss in sessions.values() for _, rows in ss for r in rows)
        rare = {p for p, c in counts.items() if c < min_item_interactions}
        changed = bool(rare)
        if rare:
            for user in list(sessions):
                kept = []
                for sid, rows in sessions[user]:
                    rows = [r for r in rows if r.item not in rare]
                    if rows:
                        kept.append((sid, rows))
                sessions[user] = kept
        for user in list(sessions):
            if len(sessions[user]) < min_sessions:
                del sessions[user]
                changed = True
        if not changed:
            break
    if not sessions:
        raise DataError(
            f"filtering (min_sessions={min_sessions}, min_item_interactions={min_item_interactions}) "
            "removed every interaction; thresholds too strict for this corpus"
        )

    # dense indices in order of first appearance in the input
    user_order = {u: i for i, u in enumerate(dict.fromkeys(r.user for r in raw)) if u in sessions}
    users = sorted(sessions, key=user_order.__getitem__)
    kept_items = {r.item for ss in sessions.values() for _, rows in ss for r in rows}
    items = [p for p in dict.fromkeys(r.item for r in raw) if p in kept_items]
    item_index = {p: i for i, p in enumerate(items)}

    by_user = []
    for user in users:
        ss = sorted(sessions[user], key=lambda x: x[1][0].timestamp)
        by_user.append(tuple(
            Session(tuple(item_index[r.item] for r in rows), rows[0].timestamp, sid) for sid, rows in ss
        ))
    ds = Dataset(tuple(users), tuple(items), tuple(by_user))
    logger.info("built dataset: %d users, %d items, %d sessions, %d interactions",
                ds.num_users, ds.num_items, ds.num_sessions, ds.num_interactions)
    return ds


def split(dataset: Dataset, seed: int) -> SplitDataset:
    """Hold out each user's last two sessions, assigned to validation/test by a seeded coin."""
    rng = np.random.default_rng(seed)
    coins = rng.integers(0, 2, size=dataset.num_users)
    train, val, test = [], [], []
    for u, sessions in enumerate(dataset.sessions_by_user):
        if len(sessions) < 3:
            raise DataError(f"user {dataset.user_ids[u]!r} has {len(sessions)} sessions; split needs >= 3")
        a, b = sessions[-2], sessions[-1]
        if coins[u]:
            a, b = b, a
        train.append(sessions[:-2])
        val.append(a)
        test.append(b)
    train_ds = Dataset(dataset.user_ids, dataset.item_ids, tuple(train))
    return SplitDataset(train_ds, tuple(val), tuple(test), seed)


def dataset_stats(dataset: Dataset) -> DatasetStats:
    n_int = dataset.num_interactions
    n_users, n_items, n_sess = dataset.num_users, dataset.num_items, dataset.num_sessions
    return DatasetStats(
        interactions=n_int,
        users=n_users,
        sessions=n_sess,
        items=n_items,
        sessions_per_user=n_sess / n_users,
        interactions_per_item=n_int / n_items,
        interactions_per_session=n_int / n_sess,
        density=n_int / (n_users * n_items),
    )


# -- snapshot serialization --------------------------------------------------

def _write_strings(fh, values: Iterable[str]) -> None:
    for v in values:
        raw = v.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def _read_strings(fh, count: int) -> list[str]:
    out = []
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        out.append(_read_exact(fh, n).decode("utf-8"))
    return out


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError(f"{getattr(fh, 'name', 'snapshot')}: truncated file")
    return data


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a little-endian binary snapshot of ``dataset``.

    Layout: magic, u32 version, u32 users/items/sessions/interactions, user and
    item id tables (u32 length + utf-8), then per session: u32 user,
    i64 start time, u32 length, i32 items, u32 id length + utf-8 id.
    """
    sessions = [(u, s) for u, ss in enumerate(dataset.sessions_by_user) for s in ss]
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<5I", SNAPSHOT_VERSION, dataset.num_users, dataset.num_items,
                             len(sessions), dataset.num_interactions))
        _write_strings(fh, dataset.user_ids)
        _write_strings(fh, dataset.item_ids)
        for u, s in sessions:
            fh.write(struct.pack("<IqI", u, s.time, len(s.items)))
            fh.write(np.asarray(s.items, dtype="<i4").tobytes())
            _write_strings(fh, [s.session_id])


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset snapshot not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise DataError(f"{path}: not a dataset snapshot (bad magic {magic!r})")
        version, n_users, n_items, n_sessions, _ = struct.unpack("<5I", _read_exact(fh, 20))
        if version != SNAPSHOT_VERSION:
            raise DataError(f"{path}: snapshot version {version}, this build reads version {SNAPSHOT_VERSION}")
        user_ids = _read_strings(fh, n_users)
        item_ids = _read_strings(fh, n_items)
        by_user: list[list[Session]] = [[] for _ in range(n_users)]
        for _ in range(n_sessions):
            u, t, n = struct.unpack("<IqI", _read_exact(fh, 16))
            items = np.frombuffer(_read_exact(fh, 4 * n), dtype="<i4")
            (sid,) = _read_strings(fh, 1)
            by_user[u].append(Session(tuple(int(i) for i in items), t, sid))
    ds = Dataset(tuple(user_ids), tuple(item_ids), tuple(tuple(s) for s in by_user))
    ds.validate()
    return ds
