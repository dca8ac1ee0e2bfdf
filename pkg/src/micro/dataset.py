"""Interaction tables, feature files, warm/cold splits and BPR triple sampling."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .numerics import make_rng

log = logging.getLogger(__name__)

TRAIN, VALID, TEST = 0, 1, 2
TAG_NAMES = ("train", "valid", "test")
FEATURE_MAGIC = b"MFV1"


@dataclass(frozen=True)
class InteractionTable:
    """Implicit feedback, one row per (user, item) pair, each with a split tag.

    ``user_ids``/``item_ids`` map contiguous indices back to the original
    string ids.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    tags: np.ndarray
    user_ids: tuple[str, ...] = ()
    item_ids: tuple[str, ...] = ()
    cold_items: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    duplicates_dropped: int = 0

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        tags = np.asarray(self.tags, dtype=np.int8)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "tags", tags)
        object.__setattr__(self, "cold_items", np.asarray(self.cold_items, dtype=np.int64))
        if not (users.shape == items.shape == tags.shape):
            raise DataError("users, items and tags must have equal length")
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise DataError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise DataError("item index out of range")
        if np.unique(users * self.n_items + items).size != users.size:
            raise DataError("duplicate (user, item) pairs")
        if not self.user_ids:
            object.__setattr__(self, "user_ids", tuple(str(u) for u in range(self.n_users)))
        if not self.item_ids:
            object.__setattr__(self, "item_ids", tuple(str(i) for i in range(self.n_items)))

    def __len__(self):
        return int(self.users.size)

    def with_tags(self, tags: np.ndarray, cold_items=None) -> "InteractionTable":
        kw = {"tags": tags}
        if cold_items is not None:
            kw["cold_items"] = cold_items
        return replace(self, **kw)

    def tag_counts(self) -> dict[str, int]:
        counts = np.bincount(self.tags, minlength=3)
        return {name: int(counts[t]) for t, name in enumerate(TAG_NAMES)}

    def positives(self, tag: int | None = None) -> list[np.ndarray]:
        """Per-user sorted item arrays, optionally restricted to one tag."""
        mask = np.ones(len(self), dtype=bool) if tag is None else self.tags == tag
        u, i = self.users[mask], self.items[mask]
        order = np.lexsort((i, u))
        u, i = u[order], i[order]
        bounds = np.searchsorted(u, np.arange(self.n_users + 1))
        return [i[bounds[k]:bounds[k + 1]] for k in range(self.n_users)]

    def interaction_matrix(self, tag: int | None = None) -> np.ndarray:
        """Dense boolean user x item matrix."""
        mask = np.ones(len(self), dtype=bool) if tag is None else self.tags == tag
        out = np.zeros((self.n_users, self.n_items), dtype=bool)
        out[self.users[mask], self.items[mask]] = True
        return out


def load_interactions(path: str | Path) -> InteractionTable:
    """Read ``user<TAB>item`` lines. Indices follow first appearance."""
    path = Path(path)
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    pairs: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    duplicates = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}")
            u = user_index.setdefault(parts[0], len(user_index))
            i = item_index.setdefault(parts[1], len(item_index))
            if (u, i) in seen:
                duplicates += 1
                continue
            seen.add((u, i))
            pairs.append((u, i))
    if not pairs:
        raise DataError(f"{path}: no interactions")
    if duplicates:
        log.warning("%s: dropped %d duplicate interactions", path, duplicates)
    arr = np.asarray(pairs, dtype=np.int64)
    table = InteractionTable(
        n_users=len(user_index), n_items=len(item_index),
        users=arr[:, 0], items=arr[:, 1], tags=np.zeros(len(arr), dtype=np.int8),
        user_ids=tuple(user_index), item_ids=tuple(item_index), duplicates_dropped=duplicates,
    )
    return table


def save_interactions(table: InteractionTable, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for u, i in zip(table.users, table.items):
            fh.write(f"{table.user_ids[u]}\t{table.item_ids[i]}\n")


# ---------------------------------------------------------------------------
# feature files


def write_features(features: np.ndarray, path: str | Path, width: int = 8) -> None:
    """Write a feature matrix as ``.mfv`` (binary) or ``.csv`` by extension."""
    path = Path(path)
    features = np.asarray(features)
    if path.suffix == ".csv":
        np.savetxt(path, features, delimiter=",", fmt="%.17g")
        return
    if width not in (4, 8):
        raise ValueError("element width must be 4 or 8")
    rows, cols = features.shape
    dtype = "<f4" if width == 4 else "<f8"
    with path.open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIB", rows, cols, width))
        fh.write(np.ascontiguousarray(features, dtype=dtype).tobytes())


def read_feature_file(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    elif path.suffix == ".mfv":
        raw = path.read_bytes()
        if raw[:4] != FEATURE_MAGIC or len(raw) < 13:
            raise DataError(f"{path}: not an MFV1 feature file")
        rows, cols, width = struct.unpack_from("<IIB", raw, 4)
        if width not in (4, 8):
            raise DataError(f"{path}: bad element width flag {width}")
        expected = 13 + rows * cols * width
        if len(raw) != expected:
            raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
        arr = np.frombuffer(raw, dtype="<f4" if width == 4 else "<f8", offset=13)
        arr = arr.reshape(rows, cols).astype(np.float64)
    else:
        raise DataError(f"{path}: unknown feature file extension (use .mfv or .csv)")
    return arr


def check_features(features: np.ndarray, name: str = "features") -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise DataError(f"{name}: expected a 2-D matrix")
    if not np.all(np.isfinite(features)):
        raise DataError(f"{name}: non-finite values")
    zero = np.flatnonzero(~np.any(features != 0, axis=1))
    if zero.size:
        raise DataError(f"{name}: all-zero feature row for item index {int(zero[0])}")
    return features


def load_features(path: str | Path, manifest: str | Path, table: InteractionTable) -> np.ndarray:
    """Load one modality and reorder its rows to the table's item indices."""
    arr = read_feature_file(path)
    ids = [ln.strip() for ln in Path(manifest).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(ids) != arr.shape[0]:
        raise DataError(f"{path}: {arr.shape[0]} rows but manifest lists {len(ids)} ids")
    position = {item_id: row for row, item_id in enumerate(ids)}
    missing = [i for i in table.item_ids if i not in position]
    if missing:
        raise DataError(f"{path}: no features for item {missing[0]!r}")
    arr = arr[[position[i] for i in table.item_ids]]
    return check_features(arr, str(path))


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "warm"
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    cold_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("warm", "cold"):
            raise ConfigError(f"split mode must be 'warm' or 'cold', got {self.mode!r}")
        if len(self.ratios) != 3 or min(self.ratios) < 0 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three nonnegative numbers summing to 1: {self.ratios}")
        if not 0.0 < self.cold_fraction < 1.0:
            raise ConfigError("cold fraction must lie in (0, 1)")


def make_warm_split(table: InteractionTable, spec: SplitSpec) -> InteractionTable:
    """Per-user random 80/10/10 partition (floor for valid/test, rest to train)."""
    if spec.mode != "warm":
        raise ConfigError("make_warm_split needs a warm SplitSpec")
    rng = make_rng(spec.seed, "split", "warm")
    tags = np.full(len(table), TRAIN, dtype=np.int8)
    order = np.argsort(table.users, kind="stable")
    bounds = np.searchsorted(table.users[order], np.arange(table.n_users + 1))
    small = 0
    for u in range(table.n_users):
        rows = order[bounds[u]:bounds[u + 1]]
        n = rows.size
        if n < 3:
            small += n > 0
            continue
        n_valid = int(np.floor(n * spec.ratios[1]))
        n_test = int(np.floor(n * spec.ratios[2]))
        perm = rows[rng.permutation(n)]
        tags[perm[:n_valid]] = VALID
        tags[perm[n_valid:n_valid + n_test]] = TEST
    if small:
        log.warning("%d users with fewer than 3 interactions kept entirely in train", small)
    return table.with_tags(tags, cold_items=np.zeros(0, dtype=np.int64))


def make_cold_split(table: InteractionTable, spec: SplitSpec) -> InteractionTable:
    """Hold out a random item subset: half of it to valid, half to test."""
    if spec.mode != "cold":
        raise ConfigError("make_cold_split needs a cold SplitSpec")
    n_cold = int(round(table.n_items * spec.cold_fraction))
    if n_cold < 2:
        raise ConfigError(f"cold fraction {spec.cold_fraction} selects {n_cold} of {table.n_items} items; need at least 2")
    rng = make_rng(spec.seed, "split", "cold")
    cold = rng.permutation(table.n_items)[:n_cold]
    valid_items = np.sort(cold[: n_cold // 2])
    test_items = np.sort(cold[n_cold // 2:])
    tags = np.full(len(table), TRAIN, dtype=np.int8)
    tags[np.isin(table.items, valid_items)] = VALID
    tags[np.isin(table.items, test_items)] = TEST
    out = table.with_tags(tags, cold_items=np.sort(cold))
    no_train = table.n_users - np.unique(table.users[tags == TRAIN]).size
    if no_train:
        log.warning("%d users have no training interactions after the cold split; they are not evaluated", no_train)
    return out


def make_split(table: InteractionTable, spec: SplitSpec) -> InteractionTable:
    return make_warm_split(table, spec) if spec.mode == "warm" else make_cold_split(table, spec)


def split_report(table: InteractionTable, spec: SplitSpec) -> dict:
    return {
        "seed": spec.seed,
        "spec": {"mode": spec.mode, "ratios": list(spec.ratios), "cold_fraction": spec.cold_fraction},
        "counts": table.tag_counts(),
        "cold_item_ids": [table.item_ids[i] for i in table.cold_items],
    }


def write_split_json(table: InteractionTable, spec: SplitSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split_report(table, spec), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# triple sampling


@dataclass(frozen=True)
class TripleBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return int(self.users.size)

    def unique_items(self) -> np.ndarray:
        return np.unique(np.concatenate([self.pos, self.neg]))


class TripleSampler:
    """Draws BPR triples. Negatives avoid every positive of the user, in any split."""

    def __init__(self, table: InteractionTable, rng: np.random.Generator):
        train = table.tags == TRAIN
        if not np.any(train):
            raise DataError("training split is empty")
        self.table = table
        self.rng = rng
        self.known = table.interaction_matrix()
        full = self.known.sum(axis=1) >= table.n_items
        keep = train & ~full[table.users]
        if full.any():
            log.warning("%d users interacted with every item; skipped for sampling", int(full.sum()))
        if not np.any(keep):
            raise DataError("no user has a sampleable negative item")
        self.train_users = table.users[keep]
        self.train_items = table.items[keep]

    def _negatives(self, users: np.ndarray) -> np.ndarray:
        neg = self.rng.integers(0, self.table.n_items, size=users.size)
        bad = self.known[users, neg]
        while np.any(bad):
            idx = np.flatnonzero(bad)
            neg[idx] = self.rng.integers(0, self.table.n_items, size=idx.size)
            bad[idx] = self.known[users[idx], neg[idx]]
        return neg

    def sample(self, batch_size: int) -> TripleBatch:
        """``batch_size`` triples with positives drawn uniformly with replacement."""
        pick = self.rng.integers(0, self.train_users.size, size=batch_size)
        users = self.train_users[pick]
        return TripleBatch(users, self.train_items[pick], self._negatives(users))

    def epoch(self, batch_size: int):
        """Every training interaction once, shuffled, each with one fresh negative."""
        perm = self.rng.permutation(self.train_users.size)
        for start in range(0, perm.size, batch_size):
            pick = perm[start:start + batch_size]
            users = self.train_users[pick]
            yield TripleBatch(users, self.train_items[pick], self._negatives(users))


def sample_triples(table: InteractionTable, batch_size: int, rng: np.random.Generator) -> TripleBatch:
    return TripleSampler(table, rng).sample(batch_size)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticData:
    table: InteractionTable
    features: dict[str, np.ndarray]
    user_factors: np.ndarray
    item_factors: np.ndarray


def generate_synthetic(
    users: int = 200,
    items: int = 100,
    dims: dict[str, int] | None = None,
    rank: int = 8,
    noise: float = 0.1,
    seed: int = 0,
    per_user: tuple[int, int] = (10, 14),
    temperature: float = 0.5,
) -> SyntheticData:
    """Shared latent-factor dataset.

    Users and items get Gaussian factors in R^rank. Each user picks
    ``per_user`` items with the highest latent score perturbed by Gumbel
    noise of scale ``temperature``. Each modality sees the item factors
    through its own random linear map plus Gaussian noise of scale ``noise``.
    """
    dims = dict(dims or {"visual": 32, "textual": 16})
    if users < 10 or items < 10:
        raise ConfigError("synthetic data needs at least 10 users and 10 items")
    if not dims or rank < 1 or rank > min(dims.values()):
        raise ConfigError(f"latent rank {rank} must be in [1, min(dims)={min(dims.values()) if dims else 0}]")
    lo, hi = per_user
    if not 1 <= lo <= hi <= items:
        raise ConfigError(f"per-user interaction range {per_user} invalid for {items} items")
    if noise < 0 or temperature < 0:
        raise ConfigError("noise and temperature must be nonnegative")

    rng = make_rng(seed, "synthetic", "factors")
    user_f = rng.standard_normal((users, rank))
    item_f = rng.standard_normal((items, rank))
    scores = user_f @ item_f.T / np.sqrt(rank)

    pick_rng = make_rng(seed, "synthetic", "interactions")
    counts = pick_rng.integers(lo, hi + 1, size=users)
    noisy = scores + temperature * pick_rng.gumbel(size=scores.shape)
    order = np.argsort(-noisy, axis=1, kind="stable")
    u_idx = np.repeat(np.arange(users), counts)
    i_idx = np.concatenate([order[u, :c] for u, c in enumerate(counts)])

    features = {}
    for name, d in dims.items():
        frng = make_rng(seed, "synthetic", "modality", name)
        proj = frng.standard_normal((rank, d)) / np.sqrt(rank)
        feats = item_f @ proj + noise * frng.standard_normal((items, d))
        features[name] = check_features(feats, name)

    table = InteractionTable(
        n_users=users, n_items=items, users=u_idx, items=i_idx,
        tags=np.zeros(u_idx.size, dtype=np.int8),
        user_ids=tuple(f"u{u}" for u in range(users)),
        item_ids=tuple(f"i{i}" for i in range(items)),
    )
    return SyntheticData(table, features, user_f, item_f)
