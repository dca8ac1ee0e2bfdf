"""Top-k ranking metrics, warm/cold evaluation protocols and the pilot
statistics relating feature similarity to co-interaction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import TEST, TRAIN, VALID, InteractionTable
from .errors import ConfigError, IncompatibleArtifactError

PROTOCOLS = ("warm", "cold")


def rank_items(scores: np.ndarray, exclusions=(), k: int | None = None) -> np.ndarray:
    """Item indices by descending score; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    excl = np.asarray(list(exclusions) if not isinstance(exclusions, np.ndarray) else exclusions, dtype=np.int64)
    if excl.size:
        order = order[~np.isin(order, excl)]
    return order if k is None else order[:k]


def recall_at_k(ranked, test_items, k: int) -> float:
    test = set(int(t) for t in test_items)
    if not test:
        raise ValueError("empty test set")
    hits = sum(1 for i in list(ranked)[:k] if int(i) in test)
    return hits / len(test)


def precision_at_k(ranked, test_items, k: int) -> float:
    test = set(int(t) for t in test_items)
    if not test:
        raise ValueError("empty test set")
    return sum(1 for i in list(ranked)[:k] if int(i) in test) / k


def _idcg(n: int) -> float:
    return sum(1.0 / math.log2(r + 1) for r in range(1, n + 1))


def ndcg_at_k(ranked, test_items, k: int) -> float:
    test = set(int(t) for t in test_items)
    if not test:
        raise ValueError("empty test set")
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(list(ranked)[:k]) if int(i) in test)
    return dcg / _idcg(min(len(test), k))


@dataclass
class MetricReport:
    recall: float
    precision: float
    ndcg: float
    users: int
    protocol: str
    k: int

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "k": self.k, f"recall@{self.k}": self.recall,
                f"precision@{self.k}": self.precision, f"ndcg@{self.k}": self.ndcg, "users": self.users}


def _targets(table: InteractionTable, protocol: str, split: int) -> list[np.ndarray]:
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    targets = table.positives(split)
    if protocol == "cold":
        if table.cold_items.size == 0:
            raise IncompatibleArtifactError("cold protocol needs a cold split")
        targets = [t[np.isin(t, table.cold_items)] for t in targets]
    return targets


def evaluate_scores(scores: np.ndarray, table: InteractionTable, protocol: str = "warm",
                    k: int = 20, split: int = TEST, block: int = 2048) -> MetricReport:
    """Full-ranking metrics averaged over users with a nonempty target set.

    Candidates are all items outside the user's training positives, in both
    protocols; under ``cold`` the targets are the user's held-out cold items.
    """
    return evaluate_scores_multi(scores, table, protocol, [k], split, block)[0]


def evaluate_scores_multi(scores: np.ndarray, table: InteractionTable, protocol: str,
                          ks: list[int], split: int = TEST, block: int = 2048) -> list[MetricReport]:
    if scores.shape != (table.n_users, table.n_items):
        raise IncompatibleArtifactError(
            f"score matrix {scores.shape} does not match dataset ({table.n_users}, {table.n_items})")
    if min(ks) < 1:
        raise ConfigError("k must be >= 1")
    targets = _targets(table, protocol, split)
    train = table.interaction_matrix(TRAIN)
    has_train = train.any(axis=1)
    users = np.array([u for u in range(table.n_users) if targets[u].size and has_train[u]], dtype=np.int64)
    kmax = max(ks)
    sums = {k: np.zeros(3) for k in ks}
    discounts = 1.0 / np.log2(np.arange(2, kmax + 2))
    idcg_table = np.concatenate([[0.0], np.cumsum(discounts)])
    for start in range(0, users.size, block):
        uu = users[start:start + block]
        s = np.array(scores[uu], dtype=np.float64)
        s[train[uu]] = -np.inf
        top = np.argsort(-s, axis=1, kind="stable")[:, :kmax]
        valid_top = np.take_along_axis(s, top, axis=1) > -np.inf
        truth = np.zeros((uu.size, table.n_items), dtype=bool)
        for r, u in enumerate(uu):
            truth[r, targets[u]] = True
        hits = np.take_along_axis(truth, top, axis=1) & valid_top
        n_true = truth.sum(axis=1)
        for k in ks:
            h = hits[:, :k]
            n_hit = h.sum(axis=1)
            dcg = (h * discounts[:k]).sum(axis=1)
            sums[k] += (
                (n_hit / n_true).sum(),
                (n_hit / k).sum(),
                (dcg / idcg_table[np.minimum(n_true, k)]).sum(),
            )
    n = max(users.size, 1)
    return [MetricReport(sums[k][0] / n, sums[k][1] / n, sums[k][2] / n, int(users.size), protocol, k)
            for k in ks]


def evaluate(model, params, table: InteractionTable, protocol: str = "warm", k=20,
             split: int = TEST) -> MetricReport | list[MetricReport]:
    """Score every (user, item) pair with a trained model and compute metrics."""
    if model.n_items != table.n_items or model.n_users != table.n_users:
        raise IncompatibleArtifactError(
            f"model built for {model.n_users} users/{model.n_items} items, dataset has "
            f"{table.n_users}/{table.n_items}")
    model.check_params(params)
    scores = model.forward(params).scores()
    if isinstance(k, (list, tuple)):
        return evaluate_scores_multi(scores, table, protocol, list(k), split)
    return evaluate_scores(scores, table, protocol, k, split)


# ---------------------------------------------------------------------------
# pilot statistics


def _cosine_matrix(features: np.ndarray) -> np.ndarray:
    unit = features / np.linalg.norm(features, axis=1, keepdims=True)
    return np.clip(unit @ unit.T, -1.0, 1.0)


def cointeracted_pairs(table: InteractionTable) -> np.ndarray:
    """Unique (a, b) item pairs with a < b bought by at least one common user."""
    keys = []
    n = table.n_items
    for items in table.positives():
        if items.size < 2:
            continue
        a, b = np.triu_indices(items.size, k=1)
        keys.append(items[a] * n + items[b])
    if not keys:
        return np.zeros((0, 2), dtype=np.int64)
    uniq = np.unique(np.concatenate(keys))
    return np.stack([uniq // n, uniq % n], axis=1)


def pilot_cointeraction_similarity(features: dict[str, np.ndarray], table: InteractionTable,
                                   exact_limit: int = 5000, sample_pairs: int = 10**6,
                                   seed: int = 0) -> dict[str, dict[str, float]]:
    """Mean cosine similarity over all item pairs vs. co-interacted pairs."""
    pairs = cointeracted_pairs(table)
    out = {}
    for m, feats in features.items():
        n = feats.shape[0]
        unit = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        if n <= exact_limit:
            s = _cosine_matrix(feats)
            iu = np.triu_indices(n, k=1)
            all_mean = float(s[iu].mean())
        else:
            rng = np.random.default_rng(seed)
            a = rng.integers(0, n, sample_pairs)
            b = rng.integers(0, n - 1, sample_pairs)
            b = b + (b >= a)
            all_mean = float(np.einsum("ij,ij->i", unit[a], unit[b]).mean())
        if pairs.size:
            co_mean = float(np.einsum("ij,ij->i", unit[pairs[:, 0]], unit[pairs[:, 1]]).mean())
        else:
            co_mean = float("nan")
        out[m] = {"all_pairs": all_mean, "co_interacted": co_mean, "n_pairs": int(len(pairs))}
    return out


def pilot_similar_purchase_proportion(features: dict[str, np.ndarray], table: InteractionTable,
                                      k_list=(5, 10, 15, 20)) -> dict[str, dict[int, float]]:
    """Share of users owning a pair where one item is among the other's k most similar.

    The item itself is excluded from its own neighbor list; users with fewer
    than two items are left out of the denominator.
    """
    k_list = [int(k) for k in k_list]
    out = {}
    baskets = [b for b in table.positives() if b.size >= 2]
    for m, feats in features.items():
        n = feats.shape[0]
        if any(k < 1 or k > n - 1 for k in k_list):
            raise ConfigError(f"k values must lie in [1, {n - 1}]")
        s = _cosine_matrix(feats)
        s[np.diag_indices(n)] = -np.inf
        order = np.argsort(-s, axis=1, kind="stable")
        rank = np.empty_like(order)
        rank[np.arange(n)[:, None], order] = np.arange(n)[None, :]
        best = np.empty(len(baskets), dtype=np.int64)
        for idx, items in enumerate(baskets):
            sub = rank[np.ix_(items, items)]
            mutual = np.minimum(sub, sub.T)
            mutual[np.diag_indices(items.size)] = n
            best[idx] = mutual.min()
        denom = max(len(baskets), 1)
        out[m] = {k: float((best < k).sum() / denom) for k in k_list}
    return out
