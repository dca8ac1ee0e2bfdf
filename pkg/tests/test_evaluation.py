import math

import numpy as np
import pytest

from micro.dataset import TEST, TRAIN, InteractionTable, SplitSpec, make_cold_split
from micro.errors import ConfigError, IncompatibleArtifactError
from micro.evaluation import (
    cointeracted_pairs,
    evaluate,
    evaluate_scores,
    evaluate_scores_multi,
    ndcg_at_k,
    pilot_cointeraction_similarity,
    pilot_similar_purchase_proportion,
    precision_at_k,
    rank_items,
    recall_at_k,
)

from metric_cases import CASES
from oracles import ranking_metrics


def table_from(train, test, n_items):
    """Build a table from per-user train/test item lists."""
    users, items, tags = [], [], []
    for u, (tr, te) in enumerate(zip(train, test)):
        for i in tr:
            users.append(u), items.append(i), tags.append(TRAIN)
        for i in te:
            users.append(u), items.append(i), tags.append(TEST)
    return InteractionTable(len(train), n_items, users, items, tags)


class TestRanking:
    def test_order(self):
        assert rank_items(np.array([0.1, 0.9, 0.5])).tolist() == [1, 2, 0]

    def test_exclusions(self):
        assert rank_items(np.array([0.1, 0.9, 0.5]), exclusions=[1]).tolist() == [2, 0]

    def test_ties_lower_index(self):
        assert rank_items(np.array([0.5, 0.7, 0.5, 0.7])).tolist() == [1, 3, 0, 2]

    def test_truncate(self):
        assert rank_items(np.arange(10.0), k=3).tolist() == [9, 8, 7]


class TestMetricCases:
    @pytest.mark.parametrize("name,ranked,test,k,recall,precision,ndcg", CASES, ids=[c[0] for c in CASES])
    def test_case(self, name, ranked, test, k, recall, precision, ndcg):
        assert recall_at_k(ranked, test, k) == pytest.approx(recall, abs=1e-15)
        assert precision_at_k(ranked, test, k) == pytest.approx(precision, abs=1e-15)
        assert ndcg_at_k(ranked, test, k) == pytest.approx(ndcg, abs=1e-15)

    def test_closed_forms(self):
        assert ndcg_at_k(list(range(20)), [1], 20) == pytest.approx(0.63093, abs=5e-6)
        assert precision_at_k(list(range(20)), [3], 20) == 0.05

    def test_empty_test_set(self):
        with pytest.raises(ValueError):
            recall_at_k([0, 1], [], 2)


class TestEvaluateScores:
    def test_matches_loop_oracle(self, rng):
        n_users, n_items = 30, 40
        train, test = [], []
        for _ in range(n_users):
            items = rng.permutation(n_items)[: rng.integers(2, 12)]
            cut = rng.integers(1, items.size)
            train.append(items[:cut].tolist())
            test.append(items[cut:].tolist())
        table = table_from(train, test, n_items)
        # coarse scores produce plenty of ties
        scores = np.round(rng.standard_normal((n_users, n_items)), 1)
        for k in (1, 5, 20):
            rep = evaluate_scores(scores, table, "warm", k)
            per_user = np.array([ranking_metrics(scores[u], train[u], test[u], k) for u in range(n_users)])
            np.testing.assert_allclose([rep.recall, rep.precision, rep.ndcg], per_user.mean(axis=0), atol=1e-14)
            assert rep.users == n_users

    def test_train_items_never_counted(self):
        table = table_from([[0]], [[1]], 3)
        rep = evaluate_scores(np.array([[9.0, 1.0, 0.5]]), table, "warm", 1)
        assert rep.recall == 1.0 and rep.ndcg == 1.0

    def test_users_without_tests_skipped(self):
        table = table_from([[0], [0, 1]], [[2], []], 4)
        rep = evaluate_scores(np.zeros((2, 4)), table, "warm", 2)
        assert rep.users == 1

    def test_perfect_oracle_closed_form(self, rng):
        k = 3
        test = [[1, 2], [3, 4, 5, 6], [0]]
        table = table_from([[7], [7], [7]], test, 8)
        scores = np.zeros((3, 8))
        for u, t in enumerate(test):
            scores[u, t] = 1.0
        rep = evaluate_scores(scores, table, "warm", k)
        assert rep.recall == pytest.approx(np.mean([min(len(t), k) / len(t) for t in test]))
        assert rep.ndcg == pytest.approx(1.0)

    def test_random_scores_baseline(self):
        # with uniform random scores recall@k is k / |candidates| in expectation
        rng = np.random.default_rng(7)
        n_items, k = 50, 10
        table = table_from([[0]] * 400, [[1, 2, 3]] * 400, n_items)
        rep = evaluate_scores(rng.random((400, n_items)), table, "warm", k)
        assert rep.recall == pytest.approx(k / (n_items - 1), abs=0.03)

    def test_multi_equals_single(self, rng):
        table = table_from([[0, 1]] * 5, [[2, 3]] * 5, 10)
        scores = rng.standard_normal((5, 10))
        multi = evaluate_scores_multi(scores, table, "warm", [1, 3, 5])
        for rep in multi:
            assert rep == evaluate_scores(scores, table, "warm", rep.k)

    def test_shape_mismatch(self):
        table = table_from([[0]], [[1]], 3)
        with pytest.raises(IncompatibleArtifactError):
            evaluate_scores(np.zeros((1, 4)), table)

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            evaluate_scores(np.zeros((1, 3)), table_from([[0]], [[1]], 3), k=0)

    def test_bounds(self, rng):
        table = table_from([[0, 1]] * 6, [[2, 3, 4]] * 6, 12)
        rep = evaluate_scores(rng.standard_normal((6, 12)), table, "warm", 2)
        for v in (rep.recall, rep.precision, rep.ndcg):
            assert 0.0 <= v <= 1.0
        assert rep.precision <= 1.0


class TestProtocols:
    def test_cold_without_cold_split(self):
        table = table_from([[0]], [[1]], 3)
        with pytest.raises(IncompatibleArtifactError):
            evaluate_scores(np.zeros((1, 3)), table, "cold")

    def test_unknown_protocol(self):
        with pytest.raises(ConfigError):
            evaluate_scores(np.zeros((1, 3)), table_from([[0]], [[1]], 3), "lukewarm")

    def test_cold_targets_cold_items_only(self, synth):
        table = make_cold_split(synth.table, SplitSpec("cold", seed=0))
        scores = np.random.default_rng(0).standard_normal((table.n_users, table.n_items))
        cold = evaluate_scores(scores, table, "cold")
        # the cold test set is built from items no user trained on, so both views agree
        warm = evaluate_scores(scores, table, "warm")
        assert cold == type(cold)(**{**warm.__dict__, "protocol": "cold"})
        train_items = np.unique(table.items[table.tags == TRAIN])
        assert not np.isin(table.cold_items, train_items).any()

    def test_model_dataset_mismatch(self, synth, warm_table):
        from micro.recommender import MicroModel, TrainerConfig

        model = MicroModel(TrainerConfig(d=4), warm_table, synth.features)
        smaller = InteractionTable(warm_table.n_users, 5, [0], [0], [0])
        with pytest.raises(IncompatibleArtifactError):
            evaluate(model, model.init_params(), smaller)

    def test_evaluate_deterministic(self, synth, warm_table):
        from micro.recommender import MicroModel, TrainerConfig

        model = MicroModel(TrainerConfig(d=8, backbone="mf"), warm_table, synth.features)
        p = model.init_params()
        assert evaluate(model, p, warm_table) == evaluate(model, p, warm_table)


class TestPilot:
    def test_single_pair(self):
        feats = {"v": np.array([[1.0, 1.0], [1.0, 0.0], [0.0, 1.0]])}
        table = InteractionTable(1, 3, [0, 0], [0, 1], [0, 0])
        out = pilot_cointeraction_similarity(feats, table)["v"]
        assert out["co_interacted"] == pytest.approx(1 / math.sqrt(2))
        assert out["all_pairs"] == pytest.approx((2 / math.sqrt(2) + 0.0) / 3)
        assert out["n_pairs"] == 1

    def test_pairs_deduplicated(self):
        table = InteractionTable(2, 3, [0, 0, 1, 1], [0, 1, 0, 1], [0] * 4)
        assert cointeracted_pairs(table).tolist() == [[0, 1]]

    def test_no_pairs_undefined(self):
        table = InteractionTable(2, 3, [0, 1], [0, 1], [0, 0])
        out = pilot_cointeraction_similarity({"v": np.eye(3)}, table)
        assert math.isnan(out["v"]["co_interacted"])

    def test_sampled_all_pairs_close_to_exact(self, synth):
        f = {"v": synth.features["visual"]}
        exact = pilot_cointeraction_similarity(f, synth.table)["v"]["all_pairs"]
        sampled = pilot_cointeraction_similarity(f, synth.table, exact_limit=10, sample_pairs=200000)
        assert sampled["v"]["all_pairs"] == pytest.approx(exact, abs=5e-3)

    def test_synthetic_direction(self, synth):
        for m, r in pilot_cointeraction_similarity(synth.features, synth.table).items():
            assert r["co_interacted"] > r["all_pairs"], m

    def test_proportion_small_example(self):
        # item 1 is item 0's nearest neighbor; item 2 is far from both
        feats = {"v": np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [-1.0, 0.2]])}
        table = InteractionTable(3, 4, [0, 0, 1, 1, 2], [0, 1, 0, 3, 2], [0] * 5)
        out = pilot_similar_purchase_proportion(feats, table, k_list=[1, 3])["v"]
        # user 2 has one item and is dropped; user 0 qualifies at k=1, user 1 only at k=3
        assert out == {1: 0.5, 3: 1.0}

    def test_saturates_at_n_minus_one(self, synth):
        n = synth.table.n_items
        out = pilot_similar_purchase_proportion(synth.features, synth.table, k_list=[n - 1])
        for m in out:
            assert out[m][n - 1] == 1.0

    def test_nondecreasing(self, synth):
        ks = list(range(1, 40, 3))
        for m, row in pilot_similar_purchase_proportion(synth.features, synth.table, ks).items():
            vals = [row[k] for k in ks]
            assert all(a <= b for a, b in zip(vals, vals[1:])), m

    def test_bad_k(self, synth):
        with pytest.raises(ConfigError):
            pilot_similar_purchase_proportion(synth.features, synth.table, k_list=[0])
