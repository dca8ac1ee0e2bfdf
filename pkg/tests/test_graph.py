import logging

import numpy as np
import pytest

from micro.errors import ConfigError, NumericalError, ShapeError
from micro.graph import (
    BLENDED,
    INITIAL,
    blend_graphs,
    blended_backward,
    build_initial_graph,
    build_learned_graph,
    cached_initial_graph,
    cosine_similarity_block,
    learned_graph_backward,
    normalize_symmetric,
    read_graph,
    select_edges,
    sparsify_topk,
    transform_backward,
    transform_features,
    write_graph,
)
from micro.numerics import SparseMatrix, finite_difference_check

from oracles import dense_topk_graph


class TestCosine:
    def test_orthogonal(self):
        s = cosine_similarity_block(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert s[0, 1] == 0.0

    def test_half_angle(self):
        s = cosine_similarity_block(np.array([[1.0, 1.0], [1.0, 0.0]]))
        assert s[0, 1] == pytest.approx(1 / np.sqrt(2), abs=1e-15)

    def test_diagonal_and_range(self, rng):
        s = cosine_similarity_block(rng.standard_normal((20, 5)))
        np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-15)
        assert s.min() >= -1.0 and s.max() <= 1.0

    def test_block_rows_match_full(self, rng):
        x = rng.standard_normal((10, 4))
        np.testing.assert_array_equal(cosine_similarity_block(x, range(3, 7)), cosine_similarity_block(x)[3:7])

    def test_zero_row_aborts_with_index(self):
        with pytest.raises(NumericalError, match="item 1"):
            cosine_similarity_block(np.array([[1.0, 0.0], [0.0, 0.0]]))

    def test_scale_invariance(self, rng):
        x = rng.standard_normal((12, 6))
        scaled = x * rng.uniform(0.5, 4.0, size=(12, 1))
        a, b = build_initial_graph(x, k=4), build_initial_graph(scaled, k=4)
        np.testing.assert_array_equal(a.adjacency.indices, b.adjacency.indices)
        np.testing.assert_allclose(a.adjacency.data, b.adjacency.data, rtol=0, atol=1e-15)


class TestSparsify:
    def test_row_example(self):
        a = sparsify_topk(np.array([[0.9, 0.2, 0.5, -0.1]]), 2)
        np.testing.assert_array_equal(a.indices, [0, 2])
        np.testing.assert_array_equal(a.data, [0.9, 0.5])

    def test_all_negative_row_empty(self):
        assert sparsify_topk(np.array([[-0.3, -0.1]]), 1).nnz == 0

    def test_k_equal_n_is_suppressed_row(self):
        row = np.array([[0.4, -0.2, 0.1, 0.0, 0.7]])
        dense = sparsify_topk(row, 5).toarray()
        np.testing.assert_array_equal(dense, np.maximum(row, 0.0))

    def test_k_beyond_n_keeps_all(self):
        assert sparsify_topk(np.array([[0.4, 0.2]]), 10).nnz == 2

    def test_ties_prefer_lower_column(self):
        a = sparsify_topk(np.array([[0.5, 0.5, 0.5, 0.5]]), 2)
        np.testing.assert_array_equal(a.indices, [0, 1])

    def test_directed(self):
        s = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.8], [0.1, 0.8, 1.0]])
        a = sparsify_topk(s, 2).toarray()
        # row 2 keeps column 1, row 1 does not keep column 2
        assert a[2, 1] == 0.8 and a[1, 2] == 0.0

    def test_k_zero_rejected(self):
        with pytest.raises(ConfigError):
            sparsify_topk(np.eye(2), 0)


class TestNormalize:
    def test_two_by_two(self):
        out = normalize_symmetric(SparseMatrix.from_dense(np.array([[1.0, 0.5], [0.5, 1.0]])))
        np.testing.assert_allclose(out.toarray(), [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-15)

    def test_single_self_loop(self):
        out = normalize_symmetric(SparseMatrix.from_dense(np.array([[0.37]])))
        assert out.data[0] == pytest.approx(1.0)

    def test_empty(self):
        out = normalize_symmetric(SparseMatrix((3, 3), [0, 0, 0, 0], [], []))
        assert out.nnz == 0

    def test_zero_row_degree_column_gets_zero(self):
        # node 1 has an incoming edge but no outgoing ones: row degree 0, factor 0
        out = normalize_symmetric(SparseMatrix.from_dense(np.array([[1.0, 2.0], [0.0, 0.0]])))
        assert out.toarray()[0, 1] == 0.0
        assert out.toarray()[0, 0] == pytest.approx(1 / 3)

    def test_negative_rejected(self):
        bad = SparseMatrix((1, 1), [0, 1], [0], [-1.0], validate=False)
        with pytest.raises(NumericalError):
            normalize_symmetric(bad)

    def test_not_square(self):
        with pytest.raises(ShapeError):
            normalize_symmetric(SparseMatrix((1, 2), [0, 1], [1], [1.0]))


class TestInitialGraph:
    def test_four_items_oracle(self, rng):
        x = rng.standard_normal((4, 3))
        g = build_initial_graph(x, k=2)
        np.testing.assert_allclose(g.adjacency.toarray(), dense_topk_graph(x, 2), rtol=0, atol=1e-12)
        assert g.stage == INITIAL

    @pytest.mark.parametrize("seed", range(10))
    def test_random_oracle(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 65))
        x = r.standard_normal((n, int(r.integers(2, 9))))
        k = int(r.integers(1, n + 2))
        for keep in (True, False):
            g = build_initial_graph(x, k=k, keep_self_loops=keep, block_rows=7)
            np.testing.assert_allclose(g.adjacency.toarray(), dense_topk_graph(x, k, keep), rtol=0, atol=1e-12)

    def test_identical_rows_uniform(self):
        g = build_initial_graph(np.ones((6, 3)), k=3)
        assert (g.adjacency.row_nnz() == 3).all()
        np.testing.assert_allclose(g.adjacency.data, 1 / 3)

    def test_self_loop_kept_by_default(self, rng):
        x = rng.standard_normal((15, 4))
        dense = build_initial_graph(x, k=3).adjacency.toarray()
        assert (np.diag(dense) > 0).all()
        dense = build_initial_graph(x, k=3, keep_self_loops=False).adjacency.toarray()
        assert (np.diag(dense) == 0).all()

    def test_row_nnz_at_most_k(self, rng):
        g = build_initial_graph(rng.standard_normal((30, 5)), k=4)
        assert g.adjacency.row_nnz().max() <= 4

    def test_block_size_irrelevant(self, rng):
        x = rng.standard_normal((25, 4))
        a = build_initial_graph(x, k=5, block_rows=1).adjacency
        b = build_initial_graph(x, k=5, block_rows=1000).adjacency
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.data, b.data)


class TestTransform:
    def test_identity(self, rng):
        x = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(transform_features(x, np.eye(3), np.zeros(3)), x)

    def test_constant(self, rng):
        x = rng.standard_normal((5, 3))
        c = np.array([1.0, -2.0])
        np.testing.assert_array_equal(transform_features(x, np.zeros((2, 3)), c), np.tile(c, (5, 1)))

    def test_bias_gradient_is_column_sum(self, rng):
        x = rng.standard_normal((6, 3))

        def loss(p):
            e = transform_features(x, p["w"], p["b"])
            dw, db = transform_backward(x, e)
            return 0.5 * float(np.sum(e * e)), {"w": dw, "b": db}

        params = {"w": rng.standard_normal((4, 3)), "b": rng.standard_normal(4)}
        _, grads = loss(params)
        np.testing.assert_allclose(grads["b"], transform_features(x, params["w"], params["b"]).sum(axis=0))
        assert finite_difference_check(loss, params).passed

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            transform_features(rng.standard_normal((3, 2)), np.ones((2, 3)), np.zeros(2))


class TestLearnedGraph:
    def test_identity_transform_equals_initial(self, rng):
        x = rng.standard_normal((12, 4))
        learned = build_learned_graph(transform_features(x, np.eye(4), np.zeros(4)), k=3)
        initial = build_initial_graph(x, k=3)
        np.testing.assert_array_equal(learned.adjacency.indices, initial.adjacency.indices)
        np.testing.assert_allclose(learned.adjacency.data, initial.adjacency.data, atol=1e-15)

    def test_four_items_random_w_oracle(self, rng):
        x = rng.standard_normal((4, 3))
        w, b = rng.standard_normal((5, 3)), rng.standard_normal(5)
        e = transform_features(x, w, b)
        np.testing.assert_allclose(build_learned_graph(e, k=2).adjacency.toarray(), dense_topk_graph(e, 2),
                                   atol=1e-12)

    def test_zero_norm_row_drops_out(self, rng, caplog):
        e = rng.standard_normal((5, 3))
        e[2] = 0.0
        with caplog.at_level(logging.WARNING):
            g = build_learned_graph(e, k=3)
        dense = g.adjacency.toarray()
        assert not dense[2].any() and not dense[:, 2].any()
        assert "zero norm" in caplog.text

    def _edge_loss(self, x, k, weights, edges=None):
        def loss(p):
            e = transform_features(x, p["w"], p["b"])
            g = build_learned_graph(e, k=k, edges=edges)
            c = weights[: g.adjacency.nnz]
            de = learned_graph_backward(g, c)
            dw, db = transform_backward(x, de)
            return float(c @ g.adjacency.data), {"w": dw, "b": db}

        return loss

    def test_gradient_single_edge(self, rng):
        x = rng.standard_normal((6, 4))
        params = {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(3)}
        edges = build_learned_graph(transform_features(x, params["w"], params["b"]), k=3)
        rows, cols = edges.tape["rows"], edges.tape["cols"]
        off = np.flatnonzero(rows != cols)[0]
        weights = np.zeros(rows.size)
        weights[off] = 1.0
        rep = finite_difference_check(self._edge_loss(x, 3, weights, (rows, cols)), params)
        assert rep.max_error < 1e-6

    def test_gradient_all_edges(self, rng):
        x = rng.standard_normal((9, 5))
        params = {"w": rng.standard_normal((4, 5)), "b": rng.standard_normal(4)}
        g0 = build_learned_graph(transform_features(x, params["w"], params["b"]), k=4)
        weights = rng.standard_normal(g0.adjacency.nnz)
        rep = finite_difference_check(self._edge_loss(x, 4, weights, (g0.tape["rows"], g0.tape["cols"])), params)
        assert rep.max_error < 1e-6


class TestBlend:
    def _pair(self, rng, n=10, k=3):
        x = rng.standard_normal((n, 4))
        initial = build_initial_graph(x, k=k)
        learned = build_learned_graph(x @ rng.standard_normal((4, 4)), k=k)
        return initial, learned

    def test_shared_edge_value(self):
        a = SparseMatrix.from_dense(np.array([[0.5, 0.0], [0.0, 0.0]]))
        b = SparseMatrix.from_dense(np.array([[0.1, 0.2], [0.0, 0.0]]))
        from micro.graph import ModalityGraph, LEARNED

        g = blend_graphs(ModalityGraph("v", a, INITIAL, 1), ModalityGraph("v", b, LEARNED, 1), 0.7)
        assert g.adjacency.toarray()[0, 0] == pytest.approx(0.38, abs=1e-15)
        assert g.adjacency.toarray()[0, 1] == pytest.approx(0.06, abs=1e-15)
        assert g.stage == BLENDED

    def test_lambda_one_is_initial(self, rng):
        initial, learned = self._pair(rng)
        g = blend_graphs(initial, learned, 1.0)
        np.testing.assert_array_equal(g.adjacency.toarray(), initial.adjacency.toarray())

    def test_lambda_zero_is_learned(self, rng):
        initial, learned = self._pair(rng)
        g = blend_graphs(initial, learned, 0.0)
        np.testing.assert_array_equal(g.adjacency.toarray(), learned.adjacency.toarray())

    def test_convex_combination_dense(self, rng):
        initial, learned = self._pair(rng)
        g = blend_graphs(initial, learned, 0.3)
        np.testing.assert_allclose(
            g.adjacency.toarray(), 0.3 * initial.adjacency.toarray() + 0.7 * learned.adjacency.toarray(), atol=1e-15)
        assert g.adjacency.row_nnz().max() <= 2 * 3
        assert (g.adjacency.data >= 0).all() and np.isfinite(g.adjacency.data).all()

    def test_row_sum_bound(self, rng):
        initial, learned = self._pair(rng)
        g = blend_graphs(initial, learned, 0.7)
        rs = lambda a: a.toarray().sum(axis=1)
        bound = 0.7 * rs(initial.adjacency) + 0.3 * rs(learned.adjacency)
        assert (rs(g.adjacency) <= bound + 1e-12).all()

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_out_of_range(self, rng, lam):
        initial, learned = self._pair(rng)
        with pytest.raises(ConfigError):
            blend_graphs(initial, learned, lam)

    def test_gradient_through_blend(self, rng):
        x = rng.standard_normal((10, 4))
        initial = build_initial_graph(x, k=3)
        params = {"w": rng.standard_normal((5, 4)), "b": rng.standard_normal(5)}
        g0 = build_learned_graph(transform_features(x, params["w"], params["b"]), k=3)
        edges = (g0.tape["rows"], g0.tape["cols"])
        weights = rng.standard_normal(200)

        def loss(p):
            e = transform_features(x, p["w"], p["b"])
            g = blend_graphs(initial, build_learned_graph(e, k=3, edges=edges), 0.7)
            c = weights[: g.adjacency.nnz]
            dw, db = transform_backward(x, blended_backward(g, c))
            return float(c @ g.adjacency.data), {"w": dw, "b": db}

        assert finite_difference_check(loss, params).max_error < 1e-4


class TestCache:
    def test_roundtrip_file(self, tmp_path, rng):
        g = build_initial_graph(rng.standard_normal((8, 3)), k=3)
        write_graph(tmp_path / "g.mgr", g)
        back = read_graph(tmp_path / "g.mgr")
        np.testing.assert_array_equal(back.adjacency.data, g.adjacency.data)
        assert back.k == 3 and back.stage == INITIAL
        assert (tmp_path / "g.mgr").read_bytes()[:4] == b"MGR1"

    def test_cached_equals_fresh(self, tmp_path, rng):
        x = rng.standard_normal((8, 3))
        a = cached_initial_graph(x, 3, cache_dir=tmp_path)
        b = cached_initial_graph(x, 3, cache_dir=tmp_path)
        assert len(list(tmp_path.glob("*.mgr"))) == 1
        np.testing.assert_array_equal(a.adjacency.data, b.adjacency.data)
        cached_initial_graph(x, 4, cache_dir=tmp_path)
        assert len(list(tmp_path.glob("*.mgr"))) == 2

    def test_env_var(self, tmp_path, rng, monkeypatch):
        monkeypatch.setenv("MICRO_CACHE_DIR", str(tmp_path / "c"))
        cached_initial_graph(rng.standard_normal((5, 2)), 2)
        assert len(list((tmp_path / "c").glob("*.mgr"))) == 1

    def test_select_edges_sorted(self, rng):
        rows, cols = select_edges(rng.standard_normal((20, 3)), 4)
        keys = rows * 20 + cols
        assert (np.diff(keys) > 0).all()
