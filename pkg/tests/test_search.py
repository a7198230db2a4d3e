import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bamg.basegraph import Graph
from bamg.cli import BuildConfig, build_index, load_engine
from bamg.core import Dataset, clustered_split, exact_knn, exact_knn_batch
from bamg.pq import PQCodebook, encode
from bamg.search import (CandidatePool, SearchParams, SearchResult, evaluate, recall_at_k,
                         search_baseline, search_bamg, search_within_block)
from bamg.storage import GraphBlock, IoCounter, LayoutParams, write_index_baseline


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            SearchParams(k=10, l=5)
        with pytest.raises(ValueError):
            SearchParams(alpha=0)
        with pytest.raises(ValueError):
            SearchParams(refine="some")


class TestPool:
    def test_truncation_and_order(self):
        p = CandidatePool(3)
        for node, est in [(5, 3.0), (1, 1.0), (7, 2.0), (9, 0.5)]:
            p.insert(node, est)
        assert p.ids() == [9, 1, 7]
        assert 5 not in p
        assert not p.insert(1, 0.1)  # duplicates are ignored
        assert not p.insert(4, 9.0)  # worse than the tail of a full pool

    def test_first_unchecked(self):
        p = CandidatePool(4)
        p.insert(1, 1.0)
        p.insert(2, 2.0)
        assert p.next_unchecked() == 1
        p.mark_checked(1)
        assert p.next_unchecked() == 2
        p.insert(3, 0.5)
        assert p.next_unchecked() == 3

    def test_ties_by_id(self):
        p = CandidatePool(2)
        p.insert(8, 1.0)
        p.insert(3, 1.0)
        p.insert(5, 1.0)
        assert p.ids() == [3, 5]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 12), st.lists(st.tuples(st.integers(0, 30), st.floats(0, 10)),
                                        max_size=80))
    def test_invariants(self, cap, ops):
        p = CandidatePool(cap)
        for node, est in ops:
            p.insert(node, est)
            p.check()
            if node in p and node % 3 == 0:
                p.mark_checked(node)
        nxt = p.next_unchecked()
        if nxt is not None:
            assert all(p.checked[i] for i in p.ids()[:p.ids().index(nxt)])


def chain_block():
    """Six records on a line; q sits at 0.

    slot: 0=v(10) 1=a(8) 2=b(6) 3=t(1) 4=x(9, farther than a) 5=y(20)
    edges: v->a,y ; a->b ; b->t ; x->v ; others none
    """
    pos = np.array([10.0, 8.0, 6.0, 1.0, 9.0, 20.0])
    nbrs = [[1, 5], [2], [3], [], [0], []]
    R = 2
    arr = np.full((6, R), 0xFFFFFFFF, dtype=np.int64)
    for i, nb in enumerate(nbrs):
        arr[i, :len(nb)] = nb
    blk = GraphBlock(0, np.arange(6), np.arange(6), np.array([len(x) for x in nbrs]), arr)
    cb = PQCodebook(pos.reshape(1, 6, 1), 1)
    codes = encode(cb, pos.reshape(-1, 1))
    return blk, cb.query_table(np.array([0.0])), codes


class TestWithinBlock:
    def run(self, alpha):
        blk, qt, codes = chain_block()
        pool = CandidatePool(10)
        pool.insert(0, float(qt[0, codes[0, 0]]))
        pops = search_within_block(blk, 0, qt, codes, pool, alpha, set(), capacity=6)
        return pool, pops

    def test_alpha_one_inserts_only_direct_neighbours(self):
        pool, pops = self.run(1)
        assert pops == 1 and sorted(pool.ids()) == [0, 1, 5]

    @pytest.mark.parametrize("alpha,head", [(1, 1), (2, 2), (3, 3), (4, 3), (6, 3)])
    def test_target_three_hops_away_needs_alpha_three(self, alpha, head):
        pool, _ = self.run(alpha)
        assert pool.ids()[0] == head

    def test_local_minimum_stops_after_one_pop(self):
        blk, qt, codes = chain_block()
        pool = CandidatePool(10)
        # start at t: it has no neighbours at all; start at x: its only
        # neighbour v is farther than x
        assert search_within_block(blk, 4, qt, codes, pool, 5, set(), 6) == 1
        assert pool.ids() == [0]

    def test_explored_set_is_shared(self):
        blk, qt, codes = chain_block()
        pool = CandidatePool(10)
        assert search_within_block(blk, 0, qt, codes, pool, 5, {1}, 6) == 1


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("search")
    ds, qs = clustered_split(1000, 100, 8, n_clusters=8, seed=5, spread=4.0)
    cfg = dict(R=16, L_build=32, C_cand=100, knn_k=16, k_codes=32, pq_iters=4)
    build_index(ds, BuildConfig(layout="bamg", gamma=16, **cfg), root / "b")
    build_index(ds, BuildConfig(layout="baseline", **cfg), root / "base")
    mk, ix = load_engine(root / "b", "bamg", SearchParams())
    mb, bx = load_engine(root / "base", "baseline", SearchParams())
    return ds, qs, mk, mb, ix, bx


class TestOracleEquality:
    def test_exhaustive_bamg(self, small):
        ds, qs, mk, _, ix, _ = small
        eng = mk(SearchParams(k=10, l=ds.n, alpha=ix.c))
        for q in qs:
            np.testing.assert_array_equal(eng(q).ids, exact_knn(ds, q, 10).ids)

    def test_exhaustive_baseline(self, small):
        ds, qs, _, mb, _, _ = small
        eng = mb(SearchParams(k=10, l=ds.n))
        for q in qs:
            np.testing.assert_array_equal(eng(q).ids, exact_knn(ds, q, 10).ids)

    def test_query_equal_to_point(self, small):
        ds, _, mk, mb, _, _ = small
        for make in (mk, mb):
            eng = make(SearchParams(k=5, l=40))
            for v in (0, 333, 999):
                assert eng(ds[v]).ids[0] == v

    def test_refinement_is_exact_rescoring(self, small):
        ds, qs, mk, _, _, _ = small
        r = mk(SearchParams(k=10, l=30))(qs[0])
        np.testing.assert_allclose(r.dists, ((ds.vectors[r.ids] - qs[0]) ** 2).sum(1), rtol=1e-5)
        assert np.all(np.diff(r.dists) >= 0)

    def test_k_too_large(self, small):
        ds, qs, mk, mb, ix, bx = small
        with pytest.raises(ValueError):
            search_bamg(ix, None, qs[0], SearchParams(k=1001, l=1001))
        with pytest.raises(ValueError):
            search_baseline(bx, qs[0], SearchParams(k=1001, l=1001))
        with pytest.raises(ValueError):
            search_bamg(ix, None, qs[0][:4], SearchParams())


class TestIoAccounting:
    def test_each_block_charged_once(self, small):
        ds, qs, mk, _, ix, _ = small
        for q in qs[:20]:
            r = mk(SearchParams(k=10, l=80))(q)
            assert r.io.graph_block_reads <= ix.m
            assert r.io.graph_block_reads <= r.expansions
            assert r.io.nio == r.io.graph_block_reads + r.io.raw_block_reads

    def test_refine_two_k_reads_less(self, small):
        ds, qs, mk, _, _, _ = small
        full = evaluate(qs, exact_knn_batch(ds, qs, 10), mk(SearchParams(k=10, l=100)), 10)
        two = evaluate(qs, exact_knn_batch(ds, qs, 10), mk(SearchParams(k=10, l=100, refine="2k")), 10)
        assert two.raw_reads <= full.raw_reads and two.graph_reads == full.graph_reads

    def test_single_node_baseline(self, tmp_path):
        ds = Dataset(np.array([[1.0, 1.0]]))
        cb = PQCodebook(np.ones((1, 1, 2)), 2)
        bx = write_index_baseline(Graph.from_lists([[]]), ds, cb, encode(cb, ds), LayoutParams(),
                                  tmp_path / "one")
        r = search_baseline(bx, np.zeros(2), SearchParams(k=1, l=1))
        assert r.ids.tolist() == [0] and r.io.graph_block_reads == 1


class TestEvaluate:
    def fake(self, ids):
        return lambda q: SearchResult(np.asarray(ids), np.zeros(len(ids)), IoCounter(2, 3))

    def test_trivial_recalls(self):
        gt = np.array([[1, 2, 3]])
        q = np.zeros((1, 2))
        assert evaluate(q, gt, self.fake([3, 2, 1]), 3).recall == 1.0
        m = evaluate(q, gt, self.fake([7, 8, 9]), 3)
        assert m.recall == 0.0 and m.nio == 5.0

    def test_exact_engine(self, small):
        ds, qs, *_ = small
        gt = exact_knn_batch(ds, qs, 10)
        eng = lambda q: SearchResult(exact_knn(ds, q, 10).ids, np.zeros(10), IoCounter())  # noqa: E731
        assert evaluate(qs, gt, eng, 10, threads=4).recall == 1.0

    def test_missing_ground_truth(self):
        with pytest.raises(ValueError):
            evaluate(np.zeros((3, 2)), np.zeros((2, 5), int), self.fake([0]), 1)
        with pytest.raises(ValueError):
            evaluate(np.zeros((1, 2)), np.zeros((1, 5), int), self.fake([0]), 10)

    def test_recall_at_k(self):
        assert recall_at_k([1, 2, 3, 4], [4, 3, 9, 9], 2) == 0.0
        assert recall_at_k([1, 2], [2, 1], 2) == 1.0


@pytest.fixture(scope="module")
def medium(tmp_path_factory):
    root = tmp_path_factory.mktemp("medium")
    ds, qs = clustered_split(10_000, 1000, 16, n_clusters=16, seed=2, spread=8.0, latent_dim=8)
    cfg = dict(R=16, L_build=40, C_cand=200, knn_k=16, k_codes=64, pq_iters=6)
    build_index(ds, BuildConfig(layout="bamg", **cfg), root / "b")
    build_index(ds, BuildConfig(layout="baseline", **cfg), root / "base")
    mk, _ = load_engine(root / "b", "bamg", SearchParams())
    mb, _ = load_engine(root / "base", "baseline", SearchParams())
    return ds, qs, exact_knn_batch(ds, qs, 10), mk, mb


class TestMedium:
    def test_recall_non_decreasing_in_l(self, medium):
        ds, qs, gt, mk, _ = medium
        recs = [evaluate(qs, gt, mk(SearchParams(k=10, l=l)), 10).recall for l in (10, 20, 40, 80)]
        assert all(b >= a for a, b in zip(recs, recs[1:]))

    def test_recall_comparable_to_baseline(self, medium):
        ds, qs, gt, mk, mb = medium
        for l in (40, 80):
            a = evaluate(qs, gt, mk(SearchParams(k=10, l=l)), 10).recall
            b = evaluate(qs, gt, mb(SearchParams(k=10, l=l)), 10).recall
            print(f"l={l} bamg {a:.4f} baseline {b:.4f}")
            assert abs(a - b) <= 0.02
