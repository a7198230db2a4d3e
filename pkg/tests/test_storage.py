import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bamg.basegraph import Graph
from bamg.blocks import BlockAssignment, assign_blocks_random
from bamg.core import Dataset, uniform_dataset
from bamg.pq import encode, train_pq
from bamg.storage import (SENTINEL, BaselineIndex, DiskIndex, IoCounter, LayoutParams,
                          RawPlacement, baseline_record_bytes, open_index, read_meta,
                          write_index, write_index_baseline)

import oracles


def random_graph(n, max_deg, seed):
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(n):
        others = np.delete(np.arange(n), u)
        k = int(rng.integers(0, min(max_deg, n - 1) + 1))
        rows.append(rng.choice(others, size=k, replace=False).tolist())
    return Graph.from_lists(rows)


def build(tmp_path, n, dim, R_max=31, seed=0, block_bytes=4096, pq=False):
    lp = LayoutParams(block_bytes, R_max)
    ds = uniform_dataset(n, dim, seed=seed)
    g = random_graph(n, R_max, seed)
    b = assign_blocks_random(n, lp.capacity, seed)
    cb = codes = None
    if pq:
        cb = train_pq(ds, m_sub=1, k_codes=min(n, 16), iters=2)
        codes = encode(cb, ds)
    return ds, g, b, write_index(g, b, ds, cb, codes, lp, tmp_path / "ix")


class TestArithmetic:
    def test_default_capacity(self):
        lp = LayoutParams()
        assert lp.record_bytes == 134 and lp.capacity == 30
        assert lp.block_dtype().itemsize == 4096

    def test_r15_capacity(self):
        assert LayoutParams(4096, 15).capacity == 4092 // 70

    def test_gist_one_vector_per_block(self):
        rp = RawPlacement(4096, 960, 30)
        assert rp.vpb == 1 and rp.group == 30
        assert rp.locate(31) == (31, 0, 1)

    def test_small_dim_shares_blocks(self):
        rp = RawPlacement(4096, 128, 30)
        assert rp.vpb == 8 and rp.group == 4
        assert rp.locate(30 + 9) == (4 + 1, 512, 1)

    def test_vector_larger_than_block(self):
        rp = RawPlacement(512, 200, 3)
        assert rp.vpb == 0 and rp.span == 2 and rp.group == 6
        assert rp.locate(4) == (8, 0, 2)

    def test_block_too_small(self):
        with pytest.raises(ValueError):
            LayoutParams(100, 31)

    def test_baseline_record(self):
        assert baseline_record_bytes(128, 31) == 640
        assert 4096 // 640 == 6


class TestRoundTrip:
    def test_single_node(self, tmp_path):
        ds = Dataset(np.array([[1.0, 2.0]]))
        ix = write_index(Graph.from_lists([[]]), BlockAssignment.from_members([[0]], 30), ds,
                         None, None, LayoutParams(), tmp_path / "one")
        assert (ix.m, ix.header["raw_blocks"]) == (1, 1)
        assert ix.oid_of(0) == 0

    @pytest.mark.parametrize("cfg", range(20))
    def test_randomized(self, tmp_path, cfg):
        rng = np.random.default_rng(cfg)
        dim = [2, 128, 960][cfg % 3]
        R = [15, 31][(cfg // 3) % 2]
        n = int(rng.integers(1, 160))
        ds, g, b, ix = build(tmp_path, n, dim, R, seed=cfg)
        g2, b2, ds2 = ix.load_all()
        assert g2 == g
        assert np.array_equal(b2.label, b.label)
        assert ds2.vectors.tobytes() == ds.vectors.tobytes()
        assert ix.header["truncated_edges"] == 0

    def test_oid_bijection(self, tmp_path):
        ds, g, b, ix = build(tmp_path, 200, 8)
        for v in range(200):
            o = ix.oid_of(v)
            assert ix.vid_of(o) == v and o // ix.c == b.label[v]
        with pytest.raises(ValueError):
            ix.vid_of(ix.m * ix.c - 1)  # last block has 200 - 6*30 = 20 members

    def test_records_and_sentinel(self, tmp_path):
        ds, g, b, ix = build(tmp_path, 50, 4)
        blk = ix.read_graph_block(0, IoCounter())
        for slot, (oid, vid, nbrs) in enumerate(blk.records()):
            assert oid == slot and vid == b.members[0][slot]
            assert [ix.vid_of(o) for o in nbrs] == g.neighbors(vid).tolist()
            assert (blk.nbrs[slot, len(nbrs):] == SENTINEL).all()

    def test_pq_sidecar(self, tmp_path):
        ds, g, b, ix = build(tmp_path, 60, 6, pq=True)
        cb = train_pq(ds, m_sub=1, k_codes=16, iters=2)
        for v in range(60):
            assert ix.codes_by_oid[ix.oid_of(v)].tolist() == encode(cb, ds.vectors[[v]])[0].tolist()

    def test_truncation_drops_farthest(self, tmp_path):
        X = np.array([[0.0], [1.0], [3.0], [2.0]])
        ds = Dataset(X)
        g = Graph.from_lists([[2, 1, 3], [], [], []])
        ix = write_index(g, BlockAssignment.from_members([[0, 1, 2, 3]], 4), ds, None, None,
                         LayoutParams(4 + 4 * 18, 2), tmp_path / "t")
        assert ix.header["truncated_edges"] == 1
        g2, _, _ = ix.load_all()
        assert g2.neighbors(0).tolist() == [1, 3]

    def test_capacity_mismatch(self, tmp_path):
        ds = uniform_dataset(5, 2)
        with pytest.raises(ValueError):
            write_index(Graph.from_lists([[]] * 5), assign_blocks_random(5, 4), ds, None, None,
                        LayoutParams(), tmp_path / "bad")

    def test_meta_header(self, tmp_path):
        build(tmp_path, 20, 3)
        header, _ = read_meta(tmp_path / "ix" / "meta.bin")
        assert header["layout"] == "bamg" and header["capacity"] == 30
        raw = (tmp_path / "ix" / "meta.bin").read_bytes()
        assert raw[:5] == b"BAMG1" and raw[5] == 1


class TestReads:
    def test_cache_and_counting(self, tmp_path):
        *_, ix = build(tmp_path, 100, 4)
        ctr = IoCounter()
        cache = {}
        ix.read_graph_block(1, ctr, cache)
        ix.read_graph_block(1, ctr, cache)
        assert ctr.graph_block_reads == 1
        ix.read_graph_block(1, ctr)
        ix.read_graph_block(1, ctr)
        assert ctr.graph_block_reads == 3
        with pytest.raises(ValueError):
            ix.read_graph_block(ix.m, ctr)

    def test_adjacent_slots_share_raw_block(self, tmp_path):
        ds, g, b, ix = build(tmp_path, 60, 16)
        ctr = IoCounter()
        ix.read_raw_vectors([0, 1], ctr)
        assert ctr.raw_block_reads == 1

    def test_one_vector_per_block(self, tmp_path):
        *_, ix = build(tmp_path, 10, 960)
        ctr = IoCounter()
        ix.read_raw_vectors([3], ctr)
        assert ctr.raw_block_reads == 1

    def test_sentinel_rejected(self, tmp_path):
        *_, ix = build(tmp_path, 10, 2)
        with pytest.raises(ValueError):
            ix.read_raw_vectors([SENTINEL], IoCounter())

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([2, 16, 100, 960, 1100]), st.integers(0, 1000))
    def test_raw_counts_match_placement_formula(self, tmp_path_factory, dim, seed):
        tmp = tmp_path_factory.mktemp("raw")
        ds, g, b, ix = build(tmp, 90, dim, seed=seed)
        rng = np.random.default_rng(seed)
        oids = [ix.oid_of(v) for v in rng.choice(90, size=int(rng.integers(1, 25)), replace=False)]
        ctr = IoCounter()
        vecs = ix.read_raw_vectors(oids, ctr)
        assert ctr.raw_block_reads == len(oracles.raw_blocks_of(oids, ix.c, dim, 4096))
        assert ctr.raw_block_reads <= len(oids) * -(-4 * dim // 4096)
        np.testing.assert_array_equal(vecs, ds.vectors[[ix.vid_of(o) for o in oids]])


class TestBaseline:
    def test_single_node(self, tmp_path):
        ds = Dataset(np.array([[0.5, 0.5]]))
        bx = write_index_baseline(Graph.from_lists([[]]), ds, None, None, LayoutParams(),
                                  tmp_path / "b")
        assert bx.header["graph_blocks"] == 1

    def test_six_nodes_per_block(self, tmp_path):
        ds = uniform_dataset(13, 128)
        bx = write_index_baseline(random_graph(13, 31, 0), ds, None, None, LayoutParams(),
                                  tmp_path / "b")
        assert bx.header["graph_blocks"] == 3
        assert list(bx.blocks_of(5)) == [0] and list(bx.blocks_of(6)) == [1]

    @pytest.mark.parametrize("dim,R", [(2, 31), (128, 15), (960, 31), (1100, 15)])
    def test_round_trip(self, tmp_path, dim, R):
        ds = uniform_dataset(40, dim, seed=dim)
        g = random_graph(40, R, dim)
        bx = write_index_baseline(g, ds, None, None, LayoutParams(4096, R), tmp_path / "b",
                                  entry=7)
        g2, ds2 = bx.load_all()
        assert g2 == g and ds2.vectors.tobytes() == ds.vectors.tobytes()
        assert bx.entry == 7

    def test_reads_counted_per_block(self, tmp_path):
        ds = uniform_dataset(20, 1100)
        bx = write_index_baseline(random_graph(20, 5, 1), ds, None, None, LayoutParams(),
                                  tmp_path / "b")
        ctr = IoCounter()
        vec, _ = bx.read_node(3, ctr)
        assert ctr.graph_block_reads == 2
        np.testing.assert_array_equal(vec, ds[3])

    def test_open_dispatch(self, tmp_path):
        ds = uniform_dataset(10, 2)
        write_index_baseline(random_graph(10, 3, 0), ds, None, None, LayoutParams(), tmp_path / "b")
        assert isinstance(open_index(tmp_path / "b"), BaselineIndex)
        build(tmp_path, 10, 2)
        assert isinstance(open_index(tmp_path / "ix"), DiskIndex)


class TestHandles:
    def test_double_close_leaves_other_indexes_alone(self, tmp_path):
        *_, ix = build(tmp_path, 30, 4)
        ix.close()
        other = DiskIndex(tmp_path / "ix")  # likely reuses the freed descriptor numbers
        ix.close()
        del ix
        other.read_graph_block(0, IoCounter())
        other.close()
