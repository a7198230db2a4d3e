import numpy as np
import pytest

from bamg.basegraph import Graph, GraphBuildParams, build_nsg
from bamg.blocks import BlockAssignment, assign_blocks
from bamg.bmrng import PruneParams, build_bamg
from bamg.core import Dataset, clustered_split, sq_distances, uniform_dataset
from bamg.navgraph import NavLayers, build_navigation, nav_entry, select_key_nodes

import oracles

SMALL = GraphBuildParams(R=12, L_build=32, C_cand=80)


def base_index(ds, c, gp=SMALL):
    nsg = build_nsg(ds, gp)
    b = assign_blocks(nsg, c, ds)
    return build_bamg(ds, nsg, b, PruneParams()), b


class TestKeyNodes:
    def test_path_selects_its_head(self):
        g = Graph.from_lists([[], [3], [1], [0]])  # 2 -> 1 -> 3 -> 0
        b = BlockAssignment.from_members([[0, 1, 2, 3]], 4)
        assert select_key_nodes(g, b).tolist() == [2]

    def test_cycle_selects_one_node(self):
        g = Graph.from_lists([[1], [2], [0]])
        b = BlockAssignment.from_members([[0, 1, 2]], 3)
        assert select_key_nodes(g, b).tolist() == [0]

    def test_min_in_degree_among_uncovered(self):
        # cycle 0 <-> 1 plus 2 -> 1 -> ... ; 2 also has zero in-degree here,
        # so it is chosen first and covers everything
        g = Graph.from_lists([[1], [0], [1]])
        b = BlockAssignment.from_members([[0, 1, 2]], 3)
        assert select_key_nodes(g, b).tolist() == [2]
        # two cycles: in-degrees 0:1, 1:2 (from 0 and 2), 2:1, 3:1
        g2 = Graph.from_lists([[1], [0], [3, 1], [2]])
        assert select_key_nodes(g2, BlockAssignment.from_members([[0, 1, 2, 3]], 4)).tolist() == [0, 2]

    def test_cross_block_edges_ignored(self):
        g = Graph.from_lists([[1], [0], [3], [2]])
        b = BlockAssignment.from_members([[0, 2], [1, 3]], 2)
        assert select_key_nodes(g, b).tolist() == [0, 1, 2, 3]

    @pytest.mark.parametrize("seed", range(5))
    def test_every_node_covered(self, seed):
        ds = uniform_dataset(400, 3, seed=seed)
        g, b = base_index(ds, 16)
        keys = set(select_key_nodes(g, b).tolist())
        rows = g.to_lists()
        covered = set()
        for k in keys:
            covered |= oracles.reachable_within(rows, b.members[b.label[k]].tolist(), k)
        assert covered == set(range(ds.n))
        for mem in b.members:
            assert keys & set(mem.tolist())


class TestBuildNavigation:
    def test_small_base_has_no_layers(self):
        ds = uniform_dataset(50, 2)
        g, b = base_index(ds, 8)
        nl = build_navigation(ds, g, b, PruneParams(), gamma=64)
        assert nl.depth == 0
        assert nav_entry(nl, ds[3]) == [nl.base_medoid]

    def test_gamma_one_on_two_nodes(self):
        ds = Dataset(np.array([[0.0], [1.0]]))
        g = Graph.from_lists([[1], [0]])
        b = BlockAssignment.from_members([[0, 1]], 2)
        nl = build_navigation(ds, g, b, PruneParams(alpha=2), gamma=1,
                              graph_params=GraphBuildParams(R=1, L_build=4, C_cand=4))
        assert nl.depth == 1 and nl.layers[0].n <= 1

    def test_forced_drop_when_nothing_shrinks(self, caplog):
        # no edges: every node is its own key node
        ds = uniform_dataset(10, 2)
        g = Graph.from_lists([[]] * 10)
        b = BlockAssignment.from_members([[i] for i in range(10)], 1)
        nl = build_navigation(ds, g, b, PruneParams(alpha=1), gamma=2)
        assert nl.forced_drop and nl.sizes() == [10, 1]
        assert "did not shrink" in caplog.text

    def test_gamma_validated(self):
        ds = uniform_dataset(5, 2)
        with pytest.raises(ValueError):
            build_navigation(ds, Graph.from_lists([[]] * 5), BlockAssignment.from_members(
                [[0, 1, 2, 3, 4]], 5), PruneParams(), gamma=0)


@pytest.fixture(scope="module")
def stacked():
    ds, qs = clustered_split(5000, 100, 16, n_clusters=20, seed=3, spread=4.0)
    g, b = base_index(ds, 30, GraphBuildParams(R=16, L_build=40, C_cand=100))
    nl = build_navigation(ds, g, b, PruneParams(), gamma=32, graph_params=SMALL)
    return ds, qs, nl


class TestLayers:
    def test_strict_shrink_and_nesting(self, stacked):
        ds, _, nl = stacked
        sizes = nl.sizes()
        assert nl.depth >= 2 and sizes[-1] <= 32
        assert all(a > b for a, b in zip(sizes, sizes[1:]))
        for lower, upper in zip(nl.layers, nl.layers[1:]):
            assert set(upper.base_vids.tolist()) <= set(lower.base_vids.tolist())
        for lay in nl.layers:
            np.testing.assert_array_equal(lay.vectors, ds.vectors[lay.base_vids])

    def test_shrink_factors_reported(self, stacked):
        # compared to the block-to-component ratio qualitatively; logged only
        _, _, nl = stacked
        print("layer sizes", nl.sizes(), "shrink", [round(f, 2) for f in nl.shrink_factors()])
        assert all(f > 1 for f in nl.shrink_factors())

    def test_serialization(self, stacked):
        _, _, nl = stacked
        back = NavLayers.from_bytes(nl.to_bytes())
        assert back.sizes() == nl.sizes() and back.gamma == nl.gamma
        for a, b in zip(back.layers, nl.layers):
            assert a.graph == b.graph and a.entry == b.entry
            np.testing.assert_array_equal(a.base_vids, b.base_vids)
            np.testing.assert_array_equal(a.assignment.label, b.assignment.label)
        with pytest.raises(ValueError):
            NavLayers.from_bytes(b"NOPE")


class TestEntry:
    def test_top_node_ranked_first(self, stacked):
        ds, _, nl = stacked
        top = nl.layers[-1]
        for v in top.base_vids[:5].tolist():
            assert nav_entry(nl, ds[v])[0] == v

    def test_count(self, stacked):
        ds, qs, nl = stacked
        assert len(nav_entry(nl, qs[0], beam=32, count=8)) == 8

    def test_closer_than_random(self, stacked):
        ds, qs, nl = stacked
        rng = np.random.default_rng(0)
        ent, rnd = [], []
        for q in qs:
            e = nav_entry(nl, q, count=8)
            ent.append(sq_distances(ds.vectors[e], q).mean())
            rnd.append(sq_distances(ds.vectors[rng.choice(ds.n, 8, replace=False)], q).mean())
        assert np.mean(ent) <= np.mean(rnd)
