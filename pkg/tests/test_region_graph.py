from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepstruct.compute_graph import ParameterStore
from deepstruct.region_graph import (
    PotentialModel,
    PotentialTables,
    Region,
    RegionGraph,
    RegionGraphError,
    VariableSpace,
    backprop_potentials,
    build_chain_model,
    build_potential_model,
    build_region_graph,
    evaluate_potentials,
    linear_pairwise,
    link,
    loss_augment,
    mlp_pairwise,
    mlp_unary,
    score_configuration,
    validate,
)


def _tables(graph, rng):
    return PotentialTables.for_graph(graph, [rng.standard_normal(graph.shape(r.id)) for r in graph.regions])


class TestChainModel:
    def test_order1_counts(self):
        g = build_chain_model(5, 26, 1)
        assert sum(len(r.scope) == 1 for r in g.regions) == 5
        assert sum(len(r.scope) == 2 for r in g.regions) == 4
        assert sum(len(r.parents) for r in g.regions) == 8
        assert all(r.counting_number == 1.0 for r in g.regions)

    def test_order2_counts_and_classes(self):
        g = build_chain_model(5, 26, 2)
        pairs = [r.scope for r in g.regions if len(r.scope) == 2]
        assert len(pairs) == 7
        assert sorted(pairs) == sorted([(i, i + 1) for i in range(4)] + [(i, i + 2) for i in range(3)])
        assert g.edge_classes() == ["d1", "d2"]

    def test_two_variables_is_tree(self):
        g = build_chain_model(2, 2, 1)
        assert len(g.regions) == 3
        assert g.is_tree()

    def test_order2_loopy(self):
        assert not build_chain_model(4, 3, 2).is_tree()

    def test_unary_parents(self):
        g = build_chain_model(4, 3, 1)
        for r in g.regions:
            if len(r.scope) == 1:
                want = [p.id for p in g.regions if len(p.scope) == 2 and r.scope[0] in p.scope]
                assert sorted(r.parents) == sorted(want)

    @pytest.mark.parametrize("args,msg", [((5, 26, 3), "order must be 1 or 2"), ((2, 3, 2), "N"),
                                          ((1, 3, 1), "N"), ((4, 1, 1), "K")])
    def test_bad_arguments(self, args, msg):
        with pytest.raises(RegionGraphError, match=msg):
            build_chain_model(*args)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 9), st.integers(2, 6), st.sampled_from([1, 2]))
    def test_always_valid(self, N, K, order):
        if order == 2 and N < 3:
            return
        assert validate(build_chain_model(N, K, order)) == []


class TestValidate:
    def test_non_strict_containment(self):
        space = VariableSpace((2, 2))
        regions = [Region(0, (0,)), Region(1, (0,))]
        link(regions, 0, 1)
        problems = validate(RegionGraph(space, regions))
        assert any("non-strict containment" in p for p in problems)

    def test_negative_weighted_entropy(self):
        g = build_chain_model(3, 2, 1, unary_counting=-1.0)
        problems = validate(g, epsilon=1.0)
        assert any("negative weighted entropy" in p for p in problems)

    def test_negative_counting_allowed_at_zero_temperature(self):
        g = build_chain_model(3, 2, 1, unary_counting=-1.0)
        assert validate(g, epsilon=0.0) == []

    def test_parent_child_consistency(self):
        g = build_chain_model(3, 2, 1)
        g.regions[0].parents.append(4)  # region 4 does not list 0 as a child
        assert any("0" in p for p in validate(g))

    def test_cardinality_invariant(self):
        with pytest.raises(ValueError):
            VariableSpace((2, 0))

    def test_configuration_count_limit(self):
        space = VariableSpace((26,) * 5)
        assert space.configuration_count() == 26 ** 5
        with pytest.raises(OverflowError):
            space.configuration_count(limit=10 ** 6)


class TestPotentials:
    def test_zero_weights_give_zero_tables(self):
        g = build_chain_model(3, 4, 1)
        model, params = build_potential_model(g, 6, [5], seed=0)
        for name in params:
            params[name] = np.zeros_like(params[name])
        tables = evaluate_potentials(g, model, params, np.random.default_rng(0).random((2, 3, 6)))
        assert all(np.all(v == 0) for v in tables.values)

    def test_linear_pairwise_scaled_identity(self):
        g = build_chain_model(3, 4, 1)
        model, params = build_potential_model(g, 6, [5], seed=0)
        params["pair_d1_W"] = 3.0 * np.eye(4)
        tables = evaluate_potentials(g, model, params, np.ones((1, 3, 6)))
        for r in g.regions:
            if len(r.scope) == 2:
                assert np.array_equal(tables.values[r.id][0], 3.0 * np.eye(4))

    def test_mlp_table_constant_at_output_bias(self):
        params = ParameterStore()
        pm = mlp_pairwise("e", (3, 3), 8, params, np.random.default_rng(0))
        params["pair_e_W2"] = np.zeros_like(params["pair_e_W2"])
        b2 = np.arange(9.0)
        params["pair_e_b2"] = b2
        table, _ = pm.table(params)
        assert np.array_equal(table, b2.reshape(3, 3))

    def test_unary_table_is_network_output_per_slot(self):
        g = build_chain_model(3, 4, 1)
        model, params = build_potential_model(g, 6, [5], seed=1)
        x = np.random.default_rng(1).random((2, 3, 6))
        tables = evaluate_potentials(g, model, params, x)
        from deepstruct.compute_graph import forward

        for i in range(3):
            direct = forward(model.unary, params, {"x": x[:, i, :]})[model.unary_output]
            assert np.array_equal(tables.values[i], direct)

    def test_unary_width_mismatch(self):
        g = build_chain_model(3, 4, 1)
        params = ParameterStore()
        model = PotentialModel(mlp_unary(6, [5], 3, params, np.random.default_rng(0)),
                               {"d1": linear_pairwise("d1", (4, 4), params)})
        with pytest.raises(RegionGraphError):
            evaluate_potentials(g, model, params, np.ones((1, 3, 6)))

    def test_shared_tensor_moves_all_edges(self):
        g = build_chain_model(4, 3, 1)
        model, params = build_potential_model(g, 2, [2], seed=0)
        x = np.ones((1, 4, 2))
        before = evaluate_potentials(g, model, params, x)
        params["pair_d1_W"] = params["pair_d1_W"] + 0.25
        after = evaluate_potentials(g, model, params, x)
        deltas = [after.values[r.id] - before.values[r.id] for r in g.regions if len(r.scope) == 2]
        assert all(np.allclose(d, 0.25, atol=1e-15) for d in deltas)

    def test_order2_classes_have_separate_tensors(self):
        g = build_chain_model(4, 3, 2)
        model, params = build_potential_model(g, 2, [2], seed=0)
        assert "pair_d1_W" in params and "pair_d2_W" in params

    def test_pairwise_gradient_accumulates_over_edges(self):
        g = build_chain_model(4, 3, 1)
        model, params = build_potential_model(g, 2, [2], seed=0)
        tables = evaluate_potentials(g, model, params, np.ones((2, 4, 2)))
        ones = [np.ones_like(v) if v.ndim == 3 else np.zeros_like(v) for v in tables.values]
        ones = [np.broadcast_to(o, (2,) + o.shape[1:]).copy() for o in ones]
        grads = backprop_potentials(g, model, params, tables, ones)
        assert np.array_equal(grads["pair_d1_W"], np.full((3, 3), 6.0))  # 3 edges x 2 samples


class TestScore:
    def test_all_zero(self):
        g = build_chain_model(3, 2, 1)
        tables = PotentialTables.for_graph(g, [np.zeros(g.shape(r.id)) for r in g.regions])
        assert score_configuration(tables, [0, 1, 1]) == 0.0

    def test_single_unary(self):
        tables = PotentialTables.single([(0,)], [np.array([1.0, 4.0])])
        assert score_configuration(tables, [1]) == 4.0

    def test_chain_hand_sum(self):
        g = build_chain_model(2, 2, 1)
        tables = PotentialTables.for_graph(g, [np.array([1.0, 0.0]), np.array([0.0, 2.0]),
                                               np.array([[0.0, 5.0], [0.0, 0.0]])])
        assert score_configuration(tables, [0, 1]) == 8.0

    def test_out_of_range(self):
        g = build_chain_model(2, 2, 1)
        tables = PotentialTables.for_graph(g, [np.zeros(g.shape(r.id)) for r in g.regions])
        with pytest.raises(IndexError):
            score_configuration(tables, [0, 2])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_tables(self, seed, a, b):
        rng = np.random.default_rng(seed)
        g = build_chain_model(4, 3, 2)
        t1, t2 = _tables(g, rng), _tables(g, rng)
        y = rng.integers(0, 3, 4)
        lhs = score_configuration(t1.scaled_sum(a, t2, b), y)
        rhs = a * score_configuration(t1, y) + b * score_configuration(t2, y)
        assert lhs == pytest.approx(rhs, abs=1e-12)


class TestLossAugment:
    def test_zero_weight_unchanged(self):
        g = build_chain_model(3, 3, 1)
        t = _tables(g, np.random.default_rng(0))
        out = loss_augment(t, [0, 1, 2], 0.0)
        assert all(np.array_equal(a, b) for a, b in zip(t.values, out.values))

    def test_hamming_row(self):
        tables = PotentialTables.single([(0,)], [np.zeros(3)])
        out = loss_augment(tables, [0], 1.0)
        assert np.array_equal(out.values[0][0], [0.0, 1.0, 1.0])

    def test_pairwise_untouched(self):
        g = build_chain_model(3, 3, 1)
        t = _tables(g, np.random.default_rng(1))
        out = loss_augment(t, [0, 1, 2], 2.0)
        for r in g.regions:
            if len(r.scope) == 2:
                assert np.array_equal(out.values[r.id], t.values[r.id])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 5))
    def test_augmented_map_score_not_smaller(self, seed, w):
        rng = np.random.default_rng(seed)
        g = build_chain_model(3, 3, 1)
        t = _tables(g, rng)
        y = rng.integers(0, 3, 3)
        aug = loss_augment(t, y, w)
        configs = np.array(np.meshgrid(*[np.arange(3)] * 3, indexing="ij")).reshape(3, -1).T
        best = max(score_configuration(t, c) for c in configs)
        best_aug = max(score_configuration(aug, c) for c in configs)
        assert best_aug >= best - 1e-12


def test_explicit_region_graph_edges():
    g = build_region_graph([3, 3, 3], [(0, 1), (1, 2), (0, 2)])
    assert validate(g) == []
    assert not g.is_tree()
    assert g.edge_classes() == ["pair"]
