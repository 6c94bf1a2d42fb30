import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gateshare import sharing as S
from gateshare.errors import ConfigError
from gateshare.sharing import GateSpec, LayerShape


class TestBalancedChannelMap:
    def test_round_robin(self):
        assert S.balanced_channel_map(4, 2) == [0, 1, 0, 1]

    def test_no_replicates_is_identity(self):
        assert S.balanced_channel_map(3, 3) == [0, 1, 2]

    def test_load_difference_at_most_one(self):
        pi = S.balanced_channel_map(5, 2)
        loads = [pi[2:].count(p) for p in range(2)]
        assert sorted(loads) == [1, 2]

    @given(c=st.integers(1, 64), p=st.integers(1, 64))
    def test_balanced_property(self, c, p):
        if p > c:
            with pytest.raises(ConfigError):
                S.balanced_channel_map(c, p)
            return
        pi = S.balanced_channel_map(c, p)
        assert len(pi) == c
        assert pi[:p] == list(range(p))
        assert all(0 <= t < p for t in pi)
        loads = [pi[p:].count(t) for t in range(p)]
        assert max(loads) - min(loads) <= 1

    def test_zero_prototypes_rejected(self):
        with pytest.raises(ConfigError):
            S.balanced_channel_map(4, 0)


class TestBuildGroups:
    def test_run_detection(self):
        shapes = [LayerShape(64, 8, 8), LayerShape(64, 8, 8), LayerShape(128, 4, 4)]
        assert S.build_groups(shapes) == [0, 0, 2]

    def test_all_distinct(self):
        shapes = [LayerShape(8, 4, 4), LayerShape(16, 4, 4), LayerShape(16, 2, 2)]
        assert S.build_groups(shapes) == [0, 1, 2]

    def test_flag_off_forces_identity(self):
        shapes = [LayerShape(8, 4, 4)] * 3
        assert S.build_groups(shapes, layer_sharing_enabled=False) == [0, 1, 2]

    @given(st.lists(st.sampled_from([(8, 4, 4), (8, 2, 2), (16, 2, 2)]), min_size=1, max_size=10))
    def test_phi_points_at_run_heads(self, dims):
        shapes = [LayerShape(*d) for d in dims]
        phi = S.build_groups(shapes)
        for i, head in enumerate(phi):
            assert phi[head] == head
            assert head <= i
            # same dims everywhere in the run
            for j in range(head, i + 1):
                assert dims[j] == dims[i] and phi[j] == head


class TestGateLedger:
    def test_ungrouped_arithmetic(self):
        shapes = [LayerShape(4, 4, 4), LayerShape(4, 2, 2)]
        specs = S.build_specs(shapes, [2, 1], layer_sharing_enabled=False)
        ledger = S.gate_ledger(specs, shapes)
        assert ledger.per_layer == [32, 4]
        assert ledger.total == 36

    def test_group_counted_once(self):
        shapes = [LayerShape(4, 4, 4)] * 3
        specs = S.build_specs(shapes, [2, 2, 2])
        ledger = S.gate_ledger(specs, shapes)
        assert ledger.total == 32
        assert ledger.per_layer == [32, 0, 0]

    def test_full_prototypes_equal_baseline(self):
        shapes = [LayerShape(8, 4, 4), LayerShape(16, 2, 2)]
        specs = S.build_specs(shapes, [8, 16], layer_sharing_enabled=False)
        assert S.gate_ledger(specs, shapes).total == sum(s.neurons for s in shapes)

    def test_csv_export(self, tmp_path):
        shapes = [LayerShape(4, 2, 2)]
        specs = S.build_specs(shapes, [2])
        path = tmp_path / "ledger.csv"
        S.gate_ledger(specs, shapes).write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "layer,gates"
        assert lines[-1] == "total,8"


class TestAllocateBudget:
    def test_two_layer_uniform_ratio(self):
        shapes = [LayerShape(4, 4, 4), LayerShape(4, 2, 2)]
        weights = S.uniform_ratio_weights(shapes)
        got = S.allocate_budget(shapes, 40, weights)

        # oracle: enumerate proportional pairs, keep the maximal total <= 40
        best, best_total = None, -1
        for p1 in range(1, 5):
            for p2 in range(1, 5):
                tot = p1 * 16 + p2 * 4
                if tot <= 40 and tot > best_total:
                    best, best_total = (p1, p2), tot
        assert (got[0] * 16 + got[1] * 4) == best_total == 40
        assert got == [2, 2]

    def test_full_budget_gives_all_channels(self):
        shapes = [LayerShape(4, 4, 4), LayerShape(8, 2, 2)]
        weights = S.uniform_ratio_weights(shapes)
        full = sum(s.neurons for s in shapes)
        assert S.allocate_budget(shapes, full, weights) == [4, 8]

    def test_single_layer_direct_division(self):
        shapes = [LayerShape(8, 1, 1)]
        got = S.allocate_budget(shapes, 3, S.uniform_ratio_weights(shapes))
        assert got == [3]

    def test_infeasible_budget_names_floor(self):
        shapes = [LayerShape(4, 4, 4), LayerShape(4, 2, 2)]
        with pytest.raises(ConfigError, match="20"):
            S.allocate_budget(shapes, 10, S.uniform_ratio_weights(shapes))

    def test_group_charged_once(self):
        shapes = [LayerShape(4, 2, 2)] * 2
        phi = S.build_groups(shapes)
        got = S.allocate_budget(shapes, 8, S.uniform_ratio_weights(shapes), phi=phi)
        assert got == [2, 2]  # one group: 2 prototypes * 4 positions = 8

    @given(
        dims=st.lists(st.tuples(st.integers(1, 12), st.integers(1, 4), st.integers(1, 4)),
                      min_size=1, max_size=5),
        weights=st.lists(st.floats(0.01, 10.0), min_size=5, max_size=5),
        budget_frac=st.floats(0.0, 1.0),
    )
    @settings(max_examples=80, deadline=None)
    def test_budget_respected_and_maximal(self, dims, weights, budget_frac):
        shapes = [LayerShape(*d) for d in dims]
        weights = weights[:len(shapes)]
        floor = sum(s.positions for s in shapes)
        full = sum(s.neurons for s in shapes)
        budget = floor + int(round(budget_frac * (full - floor)))
        counts = S.allocate_budget(shapes, budget, weights)
        total = sum(p * s.positions for p, s in zip(counts, shapes))
        assert total <= budget
        for p, s in zip(counts, shapes):
            assert 1 <= p <= s.channels
            # maximality: one more prototype anywhere would bust the budget
            if p < s.channels:
                assert total + s.positions > budget

    @given(
        dims=st.lists(st.tuples(st.integers(1, 12), st.integers(1, 3), st.integers(1, 3)),
                      min_size=1, max_size=4),
        weights=st.lists(st.floats(0.01, 10.0), min_size=4, max_size=4),
        b1=st.integers(0, 400), b2=st.integers(0, 400),
    )
    @settings(max_examples=80, deadline=None)
    def test_monotone_in_budget_for_uniform_costs(self, dims, weights, b1, b2):
        # equal gate cost per layer keeps the fill order budget-independent
        dims = [(c, h, w) for (c, h, w) in dims]
        h0, w0 = dims[0][1], dims[0][2]
        dims = [(c, h0, w0) for (c, _, _) in dims]
        shapes = [LayerShape(*d) for d in dims]
        weights = weights[:len(shapes)]
        floor = sum(s.positions for s in shapes)
        full = sum(s.neurons for s in shapes)
        lo, hi = sorted((floor + b1 % max(1, full - floor + 1),
                         floor + b2 % max(1, full - floor + 1)))
        small = S.allocate_budget(shapes, lo, weights)
        large = S.allocate_budget(shapes, hi, weights)
        assert all(a <= b for a, b in zip(small, large))


class TestImportanceWeights:
    class _Fixed:
        def __init__(self, arrays):
            self.arrays = arrays

        def gate_values(self, x):
            return self.arrays

    def test_constant_gates_weight_zero(self):
        arrays = {0: np.ones((4, 3, 2, 2))}
        model = self._Fixed(arrays)
        assert S.importance_weights(model, np.zeros((4, 1))) == [0.0]

    def test_identical_layers_equal_weights(self):
        rng = np.random.default_rng(0)
        a = (rng.normal(size=(5, 3, 2, 2)) >= 0).astype(float)
        model = self._Fixed({0: a, 1: a.copy()})
        w = S.importance_weights(model, np.zeros((5, 1)))
        assert w[0] == w[1] > 0

    def test_matches_recomputation_from_records(self, tmp_path):
        from gateshare import gates as G

        rng = np.random.default_rng(1)
        arrays = {i: (rng.normal(size=(6, 4, 2, 2)) >= 0).astype(float) for i in range(3)}
        model = self._Fixed(arrays)
        weights = S.importance_weights(model, np.zeros((6, 1)))

        path = tmp_path / "records.csv"
        G.write_gate_csv(G.record_gates(model, np.zeros((6, 1))), path)
        records = G.read_gate_csv(path)
        for layer in range(3):
            by_channel = {}
            for r in records:
                if r.layer == layer:
                    by_channel.setdefault(r.channel, []).append(r.gate)
            manual = sum(np.var(v) for v in by_channel.values())
            assert abs(weights[layer] - manual) < 1e-12

    def test_empty_shard_rejected(self):
        with pytest.raises(ConfigError):
            S.importance_weights(self._Fixed({}), np.zeros((0, 1)))


class TestWeightFiles:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "weights.txt"
        S.write_weight_file([1.5, 0.0, 3.25], path)
        assert S.read_weight_file(path) == [1.5, 0.0, 3.25]

    def test_bad_lines_rejected(self, tmp_path):
        path = tmp_path / "weights.txt"
        path.write_text("0 1.0\nnot a line\n")
        with pytest.raises(ConfigError):
            S.read_weight_file(path)

    def test_negative_weight_rejected(self, tmp_path):
        path = tmp_path / "weights.txt"
        path.write_text("0 -1.0\n")
        with pytest.raises(ConfigError):
            S.read_weight_file(path)


class TestGateSpec:
    def test_prototypes_must_lead(self):
        with pytest.raises(ConfigError):
            GateSpec(layer=0, channels=4, prototypes=2, pi=[0, 0, 0, 1])

    def test_default_pi_balanced(self):
        spec = GateSpec(layer=0, channels=6, prototypes=2)
        assert spec.pi == [0, 1, 0, 1, 0, 1]
        assert spec.replicates == 4
