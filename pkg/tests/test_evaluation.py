"""Metrics, run aggregation, and the six scenario runners."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedprompt.data import SyntheticSpec, generate_synthetic_dataset
from fedprompt.errors import DomainError, EvaluationError
from fedprompt.evaluation import (
    ExperimentPlan,
    ScenarioSpec,
    aggregate_runs,
    harmonic_mean,
    personalized_accuracy,
    run_cell,
    run_scenario,
    superiority_indicator,
)
from fedprompt.federation import FederationConfig
from fedprompt.vlm import ModelConfig
from fedprompt import rngs


def desk_plan(**fed_overrides) -> ExperimentPlan:
    fed = dict(protocol="standard", num_clients=4, rounds=3, batch_size=8)
    fed.update(fed_overrides)
    return ExperimentPlan(
        model=ModelConfig(m=1, L=3, d_token=8, d_feature=16, d_image=16,
                          encoder="attention_block", seed=11, token_scale=0.1),
        federation=FederationConfig(**fed),
        alpha=0.5,
        per_class_subsample=6,
    )


@pytest.fixture(scope="module")
def desk_master():
    spec = SyntheticSpec(classes=4, feature_dim=16, noise_sigma=0.1, samples_per_class=30)
    return generate_synthetic_dataset(spec, rngs.derive_rng(0, rngs.DATA))


class TestHarmonicMean:
    def test_reference_zero_shot_pairs(self):
        # base/novel accuracy pairs and their printed harmonic means
        pairs = [((88.2, 92.6), 90.3), ((19.6, 24.7), 21.8),
                 ((59.5, 68.1), 63.5), ((77.2, 71.0), 73.9)]
        for (a, b), printed in pairs:
            assert harmonic_mean(a, b) == pytest.approx(printed, abs=0.1)

    def test_equal_inputs(self):
        assert harmonic_mean(61.0, 61.0) == pytest.approx(61.0, abs=1e-12)

    def test_zero_input(self):
        assert harmonic_mean(0.0, 50.0) == 0.0
        assert harmonic_mean(50.0, 0.0) == 0.0

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            harmonic_mean(-1.0, 5.0)

    @given(st.floats(0.1, 100.0), st.floats(0.1, 100.0))
    @settings(max_examples=200, deadline=None, derandomize=True)
    def test_ordering_chain(self, a, b):
        h = harmonic_mean(a, b)
        geometric = float(np.sqrt(a * b))
        arithmetic = (a + b) / 2.0
        assert h <= geometric + 1e-9 <= arithmetic + 1e-9
        if abs(a - b) > 1e-6:
            assert h < arithmetic


class TestSuperiority:
    # printed per-dataset means from the shared-model comparison
    BASELINE = [91.5, 57.6, 22.8, 79.2, 62.0, 84.0, 89.4, 70.1]
    FEDOTP = [91.8, 58.0, 21.9, 78.7, 62.8, 83.3, 89.1, 69.4]
    KGCOOP = [91.8, 58.2, 23.0, 79.4, 61.7, 83.9, 89.4, 70.4]

    def test_reference_counts(self):
        assert superiority_indicator(self.FEDOTP, self.BASELINE) == 3
        assert superiority_indicator(self.KGCOOP, self.BASELINE) == 5

    def test_dominating_method(self):
        base = np.arange(8, dtype=float)
        assert superiority_indicator(base + 1.0, base) == 8

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=6), rng.normal(size=6)
        shift = 17.3
        assert superiority_indicator(a, b) == superiority_indicator(a + shift, b + shift)

    def test_strict_comparison_ignores_ties(self):
        assert superiority_indicator([5.0, 6.0], [5.0, 5.0]) == 1

    def test_dict_rows(self):
        assert superiority_indicator({"x": 2.0, "y": 1.0}, {"x": 1.0, "y": 1.5}) == 1

    def test_column_mismatch(self):
        with pytest.raises(EvaluationError):
            superiority_indicator({"x": 1.0}, {"y": 1.0})
        with pytest.raises(EvaluationError):
            superiority_indicator([1.0, 2.0], [1.0])


class TestAggregateRuns:
    def test_single_run(self):
        assert aggregate_runs([91.5]) == (91.5, 0.0)

    def test_hand_arithmetic(self):
        mean, std = aggregate_runs([1.0, 2.0, 3.0])
        assert mean == 2.0
        assert std == pytest.approx(np.sqrt(2.0 / 3.0), abs=1e-12)
        assert std == pytest.approx(0.8165, abs=1e-4)

    def test_constant_list(self):
        assert aggregate_runs([4.2, 4.2, 4.2])[1] == 0.0

    def test_empty_rejected(self):
        with pytest.raises(EvaluationError):
            aggregate_runs([])


class TestGlobalAccuracy:
    def test_perfect_predictor(self):
        from fedprompt.evaluation import accuracy_percent
        assert accuracy_percent(np.arange(5), np.arange(5)) == 100.0

    def test_three_of_four(self):
        from fedprompt.evaluation import accuracy_percent
        assert accuracy_percent(np.array([0, 1, 2, 2]), np.array([0, 1, 2, 3])) == 75.0

    def test_chance_level_for_random_predictor(self):
        rng = np.random.default_rng(0)
        C, n = 8, 20000
        predicted = rng.integers(0, C, size=n)
        target = rng.integers(0, C, size=n)
        from fedprompt.evaluation import accuracy_percent
        assert accuracy_percent(predicted, target) == pytest.approx(100.0 / C, abs=1.0)

    def test_empty_rejected(self):
        from fedprompt.evaluation import accuracy_percent
        with pytest.raises(EvaluationError):
            accuracy_percent(np.array([]), np.array([]))


class TestPersonalizedAccuracy:
    class _Fixed:
        def __init__(self, correct_fraction):
            self.f = correct_fraction

        def probs(self, feats, local_maps=None):
            n = feats.shape[0]
            out = np.zeros((n, 2))
            k = int(round(self.f * n))
            out[:k, 0] = 1.0  # predict class 0
            out[k:, 1] = 1.0
            return out

    def _test_set(self, n):
        from fedprompt.data import ClientDataset
        return ClientDataset(features=np.ones((n, 3)), labels=np.zeros(n, dtype=int),
                             master_indices=np.arange(n))

    def test_weighted_mean(self):
        # (100%, n=10) and (50%, n=30) -> 62.5
        out = personalized_accuracy([self._Fixed(1.0), self._Fixed(0.5)],
                                    [self._test_set(10), self._test_set(30)])
        assert out == pytest.approx(62.5, abs=1e-12)

    def test_equal_accuracy(self):
        out = personalized_accuracy([self._Fixed(0.8), self._Fixed(0.8)],
                                    [self._test_set(5), self._test_set(25)])
        assert out == pytest.approx(80.0, abs=1e-12)

    def test_single_client(self):
        assert personalized_accuracy([self._Fixed(1.0)], [self._test_set(4)]) == 100.0

    def test_empty_clients_excluded(self):
        out = personalized_accuracy([self._Fixed(1.0), self._Fixed(0.0)],
                                    [self._test_set(10), self._test_set(0)])
        assert out == 100.0

    def test_all_empty_rejected(self):
        with pytest.raises(EvaluationError):
            personalized_accuracy([self._Fixed(1.0)], [self._test_set(0)])


class TestScenarios:
    def test_global_cell_emits_accuracy_and_cost(self, desk_master):
        plan = desk_plan()
        spec = ScenarioSpec(kind="global")
        result = run_cell(spec, "promptfl", "synthetic", desk_master, 0, plan)
        metrics = {o.metric for o in result.observations}
        assert metrics == {"alpha_g", "chi_millions"}
        assert len(result.curves) == plan.federation.rounds

    def test_global_cell_deterministic(self, desk_master):
        plan = desk_plan()
        spec = ScenarioSpec(kind="global")
        a = run_cell(spec, "promptfl", "synthetic", desk_master, 0, plan)
        b = run_cell(spec, "promptfl", "synthetic", desk_master, 0, plan)
        assert [(o.metric, o.value) for o in a.observations] == \
               [(o.metric, o.value) for o in b.observations]

    def test_best_at_least_final(self, desk_master):
        plan = desk_plan()
        result = run_cell(ScenarioSpec(kind="global"), "promptfl", "synthetic",
                          desk_master, 1, plan)
        best = next(o.value for o in result.observations if o.metric == "alpha_g")
        finals = [r["test_accuracy"] for r in result.curves if r["test_accuracy"] is not None]
        assert best >= finals[-1]

    def test_zero_shot_method(self, desk_master):
        result = run_cell(ScenarioSpec(kind="global"), "zsclip", "synthetic",
                          desk_master, 0, desk_plan())
        by_metric = {o.metric: o.value for o in result.observations}
        assert by_metric["chi_millions"] == 0.0
        assert 0.0 <= by_metric["alpha_g"] <= 100.0

    def test_personalized_cell(self, desk_master):
        plan = desk_plan(protocol="personalized")
        result = run_cell(ScenarioSpec(kind="personalized"), "promptfl", "synthetic",
                          desk_master, 0, plan)
        metrics = {o.metric for o in result.observations}
        assert metrics == {"alpha_p"}

    def test_base_novel_protocol_integrity(self, desk_master):
        plan = desk_plan()
        result = run_cell(ScenarioSpec(kind="base_novel"), "promptfl", "synthetic",
                          desk_master, 0, plan)
        by_metric = {o.metric: o.value for o in result.observations}
        assert set(by_metric) == {"alpha_b", "alpha_n", "alpha_h"}
        # emitted harmonic mean recomputes exactly from the emitted pair
        assert by_metric["alpha_h"] == harmonic_mean(by_metric["alpha_b"], by_metric["alpha_n"])
        # no training batch touched a novel-class sample
        novel = result.extras["novel_ids"]
        for batch in result.extras["audit"]:
            assert not np.isin(desk_master.labels[batch], novel).any()
        assert len(result.extras["audit"]) > 0

    def test_base_novel_split_aligned_across_methods(self, desk_master):
        plan = desk_plan()
        spec = ScenarioSpec(kind="base_novel")
        a = run_cell(spec, "promptfl", "synthetic", desk_master, 3, plan)
        b = run_cell(spec, "kgcoop", "synthetic", desk_master, 3, plan)
        np.testing.assert_array_equal(a.extras["base_ids"], b.extras["base_ids"])

    def test_fewshot_cell_counts(self, desk_master):
        plan = desk_plan()
        spec = ScenarioSpec(kind="fewshot", shots=1)
        result = run_cell(spec, "promptfl", "synthetic", desk_master, 0, plan)
        assert {o.metric for o in result.observations} == {"alpha_fs_1"}

    def test_cross_domain_cell(self, desk_master):
        plan = desk_plan()
        spec = ScenarioSpec(kind="cross_domain", cross_targets=2)
        result = run_cell(spec, "promptfl", "synthetic", desk_master, 0, plan)
        datasets = {o.dataset for o in result.observations}
        assert datasets == {"synthetic->shift1", "synthetic->shift2"}

    def test_cost_tradeoff_sweep_shape(self, desk_master):
        from dataclasses import replace
        from fedprompt.algorithms import make_trainer
        from fedprompt.federation import communication_cost_millions

        plan = desk_plan(rounds=2)
        spec = ScenarioSpec(kind="cost_tradeoff", prompt_sweep=(1, 2), token_sweep=(3,))
        result = run_cell(spec, "promptfl", "synthetic", desk_master, 0, plan)
        datasets = {o.dataset for o in result.observations}
        assert datasets == {"synthetic|prompts=1", "synthetic|prompts=2", "synthetic|tokens=3"}
        chi = {o.dataset: o.value for o in result.observations if o.metric == "chi_millions"}
        # the sweep quotes the method's arithmetic cost exactly
        for prompts in (1, 2):
            expected = communication_cost_millions(
                make_trainer("promptfl"), replace(plan.model, m=prompts), plan.federation)
            assert chi[f"synthetic|prompts={prompts}"] == expected
        assert chi["synthetic|prompts=2"] == pytest.approx(2 * chi["synthetic|prompts=1"], rel=1e-12)

    def test_run_scenario_merges_cells(self, desk_master):
        plan = desk_plan(rounds=2)
        table, curves = run_scenario(ScenarioSpec(kind="global"), ["promptfl", "zsclip"],
                                     [0, 1], {"synthetic": desk_master}, plan)
        assert table.methods("global") == ["promptfl", "zsclip"]
        mean, std, n = table.cell("global", "promptfl", "synthetic", "alpha_g")
        assert n == 2
        assert std >= 0.0

    def test_transport_method_cell(self, desk_master):
        plan = desk_plan(rounds=2)
        result = run_cell(ScenarioSpec(kind="global"), "plot", "synthetic", desk_master, 0, plan)
        assert any(o.metric == "alpha_g" for o in result.observations)

    def test_fewshot_accuracy_nondecreasing_in_shots(self):
        # mean accuracy over seeds trends upward with the shot count,
        # within a one-point noise margin
        master = generate_synthetic_dataset(
            SyntheticSpec(classes=6, feature_dim=32, noise_sigma=0.15, samples_per_class=100),
            rngs.derive_rng(2, rngs.DATA))
        plan = ExperimentPlan(
            model=ModelConfig(m=1, L=4, d_token=16, d_feature=32, d_image=32,
                              encoder="attention_block", token_scale=0.05),
            federation=FederationConfig(protocol="standard", num_clients=2, rounds=8),
            alpha=0.5)
        means = []
        for shots in (1, 4, 16):
            spec = ScenarioSpec(kind="fewshot", shots=shots)
            accs = [
                next(o.value for o in run_cell(spec, "promptfl", "synthetic",
                                               master, seed, plan).observations)
                for seed in (0, 1, 2)
            ]
            means.append(float(np.mean(accs)))
        assert all(b >= a - 1.0 for a, b in zip(means, means[1:]))
        assert means[-1] > means[0]
