"""Rollout harness, metrics, latency instrumentation, ablation grid."""

import numpy as np
import pytest

from energy_policy.autodiff import ContractError, ParameterError
from energy_policy.data import generate_dataset, make_training_windows
from energy_policy.envs import make_env_spec
from energy_policy.evaluation import (
    ExpertPolicy,
    ModelPolicy,
    RandomPolicy,
    ablation_cells,
    ablation_run,
    ablation_table_load,
    ablation_table_save,
    evaluate_success,
    latency_bench,
    mode_coverage,
    rollout,
    sample_spread,
)
from energy_policy.model import EnergyPolicyModel, PolicyConfig
from energy_policy.training import TrainConfig


def tiny(**kw) -> PolicyConfig:
    base = dict(d_obs=2, d_action=2, obs_horizon=2, pred_horizon=16, exec_horizon=8,
                d_model=8, depth=1, heads=2, head_width=8, head_depth=2, noise_dim=4)
    base.update(kw)
    return PolicyConfig(**base)


class StaircasePolicy:
    """Chunk rows are distinguishable constants: row i has value i in every
    action dim, so the executed prefix is directly observable."""

    def __init__(self, pred_horizon=16, exec_horizon=8):
        self.obs_horizon = 1
        self.pred_horizon = pred_horizon
        self.exec_horizon = exec_horizon

    def plan(self, window, rng):
        chunk = np.arange(self.pred_horizon, dtype=np.float64)[:, None]
        return np.tile(chunk, (1, 2)) * 0.01


class TestRollout:
    def test_receding_horizon_executes_chunk_prefix(self):
        """Executed actions are exactly rows 0..K-1 of each planned chunk."""
        spec = make_env_spec("multi_goal")
        policy = StaircasePolicy(pred_horizon=16, exec_horizon=8)
        res = rollout(policy, spec, seed=0)
        assert res.steps_taken == spec.max_steps  # never reaches a goal
        assert res.planner_calls == int(np.ceil(spec.max_steps / 8))
        expected_row = np.tile(np.arange(8), spec.max_steps // 8 + 1)[:spec.max_steps]
        np.testing.assert_allclose(res.executed_actions[:, 0],
                                   expected_row * 0.01, atol=1e-15)

    def test_replan_every_h_when_k_equals_h(self):
        spec = make_env_spec("multi_goal")
        policy = StaircasePolicy(pred_horizon=10, exec_horizon=10)
        res = rollout(policy, spec, seed=0)
        assert res.planner_calls == int(np.ceil(res.steps_taken / 10))

    def test_expert_policy_succeeds_on_all_seeds(self):
        for env_name in ("forked_paths", "line_reach"):
            spec = make_env_spec(env_name)
            for seed in range(50):
                policy = ExpertPolicy(spec, spec.modes[seed % len(spec.modes)],
                                      jitter_scale=1.0)
                assert rollout(policy, spec, seed).success

    def test_untrained_energy_policy_ignores_noise_seed(self):
        """Init noise-invariance propagates to whole trajectories."""
        spec = make_env_spec("forked_paths")
        ds = generate_dataset(spec, 8, seed=0)
        model = EnergyPolicyModel(tiny(), seed=0)
        policy = ModelPolicy(model, ds.norm_stats)
        a = rollout(policy, spec, seed=1)
        b = rollout(policy, spec, seed=12345)
        assert a.trajectory.tobytes() == b.trajectory.tobytes()

    def test_trajectory_starts_at_env_start(self):
        spec = make_env_spec("forked_paths")
        res = rollout(RandomPolicy(spec), spec, seed=0)
        np.testing.assert_array_equal(res.trajectory[0], np.array(spec.start))
        assert res.steps_taken <= spec.max_steps


class TestEvaluateSuccess:
    def test_expert_rate_is_one(self):
        spec = make_env_spec("line_reach")
        assert evaluate_success(ExpertPolicy(spec, 0), spec, 25, seed=0) == 1.0

    def test_random_policy_rarely_succeeds_on_forked(self):
        spec = make_env_spec("forked_paths")
        rate = evaluate_success(RandomPolicy(spec), spec, 100, seed=0)
        assert rate < 0.1

    def test_rate_bounds_and_validation(self):
        spec = make_env_spec("line_reach")
        rate = evaluate_success(RandomPolicy(spec), spec, 5, seed=0)
        assert 0.0 <= rate <= 1.0
        with pytest.raises(ParameterError):
            evaluate_success(RandomPolicy(spec), spec, 0, seed=0)


class TestModeCoverage:
    def test_deterministic_policy_fills_one_bin(self):
        spec = make_env_spec("forked_paths")
        ds = generate_dataset(spec, 8, seed=0)
        model = EnergyPolicyModel(tiny(head_kind="l2"), seed=0)
        counts = mode_coverage(ModelPolicy(model, ds.norm_stats), spec,
                               n_samples=10, start_seed=0)
        assert sum(counts.values()) == 10
        assert max(counts.values()) == 10  # all rollouts identical

    def test_counts_partition_samples(self):
        spec = make_env_spec("forked_paths")
        counts = mode_coverage(RandomPolicy(spec), spec, n_samples=20, start_seed=3)
        assert sum(counts.values()) == 20


class TestSampleSpread:
    def test_zero_at_initialization(self):
        ds = generate_dataset(make_env_spec("forked_paths"), 8, seed=0)
        model = EnergyPolicyModel(tiny(), seed=0)
        windows, _ = make_training_windows(ds, 2, 16)
        spread = sample_spread(model, windows[0], 20, seed=0)
        assert spread.max() < 1e-10

    def test_requires_energy_head(self):
        model = EnergyPolicyModel(tiny(head_kind="l2"), seed=0)
        with pytest.raises(ContractError):
            sample_spread(model, np.zeros((2, 2)), 5)


class TestLatencyBench:
    def test_head_eval_counters(self):
        ds = generate_dataset(make_env_spec("forked_paths"), 8, seed=0)
        energy = EnergyPolicyModel(tiny(), seed=0)
        ddpm = EnergyPolicyModel(tiny(head_kind="ddpm", ddpm_steps=7), seed=0)
        reports = latency_bench(
            [("energy", energy, ds.norm_stats), ("ddpm", ddpm, ds.norm_stats)],
            repetitions=3, warmup=1)
        by_name = {r.name: r for r in reports}
        assert by_name["energy"].head_evals == 1
        assert by_name["energy"].backbone_evals == 1
        assert by_name["ddpm"].head_evals == 7
        assert all(r.repetitions == 3 for r in reports)
        assert all(r.mean_ms > 0 for r in reports)

    def test_repetitions_validated(self):
        with pytest.raises(ParameterError):
            latency_bench([], repetitions=2)


class TestAblation:
    def test_cell_enumeration(self):
        cells = ablation_cells({"alpha": [0.5, 1.0, 1.5, 2.0]})
        assert len(cells) == 4
        cells = ablation_cells({"alpha": [0.5, 1.0], "noise_dist": ["u05", "gauss"]})
        assert len(cells) == 4

    def test_unknown_axis_rejected(self):
        with pytest.raises(ParameterError, match="unknown ablation axis"):
            ablation_cells({"learning_rate": [1e-3]})

    def test_empty_grid_rejected(self):
        with pytest.raises(ParameterError, match="empty"):
            ablation_cells({})
        with pytest.raises(ParameterError):
            ablation_cells({"alpha": []})

    def test_small_grid_runs_and_roundtrips(self, tmp_path):
        ds = generate_dataset(make_env_spec("forked_paths"), 6, seed=0)
        rows = ablation_run(
            ds, tiny(), TrainConfig(epochs=1, batch_size=64, seed=0),
            {"alpha": [0.5, 1.0]}, n_eval=2, n_coverage=2, eval_seed=5)
        assert [r["cell"] for r in rows] == [0, 1]
        assert [r["alpha"] for r in rows] == [0.5, 1.0]
        for row in rows:
            assert 0.0 <= row["success_rate"] <= 1.0
            assert sum(row["mode_counts"]) + row["unclassified"] == 2

        path = tmp_path / "table.csv"
        ablation_table_save(rows, str(path))
        loaded = ablation_table_load(str(path))
        assert loaded == [
            {k: row[k] for k in loaded[0]} for row in rows
        ]
