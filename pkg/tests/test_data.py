"""Dataset pipeline: normalization, windowing, EPDS1 round-trips."""

import numpy as np
import pytest

from energy_policy.autodiff import ParameterError, Rng
from energy_policy.data import (
    DatasetFormatError,
    DemoDataset,
    NormStats,
    dataset_load,
    dataset_save,
    denormalize,
    fit_norm_stats,
    generate_dataset,
    make_training_windows,
    normalize,
)
from energy_policy.envs import Episode, make_env_spec


@pytest.fixture(scope="module")
def forked_ds():
    return generate_dataset(make_env_spec("forked_paths"), 20, seed=11)


class TestGenerateDataset:
    def test_balanced_alternation(self):
        ds = generate_dataset(make_env_spec("forked_paths"), 200, seed=7)
        hist = ds.mode_histogram()
        assert hist == {0: 100, 1: 100}

    def test_random_mode_frequencies(self):
        ds = generate_dataset(make_env_spec("forked_paths"), 10_000, seed=3,
                              mode_policy="random")
        hist = ds.mode_histogram()
        for mode in (0, 1):
            assert 0.45 <= hist[mode] / 10_000 <= 0.55

    def test_normalized_actions_in_range(self, forked_ds):
        for ep in forked_ds.episodes:
            normed = normalize(ep.actions, forked_ds.norm_stats, "action")
            assert normed.min() >= -1.0 - 1e-12
            assert normed.max() <= 1.0 + 1e-12

    def test_episode_count_validated(self):
        with pytest.raises(ParameterError):
            generate_dataset(make_env_spec("line_reach"), 0, seed=0)

    def test_per_episode_seeding_is_order_independent(self):
        """Episode i depends only on seed + i, so a shard equals the full run."""
        spec = make_env_spec("multi_goal")
        full = generate_dataset(spec, 9, seed=40)
        again = generate_dataset(spec, 9, seed=40)
        assert all(a.actions.tobytes() == b.actions.tobytes()
                   for a, b in zip(full.episodes, again.episodes))
        from energy_policy.envs import scripted_expert
        third = scripted_expert(spec, spec.modes[3 % 3], Rng(40 + 3))
        assert third.actions.tobytes() == full.episodes[3].actions.tobytes()


class TestNormalization:
    def test_roundtrip(self, forked_ds):
        x = forked_ds.episodes[0].observations
        back = denormalize(normalize(x, forked_ds.norm_stats, "obs"),
                           forked_ds.norm_stats, "obs")
        np.testing.assert_allclose(back, x, atol=1e-12)

    def test_endpoints(self):
        stats = NormStats(obs_min=np.array([-2.0]), obs_max=np.array([6.0]),
                          act_min=np.array([0.0]), act_max=np.array([1.0]))
        assert normalize(np.array([-2.0]), stats, "obs")[0] == -1.0
        assert normalize(np.array([6.0]), stats, "obs")[0] == 1.0

    def test_degenerate_dim_maps_to_zero(self):
        stats = NormStats(obs_min=np.array([3.0]), obs_max=np.array([3.0]),
                          act_min=np.array([0.0]), act_max=np.array([1.0]))
        assert normalize(np.array([3.0]), stats, "obs")[0] == 0.0
        assert denormalize(np.array([0.7]), stats, "obs")[0] == 3.0

    def test_kind_validated(self):
        stats = NormStats(*(np.zeros(1),) * 4)
        with pytest.raises(ParameterError):
            normalize(np.zeros(1), stats, "reward")


class TestTrainingWindows:
    def test_window_count_equals_total_steps(self, forked_ds):
        windows, chunks = make_training_windows(forked_ds, 2, 16)
        total = sum(len(ep) for ep in forked_ds.episodes)
        assert windows.shape == (total, 2, 2)
        assert chunks.shape == (total, 16, 2)

    def test_history_padding_at_start(self, forked_ds):
        windows, _ = make_training_windows(forked_ds, 3, 4)
        first_obs = normalize(forked_ds.episodes[0].observations[0],
                              forked_ds.norm_stats, "obs")
        np.testing.assert_allclose(windows[0][0], first_obs, atol=1e-15)
        np.testing.assert_allclose(windows[0][1], first_obs, atol=1e-15)
        np.testing.assert_allclose(windows[0][2], first_obs, atol=1e-15)

    def test_chunk_padding_at_end(self, forked_ds):
        _, chunks = make_training_windows(forked_ds, 2, 8)
        ep = forked_ds.episodes[0]
        last_chunk = chunks[len(ep) - 1]
        last_action = normalize(ep.actions[-1], forked_ds.norm_stats, "action")
        for row in last_chunk:
            np.testing.assert_allclose(row, last_action, atol=1e-15)

    def test_empty_dataset_rejected(self, forked_ds):
        empty = DemoDataset(episodes=[], norm_stats=forked_ds.norm_stats,
                            env_spec=forked_ds.env_spec, seed=0)
        with pytest.raises(ParameterError):
            make_training_windows(empty, 2, 4)


class TestSerialization:
    def test_save_load_save_byte_identical(self, forked_ds, tmp_path):
        p1, p2 = tmp_path / "a.epds", tmp_path / "b.epds"
        dataset_save(forked_ds, str(p1))
        dataset_save(dataset_load(str(p1)), str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_every_float_preserved_exactly(self, forked_ds, tmp_path):
        path = tmp_path / "ds.epds"
        dataset_save(forked_ds, str(path))
        loaded = dataset_load(str(path))
        for a, b in zip(forked_ds.episodes, loaded.episodes):
            assert a.observations.tobytes() == b.observations.tobytes()
            assert a.actions.tobytes() == b.actions.tobytes()
            assert a.mode_label == b.mode_label and a.success == b.success
        for k in ("obs_min", "obs_max", "act_min", "act_max"):
            assert getattr(forked_ds.norm_stats, k).tobytes() == \
                getattr(loaded.norm_stats, k).tobytes()
        assert loaded.seed == forked_ds.seed

    def test_truncated_file_fails_closed(self, forked_ds, tmp_path):
        path = tmp_path / "ds.epds"
        dataset_save(forked_ds, str(path))
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:5]) + "\n")
        with pytest.raises(DatasetFormatError, match="truncated"):
            dataset_load(str(path))

    def test_malformed_line_names_line_number(self, forked_ds, tmp_path):
        path = tmp_path / "ds.epds"
        dataset_save(forked_ds, str(path))
        lines = path.read_text().splitlines()
        lines[3] = lines[3] + " 0.25"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match="line 4"):
            dataset_load(str(path))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.epds"
        path.write_text("EPDSX {}\n")
        with pytest.raises(DatasetFormatError, match="EPDS1"):
            dataset_load(str(path))

    def test_mode_label_none_roundtrip(self, tmp_path):
        spec = make_env_spec("line_reach")
        ep = Episode(observations=np.array([[0.0], [0.1]]),
                     actions=np.array([[1.0], [1.0]]),
                     mode_label=None, success=True)
        ds = DemoDataset(episodes=[ep], norm_stats=fit_norm_stats([ep]),
                         env_spec=spec, seed=1)
        path = tmp_path / "one.epds"
        dataset_save(ds, str(path))
        assert dataset_load(str(path)).episodes[0].mode_label is None
