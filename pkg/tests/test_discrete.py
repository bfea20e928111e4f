import numpy as np
import pytest

from sgdflow.discrete import (
    DiscreteConfig,
    DivergenceError,
    bootstrap_first_iterate,
    member_stream,
    momentum_step,
    run_trajectory,
    sgd_step,
    simulate_batch,
)
from sgdflow.problems import (
    ou_family,
    random_quadratic_family,
    scalar_affine_family,
    two_member_linear,
)
from sgdflow.schedules import Schedule

from oracles import affine_chain_moments, momentum_recursion


def singleton_cfg(h=0.1, T=1.0, seed=0, **kw):
    return DiscreteConfig(
        family=scalar_affine_family([1.0]),
        lr_schedules=Schedule.constant(1.0),
        h=h,
        horizon=T,
        x0=np.array([1.0]),
        seed=seed,
        **kw,
    )


class TestConfig:
    def test_grid_membership_enforced(self):
        with pytest.raises(ValueError, match="T/h not an integer"):
            singleton_cfg(h=0.3)

    def test_h_range(self):
        with pytest.raises(ValueError, match="h must lie"):
            singleton_cfg(h=1.5, T=3.0)

    def test_schedule_broadcast(self):
        fam = random_quadratic_family(3, 2, seed=0)
        cfg = DiscreteConfig(
            family=fam,
            lr_schedules=Schedule.constant(1.0),
            h=0.1,
            horizon=1.0,
            x0=np.zeros(3),
        )
        assert len(cfg.lr_schedules) == 3

    def test_steps(self):
        assert singleton_cfg(h=0.05).n_steps == 20


class TestSgdStep:
    def test_deterministic_linear(self):
        cfg = singleton_cfg()
        out = sgd_step(np.array([1.0]), 0, cfg, np.random.default_rng(0))
        assert out[0] == pytest.approx(0.9, rel=1e-15)

    def test_seed_determinism(self):
        cfg = DiscreteConfig(
            family=two_member_linear(),
            lr_schedules=Schedule.constant(1.0),
            h=0.1,
            horizon=1.0,
            x0=np.array([1.0]),
        )
        a = sgd_step(np.array([1.0]), 0, cfg, np.random.default_rng(42))
        b = sgd_step(np.array([1.0]), 0, cfg, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_ten_step_iteration(self):
        cfg = singleton_cfg()
        x = np.array([1.0])
        rng = np.random.default_rng(0)
        for n in range(10):
            x = sgd_step(x, n, cfg, rng)
        assert x[0] == pytest.approx(0.9**10, rel=1e-13)


class TestMomentumStep:
    def test_zero_momentum_equals_sgd(self):
        cfg = DiscreteConfig(
            family=two_member_linear(),
            lr_schedules=Schedule.constant(1.0),
            h=0.1,
            horizon=1.0,
            x0=np.array([1.0]),
        )
        x = np.array([0.8])
        a = sgd_step(x, 3, cfg, np.random.default_rng(1))
        b = momentum_step(x, np.array([2.0]), 3, cfg, np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)

    def test_zero_displacement(self):
        cfg = singleton_cfg(momentum_schedules=Schedule.constant(0.9))
        out = momentum_step(np.array([1.0]), np.array([1.0]), 2, cfg, np.random.default_rng(0))
        assert out[0] == pytest.approx(0.9, rel=1e-15)

    def test_hand_value(self):
        # x + eta H + zeta (x - xp) = 1 - 0.1 + 0.5 * (1 - 2) = 0.4
        cfg = singleton_cfg(momentum_schedules=Schedule.constant(0.5))
        out = momentum_step(np.array([1.0]), np.array([2.0]), 0, cfg, np.random.default_rng(0))
        assert out[0] == pytest.approx(0.4, rel=1e-14)


class TestBootstrap:
    def test_single_plain_step(self):
        cfg = singleton_cfg(momentum_schedules=Schedule.constant(0.9))
        out = bootstrap_first_iterate(np.array([1.0]), cfg, np.random.default_rng(0))
        assert out[0] == pytest.approx(0.9, rel=1e-15)

    def test_reproducible(self):
        cfg = DiscreteConfig(
            family=two_member_linear(),
            lr_schedules=Schedule.constant(1.0),
            h=0.1,
            horizon=1.0,
            x0=np.array([1.0]),
        )
        a = bootstrap_first_iterate(cfg.x0, cfg, np.random.default_rng(3))
        b = bootstrap_first_iterate(cfg.x0, cfg, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)


class TestRunTrajectory:
    def test_iterate_count(self):
        traj = run_trajectory(singleton_cfg(h=0.5, T=1.0), "sgd")
        assert traj.iterates.shape == (3, 1)
        np.testing.assert_array_equal(traj.steps, [0, 1, 2])

    def test_singleton_seed_independent(self):
        a = run_trajectory(singleton_cfg(seed=1), "sgd")
        b = run_trajectory(singleton_cfg(seed=99), "sgd")
        np.testing.assert_array_equal(a.iterates, b.iterates)

    def test_bit_identical_reruns(self):
        cfg = DiscreteConfig(
            family=two_member_linear(),
            lr_schedules=Schedule.constant(1.0),
            h=0.05,
            horizon=1.0,
            x0=np.array([1.0]),
            seed=17,
        )
        a = run_trajectory(cfg, "sgd")
        b = run_trajectory(cfg, "sgd")
        np.testing.assert_array_equal(a.iterates, b.iterates)
        np.testing.assert_array_equal(a.member_indices, b.member_indices)

    def test_momentum_zero_reduction_exact(self):
        cfg = DiscreteConfig(
            family=two_member_linear(),
            lr_schedules=Schedule.constant(1.0),
            h=0.05,
            horizon=1.0,
            x0=np.array([1.0]),
            seed=5,
        )
        sgd = run_trajectory(cfg, "sgd")
        mom = run_trajectory(cfg, "momentum")
        np.testing.assert_array_equal(sgd.iterates, mom.iterates)

    def test_augmented_matches_momentum(self):
        fam = random_quadratic_family(2, 2, seed=21)
        cfg = DiscreteConfig(
            family=fam,
            lr_schedules=Schedule.exponential(1.0, 0.4),
            momentum_schedules=Schedule.constant(0.6),
            h=0.05,
            horizon=1.0,
            x0=np.array([1.0, -0.5]),
            seed=9,
        )
        mom = run_trajectory(cfg, "momentum")
        aug = run_trajectory(cfg, "augmented")
        assert aug.iterates.shape == (cfg.n_steps, 4)
        gap = np.max(np.abs(aug.iterates[:, :2] - mom.iterates[1:]))
        assert gap <= 1e-12
        np.testing.assert_array_equal(mom.member_indices, aug.member_indices)

    def test_matches_direct_recursion_oracle(self):
        fam = two_member_linear()
        cfg = DiscreteConfig(
            family=fam,
            lr_schedules=Schedule.constant(1.0),
            momentum_schedules=Schedule.constant(0.5),
            h=0.1,
            horizon=1.0,
            x0=np.array([1.0]),
            seed=31,
        )
        traj = run_trajectory(cfg, "momentum")
        oracle = momentum_recursion(
            fam,
            traj.member_indices,
            cfg.lr_schedules,
            cfg.momentum_schedules,
            cfg.h,
            cfg.x0,
        )
        np.testing.assert_allclose(traj.iterates, np.array(oracle), atol=1e-14)

    def test_explicit_x1_skips_bootstrap_draw(self):
        cfg = DiscreteConfig(
            family=two_member_linear(),
            lr_schedules=Schedule.constant(1.0),
            momentum_schedules=Schedule.constant(0.5),
            h=0.25,
            horizon=1.0,
            x0=np.array([1.0]),
            x1=np.array([0.9]),
            seed=2,
        )
        traj = run_trajectory(cfg, "momentum")
        assert traj.member_indices[0] == -1
        np.testing.assert_allclose(traj.iterates[1], [0.9])

    def test_divergence_carries_partial(self):
        fam = scalar_affine_family([-30.0])  # H = +30 x: explosive
        cfg = DiscreteConfig(
            family=fam,
            lr_schedules=Schedule.constant(1.0),
            h=0.9,
            horizon=27.0,
            x0=np.array([1.0]),
            divergence_limit=1e6,
        )
        with pytest.raises(DivergenceError) as err:
            run_trajectory(cfg, "sgd")
        assert err.value.partial is not None
        assert err.value.step == len(err.value.partial.iterates) - 2
        assert np.max(np.abs(err.value.partial.iterates[-1])) > 1e6

    def test_strided_storage(self):
        traj = run_trajectory(singleton_cfg(h=0.01), "sgd", max_stored=20)
        assert traj.stride > 1
        assert len(traj.iterates) <= 21 + 1
        assert traj.steps[-1] == 100
        assert traj.endpoint[0] == pytest.approx(0.99**100, rel=1e-12)


class TestBatch:
    def test_row_zero_matches_single_run(self):
        fam = two_member_linear()
        cfg = DiscreteConfig(
            family=fam,
            lr_schedules=Schedule.constant(1.0),
            h=0.1,
            horizon=1.0,
            x0=np.array([1.0]),
            seed=4,
        )
        single = run_trajectory(cfg, "sgd").endpoint
        batch = simulate_batch(cfg, "sgd", 5)
        np.testing.assert_array_equal(batch[0], single)

    def test_chunking_is_invisible(self):
        cfg = DiscreteConfig(
            family=two_member_linear(),
            lr_schedules=Schedule.constant(1.0),
            h=0.1,
            horizon=1.0,
            x0=np.array([1.0]),
            seed=4,
        )
        a = simulate_batch(cfg, "sgd", 1000)
        b = simulate_batch(cfg, "sgd", 1000, chunk_rows=128)
        np.testing.assert_array_equal(a, b)

    def test_common_block_gives_prefix_draws(self):
        # With a shared block, a trajectory's draws at h are a prefix of its
        # draws at h/2, so endpoints across the grid are positively coupled.
        fam = two_member_linear()
        kw = dict(family=fam, lr_schedules=Schedule.constant(1.0), horizon=1.0,
                  x0=np.array([1.0]), seed=8)
        coarse = DiscreteConfig(h=0.1, **kw)
        fine = DiscreteConfig(h=0.05, **kw)
        block = fine.n_steps
        tc = run_trajectory(coarse, "sgd", block=block)
        tf = run_trajectory(fine, "sgd", block=block)
        np.testing.assert_array_equal(tc.member_indices, tf.member_indices[: coarse.n_steps])

    def test_momentum_batch_matches_single(self):
        fam = random_quadratic_family(2, 3, seed=2)
        cfg = DiscreteConfig(
            family=fam,
            lr_schedules=Schedule.constant(0.9),
            momentum_schedules=Schedule.constant(0.7),
            h=0.05,
            horizon=0.5,
            x0=np.array([1.0, 2.0]),
            seed=6,
        )
        singles = np.stack(
            [run_trajectory(cfg, "momentum", traj_id=i).endpoint for i in range(4)]
        )
        batch = simulate_batch(cfg, "momentum", 4)
        np.testing.assert_allclose(batch, singles, atol=1e-15)

    def test_augmented_batch_matches_momentum_batch(self):
        fam = two_member_linear()
        cfg = DiscreteConfig(
            family=fam,
            lr_schedules=Schedule.constant(1.0),
            momentum_schedules=Schedule.constant(0.5),
            h=0.1,
            horizon=1.0,
            x0=np.array([1.0]),
            seed=12,
        )
        a = simulate_batch(cfg, "momentum", 100)
        b = simulate_batch(cfg, "augmented", 100)
        assert np.max(np.abs(a - b)) <= 1e-12

    def test_mean_step_identity(self):
        # E[delta | x] = eta_n Hbar(x), 4-sigma Monte Carlo window at 1e6.
        fam = two_member_linear()
        cfg = DiscreteConfig(
            family=fam,
            lr_schedules=Schedule.constant(1.0),
            h=0.1,
            horizon=0.1,
            x0=np.array([1.0]),
            seed=13,
        )
        ends = simulate_batch(cfg, "sgd", 1_000_000)
        delta = ends[:, 0] - 1.0
        expected = 0.1 * fam.mean_drift(np.array([1.0]))[0]
        se = delta.std(ddof=1) / np.sqrt(len(delta))
        assert abs(delta.mean() - expected) <= 4 * se

    def test_sup_moment_bound_constant(self):
        # E[sup_n |x_n|^2]^(1/2) <= C (1 + |x0|) with one frozen constant.
        fam = two_member_linear()
        worst = 0.0
        for h in (0.1, 0.05, 0.025):
            cfg = DiscreteConfig(
                family=fam,
                lr_schedules=Schedule.constant(1.0),
                h=h,
                horizon=1.0,
                x0=np.array([1.0]),
                seed=14,
            )
            _, sups = simulate_batch(cfg, "sgd", 1000, return_sup=True)
            worst = max(worst, np.sqrt(sups.mean()) / (1.0 + 1.0))
        assert worst <= 0.75  # frozen: measured 0.5 for this contraction


class TestExport:
    def test_csv_columns(self, tmp_path):
        cfg = singleton_cfg(h=0.5, T=1.0)
        traj = run_trajectory(cfg, "sgd")
        path = tmp_path / "traj.csv"
        traj.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,t,x_1,gamma"
        assert len(lines) == 4
        last = lines[-1].split(",")
        assert last[0] == "2" and last[-1] == ""

    def test_augmented_csv_has_2d_columns(self, tmp_path):
        cfg = DiscreteConfig(
            family=two_member_linear(),
            lr_schedules=Schedule.constant(1.0),
            momentum_schedules=Schedule.constant(0.5),
            h=0.25,
            horizon=1.0,
            x0=np.array([1.0]),
            seed=0,
        )
        traj = run_trajectory(cfg, "augmented")
        path = tmp_path / "aug.csv"
        traj.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "step,t,x_1,x_2,gamma"
