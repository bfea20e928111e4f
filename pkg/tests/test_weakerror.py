import json

import numpy as np
import pytest

from sgdflow.continuous import SurrogateSpec, leading_error_integral
from sgdflow.discrete import DiscreteConfig
from sgdflow.observables import make_observable
from sgdflow.problems import scalar_affine_family, two_member_linear
from sgdflow.schedules import Schedule
from sgdflow.weakerror import (
    ConvergenceFit,
    GridPointResult,
    WeakErrorReport,
    convergence_fit,
    estimate_discrete_expectation,
    exact_discrete_expectation,
    expansion_residual,
    study_grid,
    surrogate_expectation,
    weak_error,
)

from oracles import factorized_linear_mean

CONST = Schedule.constant(1.0)
G_ID = make_observable("coordinate")


def make_cfg(family, h, T=1.0, seed=0, **kw):
    return DiscreteConfig(
        family=family, lr_schedules=CONST, h=h, horizon=T, x0=np.array([1.0]), seed=seed, **kw
    )


def make_spec(family, h=None, kind="ode", T=1.0):
    return SurrogateSpec(
        kind=kind,
        family=family,
        lr_schedules=(CONST,),
        horizon=T,
        h=h,
        substep=1e-3 if kind == "ode" else h / 4,
    )


class TestEstimate:
    def test_singleton_zero_se(self):
        cfg = make_cfg(scalar_affine_family([1.0]), h=0.1)
        mean, se = estimate_discrete_expectation(cfg, G_ID, 200)
        assert se == 0.0
        assert mean == pytest.approx(0.9**10, rel=1e-13)

    def test_two_member_matches_factorization(self):
        fam = two_member_linear()
        cfg = make_cfg(fam, h=0.05, seed=3)
        mean, se = estimate_discrete_expectation(cfg, G_ID, 100_000)
        exact = factorized_linear_mean([1.0, 2.0], [0.5, 0.5], 0.05, 20, 1.0)
        assert abs(mean - exact) <= 4 * se

    def test_se_scaling(self):
        fam = two_member_linear()
        cfg = make_cfg(fam, h=0.1, seed=5)
        _, se1 = estimate_discrete_expectation(cfg, G_ID, 20_000)
        _, se4 = estimate_discrete_expectation(cfg, G_ID, 80_000)
        assert se4 / se1 == pytest.approx(0.5, rel=0.2)


class TestExactEnumeration:
    def test_matches_factorization(self):
        fam = two_member_linear()
        cfg = make_cfg(fam, h=0.1, T=1.0)
        got = exact_discrete_expectation(cfg, G_ID)
        assert got == pytest.approx(factorized_linear_mean([1, 2], [0.5, 0.5], 0.1, 10, 1.0), rel=1e-12)

    def test_momentum_mode_matches_mc(self):
        fam = two_member_linear()
        cfg = make_cfg(fam, h=0.125, momentum_schedules=Schedule.constant(0.5), seed=21)
        exact = exact_discrete_expectation(cfg, G_ID, mode="momentum")
        mean, se = estimate_discrete_expectation(cfg, G_ID, 200_000, mode="momentum")
        assert abs(mean - exact) <= 4 * se

    def test_path_limit_enforced(self):
        fam = two_member_linear()
        cfg = make_cfg(fam, h=0.025, T=1.0)  # 2^40 paths
        with pytest.raises(ValueError, match="enumeration"):
            exact_discrete_expectation(cfg, G_ID)


class TestWeakError:
    def test_deterministic_linear_value(self):
        fam = scalar_affine_family([1.0])
        cfg = make_cfg(fam, h=0.1)
        point = weak_error(cfg, make_spec(fam), G_ID, 200)
        assert point.error == pytest.approx(0.9**10 - np.exp(-1.0), abs=1e-8)
        assert point.se == 0.0

    def test_halving_ratio_first_order(self):
        # Exact iteration: 0.95^20 - e^-1 = -0.0093935, ratio 2.044.
        fam = scalar_affine_family([1.0])
        errs = []
        for h in (0.1, 0.05):
            cfg = make_cfg(fam, h=h)
            errs.append(weak_error(cfg, make_spec(fam), G_ID, 200).error)
        assert errs[1] == pytest.approx(0.95**20 - np.exp(-1.0), abs=1e-8)
        assert errs[0] / errs[1] == pytest.approx(2.044, abs=0.01)

    def test_constant_observable_zero(self):
        fam = two_member_linear()
        cfg = make_cfg(fam, h=0.1)
        g = make_observable("constant")
        point = weak_error(cfg, make_spec(fam), g, 500)
        assert point.error == 0.0 and point.se == 0.0

    def test_closed_form_surrogate_override(self):
        fam = scalar_affine_family([1.0])
        cfg = make_cfg(fam, h=0.1)
        point = weak_error(cfg, make_spec(fam), G_ID, 200, surrogate_value=(np.exp(-1.0), 0.0))
        assert point.error == pytest.approx(0.9**10 - np.exp(-1.0), rel=1e-12)

    def test_horizon_mismatch_rejected(self):
        fam = scalar_affine_family([1.0])
        cfg = make_cfg(fam, h=0.1)
        with pytest.raises(ValueError, match="horizon"):
            weak_error(cfg, make_spec(fam, T=2.0), G_ID, 200)


def synthetic_points(coeff, order, hs=(0.1, 0.05, 0.025, 0.0125)):
    return [
        GridPointResult(h=h, discrete_mean=coeff * h**order, discrete_se=0.0,
                        surrogate_value=0.0, surrogate_se=0.0)
        for h in hs
    ]


class TestConvergenceFit:
    def test_exact_first_order(self):
        fit = convergence_fit(synthetic_points(0.1, 1.0))
        assert fit.slope == pytest.approx(1.0, abs=1e-12)

    def test_exact_second_order(self):
        fit = convergence_fit(synthetic_points(0.3, 2.0))
        assert fit.slope == pytest.approx(2.0, abs=1e-12)

    def test_benchmark_grid_order(self):
        fam = scalar_affine_family([1.0])
        points = []
        for h in (0.1, 0.05, 0.025, 0.0125):
            cfg = make_cfg(fam, h=h)
            points.append(weak_error(cfg, make_spec(fam), G_ID, 200))
        fit = convergence_fit(points)
        assert 0.95 <= fit.slope <= 1.05
        assert fit.ci_low <= fit.slope <= fit.ci_high

    def test_noise_points_excluded(self):
        points = synthetic_points(0.1, 1.0)
        noisy = GridPointResult(h=0.00625, discrete_mean=1e-6, discrete_se=1e-6,
                                surrogate_value=0.0, surrogate_se=0.0)
        fit = convergence_fit(points + [noisy])
        assert fit.excluded == (0.00625,)
        assert fit.n_used == 4

    def test_min_points_enforced(self):
        points = synthetic_points(0.1, 1.0, hs=(0.1, 0.05, 0.025))
        with pytest.raises(ValueError, match="usable grid points"):
            convergence_fit(points)
        fit = convergence_fit(points, min_points=3)
        assert fit.slope == pytest.approx(1.0, abs=1e-12)

    def test_grid_must_decrease(self):
        points = synthetic_points(0.1, 1.0)
        with pytest.raises(ValueError, match="decreasing"):
            convergence_fit(points[::-1])


class TestExpansionResidual:
    def test_constant_observable_all_zero(self):
        g = make_observable("constant")
        points = [
            GridPointResult(h=h, discrete_mean=1.0, discrete_se=0.0,
                            surrogate_value=1.0, surrogate_se=0.0)
            for h in (0.1, 0.05)
        ]
        res = expansion_residual(points, 0.0)
        assert all(p.error == 0.0 for p in res)

    def test_linear_benchmark_matches_series(self):
        # residual(h) = (1-h)^{T/h} - e^{-T} + h T e^{-T} / 2 = O(h^2).
        fam = scalar_affine_family([1.0])
        spec = make_spec(fam)
        integral = leading_error_integral(spec, G_ID, np.array([1.0]), nodes=101, eps_x=1e-3, eps_t=1e-3)
        points, exact = [], []
        for h in (0.1, 0.05, 0.025):
            cfg = make_cfg(fam, h=h)
            points.append(weak_error(cfg, spec, G_ID, 200, surrogate_value=(np.exp(-1.0), 0.0)))
            n = int(round(1.0 / h))
            exact.append((1 - h) ** n - np.exp(-1.0) + 0.5 * h * np.exp(-1.0))
        res = expansion_residual(points, integral)
        for p, e in zip(res, exact):
            assert p.error == pytest.approx(e, abs=2e-6)

    def test_residual_shrinks_quadratically(self):
        fam = scalar_affine_family([1.0])
        spec = make_spec(fam)
        integral = leading_error_integral(spec, G_ID, np.array([1.0]), nodes=101, eps_x=1e-3, eps_t=1e-3)
        res = []
        for h in (0.1, 0.05):
            cfg = make_cfg(fam, h=h)
            p = weak_error(cfg, spec, G_ID, 200, surrogate_value=(np.exp(-1.0), 0.0))
            res.append(abs(expansion_residual([p], integral)[0].error))
        assert res[0] / res[1] == pytest.approx(4.0, abs=0.5)


class TestStudyGrid:
    def test_common_randomness_tightens_differences(self):
        fam = two_member_linear()
        base = make_cfg(fam, h=0.1, seed=123)
        points = study_grid(
            base,
            [0.1, 0.05],
            lambda h: make_spec(fam),
            G_ID,
            20_000,
            surrogate_values=lambda h: (np.exp(-1.5), 0.0),
        )
        # Same seed block: the h=0.1 draw sequence is a prefix of h=0.05's.
        assert points[0].h == 0.1 and points[1].h == 0.05
        for p, h in zip(points, (0.1, 0.05)):
            exact = factorized_linear_mean([1, 2], [0.5, 0.5], h, int(1 / h), 1.0)
            assert abs(p.discrete_mean - exact) <= 4 * p.discrete_se

    def test_grid_order_enforced(self):
        fam = two_member_linear()
        base = make_cfg(fam, h=0.1)
        with pytest.raises(ValueError, match="decreasing"):
            study_grid(base, [0.05, 0.1], lambda h: make_spec(fam), G_ID, 500)


class TestMomentumModeStudy:
    def test_augmented_surrogate_order_at_least_first(self):
        # Deterministic singleton: the pipeline error against the augmented
        # flow must vanish at least first order (measured ~2, superconvergent
        # for constant coefficients).
        from sgdflow.augment import AugmentedSystem

        fam = scalar_affine_family([1.0])
        x0, x1 = np.array([1.0]), np.array([0.93])
        points = []
        grid = [0.1, 0.05, 0.025, 0.0125]
        for h in grid:
            cfg = DiscreteConfig(
                family=fam, lr_schedules=CONST, momentum_schedules=Schedule.constant(0.5),
                h=h, horizon=1.0, x0=x0, x1=x1,
            )
            system = AugmentedSystem(fam, (CONST,), (Schedule.constant(0.5),), h=h)
            spec = SurrogateSpec(
                kind="ode", family=fam, lr_schedules=(CONST,), horizon=1.0,
                substep=h / 50, augmented=system,
            )
            points.append(weak_error(cfg, spec, G_ID, 10, mode="momentum"))
        errs = [abs(p.error) for p in points]
        assert all(a > b for a, b in zip(errs, errs[1:]))
        fit = convergence_fit(points)
        assert fit.slope >= 0.9

    def test_momentum_surrogate_requires_x1(self):
        from sgdflow.augment import AugmentedSystem

        fam = scalar_affine_family([1.0])
        cfg = DiscreteConfig(
            family=fam, lr_schedules=CONST, momentum_schedules=Schedule.constant(0.5),
            h=0.1, horizon=1.0, x0=np.array([1.0]),
        )
        system = AugmentedSystem(fam, (CONST,), (Schedule.constant(0.5),), h=0.1)
        spec = SurrogateSpec(
            kind="ode", family=fam, lr_schedules=(CONST,), horizon=1.0,
            substep=0.002, augmented=system,
        )
        with pytest.raises(ValueError, match="x1"):
            weak_error(cfg, spec, G_ID, 10, mode="momentum")


class TestSurrogateExpectation:
    def test_ode_deterministic(self):
        fam = scalar_affine_family([1.0])
        value, se = surrogate_expectation(make_spec(fam), G_ID, np.array([1.0]))
        assert value == pytest.approx(np.exp(-1.0), abs=1e-8)
        assert se == 0.0

    def test_sde_mc(self):
        from sgdflow.problems import ou_family
        from oracles import linear_sde_endpoint

        fam = ou_family()
        spec = SurrogateSpec(
            kind="sde1", family=fam, lr_schedules=(CONST,), horizon=1.0, h=0.05, substep=0.0025
        )
        value, se = surrogate_expectation(spec, G_ID, np.array([1.0]), n_samples=20_000, seed=2)
        mean, _ = linear_sde_endpoint(1.0, np.sqrt(0.05), 1.0, 1.0)
        assert abs(value - mean) <= 4 * se


class TestReport:
    def make_report(self):
        points = synthetic_points(0.1, 1.0)
        fit = convergence_fit(points)
        return WeakErrorReport(
            observable="coordinate[0]", horizon=1.0, surrogate="ode",
            points=tuple(points), fit=fit,
        )

    def test_json_schema(self, tmp_path):
        report = self.make_report()
        path = tmp_path / "report.json"
        report.to_json(path)
        data = json.loads(path.read_text())
        for key in ("grid", "errors", "se", "slope", "ci", "excluded"):
            assert key in data
        assert data["slope"] == pytest.approx(1.0)
        assert data["grid"] == [0.1, 0.05, 0.025, 0.0125]

    def test_json_deterministic(self, tmp_path):
        report = self.make_report()
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        report.to_json(a)
        report.to_json(b)
        assert a.read_bytes() == b.read_bytes()

    def test_csv_and_loglog(self, tmp_path):
        report = self.make_report()
        report.to_csv(tmp_path / "report.csv")
        report.loglog_csv(tmp_path / "loglog.csv")
        rows = (tmp_path / "report.csv").read_text().strip().splitlines()
        assert rows[0].startswith("h,discrete_mean")
        assert len(rows) == 5
        ll = (tmp_path / "loglog.csv").read_text().strip().splitlines()
        assert ll[0] == "log_h,log_abs_error"
        first = [float(v) for v in ll[1].split(",")]
        assert first[0] == pytest.approx(np.log(0.1))
        assert first[1] == pytest.approx(np.log(0.01))
