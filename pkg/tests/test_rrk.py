import json
import math

import mpmath
import numpy as np
import pytest
from scipy.integrate import solve_ivp

from lyapcdr.errors import ConfigurationError, IntegrationError, TableauError
from lyapcdr.model import DimerizationModel, DimerParams, equilibrium_from_mass
from lyapcdr.rrk import (
    GAMMA_MAX,
    Functional,
    StepController,
    adaptive_advance,
    available_tableaux,
    dump_tableau,
    fixed_advance,
    load_tableau,
    order_condition_residuals,
    real_stability_limit,
    rk_stages,
    rooted_trees,
    rrk_step,
    solve_gamma,
    spectral_radius_estimate,
    stability_polynomial,
    tableau_library,
    verified_order,
)
from support import EQ, make_operator

QUADRATIC = Functional(value=lambda u: 0.5 * float(np.sum(u * u)), rate=lambda u, du: float(np.sum(u * du)))
ORDERS = {"heun2": 2, "bs3": 3, "rk4": 4, "bs5": 5}

U0 = np.array([1.0, 0.2])
DIMER = DimerizationModel(DimerParams(a=(1.0,)), equilibrium_from_mass(U0[0] + 2 * U0[1], 10.0, 1.0))
DIMER_V = Functional(value=lambda u: float(DIMER.lyapunov_V(u)),
                     rate=lambda u, du: float(DIMER.lyapunov_W(u) @ du))


def dimer_rhs(t, u):
    return DIMER.reaction(u)


def dimer_reference(T):
    sol = solve_ivp(dimer_rhs, (0.0, T), U0, method="DOP853", rtol=1e-13, atol=1e-15)
    return sol.y[:, -1]


def _write(path, **data):
    path.write_text(json.dumps(data))
    return path


class TestTableaux:
    def test_library(self):
        assert available_tableaux() == ["bs3", "bs5", "heun2", "rk4"]
        assert tableau_library("BS3(2)").name == "bs3"

    def test_rk4_coefficients(self):
        tab = tableau_library("rk4")
        np.testing.assert_array_equal(tab.c, [0.0, 0.5, 0.5, 1.0])
        np.testing.assert_allclose(tab.b, [1 / 6, 1 / 3, 1 / 3, 1 / 6], rtol=1e-16)

    def test_bs3_coefficients(self):
        tab = tableau_library("bs3")
        np.testing.assert_allclose(tab.b, [2 / 9, 1 / 3, 4 / 9, 0.0], rtol=1e-16)
        np.testing.assert_allclose(tab.b_hat, [7 / 24, 1 / 4, 1 / 3, 1 / 8], rtol=1e-16)
        # first same as last
        np.testing.assert_array_equal(tab.A[-1, :-1], tab.b[:-1])

    @pytest.mark.parametrize("name", sorted(ORDERS))
    def test_order_conditions(self, name):
        tab = tableau_library(name)
        assert verified_order(tab.A, tab.b) == ORDERS[name] == tab.order
        assert max(r for (_, _, r) in order_condition_residuals(tab.A, tab.b, tab.order)) <= 1e-13
        exact = order_condition_residuals(tab.exact["A"], tab.exact["b"], tab.order)
        assert all(r == 0.0 for (_, _, r) in exact)
        if tab.b_hat is not None:
            assert verified_order(tab.A, tab.b_hat) == tab.embedded_order

    @pytest.mark.parametrize("name", sorted(ORDERS))
    def test_nonnegative_weights(self, name):
        assert tableau_library(name).nonnegative_weights

    def test_tree_counts(self):
        # number of rooted trees with n nodes
        assert [len(v) for v in rooted_trees(7).values()] == [1, 1, 2, 4, 9, 20, 48]

    def test_unknown_name(self):
        with pytest.raises(ConfigurationError):
            tableau_library("dopri")

    @pytest.mark.parametrize("name", sorted(ORDERS))
    def test_file_round_trip(self, name, tmp_path):
        tab = tableau_library(name)
        dump_tableau(tab, tmp_path / "t.json")
        back = load_tableau(tmp_path / "t.json")
        np.testing.assert_array_equal(back.A, tab.A)
        np.testing.assert_array_equal(back.b, tab.b)
        assert back.order == tab.order and back.embedded_order == tab.embedded_order

    def test_bad_weight_sum(self, tmp_path):
        path = _write(tmp_path / "t.json", s=2, A=[[0, 0], [1, 0]], b=[0.45, 0.45], c=[0, 1], order=2)
        with pytest.raises(TableauError, match="weights must sum to one"):
            load_tableau(path)

    def test_bad_row_sum(self, tmp_path):
        path = _write(tmp_path / "t.json", s=2, A=[[0, 0], [1, 0]], b=["1/2", "1/2"], c=[0, 0.9], order=2)
        with pytest.raises(TableauError, match="row-sum"):
            load_tableau(path)

    def test_implicit_rejected(self, tmp_path):
        path = _write(tmp_path / "t.json", s=1, A=[[0.5]], b=[1], c=[0.5], order=1)
        with pytest.raises(TableauError, match="explicit"):
            load_tableau(path)

    def test_negative_weights_with_relaxation(self, tmp_path):
        path = _write(tmp_path / "t.json", s=3, A=[0, 0, 0, 1, 0, 0, 0, 1, 0], b=[1.5, -1, 0.5], c=[0, 1, 1],
                      order=1)
        assert load_tableau(path).stages == 3
        with pytest.raises(TableauError, match="negative"):
            load_tableau(path, relaxation=True)

    @pytest.mark.parametrize("text", ["{", json.dumps({"s": 1, "A": [[0]], "b": [1]})])
    def test_malformed_file(self, tmp_path, text):
        path = tmp_path / "t.json"
        path.write_text(text)
        with pytest.raises(TableauError):
            load_tableau(path)


class TestStages:
    def test_zero_rhs(self):
        u = np.array([1.0, 2.0])
        Y, F = rk_stages(u, 0.0, 0.1, tableau_library("bs5"), lambda t, u: np.zeros_like(u))
        for y in Y:
            np.testing.assert_array_equal(y, u)

    def test_heun_constant_slope(self):
        Y, _ = rk_stages(np.array([0.5]), 0.0, 0.25, tableau_library("heun2"), lambda t, u: np.ones_like(u))
        np.testing.assert_array_equal(Y[1], [0.75])

    @pytest.mark.parametrize("z", [-0.3, -1.7 + 0.4j, 0.2j, -2.7])
    def test_rk4_amplification(self, z):
        lam, dt = z / 0.1, 0.1
        res = rrk_step(np.array([1.0 + 0j]), 0.0, dt, tableau_library("rk4"), lambda t, u: lam * u, relaxation=False)
        expected = 1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24
        assert abs(res.u[0] - expected) <= 1e-14
        assert abs(stability_polynomial(tableau_library("rk4"), z) - expected) <= 1e-14

    def test_real_stability_limits(self):
        assert abs(real_stability_limit(tableau_library("heun2")) - 2.0) <= 1e-3
        # |R| first returns to one where R(z) = 1, z != 0
        roots = np.roots([1 / 24, 1 / 6, 1 / 2, 1])
        rk4_limit = float(np.max(-roots[np.abs(roots.imag) < 1e-12].real))
        assert abs(real_stability_limit(tableau_library("rk4")) - rk4_limit) <= 1e-3

    def test_spectral_radius_of_diagonal_system(self):
        lam = -np.array([1.0, 5.0, 40.0])
        rho = spectral_radius_estimate(lambda t, u: lam * u, 0.0, np.ones(3), iterations=80)
        assert abs(rho - 40.0) <= 1e-4


class TestRelaxation:
    @pytest.mark.parametrize("dt", [0.05, 0.2, 0.5])
    def test_heun_root_on_linear_decay(self, dt):
        u = np.array([1.3])
        res = rrk_step(u, 0.0, dt, tableau_library("heun2"), lambda t, u: -u, QUADRATIC)
        # closed form of the nonzero root, and an independent high-precision solve
        closed = (1 - dt) / (1 - dt / 2) ** 2
        mpmath.mp.dps = 50
        h, d = mpmath.mpf(dt), -(1 - mpmath.mpf(dt) / 2)
        e = -h / 2 * (1 + (1 - h) ** 2)
        root = mpmath.findroot(lambda g: (1 + g * h * d) ** 2 / 2 - mpmath.mpf(1) / 2 - g * e, 1)
        assert abs(closed - float(root)) <= 1e-15
        # the step resolves gamma only as far as the residual tolerance needs
        assert abs(res.relaxation.gamma - closed) <= 1e-9
        assert res.t == res.relaxation.gamma * dt
        rel = res.relaxation
        full = solve_gamma(u, rel.d, rel.e, dt, QUADRATIC,
                           precise=True)
        # q is flat near the root for small steps, so V's rounding limits gamma
        assert abs(full.gamma - closed) <= 1e-13

    def test_conservative_rotation(self):
        rot = np.array([[0.0, 1.0], [-1.0, 0.0]])
        u = np.array([0.6, -0.8])
        for _ in range(50):
            res = rrk_step(u, 0.0, 0.3, tableau_library("rk4"), lambda t, v: rot @ v, QUADRATIC)
            assert abs(res.relaxation.e) <= 1e-15
            assert abs(QUADRATIC.value(res.u) - QUADRATIC.value(u) - res.relaxation.gamma * res.relaxation.e) <= 1e-13
            u = res.u
        assert abs(np.linalg.norm(u) - 1.0) <= 1e-13

    def test_zero_rhs_keeps_state(self):
        u = np.array([0.3, 0.4])
        res = rrk_step(u, 1.0, 0.1, tableau_library("bs3"), lambda t, v: np.zeros_like(v), QUADRATIC)
        np.testing.assert_array_equal(res.u, u)
        assert res.relaxation.gamma == 1.0
        assert res.t == 1.1

    def test_identity_on_dimerization(self):
        u = U0.copy()
        for _ in range(20):
            res = rrk_step(u, 0.0, 0.02, tableau_library("bs3"), dimer_rhs, DIMER_V)
            rel = res.relaxation
            v_old, v_new = DIMER_V.value(u), DIMER_V.value(res.u)
            assert abs(v_new - v_old - rel.gamma * rel.e) <= 1e-12 * max(1.0, abs(v_old))
            assert rel.q_residual <= 1e-12 * max(1.0, abs(v_old))
            assert v_new <= v_old
            assert 0.0 < rel.gamma <= GAMMA_MAX
            u = res.u

    def test_gamma_tends_to_one(self):
        tab = tableau_library("bs3")
        dts = np.array([0.04, 0.02, 0.01, 0.005])
        dev = [abs(rrk_step(U0, 0.0, dt, tab, dimer_rhs, DIMER_V).relaxation.gamma - 1.0) for dt in dts]
        slope = np.polyfit(np.log(dts), np.log(dev), 1)[0]
        assert slope >= tab.order - 1 - 0.1

    def test_step_below_roundoff_accepts_one(self):
        u = np.array([1.0, 1.0])
        res = solve_gamma(u, np.array([1e-20, 0.0]), 0.0, 1.0, QUADRATIC)
        assert res.gamma == 1.0 and res.fallback == "near_equilibrium"


class TestFixedStepping:
    @pytest.mark.parametrize("relaxation", [False, True])
    def test_bs3_order_on_dimerization(self, relaxation):
        T = 1.0
        ref = dimer_reference(T)
        ns = [160, 320, 640]
        errs = []
        for n in ns:
            r = fixed_advance(U0, 0.0, T, T / n, tableau_library("bs3"), dimer_rhs, DIMER_V, relaxation)
            assert r.t == T
            errs.append(np.max(np.abs(r.u - ref)))
        rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert abs(rates[-1] - 3.0) <= 0.1

    def test_fixed_point_is_held(self):
        op = make_operator(dim=2, K=3, p=3, mapping="warp", alpha=0.05)
        u_eq = np.broadcast_to(EQ.as_array(), op.state_shape).copy()
        fun = Functional(value=op.lyapunov_functional, rate=op.lyapunov_rate,
                         rounding_scale=op.lyapunov_rounding_scale)
        fallbacks = []
        r = fixed_advance(u_eq, 0.0, 100 * 1e-3, 1e-3, tableau_library("bs3"), op, fun,
                          on_step=lambda rec, u: fallbacks.append(rec.gamma))
        assert len(r.steps) == 100
        assert np.max(np.abs(r.u - u_eq)) <= 1e-12
        assert all(g == 1.0 for g in fallbacks)

    def test_monotone_functional(self):
        r = fixed_advance(U0, 0.0, 2.0, 0.02, tableau_library("rk4"), dimer_rhs, DIMER_V)
        v = [s.v_start for s in r.steps] + [r.steps[-1].v_end]
        assert np.all(np.diff(v) <= 0.0)

    def test_relaxation_needs_functional(self):
        with pytest.raises(ConfigurationError):
            fixed_advance(U0, 0.0, 1.0, 0.1, tableau_library("rk4"), dimer_rhs)


class TestAdaptive:
    def test_error_control_on_linear_decay(self):
        ctrl = StepController(atol=1e-10, rtol=1e-10)
        r = adaptive_advance(np.array([1.0, 2.0]), 0.0, 3.0, tableau_library("bs3"), lambda t, u: -u,
                             QUADRATIC, ctrl)
        assert r.t == 3.0
        assert all(s.error_norm <= 1.0 for s in r.steps)
        np.testing.assert_allclose(r.u, np.array([1.0, 2.0]) * math.exp(-3.0), rtol=1e-7)

    def test_steps_grow_on_smooth_problem(self):
        ctrl = StepController(atol=1e-3, rtol=1e-3, dt=1e-6)
        r = adaptive_advance(np.array([1.0]), 0.0, 1.0, tableau_library("bs5"), lambda t, u: -0.1 * u, None,
                             ctrl, relaxation=False)
        assert r.steps[1].dt > 2 * r.steps[0].dt
        assert len(r.steps) < 30

    def test_lands_on_end_time_with_relaxation(self):
        r = adaptive_advance(U0, 0.0, 1.7, tableau_library("bs3"), dimer_rhs, DIMER_V,
                             StepController(atol=1e-9, rtol=1e-9))
        assert r.t == 1.7
        np.testing.assert_allclose(r.u, dimer_reference(1.7), rtol=1e-6)
        assert all(s.v_end <= s.v_start for s in r.steps)

    def test_pde_step_rejections_recover(self):
        op = make_operator(dim=1, K=8, p=3, d=0.05)
        x = op.metrics.coordinates[..., 0]
        u0 = np.stack([0.2 + 5 * np.exp(-100 * (x - 0.5) ** 2), 0.5 + 0 * x], axis=-1)
        fun = Functional(value=op.lyapunov_functional, rate=op.lyapunov_rate,
                         rounding_scale=op.lyapunov_rounding_scale)
        r = adaptive_advance(u0, 0.0, 0.05, tableau_library("bs3"), op, fun,
                             StepController(atol=1e-6, rtol=1e-6, dt=0.05))
        assert r.t == 0.05 and r.n_rejected >= 1 and r.n_relaxation_rejections == 0

    def test_requires_embedded_pair(self):
        with pytest.raises(ConfigurationError):
            adaptive_advance(U0, 0.0, 1.0, tableau_library("rk4"), dimer_rhs, DIMER_V, StepController())

    def test_step_underflow(self):
        ctrl = StepController(atol=1e-14, rtol=1e-14, dt=1e-3, dt_min=1e-4)
        with pytest.raises(IntegrationError) as info:
            adaptive_advance(np.array([1.0]), 0.0, 1.0, tableau_library("bs3"), lambda t, u: 50 * u ** 2, None,
                             ctrl, relaxation=False)
        assert info.value.last_time is not None

    @pytest.mark.parametrize("bad", [dict(atol=0, rtol=0), dict(dt_min=1.0, dt_max=0.5)])
    def test_controller_bounds(self, bad):
        with pytest.raises(ConfigurationError):
            StepController(**bad)
