"""Step-level algorithm tests: kinds, schedules, defaults, and update algebra."""

import dataclasses
import math

import numpy as np
import pytest

from fedbilevel.algorithms import (
    AlgoKind,
    ClientState,
    HyperParams,
    Schedule,
    alpha,
    default_hyperparams,
    fedavg_step,
    fedbio_locallower_step,
    fedbio_step,
    fedbioacc_locallower_step,
    fedbioacc_step,
    init_momenta,
    init_state,
    local_acc_phase_a,
    local_acc_phase_b,
    momentum_weight,
)
from fedbilevel.hypergrad import (
    NeumannParams,
    assemble_client_direction,
    neumann_hypergrad,
    quadratic_subproblem_grad,
)
from fedbilevel.numerics import Purpose, RngStream, project_ball
from fedbilevel.problems.instrument import RecordingProblem


def _stream(t: int, client: int = 0, seed: int = 99) -> RngStream:
    return RngStream(seed, client=client, step=t, purpose=0)


def _hp_for(family, *, M=None, b=4, I=5) -> HyperParams:
    return default_hyperparams(family.constants, M=M or family.M, b=b, I=I)


def _fresh_state(family, problem, hp, *, momenta=True, neumann=None) -> ClientState:
    st = init_state(family.init_x(), family.init_y())
    if momenta:
        st = init_momenta(st, problem, hp, _stream(0, client=problem.client_id), neumann=neumann)
    return st


# ---------------------------------------------------------------------------
# AlgoKind / Schedule / HyperParams plumbing
# ---------------------------------------------------------------------------


class TestAlgoKind:
    def test_from_str_roundtrip(self):
        for kind in AlgoKind:
            assert AlgoKind.from_str(kind.value) is kind

    def test_from_str_unknown_lists_valid_names(self):
        with pytest.raises(ValueError, match="unknown algorithm 'sgd'"):
            AlgoKind.from_str("sgd")
        with pytest.raises(ValueError, match="fedbioacc_local"):
            AlgoKind.from_str("nope")

    def test_local_lower_flag(self):
        assert AlgoKind.FEDBIO_LOCAL.local_lower
        assert AlgoKind.FEDBIOACC_LOCAL.local_lower
        assert not AlgoKind.FEDBIO.local_lower
        assert not AlgoKind.FEDBIOACC.local_lower
        assert not AlgoKind.FEDAVG.local_lower

    def test_accelerated_flag(self):
        assert AlgoKind.FEDBIOACC.accelerated
        assert AlgoKind.FEDBIOACC_LOCAL.accelerated
        assert not AlgoKind.FEDBIO.accelerated
        assert not AlgoKind.FEDBIO_LOCAL.accelerated
        assert not AlgoKind.FEDAVG.accelerated


class TestSchedule:
    def test_hand_value(self):
        # delta / (u0 + t)^(1/3) with delta=1, u0=7, t=1 -> 1/2 exactly.
        assert alpha(Schedule(delta=1.0, u0=7.0), 1) == 0.5

    def test_strictly_decreasing(self):
        s = Schedule(delta=2.0, u0=100.0)
        vals = [alpha(s, t) for t in range(1, 2000)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] > 0.0

    def test_t_below_one_rejected(self):
        with pytest.raises(ValueError, match=">= 1"):
            alpha(Schedule(delta=1.0, u0=0.0), 0)

    def test_validation(self):
        with pytest.raises(ValueError, match="delta"):
            Schedule(delta=0.0, u0=1.0)
        with pytest.raises(ValueError, match="u0"):
            Schedule(delta=1.0, u0=-1.0)


class TestHyperParams:
    def _base(self, **kw):
        args = dict(eta=0.1, gamma=0.1, tau=0.1, r=1.0, I=5, b=4, b1=20)
        args.update(kw)
        return HyperParams(**args)

    @pytest.mark.parametrize("field", ["eta", "gamma", "tau", "r"])
    def test_positive_rates_required(self, field):
        with pytest.raises(ValueError, match=field):
            self._base(**{field: 0.0})

    @pytest.mark.parametrize("field", ["I", "b", "b1"])
    def test_counts_at_least_one(self, field):
        with pytest.raises(ValueError, match=field):
            self._base(**{field: 0})

    @pytest.mark.parametrize("field", ["c_nu", "c_omega", "c_u"])
    def test_momentum_constants_nonnegative(self, field):
        with pytest.raises(ValueError, match="non-negative"):
            self._base(**{field: -0.5})

    def test_rate_is_one_without_schedule(self):
        hp = self._base()
        assert hp.schedule is None
        assert hp.rate(1) == 1.0
        assert hp.rate(10_000) == 1.0

    def test_rate_follows_schedule(self):
        s = Schedule(delta=1.0, u0=7.0)
        hp = self._base(schedule=s)
        for t in (1, 2, 17):
            assert hp.rate(t) == alpha(s, t)


class TestDefaultHyperparams:
    def test_momentum_constant_formulas(self, quad_family):
        c = quad_family.constants
        M, b, I = 4, 8, 5
        hp = default_hyperparams(c, M=M, b=b, I=I)
        bM = b * M
        assert hp.c_nu == pytest.approx(64.0 / (9.0 * bM) + 2.0 / (3.0 * bM**2), rel=1e-15)
        expected_om = 48.0**2 / (bM * c.mu**2) + 2.0 / (3.0 * bM**2)
        assert hp.c_omega == pytest.approx(expected_om, rel=1e-15)
        assert hp.c_u == hp.c_omega

    def test_radius_and_warmup_batch(self, quad_family):
        c = quad_family.constants
        hp = default_hyperparams(c, M=4, b=8, I=5)
        assert hp.r == pytest.approx(c.C_f / c.mu, rel=1e-15)
        assert hp.b1 == 5 * 8
        assert hp.I == 5 and hp.b == 8

    def test_stability_caps(self, quad_family):
        c = quad_family.constants
        hp = default_hyperparams(c, M=4, b=8, I=5)
        assert 0 < hp.gamma <= 0.5 / (2.0 * c.L)
        assert 0 < hp.tau <= 0.5 * min(1.0 / (2.0 * c.L), 0.5)
        L_up = c.L_upper if c.L_upper is not None else c.L * c.kappa
        assert 0 < hp.eta <= 0.5 / (2.0 * L_up)

    def test_schedule_keeps_weights_in_unit_interval(self, quad_family):
        hp = default_hyperparams(quad_family.constants, M=4, b=8, I=5)
        assert hp.schedule is not None
        c_max = max(hp.c_nu, hp.c_omega, hp.c_u)
        a1 = hp.rate(1)
        # alpha_1 = 0.5*min(1, 1/sqrt(c_max)) so c*alpha_1^2 <= 1/4; decreasing
        # alpha keeps every later weight in (0, 1) as well.
        assert c_max * a1 * a1 <= 0.25 + 1e-12
        for t in (1, 2, 10, 100, 10_000):
            a = hp.rate(t)
            for cc in (hp.c_nu, hp.c_omega, hp.c_u):
                assert 0.0 < 1.0 - cc * a * a <= 1.0


class TestMomentumWeight:
    def test_plain_value(self):
        w, clamped = momentum_weight(2.0, 0.5)
        assert w == 1.0 - 2.0 * 0.25
        assert clamped == 0

    def test_clamps_at_zero(self):
        w, clamped = momentum_weight(5.0, 1.0)
        assert w == 0.0
        assert clamped == 1

    def test_zero_constant_gives_unit_weight(self):
        assert momentum_weight(0.0, 0.3) == (1.0, 0)


# ---------------------------------------------------------------------------
# state setup
# ---------------------------------------------------------------------------


class TestInitState:
    def test_shapes_and_zeros(self, quad_family):
        fam = quad_family
        prob = fam.clients[0]
        st = init_state(fam.init_x(), fam.init_y())
        assert st.t == 1 and st.clamped == 0
        assert st.x.shape == (quad_family.p,) and st.y.shape == (quad_family.d,)
        for buf in (st.u, st.omega, st.q):
            assert buf.shape == (quad_family.d,)
            assert not buf.any()
        assert st.nu.shape == (quad_family.p,) and not st.nu.any()

    def test_copies_inputs(self, quad_family):
        fam = quad_family
        prob = fam.clients[0]
        x0, y0 = fam.init_x(), fam.init_y()
        st = init_state(x0, y0)
        assert st.x is not x0 and st.y is not y0


class TestInitMomenta:
    def test_global_lower_uses_b1_batches(self, quad_noisy):
        fam = quad_noisy
        prob = RecordingProblem(fam.clients[0])
        hp = _hp_for(quad_noisy, b=3, I=4)
        st = init_momenta(init_state(fam.init_x(), fam.init_y()), prob, hp, _stream(0))
        assert prob.counts == {
            "grad_g_y": 1,
            "grad_f_x": 1,
            "jvp_gxy": 1,
            "hvp_gyy": 1,
            "grad_f_y": 1,
        }
        assert prob.samples == 5 * hp.b1
        assert st.omega.any() and st.nu.any() and st.q.any()

    def test_warmup_matches_direct_assembly(self, quad_noisy):
        fam = quad_noisy
        prob = fam.clients[0]
        hp = _hp_for(quad_noisy, b=3, I=4)
        stream = _stream(0)
        st = init_momenta(init_state(fam.init_x(), fam.init_y()), prob, hp, stream)
        x, y, u = fam.init_x(), fam.init_y(), np.zeros(prob.d)
        by = prob.draw(stream.with_purpose(int(Purpose.BATCH_Y)), hp.b1, "lower")
        np.testing.assert_array_equal(st.omega, prob.grad_g_y(x, y, by))
        np.testing.assert_array_equal(st.nu, assemble_client_direction(prob, x, y, u, hp.b1, stream))
        np.testing.assert_array_equal(st.q, quadratic_subproblem_grad(prob, x, y, u, hp.b1, stream))

    def test_local_lower_without_u_update_zeroes_q(self, hyperrep_family):
        fam = hyperrep_family
        prob = fam.clients[0]
        hp = _hp_for(hyperrep_family, b=4, I=2)
        ne = NeumannParams(tau=0.5 / hyperrep_family.constants.L, Q=5)
        st = init_momenta(init_state(fam.init_x(), fam.init_y()), prob, hp, _stream(0), neumann=ne)
        assert st.nu.any() and st.omega.any()
        assert not st.q.any()

    def test_local_lower_with_u_update_fills_q(self, hyperrep_family):
        fam = hyperrep_family
        prob = fam.clients[0]
        hp = dataclasses.replace(_hp_for(hyperrep_family, b=4, I=2), local_u_update=True)
        ne = NeumannParams(tau=0.5 / hyperrep_family.constants.L, Q=5)
        st = init_momenta(init_state(fam.init_x(), fam.init_y()), prob, hp, _stream(0), neumann=ne)
        assert st.q.any()


# ---------------------------------------------------------------------------
# STORM recursion identities
# ---------------------------------------------------------------------------


class TestStormIdentities:
    def test_degenerate_weight_reduces_to_fresh_gradient(self, quad_noisy):
        """With c*alpha^2 == 1 every momentum equals the new-point estimate."""
        fam = quad_noisy
        prob = fam.clients[1]
        hp = _hp_for(quad_noisy, b=4)
        # alpha(1) = 1 under Schedule(delta=1, u0=0); unit momentum constants
        # then give weight exactly 1 - 1*1 = 0.
        hp = dataclasses.replace(
            hp, c_nu=1.0, c_omega=1.0, c_u=1.0, schedule=Schedule(delta=1.0, u0=0.0)
        )
        st0 = _fresh_state(fam, prob, hp)
        # poison the old buffers: they must not leak through a zero weight
        st0 = dataclasses.replace(
            st0, nu=st0.nu + 1e6, omega=st0.omega - 1e6, q=st0.q + 1e6
        )
        stream = _stream(1, client=prob.client_id)
        st1 = fedbioacc_step(st0, prob, hp, 1, stream)

        a = hp.rate(1)
        assert a == 1.0
        y1 = st0.y - hp.gamma * a * st0.omega
        x1 = st0.x - hp.eta * a * st0.nu
        u1 = project_ball(st0.u - hp.tau * a * st0.q, hp.r)
        by = prob.draw(stream.with_purpose(int(Purpose.BATCH_Y)), hp.b, "lower")
        np.testing.assert_array_equal(st1.omega, prob.grad_g_y(x1, y1, by))
        np.testing.assert_array_equal(
            st1.nu, assemble_client_direction(prob, x1, y1, u1, hp.b, stream)
        )
        np.testing.assert_array_equal(
            st1.q, quadratic_subproblem_grad(prob, x1, y1, u1, hp.b, stream)
        )
        assert st1.clamped == st0.clamped

    def test_telescoping_recursion_bit_exact(self, quad_noisy):
        """One step replays exactly as new-eval + weight * (buffer - old-eval)."""
        fam = quad_noisy
        prob = fam.clients[0]
        hp = _hp_for(quad_noisy, b=4)
        st0 = _fresh_state(fam, prob, hp)
        for t in (1, 2, 3):
            stream = _stream(t, client=prob.client_id)
            st1 = fedbioacc_step(st0, prob, hp, t, stream)

            a = hp.rate(t)
            y1 = st0.y - hp.gamma * a * st0.omega
            x1 = st0.x - hp.eta * a * st0.nu
            u1 = project_ball(st0.u - hp.tau * a * st0.q, hp.r)
            np.testing.assert_array_equal(st1.y, y1)
            np.testing.assert_array_equal(st1.x, x1)
            np.testing.assert_array_equal(st1.u, u1)

            w_om, _ = momentum_weight(hp.c_omega, a)
            w_nu, _ = momentum_weight(hp.c_nu, a)
            w_u, _ = momentum_weight(hp.c_u, a)
            by = prob.draw(stream.with_purpose(int(Purpose.BATCH_Y)), hp.b, "lower")
            om = prob.grad_g_y(x1, y1, by) + w_om * (st0.omega - prob.grad_g_y(st0.x, st0.y, by))
            nu = assemble_client_direction(prob, x1, y1, u1, hp.b, stream) + w_nu * (
                st0.nu - assemble_client_direction(prob, st0.x, st0.y, st0.u, hp.b, stream)
            )
            q = quadratic_subproblem_grad(prob, x1, y1, u1, hp.b, stream) + w_u * (
                st0.q - quadratic_subproblem_grad(prob, st0.x, st0.y, st0.u, hp.b, stream)
            )
            np.testing.assert_array_equal(st1.omega, om)
            np.testing.assert_array_equal(st1.nu, nu)
            np.testing.assert_array_equal(st1.q, q)
            assert st1.t == t + 1
            st0 = st1

    def test_old_and_new_evals_share_batches(self, quad_noisy):
        """Inside one step each oracle pair sees one batch id, old and new point."""
        fam = quad_noisy
        prob = RecordingProblem(fam.clients[0])
        hp = _hp_for(quad_noisy, b=4)
        st0 = _fresh_state(fam, prob, hp)
        prob.records.clear()
        st0 = dataclasses.replace(st0, x=st0.x + 0.1)  # make old != new everywhere
        fedbioacc_step(st0, prob, hp, 1, _stream(1))

        by_oracle: dict[str, list] = {}
        for rec in prob.records:
            by_oracle.setdefault(rec.oracle, []).append(rec)
        # grad_g_y: omega pair; hvp/jvp: q and nu pairs; f-grads: nu and q pairs.
        assert {k: len(v) for k, v in by_oracle.items()} == {
            "grad_g_y": 2,
            "grad_f_x": 2,
            "jvp_gxy": 2,
            "hvp_gyy": 2,
            "grad_f_y": 2,
        }
        for oracle, recs in by_oracle.items():
            new_rec, old_rec = recs
            assert new_rec.batch_id == old_rec.batch_id, oracle
            assert not np.array_equal(new_rec.x, old_rec.x), oracle

    def test_noiseless_momenta_equal_full_gradients(self, quad_family):
        """sigma=0: batches are exact, so momenta collapse to plain directions."""
        fam = quad_family
        prob = fam.clients[2]
        hp = _hp_for(quad_family, b=2)
        st = _fresh_state(fam, prob, hp)
        for t in (1, 2):
            st = fedbioacc_step(st, prob, hp, t, _stream(t, client=prob.client_id))
        w_om, _ = momentum_weight(hp.c_omega, hp.rate(2))
        np.testing.assert_allclose(st.omega, prob.grad_g_y(st.x, st.y), rtol=0, atol=1e-12)
        np.testing.assert_allclose(
            st.nu,
            prob.grad_f_x(st.x, st.y) - prob.jvp_gxy(st.x, st.y, st.u),
            rtol=0,
            atol=1e-12,
        )


# ---------------------------------------------------------------------------
# individual step bodies
# ---------------------------------------------------------------------------


class TestFedbioStep:
    def test_update_algebra(self, quad_noisy):
        fam = quad_noisy
        prob = fam.clients[0]
        hp = _hp_for(quad_noisy, b=4)
        hp = dataclasses.replace(hp, schedule=None)
        st0 = _fresh_state(fam, prob, hp, momenta=False)
        stream = _stream(1, client=prob.client_id)
        st1 = fedbio_step(st0, prob, hp, 1, stream)

        by = prob.draw(stream.with_purpose(int(Purpose.BATCH_Y)), hp.b, "lower")
        omega = prob.grad_g_y(st0.x, st0.y, by)
        nu = assemble_client_direction(prob, st0.x, st0.y, st0.u, hp.b, stream)
        np.testing.assert_array_equal(st1.y, st0.y - hp.gamma * omega)
        np.testing.assert_array_equal(st1.x, st0.x - hp.eta * nu)
        np.testing.assert_array_equal(st1.omega, omega)
        np.testing.assert_array_equal(st1.nu, nu)

        bg2 = prob.draw(stream.with_purpose(int(Purpose.BATCH_G2)), hp.b, "lower")
        bf2 = prob.draw(stream.with_purpose(int(Purpose.BATCH_F2)), hp.b, "upper")
        hvp_u = prob.hvp_gyy(st0.x, st0.y, st0.u, bg2)
        gf = prob.grad_f_y(st0.x, st0.y, bf2)
        np.testing.assert_array_equal(
            st1.u, project_ball(hp.tau * gf + st0.u - hp.tau * hvp_u, hp.r)
        )
        np.testing.assert_array_equal(st1.q, hvp_u - gf)
        assert st1.t == 2

    def test_u_step_descends_subproblem(self, quad_family):
        """sigma=0: the u move is a projected gradient step on the quadratic."""
        fam = quad_family
        prob = fam.clients[1]
        hp = _hp_for(quad_family, b=2)
        hp = dataclasses.replace(hp, schedule=None)
        st = _fresh_state(fam, prob, hp, momenta=False)
        st = dataclasses.replace(st, u=0.1 * np.ones(prob.d))
        st1 = fedbio_step(st, prob, hp, 1, _stream(1, client=prob.client_id))
        grad = prob.hvp_gyy(st.x, st.y, st.u) - prob.grad_f_y(st.x, st.y)
        np.testing.assert_allclose(
            st1.u, project_ball(st.u - hp.tau * grad, hp.r), rtol=0, atol=1e-14
        )

    def test_t_mismatch_rejected(self, quad_family):
        fam = quad_family
        prob = fam.clients[0]
        hp = dataclasses.replace(_hp_for(quad_family), schedule=None)
        st = _fresh_state(fam, prob, hp, momenta=False)
        with pytest.raises(ValueError, match="step"):
            fedbio_step(st, prob, hp, 7, _stream(7))


class TestLocalLowerSteps:
    def _neumann(self, family):
        return NeumannParams(tau=0.5 / family.constants.L, Q=8)

    def test_plain_step_uses_neumann_direction(self, hyperrep_family):
        fam = hyperrep_family
        prob = fam.clients[0]
        hp = dataclasses.replace(_hp_for(hyperrep_family, b=4), schedule=None)
        ne = self._neumann(hyperrep_family)
        st0 = _fresh_state(fam, prob, hp, momenta=False)
        stream = _stream(1, client=prob.client_id)
        st1 = fedbio_locallower_step(st0, prob, hp, ne, 1, stream)

        by = prob.draw(stream.with_purpose(int(Purpose.BATCH_Y)), hp.b, "lower")
        omega = prob.grad_g_y(st0.x, st0.y, by)
        nu = neumann_hypergrad(prob, st0.x, st0.y, ne, hp.b, stream)
        np.testing.assert_array_equal(st1.y, st0.y - hp.gamma * omega)
        np.testing.assert_array_equal(st1.x, st0.x - hp.eta * nu)
        np.testing.assert_array_equal(st1.nu, nu)
        np.testing.assert_array_equal(st1.u, st0.u)

    def test_phase_split_composes_to_full_step(self, hyperrep_family):
        """Running phase a then b by hand equals the packaged local step."""
        fam = hyperrep_family
        prob = fam.clients[1]
        hp = _hp_for(hyperrep_family, b=4)
        ne = self._neumann(hyperrep_family)
        st0 = _fresh_state(fam, prob, hp, neumann=ne)
        stream = _stream(3, client=prob.client_id)
        st0 = dataclasses.replace(st0, t=3)

        whole = fedbioacc_locallower_step(st0, prob, hp, ne, 3, stream)
        x1, y1, u1 = local_acc_phase_a(st0, hp, 3)
        split = local_acc_phase_b(st0, prob, hp, ne, 3, stream, x1, y1, u1)
        for field in ("x", "y", "u", "nu", "omega", "q"):
            np.testing.assert_array_equal(getattr(whole, field), getattr(split, field))
        assert whole.t == split.t == 4

    def test_phase_a_freezes_u_without_flag(self, hyperrep_family):
        fam = hyperrep_family
        prob = fam.clients[0]
        hp = _hp_for(hyperrep_family, b=4)
        ne = self._neumann(hyperrep_family)
        st = _fresh_state(fam, prob, hp, neumann=ne)
        st = dataclasses.replace(st, u=np.linspace(0.0, 1.0, prob.d), q=np.ones(prob.d))
        x1, y1, u1 = local_acc_phase_a(st, hp, 1)
        np.testing.assert_array_equal(u1, st.u)

        hp_u = dataclasses.replace(hp, local_u_update=True)
        _, _, u2 = local_acc_phase_a(st, hp_u, 1)
        np.testing.assert_array_equal(u2, st.u - hp.tau * hp.rate(1) * st.q)

    def test_phase_b_momenta_recurse_from_post_comm_point(self, hyperrep_family):
        """Momenta in phase b pair the handed-in point against the stored one."""
        fam = hyperrep_family
        prob = fam.clients[0]
        hp = _hp_for(hyperrep_family, b=4)
        ne = self._neumann(hyperrep_family)
        st0 = _fresh_state(fam, prob, hp, neumann=ne)
        stream = _stream(1, client=prob.client_id)
        # pretend averaging moved x somewhere else entirely
        x_next = st0.x + 0.25
        y_next = st0.y - 0.125
        st1 = local_acc_phase_b(st0, prob, hp, ne, 1, stream, x_next, y_next, st0.u)

        a = hp.rate(1)
        w_om, _ = momentum_weight(hp.c_omega, a)
        w_nu, _ = momentum_weight(hp.c_nu, a)
        by = prob.draw(stream.with_purpose(int(Purpose.BATCH_Y)), hp.b, "lower")
        om = prob.grad_g_y(x_next, y_next, by) + w_om * (
            st0.omega - prob.grad_g_y(st0.x, st0.y, by)
        )
        nu = neumann_hypergrad(prob, x_next, y_next, ne, hp.b, stream) + w_nu * (
            st0.nu - neumann_hypergrad(prob, st0.x, st0.y, ne, hp.b, stream)
        )
        np.testing.assert_array_equal(st1.omega, om)
        np.testing.assert_array_equal(st1.nu, nu)
        np.testing.assert_array_equal(st1.x, x_next)
        np.testing.assert_array_equal(st1.q, st0.q)


class TestFedavgStep:
    def test_only_y_moves(self, quad_noisy):
        fam = quad_noisy
        prob = fam.clients[0]
        hp = dataclasses.replace(_hp_for(quad_noisy, b=4), schedule=None)
        st0 = _fresh_state(fam, prob, hp, momenta=False)
        st0 = dataclasses.replace(st0, x=st0.x + 1.0, u=np.ones(prob.d))
        stream = _stream(1, client=prob.client_id)
        st1 = fedavg_step(st0, prob, hp, 1, stream)

        by = prob.draw(stream.with_purpose(int(Purpose.BATCH_Y)), hp.b, "lower")
        omega = prob.grad_g_y(st0.x, st0.y, by)
        np.testing.assert_array_equal(st1.y, st0.y - hp.gamma * omega)
        np.testing.assert_array_equal(st1.x, st0.x)
        np.testing.assert_array_equal(st1.u, st0.u)
        np.testing.assert_array_equal(st1.nu, st0.nu)
        np.testing.assert_array_equal(st1.omega, omega)
        assert st1.t == 2

    def test_touches_only_lower_gradient_oracle(self, quad_noisy):
        fam = quad_noisy
        prob = RecordingProblem(fam.clients[0])
        hp = dataclasses.replace(_hp_for(quad_noisy, b=4), schedule=None)
        st = _fresh_state(fam, prob, hp, momenta=False)
        prob.counts.clear()
        fedavg_step(st, prob, hp, 1, _stream(1))
        assert prob.counts == {"grad_g_y": 1}


class TestStepGuards:
    @pytest.mark.parametrize("kind", ["acc", "plain_local", "acc_local", "fedavg"])
    def test_t_mismatch_rejected_everywhere(self, quad_noisy, hyperrep_family, kind):
        if kind in ("plain_local", "acc_local"):
            fam, prob = hyperrep_family, hyperrep_family.clients[0]
        else:
            fam, prob = quad_noisy, quad_noisy.clients[0]
        hp = _hp_for(fam, b=2)
        ne = NeumannParams(tau=0.5 / fam.constants.L, Q=3)
        st = _fresh_state(fam, prob, hp, momenta=False)
        with pytest.raises(ValueError, match="step"):
            if kind == "acc":
                fedbioacc_step(st, prob, hp, 5, _stream(5))
            elif kind == "plain_local":
                fedbio_locallower_step(st, prob, hp, ne, 5, _stream(5))
            elif kind == "acc_local":
                fedbioacc_locallower_step(st, prob, hp, ne, 5, _stream(5))
            else:
                fedavg_step(st, prob, hp, 5, _stream(5))

    def test_clamp_counter_accumulates(self, quad_noisy):
        fam = quad_noisy
        prob = fam.clients[0]
        hp = _hp_for(quad_noisy, b=4)
        # huge momentum constants force every weight to clamp at zero
        hp = dataclasses.replace(
            hp, c_nu=1e9, c_omega=1e9, c_u=1e9, schedule=Schedule(delta=1.0, u0=0.0)
        )
        st = _fresh_state(fam, prob, hp)
        st1 = fedbioacc_step(st, prob, hp, 1, _stream(1, client=prob.client_id))
        assert st1.clamped == 3
        st2 = fedbioacc_step(st1, prob, hp, 2, _stream(2, client=prob.client_id))
        assert st2.clamped == 6
