import numpy as np
import pytest

from warpflow import solver as sv
from warpflow.barriers import desk_suite
from warpflow.evolution import RadialState, gradient_monitor
from warpflow.solitons import soliton_tables


@pytest.fixture(scope="module")
def tables():
    return soliton_tables(2)


@pytest.fixture(scope="module")
def suite(tables):
    return desk_suite(1.0, 1, 2, 0.05, 0.05, tables, D=16.0, log_r_star=np.log(0.15), T_star=5.0)


# ---------------------------------------------------------------- controls

def test_controls_validation():
    with pytest.raises(ValueError):
        sv.SolverControls(gauge="y")
    with pytest.raises(ValueError):
        sv.SolverControls(cfl=1.5)
    with pytest.raises(ValueError):
        sv.SolverControls(halt_on=("Nope",))
    c = sv.SolverControls(save_times=(0.3, 0.1), halt_on=["BarrierCrossing:at_r_star"])
    assert c.save_times == (0.1, 0.3)
    assert c.to_dict()["gauge"] == "x"


def test_stretched_grid():
    r = sv.stretched_grid(1.0, 1e-3, 1.05, pins=(0.3,))
    assert r[0] == 0 and r[-1] == pytest.approx(1.0) and 0.3 in r
    assert np.all(np.diff(r) > 0)
    assert r[1] == pytest.approx(1e-3)


def test_mollify_params():
    m = sv.MollifyParams(1e-3, 0.05, 0.05, 16.0)
    assert m.t_omega == pytest.approx(0.05 * 1e-3 / 4)
    with pytest.raises(ValueError):
        sv.MollifyParams(-1.0)


# ---------------------------------------------------------------- exact solutions

@pytest.mark.parametrize("p,q", [(1, 2), (2, 3)])
def test_homogeneous_product(p, q):
    a, b = 1.0, 1.0
    T = b * b / (2.0 * (q - 1))
    ctl = sv.SolverControls(gauge="x", t_end=0.9 * T)
    tr = sv.integrate(sv.homogeneous_product(p, q, a, b), ctl)
    t, st = tr.snapshots[-1]
    # phi^2 = b^2 - 2(q-1) t, psi^2 = a^2 - 2(p-1) t
    assert np.max(np.abs(st.phi ** 2 / (b * b - 2 * (q - 1) * t) - 1)) < 1e-6
    assert np.max(np.abs(st.psi ** 2 / (a * a - 2 * (p - 1) * t) - 1)) < 1e-6


def test_flat_cylinder():
    q = 3
    b = 0.8
    ctl = sv.SolverControls(gauge="x", t_end=0.05)
    tr = sv.integrate(sv.flat_cylinder(1, q, b), ctl)
    t, st = tr.snapshots[-1]
    assert np.allclose(st.phi, np.sqrt(b * b - 2 * (q - 1) * t), rtol=1e-8)
    assert np.allclose(st.psi, st.arclength, atol=1e-8)


@pytest.fixture(scope="module")
def sphere_run():
    ctl = sv.SolverControls(gauge="x", curvature_ceiling=200.0, save_times=(0.9 / 6,))
    return sv.integrate(sv.round_sphere(1, 2), ctl, [sv.CurvatureMonitor(200.0)])


def test_round_sphere_extinction(sphere_run):
    assert sphere_run.status == "SingularityDetected"
    fit = sv.detect_singularity(sphere_run)
    assert fit["time"] == pytest.approx(1 / 6, rel=0.01)
    # type I with constant ratio along the fit
    assert fit["ratio_max"] / fit["ratio_min"] < 1.01


def test_round_sphere_tracking(sphere_run):
    # radius^2 = 1 - 2(p+q) t: the profile stays a scaled round sphere
    t, st = sphere_run.snapshot_at(0.9 / 6)
    assert t == pytest.approx(0.15)
    R = np.sqrt(1 - 6 * t)
    s = st.arclength
    assert np.max(np.abs(st.phi - R * np.sin(s / R))) < 1e-4
    assert np.max(np.abs(st.psi - R * np.cos(s / R))) < 1e-4


def test_detect_singularity_none_for_regular_run():
    ctl = sv.SolverControls(gauge="x", t_end=0.05)
    tr = sv.integrate(sv.flat_cylinder(1, 2, 1.0), ctl, [sv.CurvatureMonitor()])
    assert sv.detect_singularity(tr) is None


# ---------------------------------------------------------------- neckpinch

@pytest.fixture(scope="module")
def neck_run():
    ctl = sv.SolverControls(gauge="x", curvature_ceiling=1e4, save_every=100)
    return sv.integrate(sv.neckpinch(), ctl, [sv.CurvatureMonitor(1e4), sv.GradientMonitor()])


def test_neckpinch_pinches_at_neck(neck_run):
    assert neck_run.status == "SingularityDetected"
    fit = sv.detect_singularity(neck_run)
    assert fit["location"] == pytest.approx(0.0, abs=0.1)
    assert 0.2 < fit["type_I_ratio"] < 2


def test_neckpinch_gradient_bound_and_monotone_neck(neck_run):
    h = neck_run.history
    assert max(h["grad_max_1"]) <= 1 + 1e-6 and max(h["grad_max_2"]) <= 1 + 1e-6
    assert neck_run.first("GradientViolation") is None
    neck = [st.phi.min() for _, st in neck_run.snapshots]
    assert np.all(np.diff(neck) <= 0)


def test_pole_pinch_preset():
    prof = sv.pole_pinch(n=21)
    assert prof.ends == ("closed", "mirror") and prof.psi[0] == 0
    assert np.argmin(prof.phi) == 0


# ---------------------------------------------------------------- initial data

@pytest.mark.parametrize("form", ["literal", "matched"])
def test_initial_from_asymptotics(form):
    k = 0.5
    prof = sv.initial_from_asymptotics(k, 1, 2, form=form)
    assert prof.ends == (None, "mirror")
    assert prof.psi[0] == 0 and prof.phi[0] == 0
    s = prof.arclength
    assert np.max(np.gradient(prof.phi, s) ** 2) <= 1
    assert np.max(np.gradient(prof.psi, s) ** 2) <= 1 + 1e-9
    m = (s > 0) & (s < 1e-6)
    assert np.max(np.abs(prof.psi[m] / s[m] - 1)) < 0.1


def test_initial_from_asymptotics_literal_cone():
    prof = sv.initial_from_asymptotics(0.5, 1, 2, form="literal")
    s = prof.arclength
    m = (s > 0) & (s < 1e-8)
    ratio = prof.phi[m] * np.sqrt(-np.log(s[m])) / (0.5 * s[m])
    assert np.allclose(ratio, 1.0, atol=1e-12)


def test_initial_from_asymptotics_rejects_large_k():
    with pytest.raises(ValueError):
        sv.initial_from_asymptotics(5.0, 1, 2)


# ---------------------------------------------------------------- mollified runs

@pytest.fixture(scope="module")
def setup(suite, tables):
    return sv.forward_setup(1.0, 1, 2, 1e-2, suite, tables)


def test_mollify_keeps_outer_data(setup, suite):
    base = sv.initial_from_asymptotics(1.0, 1, 2, form="matched")
    prof = setup.profile
    rw = np.sqrt(1e-2)
    keep = base.phi > rw
    n = int(keep.sum())
    assert np.array_equal(prof.phi[-n:], base.phi[keep])
    assert np.array_equal(prof.psi[-n:], base.psi[keep])
    assert prof.ends[0] == "closed"


def test_forward_state_regular_at_tip(setup):
    st = setup.state
    assert st.r[0] == 0 and st.v[0] == 1.0
    g = gradient_monitor(st)
    assert g.maxima["v"] <= 1 and g.maxima["u"] <= 1
    assert suite_r_star_pinned(setup)


def suite_r_star_pinned(setup):
    return np.any(np.isclose(setup.state.r, 0.15, rtol=0, atol=1e-15))


def test_mollify_rejects_mismatch(suite):
    base = sv.initial_from_asymptotics(1.0, 1, 2, form="matched")
    with pytest.raises(ValueError):
        sv.mollify_initial(base, sv.MollifyParams(1e-2, 0.1, 0.05), suite)


@pytest.fixture(scope="module")
def short_forward(setup, suite):
    return sv.run_forward(setup, suite, t_end=4e-5, save_times=(1e-5, 2e-5),
                          halt_on=("BarrierCrossing:at_r_star",))


def test_forward_run_events(short_forward, suite):
    tr = short_forward
    assert tr.status == "BarrierCrossing"
    rep = sv.crossing_time(tr, suite)
    assert not rep["censored"]
    assert rep["event"]["payload"]["at_r_star"]
    # barrier time of the crossing is t + t_omega
    assert rep["event"]["payload"]["t_barrier"] == pytest.approx(rep["T_dagger"] + 1.25e-4)
    assert max(tr.history["grad_max_1"]) <= 1 + 1e-6
    assert max(tr.history["grad_max_2"]) <= 1 + 1e-6


def test_crossing_time_censored(setup, suite):
    tr = sv.run_forward(setup, suite, t_end=2e-6, monitors=[sv.GradientMonitor()])
    rep = sv.crossing_time(tr, suite)
    # censored runs report the last time reached as a lower bound
    assert rep["censored"] and rep["T_dagger"] == pytest.approx(2e-6) and rep["cause"] is None


def test_trajectory_roundtrip(short_forward, tmp_path):
    short_forward.to_dir(tmp_path)
    back = sv.FlowTrajectory.from_dir(tmp_path)
    assert np.array_equal(back.times, short_forward.times)
    a, b = back.snapshots[-1][1], short_forward.snapshots[-1][1]
    assert isinstance(a, RadialState)
    assert np.array_equal(a.v, b.v) and np.array_equal(a.h, b.h)
    assert [e.kind for e in back.events] == [e.kind for e in short_forward.events]
    assert back.status == short_forward.status


def test_regime_report_shape(short_forward, tables):
    rep = sv.regime_report(short_forward, 1.0, tables)
    assert rep.partial
    for row in rep.rows:
        assert {"tip_v_sup_rel", "para_v_rel", "outer_v_dev"} <= set(row)
