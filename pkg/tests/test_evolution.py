import numpy as np
import pytest
from scipy.interpolate import CubicSpline

from warpflow.evolution import (RadialState, f_evolution, f_field, f_rate_chain_rule, from_radial,
                                g_ops, gauge_discrepancy, gradient_monitor, rhs_fixed_s,
                                rhs_fixed_x, rhs_radial, to_radial)
from warpflow.geometry import WarpedProfile

TEST_PROFILES = {
    "poly": (1, lambda s: 1 + 0.2 * s ** 2, lambda s: s - 0.1 * s ** 3),
    "bump": (2, lambda s: 1.2 + 0.3 * np.exp(-(s - 0.9) ** 2 / 0.1), lambda s: 0.3 + s + 0.2 * np.sin(2 * s)),
    "sinh": (3, lambda s: 0.5 + 0.4 * s, lambda s: 0.7 * np.sinh(s)),
}


def _order(ns, errs):
    return -np.polyfit(np.log(ns), np.log(errs), 1)[0]


def test_rhs_constants():
    s = np.linspace(0, 1, 11)
    a, b, p, q = 2.0, 0.5, 3, 2
    r = rhs_fixed_x(WarpedProfile(p, q, s, a + 0 * s, b + 0 * s))
    assert np.allclose(r["dpsi"], -(p - 1) / a)
    assert np.allclose(r["dphi"], -(q - 1) / b)
    assert np.allclose(r["dlogsprime"], 0)


def test_rhs_flat_model():
    s = np.linspace(0.5, 2, 31)
    b = 0.7
    r = rhs_fixed_x(WarpedProfile(3, 2, s, s, b + 0 * s))
    assert np.allclose(r["dpsi"], 0, atol=1e-10)
    assert np.allclose(r["dphi"], -1 / b)


def test_rhs_round_sphere_homothety():
    p, q = 2, 3
    s = np.linspace(0, np.pi / 2, 801)
    prof = WarpedProfile(p, q, s, np.cos(s), np.sin(s), ends=("closed", "closed"))
    r = rhs_fixed_x(prof)
    m = (s > 0.2) & (s < np.pi / 2 - 0.2)
    assert np.max(np.abs(r["dphi"] - (-(p + q) * np.sin(s)))[m]) < 1e-4
    assert np.max(np.abs(r["dpsi"] - (-(p + q) * np.cos(s)))[m]) < 1e-4
    # collapsed ends use the smooth limits
    assert np.all(np.isfinite(r["dphi"])) and abs(r["dphi"][0]) < 1e-12
    assert abs(r["dlogsprime"][0] + (p + q)) < 1e-3


def test_rhs_interior_zero_rejected():
    s = np.linspace(0, 1, 11)
    phi = 1 + 0 * s
    phi[5] = 0.0
    with pytest.raises(ValueError):
        rhs_fixed_x(WarpedProfile(1, 2, s, 1 + 0 * s, phi))


def test_rhs_fixed_s_trivial_drift():
    s = np.linspace(0.5, 2, 31)
    prof = WarpedProfile(2, 2, s, s, 0.8 + 0 * s)
    rs, rx = rhs_fixed_s(prof), rhs_fixed_x(prof)
    assert np.allclose(rs.I, 0, atol=1e-10)
    assert np.allclose(rs["dpsi"], rx["dpsi"]) and np.allclose(rs["dphi"], rx["dphi"])


def test_rhs_fixed_s_singular_end_needs_closed():
    s = np.linspace(0, 1, 21)
    with pytest.raises(ValueError, match="closed"):
        rhs_fixed_s(WarpedProfile(1, 2, s, 1 + s ** 2, np.sin(s)))
    rhs_fixed_s(WarpedProfile(1, 2, s, 1 + s ** 2, np.sin(s), ends=("closed", None)))


def test_rhs_fixed_s_against_time_stepping():
    # Evolve the fixed-x system by +-dt, re-measure arclength from the left end,
    # and difference psi, phi at fixed s.
    n = 1601
    x = np.linspace(0.0, 2.0, n)
    psi = 1.0 + 0.1 * np.exp(-(x - 1) ** 2 / 0.05)
    phi = 0.8 + 0.05 * np.cos(3 * x)
    base = WarpedProfile(1, 2, x, psi, phi)
    rs = rhs_fixed_s(base)
    dt = 1e-5

    def stepped(sign):
        r = rhs_fixed_x(WarpedProfile(1, 2, x, psi, phi, sprime=np.ones(n)))
        sp = np.exp(sign * dt * r["dlogsprime"])
        ps = psi + sign * dt * r["dpsi"]
        ph = phi + sign * dt * r["dphi"]
        prof = WarpedProfile(1, 2, x, ps, ph, sprime=sp)
        s_new = prof.arclength
        return CubicSpline(s_new, ps)(x), CubicSpline(s_new, ph)(x)

    # second-order-in-time estimate using the frozen rates (exact to O(dt^2))
    (pp, fp), (pm, fm) = stepped(1), stepped(-1)
    m = (x > 0.1) & (x < 1.9)
    dpsi = (pp - pm) / (2 * dt)
    dphi = (fp - fm) / (2 * dt)
    scale = np.max(np.abs(rs["dpsi"][m])) + np.max(np.abs(rs["dphi"][m]))
    assert np.max(np.abs(dpsi - rs["dpsi"])[m]) / scale < 1e-6
    assert np.max(np.abs(dphi - rs["dphi"])[m]) / scale < 1e-6


def test_rhs_fixed_s_round_sphere():
    p, q = 1, 2
    s = np.linspace(0, np.pi / 2, 801)
    prof = WarpedProfile(p, q, s, np.cos(s), np.sin(s), ends=("closed", "closed"))
    r = rhs_fixed_s(prof)
    # R(t)^2 = 1 - 2(p+q)t; phi = R sin(s/R) differentiated at fixed s, t = 0
    exact = -(p + q) * (np.sin(s) - s * np.cos(s))
    # (q-1)(phi_s^2 - 1)/phi amplifies the O(ds^2) error like 1/s near the tip
    m = s > 0.1
    assert np.max(np.abs(r["dphi"] - exact)[m]) < 1e-4
    assert abs(r["dphi"][-1] + (p + q)) < 1e-5
    assert np.max(np.abs(r.I + (p + q) * s)) < 1e-4


def test_to_radial_examples():
    s = np.linspace(0, 1.2, 400)
    prof = WarpedProfile(1, 2, s, 1.5 + 0 * s, np.sin(s), ends=("closed", None))
    st = to_radial(prof, 0.9)
    assert st.r[-1] >= 0.9 and np.all(st.r[:-1] < 0.9)
    assert np.max(np.abs(st.v - (1 - st.r ** 2))) < 1e-4
    assert np.allclose(st.h, 2.25)
    s2 = np.linspace(0.1, 1, 50)
    st2 = to_radial(WarpedProfile(1, 2, s2, s2, s2), 5.0)
    assert np.allclose(st2.v, 1) and np.allclose(st2.h, st2.r ** 2)


def test_to_radial_monotonicity_error():
    s = np.linspace(0, 3, 100)
    with pytest.raises(ValueError, match="first violation"):
        to_radial(WarpedProfile(1, 2, s, 1 + 0 * s, 0.1 + np.sin(s)), 5.0)


def test_radial_roundtrip():
    s = np.linspace(0, 1.0, 20001)
    prof = WarpedProfile(1, 2, s, 1 + 0.2 * s ** 2, s - 0.1 * s ** 3, ends=("closed", None))
    back = from_radial(to_radial(prof, 2.0))
    assert np.max(np.abs(back.arclength - s)) < 1e-8
    assert np.max(np.abs(back.psi - prof.psi) / prof.psi) < 1e-8


def test_from_radial_examples():
    r = np.linspace(0, 1, 11)
    prof = from_radial(RadialState(1, 2, r, np.ones(11), np.full(11, 4.0)))
    assert np.allclose(prof.arclength, r) and np.allclose(prof.psi, 2) and np.allclose(prof.phi, r)
    errs = []
    for n in (200, 400, 800):
        r = np.linspace(0, 0.9, n)
        prof = from_radial(RadialState(1, 2, r, 1 - r ** 2, np.ones(n)))
        errs.append(np.max(np.abs(prof.arclength - np.arcsin(r))))
    assert errs[-1] < 1e-5 and _order([200, 400, 800], errs) > 1.8
    r = np.linspace(0, 0.1, 21)
    prof = from_radial(RadialState(1, 2, r, 1 - 0.5 * r ** 2, np.ones(21)))
    assert np.max(np.abs(prof.arclength - r) / np.maximum(r, 1e-3) ** 3) < 0.3
    with pytest.raises(ValueError):
        from_radial(RadialState(1, 2, r, 0 * r, np.ones(21)))


def test_g_ops_examples():
    r = np.linspace(0, 1, 41)
    p, q = 3, 2
    st = RadialState(p, q, r, np.ones(41), np.full(41, 2.0))
    gv, gh = g_ops(st, np.zeros(41))
    assert np.allclose(gv, 0) and np.allclose(gh, -2 * (p - 1))
    r2 = np.linspace(0.5, 2, 41)
    st2 = RadialState(p, q, r2, np.ones(41), r2 ** 2)
    gv, gh = g_ops(st2, np.ones(41))
    # v h_rr + q h_r / r - 4 - 2(p-1) = 2 + 2q - 4 - 2p + 2
    assert np.allclose(gh, 2 * q - 2 * p, atol=1e-10)
    with pytest.raises(ValueError):
        g_ops(RadialState(p, q, r, np.ones(41), -np.ones(41)), np.zeros(41))
    with pytest.raises(ValueError):
        g_ops(RadialState(p, q, r, 0.5 + 0 * r, np.ones(41)), np.zeros(41))


def test_rhs_radial_constants():
    r = np.linspace(0, 1, 21)
    out = rhs_radial(RadialState(2, 3, r, np.ones(21), np.full(21, 3.0)))
    assert np.allclose(out["dv"], 0) and np.allclose(out["dh"], -2.0)


@pytest.mark.parametrize("name", sorted(TEST_PROFILES))
def test_gauge_consistency_second_order(name):
    p, fpsi, fphi = TEST_PROFILES[name]
    ns = [100, 200, 400, 800]
    errs = []
    for n in ns:
        s = np.linspace(0.3, 1.5, n)
        ev, eh = gauge_discrepancy(WarpedProfile(p, 2, s, fpsi(s), fphi(s)), region=(0.6, 1.2))
        errs.append(max(ev, eh))
    assert 1.8 <= _order(ns, errs) <= 2.2


def test_gauge_consistency_fine_grid():
    # v rates involve third differences of phi, so the roundoff floor
    # (~eps/ds^3) overtakes truncation beyond ~1000 nodes
    s = np.linspace(0.3, 1.5, 600)
    prof = WarpedProfile(1, 2, s, 1 + 0.1 * s ** 2, s + 0.1 * s ** 2)
    ev, eh = gauge_discrepancy(prof, region=(0.6, 1.2), relative=True)
    assert max(ev, eh) < 1e-6


def test_gauge_consistency_wrong_constant_detected(monkeypatch):
    # with alpha_p^2 = p-1 instead of 2(p-1), the h rates disagree at O(1)
    import warpflow.evolution as ev
    orig = ev.g_ops

    def bad(state, u):
        gv, gh = orig(state, u)
        return gv, gh + (state.p - 1)
    monkeypatch.setattr(ev, "g_ops", bad)
    p, fpsi, fphi = TEST_PROFILES["sinh"]
    s = np.linspace(0.3, 1.5, 400)
    _, eh = ev.gauge_discrepancy(WarpedProfile(p, 2, s, fpsi(s), fphi(s)), region=(0.6, 1.2))
    assert eh > 0.1


def test_bryant_profile_is_static():
    from warpflow.solitons import bryant_profile
    T = bryant_profile(2)
    k = T.zeta <= 20
    for p in (0, 2):
        st = RadialState(p, 2, T.zeta[k], T.B[k], np.full(k.sum(), 1e8))
        assert np.max(np.abs(rhs_radial(st)["dv"])) < 1e-6


def test_radial_scaling():
    r = np.linspace(0, 1.5, 301)
    v = 1 / (1 + r ** 2)
    h = 1 + 0.3 * r ** 2
    lam = 2.0
    a = rhs_radial(RadialState(1, 2, r, v, h))
    b = rhs_radial(RadialState(1, 2, lam * r, v, lam ** 2 * h))
    assert np.allclose(b["dv"], a["dv"] / lam ** 2, atol=1e-12)
    assert np.allclose(b["dh"], a["dh"], atol=1e-12)


def test_euler_step_preserves_bounds():
    r = np.linspace(0, 2, 201)
    v = 1 - 0.1 * r ** 2 / (1 + r ** 2)
    h = 1 + 0.1 * r ** 2
    st = RadialState(1, 2, r, v, h)
    margin = min(1 - np.max(v[1:]), 1 - np.max(st.u()))
    out = rhs_radial(st)
    bound = max(np.max(np.abs(out["dv"])), np.max(np.abs(out["dh"])), 1.0)
    dt = 0.1 * margin / bound
    st2 = RadialState(1, 2, r, v + dt * out["dv"], h + dt * out["dh"])
    rep = gradient_monitor(st2)
    assert rep.ok and rep.maxima["v"] <= 1 + 1e-12


def test_neumann_structure_at_tip():
    r = np.linspace(0, 1, 201)
    st = RadialState(1, 2, r, 1 / (1 + r ** 2), 1 + 0.2 * r ** 2)
    out = rhs_radial(st)
    for k in ("dv", "dh"):
        slope = (out[k][1] - out[k][0]) / r[1]
        assert abs(slope) < 10 * r[1]


def test_f_diagnostic_examples():
    r = np.linspace(0, 1, 41)
    d = f_evolution(RadialState(1, 2, r, np.ones(41), np.full(41, 2.0)))
    assert np.allclose(d.f, 0) and np.allclose(d.rhs_f, 0)
    r = np.linspace(0, 0.5, 101)
    f = f_field(RadialState(1, 2, r, 1 - r ** 2, np.ones(101)))
    assert f[0] == pytest.approx(0.5, abs=1e-5)
    with pytest.raises(ValueError, match="gradient bound"):
        f_field(RadialState(1, 2, r, 1 + 0.01 * r, np.ones(101)))


def test_f_evolution_matches_chain_rule():
    errs = []
    ns = [200, 400, 800, 1600]
    for n in ns:
        r = np.linspace(0, 1, n)
        st = RadialState(2, 2, r, 1 / (1 + r ** 2), 1 + 0.3 * r ** 2)
        d = f_evolution(st)
        ch = f_rate_chain_rule(st)
        m = (r > 0.2) & (r < 0.9)
        errs.append(np.max(np.abs(d.rhs_f - ch)[m]) / np.max(np.abs(ch[m])))
    assert errs[-1] < 1e-5
    assert _order(ns, errs) > 1.8


def test_gradient_monitor():
    s = np.linspace(0.1, 1, 30)
    rep = gradient_monitor(WarpedProfile(1, 2, s, s, 0.5 + 0 * s))
    assert rep.maxima["psi_s_sq"] == pytest.approx(1.0) and rep.maxima["phi_s_sq"] == pytest.approx(0.0)
    assert rep.ok
    r = np.linspace(0.1, 1, 30)
    rep = gradient_monitor(RadialState(1, 2, r, np.ones(30), r ** 2))
    assert rep.maxima["u"] == pytest.approx(1.0) and rep.ok
    rep = gradient_monitor(RadialState(1, 2, r, 1 + 0.1 * r, r ** 2))
    assert not rep.ok and rep.violation[0] == "v"


def test_state_csv_roundtrip(tmp_path):
    r = np.linspace(0, 1, 9)
    st = RadialState(1, 2, r, 1 - r ** 2 / 3, 1 + r ** 2)
    st.to_csv(tmp_path / "st.csv")
    back = RadialState.from_csv(tmp_path / "st.csv", 1, 2)
    assert np.array_equal(back.v, st.v)
    out = rhs_radial(st)
    out.to_csv(tmp_path / "rhs.csv")
    assert (tmp_path / "rhs.csv").read_text().splitlines()[0] == "r,dv,dh"
