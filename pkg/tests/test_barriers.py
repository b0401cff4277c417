import numpy as np
import pytest

from warpflow import barriers as bb
from warpflow.evolution import RadialState
from warpflow.solitons import soliton_tables


@pytest.fixture(scope="module")
def tables():
    return soliton_tables(2)


@pytest.fixture(scope="module")
def suite(tables):
    return bb.build_suite(1.0, 1, 2, 0.05, 0.05, tables)


def _box_points(suite, n, seed=0):
    # random points of the box in log coordinates, spread over the three regions
    rng = np.random.default_rng(seed)
    T = suite.T_star * 10 ** rng.uniform(0, 6, n)
    which = rng.integers(0, 3, n)
    zeta = suite.zeta2 * 10 ** rng.uniform(-6, 0, n)
    rho = suite.rho1 * 10 ** rng.uniform(-0.5, 0.5, n)
    log_r = np.where(which == 0, np.log(zeta) - 0.5 * np.log(T) - 0.5 * T,
                     np.where(which == 1, np.log(rho) - 0.5 * T,
                              suite.log_r_star - rng.uniform(0, 50, n)))
    return bb.Coords(log_r, -T)


def test_suite_constants(suite):
    k = suite.constants
    assert k.check() == []
    assert suite.rho2 == 2 * suite.rho1 and suite.zeta2 == 2 * suite.zeta1
    assert suite.zeta1 == pytest.approx(np.sqrt(k.parabolic["D"] / k.epsilon))
    assert k.tip["c_plus"] < k.c0 < k.tip["c_minus"]
    assert k.tip["cbar_minus"] < k.c0 < k.tip["cbar_plus"]
    # parabolic amplitudes stay within O(eps + delta) of k^2
    for nm in ("ahat_plus_sq", "ahat_minus_sq"):
        assert abs(k.parabolic[nm] - 1.0) < 0.1
    assert k.outer["a_plus_sq"] == pytest.approx(1.05) and k.outer["d_minus"] == pytest.approx(0.95)


def test_build_rejects_bad_input(tables):
    with pytest.raises(ValueError):
        bb.build_suite(1.0, 1, 2, 0.3, 0.05, tables)
    with pytest.raises(ValueError):
        bb.build_suite(1.0, 1, 3, 0.05, 0.05, tables)


def test_outer_formulas_at_t_to_zero(suite):
    # deep in the outer region with t/r^2 -> 0 the barriers are a^2/|log r| and b^2 r^2 |log r|
    log_r = np.array([-70.0, -100.0, -400.0])
    c = bb.Coords(log_r, np.full(3, -1e12))
    vm, vp, hm, hp = bb.eval_suite_log(suite, c)
    L = -log_r
    o = suite.constants.outer
    assert np.allclose(vp, o["a_plus_sq"] / L, rtol=1e-14)
    assert np.allclose(vm, o["a_minus_sq"] / L, rtol=1e-14)
    assert np.allclose(hp, 2 * log_r + np.log(o["b_plus_sq"] * L), rtol=1e-14)
    assert np.allclose(hm, 2 * log_r + np.log(o["b_minus_sq"] * L), rtol=1e-14)


def test_tip_value_at_origin(suite):
    c = bb.Coords.from_zeta(np.zeros(4), suite.T_star * np.array([1, 10, 1e3, 1e6]))
    vm, vp, hm, hp = bb.eval_suite_log(suite, c)
    assert np.all(vm == 1.0) and np.all(vp == 1.0)
    assert np.all(hm < hp)


def test_tip_derivatives_vanish_at_origin(suite):
    k = suite.constants
    tb = suite.tip.soliton
    X = 1.0 / suite.T_star
    dz = 1e-3
    for sg in (1, -1):
        v = bb.tip_v(k, tb, sg, np.array([0.0, dz, 2 * dz]), X)
        H = bb.tip_H(k, tb, sg, np.array([0.0, dz, 2 * dz]), X)
        # one-sided first difference is O(dz) for an even function
        assert abs((-3 * v[0] + 4 * v[1] - v[2]) / (2 * dz)) < 1e-8
        assert abs((-3 * H[0] + 4 * H[1] - H[2]) / (2 * dz)) < 1e-8


def test_ordering_random_box_points(suite):
    c = _box_points(suite, 10000)
    vm, vp, hm, hp = bb.eval_suite_log(suite, c)
    assert np.all(vm < vp)
    assert np.all(hm < hp)


def test_eval_suite_outside_box(suite):
    with pytest.raises(ValueError):
        bb.eval_suite(suite, 1e-3, 1e-3)
    with pytest.raises(ValueError):
        bb.eval_suite_log(suite, bb.Coords(np.array([-1.0]), np.array([-2 * suite.T_star])))


def test_envelope_in_overlap(suite):
    # in the outer/parabolic strip the envelope is max of lowers, min of uppers
    T = np.full(50, 3 * suite.T_star)
    rho = np.linspace(suite.rho1, suite.rho2, 50)
    c = bb.Coords.from_rho(rho, T)
    vm, vp, hm, hp = bb.eval_suite_log(suite, c)
    a, _ = suite.outer.values(c, -1)
    b, _ = suite.parabolic.values(c, -1)
    assert np.array_equal(vm, np.maximum(a, b))
    a, _ = suite.outer.values(c, 1)
    b, _ = suite.parabolic.values(c, 1)
    assert np.array_equal(vp, np.minimum(a, b))
    assert np.all(vm < vp) and np.all(hm < hp)
    # continuity across the strip edge at rho2
    eps = 1e-9
    c2 = bb.Coords.from_rho(np.array([suite.rho2 * (1 - eps), suite.rho2 * (1 + eps)]), T[:2])
    e = bb.eval_suite_log(suite, c2)
    assert all(abs(x[0] - x[1]) < 1e-6 * abs(x[0]) for x in e)


# --- independent oracle: direct chain rule on the closed forms, finite differences in (r, t)

def _direct(fam, sign, r, t, dr=1e-4, dt=1e-4):
    def val(rr, tt):
        v, lh = fam.values(bb.Coords.from_rt(rr, tt), sign)
        return v, np.exp(lh)
    rs = r * (1 + dr * np.arange(-2, 3))
    ts = t * (1 + dt * np.arange(-2, 3))
    w1 = np.array([1, -8, 0, 8, -1]) / 12.0
    w2 = np.array([-1, 16, -30, 16, -1]) / 12.0
    vr, hr = val(rs, np.full(5, t))
    vt, ht = val(np.full(5, r), ts)
    hR, hT = r * dr, t * dt
    return dict(v=vr[2], h=hr[2], v_r=w1 @ vr / hR, v_rr=w2 @ vr / hR ** 2,
                h_r=w1 @ hr / hR, h_rr=w2 @ hr / hR ** 2, v_t=w1 @ vt / hT, h_t=w1 @ ht / hT)


def _gv(k, d, r, u, hs):
    v = d["v"]
    return (v * d["v_rr"] - 0.5 * d["v_r"] ** 2 + (k.q - 1 - v) * d["v_r"] / r
            + k.aq2 * v * (1 - v) / r ** 2 - 2 * k.p * u * v / hs)


def _gh(k, d, r, u, vs):
    return vs * d["h_rr"] + (k.q - 1 + vs) * d["h_r"] / r - 4 * u - k.ap2


@pytest.mark.parametrize("sign", [1, -1])
@pytest.mark.parametrize("u", [0.0, 0.6])
def test_outer_margins_match_direct(suite, sign, u):
    k = suite.constants
    r, t = 1e-4, 2e-9
    d = _direct(suite.outer, sign, r, t)
    L, s = -np.log(r), t / r ** 2
    hs, vs = 1.7 * d["h"], 0.9 * d["v"]
    ref = sign * r ** 2 * (d["v_t"] - _gv(k, d, r, u, hs)) / (k.epsilon * k.aq2 * d["v"])
    got = bb.outer_margin_v(k, sign, L, s, u, hs / r ** 2)
    assert got == pytest.approx(ref, rel=1e-5)
    ref = sign * (d["h_t"] - _gh(k, d, r, u, vs)) / (k.epsilon * k.aq2 * d["h"] / r ** 2)
    got = bb.outer_margin_h(k, sign, L, s, u, vs)
    assert got == pytest.approx(ref, rel=1e-5)


@pytest.mark.parametrize("sign", [1, -1])
@pytest.mark.parametrize("u", [0.0, 0.6])
@pytest.mark.parametrize("rho", [0.7, 3.0])
def test_parabolic_margins_match_direct(suite, sign, u, rho):
    # small D keeps eta- > 0 at |tau| = 30; the formulas do not depend on the box
    suite = suite.with_constants(D=0.5)
    k = suite.constants
    T = 30.0
    t = np.exp(-T)
    r = rho * np.sqrt(t)
    d = _direct(suite.parabolic, sign, r, t)
    D = k.parabolic["D"]
    scale = D * (k.aq2 + 2 * rho ** 2)
    hs, vs = 1.3 * d["h"], 0.8 * d["v"]
    ref = sign * T ** 2 * rho ** 4 * r ** 2 * (d["v_t"] - _gv(k, d, r, u, hs)) / scale
    got = bb.para_margin_v(k, sign, rho, 1 / T, u, hs / (t * T))
    assert got == pytest.approx(ref, rel=1e-5, abs=1e-6)
    ref = sign * rho ** 4 * (d["h_t"] - _gh(k, d, r, u, vs)) / scale
    got = bb.para_margin_h(k, sign, rho, 1 / T, u, vs * T)
    assert got == pytest.approx(ref, rel=1e-5, abs=1e-6)


@pytest.mark.parametrize("sign", [1, -1])
@pytest.mark.parametrize("u", [0.0, 0.6])
@pytest.mark.parametrize("zeta", [0.8, 4.0])
def test_tip_margins_match_direct(suite, sign, u, zeta):
    k = suite.constants
    tb = suite.tip.soliton
    T = 15.0
    t = np.exp(-T)
    r = zeta * np.sqrt(t / T)
    d = _direct(suite.tip, sign, r, t, dr=2e-3, dt=2e-4)
    nm = "plus" if sign > 0 else "minus"
    c, cb = k.tip[f"c_{nm}"], k.tip[f"cbar_{nm}"]
    e1 = -0.5 * c * tb.eval(c * zeta, 1)[0] / zeta
    hs, vs = 1.3 * d["h"], d["v"] - 0.01
    ref = sign * T * (t / T) * (d["v_t"] - _gv(k, d, r, u, hs)) / zeta ** 2 / (k.epsilon * e1)
    got = bb.tip_margin_v(k, tb, sign, np.array(zeta), 1 / T, u, hs / (t * T))
    assert got == pytest.approx(ref, rel=2e-3)
    ref = sign * (d["h_t"] - _gh(k, d, r, u, vs)) / T / (k.aq2 ** 2 * abs(cb ** 2 - c ** 2))
    dv = vs - tb.eval(c * zeta, 0)[0]
    got = bb.tip_margin_h(k, tb, sign, np.array(zeta), 1 / T, u, dv)
    assert got == pytest.approx(ref, rel=2e-3)


def test_tip_margin_scaling_near_origin(suite):
    # with u* = 0 the normalized margin tends to 1 as |tau| -> inf: the defect is
    # |tau|^-1 eps (-zeta B'/2) to leading order, i.e. of order eps m zeta^2
    k = suite.constants
    tb = suite.tip.soliton
    z = np.array([1e-3, 1e-2, 0.1, 1.0])
    for sg in (1, -1):
        m = bb.tip_margin_v(k, tb, sg, z, 0.0, 0.0, 1.0)
        assert np.allclose(m, 1.0)
        m = bb.tip_margin_v(k, tb, sg, z, 1e-6, 0.0, 1.0)
        assert np.all(np.abs(m - 1) < 1e-3)


def test_coupling_monotone_in_h_star(suite):
    k = suite.constants
    hs = np.geomspace(0.5, 50, 20)
    up = bb.outer_margin_v(k, 1, 80.0, 0.1, 1.0, hs)
    lo = bb.outer_margin_v(k, -1, 80.0, 0.1, 1.0, hs)
    assert np.all(np.diff(up) < 0) and np.all(np.diff(lo) > 0)
    up = bb.para_margin_v(k, 1, 2.0, 1e-4, 1.0, hs)
    lo = bb.para_margin_v(k, -1, 2.0, 1e-4, 1.0, hs)
    assert np.all(np.diff(up) < 0) and np.all(np.diff(lo) > 0)


def test_certify_defects(suite):
    rep = bb.certify_defects(suite)
    assert rep.n_samples >= 100000
    failing = {n for n, e in rep.entries.items() if e["min_margin"] <= 0}
    # the only failure is the tip lower barrier at r = 0 with u* > 0, where
    # dt v- - G = 2 p u* / h* > 0 regardless of the constants
    assert failing == {"tip/v-"}
    e = rep.entries["tip/v-"]
    assert e["argmin"]["zeta"] == 0.0 and e["argmin"]["u"] > 0
    assert all(e["min_margin"] > 0 for n, e in rep.entries.items() if n != "tip/v-")
    ok = bb.certify_defects(suite, tip_lower_us=(0.0,))
    assert ok.passed
    assert max(rep.extra["profile_identities"].values()) < 1e-12


def test_certify_gluing(suite):
    rep = bb.certify_gluing(suite)
    assert len(rep.entries) == 16
    assert rep.passed
    assert all(e["n"] == 100 for e in rep.entries.values())


def test_corrupted_D_fails(suite):
    bad = suite.with_constants(D=suite.constants.parabolic["D"] / 2)
    rep = bb.certify_defects(bad, tip_lower_us=(0.0,))
    assert not rep.passed
    name, e = rep.worst
    assert name.startswith("parabolic") and e["min_margin"] < 0
    assert "rho" in e["argmin"]


def test_suite_json_roundtrip(suite, tmp_path):
    p = tmp_path / "suite.json"
    suite.to_json(p)
    from warpflow import io
    d = io.read_json(p)
    assert d["rho1"] == suite.rho1 and d["T_star"] == suite.T_star
    assert d["constants"]["parabolic"]["D"] == suite.constants.parabolic["D"]
    assert d["t_star"] == 0.0


def _desk_suite(suite, T_star=500.0, log_r_star=-60.0):
    # same constants on a box reachable in double precision (not certified;
    # the regions nest once |log t| > (zeta1/rho2)^2)
    from dataclasses import replace
    return replace(suite, T_star=T_star, log_r_star=log_r_star,
                   outer=replace(suite.outer, validity=dict(suite.outer.validity,
                                                            log_r_max=log_r_star)))


def test_trapping_monitor(suite):
    st = RadialState(1, 2, np.linspace(0, 1e-3, 20), np.full(20, 0.5), np.full(20, 1.0))
    assert bb.trapping_monitor(st, suite, 1e-3).status == "OutsideBox"
    desk = _desk_suite(suite)
    t = np.exp(-600.0)
    r = np.concatenate([[0.0], np.geomspace(1e-140, desk.r_star, 400)])
    vm, vp, hm, hp = bb.eval_suite(desk, r, np.full(r.shape, t))
    # below the certified |log t| a few nodes are unordered; drop them
    keep = (vm < vp) & (hm < hp)
    r, vm, vp, hm, hp = r[keep], vm[keep], vp[keep], hm[keep], hp[keep]
    v = 0.5 * (vm + vp)
    h = np.sqrt(hm) * np.sqrt(hp)
    st = RadialState(1, 2, r, v, h)
    assert bb.trapping_monitor(st, desk, t).status == "Trapped"
    v2 = v.copy()
    v2[150] = vp[150] * 1.01
    res = bb.trapping_monitor(RadialState(1, 2, r, v2, h), desk, t)
    assert res.status == "Crossed" and res.which == "v+" and res.r == r[150]
    assert not res.on_parabolic_boundary
    h2 = h.copy()
    h2[-1] = hm[-1] * 0.5
    res = bb.trapping_monitor(RadialState(1, 2, r, v, h2), desk, t)
    assert res.which == "h-" and res.on_parabolic_boundary
