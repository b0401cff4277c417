"""Ricci flow right-hand sides for doubly warped products.

Three gauges: fixed x (s' evolves), fixed arclength s (nonlocal drift),
and the radial gauge r = phi with state (v, h) = (phi_s^2, psi^2).
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from ._fd import cumtrapz0, deriv
from .geometry import WarpedProfile
from . import io

V_CLAMP = 1e-10


@dataclass(frozen=True)
class RadialState:
    p: int
    q: int
    r: np.ndarray
    v: np.ndarray
    h: np.ndarray
    s0: float = 0.0

    def __post_init__(self):
        for nm in ("r", "v", "h"):
            object.__setattr__(self, nm, np.asarray(getattr(self, nm), float))
        r, v, h = self.r, self.v, self.h
        if r.ndim != 1 or r.shape != v.shape or r.shape != h.shape:
            raise ValueError("r, v, h must be 1-d arrays of equal length")
        if len(r) < 4:
            raise ValueError("grid too short: need at least 4 nodes")
        if np.any(np.diff(r) <= 0) or r[0] < 0:
            raise ValueError("r must be nonnegative and strictly increasing")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(h))):
            raise ValueError("non-finite state values")

    @property
    def has_tip(self):
        return self.r[0] == 0.0

    def _par(self):
        return "even" if self.has_tip else None

    def v_r(self):
        return deriv(self.r, self.v, 1, self._par())

    def v_rr(self):
        return deriv(self.r, self.v, 2, self._par())

    def h_r(self):
        return deriv(self.r, self.h, 1, self._par())

    def h_rr(self):
        return deriv(self.r, self.h, 2, self._par())

    def u(self):
        return self.v * self.h_r() ** 2 / (4.0 * self.h)

    def to_csv(self, path):
        io.write_csv(path, ["r", "v", "h"], [self.r, self.v, self.h])

    @classmethod
    def from_csv(cls, path, p, q):
        d = io.read_csv(path)
        return cls(p, q, d["r"], d["v"], d["h"])


@dataclass
class RhsResult:
    nodes: np.ndarray
    fields: dict
    I: np.ndarray = None
    gauge: str = "x"

    def __getitem__(self, k):
        return self.fields[k]

    def to_csv(self, path):
        if self.gauge == "r":
            io.write_csv(path, ["r", "dv", "dh"], [self.nodes, self.fields["dv"], self.fields["dh"]])
        else:
            io.write_csv(path, ["s", "dpsi", "dphi", "dlogsprime"],
                         [self.nodes, self.fields["dpsi"], self.fields["dphi"],
                          self.fields.get("dlogsprime", np.zeros_like(self.nodes))])


@dataclass
class FDiagnostic:
    f: np.ndarray
    rhs_f: np.ndarray


def _ratio_limit(num, den, x, idx, par_num, par_den):
    # num/den at an end where both vanish: ratio of first derivatives
    dn = deriv(x, num, 1, *par_num)[idx]
    dd = deriv(x, den, 1, *par_den)[idx]
    return dn / dd


def rhs_fixed_x(profile):
    """Time derivatives at fixed x of psi, phi and log s'.

    Collapsed fibers at an end are handled through their smooth limits.
    """
    p, q = profile.p, profile.q
    psi, phi = profile.psi, profile.phi
    d = profile.derivatives()
    ps, pss, fs, fss = d["psi_s"], d["psi_ss"], d["phi_s"], d["phi_ss"]
    n = len(psi)
    with np.errstate(divide="ignore", invalid="ignore"):
        dpsi = pss + (p * ps / psi + q * fs / phi) * ps - ps ** 2 / psi - (p - 1) / psi
        dphi = fss + (p * ps / psi + q * fs / phi) * fs - fs ** 2 / phi - (q - 1) / phi
        drift = p * pss / psi + q * fss / phi
    par = profile.parities()
    x = profile.s
    for j, idx in ((0, 0), (1, n - 1)):
        zpsi, zphi = psi[idx] == 0, phi[idx] == 0
        if not (zpsi or zphi):
            continue
        if zpsi and zphi:
            raise ValueError(f"both radii vanish at end node {idx}")
        pn = [par["psi"][0], par["psi"][1]]
        fn = [par["phi"][0], par["phi"][1]]
        odd = ["odd" if k == j else None for k in (0, 1)]
        if zphi:
            # phi collapses: phi odd, psi even about this end
            lim_fs_over_phi_ps = pss[idx]
            dphi[idx] = 0.0
            dpsi[idx] = (pss[idx] + p * ps[idx] ** 2 / psi[idx] + q * lim_fs_over_phi_ps
                         - ps[idx] ** 2 / psi[idx] - (p - 1) / psi[idx])
            lim = _ratio_limit(fss, phi, x, idx, odd, fn)
            drift[idx] = p * pss[idx] / psi[idx] + q * lim
        else:
            lim_ps_over_psi_fs = fss[idx]
            dpsi[idx] = 0.0
            dphi[idx] = (fss[idx] + p * lim_ps_over_psi_fs + q * fs[idx] ** 2 / phi[idx]
                         - fs[idx] ** 2 / phi[idx] - (q - 1) / phi[idx])
            lim = _ratio_limit(pss, psi, x, idx, odd, pn)
            drift[idx] = p * lim + q * fss[idx] / phi[idx]
    out = {"dpsi": dpsi, "dphi": dphi, "dlogsprime": drift}
    for k, val in out.items():
        if not np.all(np.isfinite(val)):
            i = int(np.flatnonzero(~np.isfinite(val))[0])
            raise ValueError(f"non-finite {k} at node {i}")
    return RhsResult(profile.s.copy(), out, gauge="x")


def rhs_fixed_s(profile):
    """Time derivatives of psi, phi at fixed arclength s, with the drift I per node."""
    if profile.x_gauge:
        raise ValueError("rhs_fixed_s expects an arclength-gauge profile")
    for j, idx in ((0, 0), (1, -1)):
        if (profile.psi[idx] == 0 or profile.phi[idx] == 0) and profile.ends[j] != "closed":
            raise ValueError("drift integrand singular at an end; declare the end 'closed' "
                             "to use the smooth-limit form")
    rx = rhs_fixed_x(profile)
    d = profile.derivatives()
    I = cumtrapz0(profile.s, rx["dlogsprime"])
    out = {"dpsi": rx["dpsi"] - I * d["psi_s"], "dphi": rx["dphi"] - I * d["phi_s"],
           "dlogsprime": np.zeros_like(I)}
    return RhsResult(profile.s.copy(), out, I=I, gauge="s")


def to_radial(profile, r_max, r_nodes=None):
    """Change to the r = phi gauge on the part of the profile where phi < r_max."""
    s = profile.arclength
    phi = profile.phi
    d = profile.derivatives()
    above = np.flatnonzero(phi >= r_max)
    stop = int(above[0]) + 1 if above.size else len(phi)
    seg = phi[:stop]
    bad = np.flatnonzero(np.diff(seg) <= 0)
    if bad.size:
        i = int(bad[0]) + 1
        raise ValueError(f"phi not increasing below r_max: first violation at node {i} (s={s[i]!r})")
    v = d["phi_s"][:stop] ** 2
    h = profile.psi[:stop] ** 2
    r = seg.copy()
    if r_nodes is None:
        return RadialState(profile.p, profile.q, r, v, h, s0=float(s[0]))
    r_nodes = np.asarray(r_nodes, float)
    if r_nodes[0] < r[0] or r_nodes[-1] > r[-1]:
        raise ValueError("requested r nodes outside the monotone range")
    return RadialState(profile.p, profile.q, r_nodes, CubicSpline(r, v)(r_nodes),
                       CubicSpline(r, h)(r_nodes), s0=float(s[0]))


def from_radial(state):
    """Arclength profile from (r, v, h): s = s0 + int dr / sqrt(v)."""
    if np.any(state.v[1:] <= 0) or state.v[0] <= 0:
        i = int(np.flatnonzero(state.v <= 0)[0])
        raise ValueError(f"v <= 0 at node {i}")
    s = state.s0 + cumtrapz0(state.r, 1.0 / np.sqrt(state.v))
    ends = ("closed", None) if state.has_tip else (None, None)
    return WarpedProfile(state.p, state.q, s, np.sqrt(state.h), state.r.copy(), ends=ends)


def _check_tip(state, tol=1e-3, odd_frac=0.25):
    if not state.has_tip:
        return
    if abs(state.v[0] - 1.0) > tol:
        raise ValueError(f"smoothness at r=0 violated: v(0) = {state.v[0]!r}")
    # the one-sided slope at r = 0 of an even field is a small fraction of
    # the slope one or two nodes in; an odd part makes them comparable
    for f in (state.v, state.h):
        d = deriv(state.r, f, 1)
        near = max(abs(d[1]), abs(d[2]))
        if abs(d[0]) > odd_frac * near + tol * max(1e-12, abs(f[0])) / state.r[2]:
            raise ValueError("smoothness at r=0 violated: nonzero first derivative")


def g_ops(state, u_field):
    """Evaluate the operators G^(v)(v, h, u) and G^(h)(v, h, u)."""
    if np.any(state.h <= 0):
        i = int(np.flatnonzero(state.h <= 0)[0])
        raise ValueError(f"h <= 0 at node {i}")
    _check_tip(state)
    p, q = state.p, state.q
    aq2, ap2 = 2.0 * (q - 1), 2.0 * (p - 1)
    r, v, h = state.r, state.v, state.h
    u = np.broadcast_to(np.asarray(u_field, float), r.shape)
    v_r, v_rr, h_r, h_rr = state.v_r(), state.v_rr(), state.h_r(), state.h_rr()
    gv = np.empty_like(r)
    gh = np.empty_like(r)
    k = 1 if state.has_tip else 0
    rr = r[k:]
    gv[k:] = (v[k:] * v_rr[k:] - 0.5 * v_r[k:] ** 2 + (q - 1 - v[k:]) * v_r[k:] / rr
              + aq2 * v[k:] * (1 - v[k:]) / rr ** 2 - 2.0 * p * u[k:] * v[k:] / h[k:])
    gh[k:] = v[k:] * h_rr[k:] + (q - 1 + v[k:]) * h_r[k:] / rr - 4.0 * u[k:] - ap2
    if k:
        # r = 0 limits: v_r/r -> v_rr, (1-v)/r^2 -> -v_rr/2, h_r/r -> h_rr
        gv[0] = (v[0] * v_rr[0] + (q - 1 - v[0]) * v_rr[0] - 0.5 * aq2 * v[0] * v_rr[0]
                 - 2.0 * p * u[0] * v[0] / h[0])
        gh[0] = v[0] * h_rr[0] + (q - 1 + v[0]) * h_rr[0] - 4.0 * u[0] - ap2
    return gv, gh


def rhs_radial(state):
    """(dv/dt, dh/dt) at fixed r with u = v h_r^2 / (4h)."""
    u = state.u()
    if state.has_tip:
        u = u.copy()
        u[0] = 0.0
    gv, gh = g_ops(state, u)
    return RhsResult(state.r.copy(), {"dv": gv, "dh": gh}, gauge="r")


def radial_drift(state):
    """dr/dt of the level set r = phi at fixed x: v_r/2 + p v psi_r/psi - (q-1)(1-v)/r."""
    q, p = state.q, state.p
    r, v, h = state.r, state.v, state.h
    v_r, h_r = state.v_r(), state.h_r()
    X = np.empty_like(r)
    k = 1 if state.has_tip else 0
    X[k:] = 0.5 * v_r[k:] + 0.5 * p * v[k:] * h_r[k:] / h[k:] - (q - 1) * (1 - v[k:]) / r[k:]
    if k:
        X[0] = 0.0
    return X


def transport_radial_to_x(state, rhs=None):
    """Fixed-x rates of (v, h) obtained from the radial gauge via d_t|x = d_t|r + X d_r."""
    if rhs is None:
        rhs = rhs_radial(state)
    X = radial_drift(state)
    return rhs["dv"] + X * state.v_r(), rhs["dh"] + X * state.h_r()


def x_rates_of_radial_fields(profile):
    """Fixed-x rates of v = phi_s^2 and h = psi^2 computed from the x-gauge equations.

    d_t|x phi_s = d_s(d_t|x phi) - (d_t log s') phi_s, and d_t h = 2 psi d_t psi.
    """
    rx = rhs_fixed_x(profile)
    d = profile.derivatives()
    par = profile.parities()
    s = profile.arclength
    dphi_s = deriv(s, rx["dphi"], 1, *par["phi"])
    dfs = dphi_s - rx["dlogsprime"] * d["phi_s"]
    dv = 2.0 * d["phi_s"] * dfs
    dh = 2.0 * profile.psi * rx["dpsi"]
    return dv, dh


def f_field(state):
    """f = (1 - sqrt v)/r^2, extended to r = 0 by even quadratic extrapolation."""
    r, v = state.r, state.v
    if np.any(v > 1.0 + V_CLAMP):
        i = int(np.flatnonzero(v > 1.0 + V_CLAMP)[0])
        raise ValueError(f"gradient bound violated: v = {v[i]!r} > 1 at node {i}")
    v = np.minimum(v, 1.0)
    f = np.empty_like(r)
    k = 1 if state.has_tip else 0
    f[k:] = (1.0 - v[k:]) / (r[k:] ** 2 * (1.0 + np.sqrt(v[k:])))
    if k:
        r1, r2 = r[1] ** 2, r[2] ** 2
        f[0] = (f[1] * r2 - f[2] * r1) / (r2 - r1)
    return f


def f_evolution(state):
    """f and its time derivative under the flow.

    f_t = w^2 f_rr + (q-1+3w^2) f_r/r + (q-1)(2+w) f^2 + p w^3 h_r^2/(4 h^2 r^2),
    with w = sqrt v = 1 - r^2 f. At r = 0, f is treated as an even function
    (radial in dimension q+3).
    """
    _check_tip(state)
    p, q = state.p, state.q
    r, h = state.r, state.h
    f = f_field(state)
    par = "even" if state.has_tip else None
    f_r = deriv(r, f, 1, par)
    f_rr = deriv(r, f, 2, par)
    h_r, h_rr = state.h_r(), state.h_rr()
    w = 1.0 - r ** 2 * f
    rhs = np.empty_like(r)
    k = 1 if state.has_tip else 0
    rk = r[k:]
    rhs[k:] = (w[k:] ** 2 * f_rr[k:] + (q - 1 + 3 * w[k:] ** 2) * f_r[k:] / rk
               + (q - 1) * (2 + w[k:]) * f[k:] ** 2
               + p * w[k:] ** 3 * h_r[k:] ** 2 / (4 * h[k:] ** 2 * rk ** 2))
    if k:
        rhs[0] = (q + 3) * f_rr[0] + 3 * (q - 1) * f[0] ** 2 + p * h_rr[0] ** 2 / (4 * h[0] ** 2)
    return FDiagnostic(f, rhs)


def f_rate_chain_rule(state):
    """df/dt from the radial equations: f_t = -v_t / (2 sqrt(v) r^2)."""
    rhs = rhs_radial(state)
    r, v = state.r, state.v
    out = np.full_like(r, np.nan)
    k = 1 if state.has_tip else 0
    out[k:] = -rhs["dv"][k:] / (2 * np.sqrt(v[k:]) * r[k:] ** 2)
    return out


@dataclass
class GradientReport:
    maxima: dict
    violation: tuple = None
    ok: bool = True


def gradient_monitor(obj, C=1.0, tol=1e-6):
    """Largest squared gradients and the first node exceeding C + tol."""
    if isinstance(obj, RadialState):
        vals = {"v": obj.v, "u": obj.u()}
        nodes = obj.r
    else:
        d = obj.derivatives()
        vals = {"psi_s_sq": d["psi_s"] ** 2, "phi_s_sq": d["phi_s"] ** 2}
        nodes = obj.arclength
    maxima = {k: float(np.max(a)) for k, a in vals.items()}
    first = None
    for k, a in vals.items():
        bad = np.flatnonzero(a > C + tol)
        if bad.size and (first is None or bad[0] < first[1]):
            first = (k, int(bad[0]), float(nodes[bad[0]]), float(a[bad[0]]))
    return GradientReport(maxima, first, first is None)


def gauge_discrepancy(profile, region=None, relative=False):
    """Max |radial-gauge rates transported to fixed x - x-gauge rates| for (v, h).

    Both sides are computed on the profile's own nodes; `region` restricts the
    comparison to an s-interval (ends carry one-sided stencil errors).
    With relative=True each error is divided by the sup of the x-gauge rate.
    """
    s = profile.arclength
    state = to_radial(profile, r_max=np.inf)
    if len(state.r) != len(s):
        raise ValueError("phi must be increasing on the whole profile")
    dv_r, dh_r = transport_radial_to_x(state)
    dv_x, dh_x = x_rates_of_radial_fields(profile)
    m = np.ones(len(s), bool) if region is None else (s >= region[0]) & (s <= region[1])
    ev = float(np.max(np.abs(dv_r - dv_x)[m]))
    eh = float(np.max(np.abs(dh_r - dh_x)[m]))
    if relative:
        ev /= max(float(np.max(np.abs(dv_x[m]))), 1e-300)
        eh /= max(float(np.max(np.abs(dh_x[m]))), 1e-300)
    return ev, eh
