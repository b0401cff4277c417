"""Method-of-lines integration of the doubly warped flow.

Two state types are stepped: x-gauge profiles (psi, phi, log s' at fixed x)
and radial states (v, h at fixed r = phi). Time stepping is explicit SSP-RK2
with a diffusion-limited step. Monitors run after every accepted step and
append events to the trajectory.
"""
from dataclasses import asdict, dataclass, field, replace
import logging
import os

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq
from scipy.special import erfc

from . import io
from ._fd import cumtrapz0, deriv, deriv4_uniform
from .barriers import Coords, eval_suite, eval_suite_log, trapping_monitor
from .evolution import (RadialState, from_radial, gradient_monitor, rhs_fixed_x, rhs_radial,
                        to_radial)
from .geometry import WarpedProfile, read_profile_csv, sup_riem, write_profile_csv

log = logging.getLogger(__name__)

EVENT_KINDS = ("BarrierCrossing", "GradientViolation", "SingularityDetected", "MonotonicityLoss")


class NumericalFailure(RuntimeError):
    """Raised on NaN or a failed step; carries the last good snapshot."""

    def __init__(self, msg, t=None, state=None, trajectory=None):
        super().__init__(msg)
        self.t = t
        self.state = state
        self.trajectory = trajectory


@dataclass(frozen=True)
class SolverControls:
    gauge: str = "x"
    cfl: float = 0.4
    dt: float = None
    n_nodes: int = 64
    stretch: float = 1.0
    t_end: float = 1.0
    max_steps: int = 1_000_000
    curvature_ceiling: float = 1e8
    react: float = 0.02
    r_max: float = None
    n_tip: int = 8
    regrid: bool = True
    save_times: tuple = ()
    save_every: int = 0
    monitor_every: int = 1
    halt_on: tuple = ("SingularityDetected",)

    def __post_init__(self):
        if self.gauge not in ("x", "r"):
            raise ValueError("gauge must be 'x' or 'r'")
        if not 0 < self.cfl < 1:
            raise ValueError("CFL factor must lie in (0, 1)")
        if self.dt is not None and self.dt <= 0:
            raise ValueError("fixed dt must be positive")
        if self.stretch < 1:
            raise ValueError("stretch ratio must be >= 1")
        if self.t_end <= 0 or self.max_steps < 1 or self.monitor_every < 1:
            raise ValueError("t_end, max_steps and monitor_every must be positive")
        for k in self.halt_on:
            # "Kind" or "Kind:flag" (halt only when payload[flag] is true)
            if k.split(":", 1)[0] not in EVENT_KINDS:
                raise ValueError(f"unknown event kind {k!r}")
        object.__setattr__(self, "save_times", tuple(sorted(float(t) for t in self.save_times)))
        object.__setattr__(self, "halt_on", tuple(self.halt_on))

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class MollifyParams:
    omega: float
    epsilon: float = 0.05
    delta: float = 0.05
    C3: float = 16.0

    def __post_init__(self):
        if self.omega <= 0 or self.C3 <= 0:
            raise ValueError("omega and C3 must be positive")

    @property
    def t_omega(self):
        return self.epsilon * self.omega / np.sqrt(self.C3)

    def to_dict(self):
        return {"omega": self.omega, "epsilon": self.epsilon, "delta": self.delta,
                "C3": self.C3, "t_omega": self.t_omega}


@dataclass
class Event:
    t: float
    kind: str
    location: float = None
    payload: dict = field(default_factory=dict)

    def to_dict(self):
        return {"t": self.t, "kind": self.kind, "location": self.location,
                "payload": self.payload}


@dataclass
class FlowTrajectory:
    snapshots: list
    events: list
    controls: SolverControls
    history: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    status: str = "running"

    @property
    def times(self):
        return np.array([t for t, _ in self.snapshots])

    @property
    def t_final(self):
        return self.snapshots[-1][0]

    def first(self, kind, **match):
        for e in self.events:
            if e.kind == kind and all(e.payload.get(k) == v for k, v in match.items()):
                return e
        return None

    def snapshot_at(self, t):
        i = int(np.argmin(np.abs(self.times - t)))
        return self.snapshots[i]

    def to_dir(self, path):
        """Write `t=<value>.csv` snapshots plus events.json, meta.json and history.csv."""
        io.ensure_dir(path)
        names = []
        for t, st in self.snapshots:
            name = f"t={float(t)!r}.csv"
            names.append(name)
            if isinstance(st, RadialState):
                st.to_csv(os.path.join(path, name))
            else:
                write_profile_csv(os.path.join(path, name), st)
        io.write_json(os.path.join(path, "events.json"), [e.to_dict() for e in self.events])
        st0 = self.snapshots[0][1]
        meta = {"controls": self.controls.to_dict(), "status": self.status,
                "p": st0.p, "q": st0.q,
                "state": "radial" if isinstance(st0, RadialState) else "profile",
                "ends": None if isinstance(st0, RadialState) else list(st0.ends),
                "snapshots": names}
        nodes = st0.r if isinstance(st0, RadialState) else st0.s
        meta["grid"] = {"variable": "r" if isinstance(st0, RadialState) else "x",
                        "n": int(len(nodes)), "min": float(nodes[0]), "max": float(nodes[-1])}
        meta["constants"] = {"p": st0.p, "q": st0.q, "t_shift": self.meta.get("t_shift", 0.0)}
        meta.update(self.meta)
        io.write_json(os.path.join(path, "meta.json"), meta)
        if self.history:
            keys = sorted(self.history)
            io.write_csv(os.path.join(path, "history.csv"), keys,
                         [np.asarray(self.history[k], float) for k in keys])

    @classmethod
    def from_dir(cls, path):
        meta = io.read_json(os.path.join(path, "meta.json"))
        p, q = meta["p"], meta["q"]
        snaps = []
        for name in meta["snapshots"]:
            t = float(name[2:-4])
            fp = os.path.join(path, name)
            if meta["state"] == "radial":
                st = RadialState.from_csv(fp, p, q)
            else:
                st = read_profile_csv(fp, p, q, ends=tuple(meta["ends"]))
            snaps.append((t, st))
        events = [Event(e["t"], e["kind"], e["location"], e["payload"])
                  for e in io.read_json(os.path.join(path, "events.json"))]
        hp = os.path.join(path, "history.csv")
        hist = io.read_csv(hp) if os.path.exists(hp) else {}
        extra = {k: v for k, v in meta.items()
                 if k not in ("controls", "status", "p", "q", "state", "ends", "snapshots")}
        ctl = dict(meta["controls"])
        ctl["save_times"] = tuple(ctl["save_times"])
        ctl["halt_on"] = tuple(ctl["halt_on"])
        return cls(snaps, events, SolverControls(**ctl), {k: list(v) for k, v in hist.items()},
                   extra, meta["status"])


# ----------------------------------------------------------------------------
# grids

def stretched_grid(length, d0, ratio, pins=()):
    """Nodes 0 = x_0 < ... = length with first spacing near d0 growing by `ratio`.

    The ratio is adjusted so that the spacings sum exactly to `length`.
    `pins` are inserted as nodes (a neighbour closer than half a spacing is dropped).
    """
    if d0 <= 0 or d0 >= length:
        raise ValueError("need 0 < d0 < length")
    if ratio == 1.0:
        n = max(3, int(np.ceil(length / d0)))
        x = np.linspace(0.0, length, n + 1)
    else:
        n = max(3, int(np.ceil(np.log1p(length * (ratio - 1) / d0) / np.log(ratio))))
        g = brentq(lambda g: d0 * (g ** n - 1) / (g - 1) - length, 1.0 + 1e-12, 10.0)
        x = np.concatenate([[0.0], d0 * np.cumsum(g ** np.arange(n))])
        x[-1] = length
    for p in pins:
        if not 0 < p < length:
            continue
        i = int(np.searchsorted(x, p))
        gap = x[i] - x[i - 1]
        near = [j for j in (i - 1, i) if 0 < j < len(x) - 1 and abs(x[j] - p) < 0.5 * gap]
        x = np.delete(x, near)
        x = np.sort(np.append(x, p))
    return x


def tip_scale(t):
    """sqrt(t/|log t|), the width of the soliton region."""
    return float(np.sqrt(t / abs(np.log(t))))


# ----------------------------------------------------------------------------
# right-end condition for radial windows

@dataclass(frozen=True)
class OuterDirichlet:
    """v, h at the window edge R following the outer-row shape (1 + alpha_q^2 t/R^2)."""
    R: float
    v0: float
    h0: float
    aq2: float

    def __call__(self, t):
        f = 1.0 + self.aq2 * t / self.R ** 2
        return self.v0 * f, self.h0 * f

    def to_dict(self):
        return {"kind": "outer_dirichlet", "R": self.R, "v0": self.v0, "h0": self.h0,
                "aq2": self.aq2}


# ----------------------------------------------------------------------------
# monitors

def radial_view(state, r_max=None):
    """Radial state for a profile (or the state itself), restricted to r <= r_max."""
    if isinstance(state, RadialState):
        if r_max is None:
            return state
        m = state.r <= r_max * (1 + 1e-12)
        return RadialState(state.p, state.q, state.r[m], state.v[m], state.h[m], state.s0)
    prof = state
    if prof.x_gauge:
        prof = WarpedProfile(prof.p, prof.q, prof.arclength, prof.psi, prof.phi,
                             ends=prof.ends)
    return to_radial(prof, np.inf if r_max is None else r_max)


def radial_rm(state):
    """Curvature norm at the r > 0 nodes of a radial state."""
    from .geometry import rm_norm, CurvatureTuple
    r, v, h = state.r, state.v, state.h
    par = state._par()
    m = r > 0
    w = np.sqrt(h)
    w_r = deriv(r, w, 1, par)
    w_rr = deriv(r, w, 2, par)
    v_r = deriv(r, v, 1, par)
    sv = np.sqrt(np.maximum(v, 0))
    psi_s = sv * w_r
    psi_ss = 0.5 * v_r * w_r + v * w_rr
    c = CurvatureTuple(L_phi=((1 - v) / r ** 2)[m] if m.any() else np.array([]),
                       L_psi=((1 - psi_s ** 2) / h)[m], K_phi=(-0.5 * v_r / r)[m],
                       K_psi=(-psi_ss / w)[m], J=(-sv * psi_s / (r * w))[m])
    return rm_norm(c, state.p, state.q), r[m]


class GradientMonitor:
    """Largest squared gradients; records the first violation of C + tol."""
    name = "gradient"

    def __init__(self, C=1.0, tol=1e-6):
        self.C, self.tol = C, tol
        self.fired = False

    def __call__(self, t, state, ctx):
        rep = gradient_monitor(state, self.C, self.tol)
        vals = list(rep.maxima.values())
        out = {"grad_max_1": vals[0], "grad_max_2": vals[1]}
        ev = []
        if not rep.ok and not self.fired:
            self.fired = True
            k, i, x, val = rep.violation
            ev.append(Event(t, "GradientViolation", x, {"field": k, "node": i, "value": val}))
        return out, ev


class CurvatureMonitor:
    """sup |Rm| history; SingularityDetected once it exceeds the ceiling."""
    name = "curvature"

    def __init__(self, ceiling=1e8):
        self.ceiling = ceiling

    def __call__(self, t, state, ctx):
        if isinstance(state, RadialState):
            rm, x = radial_rm(state)
        else:
            s = state.arclength
            # end nodes may carry collapsed fibers; the sup is taken inside
            from .geometry import compute_curvatures, rm_norm
            c = compute_curvatures(state, (s[1], s[-2]))
            rm = rm_norm(c, state.p, state.q)
            x = s[(s >= s[1]) & (s <= s[-2])]
            # at a closed end the surviving radius f has f_s = 0: its sphere
            # planes carry 1/f^2 (a lower bound for the norm there)
            for j, e in ((0, state.ends[0]), (-1, state.ends[1])):
                if e == "closed":
                    f, m = max((state.psi[j], state.p), (state.phi[j], state.q))
                    if f > 0 and m > 1:
                        rm = np.append(rm, np.sqrt(0.5 * m * (m - 1)) / f ** 2)
                        x = np.append(x, s[j])
        i = int(np.argmax(rm))
        val = float(rm[i])
        ev = []
        if not np.isfinite(val) or val > self.ceiling:
            ev.append(Event(t, "SingularityDetected", float(x[i]),
                            {"sup_rm": val, "ceiling": self.ceiling}))
        return {"sup_rm": val, "sup_rm_at": float(x[i])}, ev


class MonotonicityMonitor:
    """phi increasing (v > 0) on the part of the interval with phi < r_star."""
    name = "monotonicity"

    def __init__(self, r_star):
        self.r_star = r_star
        self.fired = False

    def __call__(self, t, state, ctx):
        if isinstance(state, RadialState):
            m = state.r <= self.r_star
            bad = np.flatnonzero(m & (state.v <= 0))
            loc = state.r
        else:
            phi = state.phi
            above = np.flatnonzero(phi >= self.r_star)
            stop = int(above[0]) + 1 if above.size else len(phi)
            bad = np.flatnonzero(np.diff(phi[:stop]) <= 0) + 1
            loc = state.arclength
        ev = []
        if bad.size and not self.fired:
            self.fired = True
            ev.append(Event(t, "MonotonicityLoss", float(loc[bad[0]]), {"node": int(bad[0])}))
        return {}, ev


class TrappingMonitor:
    """Compare against the suite at barrier time t + t_shift.

    Records the first crossing anywhere (with its location and whether it lies
    on the parabolic boundary) and, separately, the first crossing at
    r = r_star, which is what the crossing time T-dagger measures.
    """
    name = "trapping"

    def __init__(self, suite, t_shift=0.0, r_star=None):
        self.suite = suite
        self.t_shift = t_shift
        self.r_star = suite.r_star if r_star is None else r_star
        self.first_done = False
        self.boundary_done = False
        self.calls = 0

    def _boundary_check(self, rv, tb):
        r = rv.r
        if r[-1] < self.r_star * (1 - 1e-9):
            return None
        v = float(np.interp(self.r_star, r, rv.v))
        h = float(np.interp(self.r_star, r, rv.h))
        c = Coords.from_rt(np.array([self.r_star]), np.array([tb]))
        try:
            vm, vp, hm, hp = eval_suite_log(self.suite, c)
        except ValueError:
            return None
        lh = np.log(h)
        for which, bad in (("v-", v < vm[0]), ("v+", v > vp[0]),
                           ("h-", lh < hm[0]), ("h+", lh > hp[0])):
            if bad:
                return which
        return ""

    def __call__(self, t, state, ctx):
        tb = t + self.t_shift
        first_call = self.calls == 0
        self.calls += 1
        if np.log(tb) > -self.suite.T_star:
            return {"trap": 2.0}, []
        rv = radial_view(state, self.r_star)
        ev = []
        res = trapping_monitor(rv, self.suite, tb, first_time=first_call)
        if res.status == "Crossed" and not self.first_done:
            self.first_done = True
            ev.append(Event(t, "BarrierCrossing", res.r,
                            {"which": res.which, "on_parabolic_boundary": res.on_parabolic_boundary,
                             "initial": first_call, "first": True, "t_barrier": tb}))
        if not self.boundary_done:
            w = self._boundary_check(rv, tb)
            if w:
                self.boundary_done = True
                ev.append(Event(t, "BarrierCrossing", self.r_star,
                                {"which": w, "on_parabolic_boundary": True,
                                 "initial": first_call, "first": False, "at_r_star": True,
                                 "t_barrier": tb}))
        return {"trap": 0.0 if res.status == "Trapped" else 1.0}, ev


# ----------------------------------------------------------------------------
# stepping

def _closed_mask(prof):
    out = []
    for j, idx in ((0, 0), (1, -1)):
        if prof.ends[j] == "closed":
            out.append((idx, prof.psi[idx] == 0, prof.phi[idx] == 0))
    return out


def _x_dt(prof, controls):
    s = prof.arclength
    ds2 = float(np.min(np.diff(s))) ** 2
    polar = 1 + max(prof.p, prof.q) if "closed" in prof.ends else 1
    dt = controls.cfl * ds2 / (2.0 * polar)
    rad = np.concatenate([prof.psi[prof.psi > 0], prof.phi[prof.phi > 0]])
    if rad.size:
        dt = min(dt, controls.react * float(np.min(rad)) ** 2 / max(1, prof.p - 1, prof.q - 1))
    return dt


def _r_dt(st, controls):
    dr2 = np.diff(st.r) ** 2
    vmax = np.maximum(np.maximum(st.v[1:], st.v[:-1]), 1e-12)
    dt = controls.cfl * float(np.min(dr2 / vmax)) / (2.0 * (st.q + 1))
    return min(dt, controls.react * float(np.min(st.h)) / max(1, st.p))


def _radius_jets(x, lam, f, par, other_par):
    """f_s, f_ss, (1 - f_s^2)/f, f_ss/f and 1/f for one warping function.

    Near an end where f collapses, f = sigma Q with sigma the distance to the
    end and Q even with Q(end) = 1. The quotients are then formed from Q,
    which selects the smooth branch at the pole (f_s = 1 there).
    """
    n = len(f)
    fs = deriv4_uniform(x, f, 1, *par) / lam
    fss = deriv4_uniform(x, f, 2, *par) / lam ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        S = (1 - fs ** 2) / f
        R = fss / f
        inv = 1.0 / f
    poles = [j for j, idx in ((0, 0), (1, n - 1)) if f[idx] == 0]
    half = n // 2
    for j in poles:
        idx = 0 if j == 0 else n - 1
        eps = 1.0 if j == 0 else -1.0
        sig = lam * np.abs(x - x[idx])
        Q = np.empty(n)
        m = sig > 0
        Q[m] = f[m] / sig[m]
        Q[idx] = 1.0
        qpar = [None, None]
        qpar[j] = "even"
        Qs = deriv4_uniform(x, Q, 1, *qpar) / lam
        Qss = deriv4_uniform(x, Q, 2, *qpar) / lam ** 2
        sl = slice(0, half) if j == 0 else slice(n - half, n)
        mm = np.zeros(n, bool)
        mm[sl] = True
        mi = mm & m
        mq = Q + eps * sig * Qs
        fs[mm] = eps * mq[mm]
        fss[mm] = 2 * eps * Qs[mm] + sig[mm] * Qss[mm]
        S[mi] = ((1 - Q[mi]) / sig[mi] - eps * Qs[mi]) * (1 + mq[mi]) / Q[mi]
        R[mi] = (2 * eps * Qs[mi] / sig[mi] + Qss[mi]) / Q[mi]
        S[idx] = 0.0
        R[idx] = 3.0 * Qss[idx]
    return fs, fss, S, R, inv, poles


def _x_rates(prof):
    """Rates at fixed x in the uniform-stretch gauge (s' constant in x).

    The fixed-x equations give psi_t, phi_t and the rate of log s'. The
    nodes are then moved so that s' stays spatially constant:
    f_t += (lambda_t (s - s_0) / lambda - I(s)) f_s, with I the running
    integral of the log s' rate.
    """
    p, q = prof.p, prof.q
    par = prof.parities()
    x, lam = prof.s, prof.sprime[0]
    ps, pss, Sp, Rp, ip, pole_p = _radius_jets(x, lam, prof.psi, par["psi"], par["phi"])
    fs, fss, Sf, Rf, if_, pole_f = _radius_jets(x, lam, prof.phi, par["phi"], par["psi"])
    n = len(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        cross_p = ps * fs * if_      # psi_s phi_s / phi, in the psi equation
        cross_f = fs * ps * ip       # phi_s psi_s / psi, in the phi equation
    # at a pole of one radius the other is even: g_s f_s / f -> g_ss
    for j in pole_f:
        idx = 0 if j == 0 else n - 1
        if prof.psi[idx] == 0:
            raise ValueError(f"both radii vanish at end node {idx}")
        cross_p[idx] = pss[idx]
    for j in pole_p:
        idx = 0 if j == 0 else n - 1
        cross_f[idx] = fss[idx]
    dpsi = pss - (p - 1) * Sp + q * cross_p
    dphi = fss - (q - 1) * Sf + p * cross_f
    drift = p * Rp + q * Rf
    for j in pole_f:
        idx = 0 if j == 0 else n - 1
        dphi[idx] = 0.0
        dpsi[idx] = pss[idx] + (p - 1) * (ps[idx] ** 2 - 1) / prof.psi[idx] + q * pss[idx]
    for j in pole_p:
        idx = 0 if j == 0 else n - 1
        dpsi[idx] = 0.0
        dphi[idx] = fss[idx] + (q - 1) * (fs[idx] ** 2 - 1) / prof.phi[idx] + p * fss[idx]
    if p == 0:
        drift = q * Rf
        dpsi = np.zeros_like(dpsi)
    for nm, val in (("dpsi", dpsi), ("dphi", dphi), ("dlogsprime", drift)):
        if not np.all(np.isfinite(val)):
            i = int(np.flatnonzero(~np.isfinite(val))[0])
            raise ValueError(f"non-finite {nm} at node {i}")
    s = prof.arclength
    I = cumtrapz0(s, drift)
    rate = I[-1] / (s[-1] - s[0])
    w = rate * (s - s[0]) - I
    return dpsi + w * ps, dphi + w * fs, np.full_like(s, rate)


def _x_step(prof, dt):
    p, q, x, ends = prof.p, prof.q, prof.s, prof.ends

    def make(psi, phi, lsp):
        return WarpedProfile(p, q, x, psi, phi, sprime=np.exp(lsp), s0=prof.s0, ends=ends)

    y0 = (prof.psi, prof.phi, np.log(prof.sprime))
    k1 = _x_rates(prof)
    y1 = tuple(a + dt * k for a, k in zip(y0, k1))
    k2 = _x_rates(make(*y1))
    return make(*(0.5 * a + 0.5 * (b + dt * k) for a, b, k in zip(y0, y1, k2)))


def _r_step(st, dt, t, bc):
    def make(v, h, tt):
        v = v.copy()
        h = h.copy()
        if st.has_tip:
            v[0] = 1.0
        if bc is not None:
            v[-1], h[-1] = bc(tt)
        return RadialState(st.p, st.q, st.r, v, h, st.s0)

    k1 = rhs_radial(st)
    s1 = make(st.v + dt * k1["dv"], st.h + dt * k1["dh"], t + dt)
    k2 = rhs_radial(s1)
    return make(0.5 * st.v + 0.5 * (s1.v + dt * k2["dv"]),
                0.5 * st.h + 0.5 * (s1.h + dt * k2["dh"]), t + dt)


def _regrid(st, d0, ratio, pins):
    r = stretched_grid(st.r[-1], d0, ratio, pins)
    bc = ((1, 0.0), "not-a-knot") if st.has_tip else "not-a-knot"
    v = CubicSpline(st.r, st.v, bc_type=bc)(r)
    h = CubicSpline(st.r, st.h, bc_type=bc)(r)
    if st.has_tip:
        v[0] = 1.0
    return RadialState(st.p, st.q, r, v, h, st.s0)


def _finite(state):
    if isinstance(state, RadialState):
        return bool(np.all(np.isfinite(state.v)) and np.all(np.isfinite(state.h)))
    return bool(np.all(np.isfinite(state.psi)) and np.all(np.isfinite(state.phi))
                and np.all(np.isfinite(state.sprime)))


def _halts(e, halt_on):
    for k in halt_on:
        kind, _, flag = k.partition(":")
        if e.kind == kind and (not flag or e.payload.get(flag)):
            return True
    return False


def integrate(initial, controls, monitors=(), t_shift=0.0, right_bc=None, pins=(), meta=None):
    """Advance `initial` to controls.t_end (or a halting event).

    x gauge: `initial` is an x-gauge WarpedProfile (an arclength profile is
    promoted with s' = 1). r gauge: a RadialState on [0, R]; `right_bc(t)`
    returns the Dirichlet (v, h) at R, and `t_shift` is the barrier time
    offset used for the tip-scale regridding.
    """
    ctl = controls
    if ctl.gauge == "x":
        if isinstance(initial, RadialState):
            raise ValueError("x gauge expects a WarpedProfile")
        st = initial
        if not st.x_gauge:
            st = WarpedProfile(st.p, st.q, st.s, st.psi, st.phi, st.grad_bound_C,
                               np.ones_like(st.s), st.s0, st.ends)
        if np.ptp(st.sprime) > 1e-12 * st.sprime.max():
            raise ValueError("x gauge stepping expects a spatially constant s'")
    else:
        if not isinstance(initial, RadialState):
            raise ValueError("r gauge expects a RadialState")
        st = initial
    traj = FlowTrajectory([(0.0, st)], [], ctl, {"t": []}, dict(meta or {}))
    traj.meta.update({"gauge": ctl.gauge, "t_shift": t_shift,
                      "right_bc": right_bc.to_dict() if hasattr(right_bc, "to_dict") else None,
                      "monitors": [m.name for m in monitors]})
    saves = [ts for ts in ctl.save_times if 0 < ts <= ctl.t_end]
    t = 0.0
    step = 0
    halted = None

    def run_monitors(t, st):
        nonlocal halted
        traj.history["t"].append(t)
        for m in monitors:
            vals, evs = m(t, st, traj)
            for k, v in vals.items():
                traj.history.setdefault(k, []).append(v)
            for e in evs:
                traj.events.append(e)
                if halted is None and _halts(e, ctl.halt_on):
                    halted = e.kind

    run_monitors(0.0, st)
    while halted is None and t < ctl.t_end * (1 - 1e-14) and step < ctl.max_steps:
        if ctl.dt is not None:
            dt = ctl.dt
        else:
            dt = _x_dt(st, ctl) if ctl.gauge == "x" else _r_dt(st, ctl)
        target = ctl.t_end
        if saves:
            target = min(target, saves[0])
        hit = t + dt >= target
        if hit:
            dt = target - t
        try:
            new = _x_step(st, dt) if ctl.gauge == "x" else _r_step(st, dt, t, right_bc)
        except ValueError as exc:
            traj.status = "NumericalFailure"
            raise NumericalFailure(f"step failed at t={t!r}: {exc}", t, st, traj) from exc
        if not _finite(new):
            traj.status = "NumericalFailure"
            raise NumericalFailure(f"non-finite state at t={t + dt!r}", t, st, traj)
        t = target if hit else t + dt
        st = new
        step += 1
        if ctl.gauge == "r" and ctl.regrid and st.has_tip:
            want = tip_scale(t + max(t_shift, 1e-300)) / ctl.n_tip
            if st.r[1] < 0.5 * want and want < 0.05 * st.r[-1]:
                st = _regrid(st, want, max(ctl.stretch, 1.0 + 1e-9), pins)
        saved = False
        if saves and hit and t >= saves[0]:
            saves.pop(0)
            traj.snapshots.append((t, st))
            saved = True
        elif ctl.save_every and step % ctl.save_every == 0:
            traj.snapshots.append((t, st))
            saved = True
        if step % ctl.monitor_every == 0 or saved:
            run_monitors(t, st)
    if traj.snapshots[-1][0] != t:
        traj.snapshots.append((t, st))
    if halted is not None:
        traj.status = halted
    elif t >= ctl.t_end * (1 - 1e-14):
        traj.status = "t_end"
    else:
        traj.status = "max_steps"
    traj.meta["steps"] = step
    return traj


# ----------------------------------------------------------------------------
# initial data

def _smoothstep(x):
    return x ** 3 * (10 - 15 * x + 6 * x ** 2)


_SMOOTH_DOWN = np.array([1.0, 0, 0, -10.0, 15.0, -6.0])   # 1 - smoothstep, ascending coeffs


def _cone_jets(k, form, nodes):
    """s, psi, phi, psi_s, phi_s, psi_ss, phi_ss on the conical part.

    literal: psi = s, phi = k s / sqrt|log s| with s as the node variable.
    matched: phi = r, v = k^2/|log r|, h = r^2 |log r| / k^2 with r as the node variable.
    """
    x = np.asarray(nodes, float)
    ell = -np.log(x)
    if form == "literal":
        s = x
        psi, psi_s, psi_ss = s, np.ones_like(s), np.zeros_like(s)
        phi = k * s / np.sqrt(ell)
        phi_s = k / np.sqrt(ell) * (1 + 0.5 / ell)
        phi_ss = (k / s) * (0.5 * ell ** -1.5 + 0.75 * ell ** -2.5)
    elif form == "matched":
        r = x
        s = (r * np.sqrt(ell) + 0.5 * np.sqrt(np.pi) * erfc(np.sqrt(ell))) / k
        phi = r
        psi = r * np.sqrt(ell) / k
        phi_s = k / np.sqrt(ell)
        psi_s = 1 - 0.5 / ell
        phi_ss = k * k / (2 * r * ell ** 2)
        psi_ss = -k / (2 * r * ell ** 2.5)
    else:
        raise ValueError("form must be 'literal' or 'matched'")
    return s, psi, phi, psi_s, phi_s, psi_ss, phi_ss


def initial_from_asymptotics(k, p, q, L=1.0, grid=None, form="literal", cone_end=None):
    """Conical initial profile on [0, L] closing to a cone over S^p x S^q at s = 0.

    The conical part ends at `cone_end` (s for the literal form, r for the
    matched form); on the rest of [0, L] the slopes are damped to zero by
    (f_s + f_ss (s - s0)(1 - sigma)) * (1 - smoothstep(sigma)), giving a C^2 profile with a mirror end at L.
    grid: {"n_cone", "n_blend", "x_min"}.
    """
    if k <= 0 or L <= 0:
        raise ValueError("k and L must be positive")
    g = {"n_cone": 300, "n_blend": 100, "x_min": 1e-14}
    g.update(grid or {})
    if cone_end is None:
        cone_end = min(0.12 * L, 0.12) if form == "literal" else np.exp(-max(1.5, 1.5 * k * k))
    xs = np.geomspace(g["x_min"], cone_end, g["n_cone"])
    s, psi, phi, psi_s, phi_s, psi_ss, phi_ss = _cone_jets(k, form, xs)
    s0 = float(s[-1])
    if s0 >= L:
        raise ValueError("conical part does not fit inside [0, L]")
    if np.any(phi_s ** 2 > 1) or np.any(psi_s ** 2 > 1):
        raise ValueError(f"k = {k} too large for the gradient bound on the conical part")
    span = L - s0
    sig = np.linspace(0.0, 1.0, g["n_blend"] + 1)[1:]
    sb = s0 + span * sig
    pieces = []
    for f0, f1, f2 in ((psi[-1], psi_s[-1], psi_ss[-1]), (phi[-1], phi_s[-1], phi_ss[-1])):
        slope = npoly.polymul([f1, f2 * span, -f2 * span], _SMOOTH_DOWN)
        anti = npoly.polyint(slope) * span
        val = f0 + npoly.polyval(sig, anti)
        der = npoly.polyval(sig, slope)
        pieces.append((val, der))
    (psi_b, dpsi_b), (phi_b, dphi_b) = pieces
    if np.any(dphi_b ** 2 > 1) or np.any(dpsi_b ** 2 > 1):
        raise ValueError(f"k = {k} too large for the gradient bound on the blend")
    if np.any(dphi_b < -1e-12) or np.any(dpsi_b < -1e-12):
        raise ValueError("blend is not monotone; increase L")
    log.info("initial_from_asymptotics: form=%s cone on (0, %.6g], blend on [%.6g, %.6g] with "
             "slope (f_s + f_ss (s - s0)(1 - sig)) (1 - smoothstep(sig)), sig = (s - s0)/(L - s0)",
             form, s0, s0, L)
    S = np.concatenate([[0.0], s, sb])
    PSI = np.concatenate([[0.0], psi, psi_b])
    PHI = np.concatenate([[0.0], phi, phi_b])
    return WarpedProfile(p, q, S, PSI, PHI, ends=(None, "mirror"))


# ----------------------------------------------------------------------------
# mollification

def _tip_midpoint(suite, r, t):
    """Midpoints of the tip row (v, log h) at time t."""
    fam = suite.tip
    c = Coords.from_rt(np.asarray(r, float), np.full(np.shape(r), t))
    vm, lhm = fam.values(c, -1)
    vp, lhp = fam.values(c, 1)
    return vm, vp, lhm, lhp


def _limit_slope(r, v, psi, weight, cap=0.95, m=16):
    """Soft-clip psi_s = sqrt(v) psi_r below `cap` where weight > 0.

    psi is rebuilt by integrating inward from the last node, so the outer
    value is unchanged and the clipped slope only raises psi near the tip.
    """
    g = np.sqrt(v) * deriv(r, psi, 1, left="even")
    g_soft = g / (1.0 + np.abs(g / cap) ** m) ** (1.0 / m)
    g_new = weight * g_soft + (1.0 - weight) * g
    dpsi = g_new / np.sqrt(v)
    tail = cumtrapz0(r, dpsi)
    return psi[-1] - (tail[-1] - tail)


def mollify_initial(base, params, suite, n_cap=None):
    """Replace r <= sqrt(omega) by a smooth S^p x D^{q+1} cap.

    The cap follows the tip-row midpoints at t_omega and is blended into the
    base on [r_a, sqrt(omega)] with a C^2 smoothstep in (v, log h), where
    r_a = sqrt(omega)/2, or less if the tip row loses its ordering earlier.
    Base nodes with phi > sqrt(omega) are kept unchanged (arclength shifted).
    """
    c = suite.constants
    if abs(params.epsilon - c.epsilon) > 1e-15 or abs(params.delta - c.delta) > 1e-15:
        raise ValueError("mollification parameters do not match the suite")
    if base.p != c.p or base.q != c.q:
        raise ValueError("profile and suite dimensions differ")
    rw = float(np.sqrt(params.omega))
    tw = params.t_omega
    if not tw < 1:
        raise ValueError("t_omega must be below 1")
    if rw >= base.phi.max():
        raise ValueError("sqrt(omega) exceeds the range of phi")
    z_edge = rw * np.sqrt(abs(np.log(tw)) / tw)
    if z_edge > suite.tip.validity["zeta_max"]:
        raise ValueError(f"cannot fit a cap: sqrt(omega) sits at zeta = {z_edge:.4g}, beyond the "
                         f"tip row (zeta <= {suite.tip.validity['zeta_max']:.4g}); increase C3")
    d0 = min(tip_scale(tw) / 16.0, rw / 64.0)
    r = stretched_grid(rw, d0, 1.03)[:-1]
    vm, vp, lhm, lhp = _tip_midpoint(suite, r, tw)
    bad = (r > 0) & ((vm >= vp) | (lhm >= lhp))
    # blend into the base from r_a on; the tip row must be ordered below r_a
    r_a = 0.5 * rw
    if bad.any():
        r_a = min(r_a, 0.9 * float(r[np.flatnonzero(bad)[0]]))
    if r_a < 4.0 * tip_scale(tw):
        raise ValueError(f"cannot fit a cap: tip barriers unordered from r = {r_a / 0.9!r}, "
                         "inside the soliton core")
    v_t = 0.5 * (vm + vp)
    lh_t = 0.5 * (lhm + lhp)
    bl = r >= r_a
    rad = to_radial(base, rw * 1.5, r_nodes=r[bl])
    chi = np.ones_like(r)
    chi[bl] = 1.0 - _smoothstep((r[bl] - r_a) / (rw - r_a))
    v = v_t.copy()
    lh = lh_t.copy()
    v[bl] = chi[bl] * v_t[bl] + (1 - chi[bl]) * rad.v
    lh[bl] = chi[bl] * lh_t[bl] + (1 - chi[bl]) * np.log(rad.h)
    v[0] = 1.0
    psi = _limit_slope(r, v, np.exp(0.5 * lh), chi)
    cap = RadialState(base.p, base.q, r, v, psi ** 2)
    s_cap = cumtrapz0(r, 1.0 / np.sqrt(v))
    # arclength across the last cap interval up to rw, then to the first kept base node
    sb = base.arclength
    keep = base.phi > rw
    j = int(np.flatnonzero(keep)[0])
    s_rw_base = float(np.interp(rw, base.phi[:j + 1], sb[:j + 1]))
    v_rw = float(rad.v[-1]) if bl.any() else float(v[-1])
    s_rw = s_cap[-1] + (rw - r[-1]) * 2.0 / (np.sqrt(v[-1]) + np.sqrt(v_rw))
    S = np.concatenate([s_cap, sb[keep] - s_rw_base + s_rw])
    PSI = np.concatenate([np.sqrt(cap.h), base.psi[keep]])
    PHI = np.concatenate([r, base.phi[keep]])
    prof = WarpedProfile(base.p, base.q, S, PSI, PHI, ends=("closed", base.ends[1]))
    log.info("mollify_initial: omega=%.6g t_omega=%.6g cap nodes=%d", params.omega, tw, len(r))
    return prof


def post_hoc_trapping(profile, suite, t):
    """trapping_monitor on the radial view at time t (first-time convention)."""
    return trapping_monitor(radial_view(profile, suite.r_star), suite, t, first_time=True)


# ----------------------------------------------------------------------------
# presets

def round_sphere(p, q, n=33):
    """Unit S^{p+q+1}: psi = cos x, phi = sin x on [0, pi/2], s' = 1."""
    x = np.linspace(0.0, 0.5 * np.pi, n)
    psi = np.cos(x)
    psi[-1] = 0.0
    return WarpedProfile(p, q, x, psi, np.sin(x), sprime=np.ones(n), ends=("closed", "closed"))


def homogeneous_product(p, q, a=1.0, b=1.0, length=1.0, n=16):
    """psi = a, phi = b on an interval with mirror ends."""
    x = np.linspace(0.0, length, n)
    return WarpedProfile(p, q, x, np.full(n, a), np.full(n, b), sprime=np.ones(n),
                         ends=("mirror", "mirror"))


def flat_cylinder(p, q, b=1.0, length=2.0, n=32):
    """R^{p+1} x S^q_b: psi = s closes at s = 0, phi = b; open right end."""
    x = np.linspace(0.0, length, n)
    return WarpedProfile(p, q, x, x.copy(), np.full(n, b), sprime=np.ones(n),
                         ends=("closed", None))


def neckpinch(p=1, q=2, a=1.0, b_neck=0.3, b_max=0.8, length=2.0, n=81):
    """Periodic cylinder with a neck at x = 0 (mirror ends at the neck and the bulge)."""
    x = np.linspace(0.0, length, n)
    phi = b_neck + (b_max - b_neck) * 0.5 * (1 - np.cos(np.pi * x / length))
    return WarpedProfile(p, q, x, np.full(n, a), phi, sprime=np.ones(n),
                         ends=("mirror", "mirror"))


def pole_pinch(p=1, q=2, b_pole=0.3, b_max=1.0, length=2.0, n=81):
    """psi closes at x = 0 where phi is smallest, so the S^q factor pinches at the pole.

    psi = (2L/pi) sin(pi x/2L), phi rises from b_pole to b_max; mirror right end.
    """
    x = np.linspace(0.0, length, n)
    psi = (2 * length / np.pi) * np.sin(0.5 * np.pi * x / length)
    psi[0] = 0.0
    phi = b_pole + (b_max - b_pole) * 0.5 * (1 - np.cos(np.pi * x / length))
    return WarpedProfile(p, q, x, psi, phi, sprime=np.ones(n), ends=("closed", "mirror"))


@dataclass(frozen=True)
class ForwardSetup:
    """Mollified forward run: radial initial state, window, BC and barrier shift."""
    state: RadialState
    profile: WarpedProfile
    params: MollifyParams
    R: float
    bc: OuterDirichlet
    t_shift: float
    trapped_initially: object


def forward_setup(k, p, q, omega, suite, tables=None, R=0.2, C3=16.0, ratio=1.04, n_tip=8,
                  form="matched"):
    """Base cone data, mollified at scale omega, restricted to the window [0, R]."""
    c = suite.constants
    params = MollifyParams(omega, c.epsilon, c.delta, C3)
    base = initial_from_asymptotics(k, p, q, L=1.0, form=form)
    prof = mollify_initial(base, params, suite)
    d0 = tip_scale(params.t_omega) / n_tip
    pins = (suite.r_star,) if suite.r_star < R else ()
    r = stretched_grid(R, min(d0, R / 50), ratio, pins)
    arc = WarpedProfile(p, q, prof.s, prof.psi, prof.phi, ends=prof.ends)
    raw = to_radial(arc, R * 1.01)
    # clamped at r = 0 so the interpolants stay even there
    v = CubicSpline(raw.r, raw.v, bc_type=((1, 0.0), "not-a-knot"))(r)
    h = CubicSpline(raw.r, raw.h, bc_type=((1, 0.0), "not-a-knot"))(r)
    v[0] = 1.0
    st = RadialState(p, q, r, v, h, 0.0)
    bc = OuterDirichlet(R, float(st.v[-1]), float(st.h[-1]), c.aq2)
    trap = post_hoc_trapping(prof, suite, params.t_omega) if params.t_omega <= np.exp(-suite.T_star) else None
    return ForwardSetup(st, prof, params, R, bc, params.t_omega, trap)


def run_forward(setup, suite, t_end, save_times=(), cfl=0.4, n_tip=8, ratio=1.04,
                monitors=None, max_steps=2_000_000, monitor_every=10, halt_on=()):
    ctl = SolverControls(gauge="r", cfl=cfl, t_end=t_end, stretch=ratio, n_tip=n_tip,
                         save_times=tuple(save_times), r_max=setup.R, halt_on=halt_on,
                         max_steps=max_steps, monitor_every=monitor_every)
    if monitors is None:
        monitors = [GradientMonitor(), MonotonicityMonitor(suite.r_star),
                    TrappingMonitor(suite, setup.t_shift)]
    pins = (suite.r_star,) if suite.r_star < setup.R else ()
    meta = {"mollify": setup.params.to_dict(), "R": setup.R, "suite": suite.to_dict()}
    return integrate(setup.state, ctl, monitors, t_shift=setup.t_shift, right_bc=setup.bc,
                     pins=pins, meta=meta)


# ----------------------------------------------------------------------------
# analysis

def crossing_time(trajectory, suite=None, r_star=None):
    """T-dagger: first monotonicity loss below r_star or crossing at r = r_star."""
    ev_b = trajectory.first("BarrierCrossing", at_r_star=True)
    ev_m = trajectory.first("MonotonicityLoss")
    cands = [e for e in (ev_b, ev_m) if e is not None]
    first = trajectory.first("BarrierCrossing", first=True)
    rep = {"censored": not cands, "t_end": trajectory.t_final,
           "first_crossing": first.to_dict() if first else None,
           "interior_first": bool(first and not first.payload["on_parabolic_boundary"])}
    if cands:
        e = min(cands, key=lambda e: e.t)
        rep.update({"T_dagger": e.t, "cause": e.kind, "event": e.to_dict()})
    else:
        rep.update({"T_dagger": trajectory.t_final, "cause": None, "event": None})
    rep["avoidance_ok"] = not rep["interior_first"]
    if r_star is not None:
        rep["r_star"] = r_star
    elif suite is not None:
        rep["r_star"] = suite.r_star
    return rep


def detect_singularity(trajectory, min_growth=10.0):
    """Blowup time from a linear fit of 1/sup|Rm| over its last decade.

    Returns None when sup|Rm| has not grown by `min_growth` or the fit slope
    is not negative.
    """
    h = trajectory.history
    if "sup_rm" not in h or len(h["sup_rm"]) < 4:
        return None
    t = np.asarray(h["t"], float)
    S = np.asarray(h["sup_rm"], float)
    ok = np.isfinite(S)
    t, S = t[ok], S[ok]
    if S[-1] < min_growth * S.min():
        return None
    w = S >= S[-1] / 10.0
    if w.sum() < 3:
        w = np.zeros_like(w)
        w[-3:] = True
    slope, icpt = np.polyfit(t[w], 1.0 / S[w], 1)
    if slope >= 0:
        return None
    T = -icpt / slope
    ratio = S[w] * (T - t[w])
    loc = h.get("sup_rm_at", [None])[-1]
    return {"time": float(T), "location": loc, "type_I_ratio": float(np.mean(ratio)),
            "ratio_min": float(ratio.min()), "ratio_max": float(ratio.max()),
            "window": [float(t[w][0]), float(t[w][-1])], "n_fit": int(w.sum())}


@dataclass
class RegimeReport:
    rows: list
    partial: bool
    notes: list

    def to_dict(self):
        return {"rows": self.rows, "partial": self.partial, "notes": self.notes}


def regime_report(trajectory, k, tables, times=None, rho_para=3.0, rho_outer=(10.0, 30.0),
                  zeta_tip=2.0):
    """Residuals against the outer, parabolic and tip asymptotics per snapshot."""
    q = tables.q
    aq2 = 2.0 * (q - 1)
    c0 = 1.0 / (np.sqrt(2.0 * aq2) * k)
    shift = trajectory.meta.get("t_shift", 0.0)
    snaps = trajectory.snapshots
    st0 = radial_view(snaps[0][1])
    if times is None:
        use = [(t, s) for t, s in snaps if t > 0]
    else:
        use = [trajectory.snapshot_at(t) for t in times]
    rows, notes = [], []
    for t, st in use:
        st = radial_view(st)
        tb = t + shift
        T = abs(np.log(tb))
        r, v, h = st.r, st.v, st.h
        zeta = r * np.sqrt(T / tb)
        row = {"t": float(t), "t_barrier": float(tb), "abs_log_t": float(T)}
        m = zeta <= zeta_tip
        if m.sum() >= 2:
            B = tables.eval(c0 * zeta[m], 0)[0]
            row["tip_v_sup_rel"] = float(np.max(np.abs(v[m] - B) / B))
            Ht = h[m] / (tb * T)
            row["tip_h_rel"] = float(np.max(np.abs(Ht / ((q - 1) / k ** 2) - 1)))
        else:
            row["tip_v_sup_rel"] = row["tip_h_rel"] = None
        rp = rho_para * np.sqrt(tb)
        if r[-1] >= rp:
            vv = np.interp(rp, r, v)
            hh = np.interp(rp, r, h)
            ref_v = 2 * k * k * (1 + aq2 / rho_para ** 2)
            ref_h = T / (2 * k * k) * (rho_para ** 2 + aq2)
            row["para_v_rel"] = float(abs(T * vv / ref_v - 1))
            row["para_h_rel"] = float(abs((hh / tb) / ref_h - 1))
        else:
            row["para_v_rel"] = row["para_h_rel"] = None
        od = {}
        for rho in rho_outer:
            ro = rho * np.sqrt(tb)
            if ro <= r[-1] and ro <= st0.r[-1]:
                od[str(rho)] = float(np.interp(ro, r, v) / np.interp(ro, st0.r, st0.v) - 1)
            else:
                od[str(rho)] = None
        row["outer_v_dev"] = od
        rows.append(row)
    partial = False
    ts = [r["t"] for r in rows]
    if len(ts) < 2 or max(ts) / min(ts) < 10:
        partial = True
        notes.append("less than one decade of snapshot times")
    for key in ("tip_v_sup_rel", "para_v_rel"):
        if any(r[key] is None for r in rows):
            partial = True
            notes.append(f"{key} unavailable at some times")
    return RegimeReport(rows, partial, notes)
