"""Three-region barrier families for the forward evolution, with numeric certification.

Feasible constants put the barrier box at times far below the double range
(|log t| of order 1e5 or more), so every quantity here is handled in log or
scaled coordinates:

    tau = log t, T = |tau|, X = 1/T, rho = r/sqrt(t), zeta = sqrt(T) rho,
    s = t/r^2, L = |log r|, and h is carried as log h.

Defect margins are returned normalized by their leading term, so a margin
near 1 means the leading (epsilon or D) term dominates and a positive margin
means the required sign holds.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from . import io

KAPPA = 10.0
U_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0)


def _aq2(q):
    return 2.0 * (q - 1)


# ----------------------------------------------------------------------------
# coordinates

@dataclass(frozen=True)
class Coords:
    """Point set in log coordinates; r = 0 is log_r = -inf."""
    log_r: np.ndarray
    log_t: np.ndarray

    def __post_init__(self):
        lr, lt = np.broadcast_arrays(np.asarray(self.log_r, float), np.asarray(self.log_t, float))
        if np.any(lt >= 0):
            raise ValueError("barrier coordinates need t < 1")
        object.__setattr__(self, "log_r", lr)
        object.__setattr__(self, "log_t", lt)

    @classmethod
    def from_rt(cls, r, t):
        r = np.asarray(r, float)
        t = np.asarray(t, float)
        if np.any(r < 0) or np.any(t <= 0):
            raise ValueError("need r >= 0 and t > 0")
        with np.errstate(divide="ignore"):
            return cls(np.log(r), np.log(t))

    @classmethod
    def from_rho(cls, rho, T):
        T = np.asarray(T, float)
        with np.errstate(divide="ignore"):
            return cls(np.log(rho) - 0.5 * T, -T)

    @classmethod
    def from_zeta(cls, zeta, T):
        T = np.asarray(T, float)
        with np.errstate(divide="ignore"):
            return cls(np.log(zeta) - 0.5 * np.log(T) - 0.5 * T, -T)

    @property
    def T(self):
        return -self.log_t

    @property
    def log_rho(self):
        return self.log_r - 0.5 * self.log_t

    @property
    def rho(self):
        with np.errstate(over="ignore"):
            return np.exp(self.log_rho)

    @property
    def zeta(self):
        with np.errstate(over="ignore"):
            return np.exp(self.log_rho + 0.5 * np.log(self.T))

    @property
    def L(self):
        return -self.log_r

    @property
    def s(self):
        with np.errstate(over="ignore"):
            return np.exp(-2.0 * self.log_rho)


# ----------------------------------------------------------------------------
# constants and families

@dataclass(frozen=True)
class BarrierConstants:
    k: float
    p: int
    q: int
    epsilon: float
    delta: float
    outer: dict
    parabolic: dict
    tip: dict

    @property
    def aq2(self):
        return _aq2(self.q)

    @property
    def ap2(self):
        return 2.0 * (self.p - 1)

    @property
    def c0(self):
        return 1.0 / (np.sqrt(2.0 * self.aq2) * self.k)

    def check(self):
        """Ordering constraints on the constants; returns a list of violations."""
        k2, c0 = self.k ** 2, self.c0
        o, pa, tp = self.outer, self.parabolic, self.tip
        bad = []
        if not (o["a_minus_sq"] < k2 < o["a_plus_sq"]):
            bad.append("a_minus^2 < k^2 < a_plus^2")
        if not (0.5 * k2 < pa["ahat_minus_sq"] <= k2 <= pa["ahat_plus_sq"] < 1.5 * k2):
            bad.append("ahat range")
        if not (0.5 / k2 < pa["bhat_minus_sq"] <= 1 / k2 <= pa["bhat_plus_sq"] < 1.5 / k2):
            bad.append("bhat range")
        if not (0.5 * c0 < tp["c_plus"] < c0 < tp["c_minus"] < 1.5 * c0):
            bad.append("c_plus < c0 < c_minus")
        if not (0.5 * c0 < tp["cbar_minus"] < c0 < tp["cbar_plus"] < 1.5 * c0):
            bad.append("cbar_minus < c0 < cbar_plus")
        if pa["D"] <= 0:
            bad.append("D > 0")
        return bad

    def to_dict(self):
        return {"k": self.k, "p": self.p, "q": self.q, "epsilon": self.epsilon,
                "delta": self.delta, "outer": dict(self.outer),
                "parabolic": dict(self.parabolic), "tip": dict(self.tip), "c0": self.c0}


def outer_constants(k, epsilon, delta):
    k2 = k * k
    return {"a_plus_sq": (1 + delta) * k2, "a_minus_sq": (1 - delta) * k2,
            "b_plus_sq": (1 + delta) / k2, "b_minus_sq": (1 - delta) / k2,
            "d_plus": 1 + epsilon, "d_minus": 1 - epsilon}


def _sgn(sign):
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    return "plus" if sign > 0 else "minus"


@dataclass(frozen=True)
class BarrierFamily:
    """One row of barriers. `validity` holds the region bounds in scaled variables."""
    region: str
    constants: BarrierConstants
    soliton: object = None
    validity: dict = field(default_factory=dict)

    def contains(self, c):
        v = self.validity
        if self.region == "outer":
            return (c.log_rho >= np.log(v["rho_min"])) & (c.log_r <= v["log_r_max"])
        if self.region == "parabolic":
            return (c.zeta >= v["zeta_min"]) & (c.rho <= v["rho_max"])
        return c.zeta <= v["zeta_max"]

    def scaled_values(self, c, sign):
        """(v, log(h/(t|log t|))) of the sign barrier at coordinates c."""
        k = self.constants
        a2 = k.aq2
        nm = _sgn(sign)
        if self.region == "outer":
            o = k.outer
            a, b, d = o[f"a_{nm}_sq"], o[f"b_{nm}_sq"], o[f"d_{nm}"]
            s, L = c.s, c.L
            P = 1 + d * a2 * s
            v = a * P / L
            with np.errstate(divide="ignore"):
                lh = np.log(b * L * P) + 2 * c.log_rho - np.log(c.T)
            return v, lh
        X = 1.0 / c.T
        if self.region == "parabolic":
            pa = k.parabolic
            A, Bh, D = pa[f"ahat_{nm}_sq"], pa[f"bhat_{nm}_sq"], pa["D"]
            z2 = c.zeta ** 2
            # v = X vtilde written through zeta so that rho -> 0 stays finite
            v = 2 * A * X + 2 * A * a2 / z2 + sign * D / z2 ** 2
            eta = 0.5 * Bh * (z2 * X + a2) + sign * D / z2
            with np.errstate(invalid="ignore"):
                return v, np.log(eta)
        tp = k.tip
        cc, cb = tp[f"c_{nm}"], tp[f"cbar_{nm}"]
        z = cc * c.zeta
        Bz, Cz, Az = self.soliton.eval(z, 0)
        w = 1 - sign * k.epsilon
        v = Bz + w * X * Cz / cc ** 2
        H = a2 ** 2 * cb ** 2 + X * Az
        return v, np.log(H)

    def values(self, c, sign):
        """(v, log h) of the sign barrier at coordinates c."""
        v, lh = self.scaled_values(c, sign)
        if self.region == "outer":
            # direct form; the scaled one carries log t and cancels it again
            o = self.constants.outer
            nm = _sgn(sign)
            P = 1 + o[f"d_{nm}"] * self.constants.aq2 * c.s
            with np.errstate(divide="ignore"):
                return v, 2 * c.log_r + np.log(o[f"b_{nm}_sq"] * c.L * P)
        return v, lh + c.log_t + np.log(c.T)


@dataclass(frozen=True)
class BarrierSuite:
    outer: BarrierFamily
    parabolic: BarrierFamily
    tip: BarrierFamily
    rho1: float
    zeta1: float
    log_r_star: float
    T_star: float
    constants: BarrierConstants
    search: dict = field(default_factory=dict)

    @property
    def rho2(self):
        return 2.0 * self.rho1

    @property
    def zeta2(self):
        return 2.0 * self.zeta1

    @property
    def r_star(self):
        return float(np.exp(self.log_r_star))

    @property
    def log_t_star(self):
        return -self.T_star

    @property
    def t_star(self):
        # underflows to 0.0 whenever the box lies below the double range
        return float(np.exp(-self.T_star))

    def in_box(self, c):
        return (c.log_r <= self.log_r_star + 1e-12) & (c.log_t <= -self.T_star + 1e-9)

    def with_constants(self, **changes):
        """Copy with some parabolic/tip constants replaced (used for negative controls)."""
        k = self.constants
        pa = dict(k.parabolic)
        tp = dict(k.tip)
        for key, val in changes.items():
            if key in pa:
                pa[key] = val
            elif key in tp:
                tp[key] = val
            else:
                raise KeyError(key)
        k2 = replace(k, parabolic=pa, tip=tp)
        return replace(self, constants=k2, outer=replace(self.outer, constants=k2),
                       parabolic=replace(self.parabolic, constants=k2),
                       tip=replace(self.tip, constants=k2))

    def to_dict(self):
        return {"constants": self.constants.to_dict(), "rho1": self.rho1, "rho2": self.rho2,
                "zeta1": self.zeta1, "zeta2": self.zeta2, "log_r_star": self.log_r_star,
                "r_star": self.r_star, "T_star": self.T_star, "log_t_star": self.log_t_star,
                "t_star": self.t_star, "q_tables": self.tip.soliton.q, "search": self.search}

    def to_json(self, path):
        io.write_json(path, self.to_dict())


def _families(k, tables, rho1, zeta1, log_r_star):
    return (BarrierFamily("outer", k, None, {"rho_min": rho1, "log_r_max": log_r_star}),
            BarrierFamily("parabolic", k, None, {"zeta_min": zeta1, "rho_max": 2 * rho1}),
            BarrierFamily("tip", k, tables, {"zeta_max": 2 * zeta1}))


# ----------------------------------------------------------------------------
# evaluation

def eval_suite_log(suite, c):
    """(v-, v+, log h-, log h+) at Coords c, with envelopes in the overlaps."""
    if not np.all(suite.in_box(c)):
        raise ValueError("point outside the barrier validity box")
    fams = (suite.outer, suite.parabolic, suite.tip)
    shape = c.log_r.shape
    vm = np.full(shape, -np.inf)
    vp = np.full(shape, np.inf)
    hm = np.full(shape, -np.inf)
    hp = np.full(shape, np.inf)
    hit = np.zeros(shape, bool)
    for f in fams:
        m = f.contains(c)
        if not m.any():
            continue
        cm = Coords(c.log_r[m], c.log_t[m])
        a, la = f.values(cm, -1)
        b, lb = f.values(cm, 1)
        vm[m] = np.maximum(vm[m], a)
        hm[m] = np.maximum(hm[m], la)
        vp[m] = np.minimum(vp[m], b)
        hp[m] = np.minimum(hp[m], lb)
        hit |= m
    if not hit.all():
        raise ValueError("point not covered by any barrier region")
    return vm, vp, hm, hp


def eval_suite(suite, r, t=None):
    """(v-, v+, h-, h+) at (r, t); r may instead be a Coords record.

    h is exp(log h), which underflows to 0 for boxes below the double range;
    use eval_suite_log there.
    """
    c = r if isinstance(r, Coords) else Coords.from_rt(r, t)
    vm, vp, hm, hp = eval_suite_log(suite, c)
    with np.errstate(under="ignore"):
        return vm, vp, np.exp(hm), np.exp(hp)


# ----------------------------------------------------------------------------
# defects
#
# Each function returns sign * (normalized d_t(barrier) - G) so that a
# positive value is the required sign for both the upper (sign=+1) and the
# lower (sign=-1) barrier.

def _outer_jets(k, sign, L, s):
    o = k.outer
    nm = _sgn(sign)
    a, b, d = o[f"a_{nm}_sq"], o[f"b_{nm}_sq"], o[f"d_{nm}"]
    a2 = k.aq2
    P = 1 + d * a2 * s
    e = d * a2 * s
    v = a * P / L
    V1 = a * (P / L ** 2 - 2 * e / L)                   # r v_r
    V2 = a * (2 * P / L ** 3 - 4 * e / L ** 2 + 4 * e / L) - V1   # r^2 v_rr
    r2vt = a * d * a2 / L
    eta = b * L * P                                      # h / r^2
    E1 = b * (-P - 2 * e * L)
    E2 = b * (4 * e + 4 * e * L)
    ht = b * d * a2 * L
    return dict(v=v, V1=V1, V2=V2, r2vt=r2vt, eta=eta, E1=E1, E2=E2, ht=ht)


def outer_margin_v(k, sign, L, s, u, eta_star):
    j = _outer_jets(k, sign, L, s)
    v, V1, V2 = j["v"], j["V1"], j["V2"]
    a2 = k.aq2
    r2G = (v * V2 - 0.5 * V1 ** 2 + (k.q - 1 - v) * V1 + a2 * v * (1 - v)
           - 2 * k.p * u * v / eta_star)
    return sign * (j["r2vt"] - r2G) / (k.epsilon * a2 * v)


def outer_margin_h(k, sign, L, s, u, v_star):
    j = _outer_jets(k, sign, L, s)
    eta, E1, E2 = j["eta"], j["E1"], j["E2"]
    G = v_star * (2 * eta + 3 * E1 + E2) + (k.q - 1 + v_star) * (2 * eta + E1) - 4 * u - k.ap2
    return sign * (j["ht"] - G) / (k.epsilon * k.aq2 * eta)


def _para_consts(k, sign):
    pa = k.parabolic
    nm = _sgn(sign)
    return pa[f"ahat_{nm}_sq"], pa[f"bhat_{nm}_sq"], pa["D"]


def para_margin_v(k, sign, rho, X, u, eta_star):
    """T^2 rho^4 r^2 (d_t v - G) / (D (aq2 + 2 rho^2)), expanded in X = 1/|tau|.

    eta_star is h*/(t|tau|).
    """
    A, _, D = _para_consts(k, sign)
    a, p = k.aq2, k.p
    r2 = rho ** 2
    cpl = u / eta_star
    lead = D * (a + 2 * r2)
    free = (2 * A * (r2 + a) * r2 ** 2 * (1 + 2 * p * cpl)
            + 4 * A ** 2 * (a * r2 ** 2 + 2 * a ** 2 * r2 + a ** 3 - 8 * a * r2 - 6 * a ** 2))
    lin = D * (4 * A * a * (a - 12) / r2 + 4 * A * (a - 12) + 2 * r2 * (1 + p * cpl))
    quad = D ** 2 * (a - 16) / r2 ** 2
    # the X-terms are written through zeta^2 = r2 / X to stay finite as rho -> 0
    return (lead + sign * free + X * lin + sign * X ** 2 * quad) / lead


def para_margin_h(k, sign, rho, X, u, vt_star):
    """rho^4 (d_t h - G) / (D (aq2 + 2 rho^2)); vt_star = |tau| v*."""
    _, Bh, D = _para_consts(k, sign)
    a = k.aq2
    r2 = rho ** 2
    lead = D * (a + 2 * r2)
    free = (-0.5 * Bh * r2 ** 2 * (a + r2) + 2 * (k.p - 1) * r2 ** 2 + 4 * u * r2 ** 2
            - 2 * Bh * r2 ** 2 * vt_star)
    return (lead - 4 * D * X * vt_star + sign * free) / lead


def para_vt(k, sign, rho, X):
    A, _, D = _para_consts(k, sign)
    return 2 * A * (1 + k.aq2 / rho ** 2) + sign * D * X / rho ** 4


def para_eta(k, sign, rho, X):
    _, Bh, D = _para_consts(k, sign)
    return 0.5 * Bh * (rho ** 2 + k.aq2) + sign * D * X / rho ** 2


def _tip_jets(k, tables, sign, zeta):
    tp = k.tip
    nm = _sgn(sign)
    c, cb = tp[f"c_{nm}"], tp[f"cbar_{nm}"]
    z = c * np.asarray(zeta, float)
    B, C, A = tables.eval(z, 0)
    dB, dC, dA = tables.eval(z, 1)
    d2B, d2C, d2A = tables.eval(z, 2)
    small = z < 1e-6
    zz = np.where(small, 1.0, z)
    Bz = np.where(small, d2B, dB / zz)           # B'/z
    Cz = np.where(small, 0.0, dC / zz)           # C'/z
    Az = np.where(small, d2A, dA / zz)           # A'/z
    a2 = k.aq2
    Qz = np.where(small, 0.0,
                  (C * d2C - 0.5 * dC ** 2 - C * Cz) / zz ** 2 - a2 * (C / zz ** 2) ** 2)
    F3 = np.where(small, 0.0, (C - 0.5 * z * dC) / zz ** 2)
    return dict(c=c, cb=cb, z=z, B=B, C=C, A=A, dA=dA, d2A=d2A, Bz=Bz, Cz=Cz, Az=Az,
                Qz=Qz, F3=F3, w=1 - sign * k.epsilon)


def tip_v(k, tables, sign, zeta, X):
    j = _tip_jets(k, tables, sign, zeta)
    return j["B"] + j["w"] * X * j["C"] / j["c"] ** 2


def tip_H(k, tables, sign, zeta, X):
    nm = _sgn(sign)
    cb = k.tip[f"cbar_{nm}"]
    _, _, A = tables.eval(k.tip[f"c_{nm}"] * np.asarray(zeta, float), 0)
    return k.aq2 ** 2 * cb ** 2 + X * A


def tip_margin_v(k, tables, sign, zeta, X, u, H_star):
    """|tau| theta (d_t v - G) / zeta^2 over its epsilon term.

    Uses the profile identities G(B) = 0 and DG_B[C] = -zeta B'/2 exactly,
    which is what keeps the 1/|tau| terms visible at large |tau|.
    """
    j = _tip_jets(k, tables, sign, zeta)
    c, w = j["c"], j["w"]
    e1 = -0.5 * c ** 2 * j["Bz"]
    v = j["B"] + w * X * j["C"] / c ** 2
    zeta = np.asarray(zeta, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        cpl = np.where(u == 0, 0.0, 2 * k.p * u * v / (H_star * zeta ** 2))
    F2 = e1 - 0.5 * w * j["Cz"] - w ** 2 * j["Qz"]
    F3 = w * j["F3"]
    # |tau| -> inf limit (X = 0) drops the coupling even at r = 0
    Xc = np.where(X == 0, 0.0, X * np.where(X == 0, 1.0, cpl))
    return 1 + sign * (X * F2 + Xc + X ** 2 * F3) / (k.epsilon * e1)


def tip_margin_h(k, tables, sign, zeta, X, u, dv):
    """(d_t h - G)/|tau| over a4 |cbar^2 - c^2|; dv = v* - B(c zeta)."""
    j = _tip_jets(k, tables, sign, zeta)
    c, cb = j["c"], j["cb"]
    a4 = k.aq2 ** 2
    lead = a4 * (cb ** 2 - c ** 2)
    val = (lead - dv * c ** 2 * (j["d2A"] + j["Az"])
           + X * (j["A"] - a4 * cb ** 2 - 0.5 * j["z"] * j["dA"] + 4 * u + k.ap2)
           - X ** 2 * 0.5 * j["z"] * j["dA"])
    return sign * val / abs(lead)


def profile_identity_residuals(tables, zeta):
    """Max residuals of the profile identities used by the tip margins."""
    from .solitons import linearized_op, steady_residual
    z = np.asarray(zeta, float)
    z = z[(z > 1e-3) & (z <= tables.zeta[-1])]
    B, C, A = tables.eval(z, 0)
    dB, dC, dA = tables.eval(z, 1)
    d2B, d2C, d2A = tables.eval(z, 2)
    q = tables.q
    a2 = tables.aq2
    rb = steady_residual(z, B, dB, d2B, q)
    rc = linearized_op(z, B, dB, d2B, C, dC, d2C, q) + 0.5 * z * dB
    ra = B * d2A + (0.5 * a2 + B) * dA / z - a2 ** 2
    return {"B": float(np.max(np.abs(rb))), "C": float(np.max(np.abs(rc))),
            "A": float(np.max(np.abs(ra)))}


# ----------------------------------------------------------------------------
# certification

@dataclass
class MarginReport:
    entries: dict
    n_samples: int
    passed: bool
    extra: dict = field(default_factory=dict)

    @property
    def worst(self):
        name = min(self.entries, key=lambda n: self.entries[n]["min_margin"])
        return name, self.entries[name]

    def to_dict(self):
        return {"passed": self.passed, "n_samples": self.n_samples,
                "entries": self.entries, "extra": self.extra}


class _Acc:
    def __init__(self):
        self.entries = {}
        self.n = 0

    def add(self, name, margin, loc):
        margin = np.asarray(margin, float)
        margin = np.where(np.isnan(margin), -np.inf, margin)
        self.n += margin.size
        i = int(np.argmin(margin))
        m = float(margin.flat[i])
        loc = {key: float(np.broadcast_to(val, margin.shape).flat[i]) for key, val in loc.items()}
        e = self.entries.get(name)
        if e is None:
            self.entries[name] = {"min_margin": m, "argmin": loc, "n": int(margin.size)}
        else:
            e["n"] += int(margin.size)
            if m < e["min_margin"]:
                e["min_margin"] = m
                e["argmin"] = loc

    def report(self, extra=None):
        ok = all(e["min_margin"] > 0 for e in self.entries.values())
        return MarginReport(self.entries, self.n, ok, extra or {})


def _x_grid(T_star, n, decades=8):
    X = 1.0 / (T_star * np.geomspace(1.0, 10.0 ** decades, n - 1))
    return np.concatenate([X, [0.0]])


def _sweep_outer(acc, suite, n_L, n_s, us):
    k = suite.constants
    L = -suite.log_r_star * np.geomspace(1.0, 1e6, n_L)[:, None]
    s = np.linspace(0.0, suite.rho1 ** -2, n_s)[None, :]
    loc = {"L": L, "s": s}
    P = lambda sg: _outer_jets(k, sg, L, s)
    jm, jp = P(-1), P(1)
    for u in us:
        for eta_star in (jm["eta"], np.sqrt(jm["eta"] * KAPPA * jp["eta"]), KAPPA * jp["eta"]):
            for sg in (1, -1):
                acc.add(f"outer/v{'+' if sg > 0 else '-'}",
                        outer_margin_v(k, sg, L, s, u, eta_star), dict(loc, u=u))
        for v_star in (jm["v"], 0.5 * (jm["v"] + jp["v"]), jp["v"]):
            for sg in (1, -1):
                acc.add(f"outer/h{'+' if sg > 0 else '-'}",
                        outer_margin_h(k, sg, L, s, u, v_star), dict(loc, u=u))


def _sweep_para(acc, suite, n_X, n_rho, us):
    k = suite.constants
    X = _x_grid(suite.T_star, n_X)[:, None]
    lo = np.maximum(suite.zeta1 * np.sqrt(X), suite.rho2 * 1e-6)
    t = np.linspace(0.0, 1.0, n_rho)[None, :]
    rho = lo * (suite.rho2 / lo) ** t
    loc = {"X": X, "rho": rho}
    em, ep = para_eta(k, -1, rho, X), para_eta(k, 1, rho, X)
    vm, vp = para_vt(k, -1, rho, X), para_vt(k, 1, rho, X)
    for u in us:
        for eta_star in (em, np.sqrt(em * KAPPA * ep), KAPPA * ep):
            for sg in (1, -1):
                acc.add(f"parabolic/v{'+' if sg > 0 else '-'}",
                        para_margin_v(k, sg, rho, X, u, eta_star), dict(loc, u=u))
        for vt_star in (vm, 0.5 * (vm + vp), vp):
            for sg in (1, -1):
                acc.add(f"parabolic/h{'+' if sg > 0 else '-'}",
                        para_margin_h(k, sg, rho, X, u, vt_star), dict(loc, u=u))


def _sweep_tip(acc, suite, n_X, n_z, us):
    k = suite.constants
    tb = suite.tip.soliton
    X = _x_grid(suite.T_star, n_X)[:, None]
    zeta = np.concatenate([[0.0], np.geomspace(suite.zeta2 * 1e-7, suite.zeta2, n_z - 1)])[None, :]
    loc = {"X": X, "zeta": zeta}
    Hm, Hp = tip_H(k, tb, -1, zeta, X), tip_H(k, tb, 1, zeta, X)
    vm, vp = tip_v(k, tb, -1, zeta, X), tip_v(k, tb, 1, zeta, X)
    for u in us:
        for H_star in (Hm, np.sqrt(Hm * KAPPA * Hp), KAPPA * Hp):
            for sg in (1, -1):
                acc.add(f"tip/v{'+' if sg > 0 else '-'}",
                        tip_margin_v(k, tb, sg, zeta, X, u, H_star), dict(loc, u=u))
        for sg in (1, -1):
            own = tb.eval(k.tip[f"c_{_sgn(sg)}"] * zeta, 0)[0]
            for v_star in (vm, 0.5 * (vm + vp), vp):
                acc.add(f"tip/h{'+' if sg > 0 else '-'}",
                        tip_margin_h(k, tb, sg, zeta, X, u, v_star - own), dict(loc, u=u))


def certify_defects(suite, n=(60, 40), us=U_SWEEP, tip_lower_us=None):
    """Sign sweep of the sub/supersolution inequalities on all three regions.

    n = (points along the time-like axis, points along the space-like axis)
    per region. The outer sweep covers L >= |log r_star| and 0 <= t/r^2 <=
    rho1^-2, a superset of the outer region inside the box. The tip sweep
    includes r = 0. `tip_lower_us` restricts u* for the tip lower barrier
    only (None uses `us`).
    """
    nt, nx = n
    acc = _Acc()
    _sweep_outer(acc, suite, nt, nx, us)
    _sweep_para(acc, suite, nt, nx, us)
    tl = us if tip_lower_us is None else tip_lower_us
    if tuple(tl) == tuple(us):
        _sweep_tip(acc, suite, nt, nx, us)
    else:
        _sweep_tip_split(acc, suite, nt, nx, us, tl)
    zeta = np.geomspace(1e-3, suite.tip.soliton.zeta[-1], 400)
    extra = {"profile_identities": profile_identity_residuals(suite.tip.soliton, zeta),
             "u_sweep": list(us), "tip_lower_u_sweep": list(tl), "kappa": KAPPA}
    return acc.report(extra)


def _sweep_tip_split(acc, suite, nt, nx, us, tl):
    keep = _Acc()
    _sweep_tip(keep, suite, nt, nx, us)
    low = _Acc()
    _sweep_tip(low, suite, nt, nx, tl)
    for name, e in keep.entries.items():
        if name == "tip/v-":
            e = low.entries[name]
        acc.entries[name] = e
        acc.n += e["n"]


def certify_gluing(suite, T=None):
    """The strict interface orderings at rho1, rho2 and zeta1, zeta2.

    At the inner edge of the outer family of each pair the inner family must
    lie strictly inside the outer one, and at the outer edge of the inner
    family the reverse. Margins are relative differences. T defaults to 100
    values of |log t| log-spaced over [T_star, 1e6 T_star].
    """
    k = suite.constants
    if T is None:
        T = suite.T_star * np.geomspace(1.0, 1e6, 100)
    T = np.asarray(T, float)
    acc = _Acc()
    outer, para, tip = suite.outer, suite.parabolic, suite.tip

    def comp(name, inner, outr, c, loc):
        # entries: (inner-, inner+) strictly inside (outer-, outer+) or the reverse
        im, ilm = inner.scaled_values(c, -1)
        ip, ilp = inner.scaled_values(c, 1)
        om, olm = outr.scaled_values(c, -1)
        op, olp = outr.scaled_values(c, 1)
        if name.endswith("in"):
            acc.add(f"{name}/v-", (im - om) / np.abs(om), loc)
            acc.add(f"{name}/v+", (op - ip) / np.abs(op), loc)
            acc.add(f"{name}/h-", ilm - olm, loc)
            acc.add(f"{name}/h+", olp - ilp, loc)
        else:
            acc.add(f"{name}/v-", (om - im) / np.abs(im), loc)
            acc.add(f"{name}/v+", (ip - op) / np.abs(ip), loc)
            acc.add(f"{name}/h-", olm - ilm, loc)
            acc.add(f"{name}/h+", ilp - olp, loc)

    comp("rho1/in", para, outer, Coords.from_rho(suite.rho1, T), {"T": T})
    comp("rho2/out", para, outer, Coords.from_rho(suite.rho2, T), {"T": T})
    comp("zeta1/in", tip, para, Coords.from_zeta(suite.zeta1, T), {"T": T})
    comp("zeta2/out", tip, para, Coords.from_zeta(suite.zeta2, T), {"T": T})
    return acc.report({"T_range": [float(T.min()), float(T.max())]})


# ----------------------------------------------------------------------------
# constant search

RHO1_GRID = (2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0)
LSTAR_GRID = (10.0, 15.0, 20.0, 30.0, 40.0, 60.0, 80.0, 120.0, 200.0, 400.0)


def _straddle(g1, g2):
    # choose m with m g1 > 1 > m g2 (or the reverse) symmetrically in log
    return 1.0 / np.sqrt(g1 * g2)


def _parabolic_constants(k, rho1, epsilon):
    a2 = k.aq2
    o = k.outer
    x1, x2 = a2 / rho1 ** 2, a2 / (2 * rho1) ** 2
    gp = [(1 + o["d_plus"] * x) / (1 + x) for x in (x1, x2)]
    gm = [(1 + o["d_minus"] * x) / (1 + x) for x in (x1, x2)]
    mp, mm = _straddle(*gp), _straddle(*gm)
    return {"ahat_plus_sq": o["a_plus_sq"] / mp, "ahat_minus_sq": o["a_minus_sq"] / mm,
            "bhat_plus_sq": o["b_plus_sq"] / mp, "bhat_minus_sq": o["b_minus_sq"] / mm}


def _bisect(f, lo, hi, n=200):
    flo = f(lo)
    for _ in range(n):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _tip_constants(k, tables, zeta1):
    """Tip scales straddling the parabolic row on [zeta1, 2 zeta1] in the |tau| -> inf limit."""
    a2 = k.aq2
    pa = k.parabolic
    D = pa["D"]
    z1, z2 = zeta1, 2 * zeta1
    c0 = k.c0

    def F(c, z, A, sign):
        B = tables.eval(c * z, 0)[0]
        return z ** 2 * B - 2 * A * a2 - sign * D / z ** 2

    out = {"epsilon": k.epsilon}
    for sign, nm in ((1, "plus"), (-1, "minus")):
        A = pa[f"ahat_{nm}_sq"]
        out[f"c_{nm}"] = _bisect(lambda c: F(c, z1, A, sign) + F(c, z2, A, sign),
                                 0.25 * c0, 4 * c0)
    shift = 0.5 * D * (z1 ** -2 + z2 ** -2)
    for sign, nm in ((1, "plus"), (-1, "minus")):
        val = 0.5 * a2 * pa[f"bhat_{nm}_sq"] + sign * shift
        out[f"cbar_{nm}"] = float(np.sqrt(val) / a2) if val > 0 else float("nan")
    return out


def _outer_only_suite(k, tables, rho1, log_r_star, T_star=1e6):
    fams = _families(k, tables, rho1, 1.0, log_r_star)
    return BarrierSuite(*fams, rho1, 1.0, log_r_star, T_star, k)


def build_suite(k, p, q, epsilon, delta, tables, n=(40, 30), max_T_doublings=60,
                tip_lower_us=(0.0,)):
    """Deterministic coarse-to-fine search for a certified suite.

    Order: rho1 and r_star from the outer sweep, the parabolic amplitudes
    from the outer/parabolic straddle, D by doubling until the parabolic
    sweep passes in the |tau| -> inf limit, zeta1 = sqrt(D/eps), the tip
    scales from the parabolic/tip straddle, then T_star by doubling until
    every sweep and the gluing pass. The search certifies the tip lower
    barrier with u* restricted to `tip_lower_us` (see certify_defects).
    """
    if not (0 < epsilon <= 0.2 and 0 < delta <= 0.2):
        raise ValueError("epsilon and delta must lie in (0, 0.2]")
    if tables.q != q:
        raise ValueError("soliton tables are for a different q")
    if k <= 0:
        raise ValueError("k must be positive")
    log = {"tried": []}
    empty = {"D": 1.0}
    for rho1 in RHO1_GRID:
        k0 = BarrierConstants(k, p, q, epsilon, delta, outer_constants(k, epsilon, delta),
                              empty, {})
        log_r_star = None
        for Ls in LSTAR_GRID:
            acc = _Acc()
            s0 = _outer_only_suite(k0, tables, rho1, -Ls)
            _sweep_outer(acc, s0, n[0], n[1], U_SWEEP)
            if acc.report().passed:
                log_r_star = -Ls
                break
        if log_r_star is None:
            log["tried"].append({"rho1": rho1, "fail": "outer"})
            continue
        pa = _parabolic_constants(k0, rho1, epsilon)
        # D: smallest power of sqrt(2) for which the parabolic sweep passes as |tau| -> inf
        D = 1.0
        ok = False
        for _ in range(80):
            kk = replace(k0, parabolic=dict(pa, D=D))
            acc = _Acc()
            s1 = BarrierSuite(*_families(kk, tables, rho1, np.sqrt(D / epsilon), log_r_star),
                              rho1, np.sqrt(D / epsilon), log_r_star, np.inf, kk)
            _sweep_para(acc, s1, 2, n[1], U_SWEEP)
            if acc.report().passed:
                ok = True
                break
            D *= np.sqrt(2.0)
        if not ok:
            log["tried"].append({"rho1": rho1, "fail": "parabolic D"})
            continue
        zeta1 = float(np.sqrt(D / epsilon))
        kk = replace(k0, parabolic=dict(pa, D=D))
        tp = _tip_constants(kk, tables, zeta1)
        kk = replace(kk, tip=tp)
        bad = kk.check()
        if bad:
            log["tried"].append({"rho1": rho1, "fail": "constants", "violations": bad})
            continue
        T_star = 16.0
        for _ in range(max_T_doublings):
            suite = BarrierSuite(*_families(kk, tables, rho1, zeta1, log_r_star),
                                 rho1, zeta1, log_r_star, T_star, kk)
            rd = certify_defects(suite, n, tip_lower_us=tip_lower_us)
            rg = certify_gluing(suite, suite.T_star * np.geomspace(1.0, 1e6, 20))
            if rd.passed and rg.passed:
                log["tried"].append({"rho1": rho1, "ok": True})
                log.update({"D": D, "T_star": T_star, "L_star": -log_r_star,
                            "tip_lower_us": list(tip_lower_us)})
                return replace(suite, search=log)
            T_star *= 2.0
        w = min(list(rd.entries.items()) + list(rg.entries.items()),
                key=lambda e: e[1]["min_margin"])
        log["tried"].append({"rho1": rho1, "fail": "T_star", "worst": [w[0], w[1]]})
    raise RuntimeError("no feasible barrier constants within the search budget: "
                       + io.dumps(log["tried"]))


# ----------------------------------------------------------------------------
# trapping monitor

@dataclass(frozen=True)
class TrapResult:
    status: str            # "Trapped", "Crossed" or "OutsideBox"
    r: float = None
    which: str = None
    on_parabolic_boundary: bool = None


def trapping_monitor(state, suite, t, first_time=False, rtol=1e-12):
    """Compare a radial state against the suite at time t.

    Nodes with r in (0, r_star] are compared pointwise; at r = 0 the
    comparison uses L = (1 - v)/r^2 through its limit -v_rr/2. A crossing at
    r = r_star, or any crossing when `first_time` is set, lies on the
    parabolic boundary of the box.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    log_t = np.log(t)
    if log_t > -suite.T_star:
        return TrapResult("OutsideBox")
    r = np.asarray(state.r, float)
    m = r <= suite.r_star * (1 + rtol)
    if not m.any():
        return TrapResult("OutsideBox")
    rr = r[m]
    v = np.asarray(state.v, float)[m]
    h = np.asarray(state.h, float)[m]
    c = Coords.from_rt(rr, np.full(rr.shape, t))
    vm, vp, lhm, lhp = eval_suite_log(suite, c)
    with np.errstate(divide="ignore"):
        lh = np.log(h)
    checks = [("v-", v < vm), ("v+", v > vp), ("h-", lh < lhm), ("h+", lh > lhp)]
    if rr[0] == 0 and len(rr) > 2:
        # L comparison at the tip from the one-sided second difference
        Lstate = (1 - v[1]) / rr[1] ** 2
        lo = (1 - vp[1]) / rr[1] ** 2
        hi = (1 - vm[1]) / rr[1] ** 2
        checks[0][1][0] = Lstate > hi
        checks[1][1][0] = Lstate < lo
    for which, bad in checks:
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            on_b = bool(first_time or abs(rr[i] - suite.r_star) <= rtol * suite.r_star)
            return TrapResult("Crossed", float(rr[i]), which, on_b)
    return TrapResult("Trapped")


def desk_suite(k, p, q, epsilon, delta, tables, rho1=2.0, D=1.0, log_r_star=-2.0,
               T_star=4.0):
    """Suite with the closed-form constant choices on a box reachable in doubles.

    Not certified: the defect inequalities are only proved for |log r| and
    |log t| far beyond this box. Used to drive the forward experiments.
    """
    if tables.q != q:
        raise ValueError("soliton tables are for a different q")
    if D <= 0 or rho1 <= 0:
        raise ValueError("D and rho1 must be positive")
    k0 = BarrierConstants(k, p, q, epsilon, delta, outer_constants(k, epsilon, delta),
                          {"D": D}, {})
    pa = dict(_parabolic_constants(k0, rho1, epsilon), D=D)
    kk = replace(k0, parabolic=pa)
    zeta1 = float(np.sqrt(D / epsilon))
    kk = replace(kk, tip=_tip_constants(kk, tables, zeta1))
    bad = kk.check()
    if bad:
        raise ValueError(f"desk constants violate ordering: {bad}")
    fams = _families(kk, tables, rho1, zeta1, log_r_star)
    return BarrierSuite(*fams, rho1, zeta1, log_r_star, T_star, kk,
                        search={"certified": False, "D": D})
