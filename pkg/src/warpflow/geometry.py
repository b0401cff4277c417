"""Doubly warped product metrics ds^2 + psi^2 g_{S^p} + phi^2 g_{S^q} on grids.

Curvatures, curvature norm, and end classification.
"""
from dataclasses import dataclass, field

import numpy as np

from ._fd import _onesided_weights, cumtrapz0, deriv
from . import io


@dataclass(frozen=True)
class GridFunction:
    nodes: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.nodes, float)
        y = np.asarray(self.values, float)
        if x.ndim != 1 or x.shape != y.shape:
            raise ValueError("nodes and values must be 1-d arrays of equal length")
        if len(x) < 4:
            raise ValueError("grid too short: need at least 4 nodes")
        if np.any(np.diff(x) <= 0):
            raise ValueError("nodes must be strictly increasing")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise ValueError("non-finite values")
        object.__setattr__(self, "nodes", x)
        object.__setattr__(self, "values", y)


def differentiate(f, order=1):
    """Nonuniform centered differences, one-sided second order at the ends."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    return GridFunction(f.nodes, deriv(f.nodes, f.values, order))


@dataclass(frozen=True)
class WarpedProfile:
    """Sampled profile. Arclength gauge when sprime is None.

    In the x-gauge the nodes are x values and sprime = ds/dx is carried
    along; s is then recovered by integrating sprime from s0.
    `ends` gives the parity treatment at each end: None (open, one-sided
    stencils), "closed" (a fiber collapses smoothly there), or "mirror"
    (reflection-symmetric end, both radii even).
    """
    p: int
    q: int
    s: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    grad_bound_C: float = 1.0
    sprime: np.ndarray = None
    s0: float = 0.0
    ends: tuple = (None, None)
    check_gradient: bool = False
    grad_tol: float = 1e-6

    def __post_init__(self):
        for name in ("s", "psi", "phi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))
        if self.sprime is not None:
            object.__setattr__(self, "sprime", np.asarray(self.sprime, float))
        # at a closed end, a radius at roundoff level is a collapsed fiber
        for j, e in enumerate(self.ends):
            if e == "closed":
                idx = 0 if j == 0 else -1
                for nm in ("psi", "phi"):
                    f = getattr(self, nm)
                    if f[idx] != 0 and abs(f[idx]) <= 1e-12 * np.max(np.abs(f)):
                        f = f.copy()
                        f[idx] = 0.0
                        object.__setattr__(self, nm, f)
        if int(self.p) != self.p or self.p < 0:
            raise ValueError("p must be an integer >= 0")
        if int(self.q) != self.q or self.q < 2:
            raise ValueError("q must be an integer >= 2")
        if self.grad_bound_C < 1:
            raise ValueError("grad_bound_C must be >= 1")
        GridFunction(self.s, self.psi)
        GridFunction(self.s, self.phi)
        if self.sprime is not None:
            GridFunction(self.s, self.sprime)
            if np.any(self.sprime <= 0):
                raise ValueError("sprime must be positive")
        if np.any(self.psi < 0) or np.any(self.phi < 0):
            raise ValueError("warping functions must be nonnegative")
        if np.any(self.psi[1:-1] <= 0) or np.any(self.phi[1:-1] <= 0):
            i = int(np.flatnonzero((self.psi[1:-1] <= 0) | (self.phi[1:-1] <= 0))[0]) + 1
            raise ValueError(f"zero radius at interior node {i} (s={self.s[i]!r})")
        if self.check_gradient:
            d = self.derivatives()
            for nm, g in (("psi_s", d["psi_s"]), ("phi_s", d["phi_s"])):
                bad = np.flatnonzero(g[1:-1] ** 2 > self.grad_bound_C + self.grad_tol)
                if bad.size:
                    i = int(bad[0]) + 1
                    raise ValueError(f"gradient bound violated for {nm} at node {i}")

    @property
    def x_gauge(self):
        return self.sprime is not None

    @property
    def arclength(self):
        if self.sprime is None:
            return self.s
        return self.s0 + cumtrapz0(self.s, self.sprime)

    def parities(self):
        """Ghost-node parity for (psi, phi) at (left, right)."""
        out = {"psi": [None, None], "phi": [None, None], "sprime": [None, None]}
        for j, e in enumerate(self.ends):
            if e is None:
                continue
            idx = 0 if j == 0 else -1
            for nm, f in (("psi", self.psi), ("phi", self.phi)):
                if e == "mirror" or f[idx] > 0:
                    out[nm][j] = "even"
                else:
                    out[nm][j] = "odd"
            out["sprime"][j] = "even"
        return out

    def derivatives(self):
        """Arclength derivatives psi_s, psi_ss, phi_s, phi_ss (and sprime data)."""
        par = self.parities()
        x = self.s
        res = {}
        if self.sprime is None:
            for nm, f in (("psi", self.psi), ("phi", self.phi)):
                l, r = par[nm]
                res[nm + "_s"] = deriv(x, f, 1, l, r)
                res[nm + "_ss"] = deriv(x, f, 2, l, r)
            return res
        sp = self.sprime
        lsp, rsp = par["sprime"]
        sp_x = deriv(x, sp, 1, lsp, rsp)
        for nm, f in (("psi", self.psi), ("phi", self.phi)):
            l, r = par[nm]
            fx = deriv(x, f, 1, l, r)
            fxx = deriv(x, f, 2, l, r)
            res[nm + "_s"] = fx / sp
            res[nm + "_ss"] = (fxx - fx * sp_x / sp) / sp ** 2
        return res

    def reversed(self):
        """Same metric with the interval orientation flipped."""
        s = -self.s[::-1]
        sp = None if self.sprime is None else self.sprime[::-1]
        return WarpedProfile(self.p, self.q, s, self.psi[::-1], self.phi[::-1],
                             self.grad_bound_C, sp, -self.arclength[-1],
                             self.ends[::-1])


@dataclass(frozen=True)
class CurvatureTuple:
    L_phi: np.ndarray
    L_psi: np.ndarray
    K_phi: np.ndarray
    K_psi: np.ndarray
    J: np.ndarray

    def at(self, i):
        return tuple(float(getattr(self, k)[i]) for k in ("L_phi", "L_psi", "K_phi", "K_psi", "J"))

    def __len__(self):
        return len(self.J)


def _region_mask(s, region):
    if region is None:
        return np.ones(len(s), bool)
    lo, hi = region
    m = (s >= lo) & (s <= hi)
    if not m.any():
        raise ValueError("empty region")
    return m


def curvatures_from_derivs(psi, phi, psi_s, psi_ss, phi_s, phi_ss):
    return CurvatureTuple(
        L_phi=(1.0 - phi_s ** 2) / phi ** 2,
        L_psi=(1.0 - psi_s ** 2) / psi ** 2,
        K_phi=-phi_ss / phi,
        K_psi=-psi_ss / psi,
        J=-phi_s * psi_s / (phi * psi),
    )


def compute_curvatures(profile, region=None):
    """The five sectional curvatures at the nodes of `region` (all nodes by default)."""
    s = profile.arclength
    m = _region_mask(s, region)
    bad = np.flatnonzero(m & ((profile.psi <= 0) | (profile.phi <= 0)))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"zero radius at node {i} (s={s[i]!r}) inside evaluation region")
    d = profile.derivatives()
    c = curvatures_from_derivs(profile.psi[m], profile.phi[m], d["psi_s"][m],
                               d["psi_ss"][m], d["phi_s"][m], d["phi_ss"][m])
    return c


def rm_norm(curv, p, q):
    """Root-sum-square of the curvatures weighted by plane multiplicities."""
    return np.sqrt(0.5 * q * (q - 1) * curv.L_phi ** 2 + 0.5 * p * (p - 1) * curv.L_psi ** 2
                   + q * curv.K_phi ** 2 + p * curv.K_psi ** 2 + p * q * curv.J ** 2)


def sup_riem(profile, region=None):
    s = profile.arclength
    m = _region_mask(s, region)
    if not m.any():
        raise ValueError("empty region")
    c = compute_curvatures(profile, region)
    return float(np.max(rm_norm(c, profile.p, profile.q)))


@dataclass
class EndClassification:
    tag: str
    smoothness_defects: list = field(default_factory=list)


def _length_diverges(profile, end):
    # s' growing at least like 1/d toward the end makes the length infinite
    if profile.sprime is None:
        return False
    x, sp = profile.s, profile.sprime
    if end == "left":
        d = x[1:6] - x[0]
        f = sp[1:6]
    else:
        d = x[-1] - x[-6:-1]
        f = sp[-6:-1]
    if np.any(d <= 0):
        return False
    slope = np.polyfit(np.log(d), np.log(f), 1)[0]
    return slope <= -1.0 + 1e-3


def classify_end(profile, end="left", tol=1e-6):
    """Topological/smoothness type of one end of the interval."""
    if end not in ("left", "right"):
        raise ValueError("end must be 'left' or 'right'")
    if _length_diverges(profile, end):
        return EndClassification("InfiniteLength")
    i = 0 if end == "left" else -1
    sign = 1.0 if end == "left" else -1.0
    s = profile.arclength
    m = 3
    xs = s[:m] if end == "left" else s[-m:]
    w0 = _onesided_weights(xs, s[i], 0)
    w1 = _onesided_weights(xs, s[i], 1)
    sl = slice(0, m) if end == "left" else slice(-m, None)
    psi0 = float(w0 @ profile.psi[sl])
    phi0 = float(w0 @ profile.phi[sl])
    dpsi = sign * float(w1 @ profile.psi[sl])
    dphi = sign * float(w1 @ profile.phi[sl])
    zpsi = abs(psi0) <= tol
    zphi = abs(phi0) <= tol
    if zpsi and zphi:
        return EndClassification("ConeOverProduct")
    if zphi and not zpsi:
        return EndClassification("SpTimesDisk", [("dpsi_ds", abs(dpsi)), ("dphi_ds_minus_1", abs(dphi - 1.0))])
    if zpsi and not zphi:
        return EndClassification("SqTimesDisk", [("dphi_ds", abs(dphi)), ("dpsi_ds_minus_1", abs(dpsi - 1.0))])
    if abs(dpsi) <= tol and abs(dphi) <= tol:
        return EndClassification("SmoothClosed", [("dpsi_ds", abs(dpsi)), ("dphi_ds", abs(dphi))])
    return EndClassification("Indeterminate", [("dpsi_ds", abs(dpsi)), ("dphi_ds", abs(dphi))])


def write_profile_csv(path, profile):
    if profile.x_gauge:
        io.write_csv(path, ["x", "sprime", "psi", "phi"],
                     [profile.s, profile.sprime, profile.psi, profile.phi])
    else:
        io.write_csv(path, ["s", "psi", "phi"], [profile.s, profile.psi, profile.phi])


def read_profile_csv(path, p, q, **kw):
    d = io.read_csv(path)
    if "x" in d:
        return WarpedProfile(p, q, d["x"], d["psi"], d["phi"], sprime=d["sprime"], **kw)
    return WarpedProfile(p, q, d["s"], d["psi"], d["phi"], **kw)
