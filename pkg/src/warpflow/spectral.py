"""Linearization at the shrinking cylinder and the pre-singular profiles.

Self-similar variables near a pinch at time T: sigma = s/sqrt(T-t),
tau = -log(T-t), Phi = phi/sqrt(T-t) = alpha_q (1 + Phi~), and
psi = s (1 + psi~).
"""
import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.interpolate import CubicSpline

from ._fd import cumtrapz0, deriv

log = logging.getLogger(__name__)


def alpha(q):
    return float(np.sqrt(2.0 * (q - 1)))


@dataclass
class SigmaFunction:
    """Samples of a function of sigma >= 0 with a parity flag for sigma < 0."""
    sigma: np.ndarray
    values: np.ndarray
    parity: str = "even"

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, float)
        self.values = np.asarray(self.values, float)
        if self.sigma.shape != self.values.shape or self.sigma.ndim != 1:
            raise ValueError("sigma and values must be 1-d arrays of equal length")
        if self.parity not in ("even", "odd"):
            raise ValueError("parity must be 'even' or 'odd'")
        if self.sigma[0] != 0.0 or np.any(np.diff(self.sigma) <= 0):
            raise ValueError("sigma must start at 0 and increase")

    @classmethod
    def sample(cls, fn, sigma, parity="even"):
        sigma = np.asarray(sigma, float)
        return cls(sigma, fn(sigma), parity)


def _drift_diffusion(f, p):
    # f'' + (p/sigma) f' - (sigma/2) f', with p f''(0) at the origin
    s = f.sigma
    d1 = deriv(s, f.values, 1, left="even")
    d2 = deriv(s, f.values, 2, left="even")
    out = d2 - 0.5 * s * d1
    out[1:] += p * d1[1:] / s[1:]
    out[0] += p * d2[0]
    return out, d1, d2


def apply_L_phi(f, p):
    """L_Phi f = f'' + (p/sigma) f' - (sigma/2) f' + f for even f."""
    if f.parity != "even":
        raise ValueError("L_Phi acts on even functions")
    out, _, _ = _drift_diffusion(f, p)
    return SigmaFunction(f.sigma, out + f.values, "even")


def apply_L_psi(f, p, tol=1e-12):
    """L_Psi on the psi~ class (even, vanishing at 0), including the nonlocal term.

    L_Psi f = f'' + (p/s) f' - (s/2) f' + 2(p-1) f/s^2 - (2p/s) int_0^s f'(r)/r dr.
    """
    if f.parity != "even":
        raise ValueError("L_Psi acts on even functions")
    scale = max(1.0, float(np.max(np.abs(f.values))))
    if abs(f.values[0]) > tol * scale:
        raise ValueError(f"L_Psi needs f(0) = 0, got {f.values[0]!r}")
    s = f.sigma
    out, d1, d2 = _drift_diffusion(f, p)
    g = np.empty_like(s)
    g[1:] = d1[1:] / s[1:]
    g[0] = d2[0]  # f'/s -> f''(0) for the quadratic leading term
    I = cumtrapz0(s, g)
    out[1:] += 2.0 * (p - 1) * f.values[1:] / s[1:] ** 2 - 2.0 * p * I[1:] / s[1:]
    out[0] += (p - 1) * d2[0] - 2.0 * p * g[0]
    return SigmaFunction(s, out, "even")


def stencil_bound(f, order=2):
    """Rough size of the truncation plus rounding error of the second-order stencils."""
    s, y = f.sigma, f.values
    h = float(np.max(np.diff(s)))
    d4 = deriv(s, deriv(s, deriv(s, y, 2, left="even"), 1, left="odd"), 1, left="even")
    trunc = h ** order * float(np.max(np.abs(d4))) / 6.0
    ymax = float(np.max(np.abs(y)))
    xmax = float(s[-1])
    rnd = 64.0 * np.finfo(float).eps * ymax * (1.0 / float(np.min(np.diff(s))) ** 2 + xmax ** 2)
    return trunc + rnd


# ----------------------------------------------------------------------------
# monomial action

def psi_coefficient(p, k):
    """Coefficient of sigma^(2k-2) in L_Psi[sigma^(2k)] as an exact rational."""
    k = Fraction(k)
    return 2 * k * (2 * k - 1) + 2 * p * k + 2 * (p - 1) - Fraction(4 * p) * k / (2 * k - 1)


@dataclass
class MonomialMatrix:
    """Entry (j, k): coefficient of sigma^(2j) in L_Psi[sigma^(2k)], 0 <= j, k <= K.

    Column 0 (the constant) is outside the psi~ class and kept as zeros.
    """
    p: int
    K: int
    entries: list

    @property
    def diagonal(self):
        return [self.entries[k][k] for k in range(1, self.K + 1)]

    def lower_is_zero(self):
        return all(self.entries[j][k] == 0 for j in range(self.K + 1) for k in range(j))

    def as_float(self):
        return np.array([[float(x) for x in row] for row in self.entries])

    def apply(self, coeffs):
        """Image of sum_k coeffs[k] sigma^(2k) as a coefficient list."""
        c = list(coeffs) + [0] * (self.K + 1 - len(coeffs))
        return [sum(self.entries[j][k] * c[k] for k in range(self.K + 1))
                for j in range(self.K + 1)]

    def to_dict(self):
        return {"p": self.p, "K": self.K,
                "entries": [[str(x) for x in row] for row in self.entries]}


def monomial_matrix(p, K):
    if K < 2:
        raise ValueError("K must be at least 2")
    E = [[Fraction(0)] * (K + 1) for _ in range(K + 1)]
    for k in range(1, K + 1):
        E[k][k] = Fraction(-k)
        E[k - 1][k] = psi_coefficient(p, k)
    return MonomialMatrix(p, K, E)


def leading_psi_rate(p, sigma_max=8.0, n=401, dtau=0.05, steps=200, seed=0):
    """Decay rate of the slowest psi~ mode from implicit-Euler iteration in tau.

    The discretized L_Psi is applied to node values with f(0) = 0 pinned;
    norms use the weight sigma^p exp(-sigma^2/4).
    """
    s = np.linspace(0.0, sigma_max, n)
    M = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[:] = 0.0
        e[j] = 1.0
        if j == 0:
            M[:, 0] = 0.0
            continue
        M[:, j] = apply_L_psi(SigmaFunction(s, e.copy()), p).values
    M[0, :] = 0.0
    A = np.eye(n) - dtau * M
    A[0, :] = 0.0
    A[0, 0] = 1.0
    rng = np.random.default_rng(seed)
    f = s ** 2 * (1.0 + 0.1 * rng.standard_normal(n)) * np.exp(-s ** 2 / 16)
    f[0] = 0.0
    w = s ** p * np.exp(-s ** 2 / 4)
    nrm = lambda y: np.sqrt(np.trapezoid(w * y * y, s))
    rates = []
    for _ in range(steps):
        g = np.linalg.solve(A, f)
        g[0] = 0.0
        rates.append(np.log(nrm(g) / nrm(f)) / dtau)
        f = g / nrm(g)
    # implicit Euler maps lambda to -log(1 - dtau lambda)/dtau
    mu = rates[-1]
    return float((1.0 - np.exp(-mu * dtau)) / dtau)


# ----------------------------------------------------------------------------
# profiles

def neck_profile(k, p, q, sigma, tau):
    """Psi = sigma, Phi = alpha_q (1 + k (sigma^2 - 2(p+1))/tau)."""
    if not tau > 1:
        raise ValueError("tau must exceed 1")
    sigma = np.asarray(sigma, float)
    return sigma.copy(), alpha(q) * (1.0 + k * (sigma ** 2 - 2.0 * (p + 1)) / tau)


def intermediate_profile(k, q, xi):
    """Y~ = 0 and Phi_int = alpha_q sqrt(2 k xi^2 + 1) for xi = sigma/sqrt(tau)."""
    xi = np.asarray(xi, float)
    if np.any(xi < 0):
        raise ValueError("xi must be nonnegative")
    return np.zeros_like(xi), alpha(q) * np.sqrt(2.0 * k * xi ** 2 + 1.0)


def intermediate_residual(k, q, xi):
    """-xi Phi'/2 - (q-1)/Phi + Phi/2 with the closed-form derivative."""
    _, Phi = intermediate_profile(k, q, xi)
    xi = np.asarray(xi, float)
    dPhi = alpha(q) * 2.0 * k * xi / np.sqrt(2.0 * k * xi ** 2 + 1.0)
    return -0.5 * xi * dPhi - (q - 1) / Phi + 0.5 * Phi


def final_profile(k, q, s):
    """Leading order at the singular time: psi = s, phi = alpha_q sqrt(k) s/sqrt|log s|."""
    s = np.asarray(s, float)
    if np.any(s >= 1) or np.any(s <= 0):
        raise ValueError("final profile needs 0 < s < 1")
    return s.copy(), alpha(q) * np.sqrt(k) * s / np.sqrt(np.abs(np.log(s)))


def final_profile_slope(k, q, s):
    """d phi/ds of the final profile."""
    s = np.asarray(s, float)
    L = np.abs(np.log(s))
    return alpha(q) * np.sqrt(k) * (1.0 / np.sqrt(L) + 0.5 * L ** -1.5)


def theorem_constant(k_here, q):
    """Constant of the cone asymptotics phi ~ k s/sqrt|log s| for a fitted k."""
    return alpha(q) * np.sqrt(k_here)


# ----------------------------------------------------------------------------
# diagnostics on a pinching trajectory

def gauss_weight_nodes(p, n=64, wmin=1e-12):
    """Gauss-Legendre nodes and weights for the measure sigma^p exp(-sigma^2/4) on [0, sigma_max]."""
    smax = 2.0
    while smax ** p * np.exp(-smax ** 2 / 4) >= wmin or smax < 2 * np.sqrt(max(p, 1)):
        smax += 0.25
    x, w = np.polynomial.legendre.leggauss(n)
    s = 0.5 * smax * (x + 1.0)
    return s, 0.5 * smax * w * s ** p * np.exp(-s ** 2 / 4), smax


def nullspace_amplitude(sigma, phit, p, n=64):
    """Weighted projection of Phi~ onto sigma^2 - 2(p+1); returns (amplitude, sigma_used)."""
    s, w, smax = gauss_weight_nodes(p, n)
    use = min(smax, float(sigma[-1]))
    if use < smax:
        log.info("nullspace_amplitude: data ends at sigma=%.4g before weight cutoff %.4g", use, smax)
        s, w, _ = _truncate(s, w, use)
    f = CubicSpline(sigma, phit, bc_type=((1, 0.0), "not-a-knot"))(s)
    e = s ** 2 - 2.0 * (p + 1)
    return float(np.sum(w * f * e) / np.sum(w * e * e)), use


def _truncate(s, w, smax):
    m = s <= smax
    return s[m], w[m], smax


def _profile_arrays(state):
    s = getattr(state, "arclength", None)
    if s is None:
        from .evolution import from_radial
        state = from_radial(state)
        s = state.arclength
    return np.asarray(s, float) - float(s[0]), np.asarray(state.psi, float), np.asarray(state.phi, float)


def presingular_diagnostics(trajectory, singularity=None, n_last=None, xi_fixed=0.2,
                            s_sharp=(0.4, 0.2, 0.1)):
    """Rescale snapshots near the pinch and fit the nullspace amplitude k(tau).

    The pinch must sit at the left end of the profile (where psi closes).
    Returns a dict with the k(tau) series and the convergence checks.
    """
    from .solver import detect_singularity
    sing = singularity or detect_singularity(trajectory)
    if sing is None:
        raise ValueError("no singularity in trajectory")
    T = float(sing["time"])
    snaps = [(t, st) for t, st in trajectory.snapshots if 0 < T - t]
    if n_last:
        snaps = snaps[-n_last:]
    st0 = snaps[0][1]
    p, q = st0.p, st0.q
    aq = alpha(q)
    rows = []
    outer = []
    prev = None
    for t, st in snaps:
        s, psi, phi = _profile_arrays(st)
        lam = np.sqrt(T - t)
        tau = -np.log(T - t)
        sig = s / lam
        phit = phi / (lam * aq) - 1.0
        amp, used = nullspace_amplitude(sig, phit, p)
        m = (sig > 0) & (sig <= min(used, sig[-1]))
        ypsi = float(np.max(np.abs(psi[m] / s[m] - 1.0))) if m.any() else float("nan")
        sig_xi = xi_fixed * np.sqrt(tau)
        if sig_xi <= sig[-1]:
            Phi_xi = float(np.interp(sig_xi, sig, phi / lam))
            k_est = tau * amp
            _, Pint = intermediate_profile(max(k_est, 0.0), q, xi_fixed)
            res_int = float(abs(Phi_xi - Pint) / Pint)
        else:
            res_int = float("nan")
        rows.append({"t": float(t), "tau": float(tau), "amplitude": amp, "k_tau": float(tau * amp),
                     "sigma_used": used, "psi_tilde_sup": ypsi, "intermediate_rel": res_int})
        if prev is not None:
            t0, s0, ps0, ph0 = prev
            dt = t - t0
            row = {"t": float(t)}
            for ss in s_sharp:
                if ss <= min(s[-1], s0[-1]):
                    dps = (np.interp(ss, s, psi) - np.interp(ss, s0, ps0)) / dt
                    dph = (np.interp(ss, s, phi) - np.interp(ss, s0, ph0)) / dt
                    row[f"psi@{ss!r}"] = float((T - t) * abs(dps) / np.interp(ss, s, psi))
                    row[f"phi@{ss!r}"] = float((T - t) * abs(dph) / np.interp(ss, s, phi))
            outer.append(row)
        prev = (t, s, psi, phi)
    ks = np.array([r["k_tau"] for r in rows])
    taus = np.array([r["tau"] for r in rows])
    last = taus >= taus[-1] - np.log(10.0)
    drift = float((ks[last].max() - ks[last].min()) / max(abs(ks[last][-1]), 1e-300)) if last.sum() > 1 else float("nan")
    return {"T": T, "p": p, "q": q, "k_series": rows, "outer": outer,
            "k_last": float(ks[-1]), "k_drift_last_decade": drift}


def operator_checks(ps=(0, 1, 2, 3), K=8, n=201, sigma_max=8.0):
    """Nullspace, triangularity and monomial checks; each entry carries a PASS flag."""
    s = np.linspace(0.0, sigma_max, n)
    out = {"nullspace": [], "monomial": [], "psi_sigma2": [], "intermediate": None}
    for p in ps:
        f = SigmaFunction.sample(lambda x: x ** 2 - 2.0 * (p + 1), s)
        res = float(np.max(np.abs(apply_L_phi(f, p).values)))
        bound = stencil_bound(f)
        out["nullspace"].append({"p": p, "residual": res, "bound": bound, "pass": bool(res < 10 * bound)})
        M = monomial_matrix(p, K)
        ok = M.lower_is_zero() and M.diagonal == [Fraction(-k) for k in range(1, K + 1)]
        out["monomial"].append({"p": p, "K": K, "pass": bool(ok)})
        g = SigmaFunction.sample(lambda x: x ** 2, s)
        r2 = float(np.max(np.abs(apply_L_psi(g, p).values + s ** 2)))
        qb = stencil_bound(g)
        out["psi_sigma2"].append({"p": p, "residual": r2, "bound": qb, "pass": bool(r2 < 10 * qb)})
    xi = np.linspace(0.0, 3.0, 20)
    worst = max(float(np.max(np.abs(intermediate_residual(k, q, xi))))
                for k in (0.1, 0.5, 1.0) for q in (2, 3, 4))
    out["intermediate"] = {"residual": worst, "pass": bool(worst < 1e-10)}
    out["pass"] = bool(all(r["pass"] for key in ("nullspace", "monomial", "psi_sigma2")
                           for r in out[key]) and out["intermediate"]["pass"])
    return out
